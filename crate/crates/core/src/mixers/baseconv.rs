use crate::error::{Error, Result};
use crate::numerics::{causal_conv_with, circular_conv_with, ConvPath, FilterBank, SeqTensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    #[default]
    Causal,
    Circular,
}

/// One gated-convolution layer: `y = (u·W + b1) ⊙ (h ∗ u + b2)`, plus `u` when
/// `residual` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseConvParams {
    pub w: SeqTensor,
    pub h: FilterBank,
    pub b1: SeqTensor,
    pub b2: SeqTensor,
    pub mode: ConvMode,
    pub residual: bool,
}

impl BaseConvParams {
    /// All-zero parameters for an `n × d` input, no residual.
    pub fn zeros(n: usize, d: usize) -> Self {
        BaseConvParams {
            w: SeqTensor::zeros(d, d),
            h: FilterBank::zeros(n, d),
            b1: SeqTensor::zeros(n, d),
            b2: SeqTensor::zeros(n, d),
            mode: ConvMode::Causal,
            residual: false,
        }
    }

    pub fn random(n: usize, d: usize, rng: &mut Rng) -> Self {
        BaseConvParams {
            w: SeqTensor::random_normal(d, d, 1.0 / (d as f64).sqrt(), rng),
            h: FilterBank::from_tensor(SeqTensor::random_normal(n, d, 1.0 / (n as f64).sqrt(), rng)),
            b1: SeqTensor::random_normal(n, d, 0.1, rng),
            b2: SeqTensor::random_normal(n, d, 0.1, rng),
            mode: ConvMode::Causal,
            residual: true,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w.data().len() + self.h.data().len() + self.b1.data().len() + self.b2.data().len()
    }
}

pub fn baseconv_forward(u: &SeqTensor, p: &BaseConvParams) -> Result<SeqTensor> {
    baseconv_forward_with(u, p, ConvPath::Auto)
}

pub fn baseconv_forward_with(u: &SeqTensor, p: &BaseConvParams, path: ConvPath) -> Result<SeqTensor> {
    let (n, d) = u.shape();
    if p.w.shape() != (d, d) || p.b1.shape() != (n, d) || p.b2.shape() != (n, d) {
        return Err(Error::shape(format!("baseconv parameters do not fit a {n}x{d} input")));
    }
    let gate = u.matmul(&p.w)?.add(&p.b1)?;
    let conv = match p.mode {
        ConvMode::Causal => causal_conv_with(u, &p.h, path)?,
        ConvMode::Circular => circular_conv_with(u, &p.h, path)?,
    };
    let mut y = gate.hadamard(&conv.add(&p.b2)?)?;
    if p.residual {
        y.add_assign(u)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn identity_and_linear_cases() {
        let mut rng = rng_from(1);
        let u = SeqTensor::random_normal(8, 3, 1.0, &mut rng);
        let mut p = BaseConvParams::zeros(8, 3);
        p.b1 = SeqTensor::filled(8, 3, 1.0);
        p.h = FilterBank::impulse(8, 3, 0);
        assert_eq!(baseconv_forward(&u, &p).unwrap(), u);

        let w = SeqTensor::random_normal(3, 3, 1.0, &mut rng);
        let lin = BaseConvParams { w: w.clone(), b2: SeqTensor::filled(8, 3, 1.0), ..BaseConvParams::zeros(8, 3) };
        assert!(baseconv_forward(&u, &lin).unwrap().max_abs_diff(&u.matmul(&w).unwrap()) < 1e-15);
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = rng_from(2);
        for n in [5, 40, 64] {
            let d = 3;
            let p = BaseConvParams::random(n, d, &mut rng);
            let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
            let y = baseconv_forward(&u, &p).unwrap();
            for i in 0..n {
                for t in 0..d {
                    let g: f64 = (0..d).map(|c| u[(i, c)] * p.w[(c, t)]).sum::<f64>() + p.b1[(i, t)];
                    let cv: f64 = (0..=i).map(|j| p.h.coef(j, t) * u[(i - j, t)]).sum::<f64>() + p.b2[(i, t)];
                    assert!((y[(i, t)] - (g * cv + u[(i, t)])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let u = SeqTensor::zeros(4, 2);
        assert!(baseconv_forward(&u, &BaseConvParams::zeros(5, 2)).is_err());
    }
}
