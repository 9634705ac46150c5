use crate::error::{Error, Result};
use crate::numerics::{causal_conv, FilterBank, SeqTensor};
use crate::rng::Rng;

pub const DEFAULT_SHORT_TAPS: usize = 3;

/// Hyena operator of order `L`: a projection to `(L+1)·d` channels, a short
/// causal convolution, then `L` gated long convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct HyenaParams {
    /// `d × (L+1)d`
    pub w_in: SeqTensor,
    pub b_in: Vec<f64>,
    /// Short filter: `taps × (L+1)d`.
    pub short: FilterBank,
    /// One `N × d` long filter per order.
    pub filters: Vec<FilterBank>,
}

impl HyenaParams {
    pub fn order(&self) -> usize {
        self.filters.len()
    }

    pub fn random(n: usize, d: usize, order: usize, rng: &mut Rng) -> Self {
        let width = (order + 1) * d;
        HyenaParams {
            w_in: SeqTensor::random_normal(d, width, 1.0 / (d as f64).sqrt(), rng),
            b_in: SeqTensor::random_normal(1, width, 0.1, rng).into_vec(),
            short: FilterBank::from_tensor(SeqTensor::random_normal(DEFAULT_SHORT_TAPS, width, 0.5, rng)),
            filters: (0..order)
                .map(|_| FilterBank::from_tensor(SeqTensor::random_normal(n, d, 1.0 / (n as f64).sqrt(), rng)))
                .collect(),
        }
    }
}

/// Gates `p¹..p^L` and the value stream `v`, after the short convolution.
pub fn hyena_projections(u: &SeqTensor, p: &HyenaParams) -> Result<(Vec<SeqTensor>, SeqTensor)> {
    let (n, d) = u.shape();
    let order = p.order();
    let width = (order + 1) * d;
    if order == 0 {
        return Err(Error::invalid("hyena order must be at least 1"));
    }
    if p.w_in.shape() != (d, width) || p.b_in.len() != width || p.short.channels() != width {
        return Err(Error::shape(format!("hyena projection does not fit d={d}, order={order}")));
    }
    if p.short.length() > n {
        return Err(Error::shape("short filter longer than the sequence"));
    }
    if p.filters.iter().any(|f| f.length() != n || f.channels() != d) {
        return Err(Error::shape("hyena long filters must be N x d"));
    }
    let mut z = u.matmul(&p.w_in)?;
    for i in 0..n {
        for (x, b) in z.row_mut(i).iter_mut().zip(&p.b_in) {
            *x += b;
        }
    }
    let z = causal_conv(&z, &p.short.resized(n))?;
    let gates = (0..order).map(|l| z.slice_cols(l * d, (l + 1) * d)).collect();
    Ok((gates, z.slice_cols(order * d, width)))
}

pub fn hyena_forward(u: &SeqTensor, p: &HyenaParams) -> Result<SeqTensor> {
    let (gates, mut z) = hyena_projections(u, p)?;
    for (gate, h) in gates.iter().zip(&p.filters) {
        z = gate.hadamard(&causal_conv(&z, h)?)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::baseconv::{baseconv_forward, BaseConvParams};
    use crate::rng::rng_from;

    fn naive(u: &SeqTensor, p: &HyenaParams) -> SeqTensor {
        let (n, d) = u.shape();
        let width = p.w_in.cols();
        let mut lin = vec![vec![0.0; width]; n];
        for i in 0..n {
            for c in 0..width {
                lin[i][c] = p.b_in[c] + (0..d).map(|k| u[(i, k)] * p.w_in[(k, c)]).sum::<f64>();
            }
        }
        let mut proj = vec![vec![0.0; width]; n];
        for i in 0..n {
            for c in 0..width {
                for j in 0..p.short.length().min(i + 1) {
                    proj[i][c] += p.short.coef(j, c) * lin[i - j][c];
                }
            }
        }
        let order = p.filters.len();
        let mut z: Vec<Vec<f64>> = (0..n).map(|i| proj[i][order * d..].to_vec()).collect();
        for l in 0..order {
            let mut next = vec![vec![0.0; d]; n];
            for i in 0..n {
                for t in 0..d {
                    let conv: f64 = (0..=i).map(|j| p.filters[l].coef(j, t) * z[i - j][t]).sum();
                    next[i][t] = proj[i][l * d + t] * conv;
                }
            }
            z = next;
        }
        SeqTensor::from_rows(&z).unwrap()
    }

    #[test]
    fn unit_gate_returns_value_slice() {
        let (n, d) = (6, 2);
        let mut rng = rng_from(1);
        let mut w_in = SeqTensor::zeros(d, 2 * d);
        let v_map = SeqTensor::random_normal(d, d, 1.0, &mut rng);
        for k in 0..d {
            for t in 0..d {
                w_in[(k, d + t)] = v_map[(k, t)];
            }
        }
        let mut b_in = vec![0.0; 2 * d];
        b_in[..d].fill(1.0);
        let p = HyenaParams {
            w_in,
            b_in,
            short: FilterBank::impulse(3, 2 * d, 0),
            filters: vec![FilterBank::impulse(n, d, 0)],
        };
        let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
        assert!(hyena_forward(&u, &p).unwrap().max_abs_diff(&u.matmul(&v_map).unwrap()) < 1e-12);
    }

    #[test]
    fn order_one_is_a_baseconv() {
        let mut rng = rng_from(2);
        let (n, d) = (12, 3);
        let p = HyenaParams::random(n, d, 1, &mut rng);
        let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
        let (gates, v) = hyena_projections(&u, &p).unwrap();
        let bc = BaseConvParams { b1: gates[0].clone(), h: p.filters[0].clone(), ..BaseConvParams::zeros(n, d) };
        let via = baseconv_forward(&v, &bc).unwrap();
        assert!(via.max_abs_diff(&hyena_forward(&u, &p).unwrap()) < 1e-12);
    }

    #[test]
    fn matches_naive() {
        let mut rng = rng_from(3);
        for (n, d, order) in [(5, 2, 1), (33, 3, 2), (64, 2, 3)] {
            let p = HyenaParams::random(n, d, order, &mut rng);
            let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
            assert!(hyena_forward(&u, &p).unwrap().max_abs_diff(&naive(&u, &p)) < 1e-9);
        }
    }
}
