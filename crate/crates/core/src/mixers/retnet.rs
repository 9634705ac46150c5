use crate::error::{Error, Result};
use crate::numerics::{gemm, SeqTensor};
use crate::rng::Rng;

/// Retention with a scalar decay: state `z^n = γ z^{n−1} + A[n]ᵀ V[n]`,
/// output `C[n] z^n`, where `A = u W_A`, `C = u W_C`, `V = u W_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetNetParams {
    pub wa: SeqTensor,
    pub wc: SeqTensor,
    pub wv: SeqTensor,
    pub gamma: f64,
}

impl RetNetParams {
    pub fn random(d: usize, gamma: f64, rng: &mut Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        RetNetParams {
            wa: SeqTensor::random_normal(d, d, s, rng),
            wc: SeqTensor::random_normal(d, d, s, rng),
            wv: SeqTensor::random_normal(d, d, s, rng),
            gamma,
        }
    }

    fn check(&self, u: &SeqTensor) -> Result<()> {
        let d = u.cols();
        if self.wa.rows() != d || self.wc.rows() != d || self.wv.rows() != d || self.wa.cols() != self.wc.cols() {
            return Err(Error::shape(format!("retention projections do not fit d={d}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("decay {} outside [0,1]", self.gamma)));
        }
        Ok(())
    }
}

/// Every recurrent state `z^0..z^{N−1}`.
pub fn retnet_states(u: &SeqTensor, p: &RetNetParams) -> Result<Vec<SeqTensor>> {
    p.check(u)?;
    let a = u.matmul(&p.wa)?;
    let v = u.matmul(&p.wv)?;
    let mut z = SeqTensor::zeros(a.cols(), v.cols());
    let mut out = Vec::with_capacity(u.rows());
    for n in 0..u.rows() {
        let outer = a.slice_rows(n, n + 1);
        let vn = v.slice_rows(n, n + 1);
        let mut next = z.scale(p.gamma);
        gemm(1.0, &outer, true, &vn, false, 1.0, &mut next);
        z = next;
        out.push(z.clone());
    }
    Ok(out)
}

pub fn retnet_forward(u: &SeqTensor, p: &RetNetParams) -> Result<SeqTensor> {
    let states = retnet_states(u, p)?;
    let c = u.matmul(&p.wc)?;
    let mut y = SeqTensor::zeros(u.rows(), p.wv.cols());
    for (n, z) in states.iter().enumerate() {
        let out = c.slice_rows(n, n + 1).matmul(z)?;
        y.row_mut(n).copy_from_slice(out.data());
    }
    Ok(y)
}

/// `z^n = W_Aᵀ (Σ_{i≤n} γ^{n−i} u[i]ᵀ u[i]) W_V`.
pub fn retnet_state_closed_form(u: &SeqTensor, p: &RetNetParams, n: usize) -> Result<SeqTensor> {
    p.check(u)?;
    let d = u.cols();
    let mut m = SeqTensor::zeros(d, d);
    for i in 0..=n {
        let w = p.gamma.powi((n - i) as i32);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] += w * u[(i, r)] * u[(i, c)];
            }
        }
    }
    p.wa.transpose().matmul(&m)?.matmul(&p.wv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::one_hot_embed;
    use crate::rng::rng_from;

    #[test]
    fn recurrence_equals_closed_form() {
        let mut rng = rng_from(1);
        for gamma in [1.0, 0.9, 0.3] {
            let p = RetNetParams::random(4, gamma, &mut rng);
            let u = SeqTensor::random_normal(64, 4, 1.0, &mut rng);
            let states = retnet_states(&u, &p).unwrap();
            for n in [0, 1, 17, 63] {
                let cf = retnet_state_closed_form(&u, &p, n).unwrap();
                assert!(states[n].max_abs_diff(&cf) < 1e-8);
            }
        }
    }

    #[test]
    fn identity_weights_count_prefix_tokens() {
        let toks = [0, 2, 0, 1, 0];
        let u = one_hot_embed(&toks, 3).unwrap();
        let p = RetNetParams { wa: SeqTensor::identity(3), wc: SeqTensor::identity(3), wv: SeqTensor::identity(3), gamma: 1.0 };
        let y = retnet_forward(&u, &p).unwrap();
        for n in 0..toks.len() {
            let count = toks[..=n].iter().filter(|&&t| t == toks[n]).count() as f64;
            for c in 0..3 {
                let want = if c == toks[n] as usize { count } else { 0.0 };
                assert_eq!(y[(n, c)], want);
            }
        }
    }

    #[test]
    fn zero_decay_uses_current_step() {
        let mut rng = rng_from(2);
        let p = RetNetParams::random(3, 0.0, &mut rng);
        let u = SeqTensor::random_normal(6, 3, 1.0, &mut rng);
        let y = retnet_forward(&u, &p).unwrap();
        let a = u.matmul(&p.wa).unwrap();
        let c = u.matmul(&p.wc).unwrap();
        let v = u.matmul(&p.wv).unwrap();
        for n in 0..6 {
            let ca: f64 = (0..3).map(|k| c[(n, k)] * a[(n, k)]).sum();
            for t in 0..3 {
                assert!((y[(n, t)] - ca * v[(n, t)]).abs() < 1e-12);
            }
        }
        assert!(retnet_forward(&u, &RetNetParams { gamma: 1.5, ..p }).is_err());
    }
}
