use crate::error::{Error, Result};
use crate::numerics::{causal_conv, sigmoid, softmax_in_place, FilterBank, SeqTensor};
use crate::rng::Rng;

/// RWKV-style time mixing: token shift `[μ, 1−μ]`, projection to `q, k, v`,
/// then `σ(q) ⊙ (h ∗ (softmax(k) ⊙ v))` with an exponential decay filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RwkvParams {
    /// Per-channel shift mix in `[0, 1]`.
    pub mu: Vec<f64>,
    /// `d × 3d`
    pub w_qkv: SeqTensor,
    /// Per-channel decay rate `w`.
    pub decay: Vec<f64>,
}

impl RwkvParams {
    pub fn random(d: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        RwkvParams {
            mu: (0..d).map(|_| rng.random::<f64>()).collect(),
            w_qkv: SeqTensor::random_normal(d, 3 * d, 1.0 / (d as f64).sqrt(), rng),
            decay: (0..d).map(|_| -rng.random_range(0.05..1.0)).collect(),
        }
    }
}

/// `h[0,t] = 1`, `h[i,t] = e^{w_t (i−1)}` for `i ≥ 1`.
pub fn rwkv_decay_filter(decay: &[f64], n: usize) -> FilterBank {
    FilterBank::from_fn(n, decay.len(), |i, t| if i == 0 { 1.0 } else { (decay[t] * (i as f64 - 1.0)).exp() })
}

/// `μ ⊙ u[i] + (1 − μ) ⊙ u[i−1]`.
pub fn time_shift(u: &SeqTensor, mu: &[f64]) -> SeqTensor {
    let (n, d) = u.shape();
    SeqTensor::from_fn(n, d, |i, t| mu[t] * u[(i, t)] + if i > 0 { (1.0 - mu[t]) * u[(i - 1, t)] } else { 0.0 })
}

pub fn rwkv_forward(u: &SeqTensor, p: &RwkvParams) -> Result<SeqTensor> {
    let (n, d) = u.shape();
    if p.mu.len() != d || p.decay.len() != d || p.w_qkv.shape() != (d, 3 * d) {
        return Err(Error::shape(format!("rwkv parameters do not fit d={d}")));
    }
    if p.mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::invalid("shift mix outside [0,1]"));
    }
    let x = time_shift(u, &p.mu).matmul(&p.w_qkv)?;
    let q = x.slice_cols(0, d);
    let mut k = x.slice_cols(d, 2 * d);
    let v = x.slice_cols(2 * d, 3 * d);
    for i in 0..n {
        softmax_in_place(k.row_mut(i));
    }
    let mixed = causal_conv(&k.hadamard(&v)?, &rwkv_decay_filter(&p.decay, n))?;
    q.map(sigmoid).hadamard(&mixed)
}
