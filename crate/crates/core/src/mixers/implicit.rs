use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{FilterBank, SeqTensor};
use crate::rng::Rng;

/// Two-layer MLP mapping positional features to one tap per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitFilterParams {
    pub emb_dim: usize,
    /// `emb_dim × hidden`
    pub w1: SeqTensor,
    pub b1: Vec<f64>,
    /// `hidden × d`
    pub w2: SeqTensor,
    pub b2: Vec<f64>,
}

pub const DEFAULT_HIDDEN: usize = 16;

impl ImplicitFilterParams {
    pub fn zeros(emb_dim: usize, d: usize) -> Self {
        ImplicitFilterParams {
            emb_dim,
            w1: SeqTensor::zeros(emb_dim, DEFAULT_HIDDEN),
            b1: vec![0.0; DEFAULT_HIDDEN],
            w2: SeqTensor::zeros(DEFAULT_HIDDEN, d),
            b2: vec![0.0; d],
        }
    }

    pub fn random(emb_dim: usize, d: usize, rng: &mut Rng) -> Self {
        ImplicitFilterParams {
            emb_dim,
            w1: SeqTensor::random_normal(emb_dim, DEFAULT_HIDDEN, 1.0 / (emb_dim as f64).sqrt(), rng),
            b1: SeqTensor::random_normal(1, DEFAULT_HIDDEN, 0.1, rng).into_vec(),
            w2: SeqTensor::random_normal(DEFAULT_HIDDEN, d, 0.25, rng),
            b2: SeqTensor::random_normal(1, d, 0.1, rng).into_vec(),
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Features `[t, Re e^{−i f w}, Im e^{−i f w}]` per position (`n × emb_dim`).
pub fn positional_embedding(emb_dim: usize, n: usize) -> Result<SeqTensor> {
    if emb_dim < 3 || emb_dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("embedding width must be odd and at least 3, got {emb_dim}")));
    }
    let bands = (emb_dim - 1) / 2;
    let t = linspace(0.0, 1.0, n);
    let t_rescaled = linspace(0.0, n as f64 - 1.0, n);
    let f = linspace(1e-4, bands as f64 - 1.0, bands);
    let mut z = SeqTensor::zeros(n, emb_dim);
    for i in 0..n {
        let w = 2.0 * PI * t_rescaled[i] / n as f64;
        z[(i, 0)] = t[i];
        for (b, fb) in f.iter().enumerate() {
            let angle = -fb * w;
            z[(i, 1 + b)] = angle.cos();
            z[(i, 1 + bands + b)] = angle.sin();
        }
    }
    Ok(z)
}

/// Evaluates the MLP at every position to produce an `n`-tap filter bank.
pub fn implicit_filter(p: &ImplicitFilterParams, n: usize) -> Result<FilterBank> {
    let z = positional_embedding(p.emb_dim, n)?;
    if p.w1.rows() != p.emb_dim || p.b1.len() != p.w1.cols() || p.w2.rows() != p.w1.cols() || p.b2.len() != p.w2.cols()
    {
        return Err(Error::shape("implicit filter MLP shapes"));
    }
    let mut hidden = z.matmul(&p.w1)?;
    for i in 0..n {
        for (x, b) in hidden.row_mut(i).iter_mut().zip(&p.b1) {
            *x = (*x + b).max(0.0);
        }
    }
    let mut out = hidden.matmul(&p.w2)?;
    for i in 0..n {
        for (x, b) in out.row_mut(i).iter_mut().zip(&p.b2) {
            *x += b;
        }
    }
    Ok(FilterBank::from_tensor(out))
}
