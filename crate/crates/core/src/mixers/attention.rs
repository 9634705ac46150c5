use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{gemm_raw, sigmoid, softmax_in_place, SeqTensor};
use crate::rng::{rng_from, Rng};
use crate::Token;

/// Query/key/value projections. `wq` and `wk` share their output width;
/// `heads` splits both that width and the value width evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: SeqTensor,
    pub wk: SeqTensor,
    pub wv: SeqTensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(wq: SeqTensor, wk: SeqTensor, wv: SeqTensor) -> Self {
        AttentionParams { wq, wk, wv, heads: 1 }
    }

    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttentionParams::new(
            SeqTensor::random_normal(d, d, std, rng),
            SeqTensor::random_normal(d, d, std, rng),
            SeqTensor::random_normal(d, d, std, rng),
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.wq.data().len() + self.wk.data().len() + self.wv.data().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOpts {
    pub causal: bool,
    pub use_softmax: bool,
    /// Additive `N × N` score bias.
    pub bias: Option<SeqTensor>,
    /// Score scale; defaults to `1/√(head width)`.
    pub scale: Option<f64>,
    /// With `causal`, row `i` sees keys `j ≤ i − causal_offset`.
    pub causal_offset: usize,
}

impl Default for AttentionOpts {
    fn default() -> Self {
        AttentionOpts { causal: true, use_softmax: true, bias: None, scale: None, causal_offset: 0 }
    }
}

/// Window shapes for local attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Token `i` sees `i−w+1 ..= i`.
    Sliding,
    /// Causal attention inside consecutive blocks of `w` tokens.
    Blocked,
}

fn project(u: &SeqTensor, w: &SeqTensor, what: &str) -> Result<SeqTensor> {
    if u.cols() != w.rows() {
        return Err(Error::shape(format!("{what} projection expects {} input channels, got {}", w.rows(), u.cols())));
    }
    u.matmul(w)
}

/// Core evaluation with an arbitrary visibility mask.
fn attend(
    u: &SeqTensor,
    p: &AttentionParams,
    use_softmax: bool,
    bias: Option<&SeqTensor>,
    scale: Option<f64>,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Result<SeqTensor> {
    let n = u.rows();
    let q = project(u, &p.wq, "query")?;
    let k = project(u, &p.wk, "key")?;
    let v = project(u, &p.wv, "value")?;
    if q.cols() != k.cols() {
        return Err(Error::shape("query and key widths differ"));
    }
    let h = p.heads.max(1);
    if q.cols() % h != 0 || v.cols() % h != 0 {
        return Err(Error::shape(format!("{h} heads do not divide widths {} / {}", q.cols(), v.cols())));
    }
    if let Some(b) = bias {
        if b.shape() != (n, n) {
            return Err(Error::shape(format!("bias is {:?}, expected ({n}, {n})", b.shape())));
        }
    }
    let (dk, dv) = (q.cols() / h, v.cols() / h);
    let scale = scale.unwrap_or(1.0 / (dk as f64).sqrt());
    let mut out = SeqTensor::zeros(n, v.cols());
    let mut scores = vec![0.0; n * n];
    for head in 0..h {
        let qo = head * dk;
        let ko = head * dk;
        gemm_raw(scale, &q.data()[qo..], q.cols(), false, &k.data()[ko..], k.cols(), true, 0.0, &mut scores, n, dk, n);
        for i in 0..n {
            let row = &mut scores[i * n..(i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                if let Some(b) = bias {
                    *s += b[(i, j)];
                }
                if !visible(i, j) {
                    *s = if use_softmax { f64::NEG_INFINITY } else { 0.0 };
                }
            }
            if use_softmax {
                softmax_in_place(row);
            }
        }
        let vo = head * dv;
        let mut part = vec![0.0; n * dv];
        gemm_raw(1.0, &scores, n, false, &v.data()[vo..], v.cols(), false, 0.0, &mut part, n, n, dv);
        for i in 0..n {
            out.row_mut(i)[vo..vo + dv].copy_from_slice(&part[i * dv..(i + 1) * dv]);
        }
    }
    Ok(out)
}

/// `scores = q kᵀ · scale (+ bias)`, masked, optionally softmaxed, times `v`.
pub fn attention_forward(u: &SeqTensor, p: &AttentionParams, opts: &AttentionOpts) -> Result<SeqTensor> {
    let off = opts.causal_offset;
    let causal = opts.causal;
    attend(u, p, opts.use_softmax, opts.bias.as_ref(), opts.scale, &move |i, j| !causal || j + off <= i)
}

pub fn windowed_attention(u: &SeqTensor, p: &AttentionParams, w: usize, mode: WindowMode) -> Result<SeqTensor> {
    if w == 0 || w > u.rows() {
        return Err(Error::invalid(format!("window {w} outside 1..={}", u.rows())));
    }
    match mode {
        WindowMode::Sliding => attend(u, p, true, None, None, &|i, j| j <= i && j + w > i),
        WindowMode::Blocked => attend(u, p, true, None, None, &|i, j| j <= i && j / w == i / w),
    }
}

/// Per-token 0/1 selection applied to attention rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectorSpec {
    Full,
    /// Each token kept with probability `p`.
    Random { p: f64, seed: u64 },
    /// Kept iff the token id occurred earlier.
    Programmatic,
    /// Top-`k` tokens by `σ(u·weight)` plus Gaussian noise of scale `noise`.
    Learned { weight: Vec<f64>, k: usize, noise: f64, seed: u64 },
}

/// The selection mask and its sparsity penalty.
pub fn select(u: &SeqTensor, tokens: &[Token], sel: &SelectorSpec) -> Result<(Vec<f64>, f64)> {
    let n = u.rows();
    match sel {
        SelectorSpec::Full => Ok((vec![1.0; n], 0.0)),
        SelectorSpec::Random { p, seed } => {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!("selection probability {p} outside [0,1]")));
            }
            let mut rng = rng_from(*seed);
            Ok(((0..n).map(|_| if rng.random::<f64>() < *p { 1.0 } else { 0.0 }).collect(), 0.0))
        }
        SelectorSpec::Programmatic => {
            if tokens.len() != n {
                return Err(Error::shape(format!("{} tokens for {n} rows", tokens.len())));
            }
            let mut seen = std::collections::HashSet::new();
            Ok((tokens.iter().map(|t| if seen.insert(*t) { 0.0 } else { 1.0 }).collect(), 0.0))
        }
        SelectorSpec::Learned { weight, k, noise, seed } => {
            if *k > n {
                return Err(Error::invalid(format!("selection budget {k} exceeds sequence length {n}")));
            }
            if weight.len() != u.cols() {
                return Err(Error::shape("selector weight width"));
            }
            let mut rng = rng_from(*seed);
            let soft: Vec<f64> =
                (0..n).map(|i| sigmoid(u.row(i).iter().zip(weight).map(|(a, b)| a * b).sum())).collect();
            let noisy: Vec<f64> = soft
                .iter()
                .map(|s| if *noise > 0.0 { s + noise * rng.sample::<f64, _>(StandardNormal) } else { *s })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]).then(a.cmp(&b)));
            let mut mask = vec![0.0; n];
            for &i in order.iter().take(*k) {
                mask[i] = 1.0;
            }
            let aux = (soft.iter().sum::<f64>() - *k as f64).max(0.0) / n as f64;
            Ok((mask, aux))
        }
    }
}

/// Causal softmax attention with each row scaled by the selector mask.
pub fn selective_attention(
    u: &SeqTensor,
    tokens: &[Token],
    p: &AttentionParams,
    sel: &SelectorSpec,
) -> Result<(SeqTensor, f64)> {
    let (mask, aux) = select(u, tokens, sel)?;
    let mut y = attention_forward(u, p, &AttentionOpts::default())?;
    for (i, m) in mask.iter().enumerate() {
        y.row_mut(i).iter_mut().for_each(|x| *x *= m);
    }
    Ok((y, aux))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Triple-loop oracle, single head.
    fn naive(u: &SeqTensor, p: &AttentionParams, causal: bool, softmax: bool) -> SeqTensor {
        let (n, d) = u.shape();
        let proj = |w: &SeqTensor| {
            SeqTensor::from_fn(n, w.cols(), |i, j| (0..d).map(|c| u[(i, c)] * w[(c, j)]).sum())
        };
        let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
        let sc = 1.0 / (q.cols() as f64).sqrt();
        let mut out = SeqTensor::zeros(n, v.cols());
        for i in 0..n {
            let mut w: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = (0..q.cols()).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() * sc;
                    if causal && j > i {
                        if softmax { f64::NEG_INFINITY } else { 0.0 }
                    } else {
                        s
                    }
                })
                .collect();
            if softmax {
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
                w.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
            }
            for j in 0..n {
                for c in 0..v.cols() {
                    out[(i, c)] += w[j] * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn zero_qk_gives_running_mean() {
        let mut rng = rng_from(1);
        let d = 3;
        let p = AttentionParams::new(SeqTensor::zeros(d, d), SeqTensor::zeros(d, d), SeqTensor::identity(d));
        let u = SeqTensor::random_normal(6, d, 1.0, &mut rng);
        let y = attention_forward(&u, &p, &AttentionOpts::default()).unwrap();
        for i in 0..6 {
            for c in 0..d {
                let mean = (0..=i).map(|j| u[(j, c)]).sum::<f64>() / (i + 1) as f64;
                assert!((y[(i, c)] - mean).abs() < 1e-12);
            }
        }
        let none = AttentionOpts { use_softmax: false, ..Default::default() };
        let zero = AttentionParams::new(SeqTensor::zeros(d, d), SeqTensor::zeros(d, d), SeqTensor::zeros(d, d));
        assert_eq!(attention_forward(&u, &zero, &none).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn matches_naive() {
        let mut rng = rng_from(2);
        for (n, d) in [(4, 2), (17, 5), (64, 4)] {
            let p = AttentionParams::random(d, &mut rng);
            let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
            for (causal, softmax) in [(true, true), (false, true), (true, false), (false, false)] {
                let opts = AttentionOpts { causal, use_softmax: softmax, ..Default::default() };
                let y = attention_forward(&u, &p, &opts).unwrap();
                assert!(y.max_abs_diff(&naive(&u, &p, causal, softmax)) < 1e-9);
            }
        }
    }

    #[test]
    fn bias_shape_checked() {
        let mut rng = rng_from(3);
        let p = AttentionParams::random(2, &mut rng);
        let u = SeqTensor::random_normal(4, 2, 1.0, &mut rng);
        let opts = AttentionOpts { bias: Some(SeqTensor::zeros(3, 4)), ..Default::default() };
        assert!(attention_forward(&u, &p, &opts).is_err());
    }

    #[test]
    fn windows() {
        let mut rng = rng_from(4);
        let p = AttentionParams::random(3, &mut rng);
        let u = SeqTensor::random_normal(8, 3, 1.0, &mut rng);
        let full = attention_forward(&u, &p, &AttentionOpts::default()).unwrap();
        assert!(windowed_attention(&u, &p, 8, WindowMode::Sliding).unwrap().max_abs_diff(&full) < 1e-12);
        let one = windowed_attention(&u, &p, 1, WindowMode::Sliding).unwrap();
        let v = u.matmul(&p.wv).unwrap();
        assert!(one.max_abs_diff(&v) < 1e-12);
        assert!(windowed_attention(&u, &p, 0, WindowMode::Blocked).is_err());

        let u4 = SeqTensor::random_normal(4, 3, 1.0, &mut rng);
        let base = windowed_attention(&u4, &p, 2, WindowMode::Blocked).unwrap();
        let mut bumped = u4.clone();
        bumped.row_mut(0).iter_mut().for_each(|x| *x += 1.0);
        bumped.row_mut(1).iter_mut().for_each(|x| *x -= 2.0);
        let after = windowed_attention(&bumped, &p, 2, WindowMode::Blocked).unwrap();
        for i in 2..4 {
            assert_eq!(base.row(i), after.row(i));
        }
    }

    #[test]
    fn selectors() {
        let mut rng = rng_from(5);
        let p = AttentionParams::random(2, &mut rng);
        let u = SeqTensor::random_normal(4, 2, 1.0, &mut rng);
        let toks = [0, 1, 0, 2];
        let (full, aux) = selective_attention(&u, &toks, &p, &SelectorSpec::Full).unwrap();
        assert_eq!(aux, 0.0);
        assert_eq!(full, attention_forward(&u, &p, &AttentionOpts::default()).unwrap());
        assert_eq!(select(&u, &toks, &SelectorSpec::Programmatic).unwrap().0, vec![0.0, 0.0, 1.0, 0.0]);
        let learned = SelectorSpec::Learned { weight: vec![0.3, -0.2], k: 4, noise: 0.0, seed: 0 };
        let (mask, aux) = select(&u, &toks, &learned).unwrap();
        assert_eq!(mask, vec![1.0; 4]);
        assert_eq!(aux, 0.0);
        let tight = SelectorSpec::Learned { weight: vec![50.0, 50.0], k: 1, noise: 0.0, seed: 0 };
        let (mask, aux) = select(&SeqTensor::filled(4, 2, 1.0), &toks, &tight).unwrap();
        assert_eq!(mask.iter().sum::<f64>(), 1.0);
        assert!(aux > 0.0);
        let over = SelectorSpec::Learned { weight: vec![0.0; 2], k: 5, noise: 0.0, seed: 0 };
        assert!(select(&u, &toks, &over).is_err());
        let r = SelectorSpec::Random { p: 0.5, seed: 9 };
        assert_eq!(select(&u, &toks, &r).unwrap(), select(&u, &toks, &r).unwrap());
    }
}
