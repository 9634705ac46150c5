//! Dense tensors and the convolution kernels every mixer builds on.
//!
//! Layout is row-major with one row per time step.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Token;

/// Below this length convolutions use the direct O(N²) sum.
pub const FFT_THRESHOLD: usize = 32;

/// An `rows × cols` real matrix; rows are time steps, columns channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SeqTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SeqTensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        SeqTensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(SeqTensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(SeqTensor { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        SeqTensor { rows, cols, data }
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        SeqTensor::from_fn(rows, cols, |_, _| rng.sample(normal))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate().take(self.rows) {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn transpose(&self) -> SeqTensor {
        SeqTensor::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeqTensor {
        SeqTensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> SeqTensor {
        SeqTensor::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SeqTensor {
        SeqTensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn check_same(&self, other: &SeqTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &SeqTensor) -> Result<SeqTensor> {
        self.check_same(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &SeqTensor) -> Result<SeqTensor> {
        self.check_same(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &SeqTensor) -> Result<SeqTensor> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> SeqTensor {
        self.map(|x| x * s)
    }

    fn zip(&self, other: &SeqTensor, f: impl Fn(f64, f64) -> f64) -> SeqTensor {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        SeqTensor { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &SeqTensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &SeqTensor) -> Result<SeqTensor> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = SeqTensor::zeros(self.rows, rhs.cols);
        gemm(1.0, self, false, rhs, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &SeqTensor) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry of row `i` (first on ties).
    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

impl std::ops::Index<(usize, usize)> for SeqTensor {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SeqTensor {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `c ← alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &SeqTensor, ta: bool, b: &SeqTensor, tb: bool, beta: f64, c: &mut SeqTensor) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    gemm_raw(alpha, &a.data, a.cols, ta, &b.data, b.cols, tb, beta, &mut c.data, m, k, n);
}

/// Slice form of [`gemm`]: `a` is stored row-major with `lda` columns, likewise `b`;
/// `c` is `m × n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm_raw(
    alpha: f64,
    a: &[f64],
    lda: usize,
    ta: bool,
    b: &[f64],
    ldb: usize,
    tb: bool,
    beta: f64,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if tb { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: strides describe the row-major buffers above; the asserts in
    // callers and the slice lengths bound every access.
    assert!(a.len() >= if ta { k * lda } else { m * lda });
    assert!(b.len() >= if tb { n * ldb } else { k * ldb });
    assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One filter per channel; `coef(j, t)` is tap `j` of channel `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    length: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(length: usize, channels: usize) -> Self {
        FilterBank { length, channels, data: vec![0.0; length * channels] }
    }

    /// Every channel holds the unit impulse at tap `s` (the shift `X^s`).
    /// A tap at or beyond `length` yields the zero filter.
    pub fn impulse(length: usize, channels: usize, s: usize) -> Self {
        let mut f = Self::zeros(length, channels);
        if s < length {
            for t in 0..channels {
                f.set(s, t, 1.0);
            }
        }
        f
    }

    /// Builds from an `length × channels` tensor.
    pub fn from_tensor(t: SeqTensor) -> Self {
        FilterBank { length: t.rows, channels: t.cols, data: t.data }
    }

    pub fn from_fn(length: usize, channels: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::from_tensor(SeqTensor::from_fn(length, channels, f))
    }

    pub fn to_tensor(&self) -> SeqTensor {
        SeqTensor { rows: self.length, cols: self.channels, data: self.data.clone() }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coef(&self, j: usize, t: usize) -> f64 {
        self.data[j * self.channels + t]
    }

    pub fn set(&mut self, j: usize, t: usize, v: f64) {
        self.data[j * self.channels + t] = v;
    }

    pub fn channel(&self, t: usize) -> Vec<f64> {
        (0..self.length).map(|j| self.coef(j, t)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add(&self, other: &FilterBank) -> Result<FilterBank> {
        if (self.length, self.channels) != (other.length, other.channels) {
            return Err(Error::shape("filter bank sum"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(FilterBank { length: self.length, channels: self.channels, data })
    }

    /// Zero-pads (or truncates) every channel to `length` taps.
    pub fn resized(&self, length: usize) -> FilterBank {
        FilterBank::from_fn(length, self.channels, |j, t| if j < self.length { self.coef(j, t) } else { 0.0 })
    }
}

fn check_conv(u: &SeqTensor, h: &FilterBank) -> Result<()> {
    if h.length != u.rows || h.channels != u.cols {
        return Err(Error::shape(format!(
            "filter bank {}x{} does not match input {}x{}",
            h.length, h.channels, u.rows, u.cols
        )));
    }
    Ok(())
}

/// Which convolution kernel to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    /// FFT from [`FFT_THRESHOLD`] upward, direct below.
    #[default]
    Auto,
    Direct,
    Fft,
}

pub fn causal_conv_with(u: &SeqTensor, h: &FilterBank, path: ConvPath) -> Result<SeqTensor> {
    match path {
        ConvPath::Auto => causal_conv(u, h),
        ConvPath::Direct => causal_conv_direct(u, h),
        ConvPath::Fft => causal_conv_fft(u, h),
    }
}

pub fn circular_conv_with(u: &SeqTensor, h: &FilterBank, path: ConvPath) -> Result<SeqTensor> {
    match path {
        ConvPath::Auto => circular_conv(u, h),
        ConvPath::Direct => circular_conv_direct(u, h),
        ConvPath::Fft => circular_conv_fft(u, h),
    }
}

fn nonzero_taps(h: &FilterBank) -> Vec<usize> {
    (0..h.length).filter(|&j| h.data[j * h.channels..(j + 1) * h.channels].iter().any(|&x| x != 0.0)).collect()
}

/// Causal per-channel convolution `y[i,t] = Σ_{j≤i} h[j,t]·u[i−j,t]`.
///
/// Uses the FFT path from [`FFT_THRESHOLD`] upward and the direct sum below.
pub fn causal_conv(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    if u.rows >= FFT_THRESHOLD {
        causal_conv_fft(u, h)
    } else {
        causal_conv_direct(u, h)
    }
}

pub fn causal_conv_direct(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    check_conv(u, h)?;
    let (n, d) = u.shape();
    let mut y = SeqTensor::zeros(n, d);
    let taps = nonzero_taps(h);
    for i in 0..n {
        for &j in taps.iter().take_while(|&&j| j <= i) {
            let src = u.row(i - j);
            let taps = &h.data[j * d..(j + 1) * d];
            let dst = y.row_mut(i);
            for t in 0..d {
                dst[t] += taps[t] * src[t];
            }
        }
    }
    Ok(y)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Linear convolution through a zero-padded transform of size `2N`, truncated to `N`.
pub fn causal_conv_fft(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    check_conv(u, h)?;
    let (n, d) = u.shape();
    let size = 2 * n;
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    });
    let mut y = SeqTensor::zeros(n, d);
    let mut a = vec![Complex::new(0.0, 0.0); size];
    let mut b = vec![Complex::new(0.0, 0.0); size];
    let norm = 1.0 / size as f64;
    // Two real channels share one complex transform: pack u_t + i·u_{t+1}.
    let mut t = 0;
    while t < d {
        let pair = t + 1 < d;
        for i in 0..size {
            a[i] = Complex::new(0.0, 0.0);
            b[i] = Complex::new(0.0, 0.0);
        }
        for i in 0..n {
            a[i] = Complex::new(u[(i, t)], if pair { u[(i, t + 1)] } else { 0.0 });
            b[i] = Complex::new(h.coef(i, t), if pair { h.coef(i, t + 1) } else { 0.0 });
        }
        fwd.process(&mut a);
        fwd.process(&mut b);
        // Split the packed spectra and multiply channel-wise.
        let mut c = vec![Complex::new(0.0, 0.0); size];
        for k in 0..size {
            let kc = (size - k) % size;
            let (ua, ub) = split(a[k], a[kc]);
            let (ha, hb) = split(b[k], b[kc]);
            c[k] = ua * ha + Complex::new(0.0, 1.0) * (ub * hb);
        }
        inv.process(&mut c);
        for i in 0..n {
            y[(i, t)] = c[i].re * norm;
            if pair {
                y[(i, t + 1)] = c[i].im * norm;
            }
        }
        t += 2;
    }
    Ok(y)
}

/// Spectra of the real and imaginary parts of a packed transform.
fn split(z: Complex<f64>, zc: Complex<f64>) -> (Complex<f64>, Complex<f64>) {
    let zc = zc.conj();
    ((z + zc) * 0.5, (z - zc) * Complex::new(0.0, -0.5))
}

/// Cyclic per-channel convolution `y[i,t] = Σ_j h[j,t]·u[(i−j) mod N, t]`.
pub fn circular_conv(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    check_conv(u, h)?;
    if u.rows() < FFT_THRESHOLD {
        return circular_conv_direct(u, h);
    }
    circular_conv_fft(u, h)
}

pub fn circular_conv_fft(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    check_conv(u, h)?;
    let (n, d) = u.shape();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let mut y = SeqTensor::zeros(n, d);
    let norm = 1.0 / n as f64;
    for t in 0..d {
        let mut a: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(u[(i, t)], 0.0)).collect();
        let mut b: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(h.coef(i, t), 0.0)).collect();
        fwd.process(&mut a);
        fwd.process(&mut b);
        for k in 0..n {
            a[k] *= b[k];
        }
        inv.process(&mut a);
        for i in 0..n {
            y[(i, t)] = a[i].re * norm;
        }
    }
    Ok(y)
}

pub fn circular_conv_direct(u: &SeqTensor, h: &FilterBank) -> Result<SeqTensor> {
    check_conv(u, h)?;
    let (n, d) = u.shape();
    let mut y = SeqTensor::zeros(n, d);
    let taps = nonzero_taps(h);
    for i in 0..n {
        for &j in &taps {
            let src = (i + n - j) % n;
            for t in 0..d {
                y[(i, t)] += h.coef(j, t) * u[(src, t)];
            }
        }
    }
    Ok(y)
}

/// Cyclic autocorrelation `w[s] = Σ_i v[i]·v[(i+s) mod N]`.
pub fn autocorrelation(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n < FFT_THRESHOLD {
        return autocorrelation_direct(v);
    }
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let mut a: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fwd.process(&mut a);
    for z in a.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    inv.process(&mut a);
    let mut w: Vec<f64> = a.iter().map(|z| z.re / n as f64).collect();
    // Lag 0 is exact by definition.
    w[0] = v.iter().map(|x| x * x).sum();
    w
}

pub fn autocorrelation_direct(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|s| (0..n).map(|i| v[i] * v[(i + s) % n]).sum()).collect()
}

/// Row-wise softmax with max subtraction. `-inf` entries get probability 0;
/// a row with no finite entry becomes all zeros.
pub fn softmax_rows(m: &SeqTensor) -> SeqTensor {
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// One row per token holding the standard basis vector of its id.
pub fn one_hot_embed(tokens: &[Token], c: usize) -> Result<SeqTensor> {
    let mut out = SeqTensor::zeros(tokens.len(), c);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= c {
            return Err(Error::TokenRange { token: tok, vocab: c });
        }
        out[(i, tok as usize)] = 1.0;
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> SeqTensor {
        let mut r = rng_from(seed);
        SeqTensor::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    // Independent oracle: plain index arithmetic, no shared helpers.
    fn conv_oracle(u: &[f64], h: &[f64]) -> Vec<f64> {
        let n = u.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                if j <= i {
                    y[i] += h[j] * u[i - j];
                }
            }
        }
        y
    }

    #[test]
    fn identity_filter_is_identity() {
        let u = random(40, 3, 1);
        let h = FilterBank::impulse(40, 3, 0);
        assert!(causal_conv(&u, &h).unwrap().max_abs_diff(&u) < 1e-12);
        assert!(causal_conv_direct(&u, &h).unwrap().max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn unit_delay() {
        let u = SeqTensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = FilterBank::impulse(4, 1, 1);
        assert_eq!(causal_conv_direct(&u, &h).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        let y = causal_conv_fft(&u, &h).unwrap();
        for (a, b) in y.data().iter().zip([0.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_direct_and_oracle() {
        for (n, d, seed) in [(16, 3, 2), (33, 5, 3), (512, 2, 4), (1, 1, 5), (7, 4, 6)] {
            let u = random(n, d, seed);
            let h = FilterBank::from_tensor(random(n, d, seed + 100));
            let fast = causal_conv_fft(&u, &h).unwrap();
            let direct = causal_conv_direct(&u, &h).unwrap();
            assert!(fast.max_abs_diff(&direct) < 1e-10, "n={n}");
            for t in 0..d {
                let o = conv_oracle(&u.col(t), &h.channel(t));
                for i in 0..n {
                    assert!((direct[(i, t)] - o[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_mismatch() {
        let u = random(8, 2, 1);
        assert!(causal_conv(&u, &FilterBank::zeros(7, 2)).is_err());
        assert!(circular_conv(&u, &FilterBank::zeros(8, 3)).is_err());
    }

    #[test]
    fn circular_wraps() {
        let u = SeqTensor::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let h = FilterBank::impulse(4, 1, 3);
        let mut y = circular_conv(&u, &h).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 1.0]);
        y = circular_conv(&y, &h).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 0.0]);
        y = circular_conv(&circular_conv(&y, &h).unwrap(), &h).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn circular_matches_modular_sum() {
        for (n, seed) in [(5, 1), (40, 2), (64, 3)] {
            let u = random(n, 2, seed);
            let h = FilterBank::from_tensor(random(n, 2, seed + 9));
            let y = circular_conv(&u, &h).unwrap();
            for t in 0..2 {
                for i in 0..n {
                    let want: f64 = (0..n).map(|j| h.coef(j, t) * u[(((i as isize - j as isize).rem_euclid(n as isize)) as usize, t)]).sum();
                    assert!((y[(i, t)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn autocorrelation_examples() {
        assert_eq!(autocorrelation(&[0.0, 0.0, 1.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(autocorrelation(&[1.0, 0.0, 1.0, 0.0]), vec![2.0, 0.0, 2.0, 0.0]);
        let v: Vec<f64> = random(100, 1, 3).into_vec();
        let fast = autocorrelation(&v);
        let slow = autocorrelation_direct(&v);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(fast[0], v.iter().map(|x| x * x).sum::<f64>());
    }

    #[test]
    fn autocorrelation_counts_repeats() {
        let tokens: Vec<Token> = vec![0, 1, 2, 0, 3, 1, 0, 2, 2, 1, 0, 3];
        let n = tokens.len();
        let oh = one_hot_embed(&tokens, 4).unwrap();
        let mut total = vec![0.0; n];
        for t in 0..4 {
            for (s, w) in autocorrelation(&oh.col(t)).into_iter().enumerate() {
                total[s] += w;
            }
        }
        for s in 0..n {
            let count = (0..n).filter(|&i| tokens[i] == tokens[(i + s) % n]).count();
            assert_eq!(total[s], count as f64);
        }
    }

    #[test]
    fn softmax_examples() {
        let m = SeqTensor::from_rows(&[
            vec![2.0, 2.0, 2.0, 2.0],
            vec![0.0, 3f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY],
        ])
        .unwrap();
        let s = softmax_rows(&m);
        for j in 0..4 {
            assert!((s[(0, j)] - 0.25).abs() < 1e-15);
        }
        assert!((s[(1, 0)] - 0.25).abs() < 1e-12);
        assert!((s[(1, 1)] - 0.75).abs() < 1e-12);
        assert_eq!(s[(1, 2)], 0.0);
        let all_masked = softmax_rows(&SeqTensor::filled(1, 3, f64::NEG_INFINITY));
        assert_eq!(all_masked.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot_embed(&[0], 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot_embed(&[2, 1], 3).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(one_hot_embed(&[3], 3), Err(Error::TokenRange { token: 3, vocab: 3 })));
        let toks = [4, 0, 9, 9, 2];
        let oh = one_hot_embed(&toks, 10).unwrap();
        for (i, &t) in toks.iter().enumerate() {
            assert_eq!(oh.argmax_row(i), t as usize);
        }
    }

    #[test]
    fn gemm_transposes() {
        let a = random(3, 4, 1);
        let b = random(3, 5, 2);
        let mut c = SeqTensor::zeros(4, 5);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        let want = a.transpose().matmul(&b).unwrap();
        assert!(c.max_abs_diff(&want) < 1e-12);
        let mut c2 = SeqTensor::zeros(3, 3);
        gemm(1.0, &a, false, &a, true, 0.0, &mut c2);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
                assert!((c2[(i, j)] - dot).abs() < 1e-12);
            }
        }
    }
}
