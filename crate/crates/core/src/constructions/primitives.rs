//! Exact BaseConv stacks for shifting, adding and gated "remember" steps.

use crate::error::{Error, Result};
use crate::mixers::{baseconv_forward_with, hyena_projections, BaseConvParams, ConvMode, HyenaParams};
use crate::numerics::{ConvPath, FilterBank, SeqTensor};

/// Layers applied in order, each without residual.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaseConvStack {
    pub layers: Vec<BaseConvParams>,
}

impl BaseConvStack {
    pub fn new(layers: Vec<BaseConvParams>) -> Self {
        BaseConvStack { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn then(mut self, other: BaseConvStack) -> Self {
        self.layers.extend(other.layers);
        self
    }

    /// Runs every layer with the direct convolution, so 0/1 filters stay exact.
    pub fn evaluate(&self, u: &SeqTensor) -> Result<SeqTensor> {
        let mut x = u.clone();
        for layer in &self.layers {
            x = baseconv_forward_with(&x, layer, ConvPath::Direct)?;
        }
        Ok(x)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }
}

/// `b1` set to `value` on rows `start..end`, zero elsewhere.
fn row_mask(n: usize, d: usize, ranges: &[(usize, usize)], value: f64) -> SeqTensor {
    let mut m = SeqTensor::zeros(n, d);
    for &(a, b) in ranges {
        for i in a..b.min(n) {
            m.row_mut(i).fill(value);
        }
    }
    m
}

/// A gate-only layer: `y = b1 ⊙ (h ∗ u + b2)` with `W = 0`.
fn gate_layer(h: FilterBank, b1: SeqTensor, b2: SeqTensor, mode: ConvMode) -> BaseConvParams {
    let d = b1.cols();
    BaseConvParams { w: SeqTensor::zeros(d, d), h, b1, b2, mode, residual: false }
}

/// Moves every row down by `s`; zeros enter at the top.
pub fn build_shift_down(s: usize, n: usize, d: usize) -> Result<BaseConvStack> {
    if s > n {
        return Err(Error::invalid(format!("shift {s} exceeds length {n}")));
    }
    Ok(BaseConvStack::new(vec![gate_layer(
        FilterBank::impulse(n, d, s),
        SeqTensor::filled(n, d, 1.0),
        SeqTensor::zeros(n, d),
        ConvMode::Causal,
    )]))
}

/// Moves every row up by `s`; zeros enter at the bottom.
///
/// A circular shift by `N − s` brings row `i + s` to row `i`, and the gate
/// clears the `s` rows that wrapped around.
pub fn build_shift_up(s: usize, n: usize, d: usize) -> Result<BaseConvStack> {
    if s > n {
        return Err(Error::invalid(format!("shift {s} exceeds length {n}")));
    }
    Ok(BaseConvStack::new(vec![gate_layer(
        FilterBank::impulse(n, d, (n - s) % n.max(1)),
        row_mask(n, d, &[(0, n - s)], 1.0),
        SeqTensor::zeros(n, d),
        ConvMode::Circular,
    )]))
}

/// Input `[x; S; 0]` with blocks of `n` rows; output `[1; S + x; 0]`.
pub fn build_add(n: usize, big_n: usize, d: usize) -> Result<BaseConvStack> {
    if 2 * n > big_n {
        return Err(Error::invalid(format!("two blocks of {n} rows exceed length {big_n}")));
    }
    let h1 = FilterBank::impulse(big_n, d, 0).add(&FilterBank::impulse(big_n, d, n))?;
    let first = gate_layer(h1, row_mask(big_n, d, &[(n, 2 * n)], 1.0), SeqTensor::zeros(big_n, d), ConvMode::Causal);
    let second = gate_layer(
        FilterBank::impulse(big_n, d, 0),
        row_mask(big_n, d, &[(0, 2 * n)], 1.0),
        row_mask(big_n, d, &[(0, n)], 1.0),
        ConvMode::Causal,
    );
    Ok(BaseConvStack::new(vec![first, second]))
}

/// Block sizes of the remember layout: `x` has `n` rows, then `s` zero rows,
/// then `v` with `m` rows; the filter is supported on its first `t` taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RememberLayout {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub t: usize,
}

impl RememberLayout {
    /// First row of `v`.
    pub fn v_start(&self) -> usize {
        self.n + self.s
    }

    /// Displacement used to park `v` below the convolution's reach.
    pub fn park(&self) -> usize {
        self.n + self.m + self.s + self.t
    }

    pub fn min_len(&self) -> usize {
        2 * self.n + 2 * self.s + 2 * self.m + self.t
    }
}

/// Input `[x; 0^s; v; 0]`, output `[p ⊙ (x ∗ h); v; 0]`, where the first block
/// spans `n + s` rows and `v` keeps its `m` rows verbatim.
///
/// `h` must vanish from tap `t` on, and `p` supplies at least `n + s` gate rows.
pub fn build_remember(layout: RememberLayout, h: &FilterBank, p: &SeqTensor, big_n: usize) -> Result<BaseConvStack> {
    let d = h.channels();
    let a = layout.v_start();
    let park = layout.park();
    if big_n < layout.min_len() {
        return Err(Error::invalid(format!("remember layout needs {} rows, got {big_n}", layout.min_len())));
    }
    if p.rows() < a || p.cols() != d {
        return Err(Error::shape(format!("gate must cover {a} rows of width {d}")));
    }
    if (layout.t..h.length()).any(|j| (0..d).any(|c| h.coef(j, c) != 0.0)) {
        return Err(Error::invalid(format!("filter has taps at or beyond t = {}", layout.t)));
    }
    let h = h.resized(big_n);
    let h1 = h.add(&FilterBank::impulse(big_n, d, park))?;
    let mut b1 = row_mask(big_n, d, &[(a + park, a + park + layout.m)], 1.0);
    for i in 0..a {
        b1.row_mut(i).copy_from_slice(p.row(i));
    }
    let first = gate_layer(h1, b1, SeqTensor::zeros(big_n, d), ConvMode::Causal);
    let h2 = FilterBank::impulse(big_n, d, 0).add(&FilterBank::impulse(big_n, d, park))?;
    let second =
        gate_layer(h2, row_mask(big_n, d, &[(park, a + park + layout.m)], 1.0), SeqTensor::zeros(big_n, d), ConvMode::Causal);
    Ok(BaseConvStack::new(vec![first, second]).then(build_shift_up(park, big_n, d)?))
}

/// The order-1 Hyena layer rewritten as a remember stack over the augmented
/// input `[v; 0; v; 0]`, together with that input.
pub fn hyena_as_stack(p: &HyenaParams, u: &SeqTensor) -> Result<(BaseConvStack, SeqTensor)> {
    if p.order() != 1 {
        return Err(Error::invalid("only a single gating stage can be simulated"));
    }
    let (n, d) = u.shape();
    let (gates, v) = hyena_projections(u, p)?;
    let layout = RememberLayout { n, m: n, s: n, t: n };
    let big_n = layout.min_len();
    let mut input = SeqTensor::zeros(big_n, d);
    for i in 0..n {
        input.row_mut(i).copy_from_slice(v.row(i));
        input.row_mut(layout.v_start() + i).copy_from_slice(v.row(i));
    }
    let mut gate = SeqTensor::zeros(layout.v_start(), d);
    for i in 0..n {
        gate.row_mut(i).copy_from_slice(gates[0].row(i));
    }
    Ok((build_remember(layout, &p.filters[0], &gate, big_n)?, input))
}

/// Evaluates an order-1 Hyena layer through BaseConv layers only.
pub fn simulate_hyena_layer(p: &HyenaParams, u: &SeqTensor) -> Result<SeqTensor> {
    let (stack, input) = hyena_as_stack(p, u)?;
    Ok(stack.evaluate(&input)?.slice_rows(0, u.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::hyena_forward;
    use crate::numerics::causal_conv_direct;
    use crate::rng::rng_from;

    fn column(v: &[f64]) -> SeqTensor {
        SeqTensor::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn shifts() {
        let y = column(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(build_shift_down(0, 4, 1).unwrap().evaluate(&y).unwrap(), y);
        assert_eq!(build_shift_down(1, 4, 1).unwrap().evaluate(&y).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(build_shift_up(1, 4, 1).unwrap().evaluate(&y).unwrap().data(), &[2.0, 3.0, 4.0, 0.0]);
        assert_eq!(build_shift_up(0, 4, 1).unwrap().evaluate(&y).unwrap(), y);
        assert_eq!(build_shift_up(4, 4, 1).unwrap().evaluate(&y).unwrap().max_abs(), 0.0);
        assert!(build_shift_down(5, 4, 1).is_err());
    }

    #[test]
    fn add_accumulates() {
        let stack = build_add(1, 4, 1).unwrap();
        let out = stack.evaluate(&column(&[1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0]);
        let mut again = out.clone();
        again[(0, 0)] = 5.0;
        assert_eq!(stack.evaluate(&again).unwrap().data(), &[1.0, 7.0, 0.0, 0.0]);
        let zero_x = stack.evaluate(&column(&[0.0, 3.0, 0.0, 0.0])).unwrap();
        assert_eq!(zero_x.data(), &[1.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn remember_small_instance() {
        let mut rng = rng_from(4);
        let layout = RememberLayout { n: 2, m: 2, s: 1, t: 1 };
        let big_n = layout.min_len();
        let d = 2;
        let h = FilterBank::from_fn(big_n, d, |j, _| if j < layout.t { 0.5 + j as f64 } else { 0.0 });
        let p = SeqTensor::random_normal(layout.v_start(), d, 1.0, &mut rng);
        let mut input = SeqTensor::zeros(big_n, d);
        let x = SeqTensor::random_normal(2, d, 1.0, &mut rng);
        let v = SeqTensor::random_normal(2, d, 1.0, &mut rng);
        for i in 0..2 {
            input.row_mut(i).copy_from_slice(x.row(i));
            input.row_mut(3 + i).copy_from_slice(v.row(i));
        }
        let out = build_remember(layout, &h, &p, big_n).unwrap().evaluate(&input).unwrap();
        let conv = causal_conv_direct(&input.slice_rows(0, 3), &h.resized(3)).unwrap();
        for i in 0..3 {
            for c in 0..d {
                assert!((out[(i, c)] - p[(i, c)] * conv[(i, c)]).abs() < 1e-12);
            }
        }
        for i in 0..2 {
            assert_eq!(out.row(3 + i), v.row(i));
        }
        for i in 5..big_n {
            assert!(out.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn remember_rejects_long_filter() {
        let layout = RememberLayout { n: 2, m: 2, s: 1, t: 1 };
        let h = FilterBank::impulse(11, 1, 1);
        assert!(build_remember(layout, &h, &SeqTensor::zeros(3, 1), 11).is_err());
        assert!(build_remember(layout, &FilterBank::impulse(11, 1, 0), &SeqTensor::zeros(3, 1), 10).is_err());
    }

    #[test]
    fn hyena_simulation_matches() {
        let mut rng = rng_from(8);
        for (n, d) in [(4, 1), (16, 4), (32, 3)] {
            let p = HyenaParams::random(n, d, 1, &mut rng);
            let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
            let sim = simulate_hyena_layer(&p, &u).unwrap();
            assert!(sim.max_abs_diff(&hyena_forward(&u, &p).unwrap()) < 1e-9);
        }
        let p2 = HyenaParams::random(8, 2, 2, &mut rng);
        assert!(simulate_hyena_layer(&p2, &SeqTensor::zeros(8, 2)).is_err());
    }
}
