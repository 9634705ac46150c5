//! Randomized checks of every construction against its reference, reported
//! as one row per construction.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mixers::{hyena_forward, HyenaParams};
use crate::numerics::{FilterBank, SeqTensor};
use crate::rng::{rng_from, sub_seed, Rng};
use crate::Token;

use super::attention_solver::AttentionSolver;
use super::autocorr::{solve_mqar_autocorr, ShiftSource};
use super::primitives::{build_add, build_remember, build_shift_down, build_shift_up, hyena_as_stack, RememberLayout};
use super::triples::{gen_triples, TripleGen, TripleInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Primitives,
    Attention,
    Autocorr,
    HyenaSim,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "primitives" => Suite::Primitives,
            "attention" => Suite::Attention,
            "autocorr" => Suite::Autocorr,
            "hyena-sim" => Suite::HyenaSim,
            _ => return Err(Error::config(format!("unknown suite `{s}`"))),
        })
    }
}

/// Deliberate corruption used to prove the harness notices broken weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs one filter tap or weight entry of every construction.
    CorruptTap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOpts {
    pub suite: Suite,
    pub seed: u64,
    /// Random cases per row.
    pub cases: usize,
    /// Restricts the autocorrelation rows to one distance budget.
    pub t: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for VerifyOpts {
    fn default() -> Self {
        VerifyOpts { suite: Suite::All, seed: 0, cases: 200, t: None, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest deviation seen (elementwise error, or 1 − accuracy).
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

struct Tally {
    row: CheckRow,
}

impl Tally {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Tally { row: CheckRow { name: name.into(), cases: 0, failures: 0, max_error: 0.0, tolerance } }
    }

    fn record(&mut self, err: f64) {
        self.row.cases += 1;
        self.row.max_error = self.row.max_error.max(err);
        if err.is_nan() || err > self.row.tolerance {
            self.row.failures += 1;
            if err.is_nan() {
                self.row.max_error = f64::NAN;
            }
        }
    }
}

fn corrupt_filter(h: &mut FilterBank) {
    let v = h.coef(0, 0);
    h.set(0, 0, v + 0.5);
}

fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> SeqTensor {
    SeqTensor::from_fn(rows, cols, |_, _| rng.random_range(-4.0..4.0))
}

fn check_shifts(cases: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let mut down = Tally::new("shift_down", 0.0);
    let mut up = Tally::new("shift_up", 0.0);
    for _ in 0..cases {
        let n = rng.random_range(1..48);
        let d = rng.random_range(1..5);
        let s = rng.random_range(0..=n);
        let y = random_tensor(n, d, rng);
        let want_down = SeqTensor::from_fn(n, d, |i, c| if i >= s { y[(i - s, c)] } else { 0.0 });
        let want_up = SeqTensor::from_fn(n, d, |i, c| if i + s < n { y[(i + s, c)] } else { 0.0 });
        let mut sd = build_shift_down(s, n, d)?;
        let mut su = build_shift_up(s, n, d)?;
        if fault.is_some() {
            corrupt_filter(&mut sd.layers[0].h);
            corrupt_filter(&mut su.layers[0].h);
        }
        down.record(sd.evaluate(&y)?.max_abs_diff(&want_down));
        up.record(su.evaluate(&y)?.max_abs_diff(&want_up));
    }
    Ok(vec![down.row, up.row])
}

fn check_add(cases: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<CheckRow> {
    let mut tally = Tally::new("add", 0.0);
    for _ in 0..cases {
        let n = rng.random_range(1..16);
        let big_n = 2 * n + rng.random_range(0..16);
        let d = rng.random_range(1..5);
        let mut stack = build_add(n, big_n, d)?;
        if fault.is_some() {
            corrupt_filter(&mut stack.layers[0].h);
        }
        let mut y = SeqTensor::zeros(big_n, d);
        let mut sum = random_tensor(n, d, rng);
        for i in 0..n {
            y.row_mut(n + i).copy_from_slice(sum.row(i));
        }
        // Two accumulation rounds exercise the reset of the first block.
        let mut err: f64 = 0.0;
        for _ in 0..2 {
            let x = random_tensor(n, d, rng);
            for i in 0..n {
                y.row_mut(i).copy_from_slice(x.row(i));
            }
            sum = sum.add(&x)?;
            y = stack.evaluate(&y)?;
            let want = SeqTensor::from_fn(big_n, d, |i, c| {
                if i < n {
                    1.0
                } else if i < 2 * n {
                    sum[(i - n, c)]
                } else {
                    0.0
                }
            });
            err = err.max(y.max_abs_diff(&want));
        }
        tally.record(err);
    }
    Ok(tally.row)
}

fn check_remember(cases: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<CheckRow> {
    let mut tally = Tally::new("remember", 0.0);
    for _ in 0..cases {
        let layout = RememberLayout {
            n: rng.random_range(1..8),
            m: rng.random_range(1..8),
            s: rng.random_range(0..6),
            t: rng.random_range(1..8),
        };
        let big_n = layout.min_len() + rng.random_range(0..6);
        let d = rng.random_range(1..4);
        let a = layout.v_start();
        let h = FilterBank::from_fn(big_n, d, |j, _| if j < layout.t { rng.random_range(-2.0..2.0) } else { 0.0 });
        let p = random_tensor(a, d, rng);
        let x = random_tensor(layout.n, d, rng);
        let v = random_tensor(layout.m, d, rng);
        let mut input = SeqTensor::zeros(big_n, d);
        for i in 0..layout.n {
            input.row_mut(i).copy_from_slice(x.row(i));
        }
        for i in 0..layout.m {
            input.row_mut(a + i).copy_from_slice(v.row(i));
        }
        let mut stack = build_remember(layout, &h, &p, big_n)?;
        if fault.is_some() {
            corrupt_filter(&mut stack.layers[0].h);
        }
        let out = stack.evaluate(&input)?;
        let want = SeqTensor::from_fn(big_n, d, |i, c| {
            if i < a {
                let mut acc = 0.0;
                for j in 0..=i {
                    if i - j < layout.n {
                        acc += h.coef(j, c) * x[(i - j, c)];
                    }
                }
                p[(i, c)] * acc
            } else if i < a + layout.m {
                v[(i - a, c)]
            } else {
                0.0
            }
        });
        tally.record(out.max_abs_diff(&want));
    }
    Ok(tally.row)
}

fn check_hyena(cases: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<CheckRow> {
    let mut tally = Tally::new("hyena-sim", 1e-9);
    for _ in 0..cases {
        let n = rng.random_range(crate::mixers::hyena::DEFAULT_SHORT_TAPS..=32);
        let d = rng.random_range(1..=8);
        let p = HyenaParams::random(n, d, 1, rng);
        let u = SeqTensor::random_normal(n, d, 1.0, rng);
        let (mut stack, input) = hyena_as_stack(&p, &u)?;
        if fault.is_some() {
            corrupt_filter(&mut stack.layers[0].h);
        }
        let sim = stack.evaluate(&input)?.slice_rows(0, n);
        tally.record(sim.max_abs_diff(&hyena_forward(&u, &p)?));
    }
    Ok(tally.row)
}

/// Attention solver accuracy per vocabulary; error is the number of wrong answers.
pub fn check_attention(c: usize, cases: usize, max_triples: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<CheckRow> {
    let mut tally = Tally::new(format!("attention c={c}"), 0.0);
    let mut solver = AttentionSolver::new(c);
    if fault.is_some() {
        let k = solver.layer2.wk.clone();
        solver.layer2.wk = k.map(|x| 0.25 * x);
    }
    for _ in 0..cases {
        let g = TripleGen {
            c,
            num_triples: rng.random_range(1..=max_triples.min(c)),
            hit_rate: 0.6,
            split_vocab: false,
            distances: vec![],
        };
        let inst = gen_triples(&g, rng)?;
        let got = solver.solve(&inst.encode_blocks()?).unwrap_or_default();
        let want = inst.expected();
        let wrong = if got.len() == want.len() { got.iter().zip(&want).filter(|(a, b)| a != b).count() } else { want.len() };
        tally.record(wrong as f64);
    }
    Ok(tally.row)
}

/// An instance whose hits use exactly the triple distances in `distances`.
pub fn autocorr_instance(c: usize, num_triples: usize, distances: &[usize], rng: &mut Rng) -> Result<TripleInstance> {
    let g = TripleGen { c, num_triples, hit_rate: 0.8, split_vocab: true, distances: distances.to_vec() };
    gen_triples(&g, rng)
}

/// Triple distance of each answered query, if any.
pub fn hit_distances(inst: &TripleInstance) -> Vec<Option<usize>> {
    crate::oracle::sequential_mqar(&inst.triples).iter().enumerate().map(|(i, r)| r.map(|r| i - r.key_index)).collect()
}

fn random_distances(t: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut d: Vec<usize> = index::sample(rng, max, t).into_iter().map(|x| x + 1).collect();
    d.sort_unstable();
    d
}

/// Accuracy with the full shift budget, and the effect of withholding one distance.
pub fn check_autocorr(t: usize, cases: usize, rng: &mut Rng, fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let mut full = Tally::new(format!("autocorr t={t}"), 0.0);
    let mut withheld = Tally::new(format!("autocorr t={t} withheld"), 0.0);
    let (c, num_triples) = (128, 48);
    for _ in 0..cases {
        let distances = random_distances(t, 12, rng);
        let inst = autocorr_instance(c, num_triples, &distances, rng)?;
        let u = inst.encode_onehot()?;
        let want = inst.expected();
        let mut source = ShiftSource::Autocorrelation(t);
        if fault.is_some() {
            source = ShiftSource::Explicit(distances.iter().map(|d| 3 * d + 5).collect());
        }
        let got = solve_mqar_autocorr(&u, &source)?.answers;
        full.record(got.iter().zip(&want).filter(|(a, b)| a != b).count() as f64);

        // Drop one distance: exactly its queries go unanswered.
        let gaps = hit_distances(&inst);
        let drop = distances[rng.random_range(0..distances.len())];
        // Under the fault the withheld distance leaks back in.
        let kept: Vec<usize> = distances.iter().filter(|&&d| d != drop || fault.is_some()).map(|d| 3 * d + 2).collect();
        let got = solve_mqar_autocorr(&u, &ShiftSource::Explicit(kept))?.answers;
        let mut wrong = 0usize;
        for i in 0..want.len() {
            let expect: Option<Token> = if gaps[i] == Some(drop) { None } else { want[i] };
            if got[i] != expect {
                wrong += 1;
            }
        }
        withheld.record(wrong as f64);
    }
    Ok(vec![full.row, withheld.row])
}

/// Runs the selected suite. `cases` sets the number of random cases per row.
pub fn run_suite(opts: &VerifyOpts) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let cases = opts.cases.max(1);
    let wants = |s: Suite| opts.suite == Suite::All || opts.suite == s;
    let rng = |name: &str| rng_from(sub_seed(opts.seed, name));
    if wants(Suite::Primitives) {
        rows.extend(check_shifts(cases, &mut rng("shift"), opts.fault)?);
        rows.push(check_add(cases, &mut rng("add"), opts.fault)?);
        rows.push(check_remember(cases, &mut rng("remember"), opts.fault)?);
    }
    if wants(Suite::HyenaSim) {
        rows.push(check_hyena(cases, &mut rng("hyena"), opts.fault)?);
    }
    if wants(Suite::Attention) {
        for c in [16, 64] {
            rows.push(check_attention(c, cases, 64, &mut rng(&format!("attention{c}")), opts.fault)?);
        }
    }
    if wants(Suite::Autocorr) {
        let budgets = match opts.t {
            Some(t) => vec![t],
            None => vec![1, 2, 4, 8],
        };
        for t in budgets {
            if t == 0 || t > 12 {
                return Err(Error::config(format!("distance budget t={t} outside 1..=12")));
            }
            rows.extend(check_autocorr(t, cases, &mut rng(&format!("autocorr{t}")), opts.fault)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let rows = run_suite(&VerifyOpts { cases: 10, ..Default::default() }).unwrap();
        assert!(rows.len() >= 9);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn injected_fault_fails_every_row() {
        let rows = run_suite(&VerifyOpts { cases: 10, fault: Some(Fault::CorruptTap), ..Default::default() }).unwrap();
        for r in &rows {
            assert!(!r.passed(), "{} survived the fault", r.name);
        }
    }
}
