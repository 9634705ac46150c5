//! Input-dependent shift kernels found by autocorrelation.
//!
//! For an interleaved `k, v, q` sequence, a query at row `3i + 2` matching the
//! key at row `3j` sits at lag `s = 3(i − j) + 2`; its value sits at lag
//! `s − 1`. For each chosen lag the solver runs two gated layers
//! `y = Q ⊙ (X^s ∗ K)` and `z = E(y) ⊙ (X^{s−1} ∗ V)`, where `E` turns any row
//! with a nonzero entry into all ones, and sums `z` over the lags.

use crate::error::{Error, Result};
use crate::numerics::{autocorrelation, causal_conv_with, ConvPath, FilterBank, SeqTensor};
use crate::Token;

use super::attention_solver::MATCH_THRESHOLD;
use super::triples::row_role;

/// Lag masses summed over channels, for lags `0..N`, computed on the sequence
/// zero-padded to `2N` so no pair wraps around.
pub fn lag_masses(u: &SeqTensor) -> Vec<f64> {
    let n = u.rows();
    let mut total = vec![0.0; n];
    let mut col = vec![0.0; 2 * n];
    for t in 0..u.cols() {
        for i in 0..n {
            col[i] = u[(i, t)];
        }
        let w = autocorrelation(&col);
        for s in 0..n {
            total[s] += w[s];
        }
    }
    total
}

/// The `t` nonzero lags with the largest mass, ties toward smaller lags.
pub fn top_shifts(u: &SeqTensor, t: usize) -> Result<Vec<usize>> {
    if t >= u.rows() {
        return Err(Error::invalid(format!("asked for {t} shifts of a length-{} sequence", u.rows())));
    }
    Ok(top_shifts_where(u, t, |_| true))
}

/// As [`top_shifts`], restricted to lags accepted by `keep`.
pub fn top_shifts_where(u: &SeqTensor, t: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mass = lag_masses(u);
    let mut lags: Vec<usize> = (1..u.rows()).filter(|&s| keep(s)).collect();
    // Masses are integer counts for one-hot input; round away FFT noise.
    lags.sort_by(|&a, &b| mass[b].round().total_cmp(&mass[a].round()).then(a.cmp(&b)));
    lags.truncate(t);
    lags
}

/// Lags from a key row to the query row of a later triple.
pub fn is_key_to_query(s: usize) -> bool {
    s % 3 == 2 && s >= 5
}

/// Where the solver's shifts come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftSource {
    /// Top-`t` key-to-query lags of the input autocorrelation.
    Autocorrelation(usize),
    /// Lags of actual key/query token matches, smallest `t`.
    Programmatic(usize),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutocorrAnswer {
    /// One entry per triple.
    pub answers: Vec<Option<Token>>,
    pub shifts: Vec<usize>,
    pub parameter_count: usize,
}

/// Distinct key-to-query lags present in the token sequence.
pub fn programmatic_shifts(tokens: &[Token]) -> Vec<usize> {
    let mut lags = std::collections::BTreeSet::new();
    for (q, &tok) in tokens.iter().enumerate().filter(|(i, _)| row_role(*i) == 2) {
        for k in (0..q).filter(|&k| row_role(k) == 0) {
            if tokens[k] == tok && is_key_to_query(q - k) {
                lags.insert(q - k);
            }
        }
    }
    lags.into_iter().collect()
}

/// Solves the interleaved one-hot instance `u` (`3T × c`).
pub fn solve_mqar_autocorr(u: &SeqTensor, source: &ShiftSource) -> Result<AutocorrAnswer> {
    let (n, c) = u.shape();
    if n % 3 != 0 {
        return Err(Error::shape(format!("{n} rows do not form whole triples")));
    }
    let shifts = match source {
        ShiftSource::Autocorrelation(t) => top_shifts_where(u, *t, is_key_to_query),
        ShiftSource::Programmatic(t) => {
            let tokens: Vec<Token> = (0..n).map(|i| u.argmax_row(i) as Token).collect();
            let mut lags = programmatic_shifts(&tokens);
            lags.truncate(*t);
            lags
        }
        ShiftSource::Explicit(lags) => lags.clone(),
    };
    if let Some(bad) = shifts.iter().find(|&&s| !is_key_to_query(s) || s >= n) {
        return Err(Error::invalid(format!("shift {bad} is not a key-to-query lag below {n}")));
    }
    // Role projections: diagonal row masks.
    let masked = |role: usize| SeqTensor::from_fn(n, c, |i, j| if row_role(i) == role { u[(i, j)] } else { 0.0 });
    let (k, v, q) = (masked(0), masked(1), masked(2));
    let mut z = SeqTensor::zeros(n, c);
    for &s in &shifts {
        let hk = FilterBank::impulse(n, c, s);
        let hv = FilterBank::impulse(n, c, s - 1);
        let y = q.hadamard(&causal_conv_with(&k, &hk, ConvPath::Direct)?)?;
        let e = smear(&y);
        z.add_assign(&e.hadamard(&causal_conv_with(&v, &hv, ConvPath::Direct)?)?)?;
    }
    let answers = (0..n / 3)
        .map(|i| {
            let row = z.row(3 * i + 2);
            let best = crate::numerics::argmax(row);
            (row[best] >= MATCH_THRESHOLD).then_some(best as Token)
        })
        .collect();
    Ok(AutocorrAnswer { answers, parameter_count: 2 * shifts.len() * n * c + 3 * n, shifts })
}

/// Rows with any nonzero entry become all ones, others all zeros.
pub fn smear(y: &SeqTensor) -> SeqTensor {
    let mut e = SeqTensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        if y.row(i).iter().any(|&x| x != 0.0) {
            e.row_mut(i).fill(1.0);
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructions::triples::{gen_triples, TripleGen};
    use crate::numerics::one_hot_embed;
    use crate::rng::rng_from;

    #[test]
    fn alternating_sequence_peaks_at_two() {
        let u = one_hot_embed(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(top_shifts(&u, 1).unwrap(), vec![2]);
        let distinct = one_hot_embed(&[0, 1, 2, 3, 4], 5).unwrap();
        assert_eq!(top_shifts(&distinct, 3).unwrap(), vec![1, 2, 3]);
        assert!(top_shifts(&distinct, 5).is_err());
    }

    #[test]
    fn constant_gap_is_found() {
        // Four keys, repeated 9 positions later; everything else unique.
        let mut toks: Vec<Token> = (100..130).collect();
        for i in 0..4 {
            toks[i] = i as Token;
            toks[9 + i] = i as Token;
        }
        let u = one_hot_embed(&toks, 130).unwrap();
        assert_eq!(top_shifts(&u, 1).unwrap(), vec![9]);
    }

    #[test]
    fn solves_with_enough_shifts() {
        let mut rng = rng_from(3);
        for t in [1, 2, 4] {
            let distances: Vec<usize> = (1..=t).map(|x| 2 * x - 1).collect();
            let g = TripleGen { c: 64, num_triples: 24, hit_rate: 0.7, split_vocab: true, distances };
            let inst = gen_triples(&g, &mut rng).unwrap();
            let u = inst.encode_onehot().unwrap();
            for src in [ShiftSource::Autocorrelation(t), ShiftSource::Programmatic(t)] {
                assert_eq!(solve_mqar_autocorr(&u, &src).unwrap().answers, inst.expected(), "t={t} {src:?}");
            }
        }
    }

    #[test]
    fn rejects_non_key_lags() {
        let u = one_hot_embed(&[0, 1, 0, 1, 2, 3], 4).unwrap();
        assert!(solve_mqar_autocorr(&u, &ShiftSource::Explicit(vec![3])).is_err());
    }
}
