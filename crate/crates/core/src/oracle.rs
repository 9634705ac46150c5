//! Ground-truth recall solvers.
//!
//! Two input forms are supported. A triple sequence `(k_i, v_i, q_i)` asks, at
//! each step, for the value of the latest earlier key equal to `q_i`. A plain
//! token sequence asks, at each position, for the successor of the latest
//! earlier occurrence of the same token; it maps to triples as
//! `(x_i, x_{i+1}, x_i)`.

use std::cmp::Reverse;

use rayon::prelude::*;

use crate::datagen::{Label, MqarInstance};
use crate::error::{Error, Result};
use crate::Token;

/// Value used for the missing successor of the last token.
pub const SENTINEL: Token = Token::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub key: Token,
    pub value: Token,
    pub query: Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recall {
    /// Index of the matched key (triple index or token position).
    pub key_index: usize,
    pub value: Token,
}

/// One entry per step or position; `None` where nothing matched.
pub type RecallLabeling = Vec<Option<Recall>>;

/// Which earlier occurrence answers a query when several match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    #[default]
    MostRecent,
    Earliest,
}

/// Query first, then insert, at every step.
pub fn sequential_mqar(triples: &[Triple]) -> RecallLabeling {
    let mut table: std::collections::HashMap<Token, (usize, Token)> = Default::default();
    let mut out = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        out.push(table.get(&t.query).map(|&(j, v)| Recall { key_index: j, value: v }));
        table.insert(t.key, (i, t.value));
    }
    out
}

pub fn tokens_to_triples(tokens: &[Token]) -> Vec<Triple> {
    (0..tokens.len())
        .map(|i| Triple { key: tokens[i], value: tokens.get(i + 1).copied().unwrap_or(SENTINEL), query: tokens[i] })
        .collect()
}

/// Token-level recall with the most-recent rule.
pub fn token_mqar(tokens: &[Token]) -> RecallLabeling {
    token_mqar_with(tokens, MatchRule::MostRecent)
}

pub fn token_mqar_with(tokens: &[Token], rule: MatchRule) -> RecallLabeling {
    let mut seen: std::collections::HashMap<Token, usize> = Default::default();
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        out.push(seen.get(&t).map(|&j| Recall {
            key_index: j,
            value: tokens.get(j + 1).copied().unwrap_or(SENTINEL),
        }));
        match rule {
            MatchRule::MostRecent => {
                seen.insert(t, i);
            }
            MatchRule::Earliest => {
                seen.entry(t).or_insert(i);
            }
        }
    }
    out
}

fn check_sorted<T: Ord>(v: &[T], name: &str) -> Result<()> {
    if v.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid(format!("{name} is not sorted")));
    }
    Ok(())
}

/// For each `a[i]`, the smallest `j` with `a[i] ≤ b[j]`, or `b.len()`.
///
/// Resolves the middle element of `a` by binary search, then recurses on the
/// lower half of `a` against the matching prefix of `b` and on the upper half
/// against the matching suffix.
pub fn pbs_multiple_search<T: Ord>(a: &[T], b: &[T]) -> Result<Vec<usize>> {
    check_sorted(a, "A")?;
    check_sorted(b, "B")?;
    let mut out = vec![0; a.len()];
    pbs_rec(a, b, 0, a.len(), 0, b.len(), &mut out);
    Ok(out)
}

fn pbs_rec<T: Ord>(a: &[T], b: &[T], lo: usize, hi: usize, blo: usize, bhi: usize, out: &mut [usize]) {
    if lo >= hi {
        return;
    }
    let mid = lo + (hi - lo) / 2;
    let c = blo + b[blo..bhi].partition_point(|x| x < &a[mid]);
    out[mid] = c;
    pbs_rec(a, b, lo, mid, blo, c, out);
    pbs_rec(a, b, mid + 1, hi, c, bhi, out);
}

/// Dyadic-block parallel solver; output equals [`sequential_mqar`].
///
/// At level `k` the indices split into aligned blocks of size `2^{k+1}`; the
/// lower half supplies keys and the upper half queries, so every pair `j < i`
/// meets in exactly one level. Indices past the input behave as
/// never-matching padding up to the next power of two.
pub fn parallel_mqar(triples: &[Triple]) -> RecallLabeling {
    let n = triples.len();
    if n == 0 {
        return Vec::new();
    }
    let levels = n.next_power_of_two().trailing_zeros() as usize;
    let mut best: Vec<Option<usize>> = vec![None; n];
    for k in 0..levels {
        let half = 1usize << k;
        let blocks = n.div_ceil(2 * half);
        let found: Vec<Vec<(usize, usize)>> = (0..blocks)
            .into_par_iter()
            .map(|x| {
                let start = x * 2 * half;
                let mid = (start + half).min(n);
                let end = (start + 2 * half).min(n);
                if mid >= end {
                    return Vec::new();
                }
                // Keys sorted by value, latest index first among equals.
                let mut keys: Vec<(Token, Reverse<usize>)> =
                    (start..mid).map(|j| (triples[j].key, Reverse(j))).collect();
                keys.sort_unstable();
                let mut idx: Vec<usize> = (mid..end).collect();
                idx.sort_unstable_by_key(|&i| (triples[i].query, i));
                // Reverse(MAX) orders a query before every key with the same token.
                let queries: Vec<(Token, Reverse<usize>)> =
                    idx.iter().map(|&i| (triples[i].query, Reverse(usize::MAX))).collect();
                let pos = pbs_multiple_search(&queries, &keys).expect("sorted by construction");
                let mut hits = Vec::new();
                for (r, &c) in pos.iter().enumerate() {
                    if c < keys.len() && keys[c].0 == queries[r].0 {
                        hits.push((idx[r], keys[c].1 .0));
                    }
                }
                hits
            })
            .collect();
        for (i, j) in found.into_iter().flatten() {
            if best[i].is_none_or(|b| j > b) {
                best[i] = Some(j);
            }
        }
    }
    best.into_iter()
        .map(|m| m.map(|j| Recall { key_index: j, value: triples[j].value }))
        .collect()
}

/// Fraction of labels whose prediction equals the target.
pub fn score(predictions: &[Option<Token>], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    let mut correct = 0usize;
    for (i, (p, l)) in predictions.iter().zip(labels).enumerate() {
        match p {
            None => return Err(Error::invalid(format!("missing prediction for label {i} at position {}", l.pos))),
            Some(t) if *t == l.target => correct += 1,
            Some(_) => {}
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Cross-checks stored labels against the token oracle.
///
/// Every label must be answered with its target; positions holding a key id
/// (`< vocab/2`) that carry no label must have no earlier match.
pub fn verify_labels(inst: &MqarInstance) -> std::result::Result<(), String> {
    let rec = token_mqar(&inst.tokens);
    let half = (inst.meta.vocab / 2) as Token;
    for l in &inst.labels {
        match rec.get(l.pos).copied().flatten() {
            Some(r) if r.value == l.target => {}
            other => return Err(format!("label at {} expects {} but oracle gives {other:?}", l.pos, l.target)),
        }
    }
    for (p, r) in rec.iter().enumerate() {
        if r.is_some() && inst.tokens[p] < half && !inst.labels.iter().any(|l| l.pos == p) {
            return Err(format!("unlabelled recall at position {p}"));
        }
    }
    Ok(())
}
