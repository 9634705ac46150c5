//! Associative-recall hits in natural token streams, perplexity slices, and
//! attribution of a quality gap to those hits.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Token;

/// Default cap on training frequency for an n-gram to count as a recall hit.
pub const DEFAULT_THRESHOLD: u64 = 1250;

/// Training-set n-gram counts. Absent n-grams count zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FreqTable {
    counts: HashMap<Vec<Token>, u64>,
}

impl FreqTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts every `n`-gram of the documents.
    pub fn count_from(docs: &[Vec<Token>], n: usize) -> Self {
        let mut t = FreqTable::new();
        for doc in docs {
            for w in doc.windows(n.max(1)) {
                *t.counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        t
    }

    pub fn insert(&mut self, gram: Vec<Token>, count: u64) {
        self.counts.insert(gram, count);
    }

    pub fn get(&self, gram: &[Token]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Parses lines of whitespace-separated ids followed by a count.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = FreqTable::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            if fields.len() < 2 {
                return Err(bad("expected token ids followed by a count"));
            }
            let (gram, count) = fields.split_at(fields.len() - 1);
            let gram = gram.iter().map(|s| s.parse::<Token>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(&e.to_string()))?;
            let count = count[0].parse::<u64>().map_err(|e| bad(&e.to_string()))?;
            t.insert(gram, count);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitOpts {
    pub n: usize,
    pub threshold: u64,
    /// N-grams containing any of these ids never count.
    pub exclude: HashSet<Token>,
}

impl Default for HitOpts {
    fn default() -> Self {
        HitOpts { n: 2, threshold: DEFAULT_THRESHOLD, exclude: HashSet::new() }
    }
}

/// Positions `p` whose n-gram ending at `p` occurred earlier in `doc` and is
/// rare in training. Only tokens up to `p` are inspected.
pub fn find_ar_hits(doc: &[Token], freq: &FreqTable, opts: &HitOpts) -> Vec<usize> {
    hits_with_gaps(doc, freq, opts).into_iter().map(|(p, _)| p).collect()
}

/// Hit positions paired with the distance to the latest earlier occurrence.
fn hits_with_gaps(doc: &[Token], freq: &FreqTable, opts: &HitOpts) -> Vec<(usize, usize)> {
    let n = opts.n.max(1);
    let mut last: HashMap<&[Token], usize> = HashMap::new();
    let mut hits = Vec::new();
    for p in n - 1..doc.len() {
        let gram = &doc[p + 1 - n..=p];
        if let Some(prev) = last.insert(gram, p) {
            let excluded = gram.iter().any(|t| opts.exclude.contains(t));
            if !excluded && freq.get(gram) <= opts.threshold {
                hits.push((p, p - prev));
            }
        }
    }
    hits
}

/// [`find_ar_hits`] over many documents, in document order.
pub fn find_ar_hits_docs(docs: &[Vec<Token>], freq: &FreqTable, opts: &HitOpts) -> Vec<Vec<usize>> {
    docs.par_iter().map(|d| find_ar_hits(d, freq, opts)).collect()
}

/// Distance from each repeated n-gram to its most recent earlier occurrence,
/// counted per distance. Training frequency is ignored.
pub fn gap_histogram(doc: &[Token], n: usize) -> BTreeMap<usize, u64> {
    let opts = HitOpts { n, threshold: u64::MAX, exclude: HashSet::new() };
    let mut hist = BTreeMap::new();
    for (_, gap) in hits_with_gaps(doc, &FreqTable::new(), &opts) {
        *hist.entry(gap).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slice {
    pub count: usize,
    /// `None` for an empty slice.
    pub mean_nll: Option<f64>,
    pub perplexity: Option<f64>,
}

impl Slice {
    fn from_sum(count: usize, nll_sum: f64) -> Self {
        if count == 0 {
            return Slice { count, mean_nll: None, perplexity: None };
        }
        let mean = nll_sum / count as f64;
        Slice { count, mean_nll: Some(mean), perplexity: Some(mean.exp()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceReport {
    pub ar: Slice,
    pub other: Slice,
    pub overall: Slice,
    /// Fraction of scored tokens that are hits.
    pub p_h: f64,
}

/// Splits per-token log-probabilities into hit and non-hit slices.
pub fn slice_perplexity(logprobs: &[Vec<f64>], hits: &[Vec<usize>]) -> Result<SliceReport> {
    if logprobs.len() != hits.len() {
        return Err(Error::shape(format!("{} log-prob documents for {} hit lists", logprobs.len(), hits.len())));
    }
    let (mut ar_n, mut ar_sum, mut other_n, mut other_sum) = (0usize, 0.0, 0usize, 0.0);
    for (lp, h) in logprobs.iter().zip(hits) {
        let mut is_hit = vec![false; lp.len()];
        for &p in h {
            if p >= lp.len() {
                return Err(Error::shape(format!("hit position {p} outside a {}-token document", lp.len())));
            }
            is_hit[p] = true;
        }
        for (v, hit) in lp.iter().zip(is_hit) {
            if hit {
                ar_n += 1;
                ar_sum -= v;
            } else {
                other_n += 1;
                other_sum -= v;
            }
        }
    }
    let total = ar_n + other_n;
    Ok(SliceReport {
        ar: Slice::from_sum(ar_n, ar_sum),
        other: Slice::from_sum(other_n, other_sum),
        overall: Slice::from_sum(total, ar_sum + other_sum),
        p_h: if total == 0 { 0.0 } else { ar_n as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attribution {
    Fraction(f64),
    /// Both models have the same overall loss.
    UndefinedTie,
}

/// Share of model `m`'s overall loss gap to reference `big` explained by the
/// hit slice: `min((l_H^m − l_H^M) · p_H / (l^m − l^M), 1)`, floored at 0.
///
/// When `m` is better overall the share is 1 if `m` is still worse on hits,
/// else 0.
pub fn gap_attribution(m_hit: f64, m_all: f64, big_hit: f64, big_all: f64, p_h: f64) -> Attribution {
    let denom = m_all - big_all;
    if denom == 0.0 {
        return Attribution::UndefinedTie;
    }
    if denom < 0.0 {
        return Attribution::Fraction(if m_hit > big_hit { 1.0 } else { 0.0 });
    }
    Attribution::Fraction(((m_hit - big_hit) * p_h / denom).clamp(0.0, 1.0))
}

/// [`gap_attribution`] from two slice reports over the same stream.
pub fn gap_attribution_reports(m: &SliceReport, big: &SliceReport) -> Result<Attribution> {
    match (m.ar.mean_nll, m.overall.mean_nll, big.ar.mean_nll, big.overall.mean_nll) {
        (Some(a), Some(b), Some(c), Some(d)) => Ok(gap_attribution(a, b, c, d, m.p_h)),
        _ => Err(Error::invalid("attribution needs non-empty hit and overall slices")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_phrase_is_a_hit() {
        // Hakuna=1 Matata=2 it=3 means=4 no=5 worries=6
        let doc = [1, 2, 3, 4, 5, 6, 7, 8, 1, 2];
        assert_eq!(find_ar_hits(&doc, &FreqTable::new(), &HitOpts::default()), vec![9]);
        assert!(find_ar_hits(&[1, 2, 3, 4], &FreqTable::new(), &HitOpts::default()).is_empty());
    }

    #[test]
    fn threshold_boundary_and_exclusions() {
        let doc = [1, 2, 9, 1, 2];
        let mut f = FreqTable::new();
        f.insert(vec![1, 2], 1250);
        assert_eq!(find_ar_hits(&doc, &f, &HitOpts::default()), vec![4]);
        f.insert(vec![1, 2], 1251);
        assert!(find_ar_hits(&doc, &f, &HitOpts::default()).is_empty());
        let opts = HitOpts { exclude: [2].into_iter().collect(), ..Default::default() };
        assert!(find_ar_hits(&doc, &FreqTable::new(), &opts).is_empty());
    }

    #[test]
    fn gaps() {
        let h = gap_histogram(&[10, 11, 0, 10, 11], 2);
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(3, 1)]);
        assert!(gap_histogram(&[1, 2, 3], 2).is_empty());
    }

    #[test]
    fn slices_by_hand() {
        let lp = vec![(0..10).map(|i| -(i as f64) / 10.0).collect::<Vec<_>>()];
        let r = slice_perplexity(&lp, &[vec![3, 7]]).unwrap();
        assert_eq!((r.ar.count, r.other.count, r.overall.count), (2, 8, 10));
        assert!((r.ar.mean_nll.unwrap() - 0.5).abs() < 1e-12);
        assert!((r.other.mean_nll.unwrap() - 3.5 / 8.0).abs() < 1e-12);
        assert!((r.p_h - 0.2).abs() < 1e-12);
        let half = vec![vec![-(2f64).ln(); 6]];
        let r = slice_perplexity(&half, &[vec![1]]).unwrap();
        assert!((r.ar.perplexity.unwrap() - 2.0).abs() < 1e-12 && (r.other.perplexity.unwrap() - 2.0).abs() < 1e-12);
        let r = slice_perplexity(&half, &[vec![]]).unwrap();
        assert_eq!(r.ar.perplexity, None);
        assert!(slice_perplexity(&half, &[vec![6]]).is_err());
    }

    #[test]
    fn attribution_cases() {
        match gap_attribution(3.0, 2.078, 2.0, 2.0, 0.064) {
            Attribution::Fraction(f) => assert!((f - 0.064 / 0.078).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert_eq!(gap_attribution(1.0, 1.0, 1.0, 1.0, 0.1), Attribution::UndefinedTie);
        assert_eq!(gap_attribution(100.0, 2.1, 1.0, 2.0, 0.5), Attribution::Fraction(1.0));
        assert_eq!(gap_attribution(2.0, 1.9, 1.0, 2.0, 0.5), Attribution::Fraction(1.0));
    }

    #[test]
    fn frequency_file() {
        let t = FreqTable::parse("1 2 5\n\n3 4 0\n").unwrap();
        assert_eq!((t.get(&[1, 2]), t.get(&[3, 4]), t.get(&[9, 9])), (5, 0, 0));
        assert!(matches!(FreqTable::parse("1 2 x"), Err(Error::Parse { line: 1, .. })));
    }
}
