//! Synthetic MQAR, single-query recall and fixed-filler evaluation data.
//!
//! Layout of an MQAR instance of length `N` with `D` pairs over vocabulary `c`:
//! positions `0..2D` hold key/value pairs (keys from `0..c/2`, values from
//! `c/2..c`), each key reappears once at an even position in `2D..N`, and every
//! other position holds the pad id `c`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{instance_seed, rng_from, Rng};
use crate::Token;

pub const FORMAT_VERSION: &str = "mqar-v1";

/// How the second occurrence of each key is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Weight `(p − p_first)^−α`: a power law over the recall gap.
    #[default]
    GapRelative,
    /// Weight `p^−α`: a power law over absolute position.
    Absolute,
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap-relative" | "gap" => Ok(Placement::GapRelative),
            "absolute" => Ok(Placement::Absolute),
            _ => Err(Error::config(format!("unknown placement `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seq_len: usize,
    pub num_pairs: usize,
    pub alpha: f64,
    pub vocab_size: usize,
    pub seed: u64,
    pub num_examples: usize,
    #[serde(default)]
    pub placement: Placement,
}

impl GenConfig {
    pub fn new(seq_len: usize, num_pairs: usize, alpha: f64, vocab_size: usize, seed: u64) -> Self {
        GenConfig { seq_len, num_pairs, alpha, vocab_size, seed, num_examples: 1, placement: Placement::GapRelative }
    }

    /// Number of even positions in `2D..N` available for second occurrences.
    pub fn query_slots(&self) -> usize {
        self.seq_len.saturating_sub(2 * self.num_pairs).div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d, c) = (self.seq_len, self.num_pairs, self.vocab_size);
        if d == 0 {
            return Err(Error::config("num_pairs must be at least 1"));
        }
        if c == 0 || c % 2 != 0 {
            return Err(Error::config(format!("vocab_size must be even and positive, got {c}")));
        }
        if c > u32::MAX as usize {
            return Err(Error::config("vocab_size does not fit a token id"));
        }
        if 2 * d > n {
            return Err(Error::config(format!("2·num_pairs = {} exceeds seq_len {n}", 2 * d)));
        }
        if d > c / 2 {
            return Err(Error::config(format!("num_pairs {d} exceeds vocab_size/2 = {}", c / 2)));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.query_slots() < d {
            return Err(Error::config(format!(
                "{d} second occurrences cannot fit in the {} even slots of {}..{n}",
                self.query_slots(),
                2 * d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub pos: usize,
    pub target: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub alpha: f64,
    pub vocab: usize,
    pub seed: u64,
    pub index: u64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqarInstance {
    pub tokens: Vec<Token>,
    pub labels: Vec<Label>,
    pub meta: Meta,
    /// Next-token labels at positions followed by filler (filler evaluation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonar_labels: Option<Vec<Label>>,
}

impl MqarInstance {
    /// The pad / filler id, one past the vocabulary.
    pub fn pad(&self) -> Token {
        self.meta.vocab as Token
    }
}

fn draw_pairs(rng: &mut Rng, c: usize, d: usize) -> (Vec<Token>, Vec<Token>) {
    let half = c / 2;
    let keys = index::sample(rng, half, d).into_iter().map(|k| k as Token).collect();
    let values = index::sample(rng, half, d).into_iter().map(|v| (half + v) as Token).collect();
    (keys, values)
}

fn meta(cfg: &GenConfig, index: u64, variant: &str) -> Meta {
    Meta {
        n: cfg.seq_len,
        d: cfg.num_pairs,
        alpha: cfg.alpha,
        vocab: cfg.vocab_size,
        seed: cfg.seed,
        index,
        variant: variant.to_string(),
    }
}

/// Samples an index from unnormalized weights.
fn weighted_pick(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// One MQAR instance; a pure function of `(cfg, index)`.
pub fn gen_mqar(cfg: &GenConfig, index: u64) -> Result<MqarInstance> {
    cfg.validate()?;
    let (n, d, c) = (cfg.seq_len, cfg.num_pairs, cfg.vocab_size);
    let mut rng = rng_from(instance_seed(cfg.seed, index));
    let (keys, values) = draw_pairs(&mut rng, c, d);
    let pad = c as Token;
    let mut tokens = vec![pad; n];
    for i in 0..d {
        tokens[2 * i] = keys[i];
        tokens[2 * i + 1] = values[i];
    }
    let mut free: Vec<usize> = (2 * d..n).step_by(2).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let mut labels = Vec::with_capacity(d);
    for pair in order {
        let first = 2 * pair;
        let weights: Vec<f64> = free
            .iter()
            .map(|&p| {
                let x = match cfg.placement {
                    Placement::GapRelative => p - first,
                    Placement::Absolute => p,
                };
                (x as f64).powf(-cfg.alpha)
            })
            .collect();
        let k = weighted_pick(&mut rng, &weights);
        let pos = free.remove(k);
        tokens[pos] = keys[pair];
        labels.push(Label { pos, target: values[pair] });
    }
    labels.sort_by_key(|l| l.pos);
    Ok(MqarInstance { tokens, labels, meta: meta(cfg, index, "mqar"), nonar_labels: None })
}

/// `D` pairs, pad, then one repeated key at the final position.
pub fn gen_single_query(cfg: &GenConfig, index: u64) -> Result<MqarInstance> {
    let (n, d, c) = (cfg.seq_len, cfg.num_pairs, cfg.vocab_size);
    if d == 0 || c == 0 || c % 2 != 0 || d > c / 2 || 2 * d + 1 > n {
        return Err(Error::config(format!(
            "single query needs 1 ≤ D ≤ c/2 and 2D+1 ≤ N (N={n}, D={d}, c={c})"
        )));
    }
    let mut rng = rng_from(instance_seed(cfg.seed, index));
    let (keys, values) = draw_pairs(&mut rng, c, d);
    let mut tokens = vec![c as Token; n];
    for i in 0..d {
        tokens[2 * i] = keys[i];
        tokens[2 * i + 1] = values[i];
    }
    let q = rng.random_range(0..d);
    tokens[n - 1] = keys[q];
    Ok(MqarInstance {
        tokens,
        labels: vec![Label { pos: n - 1, target: values[q] }],
        meta: meta(cfg, index, "single-query"),
        nonar_labels: None,
    })
}

/// Fixed-filler evaluation: `P` key-value bigrams each appear twice in
/// two-token slots, every other position holds the filler id `c`.
///
/// When `N ≥ 8P − 2` the occupied slots are pairwise non-adjacent, so the only
/// repeated bigrams not involving the filler are the `P` key-value bigrams.
pub fn gen_filler_eval(p: usize, n: usize, c: usize, seed: u64) -> Result<MqarInstance> {
    if p == 0 || 4 * p > n {
        return Err(Error::config(format!("filler eval needs 1 ≤ P and 4P ≤ N (P={p}, N={n})")));
    }
    if !c.is_multiple_of(2) || p > c / 2 {
        return Err(Error::config(format!("vocab {c} must be even with P ≤ c/2")));
    }
    let mut rng = rng_from(instance_seed(seed, p as u64));
    let (keys, values) = draw_pairs(&mut rng, c, p);
    let slots = n / 2;
    let k = 2 * p;
    let chosen: Vec<usize> = if slots + 1 >= 2 * k {
        // Stars and bars: k sorted picks from slots−k+1, spread by their rank.
        let mut picks: Vec<usize> = index::sample(&mut rng, slots - k + 1, k).into_vec();
        picks.sort_unstable();
        picks.iter().enumerate().map(|(r, &s)| s + r).collect()
    } else {
        let mut picks = index::sample(&mut rng, slots, k).into_vec();
        picks.sort_unstable();
        picks
    };
    let mut owners: Vec<usize> = (0..p).flat_map(|i| [i, i]).collect();
    owners.shuffle(&mut rng);
    let filler = c as Token;
    let mut tokens = vec![filler; n];
    let mut seen = vec![false; p];
    let mut labels = Vec::with_capacity(p);
    for (&slot, &pair) in chosen.iter().zip(&owners) {
        let pos = 2 * slot;
        tokens[pos] = keys[pair];
        tokens[pos + 1] = values[pair];
        if seen[pair] {
            labels.push(Label { pos, target: values[pair] });
        }
        seen[pair] = true;
    }
    let nonar = (1..n).filter(|&q| tokens[q] == filler).map(|q| Label { pos: q - 1, target: filler }).collect();
    let cfg = GenConfig::new(n, p, 0.0, c, seed);
    Ok(MqarInstance { tokens, labels, meta: meta(&cfg, p as u64, "filler"), nonar_labels: Some(nonar) })
}

/// Generates `cfg.num_examples` instances in parallel; order follows the index.
pub fn gen_dataset(cfg: &GenConfig) -> Result<Vec<MqarInstance>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..cfg.num_examples as u64).into_par_iter().map(|i| gen_mqar(cfg, i)).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
}

pub fn write_dataset(instances: &[MqarInstance], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(instances, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_records(instances: &[MqarInstance], w: &mut impl Write) -> Result<()> {
    let header = Header { format: FORMAT_VERSION.to_string() };
    serde_json::to_writer(&mut *w, &header).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut *w, inst).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<MqarInstance>> {
    read_records(BufReader::new(File::open(path)?))
}

/// Parses the line format; line numbers in errors are 1-based and count the header.
pub fn read_records(r: impl BufRead) -> Result<Vec<MqarInstance>> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        None => return Err(Error::Parse { line: 1, msg: "missing header record".into() }),
        Some((_, line)) => line?,
    };
    let header: Header =
        serde_json::from_str(&header).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("format `{}` is not supported (expected `{FORMAT_VERSION}`)", header.format),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: MqarInstance =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if inst.tokens.len() != inst.meta.n {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("field `tokens` has length {} but meta.N = {}", inst.tokens.len(), inst.meta.n),
            });
        }
        if let Some(l) = inst.labels.iter().find(|l| l.pos >= inst.tokens.len()) {
            return Err(Error::Parse { line: i + 1, msg: format!("field `labels` has position {} out of range", l.pos) });
        }
        out.push(inst);
    }
    Ok(out)
}

/// Checks the structural invariants of a generated MQAR instance.
pub fn check_invariants(inst: &MqarInstance) -> std::result::Result<(), String> {
    let (n, d, c) = (inst.meta.n, inst.meta.d, inst.meta.vocab);
    let half = (c / 2) as Token;
    let pad = c as Token;
    if inst.tokens.len() != n {
        return Err(format!("length {} != N {n}", inst.tokens.len()));
    }
    for i in 0..d {
        let (k, v) = (inst.tokens[2 * i], inst.tokens[2 * i + 1]);
        if k >= half {
            return Err(format!("key {k} at {} outside key range", 2 * i));
        }
        if v < half || v >= pad {
            return Err(format!("value {v} at {} outside value range", 2 * i + 1));
        }
        let count = inst.tokens.iter().filter(|&&t| t == k).count();
        if count != 2 {
            return Err(format!("key {k} appears {count} times"));
        }
    }
    if inst.labels.len() != d {
        return Err(format!("{} labels for {d} pairs", inst.labels.len()));
    }
    for l in &inst.labels {
        if l.pos < 2 * d || l.pos >= n {
            return Err(format!("label position {} outside {}..{n}", l.pos, 2 * d));
        }
        let key = inst.tokens[l.pos];
        let first = (0..d).find(|&i| inst.tokens[2 * i] == key).ok_or(format!("label at {} is not a key", l.pos))?;
        if inst.tokens[2 * first + 1] != l.target {
            return Err(format!("label at {} targets {} not the paired value", l.pos, l.target));
        }
    }
    for (p, &t) in inst.tokens.iter().enumerate().skip(2 * d) {
        if t != pad && !inst.labels.iter().any(|l| l.pos == p) {
            return Err(format!("unexpected token {t} at {p}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_layout() {
        let cfg = GenConfig::new(4, 1, 0.1, 16, 3);
        for i in 0..20 {
            let inst = gen_mqar(&cfg, i).unwrap();
            let t = &inst.tokens;
            assert_eq!(t[0], t[2]);
            assert_eq!(t[3], 16);
            assert_eq!(inst.labels, vec![Label { pos: 2, target: t[1] }]);
            check_invariants(&inst).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let cfg = GenConfig::new(64, 4, 0.1, 8192, 11);
        let a = serde_json::to_string(&gen_mqar(&cfg, 5).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_mqar(&cfg, 5).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(gen_mqar(&cfg, 5).unwrap(), gen_mqar(&cfg, 6).unwrap());
    }

    #[test]
    fn validation() {
        assert!(GenConfig::new(8, 4, 0.1, 16, 0).validate().is_err());
        assert!(GenConfig::new(16, 4, 0.1, 15, 0).validate().is_err());
        assert!(GenConfig::new(16, 4, 0.0, 16, 0).validate().is_err());
        assert!(GenConfig::new(16, 9, 0.1, 16, 0).validate().is_err());
        assert!(GenConfig::new(16, 4, 0.1, 16, 0).validate().is_ok());
    }

    #[test]
    fn single_query_shape() {
        let cfg = GenConfig::new(3, 1, 0.1, 8, 0);
        let inst = gen_single_query(&cfg, 0).unwrap();
        assert_eq!(inst.tokens[0], inst.tokens[2]);
        assert_eq!(inst.labels, vec![Label { pos: 2, target: inst.tokens[1] }]);
        let cfg = GenConfig::new(32, 5, 0.1, 64, 9);
        let inst = gen_single_query(&cfg, 3).unwrap();
        assert_eq!(inst.labels.len(), 1);
        assert_eq!(inst.labels[0].pos, 31);
        assert_eq!(inst, gen_single_query(&cfg, 3).unwrap());
    }

    #[test]
    fn filler_grid_validates() {
        for p in [16, 32, 64, 128, 256] {
            let inst = gen_filler_eval(p, 1024, 8192, 1).unwrap();
            assert_eq!(inst.labels.len(), p);
        }
        let inst = gen_filler_eval(1, 8, 16, 2).unwrap();
        assert_eq!(inst.labels.len(), 1);
        assert!(gen_filler_eval(3, 8, 16, 2).is_err());
    }

    #[test]
    fn round_trip_and_errors() {
        let cfg = GenConfig { num_examples: 5, ..GenConfig::new(16, 2, 0.1, 32, 4) };
        let data = gen_dataset(&cfg).unwrap();
        let mut buf = Vec::new();
        write_records(&data, &mut buf).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap(), data);

        let mut empty = Vec::new();
        write_records(&[], &mut empty).unwrap();
        assert!(read_records(&empty[..]).unwrap().is_empty());

        let bad = "{\"format\":\"mqar-v1\"}\n{\"tokens\":[1,2],\"meta\":{\"N\":2,\"D\":1,\"alpha\":0.1,\"vocab\":4,\"seed\":0,\"index\":0,\"variant\":\"mqar\"}}\n";
        match read_records(bad.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("labels"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let wrong = "{\"format\":\"mqar-v0\"}\n";
        assert!(matches!(read_records(wrong.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
