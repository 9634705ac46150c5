use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{one_hot_embed, SeqTensor};
use crate::oracle::{sequential_mqar, Triple};
use crate::rng::Rng;
use crate::Token;

/// A triple sequence over vocabulary `0..c`, laid out as rows `k, v, q, k, v, q, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleInstance {
    pub c: usize,
    pub triples: Vec<Triple>,
}

/// Role of a row in the interleaved layout.
pub fn row_role(i: usize) -> usize {
    i % 3
}

impl TripleInstance {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn rows(&self) -> usize {
        3 * self.triples.len()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.triples.iter().flat_map(|t| [t.key, t.value, t.query]).collect()
    }

    /// `3T × 3c`: key rows `[k:0:0]`, value rows `[0:v:0]`, query rows `[0:0:q]`.
    pub fn encode_blocks(&self) -> Result<SeqTensor> {
        let c = self.c;
        let mut x = SeqTensor::zeros(self.rows(), 3 * c);
        for (i, t) in self.triples.iter().enumerate() {
            for (r, tok) in [t.key, t.value, t.query].into_iter().enumerate() {
                if tok as usize >= c {
                    return Err(Error::TokenRange { token: tok, vocab: c });
                }
                x[(3 * i + r, r * c + tok as usize)] = 1.0;
            }
        }
        Ok(x)
    }

    /// `3T × c` one-hot rows of the flattened token sequence.
    pub fn encode_onehot(&self) -> Result<SeqTensor> {
        one_hot_embed(&self.tokens(), self.c)
    }

    /// Reference answers per triple.
    pub fn expected(&self) -> Vec<Option<Token>> {
        sequential_mqar(&self.triples).into_iter().map(|r| r.map(|r| r.value)).collect()
    }
}

/// Query behaviour for [`gen_triples`].
#[derive(Debug, Clone, PartialEq)]
pub struct TripleGen {
    pub c: usize,
    pub num_triples: usize,
    /// Probability that a query asks for an earlier key.
    pub hit_rate: f64,
    /// Keys in `0..c/2`, values in `c/2..c` (needed when keys and values share
    /// one embedding); otherwise both range over `0..c`.
    pub split_vocab: bool,
    /// Allowed triple distances for hits; empty means any earlier key.
    pub distances: Vec<usize>,
}

/// Random instance with distinct keys. Misses use a key-range token that is
/// not an earlier key (it may be the current or a later key).
pub fn gen_triples(g: &TripleGen, rng: &mut Rng) -> Result<TripleInstance> {
    let key_range = if g.split_vocab { g.c / 2 } else { g.c };
    if g.num_triples > key_range {
        return Err(Error::invalid(format!("{} distinct keys do not fit in {key_range} ids", g.num_triples)));
    }
    let keys: Vec<Token> = index::sample(rng, key_range, g.num_triples).into_iter().map(|k| k as Token).collect();
    let mut triples = Vec::with_capacity(g.num_triples);
    for i in 0..g.num_triples {
        let value = if g.split_vocab {
            (key_range + rng.random_range(0..g.c - key_range)) as Token
        } else {
            rng.random_range(0..g.c) as Token
        };
        let candidates: Vec<usize> = if g.distances.is_empty() {
            (0..i).collect()
        } else {
            g.distances.iter().filter(|&&dist| dist >= 1 && dist <= i).map(|&dist| i - dist).collect()
        };
        let query = if !candidates.is_empty() && rng.random::<f64>() < g.hit_rate {
            keys[candidates[rng.random_range(0..candidates.len())]]
        } else {
            loop {
                let q = rng.random_range(0..key_range) as Token;
                if !keys[..i].contains(&q) {
                    break q;
                }
            }
        };
        triples.push(Triple { key: keys[i], value, query });
    }
    Ok(TripleInstance { c: g.c, triples })
}
