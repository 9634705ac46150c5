//! Two softmax-free attention layers that answer every MQAR query exactly.
//!
//! Layer 1 copies each value onto the row of its key through an additive
//! up-shift bias; layer 2 matches queries against those keys and reads out the
//! copied values.

use crate::error::{Error, Result};
use crate::mixers::{attention_forward, AttentionOpts, AttentionParams};
use crate::numerics::{argmax, SeqTensor};
use crate::Token;

/// Rows with a largest entry below this decode as "no match".
pub const MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSolver {
    pub c: usize,
    pub layer1: AttentionParams,
    pub layer2: AttentionParams,
}

/// `3c × 3c` matrix with an identity block from input block `from` to output block `to`.
fn block_identity(c: usize, from: usize, to: usize) -> SeqTensor {
    let mut w = SeqTensor::zeros(3 * c, 3 * c);
    for i in 0..c {
        w[(from * c + i, to * c + i)] = 1.0;
    }
    w
}

/// `B[i][i+1] = 1`: row `i` reads row `i + 1`.
pub fn up_shift_bias(n: usize) -> SeqTensor {
    SeqTensor::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 })
}

impl AttentionSolver {
    /// Weights depend on `c` only.
    pub fn new(c: usize) -> Self {
        let zero = SeqTensor::zeros(3 * c, 3 * c);
        AttentionSolver {
            c,
            layer1: AttentionParams::new(zero.clone(), zero, block_identity(c, 1, 1)),
            layer2: AttentionParams::new(block_identity(c, 2, 0), block_identity(c, 0, 0), block_identity(c, 1, 0)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layer1.parameter_count() + self.layer2.parameter_count()
    }

    /// Output rows `[v:0:0]` at answered query rows.
    pub fn run(&self, enc: &SeqTensor) -> Result<SeqTensor> {
        let n = enc.rows();
        if enc.cols() != 3 * self.c || !n.is_multiple_of(3) {
            return Err(Error::shape(format!("expected a 3T x {} encoding, got {:?}", 3 * self.c, enc.shape())));
        }
        let first = AttentionOpts {
            causal: false,
            use_softmax: false,
            bias: Some(up_shift_bias(n)),
            scale: Some(1.0),
            causal_offset: 0,
        };
        let mut x = attention_forward(enc, &self.layer1, &first)?;
        x.add_assign(enc)?;
        // Strictly earlier triples only: a query at row 3i+2 sees key rows ≤ 3i−1.
        let second = AttentionOpts { causal: true, use_softmax: false, bias: None, scale: Some(1.0), causal_offset: 3 };
        attention_forward(&x, &self.layer2, &second)
    }

    /// One answer per triple. Rows whose mass exceeds one match are rejected,
    /// since several equal keys would add their values together.
    pub fn solve(&self, enc: &SeqTensor) -> Result<Vec<Option<Token>>> {
        let out = self.run(enc)?;
        let c = self.c;
        (0..enc.rows() / 3)
            .map(|i| {
                let row = &out.row(3 * i + 2)[..c];
                let mass: f64 = row.iter().sum();
                if mass > 1.0 + MATCH_THRESHOLD {
                    return Err(Error::invalid(format!("query of triple {i} matched {mass} keys")));
                }
                let best = argmax(row);
                Ok((row[best] >= MATCH_THRESHOLD).then_some(best as Token))
            })
            .collect()
    }
}

pub fn solve_mqar_attention(enc: &SeqTensor, c: usize) -> Result<Vec<Option<Token>>> {
    AttentionSolver::new(c).solve(enc)
}
