//! Training FLOP estimates per architecture.
//!
//! Each architecture sums per-layer rows (times `L`) plus the input layer and
//! language-model head (`B·V·N·D` each). Rows written without a batch factor
//! (attention's `H·N²`, filter MLPs) are charged per sequence, so every count
//! is exactly linear in `B`. The sum counts multiply-adds of one
//! forward pass; training cost multiplies it by [`TRAIN_MULTIPLIER`]
//! (two FLOPs per multiply-add, three passes for forward and backward).

use crate::error::{Error, Result};

pub const TRAIN_MULTIPLIER: f64 = 6.0;
pub const GPT2_VOCAB: usize = 50_257;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Attention,
    Hyena,
    LongConv,
    BaseConv,
    Rwkv,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Arch::Attention,
            "hyena" => Arch::Hyena,
            "longconv" | "long-conv" => Arch::LongConv,
            "baseconv" => Arch::BaseConv,
            "rwkv" => Arch::Rwkv,
            _ => return Err(Error::config(format!("unknown architecture `{s}`"))),
        })
    }
}

/// How literally to follow the row formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accounting {
    /// Rows as written, except: attention counts both the score and the
    /// value product (`2·B·N²·D`), and width-4 MLPs count `8·B·N·D²`.
    #[default]
    Reported,
    /// Rows exactly as written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    /// Implicit filter MLP order for Hyena and BaseConv.
    pub order: usize,
    /// Attention window; `None` is full causal attention.
    pub window: Option<usize>,
}

impl Dims {
    /// 125M attention configuration: 12 layers, width 768, 12 heads, length 2048.
    pub fn attention_125m() -> Self {
        Dims { b: 1, n: 2048, d: 768, heads: 12, layers: 12, vocab: GPT2_VOCAB, order: 64, window: None }
    }
}

/// Training FLOPs for one batch.
pub fn flops(arch: Arch, dims: &Dims, acc: Accounting) -> Result<f64> {
    let Dims { b, n, d, heads, layers, vocab, order, window } = *dims;
    if n == 0 || d == 0 || heads == 0 || layers == 0 || vocab == 0 {
        return Err(Error::config("FLOP dimensions must be positive"));
    }
    let (b, n, d, h, l, v, order) = (b as f64, n as f64, d as f64, heads as f64, layers as f64, vocab as f64, order as f64);
    let span = window.map_or(n, |w| (w as f64).min(n));
    let fft = 10.0 * n * n.log2();
    let literal = acc == Accounting::Literal;
    let mlp4 = if literal { 8.0 * 2.0 / 3.0 } else { 8.0 };
    let per_layer = match arch {
        Arch::Attention => {
            let qkv = 3.0 * b * n * d * d;
            let products = if literal { 1.0 } else { 2.0 };
            let mix = b * h * h * d + b * h * n * span + products * b * n * span * d;
            let out = b * n * d * d;
            qkv + mix + out + mlp4 * b * n * d * d
        }
        Arch::Hyena => {
            let input = 3.0 * b * n * d * d + 9.0 * b * n * d;
            input + fft * d * b + 3.0 * b * n * d + b * order * d + b * n * d * d + 4.0 * b * n * d * d
        }
        Arch::LongConv => fft * d * b + b * n * d * d + mlp4 * b * n * d * d,
        Arch::BaseConv => {
            let half = 0.5 * d;
            fft * half * b + b * n * half + b * half * order + b * n * d * d + 4.0 * b * n * d * d
        }
        // Linear-layer parameters per block: time mixing 4D², channel mixing 9D².
        Arch::Rwkv => 13.0 * d * d * n * b,
    };
    Ok(TRAIN_MULTIPLIER * (l * per_layer + 2.0 * b * v * n * d))
}
