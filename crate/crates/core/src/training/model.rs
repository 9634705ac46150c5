//! Two-block pre-norm language model with attention or BaseConv mixing, and
//! its hand-written reverse pass.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::MqarInstance;
use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_raw, SeqTensor};
use crate::rng::{rng_from, Rng};
use crate::Token;

const LN_EPS: f64 = 1e-5;
/// Instances per independently computed gradient chunk. Chunk results are
/// summed in chunk order, so gradients do not depend on the thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    BaseConv,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Attention => "attention",
            Variant::BaseConv => "baseconv",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Variant::Attention),
            "baseconv" => Ok(Variant::BaseConv),
            _ => Err(Error::config(format!("unknown trainable variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    /// Including the pad id.
    pub vocab: usize,
    pub seq_len: usize,
    pub mlp_mult: usize,
    pub pos_embed: bool,
    pub tied: bool,
}

impl ModelSpec {
    /// Defaults for MQAR data over `c` ids: two blocks, MLP width `2d`, tied
    /// head, position embeddings for attention only.
    pub fn new(variant: Variant, seq_len: usize, d_model: usize, c: usize) -> Self {
        ModelSpec {
            variant,
            layers: 2,
            d_model,
            vocab: c + 1,
            seq_len,
            mlp_mult: 2,
            pos_embed: variant == Variant::Attention,
            tied: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != 2 {
            return Err(Error::config(format!("models have exactly 2 blocks, got {}", self.layers)));
        }
        if self.d_model == 0 || self.vocab == 0 || self.seq_len == 0 || self.mlp_mult == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<SeqTensor>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| SeqTensor::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&SeqTensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
enum MixerIdx {
    Attention { wq: usize, wk: usize, wv: usize, wo: usize },
    BaseConv { w: usize, bias: usize, h: usize },
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    mixer: MixerIdx,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    c1: usize,
    w2: usize,
    c2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    head: usize,
    pos: Option<usize>,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
}

struct Builder<'a> {
    params: Params,
    rng: Option<&'a mut Rng>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match (&mut self.rng, init) {
            (_, Init::Const(v)) => SeqTensor::filled(rows, cols, v),
            (Some(rng), Init::Normal(std)) => SeqTensor::random_normal(rows, cols, std, &mut **rng),
            (None, Init::Normal(_)) => SeqTensor::zeros(rows, cols),
        };
        self.params.names.push(name);
        self.params.tensors.push(t);
        self.params.tensors.len() - 1
    }
}

#[derive(Clone, Copy)]
enum Init {
    Const(f64),
    Normal(f64),
}

fn build(spec: &ModelSpec, rng: Option<&mut Rng>) -> (Params, Layout) {
    let (d, v, n, f) = (spec.d_model, spec.vocab, spec.seq_len, spec.mlp_mult * spec.d_model);
    let mut b = Builder { params: Params { names: vec![], tensors: vec![] }, rng };
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let out_scale = 1.0 / ((2 * spec.layers) as f64).sqrt();
    let embed = b.push("embed".into(), v, d, Init::Normal(1.0));
    let head = if spec.tied { embed } else { b.push("head".into(), v, d, lin(d)) };
    let pos = spec.pos_embed.then(|| b.push("pos".into(), n, d, Init::Normal(0.1)));
    let mut blocks = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let ln1_g = b.push(p("ln1.g"), 1, d, Init::Const(1.0));
        let ln1_b = b.push(p("ln1.b"), 1, d, Init::Const(0.0));
        let mixer = match spec.variant {
            Variant::Attention => MixerIdx::Attention {
                wq: b.push(p("mixer.wq"), d, d, lin(d)),
                wk: b.push(p("mixer.wk"), d, d, lin(d)),
                wv: b.push(p("mixer.wv"), d, d, lin(d)),
                wo: b.push(p("mixer.wo"), d, d, Init::Normal(out_scale / (d as f64).sqrt())),
            },
            Variant::BaseConv => MixerIdx::BaseConv {
                w: b.push(p("mixer.w"), d, d, lin(d)),
                bias: b.push(p("mixer.bias"), 1, d, Init::Const(0.0)),
                h: b.push(p("mixer.h"), n, d, lin(n)),
            },
        };
        let ln2_g = b.push(p("ln2.g"), 1, d, Init::Const(1.0));
        let ln2_b = b.push(p("ln2.b"), 1, d, Init::Const(0.0));
        let w1 = b.push(p("mlp.w1"), d, f, lin(d));
        let c1 = b.push(p("mlp.c1"), 1, f, Init::Const(0.0));
        let w2 = b.push(p("mlp.w2"), f, d, Init::Normal(out_scale / (f as f64).sqrt()));
        let c2 = b.push(p("mlp.c2"), 1, d, Init::Const(0.0));
        blocks.push(BlockIdx { ln1_g, ln1_b, mixer, ln2_g, ln2_b, w1, c1, w2, c2 });
    }
    let lnf_g = b.push("lnf.g".into(), 1, d, Init::Const(1.0));
    let lnf_b = b.push("lnf.b".into(), 1, d, Init::Const(0.0));
    (b.params, Layout { embed, head, pos, blocks, lnf_g, lnf_b })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    layout: Layout,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = rng_from(seed);
        let (params, layout) = build(&spec, Some(&mut rng));
        Ok(Model { spec, params, layout })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match `spec`.
    pub fn from_params(spec: ModelSpec, params: Params) -> Result<Model> {
        spec.validate()?;
        let (want, layout) = build(&spec, None);
        if want.names != params.names
            || want.tensors.iter().zip(&params.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter tensors do not match the model spec"));
        }
        Ok(Model { spec, params, layout })
    }

    /// Whether weight decay applies: matrices, not gains, biases or filters.
    pub fn decays(&self, index: usize) -> bool {
        let name = &self.params.names[index];
        self.params.tensors[index].rows() > 1 && !name.ends_with("mixer.h")
    }

    fn t(&self, i: usize) -> &SeqTensor {
        &self.params.tensors[i]
    }
}

/// Loss and predictions at the label positions of a batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean cross-entropy over label positions.
    pub loss: f64,
    /// One row per label.
    pub logits: SeqTensor,
    pub targets: Vec<Token>,
    pub correct: usize,
}

impl LossOutput {
    pub fn accuracy(&self) -> f64 {
        if self.targets.is_empty() {
            0.0
        } else {
            self.correct as f64 / self.targets.len() as f64
        }
    }
}

fn check_batch(spec: &ModelSpec, batch: &[MqarInstance]) -> Result<usize> {
    let mut labels = 0;
    for inst in batch {
        if inst.tokens.len() != spec.seq_len {
            return Err(Error::shape(format!("instance length {} differs from model length {}", inst.tokens.len(), spec.seq_len)));
        }
        if let Some(&t) = inst.tokens.iter().find(|&&t| t as usize >= spec.vocab) {
            return Err(Error::TokenRange { token: t, vocab: spec.vocab });
        }
        for l in &inst.labels {
            if l.pos >= spec.seq_len {
                return Err(Error::invalid(format!("label position {} outside length {}", l.pos, spec.seq_len)));
            }
            if l.target as usize >= spec.vocab {
                return Err(Error::TokenRange { token: l.target, vocab: spec.vocab });
            }
        }
        labels += inst.labels.len();
    }
    Ok(labels)
}

struct LnCache {
    xhat: SeqTensor,
    inv_std: Vec<f64>,
}

fn ln_forward(x: &SeqTensor, g: &SeqTensor, b: &SeqTensor) -> (SeqTensor, LnCache) {
    let (r, d) = x.shape();
    let mut xhat = SeqTensor::zeros(r, d);
    let mut y = SeqTensor::zeros(r, d);
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = s;
        let xh = xhat.row_mut(i);
        for t in 0..d {
            xh[t] = (row[t] - mean) * s;
        }
        let yr = y.row_mut(i);
        for t in 0..d {
            yr[t] = g.data()[t] * xhat[(i, t)] + b.data()[t];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Adds into `dg`, `db`; returns the input gradient.
fn ln_backward(dy: &SeqTensor, c: &LnCache, g: &SeqTensor, dg: &mut SeqTensor, db: &mut SeqTensor) -> SeqTensor {
    let (r, d) = dy.shape();
    let mut dx = SeqTensor::zeros(r, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..r {
        let dyr = dy.row(i);
        let xh = c.xhat.row(i);
        for t in 0..d {
            dg.data_mut()[t] += dyr[t] * xh[t];
            db.data_mut()[t] += dyr[t];
            dxhat[t] = dyr[t] * g.data()[t];
        }
        let mean = dxhat.iter().sum::<f64>() / d as f64;
        let mean_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(i);
        for t in 0..d {
            out[t] = c.inv_std[i] * (dxhat[t] - mean - xh[t] * mean_x);
        }
    }
    dx
}

fn add_row_bias(x: &mut SeqTensor, b: &SeqTensor) {
    for i in 0..x.rows() {
        for (v, bb) in x.row_mut(i).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

fn col_sum_into(x: &SeqTensor, out: &mut SeqTensor) {
    for i in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
}

fn matmul(a: &SeqTensor, ta: bool, b: &SeqTensor, tb: bool) -> SeqTensor {
    let m = if ta { a.cols() } else { a.rows() };
    let n = if tb { b.rows() } else { b.cols() };
    let mut c = SeqTensor::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

enum MixCache {
    Attention { q: SeqTensor, k: SeqTensor, v: SeqTensor, probs: Vec<f64>, o: SeqTensor },
    BaseConv { g: SeqTensor, c: SeqTensor },
}

struct BlockCache {
    ln1: LnCache,
    a: SeqTensor,
    mix: MixCache,
    ln2: LnCache,
    z: SeqTensor,
    pre: SeqTensor,
}

struct ChunkCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    sel: SeqTensor,
    label_rows: Vec<usize>,
}

/// `c[i, t] = Σ_{k ≤ i} h[k, t] · a[i − k, t]` within each length-`n` instance.
fn conv_forward(a: &SeqTensor, h: &SeqTensor, n: usize) -> SeqTensor {
    let (r, d) = a.shape();
    let mut c = SeqTensor::zeros(r, d);
    let (ad, hd) = (a.data(), h.data());
    let cd = c.data_mut();
    for base in (0..r).step_by(n) {
        for i in 0..n {
            let out = &mut cd[(base + i) * d..(base + i + 1) * d];
            for k in 0..=i {
                let hr = &hd[k * d..(k + 1) * d];
                let ar = &ad[(base + i - k) * d..(base + i - k + 1) * d];
                for t in 0..d {
                    out[t] += hr[t] * ar[t];
                }
            }
        }
    }
    c
}

/// Returns the input gradient of [`conv_forward`] and adds the filter gradient into `dh`.
fn conv_backward(dc: &SeqTensor, a: &SeqTensor, h: &SeqTensor, dh: &mut SeqTensor, n: usize) -> SeqTensor {
    let (r, d) = a.shape();
    let mut da = SeqTensor::zeros(r, d);
    let (ad, hd, dcd) = (a.data(), h.data(), dc.data());
    let dad = da.data_mut();
    let dhd = dh.data_mut();
    for base in (0..r).step_by(n) {
        for i in 0..n {
            let g = &dcd[(base + i) * d..(base + i + 1) * d];
            for k in 0..=i {
                let j = base + i - k;
                let hr = &hd[k * d..(k + 1) * d];
                let ar = &ad[j * d..(j + 1) * d];
                let dhr = &mut dhd[k * d..(k + 1) * d];
                for t in 0..d {
                    dhr[t] += g[t] * ar[t];
                }
                let dar = &mut dad[j * d..(j + 1) * d];
                for t in 0..d {
                    dar[t] += g[t] * hr[t];
                }
            }
        }
    }
    da
}

impl Model {
    fn mixer_forward(&self, m: MixerIdx, a: &SeqTensor) -> (SeqTensor, MixCache) {
        let n = self.spec.seq_len;
        let (r, d) = a.shape();
        match m {
            MixerIdx::Attention { wq, wk, wv, wo } => {
                let q = matmul(a, false, self.t(wq), false);
                let k = matmul(a, false, self.t(wk), false);
                let v = matmul(a, false, self.t(wv), false);
                let scale = 1.0 / (d as f64).sqrt();
                let mut probs = vec![0.0; r * n];
                let mut o = SeqTensor::zeros(r, d);
                for b in 0..r / n {
                    let rows = b * n * d..(b + 1) * n * d;
                    let p = &mut probs[b * n * n..(b + 1) * n * n];
                    gemm_raw(scale, &q.data()[rows.clone()], d, false, &k.data()[rows.clone()], d, true, 0.0, p, n, d, n);
                    for i in 0..n {
                        let row = &mut p[i * n..(i + 1) * n];
                        let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for x in row[..=i].iter_mut() {
                            *x = (*x - max).exp();
                            sum += *x;
                        }
                        for x in row[..=i].iter_mut() {
                            *x /= sum;
                        }
                        row[i + 1..].fill(0.0);
                    }
                    gemm_raw(1.0, p, n, false, &v.data()[rows.clone()], d, false, 0.0, &mut o.data_mut()[rows], n, n, d);
                }
                let y = matmul(&o, false, self.t(wo), false);
                (y, MixCache::Attention { q, k, v, probs, o })
            }
            MixerIdx::BaseConv { w, bias, h } => {
                let mut g = matmul(a, false, self.t(w), false);
                add_row_bias(&mut g, self.t(bias));
                let c = conv_forward(a, self.t(h), n);
                let y = g.hadamard(&c).expect("same shape");
                (y, MixCache::BaseConv { g, c })
            }
        }
    }

    fn mixer_backward(&self, m: MixerIdx, a: &SeqTensor, cache: &MixCache, dy: &SeqTensor, grads: &mut Params) -> SeqTensor {
        let n = self.spec.seq_len;
        let (r, d) = a.shape();
        match (m, cache) {
            (MixerIdx::Attention { wq, wk, wv, wo }, MixCache::Attention { q, k, v, probs, o }) => {
                gemm(1.0, o, true, dy, false, 1.0, &mut grads.tensors[wo]);
                let d_o = matmul(dy, false, self.t(wo), true);
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = SeqTensor::zeros(r, d);
                let mut dk = SeqTensor::zeros(r, d);
                let mut dv = SeqTensor::zeros(r, d);
                let mut dp = vec![0.0; n * n];
                for b in 0..r / n {
                    let rows = b * n * d..(b + 1) * n * d;
                    let p = &probs[b * n * n..(b + 1) * n * n];
                    let dob = &d_o.data()[rows.clone()];
                    gemm_raw(1.0, dob, d, false, &v.data()[rows.clone()], d, true, 0.0, &mut dp, n, d, n);
                    gemm_raw(1.0, p, n, true, dob, d, false, 0.0, &mut dv.data_mut()[rows.clone()], n, n, d);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled.
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let dr = &mut dp[i * n..(i + 1) * n];
                        let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = scale * pr[j] * (dr[j] - dot);
                        }
                        dr[i + 1..].fill(0.0);
                    }
                    gemm_raw(1.0, &dp, n, false, &k.data()[rows.clone()], d, false, 0.0, &mut dq.data_mut()[rows.clone()], n, n, d);
                    gemm_raw(1.0, &dp, n, true, &q.data()[rows.clone()], d, false, 0.0, &mut dk.data_mut()[rows], n, n, d);
                }
                gemm(1.0, a, true, &dq, false, 1.0, &mut grads.tensors[wq]);
                gemm(1.0, a, true, &dk, false, 1.0, &mut grads.tensors[wk]);
                gemm(1.0, a, true, &dv, false, 1.0, &mut grads.tensors[wv]);
                let mut da = matmul(&dq, false, self.t(wq), true);
                gemm(1.0, &dk, false, self.t(wk), true, 1.0, &mut da);
                gemm(1.0, &dv, false, self.t(wv), true, 1.0, &mut da);
                da
            }
            (MixerIdx::BaseConv { w, bias, h }, MixCache::BaseConv { g, c }) => {
                let dg = dy.hadamard(c).expect("same shape");
                let dc = dy.hadamard(g).expect("same shape");
                gemm(1.0, a, true, &dg, false, 1.0, &mut grads.tensors[w]);
                col_sum_into(&dg, &mut grads.tensors[bias]);
                let mut da = conv_backward(&dc, a, self.t(h), &mut grads.tensors[h], n);
                gemm(1.0, &dg, false, self.t(w), true, 1.0, &mut da);
                da
            }
            _ => unreachable!("cache kind follows the layout"),
        }
    }

    fn chunk_forward(&self, chunk: &[MqarInstance]) -> (SeqTensor, ChunkCache, Vec<Token>) {
        let (n, d) = (self.spec.seq_len, self.spec.d_model);
        let r = chunk.len() * n;
        let lay = &self.layout;
        let embed = self.t(lay.embed);
        let mut x = SeqTensor::zeros(r, d);
        for (b, inst) in chunk.iter().enumerate() {
            for (i, &tok) in inst.tokens.iter().enumerate() {
                let row = x.row_mut(b * n + i);
                row.copy_from_slice(embed.row(tok as usize));
                if let Some(p) = lay.pos {
                    for (v, pv) in row.iter_mut().zip(self.t(p).row(i)) {
                        *v += pv;
                    }
                }
            }
        }
        let mut blocks = Vec::with_capacity(lay.blocks.len());
        for bi in &lay.blocks {
            let (a, ln1) = ln_forward(&x, self.t(bi.ln1_g), self.t(bi.ln1_b));
            let (m, mix) = self.mixer_forward(bi.mixer, &a);
            x.add_assign(&m).expect("same shape");
            let (z, ln2) = ln_forward(&x, self.t(bi.ln2_g), self.t(bi.ln2_b));
            let mut pre = matmul(&z, false, self.t(bi.w1), false);
            add_row_bias(&mut pre, self.t(bi.c1));
            let hid = pre.map(|v| v.max(0.0));
            gemm(1.0, &hid, false, self.t(bi.w2), false, 1.0, &mut x);
            add_row_bias(&mut x, self.t(bi.c2));
            blocks.push(BlockCache { ln1, a, mix, ln2, z, pre });
        }
        let (fo, lnf) = ln_forward(&x, self.t(lay.lnf_g), self.t(lay.lnf_b));
        let mut label_rows = Vec::new();
        let mut targets = Vec::new();
        for (b, inst) in chunk.iter().enumerate() {
            for l in &inst.labels {
                label_rows.push(b * n + l.pos);
                targets.push(l.target);
            }
        }
        let mut sel = SeqTensor::zeros(label_rows.len(), d);
        for (j, &r) in label_rows.iter().enumerate() {
            sel.row_mut(j).copy_from_slice(fo.row(r));
        }
        let logits = matmul(&sel, false, self.t(lay.head), true);
        (logits, ChunkCache { blocks, lnf, sel, label_rows }, targets)
    }

    fn chunk_backward(&self, chunk: &[MqarInstance], cache: &ChunkCache, dlogits: &SeqTensor) -> Params {
        let (n, d) = (self.spec.seq_len, self.spec.d_model);
        let r = chunk.len() * n;
        let lay = &self.layout;
        let mut grads = self.params.zeros_like();
        gemm(1.0, dlogits, true, &cache.sel, false, 1.0, &mut grads.tensors[lay.head]);
        let dsel = matmul(dlogits, false, self.t(lay.head), false);
        let mut dfo = SeqTensor::zeros(r, d);
        for (j, &row) in cache.label_rows.iter().enumerate() {
            for (o, v) in dfo.row_mut(row).iter_mut().zip(dsel.row(j)) {
                *o += v;
            }
        }
        let (mut dg, mut db) = (SeqTensor::zeros(1, d), SeqTensor::zeros(1, d));
        let mut dx = ln_backward(&dfo, &cache.lnf, self.t(lay.lnf_g), &mut dg, &mut db);
        grads.tensors[lay.lnf_g] = dg;
        grads.tensors[lay.lnf_b] = db;
        for (bi, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            let hid = bc.pre.map(|v| v.max(0.0));
            gemm(1.0, &hid, true, &dx, false, 1.0, &mut grads.tensors[bi.w2]);
            col_sum_into(&dx, &mut grads.tensors[bi.c2]);
            let mut dpre = matmul(&dx, false, self.t(bi.w2), true);
            for (g, p) in dpre.data_mut().iter_mut().zip(bc.pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            gemm(1.0, &bc.z, true, &dpre, false, 1.0, &mut grads.tensors[bi.w1]);
            col_sum_into(&dpre, &mut grads.tensors[bi.c1]);
            let dz = matmul(&dpre, false, self.t(bi.w1), true);
            let (mut dg, mut db) = (SeqTensor::zeros(1, d), SeqTensor::zeros(1, d));
            dx.add_assign(&ln_backward(&dz, &bc.ln2, self.t(bi.ln2_g), &mut dg, &mut db)).expect("same shape");
            grads.tensors[bi.ln2_g] = dg;
            grads.tensors[bi.ln2_b] = db;
            let da = self.mixer_backward(bi.mixer, &bc.a, &bc.mix, &dx, &mut grads);
            let (mut dg, mut db) = (SeqTensor::zeros(1, d), SeqTensor::zeros(1, d));
            dx.add_assign(&ln_backward(&da, &bc.ln1, self.t(bi.ln1_g), &mut dg, &mut db)).expect("same shape");
            grads.tensors[bi.ln1_g] = dg;
            grads.tensors[bi.ln1_b] = db;
        }
        for (b, inst) in chunk.iter().enumerate() {
            for (i, &tok) in inst.tokens.iter().enumerate() {
                let g = dx.row(b * n + i);
                for (o, v) in grads.tensors[lay.embed].row_mut(tok as usize).iter_mut().zip(g) {
                    *o += v;
                }
                if let Some(p) = lay.pos {
                    for (o, v) in grads.tensors[p].row_mut(i).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
        grads
    }
}

/// Sum of `-log softmax(row)[target]`, its logit gradient scaled by `scale`,
/// and the argmax hit count.
fn cross_entropy(logits: &SeqTensor, targets: &[Token], scale: f64) -> (f64, SeqTensor, usize) {
    let mut total = 0.0;
    let mut correct = 0;
    let mut grad = SeqTensor::zeros(logits.rows(), logits.cols());
    for (j, &t) in targets.iter().enumerate() {
        let row = logits.row(j);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize];
        if crate::numerics::argmax(row) == t as usize {
            correct += 1;
        }
        let g = grad.row_mut(j);
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = scale * (v - lse).exp();
        }
        g[t as usize] -= scale;
    }
    (total, grad, correct)
}

struct ChunkResult {
    loss_sum: f64,
    logits: SeqTensor,
    targets: Vec<Token>,
    correct: usize,
    grads: Option<Params>,
}

fn run_chunks(model: &Model, batch: &[MqarInstance], want_grad: bool) -> Result<(LossOutput, Option<Params>)> {
    let labels = check_batch(&model.spec, batch)?;
    if labels == 0 {
        return Err(Error::invalid("batch has no labels"));
    }
    let scale = 1.0 / labels as f64;
    let results: Vec<ChunkResult> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let (logits, cache, targets) = model.chunk_forward(chunk);
            let (loss_sum, dlogits, correct) = cross_entropy(&logits, &targets, scale);
            let grads = want_grad.then(|| model.chunk_backward(chunk, &cache, &dlogits));
            ChunkResult { loss_sum, logits, targets, correct, grads }
        })
        .collect();
    Ok(merge(model, results, labels))
}

fn merge(model: &Model, results: Vec<ChunkResult>, labels: usize) -> (LossOutput, Option<Params>) {
    let v = model.spec.vocab;
    let mut logits = Vec::with_capacity(labels * v);
    let mut targets = Vec::with_capacity(labels);
    let (mut loss, mut correct) = (0.0, 0);
    let mut grads: Option<Params> = None;
    for r in results {
        loss += r.loss_sum;
        correct += r.correct;
        logits.extend_from_slice(r.logits.data());
        targets.extend(r.targets);
        if let Some(g) = r.grads {
            match &mut grads {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
    }
    let logits = SeqTensor::from_vec(targets.len(), v, logits).expect("label rows");
    (LossOutput { loss: loss / labels as f64, logits, targets, correct }, grads)
}

/// Mean label cross-entropy and per-label logits.
pub fn forward_loss(model: &Model, batch: &[MqarInstance]) -> Result<LossOutput> {
    Ok(run_chunks(model, batch, false)?.0)
}

/// Loss and the gradient of the mean loss for every parameter.
pub fn backward(model: &Model, batch: &[MqarInstance]) -> Result<(LossOutput, Params)> {
    let (out, grads) = run_chunks(model, batch, true)?;
    Ok((out, grads.expect("gradients requested")))
}

/// Parameter gradient of `Σ dlogits ⊙ logits` for a given label-logit gradient
/// (rows in batch label order).
pub fn backward_from_logit_grad(model: &Model, batch: &[MqarInstance], dlogits: &SeqTensor) -> Result<Params> {
    let labels = check_batch(&model.spec, batch)?;
    if dlogits.shape() != (labels, model.spec.vocab) {
        return Err(Error::shape(format!("logit gradient {:?} for {labels} labels", dlogits.shape())));
    }
    let mut offsets = Vec::new();
    let mut at = 0;
    for chunk in batch.chunks(CHUNK) {
        offsets.push(at);
        at += chunk.iter().map(|i| i.labels.len()).sum::<usize>();
    }
    let parts: Vec<Params> = batch
        .par_chunks(CHUNK)
        .zip(offsets.par_iter())
        .map(|(chunk, &off)| {
            let (_, cache, targets) = model.chunk_forward(chunk);
            let g = dlogits.slice_rows(off, off + targets.len());
            model.chunk_backward(chunk, &cache, &g)
        })
        .collect();
    let mut total = model.params.zeros_like();
    for p in &parts {
        total.add_assign(p);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Central differences against [`backward`] on `samples` random parameter
/// entries (all entries when `samples` is `None`). Relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn fd_gradcheck(model: &Model, batch: &[MqarInstance], eps: f64, samples: Option<usize>, seed: u64) -> Result<GradCheck> {
    let (_, grads) = backward(model, batch)?;
    let mut entries: Vec<(usize, usize)> =
        model.params.tensors.iter().enumerate().flat_map(|(p, t)| (0..t.data().len()).map(move |i| (p, i))).collect();
    if let Some(k) = samples {
        if k < entries.len() {
            let mut rng = rng_from(seed);
            let picked = rand::seq::index::sample(&mut rng, entries.len(), k);
            let mut idx: Vec<usize> = picked.into_iter().collect();
            idx.sort_unstable();
            entries = idx.into_iter().map(|i| entries[i]).collect();
        }
    }
    let mut worst = GradCheck { max_rel_error: 0.0, worst: (String::new(), 0), checked: entries.len() };
    let mut probe = model.clone();
    for (p, i) in entries {
        let orig = probe.params.tensors[p].data()[i];
        probe.params.tensors[p].data_mut()[i] = orig + eps;
        let up = forward_loss(&probe, batch)?.loss;
        probe.params.tensors[p].data_mut()[i] = orig - eps;
        let down = forward_loss(&probe, batch)?.loss;
        probe.params.tensors[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.tensors[p].data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.max_rel_error || rel.is_nan() {
            worst.max_rel_error = rel;
            worst.worst = (model.params.names[p].clone(), i);
        }
    }
    Ok(worst)
}

/// Small random parameter perturbation, used to move gradient checks off
/// symmetric initial points (zero biases, unit gains).
pub fn jitter(model: &mut Model, std: f64, seed: u64) {
    let mut rng = rng_from(seed);
    for t in &mut model.params.tensors {
        for v in t.data_mut() {
            *v += std * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}
