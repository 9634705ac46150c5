use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args};
use serde::Serialize;
use serde_json::Value;

use mqar::analysis::stream::{attribution_field, report_fields, write_record, write_slices_csv};
use mqar::analysis::{find_ar_hits_docs, flops, gap_attribution_reports, slice_perplexity, Accounting, Arch, Dims, FreqTable, HitOpts, TokenStream};
use mqar::constructions::{run_suite, Fault, Suite, VerifyOpts};
use mqar::datagen::{gen_filler_eval, gen_mqar, gen_single_query, read_dataset, write_records, GenConfig, Label, MqarInstance, Placement};
use mqar::oracle::{parallel_mqar, sequential_mqar, token_mqar, tokens_to_triples, RecallLabeling};
use mqar::rng::{instance_seed, sub_seed};
use mqar::training::{capacity_sweep, lr_grid, SweepConfig, TrainConfig, Variant};
use mqar::Token;

use crate::config::{manifest, write_manifest};
use crate::{Cli, Cmd};

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    /// Sequence length.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Key-value pairs per sequence.
    #[arg(long, default_value_t = 4)]
    pub d_pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 8192)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// gap-relative or absolute.
    #[arg(long, default_value = "gap-relative")]
    pub placement: String,
    /// mqar, single-query or filler.
    #[arg(long, default_value = "mqar")]
    pub kind: String,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OracleArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// sequential, parallel, token or both (sequential and parallel).
    #[arg(long, default_value = "both")]
    pub algo: String,
    /// Write the dataset relabelled by the first selected oracle.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct VerifyArgs {
    /// all, primitives, attention, autocorr or hyena-sim.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Distance budget for the autocorrelation rows.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    /// Corrupt every construction (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "attention,baseconv")]
    pub variants: Vec<String>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "32,64,128")]
    pub lens: Vec<usize>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "16,32,64,128")]
    pub widths: Vec<usize>,
    /// Learning rates (default: four log-spaced from 1e-4 to 1e-2).
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub lrs: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1_000)]
    pub test_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Pairs per instance (default max(4, N/16)).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Record wall-clock time per run.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SliceArgs {
    /// Token stream: one document per line, or generated records.
    #[arg(long)]
    pub stream: PathBuf,
    /// Log-probs of the model under study, aligned with the stream.
    #[arg(long)]
    pub logprobs_m: PathBuf,
    /// Log-probs of the reference model.
    #[arg(long)]
    pub logprobs_ref: PathBuf,
    /// Training n-gram counts: ids then count per line.
    #[arg(long)]
    pub freq: Option<PathBuf>,
    #[arg(long, default_value_t = 1250)]
    pub threshold: u64,
    #[arg(long, default_value_t = 2)]
    pub ngram: usize,
    /// Ids whose n-grams never count as hits.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub exclude: Vec<Token>,
    /// Writes PREFIX.txt and PREFIX.csv (record to stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FlopsArgs {
    /// attention, hyena, longconv, baseconv or rwkv.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 768)]
    pub width: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 50_257)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub order: usize,
    #[arg(long)]
    pub window: Option<usize>,
    /// reported or literal.
    #[arg(long, default_value = "reported")]
    pub accounting: String,
}

fn emit_manifest(cli: &Cli, name: &str, globals: Value, args: &impl Serialize, output: Option<&Path>) -> Result<()> {
    let text = manifest(name, &[globals, serde_json::to_value(args)?]);
    let path = cli.manifest.clone().or_else(|| output.map(|o| PathBuf::from(format!("{}.manifest", o.display()))));
    match path {
        Some(p) => write_manifest(&p, &text),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

/// Runs the parsed command. `Ok(false)` means a check failed.
pub fn run(cli: &Cli, globals: Value) -> Result<bool> {
    match &cli.command {
        Cmd::Gen(a) => {
            emit_manifest(cli, "gen", globals, a, a.out.as_deref())?;
            gen(cli.seed, a)
        }
        Cmd::Oracle(a) => {
            emit_manifest(cli, "oracle", globals, a, a.out.as_deref())?;
            oracle(a)
        }
        Cmd::VerifyConstructions(a) => {
            emit_manifest(cli, "verify-constructions", globals, a, None)?;
            verify(cli.seed, a)
        }
        Cmd::Sweep(a) => {
            emit_manifest(cli, "sweep", globals, a, Some(&a.out))?;
            sweep(cli.seed, a)
        }
        Cmd::Slice(a) => {
            emit_manifest(cli, "slice", globals, a, a.out.as_deref())?;
            slice(a)
        }
        Cmd::Flops(a) => {
            emit_manifest(cli, "flops", globals, a, None)?;
            flops_cmd(a)
        }
    }
}

fn write_out(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
        }
    }
    Ok(())
}

fn gen(seed: u64, a: &GenArgs) -> Result<bool> {
    let placement: Placement = a.placement.parse()?;
    let mut cfg = GenConfig::new(a.n, a.d_pairs, a.alpha, a.vocab, sub_seed(seed, "datagen"));
    cfg.placement = placement;
    cfg.num_examples = a.count;
    use rayon::prelude::*;
    let data: Vec<MqarInstance> = match a.kind.as_str() {
        "mqar" => {
            cfg.validate()?;
            (0..a.count as u64).into_par_iter().map(|i| gen_mqar(&cfg, i)).collect::<mqar::Result<_>>()?
        }
        "single-query" => {
            cfg.validate()?;
            (0..a.count as u64).into_par_iter().map(|i| gen_single_query(&cfg, i)).collect::<mqar::Result<_>>()?
        }
        "filler" => (0..a.count as u64)
            .into_par_iter()
            .map(|i| gen_filler_eval(a.d_pairs, a.n, a.vocab, instance_seed(cfg.seed, i)))
            .collect::<mqar::Result<_>>()?,
        other => bail!("unknown kind `{other}`"),
    };
    write_out(a.out.as_deref(), |w| {
        let mut w = w;
        Ok(write_records(&data, &mut w)?)
    })?;
    Ok(true)
}

/// Labels at key-range positions that recall a value.
fn labels_from(inst: &MqarInstance, rec: &RecallLabeling) -> Vec<Label> {
    let half = (inst.meta.vocab / 2) as Token;
    rec.iter()
        .enumerate()
        .filter(|(p, _)| inst.tokens[*p] < half)
        .filter_map(|(pos, r)| r.map(|r| Label { pos, target: r.value }))
        .collect()
}

fn oracle(a: &OracleArgs) -> Result<bool> {
    let data = read_dataset(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let algos: Vec<&str> = match a.algo.as_str() {
        "both" => vec!["sequential", "parallel"],
        s @ ("sequential" | "parallel" | "token") => vec![s],
        other => bail!("unknown oracle `{other}`"),
    };
    let mut ok = true;
    let mut relabelled = Vec::with_capacity(data.len());
    let (mut label_mismatch, mut algo_mismatch) = (0usize, 0usize);
    for inst in &data {
        let runs: Vec<Vec<Label>> = algos
            .iter()
            .map(|algo| {
                let rec = match *algo {
                    "sequential" => sequential_mqar(&tokens_to_triples(&inst.tokens)),
                    "parallel" => parallel_mqar(&tokens_to_triples(&inst.tokens)),
                    _ => token_mqar(&inst.tokens),
                };
                labels_from(inst, &rec)
            })
            .collect();
        if runs.windows(2).any(|w| w[0] != w[1]) {
            algo_mismatch += 1;
        }
        let mut stored = inst.labels.clone();
        stored.sort_by_key(|l| l.pos);
        if runs[0] != stored {
            label_mismatch += 1;
        }
        let mut out = inst.clone();
        out.labels = runs[0].clone();
        relabelled.push(out);
    }
    println!("instances={}", data.len());
    println!("algorithms={}", algos.join(","));
    println!("label_mismatches={label_mismatch}");
    println!("algorithm_disagreements={algo_mismatch}");
    if label_mismatch + algo_mismatch > 0 {
        ok = false;
    }
    if let Some(p) = &a.out {
        write_out(Some(p), |w| {
            let mut w = w;
            Ok(write_records(&relabelled, &mut w)?)
        })?;
    }
    Ok(ok)
}

fn verify(seed: u64, a: &VerifyArgs) -> Result<bool> {
    let suite: Suite = a.suite.parse()?;
    let opts = VerifyOpts { suite, seed, cases: a.cases, t: a.t, fault: a.inject_fault.then_some(Fault::CorruptTap) };
    let rows = run_suite(&opts)?;
    println!("{:<28} {:>7} {:>9} {:>12}  status", "construction", "cases", "failures", "max_error");
    let mut ok = true;
    for r in &rows {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<28} {:>7} {:>9} {:>12.3e}  {status}", r.name, r.cases, r.failures, r.max_error);
    }
    Ok(ok)
}

fn sweep(seed: u64, a: &SweepArgs) -> Result<bool> {
    let variants = a.variants.iter().map(|v| v.parse::<Variant>()).collect::<mqar::Result<Vec<_>>>()?;
    let train = TrainConfig {
        lrs: if a.lrs.is_empty() { lr_grid(1e-4, 1e-2, 4) } else { a.lrs.clone() },
        epochs: a.epochs,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        warmup: a.warmup,
        seed,
        train_size: a.train_size,
        test_size: a.test_size,
        ..TrainConfig::default()
    };
    let mut cfg = SweepConfig::grid(&variants, &a.lens, &a.widths, train);
    cfg.vocab = a.vocab;
    cfg.alpha = a.alpha;
    cfg.pairs = a.pairs;
    cfg.timing = a.timing;
    let rows = capacity_sweep(&cfg, Some(&a.out))?;
    let failed = rows.iter().filter(|r| r.is_max() && r.best_test_acc.is_nan()).count();
    for r in rows.iter().filter(|r| r.is_max()) {
        println!("{} N={} d={} best_test_acc={}", r.variant, r.seq_len, r.d_model, r.best_test_acc);
    }
    if failed > 0 {
        eprintln!("{failed} cell(s) failed at every learning rate");
    }
    Ok(failed == 0)
}

fn slice(a: &SliceArgs) -> Result<bool> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let mut stream = TokenStream::parse(&read(&a.stream)?)?;
    stream.attach_logprobs("m", &read(&a.logprobs_m)?)?;
    stream.attach_logprobs("ref", &read(&a.logprobs_ref)?)?;
    let freq = match &a.freq {
        Some(p) => FreqTable::parse(&read(p)?)?,
        None => FreqTable::new(),
    };
    let opts = HitOpts { n: a.ngram, threshold: a.threshold, exclude: a.exclude.iter().copied().collect() };
    let hits = find_ar_hits_docs(&stream.docs, &freq, &opts);
    let m = slice_perplexity(stream.logprobs("m")?, &hits)?;
    let big = slice_perplexity(stream.logprobs("ref")?, &hits)?;
    let mut fields = report_fields("m", &m);
    fields.extend(report_fields("ref", &big));
    let attribution = gap_attribution_reports(&m, &big);
    fields.push(match &attribution {
        Ok(at) => attribution_field(at),
        Err(_) => ("attribution".into(), "undefined (empty slice)".into()),
    });
    match &a.out {
        Some(prefix) => {
            let txt = PathBuf::from(format!("{}.txt", prefix.display()));
            let csv = PathBuf::from(format!("{}.csv", prefix.display()));
            write_out(Some(&txt), |w| {
                let mut w = w;
                Ok(write_record(&fields, &mut w)?)
            })?;
            write_slices_csv(&[("m".into(), m), ("ref".into(), big)], std::fs::File::create(&csv)?)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_record(&fields, &mut stdout.lock())?;
        }
    }
    Ok(true)
}

fn flops_cmd(a: &FlopsArgs) -> Result<bool> {
    let arch: Arch = a.arch.parse()?;
    let acc = match a.accounting.as_str() {
        "reported" => Accounting::Reported,
        "literal" => Accounting::Literal,
        other => bail!("unknown accounting `{other}`"),
    };
    let dims = Dims {
        b: a.batch,
        n: a.seq_len,
        d: a.width,
        heads: a.heads,
        layers: a.layers,
        vocab: a.vocab,
        order: a.order,
        window: a.window,
    };
    let f = flops(arch, &dims, acc)?;
    println!("{f:.6e}");
    Ok(true)
}
