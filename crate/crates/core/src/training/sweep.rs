//! Capacity sweep: for each (variant, length, width) cell, train over a
//! learning-rate grid and keep the best test accuracy.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_dataset, GenConfig, MqarInstance};
use crate::error::{Error, Result};
use crate::rng::sub_seed;
use crate::training::model::{Model, ModelSpec, Variant};
use crate::training::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepCell {
    pub variant: Variant,
    pub seq_len: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub cells: Vec<SweepCell>,
    pub train: TrainConfig,
    pub vocab: usize,
    pub alpha: f64,
    /// Key-value pairs per instance; `None` picks `max(4, N / 16)`.
    pub pairs: Option<usize>,
    /// Record wall-clock seconds. Off makes the CSV byte-reproducible.
    pub timing: bool,
}

impl SweepConfig {
    /// The cross product of variants, lengths and widths; repeats are dropped.
    pub fn grid(variants: &[Variant], lens: &[usize], widths: &[usize], train: TrainConfig) -> Self {
        let mut cells = Vec::new();
        for &variant in variants {
            for &seq_len in lens {
                for &d_model in widths {
                    let cell = SweepCell { variant, seq_len, d_model };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
        SweepConfig { cells, train, vocab: 256, alpha: 0.1, pairs: None, timing: false }
    }

    pub fn pairs_for(&self, n: usize) -> usize {
        self.pairs.unwrap_or((n / 16).max(4))
    }
}

/// One CSV row. `lr` is a number, or `max` for the per-cell summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub seq_len: usize,
    pub d_model: usize,
    pub lr: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_test_acc: f64,
    pub final_train_loss: f64,
    pub wall_seconds: f64,
}

impl SweepRow {
    pub fn is_max(&self) -> bool {
        self.lr == "max"
    }

    fn cell_key(&self) -> (String, usize, usize) {
        (self.variant.clone(), self.seq_len, self.d_model)
    }
}

/// Train and test sets for a cell length; the two never share an instance index.
pub fn cell_data(cfg: &SweepConfig, n: usize) -> Result<(Vec<MqarInstance>, Vec<MqarInstance>)> {
    let mut g = GenConfig::new(n, cfg.pairs_for(n), cfg.alpha, cfg.vocab, sub_seed(cfg.train.seed, "datagen"));
    g.num_examples = cfg.train.train_size + cfg.train.test_size;
    let mut all = gen_dataset(&g)?;
    let test = all.split_off(cfg.train.train_size);
    Ok((all, test))
}

/// Trains one cell over the learning-rate grid: one row per rate plus a max row.
pub fn run_cell(cell: SweepCell, cfg: &SweepConfig) -> Vec<SweepRow> {
    let t = &cfg.train;
    let row = |lr: String, acc: f64, loss: f64, wall: f64| SweepRow {
        variant: cell.variant.to_string(),
        seq_len: cell.seq_len,
        d_model: cell.d_model,
        lr,
        seed: t.seed,
        epochs: t.epochs,
        best_test_acc: acc,
        final_train_loss: loss,
        wall_seconds: if cfg.timing { wall } else { 0.0 },
    };
    let data = cell_data(cfg, cell.seq_len);
    let spec = ModelSpec::new(cell.variant, cell.seq_len, cell.d_model, cfg.vocab);
    let mut rows = Vec::with_capacity(t.lrs.len() + 1);
    for &lr in &t.lrs {
        let start = Instant::now();
        let result = match &data {
            Ok((tr, te)) => Model::init(spec.clone(), sub_seed(t.seed, "init")).and_then(|m| train(m, tr, te, t, lr)),
            Err(_) => Err(Error::invalid("cell data could not be generated")),
        };
        let wall = start.elapsed().as_secs_f64();
        rows.push(match result {
            Ok(out) if !out.diverged => row(format!("{lr:e}"), out.best_test_acc(), out.final_train_loss(), wall),
            _ => row(format!("{lr:e}"), f64::NAN, f64::NAN, wall),
        });
    }
    let best = rows.iter().filter(|r| !r.best_test_acc.is_nan()).max_by(|a, b| a.best_test_acc.total_cmp(&b.best_test_acc));
    let wall: f64 = rows.iter().map(|r| r.wall_seconds).sum();
    let summary = match best {
        Some(b) => row("max".into(), b.best_test_acc, b.final_train_loss, wall),
        None => row("max".into(), f64::NAN, f64::NAN, wall),
    };
    rows.push(summary);
    rows
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("sweep csv: {e}"))
}

/// Runs every cell not already summarized in `out` (when given), rewriting
/// `out` after each group of cells. Rows of unfinished cells found in `out`
/// are dropped and their cells rerun. Returns all rows in file order.
pub fn capacity_sweep(cfg: &SweepConfig, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.train.validate()?;
    if cfg.cells.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut rows = match out {
        Some(p) if p.exists() => read_rows(p)?,
        _ => Vec::new(),
    };
    let done: HashSet<_> = rows.iter().filter(|r| r.is_max()).map(SweepRow::cell_key).collect();
    rows.retain(|r| done.contains(&r.cell_key()));
    let todo: Vec<SweepCell> = cfg
        .cells
        .iter()
        .copied()
        .filter(|c| !done.contains(&(c.variant.to_string(), c.seq_len, c.d_model)))
        .collect();
    let group = rayon::current_num_threads().max(1);
    for cells in todo.chunks(group) {
        let results: Vec<Vec<SweepRow>> = cells.par_iter().map(|&c| run_cell(c, cfg)).collect();
        rows.extend(results.into_iter().flatten());
        if let Some(p) = out {
            write_rows(p, &rows)?;
        }
    }
    Ok(rows)
}
