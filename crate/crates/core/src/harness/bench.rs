//! Forward+backward timing of the bench stack in Eval, Tune and Deploy,
//! with saved-tensor bytes from the memory model.
//!
//! Each cell warms up every mode, then runs interleaved rounds (the mode
//! order rotates per round) and reports per-mode medians. Iterations
//! shorter than [`MIN_SAMPLE`] are repeated inside one sample.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{Criterion, ExperimentReport};
use crate::block::Mode;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{self, BnMode, ExecOptions, Graph};
use crate::memory::{count_saved, prepare};
use crate::rng::Rng;
use crate::tensor::{DType, Shape, Tensor};

pub const MODES: [Mode; 3] = [Mode::Eval, Mode::Tune, Mode::Deploy];
pub const MIN_SAMPLE: Duration = Duration::from_millis(1);
pub const MIN_ROUNDS: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct BenchOptions {
    pub seed: u64,
    pub dtype: DType,
    pub batches: Vec<usize>,
    pub sizes: Vec<usize>,
    pub warmup: usize,
    pub rounds: usize,
    /// Passes over the modes inside one round.
    pub inner: usize,
}

impl Default for BenchOptions {
    fn default() -> BenchOptions {
        BenchOptions {
            seed: 0,
            dtype: DType::F32,
            batches: vec![16, 32, 64],
            sizes: vec![32, 48, 64],
            warmup: 2,
            rounds: 7,
            inner: 3,
        }
    }
}

/// One graph prepared for one mode, plus its input and output gradient.
pub struct Runner {
    pub mode: Mode,
    graph: Graph,
    x: Tensor,
    dy: Tensor,
}

impl Runner {
    pub fn new(base: &Graph, mode: Mode, x: &Tensor, dy: &Tensor) -> Result<Runner> {
        Ok(Runner { mode, graph: prepare(base, mode)?, x: x.clone(), dy: dy.clone() })
    }

    /// One forward and backward pass.
    pub fn iterate(&self) -> Result<()> {
        let fp = graph::forward(&self.graph, &self.x, &ExecOptions { bn_mode: BnMode::for_mode(self.mode) })?;
        let g = graph::backward(&self.graph, &fp, &self.dy)?;
        std::hint::black_box(g);
        Ok(())
    }

    /// Seconds per iteration averaged over `repeats` back-to-back runs.
    pub fn sample(&self, repeats: usize) -> Result<f64> {
        let t = Instant::now();
        for _ in 0..repeats {
            self.iterate()?;
        }
        Ok(t.elapsed().as_secs_f64() / repeats as f64)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeTiming {
    pub mode: Mode,
    pub median_s: f64,
    pub samples_s: Vec<f64>,
}

/// Interleaved timing of `runners`. Each round runs `inner` passes over the
/// modes (rotating the starting mode) and records, per mode, the mean time
/// of its iterations in that round; the reported figure is the median over
/// rounds. Returns timings in runner order and the repeat count used.
pub fn time_interleaved(runners: &[Runner], warmup: usize, rounds: usize, inner: usize) -> Result<(Vec<ModeTiming>, usize)> {
    let rounds = rounds.max(MIN_ROUNDS);
    let inner = inner.max(1);
    for r in runners {
        for _ in 0..warmup {
            r.sample(1)?;
        }
    }
    let mut fastest = f64::INFINITY;
    for r in runners {
        fastest = fastest.min(r.sample(1)?);
    }
    let repeats = if fastest < MIN_SAMPLE.as_secs_f64() {
        (MIN_SAMPLE.as_secs_f64() / fastest.max(1e-9)).ceil() as usize
    } else {
        1
    };
    let n = runners.len();
    let mut samples = vec![Vec::with_capacity(rounds); n];
    for round in 0..rounds {
        let mut acc = vec![0.0; n];
        for pass in 0..inner {
            for k in 0..n {
                let i = (round + pass + k) % n;
                acc[i] += runners[i].sample(repeats)?;
            }
        }
        for (s, a) in samples.iter_mut().zip(acc) {
            s.push(a / inner as f64);
        }
    }
    let timings = runners
        .iter()
        .zip(samples)
        .map(|(r, s)| ModeTiming { mode: r.mode, median_s: median(&s), samples_s: s })
        .collect();
    Ok((timings, repeats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub batch: usize,
    pub size: usize,
    /// Saved-for-backward bytes per mode, in [`MODES`] order.
    pub saved_bytes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellTiming {
    pub batch: usize,
    pub size: usize,
    pub repeats: usize,
    pub modes: Vec<ModeTiming>,
    pub ordered: bool,
    /// `1 - tune / eval`, informational.
    pub tune_saving: f64,
}

impl CellTiming {
    pub fn median(&self, mode: Mode) -> f64 {
        self.modes.iter().find(|m| m.mode == mode).map_or(f64::NAN, |m| m.median_s)
    }
}

fn cell_inputs(g: &Graph, seed: u64, dtype: DType, batch: usize, size: usize) -> Result<(Tensor, Tensor)> {
    let mut rng = Rng::derive(seed, (batch * 1000 + size) as u64);
    let x = rng.normal_tensor(dtype, [batch, 3, size, size], 1.0);
    let out = g.infer_shapes(x.shape(), &g.params)?;
    let y = out[g.index_of(&g.output_node().id).expect("output exists")].clone();
    Ok((x, rng.normal_tensor(dtype, y, 1.0)))
}

/// Times `g` in every mode at one input size.
pub fn time_cell(g: &Graph, seed: u64, dtype: DType, batch: usize, size: usize, opts: &BenchOptions) -> Result<CellTiming> {
    let (x, dy) = cell_inputs(g, seed, dtype, batch, size)?;
    let runners = MODES.iter().map(|&m| Runner::new(g, m, &x, &dy)).collect::<Result<Vec<_>>>()?;
    let (modes, repeats) = time_interleaved(&runners, opts.warmup, opts.rounds, opts.inner)?;
    let mut cell = CellTiming { batch, size, repeats, modes, ordered: false, tune_saving: 0.0 };
    let (e, t, d) = (cell.median(Mode::Eval), cell.median(Mode::Tune), cell.median(Mode::Deploy));
    cell.ordered = d <= t && t <= e;
    cell.tune_saving = 1.0 - t / e;
    Ok(cell)
}

pub fn memory_cell(g: &Graph, dtype: DType, batch: usize, size: usize) -> Result<Cell> {
    let shape = Shape::from([batch, 3, size, size]);
    let saved_bytes = MODES
        .iter()
        .map(|&m| count_saved(g, m, &shape, dtype).map(|f| f.total_bytes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cell { batch, size, saved_bytes })
}

pub fn to_table(cells: &[Cell], timings: &[CellTiming]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "batch", "size", "eval_s", "tune_s", "deploy_s", "eval_mb", "tune_mb", "deploy_mb"
    );
    for (c, t) in cells.iter().zip(timings) {
        let mb = |b: usize| b as f64 / (1024.0 * 1024.0);
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.3} {:>12.3} {:>12.3}",
            c.batch,
            c.size,
            t.median(Mode::Eval),
            t.median(Mode::Tune),
            t.median(Mode::Deploy),
            mb(c.saved_bytes[0]),
            mb(c.saved_bytes[1]),
            mb(c.saved_bytes[2])
        );
    }
    s
}

pub fn to_csv(cells: &[Cell], timings: &[CellTiming]) -> String {
    let mut s = String::from("batch,size,eval_s,tune_s,deploy_s,eval_bytes,tune_bytes,deploy_bytes\n");
    for (c, t) in cells.iter().zip(timings) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.batch,
            c.size,
            t.median(Mode::Eval),
            t.median(Mode::Tune),
            t.median(Mode::Deploy),
            c.saved_bytes[0],
            c.saved_bytes[1],
            c.saved_bytes[2]
        );
    }
    s
}

pub struct BenchResult {
    pub report: ExperimentReport,
    pub cells: Vec<Cell>,
    pub timings: Vec<CellTiming>,
}

/// The grid on the bundled bench stack.
pub fn run(opts: &BenchOptions) -> Result<BenchResult> {
    run_on(&fixtures::bench_stack(opts.seed, opts.dtype)?, opts)
}

/// The grid on any graph taking `[N, 3, H, W]` inputs.
pub fn run_on(g: &Graph, opts: &BenchOptions) -> Result<BenchResult> {
    if opts.batches.is_empty() || opts.sizes.is_empty() {
        return Err(Error::Input("empty bench grid".into()));
    }
    let mut report = ExperimentReport::new("bench", serde_json::to_value(opts).expect("plain data"));
    let mut cells = Vec::new();
    let mut timings = Vec::new();
    for &b in &opts.batches {
        for &s in &opts.sizes {
            cells.push(memory_cell(g, opts.dtype, b, s)?);
            timings.push(time_cell(g, opts.seed, opts.dtype, b, s, opts)?);
        }
    }
    let ordered = timings.iter().filter(|t| t.ordered).count();
    report.criteria.push(
        Criterion::at_least("cells_with_deploy_le_tune_le_eval", ordered as f64, timings.len() as f64)
            .with_detail(format!("{ordered} of {} cells ordered", timings.len()))
            .timing(),
    );

    // Overhead-dominated case: one small block.
    let tiny = fixtures::single_block(opts.seed, opts.dtype, 3, 4, 3, false)?;
    let t = time_cell(&tiny, opts.seed, opts.dtype, 1, 8, opts)?;
    let medians: Vec<f64> = t.modes.iter().map(|m| m.median_s).collect();
    let spread = medians.iter().cloned().fold(0.0, f64::max) / medians.iter().cloned().fold(f64::INFINITY, f64::min);
    report.criteria.push(Criterion::at_most("tiny_block_mode_spread", spread, 2.0).timing());

    report.metric("memory", &cells);
    report.nondeterministic = serde_json::json!({ "cells": timings, "tiny_block": t });
    Ok(BenchResult { report, cells, timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn memory_columns_match_count_saved() {
        let g = fixtures::bench_stack(0, DType::F32).unwrap();
        let c = memory_cell(&g, DType::F32, 16, 32).unwrap();
        for (i, m) in MODES.iter().enumerate() {
            let direct = count_saved(&g, *m, &Shape::from([16, 3, 32, 32]), DType::F32).unwrap();
            assert_eq!(c.saved_bytes[i], direct.total_bytes);
        }
        assert!(c.saved_bytes[2] <= c.saved_bytes[1] && c.saved_bytes[1] <= c.saved_bytes[0]);
    }

    #[test]
    fn tiny_runs_repeat_and_report_every_mode() {
        let g = fixtures::single_block(0, DType::F32, 3, 2, 1, false).unwrap();
        let opts = BenchOptions { warmup: 1, rounds: 5, inner: 2, ..Default::default() };
        let t = time_cell(&g, 0, DType::F32, 1, 4, &opts).unwrap();
        assert!(t.repeats > 1);
        assert_eq!(t.modes.len(), 3);
        assert!(t.modes.iter().all(|m| m.samples_s.len() == 5));
    }
}
