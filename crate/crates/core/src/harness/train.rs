//! Desk-scale SGD training of the toy conv-bn network, with per-phase mode
//! switching and paired Eval/Tune comparisons.

use std::path::PathBuf;

use serde::Serialize;

use super::data::{Batches, Dataset};
use super::optim::Sgd;
use super::{Criterion, ExperimentReport};
use crate::block::Mode;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{self, BnMode, ExecOptions, Graph};
use crate::io::TensorMap;
use crate::ops::softmax_xent;
use crate::tensor::{DType, Tensor};

pub const LOSS_GAP_TOL: f64 = 1e-4;
pub const PARAM_REL_TOL: f64 = 1e-6;
/// Allowed jump at a Train to Tune switch, in units of the mean
/// step-to-step loss change over the preceding window.
pub const SWITCH_FACTOR: f64 = 10.0;
pub const SWITCH_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    /// Seeded Gaussian blobs, `[samples, 3, image_size, image_size]`.
    Synthetic {
        samples: usize,
        classes: usize,
        image_size: usize,
        spread: f64,
    },
    /// CBNT file with `images` and `labels`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Modes visited in order. Without `switch_every` the steps are split
    /// into equal contiguous phases; with it the schedule cycles every
    /// `switch_every` steps.
    pub schedule: Vec<Mode>,
    pub switch_every: Option<usize>,
    pub dataset: DatasetSpec,
    /// Parameter names excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            steps: 200,
            seed: 0,
            dtype: DType::F32,
            schedule: vec![Mode::Eval],
            switch_every: None,
            dataset: DatasetSpec::Synthetic { samples: 512, classes: 4, image_size: 8, spread: 1.0 },
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that parameter stability can be checked.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Input(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Input("steps and batch size must be at least 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Input("empty mode schedule".into()));
        }
        if self.schedule.len() > 1 && self.schedule.contains(&Mode::Deploy) {
            // Leaving Deploy restores the pre-fusion snapshot, which would
            // silently discard everything learned in the Deploy phase.
            return Err(Error::Input("deploy cannot be combined with other modes in one schedule".into()));
        }
        if self.switch_every == Some(0) {
            return Err(Error::Input("switch cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mode_at(&self, step: usize) -> Mode {
        let n = self.schedule.len();
        let phase = match self.switch_every {
            Some(k) => (step / k) % n,
            None => (step * n / self.steps).min(n - 1),
        };
        self.schedule[phase]
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Synthetic { samples, classes, image_size, spread } => {
                Dataset::blobs(self.seed, *samples, *classes, *image_size, *spread, self.dtype)
            }
            DatasetSpec::File { path } => {
                let ds = Dataset::load(path)?;
                Ok(Dataset { images: ds.images.cast(self.dtype), ..ds })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub mode: Mode,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Final graph, still in the last scheduled mode.
    pub graph: Graph,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|s| s.loss).collect()
    }

    /// Parameters in unrewritten form. A Deploy run keeps its fused tensors.
    pub fn final_params(&self) -> Result<TensorMap> {
        let mut g = self.graph.clone();
        if g.is_rewritten() && self.log.last().map(|s| s.mode) != Some(Mode::Deploy) {
            graph::revert(&mut g)?;
        }
        Ok(g.params.clone())
    }
}

fn enter(g: &mut Graph, mode: Mode) -> Result<()> {
    match mode {
        Mode::Train | Mode::Eval => {
            if g.is_rewritten() {
                graph::revert(g)?;
            }
        }
        Mode::Tune | Mode::Deploy => {
            graph::switch_mode(g, mode)?;
        }
    }
    Ok(())
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row = &logits.data()[r * k..][..k];
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// One optimisation step in `mode`; returns the loss and accuracy.
pub fn train_step(g: &mut Graph, sgd: &mut Sgd, mode: Mode, x: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let fp = graph::forward(g, x, &ExecOptions { bn_mode: BnMode::for_mode(mode) })?;
    let (loss, dlogits) = softmax_xent(&fp.output, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let acc = accuracy(&fp.output, labels);
    let grads = graph::backward(g, &fp, &dlogits)?;
    sgd.step(&mut g.params, &grads.params)?;
    if mode == Mode::Train {
        g.apply_running_updates(&fp.running_updates)?;
    }
    Ok((loss, acc))
}

/// Trains `g` on `data` following `cfg`.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut g: Graph) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    for name in &cfg.freeze {
        sgd.freeze(name.clone());
    }
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut current = None;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mode = cfg.mode_at(step);
        if current != Some(mode) {
            enter(&mut g, mode)?;
            current = Some(mode);
        }
        let (x, labels) = data.batch(&batches.next_batch())?;
        let (loss, accuracy) = train_step(&mut g, &mut sgd, mode, &x, &labels).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step} in {mode} mode")),
            other => other,
        })?;
        log.push(StepLog { step, mode, loss, accuracy });
    }
    Ok(TrainOutcome { log, graph: g })
}

/// The toy network sized for `data`, initialised from `cfg.seed`.
pub fn model_for(cfg: &TrainConfig, data: &Dataset) -> Result<Graph> {
    if data.images.dims()[1] != 3 {
        return Err(Error::Input(format!("expected 3-channel images, got {}", data.images.shape())));
    }
    fixtures::toy_chain(cfg.seed, cfg.dtype, data.classes)
}

pub fn train_config(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = cfg.load_dataset()?;
    train(cfg, &data, model_for(cfg, &data)?)
}

/// `max|a - b| / max(max|a|, max|b|)` over every name present in `a`.
pub fn params_rel_diff(a: &TensorMap, b: &TensorMap) -> Result<f64> {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (name, t) in a {
        let u = b.get(name).ok_or_else(|| Error::Ingestion { missing: vec![name.clone()] })?;
        diff = diff.max(t.max_abs_diff(u)?);
        scale = scale.max(t.max_abs()).max(u.max_abs());
    }
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRun {
    pub max_loss_gap: f64,
    pub worst_step: usize,
    pub final_param_rel: f64,
    pub eval_losses: Vec<f64>,
    pub tune_losses: Vec<f64>,
}

/// Runs `cfg` once in Eval and once in Tune with weight decay disabled.
pub fn paired_eval_tune(cfg: &TrainConfig) -> Result<PairedRun> {
    let base = TrainConfig { weight_decay: 0.0, switch_every: None, ..cfg.clone() };
    let eval = train_config(&TrainConfig { schedule: vec![Mode::Eval], ..base.clone() })?;
    let tune = train_config(&TrainConfig { schedule: vec![Mode::Tune], ..base })?;
    let (el, tl) = (eval.losses(), tune.losses());
    let (worst_step, max_loss_gap) = el
        .iter()
        .zip(&tl)
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, 0.0), |(i, m), (j, v)| if v > m || v.is_nan() { (j, v) } else { (i, m) });
    Ok(PairedRun {
        max_loss_gap,
        worst_step,
        final_param_rel: params_rel_diff(&eval.final_params()?, &tune.final_params()?)?,
        eval_losses: el,
        tune_losses: tl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchCheck {
    pub switch_step: usize,
    /// `|loss_switched - loss_unswitched|` at the switch step.
    pub jump: f64,
    /// Mean `|dL|` over the preceding window of the unswitched run.
    pub baseline: f64,
    pub threshold: f64,
}

/// Train then Tune, against a run that never leaves Train. Both runs see
/// the same batches, so the difference at the switch step is due to the
/// mode change alone.
pub fn switch_check(cfg: &TrainConfig) -> Result<SwitchCheck> {
    let switched = TrainConfig { schedule: vec![Mode::Train, Mode::Tune], switch_every: None, ..cfg.clone() };
    let s = switched.steps / 2;
    if s <= SWITCH_WINDOW {
        return Err(Error::Input(format!("need more than {} steps before the switch", SWITCH_WINDOW)));
    }
    let a = train_config(&TrainConfig { schedule: vec![Mode::Train], ..switched.clone() })?.losses();
    let b = train_config(&switched)?.losses();
    let baseline = (s - SWITCH_WINDOW..s).map(|i| (a[i] - a[i - 1]).abs()).sum::<f64>() / SWITCH_WINDOW as f64;
    Ok(SwitchCheck { switch_step: s, jump: (b[s] - a[s]).abs(), baseline, threshold: SWITCH_FACTOR * baseline })
}

/// `train` command: one run of `cfg`, plus the paired Eval/Tune comparison
/// when `compare` is set.
pub fn run(cfg: &TrainConfig, compare: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("train", serde_json::to_value(cfg).expect("plain data"));
    let outcome = train_config(cfg)?;
    report.metric("steps", &outcome.log);
    report.metric("final_loss", outcome.log.last().map(|s| s.loss));
    if compare {
        let p = paired_eval_tune(cfg)?;
        report.criteria.push(
            Criterion::at_most("eval_tune_max_loss_gap", p.max_loss_gap, LOSS_GAP_TOL)
                .with_detail(format!("worst step {}", p.worst_step)),
        );
        let params = Criterion::at_most("eval_tune_final_param_rel", p.final_param_rel, PARAM_REL_TOL);
        report.criteria.push(if cfg.dtype == DType::F64 {
            params
        } else {
            // The parameter bound is stated for f64 runs.
            Criterion { passed: true, ..params }.with_detail("informational for f32")
        });
        report.metric("paired", &p);
    }
    if cfg.schedule == [Mode::Train, Mode::Tune] && cfg.switch_every.is_none() {
        let s = switch_check(cfg)?;
        report.criteria.push(
            Criterion::at_most("train_to_tune_switch_jump", s.jump, s.threshold)
                .with_detail(format!("switch at step {}", s.switch_step)),
        );
        report.metric("switch", &s);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 12,
            dataset: DatasetSpec::Synthetic { samples: 64, classes: 3, image_size: 6, spread: 1.0 },
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_phases_and_cadence() {
        let mut c = small();
        c.schedule = vec![Mode::Train, Mode::Tune];
        assert_eq!(c.mode_at(5), Mode::Train);
        assert_eq!(c.mode_at(6), Mode::Tune);
        c.switch_every = Some(4);
        let modes: Vec<Mode> = (0..12).map(|s| c.mode_at(s)).collect();
        assert_eq!(modes[4], Mode::Tune);
        assert_eq!(modes[8], Mode::Train);
        c.schedule = vec![Mode::Eval, Mode::Deploy];
        assert!(matches!(c.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_stable() {
        let cfg = TrainConfig { lr: 0.0, ..small() };
        let data = cfg.load_dataset().unwrap();
        let g = model_for(&cfg, &data).unwrap();
        let before = g.params.clone();
        let out = train(&cfg, &data, g).unwrap();
        assert_eq!(out.final_params().unwrap(), before);
    }

    #[test]
    fn mixed_schedule_runs_and_loss_falls() {
        let cfg = TrainConfig { steps: 40, schedule: vec![Mode::Train, Mode::Tune], switch_every: Some(10), ..small() };
        let out = train_config(&cfg).unwrap();
        let l = out.losses();
        assert!(l[35..].iter().sum::<f64>() < l[..5].iter().sum::<f64>(), "{l:?}");
        assert!(!out.graph.is_rewritten() || out.log.last().unwrap().mode == Mode::Tune);
    }

    #[test]
    fn nan_aborts_with_step_and_mode() {
        let cfg = TrainConfig { lr: 1e300, momentum: 0.0, weight_decay: 0.0, dtype: DType::F64, ..small() };
        let err = train_config(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)), "{msg}");
        assert!(msg.contains("at step") && msg.contains("eval mode"), "{msg}");
    }
}
