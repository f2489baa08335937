//! Progressive pruning: a cubic sparsity schedule, importance refresh after
//! every backward pass, and Top-k mask removal inside a pruning window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criteria::{
    estimate_from_module, importance_magnitude, importance_parallel, importance_random,
    importance_sequential, importance_taylor_exact, Criterion, EmaMode, ImportanceState,
    SeqVariant,
};
use crate::data::{Batcher, Dataset};
use crate::error::{LabError, Result};
use crate::lora::AdapterMode;
use crate::model::{LayerWeight, Model, StepGrads};
use crate::tensor::Tensor;

/// Whether Top-k selection runs per layer or over the pooled prunable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    PerLayer,
    Global,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::PerLayer => "per-layer",
            Scope::Global => "global",
        })
    }
}

impl FromStr for Scope {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(Scope::PerLayer),
            "global" => Ok(Scope::Global),
            other => Err(LabError::Config(format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    pub lambda: f64,
    pub total_iterations: usize,
    pub prune_start_frac: f64,
    pub prune_end_frac: f64,
    /// Iterations between mask updates inside the window.
    pub prune_interval: usize,
    pub criterion: Criterion,
    pub ema_mode: EmaMode,
    pub scope: Scope,
    pub seq_variant: SeqVariant,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.5,
            lambda: 0.9,
            total_iterations: 100,
            prune_start_frac: 0.1,
            prune_end_frac: 0.7,
            prune_interval: 1,
            criterion: Criterion::LoraGrad,
            ema_mode: EmaMode::Recursive,
            scope: Scope::PerLayer,
            seq_variant: SeqVariant::Chain,
            seed: 0,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad(format!("sparsity {} outside [0, 1)", self.target_sparsity));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0 <= self.prune_start_frac
            && self.prune_start_frac < self.prune_end_frac
            && self.prune_end_frac <= 1.0)
        {
            return bad(format!(
                "prune window needs 0 <= start < end <= 1, got [{}, {}]",
                self.prune_start_frac, self.prune_end_frac
            ));
        }
        if self.prune_interval < 1 {
            return bad("prune interval must be >= 1".into());
        }
        if self.total_iterations < 1 || self.batch_size < 1 {
            return bad("iterations and batch size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} invalid", self.lr));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self)
    }
}

/// Cubic ramp `s(t) = s·(1 − (1 − (t−t_i)/(t_f−t_i))³)` over `[t_i, t_f]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub t_start: usize,
    pub t_end: usize,
    pub target: f64,
    pub total: usize,
}

impl Schedule {
    pub fn new(cfg: &PruneConfig) -> Self {
        let total = cfg.total_iterations;
        let t_start = ((cfg.prune_start_frac * total as f64) - 1e-9).ceil().max(0.0) as usize;
        let t_end = ((cfg.prune_end_frac * total as f64) + 1e-9).floor() as usize;
        Self {
            t_start: t_start.min(total),
            t_end: t_end.clamp(t_start.min(total), total),
            target: cfg.target_sparsity,
            total,
        }
    }

    pub fn target_at(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(LabError::Usage(format!("iteration {t} beyond total {}", self.total)));
        }
        Ok(if t >= self.t_end {
            self.target
        } else if t < self.t_start {
            0.0
        } else {
            let frac = (t - self.t_start) as f64 / (self.t_end - self.t_start) as f64;
            self.target * (1.0 - (1.0 - frac).powi(3))
        })
    }

    /// Mask updates happen at `t_start`, every `interval` after it, and at
    /// `t_end`.
    pub fn is_prune_step(&self, t: usize, interval: usize) -> bool {
        t >= self.t_start && t <= self.t_end && ((t - self.t_start).is_multiple_of(interval) || t == self.t_end)
    }
}

pub fn sparsity_target(t: usize, cfg: &PruneConfig) -> Result<f64> {
    cfg.schedule().target_at(t)
}

/// Number of zeros a pool of `n` weights must hold at sparsity `target`.
pub fn zeros_for(target: f64, n: usize) -> usize {
    ((target * n as f64) + 1e-9).floor() as usize
}

/// Raises mask sparsity to `target` by zeroing the lowest smoothed scores.
///
/// `state.layers[p]` belongs to the `p`-th prunable layer of `model`.
/// Already-pruned entries rank as `−∞` so they are always part of the
/// selected set; remaining ties go to the lower (layer, row, col).
/// Returns the number of newly pruned entries.
pub fn prune_step(model: &mut Model, state: &ImportanceState, target: f64, scope: Scope) -> Result<usize> {
    let prunable = model.prunable();
    if prunable.len() != state.layers.len() {
        return Err(LabError::Usage(format!(
            "{} importance entries for {} prunable layers",
            state.layers.len(),
            prunable.len()
        )));
    }
    let ranked = |p: usize, model: &Model| -> Vec<(f64, usize, usize)> {
        let mask = model.layers[prunable[p]].weight.mask();
        state.layers[p]
            .smooth
            .data()
            .iter()
            .enumerate()
            .map(|(i, &s)| (if mask.is_kept(i) { s } else { f64::NEG_INFINITY }, p, i))
            .collect()
    };
    let mut newly = 0;
    match scope {
        Scope::PerLayer => {
            for (p, &li) in prunable.iter().enumerate() {
                let mask = model.layers[li].weight.mask();
                let want = zeros_for(target, mask.len());
                if want < mask.zeros() {
                    return Err(LabError::Invariant(format!(
                        "target sparsity {target} is below current sparsity {} of layer {}",
                        mask.sparsity(),
                        model.layers[li].name
                    )));
                }
                let mut cand = ranked(p, model);
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                let mask = model.layers[li].weight.mask_mut();
                for &(_, _, i) in cand.iter().take(want) {
                    newly += usize::from(mask.prune(i));
                }
            }
        }
        Scope::Global => {
            let (zeros, total) = prunable.iter().fold((0, 0), |(z, n), &l| {
                let m = model.layers[l].weight.mask();
                (z + m.zeros(), n + m.len())
            });
            let want = zeros_for(target, total);
            if want < zeros {
                return Err(LabError::Invariant(format!(
                    "target sparsity {target} is below current pooled sparsity"
                )));
            }
            let mut cand: Vec<(f64, usize, usize)> = (0..prunable.len()).flat_map(|p| ranked(p, model)).collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(_, p, i) in cand.iter().take(want) {
                newly += usize::from(model.layers[prunable[p]].weight.mask_mut().prune(i));
            }
        }
    }
    Ok(newly)
}

/// A single jump straight to sparsity `s`.
pub fn one_shot_prune(model: &mut Model, state: &ImportanceState, s: f64, scope: Scope) -> Result<usize> {
    prune_step(model, state, s, scope)
}

/// Fresh importance state sized to the prunable layers of `model`.
pub fn new_state(model: &Model, cfg: &PruneConfig) -> Result<ImportanceState> {
    let shapes: Vec<_> = model.prunable().iter().map(|&l| model.layers[l].weight.shape()).collect();
    ImportanceState::new(&shapes, cfg.lambda, cfg.ema_mode)
}

/// Checks that `criterion` can score every prunable layer of `model`.
pub fn check_compatible(model: &Model, cfg: &PruneConfig) -> Result<()> {
    let prunable = model.prunable();
    if prunable.is_empty() && cfg.target_sparsity > 0.0 {
        return Err(LabError::Config("pruning requested but no layer is prunable".into()));
    }
    for &l in &prunable {
        let layer = &model.layers[l];
        match (&layer.weight, cfg.criterion) {
            (LayerWeight::Lora(m), Criterion::LoraGrad) => {
                if m.mode() == AdapterMode::Sequential && cfg.seq_variant == SeqVariant::Literal {
                    let (d, k) = m.shape();
                    if d != k {
                        return Err(LabError::Config(format!(
                            "literal sequential scoring needs square layers; `{}` is {d}x{k}",
                            layer.name
                        )));
                    }
                }
            }
            (LayerWeight::Dense(_), Criterion::LoraGrad) => {
                return Err(LabError::Config(format!(
                    "criterion lora-grad needs adapters on `{}`",
                    layer.name
                )));
            }
            (LayerWeight::Dense(d), Criterion::Taylor | Criterion::Movement) if !d.w.requires_grad => {
                return Err(LabError::Config(format!(
                    "criterion {} needs a trainable weight on `{}`",
                    cfg.criterion, layer.name
                )));
            }
            (LayerWeight::Lora(_), Criterion::Taylor | Criterion::Movement) => {
                return Err(LabError::Config(format!(
                    "criterion {} scores full fine-tuning; `{}` carries adapters",
                    cfg.criterion, layer.name
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Instantaneous scores of every prunable layer, from the gradients of the
/// current step. Movement is folded straight into `state`; the rest go
/// through the moving average.
pub fn refresh_importance(
    model: &Model,
    grads: &StepGrads,
    state: &mut ImportanceState,
    cfg: &PruneConfig,
) -> Result<()> {
    for (p, &l) in model.prunable().iter().enumerate() {
        let layer = &model.layers[l];
        let exact = || {
            grads.composite[l]
                .as_ref()
                .ok_or_else(|| LabError::Usage(format!("no gradient reaches `{}`", layer.name)))
        };
        let inst = match cfg.criterion {
            Criterion::LoraGrad => {
                let m = layer.lora().ok_or_else(|| LabError::Config("lora-grad needs adapters".into()))?;
                let g_hat = estimate_from_module(m)?;
                match m.mode() {
                    AdapterMode::Parallel => importance_parallel(m, &g_hat)?,
                    AdapterMode::Sequential => importance_sequential(m, &g_hat, cfg.seq_variant)?,
                }
            }
            Criterion::ExactGrad | Criterion::Taylor => {
                importance_taylor_exact(&layer.weight.composite(), exact()?)?
            }
            Criterion::Magnitude | Criterion::MagnitudeLora => importance_magnitude(&layer.weight.composite()),
            Criterion::Movement => {
                state.movement_update(p, &layer.weight.composite(), exact()?)?;
                continue;
            }
            Criterion::Random => {
                if state.steps[p] > 0 {
                    continue;
                }
                let (r, c) = layer.weight.shape();
                importance_random(r, c, cfg.seed.wrapping_mul(1_000_003).wrapping_add(p as u64))
            }
        };
        state.ema_update(p, inst)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub iteration: usize,
    pub loss: f64,
    pub sparsity: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub iteration: usize,
    pub target: f64,
    pub newly_pruned: usize,
    /// Zero counts per prunable layer after the step.
    pub zeros: Vec<usize>,
    /// Entry counts per prunable layer.
    pub sizes: Vec<usize>,
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRun {
    pub rows: Vec<IterRow>,
    pub events: Vec<PruneEvent>,
    pub state: ImportanceState,
}

fn event(model: &Model, iteration: usize, target: f64, newly_pruned: usize) -> PruneEvent {
    let prunable = model.prunable();
    PruneEvent {
        iteration,
        target,
        newly_pruned,
        zeros: prunable.iter().map(|&l| model.layers[l].weight.mask().zeros()).collect(),
        sizes: prunable.iter().map(|&l| model.layers[l].weight.mask().len()).collect(),
    }
}

/// One observer call per finished iteration; used for live metrics.
pub type Observer<'a> = dyn FnMut(&Model, &IterRow) + 'a;

/// Runs `cfg.total_iterations` steps of: clear grads, masked forward and
/// backward, importance refresh and smoothing, optimizer step, and (inside
/// the window) a mask update toward the scheduled sparsity.
///
/// Scores are taken from the parameters and gradients of the same step,
/// before the optimizer moves them.
pub fn run(model: &mut Model, data: &Dataset, cfg: &PruneConfig) -> Result<PruneRun> {
    run_observed(model, data, cfg, &mut |_, _| {})
}

pub fn run_observed(model: &mut Model, data: &Dataset, cfg: &PruneConfig, observer: &mut Observer<'_>) -> Result<PruneRun> {
    cfg.validate()?;
    check_compatible(model, cfg)?;
    let schedule = cfg.schedule();
    let mut state = new_state(model, cfg)?;
    let mut batcher = Batcher::new(&data.train, cfg.batch_size, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.total_iterations);
    let mut events = Vec::new();
    let pruning = cfg.target_sparsity > 0.0;

    for t in 1..=cfg.total_iterations {
        model.zero_grad();
        let idx = batcher.next_batch();
        let (x, y) = data.batch(&idx);
        let grads = model.backward_step(&x, &y).map_err(|e| match e {
            LabError::NonFinite(what) => LabError::NonFinite(format!(
                "{what} at iteration {t} (criterion {}, sparsity {:.4})",
                cfg.criterion,
                model.sparsity()
            )),
            other => other,
        })?;
        if pruning {
            refresh_importance(model, &grads, &mut state, cfg)?;
        }
        model.sgd_step(cfg.lr)?;
        if pruning && schedule.is_prune_step(t, cfg.prune_interval) {
            let target = schedule.target_at(t)?;
            let newly = prune_step(model, &state, target, cfg.scope)?;
            events.push(event(model, t, target, newly));
        }
        let row = IterRow {
            iteration: t,
            loss: grads.loss,
            sparsity: model.sparsity(),
            lr: cfg.lr,
        };
        observer(model, &row);
        rows.push(row);
    }
    Ok(PruneRun { rows, events, state })
}

/// Fine-tunes without pruning while accumulating importance, then prunes
/// once to `cfg.target_sparsity`. No recovery training follows.
pub fn run_one_shot(model: &mut Model, data: &Dataset, cfg: &PruneConfig) -> Result<PruneRun> {
    cfg.validate()?;
    check_compatible(model, cfg)?;
    let mut state = new_state(model, cfg)?;
    let mut batcher = Batcher::new(&data.train, cfg.batch_size, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.total_iterations);
    for t in 1..=cfg.total_iterations {
        model.zero_grad();
        let (x, y) = data.batch(&batcher.next_batch());
        let grads = model.backward_step(&x, &y)?;
        refresh_importance(model, &grads, &mut state, cfg)?;
        model.sgd_step(cfg.lr)?;
        rows.push(IterRow {
            iteration: t,
            loss: grads.loss,
            sparsity: model.sparsity(),
            lr: cfg.lr,
        });
    }
    let newly = one_shot_prune(model, &state, cfg.target_sparsity, cfg.scope)?;
    let events = vec![event(model, cfg.total_iterations, cfg.target_sparsity, newly)];
    Ok(PruneRun { rows, events, state })
}

/// Plain mini-batch SGD over all trainable tensors; no masks change.
pub fn train(model: &mut Model, data: &Dataset, iterations: usize, batch_size: usize, lr: f64, seed: u64) -> Result<Vec<IterRow>> {
    let mut batcher = Batcher::new(&data.train, batch_size, seed)?;
    let mut rows = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        model.zero_grad();
        let (x, y) = data.batch(&batcher.next_batch());
        let grads = model.backward_step(&x, &y)?;
        model.sgd_step(lr)?;
        rows.push(IterRow {
            iteration: t,
            loss: grads.loss,
            sparsity: model.sparsity(),
            lr,
        });
    }
    Ok(rows)
}

/// Mask of the `p`-th prunable layer as a 0/1 tensor.
pub fn mask_tensor(model: &Model, p: usize) -> Tensor {
    model.layers[model.prunable()[p]].weight.mask().to_tensor()
}
