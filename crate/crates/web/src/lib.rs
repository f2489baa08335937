//! Browser bindings. Every export returns a JSON string; failures come back
//! as `{"error": "..."}` so the page never has to catch exceptions.

use lrp_core::config::{Config, Strategy};
use lrp_core::criteria::{self, Criterion, SeqVariant};
use lrp_core::data::gen_dataset;
use lrp_core::error::{LabError, Result};
use lrp_core::harness::{derive_seed, run_cell};
use lrp_core::lora::AdapterMode;
use lrp_core::model::Model;
use lrp_core::oracles::{adapter_backward, random_adapter, rank_stats};
use lrp_core::pruner::{self, PruneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Debug, Serialize)]
pub struct SchedulePoint {
    pub t: usize,
    pub target: f64,
    pub prune_step: bool,
}

pub fn schedule(target: f64, start: f64, end: f64, total: usize, interval: usize) -> Result<Vec<SchedulePoint>> {
    let cfg = PruneConfig {
        target_sparsity: target,
        prune_start_frac: start,
        prune_end_frac: end,
        total_iterations: total,
        prune_interval: interval,
        ..PruneConfig::default()
    };
    cfg.validate()?;
    let s = cfg.schedule();
    (0..=total)
        .map(|t| {
            Ok(SchedulePoint {
                t,
                target: s.target_at(t)?,
                prune_step: s.is_prune_step(t, interval),
            })
        })
        .collect()
}

/// Sparsity target at every iteration of a cubic schedule.
#[wasm_bindgen]
pub fn schedule_curve(target: f64, start: f64, end: f64, total: usize, interval: usize) -> String {
    respond(schedule(target, start, end, total, interval))
}

#[derive(Debug, Serialize)]
pub struct ImportanceMap {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub estimated: Vec<f64>,
    pub exact: Vec<f64>,
    pub kept: Vec<bool>,
    pub spearman: f64,
    pub top50_overlap: f64,
}

pub fn importance(seed: u64, mode: &str) -> Result<ImportanceMap> {
    let mode: AdapterMode = mode.parse()?;
    let mut inst = random_adapter(seed, mode, 12, 3)?;
    let grad_w = adapter_backward(&mut inst)?;
    let m = &inst.module;
    let g_hat = criteria::estimate_from_module(m)?;
    let estimated = match mode {
        AdapterMode::Parallel => criteria::importance_parallel(m, &g_hat)?,
        AdapterMode::Sequential => criteria::importance_sequential(m, &g_hat, SeqVariant::Chain)?,
    };
    let exact = criteria::importance_taylor_exact(&m.composite(), &grad_w)?;
    let (rows, cols) = m.shape();
    let stats = rank_stats(estimated.data(), exact.data(), &[0.5])?;
    Ok(ImportanceMap {
        rows,
        cols,
        rank: m.a.shape().0,
        estimated: estimated.data().to_vec(),
        exact: exact.data().to_vec(),
        kept: m.mask().keep().to_vec(),
        spearman: stats.spearman,
        top50_overlap: stats.topk_overlap.get("0.50").copied().unwrap_or(f64::NAN),
    })
}

/// Low-rank estimated scores next to exact Taylor scores for one random
/// adapter, with their rank agreement.
#[wasm_bindgen]
pub fn importance_map(seed: u32, mode: &str) -> String {
    respond(importance(seed.into(), mode))
}

#[derive(Debug, Serialize)]
pub struct PruneDemo {
    pub criterion: String,
    pub strategy: String,
    pub base_accuracy: f64,
    pub test_accuracy: f64,
    pub final_sparsity: f64,
    pub loss: Vec<f64>,
    pub sparsity: Vec<f64>,
    pub spearman_vs_exact: Option<f64>,
    pub mask_rows: usize,
    pub mask_cols: usize,
    pub mask: Vec<bool>,
}

fn demo_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        ..Config::default()
    };
    cfg.base.n = 600;
    cfg.base.epochs = 10;
    cfg.task.n = 600;
    cfg.prune.epochs = 6;
    cfg
}

pub fn prune_run(criterion: &str, strategy: &str, sparsity: f64, seed: u64) -> Result<PruneDemo> {
    let criterion: Criterion = criterion.parse()?;
    let strategy: Strategy = strategy.parse()?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(LabError::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let cfg = demo_config(seed);
    cfg.validate()?;

    let src = gen_dataset(&cfg.base_data())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut base = Model::init(cfg.model_spec(seed)?, &mut rng)?;
    let iters = src.iterations(cfg.base.epochs, cfg.base.batch_size);
    pruner::train(&mut base, &src, iters, cfg.base.batch_size, cfg.base.lr, derive_seed(seed, 3))?;

    let task = gen_dataset(&cfg.task_data())?;
    let (tx, ty) = task.split(lrp_core::data::Split::Test);
    let base_accuracy = base.accuracy(&tx, &ty)?;
    let cell = run_cell(&cfg, &base, &task, criterion, sparsity, derive_seed(seed, 0), strategy)?;
    let first = cell.model.prunable()[0];
    let mask = cell.model.layers[first].weight.mask();
    let (mask_rows, mask_cols) = mask.shape();
    Ok(PruneDemo {
        criterion: criterion.to_string(),
        strategy: strategy.to_string(),
        base_accuracy,
        test_accuracy: cell.test_accuracy,
        final_sparsity: cell.model.sparsity(),
        loss: cell.run.rows.iter().map(|r| r.loss).collect(),
        sparsity: cell.run.rows.iter().map(|r| r.sparsity).collect(),
        spearman_vs_exact: cell.rank_stats.map(|s| s.spearman),
        mask_rows,
        mask_cols,
        mask: mask.keep().to_vec(),
    })
}

/// Trains a small base model, then fine-tunes and prunes it on the shifted
/// task with the chosen criterion.
#[wasm_bindgen]
pub fn prune_demo(criterion: &str, strategy: &str, sparsity: f64, seed: u32) -> String {
    respond(prune_run(criterion, strategy, sparsity, seed.into()))
}
