//! The experiment commands behind the `lrp` binary. Each command takes a
//! parsed [`Config`] and an output directory and writes its artifacts there.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Config, Strategy};
use crate::criteria::{
    estimate_from_module, importance_parallel, importance_sequential, importance_taylor_exact, Criterion, SeqVariant,
    Tuning,
};
use crate::data::{gen_dataset, Dataset, Split};
use crate::error::{LabError, Result};
use crate::lora::{AdapterMode, Mask};
use crate::model::{Activation, Arch, LayerWeight, Model, ModelSpec, TargetSet};
use crate::oracles::{self, PropertyCheck, RankStats, FD_STEP};
use crate::pruner::{self, PruneRun};
use crate::report::{
    self, CellResult, CompareReport, OracleReport, RunReport, RunSummary, REPORT_VERSION,
};
use crate::tensor::Tensor;

/// Allowed `|f(x) − f_merged(x)|`, relative to the logit scale, on every
/// evaluation.
pub const MERGE_EVAL_TOL: f64 = 1e-12;

/// Mixes a master seed with a per-run value into an independent stream seed.
pub fn derive_seed(master: u64, value: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(value))
}

/// Accuracy on `split`, computed on the merged model after checking that
/// merging does not change the logits.
pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<f64> {
    let (x, y) = data.split(split);
    let merged = model.merged();
    let direct = model.predict(&x)?;
    let via_merge = merged.predict(&x)?;
    let gap = direct.max_abs_diff(&via_merge)?;
    if gap > MERGE_EVAL_TOL * (1.0 + direct.max_abs()) {
        return Err(LabError::Invariant(format!("merged model deviates from adapted model by {gap:e}")));
    }
    merged.accuracy(&x, &y)
}

/// Spearman and top-50% overlap between LoRA-gradient and exact-gradient
/// scores of every prunable entry, from one full-batch gradient on the
/// training split. `model` must carry adapters on its prunable layers.
pub fn criterion_agreement(model: &Model, data: &Dataset, seq_variant: SeqVariant) -> Result<RankStats> {
    let mut probe = model.clone();
    probe.zero_grad();
    let (x, y) = data.split(Split::Train);
    let grads = probe.backward_step(&x, &y)?;
    let (mut lrp, mut exact) = (Vec::new(), Vec::new());
    for l in probe.prunable() {
        let layer = &probe.layers[l];
        let m = layer
            .lora()
            .ok_or_else(|| LabError::Config(format!("layer `{}` has no adapters to compare", layer.name)))?;
        let g_hat = estimate_from_module(m)?;
        let est = match m.mode() {
            AdapterMode::Parallel => importance_parallel(m, &g_hat)?,
            AdapterMode::Sequential => importance_sequential(m, &g_hat, seq_variant)?,
        };
        let g = grads.composite[l]
            .as_ref()
            .ok_or_else(|| LabError::Usage(format!("no gradient reaches `{}`", layer.name)))?;
        let ex = importance_taylor_exact(&m.composite(), g)?;
        lrp.extend_from_slice(est.data());
        exact.extend_from_slice(ex.data());
    }
    oracles::rank_stats(&lrp, &exact, &[0.5])
}

fn load_base(cfg: &Config, out: &Path) -> Result<Model> {
    let path = out.join(&cfg.base.checkpoint);
    if !path.exists() {
        return Err(LabError::Config(format!(
            "base checkpoint {} not found; run `train` first",
            path.display()
        )));
    }
    let model = checkpoint::load(&path)?;
    let spec = cfg.model_spec(model.spec.seed)?;
    if model.spec != spec {
        return Err(LabError::Config(format!(
            "base checkpoint {} was trained for a different architecture",
            path.display()
        )));
    }
    Ok(model)
}

/// Everything one pruning run produces.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub model: Model,
    pub run: PruneRun,
    pub tuning: Tuning,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub rank_stats: Option<RankStats>,
}

/// Fine-tunes a copy of `base` on `data` while pruning with `criterion`,
/// evaluating the result through the merged weights.
pub fn run_cell(
    cfg: &Config,
    base: &Model,
    data: &Dataset,
    criterion: Criterion,
    sparsity: f64,
    seed: u64,
    strategy: Strategy,
) -> Result<CellOutcome> {
    let mut model = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let tuning = criterion.default_tuning();
    match tuning {
        Tuning::Lora => model.attach_lora(cfg.lora.rank, cfg.lora.mode, cfg.lora.targets, &mut rng)?,
        Tuning::Full => model.prepare_full(cfg.lora.targets)?,
    }
    let pc = cfg.prune_config(criterion, sparsity, derive_seed(seed, 2), data.train.len())?;
    let run = match strategy {
        Strategy::Joint => pruner::run(&mut model, data, &pc)?,
        Strategy::OneShot => pruner::run_one_shot(&mut model, data, &pc)?,
    };
    let rank_stats = match criterion {
        Criterion::LoraGrad | Criterion::ExactGrad => Some(criterion_agreement(&model, data, cfg.prune.seq_variant)?),
        _ => None,
    };
    Ok(CellOutcome {
        val_accuracy: evaluate(&model, data, Split::Val)?,
        test_accuracy: evaluate(&model, data, Split::Test)?,
        model,
        run,
        tuning,
        rank_stats,
    })
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Paths written by a command.
pub fn artifact(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

/// Trains the backbone on the source task with all weights trainable and
/// stores it as the base checkpoint.
pub fn cmd_train(cfg: &Config, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    ensure_dir(out)?;
    let hash = cfg.hash();
    let data = gen_dataset(&cfg.base_data())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut model = Model::init(cfg.model_spec(cfg.seed)?, &mut rng)?;
    let iterations = data.iterations(cfg.base.epochs, cfg.base.batch_size);
    let rows = pruner::train(
        &mut model,
        &data,
        iterations,
        cfg.base.batch_size,
        cfg.base.lr,
        derive_seed(cfg.seed, 3),
    )?;
    checkpoint::save(&out.join(&cfg.base.checkpoint), &model)?;
    let summary = RunSummary {
        format_version: REPORT_VERSION,
        command: "train".into(),
        config_hash: hash.clone(),
        criterion: None,
        tuning: Some(Tuning::Full.to_string()),
        strategy: None,
        seed: cfg.seed,
        iterations,
        target_sparsity: 0.0,
        final_sparsity: model.sparsity(),
        final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
        val_accuracy: evaluate(&model, &data, Split::Val)?,
        test_accuracy: evaluate(&model, &data, Split::Test)?,
        trainable_params: model.trainable_count(),
        rank_stats: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    report::write_rows_csv(&artifact(out, "train.csv"), &rows, &hash)?;
    report::write_json(&artifact(out, "train.json"), &summary)?;
    Ok(RunReport { rows, summary })
}

/// Loads the base checkpoint, fine-tunes and prunes it on the downstream
/// task with `[prune]` settings, and saves both the adapted and the merged
/// pruned model. Uses the same run seed as compare cell seed 0.
pub fn cmd_prune(cfg: &Config, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    ensure_dir(out)?;
    let hash = cfg.hash();
    let base = load_base(cfg, out)?;
    let data = gen_dataset(&cfg.task_data())?;
    let p = &cfg.prune;
    let cell = run_cell(cfg, &base, &data, p.criterion, p.target_sparsity, derive_seed(cfg.seed, 0), p.strategy)?;
    checkpoint::save(&out.join("pruned.lpl"), &cell.model)?;
    checkpoint::save(&out.join("pruned-merged.lpl"), &cell.model.merged())?;
    let summary = RunSummary {
        format_version: REPORT_VERSION,
        command: "prune".into(),
        config_hash: hash.clone(),
        criterion: Some(p.criterion.to_string()),
        tuning: Some(cell.tuning.to_string()),
        strategy: Some(p.strategy.to_string()),
        seed: cfg.seed,
        iterations: cell.run.rows.len(),
        target_sparsity: p.target_sparsity,
        final_sparsity: cell.model.sparsity(),
        final_loss: cell.run.rows.last().map_or(f64::NAN, |r| r.loss),
        val_accuracy: cell.val_accuracy,
        test_accuracy: cell.test_accuracy,
        trainable_params: cell.model.trainable_count(),
        rank_stats: cell.rank_stats.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    report::write_rows_csv(&artifact(out, "prune.csv"), &cell.run.rows, &hash)?;
    report::write_json(&artifact(out, "prune.json"), &summary)?;
    Ok(RunReport {
        rows: cell.run.rows,
        summary,
    })
}

/// One grid cell key, in report order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub sparsity: f64,
    pub seed: u64,
}

pub fn grid(cfg: &Config) -> Vec<CellKey> {
    let c = &cfg.compare;
    let mut out = Vec::new();
    for &strategy in &c.strategies {
        for &criterion in &c.criteria {
            for &sparsity in &c.sparsities {
                for &seed in &c.seeds {
                    out.push(CellKey {
                        strategy,
                        criterion,
                        sparsity,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order
/// and the first error (in item order) wins.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot is filled"))
        .collect()
}

/// Runs the criterion × sparsity × seed grid (for each strategy) from the
/// same base checkpoint and task. Cells sharing a seed share the task
/// split, adapter initialisation and batch order, so criteria are compared
/// on paired runs.
pub fn cmd_compare(cfg: &Config, out: &Path, jobs: usize) -> Result<CompareReport> {
    let start = Instant::now();
    ensure_dir(out)?;
    let c = &cfg.compare;
    if c.criteria.is_empty() || c.sparsities.is_empty() || c.seeds.is_empty() || c.strategies.is_empty() {
        return Err(LabError::Config("compare grid has an empty axis".into()));
    }
    let hash = cfg.hash();
    let base = load_base(cfg, out)?;
    let data = gen_dataset(&cfg.task_data())?;
    let keys = grid(cfg);
    let cells = parallel_map(&keys, jobs, |k| {
        let seed = derive_seed(cfg.seed, k.seed);
        let o = run_cell(cfg, &base, &data, k.criterion, k.sparsity, seed, k.strategy)?;
        Ok(CellResult {
            criterion: k.criterion.to_string(),
            tuning: o.tuning.to_string(),
            strategy: k.strategy.to_string(),
            sparsity: k.sparsity,
            seed: k.seed,
            test_accuracy: o.test_accuracy,
            final_sparsity: o.model.sparsity(),
            final_loss: o.run.rows.last().map_or(f64::NAN, |r| r.loss),
            spearman_vs_exact: o.rank_stats.as_ref().map(|r| r.spearman),
            top50_overlap_vs_exact: o.rank_stats.as_ref().map(|r| r.topk_overlap["0.50"]),
        })
    })?;
    let rep = CompareReport::new(hash.clone(), cells, start.elapsed().as_secs_f64());
    report::write_cells_csv(&artifact(out, "compare.csv"), &rep.cells, &hash)?;
    report::write_json(&artifact(out, "compare.json"), &rep)?;
    Ok(rep)
}

fn oracle_model(arch: &str, seed: u64) -> Result<(Model, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = match arch {
        "mlp" => ModelSpec::mlp(6, &[5], 3, seed),
        "transformer" => ModelSpec {
            arch: Arch::Transformer {
                tokens: 2,
                width: 4,
                ffn: 6,
                activation: Activation::Gelu,
            },
            input_dim: 8,
            classes: 3,
            seed,
        },
        other => return Err(LabError::Config(format!("unknown oracle model `{other}`"))),
    };
    let mut model = Model::init(spec, &mut rng)?;
    let mode = if seed.is_multiple_of(2) { AdapterMode::Parallel } else { AdapterMode::Sequential };
    model.attach_lora(2, mode, TargetSet::All, &mut rng)?;
    for l in &mut model.layers {
        if let LayerWeight::Lora(m) = &mut l.weight {
            m.b = Tensor::randn(m.b.rows(), m.b.cols(), 0.2, &mut rng).trainable();
        }
        let (d, k) = l.weight.shape();
        let keep = (0..d * k).map(|_| rng.random::<f64>() > 0.25).collect();
        l.weight.apply_mask(Mask::from_keep(d, k, keep)?)?;
    }
    let x = Tensor::randn(5, model.spec.input_dim, 1.0, &mut rng);
    let y = (0..5).map(|i| i % 3).collect();
    Ok((model, x, y))
}

/// Composite gradient of every prunable layer against finite differences
/// of the merged model's loss.
fn model_gradcheck(arch: &str, seed: u64) -> Result<f64> {
    let (model, x, y) = oracle_model(arch, seed)?;
    let exact = oracles::exact_composite_grad(&model, &x, &y)?;
    let merged = model.merged();
    let mut worst = 0.0f64;
    for (p, &l) in model.prunable().iter().enumerate() {
        let w = model.layers[l].weight.composite();
        let mask = model.layers[l].weight.mask().clone();
        let numeric = oracles::finite_diff_grad(
            |theta| {
                let mut probe = merged.clone();
                probe.layers[l].weight =
                    LayerWeight::Dense(crate::lora::DenseWeight::with_mask(theta.detached(), mask.clone())?);
                probe.loss(&x, &y)
            },
            &w,
            FD_STEP,
        )?;
        worst = worst.max(oracles::relative_error(&exact[p], &numeric)?);
    }
    Ok(worst)
}

fn model_merge_gap(arch: &str, seed: u64) -> Result<f64> {
    let (model, x, _) = oracle_model(arch, seed)?;
    model.predict(&x)?.max_abs_diff(&model.merged().predict(&x)?)
}

/// The full oracle suite as property checks, without touching the disk.
pub fn oracle_checks(cfg: &Config) -> Result<Vec<PropertyCheck>> {
    let o = &cfg.oracle;
    if o.models.is_empty() {
        return Err(LabError::Config("oracle.models is empty".into()));
    }
    let base = derive_seed(cfg.seed, 100);
    let mut checks: Vec<PropertyCheck> = Vec::new();
    for s in 0..o.gradcheck_seeds as u64 {
        for c in oracles::gradcheck_all(base.wrapping_add(s))? {
            match checks.iter_mut().find(|k| k.name == c.name) {
                Some(k) => k.measured = k.measured.max(c.measured),
                None => checks.push(c),
            }
        }
    }
    for arch in &o.models {
        let mut grad = 0.0f64;
        let mut merge = 0.0f64;
        for s in 0..o.gradcheck_seeds.clamp(1, 10) as u64 {
            grad = grad.max(model_gradcheck(arch, base.wrapping_add(s))?);
            merge = merge.max(model_merge_gap(arch, base.wrapping_add(s))?);
        }
        checks.push(PropertyCheck::at_most(format!("gradcheck/model/{arch}"), grad, 1e-6));
        checks.push(PropertyCheck::at_most(format!("merge/model/{arch}"), merge, 1e-12));
    }
    let mut sgd = 0.0f64;
    for s in 0..o.sgd_instances as u64 {
        sgd = sgd.max(oracles::sgd_identity_error(base.wrapping_add(s), 0.1, o.corrupt_gradient)?);
    }
    checks.push(PropertyCheck::at_most("sgd-identity", sgd, 1e-10));
    for mode in [AdapterMode::Parallel, AdapterMode::Sequential] {
        let mut chain = 0.0f64;
        for s in 0..o.chain_instances as u64 {
            chain = chain.max(oracles::chain_rule_error(base.wrapping_add(s), mode)?);
        }
        checks.push(PropertyCheck::at_most(format!("chain-rule/{mode}"), chain, 1e-10));
        let mut merge = 0.0f64;
        for s in 0..o.merge_cases as u64 {
            merge = merge.max(oracles::merge_equivalence_error(base.wrapping_add(s), mode)?);
        }
        checks.push(PropertyCheck::at_most(format!("merge-equivalence/{mode}"), merge, 1e-12));
    }
    let mut worst = f64::INFINITY;
    for s in 0..o.loo_seeds as u64 {
        let setup = oracles::LooSetup {
            seed: s,
            budget: o.loo_budget,
            ..oracles::LooSetup::default()
        };
        worst = worst.min(oracles::taylor_vs_leave_one_out(&setup)?.spearman);
    }
    if o.loo_seeds > 0 {
        checks.push(PropertyCheck::at_least("taylor-vs-leave-one-out", worst, o.min_spearman));
    }
    Ok(checks)
}

pub fn cmd_oracle_check(cfg: &Config, out: &Path) -> Result<OracleReport> {
    let start = Instant::now();
    let checks = oracle_checks(cfg)?;
    ensure_dir(out)?;
    let rep = OracleReport::new(cfg.hash(), checks, start.elapsed().as_secs_f64());
    report::write_json(&artifact(out, "oracle.json"), &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: String,
    pub checkpoint: String,
    pub sparsity: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

/// Evaluates a stored checkpoint on the downstream task.
pub fn cmd_eval(cfg: &Config, out: &Path) -> Result<EvalReport> {
    let path = out.join(&cfg.eval.checkpoint);
    if !path.exists() {
        return Err(LabError::Config(format!("checkpoint {} not found", path.display())));
    }
    let model = checkpoint::load(&path)?;
    let data = gen_dataset(&cfg.task_data())?;
    let (x, y) = data.split(Split::Test);
    let rep = EvalReport {
        format_version: REPORT_VERSION,
        config_hash: cfg.hash(),
        checkpoint: cfg.eval.checkpoint.clone(),
        sparsity: model.sparsity(),
        val_accuracy: evaluate(&model, &data, Split::Val)?,
        test_accuracy: evaluate(&model, &data, Split::Test)?,
        test_loss: model.merged().loss(&x, &y)?,
    };
    report::write_json(&artifact(out, "eval.json"), &rep)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config::parse(
            "[base]\nn = 200\nepochs = 4\n[task]\nn = 200\n[prune]\nepochs = 3\n[compare]\nseeds = 0, 1\n[oracle]\ngradcheck_seeds = 2\nsgd_instances = 5\nmerge_cases = 5\nchain_instances = 5\nloo_seeds = 1\nloo_budget = 64\n",
        )
        .unwrap()
    }

    #[test]
    fn parallel_map_keeps_order_and_first_error() {
        let items: Vec<u32> = (0..20).collect();
        let r = parallel_map(&items, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(r, (0..20).map(|i| i * 2).collect::<Vec<_>>());
        let e = parallel_map(&items, 3, |&i| {
            if i % 7 == 6 {
                Err(LabError::Usage(format!("item {i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(e, Err(LabError::Usage(m)) if m == "item 6"));
        assert!(parallel_map::<u32, u32, _>(&[], 4, |&i| Ok(i)).unwrap().is_empty());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
        assert_eq!(derive_seed(5, 6), derive_seed(5, 6));
    }

    #[test]
    fn grid_order_and_size() {
        let mut c = small();
        c.compare.sparsities = vec![0.3, 0.5];
        c.compare.strategies = vec![Strategy::Joint, Strategy::OneShot];
        let g = grid(&c);
        assert_eq!(g.len(), 2 * 2 * 2 * 2);
        assert_eq!(g[0].seed, 0);
        assert_eq!(g[1].seed, 1);
        assert_eq!(g[2].sparsity, 0.5);
    }

    #[test]
    fn prune_without_base_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_prune(&small(), dir.path()), Err(LabError::Config(_))));
        assert!(matches!(cmd_eval(&small(), dir.path()), Err(LabError::Config(_))));
    }

    #[test]
    fn oracle_suite_passes_and_empty_models_rejected() {
        let c = small();
        let checks = oracle_checks(&c).unwrap();
        for k in &checks {
            assert!(k.passed(), "{k:?}");
        }
        let mut bad = c.clone();
        bad.oracle.models.clear();
        assert!(matches!(oracle_checks(&bad), Err(LabError::Config(_))));
        let mut corrupt = c;
        corrupt.oracle.corrupt_gradient = true;
        let checks = oracle_checks(&corrupt).unwrap();
        let sgd = checks.iter().find(|k| k.name == "sgd-identity").unwrap();
        assert!(!sgd.passed());
    }

    #[test]
    fn compare_one_cell_equals_prune() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        cmd_train(&c, dir.path()).unwrap();
        c.compare.criteria = vec![Criterion::LoraGrad];
        c.compare.seeds = vec![0];
        let cmp = cmd_compare(&c, dir.path(), 1).unwrap();
        assert_eq!(cmp.cells.len(), 1);
        let single = cmd_prune(&c, dir.path()).unwrap();
        assert_eq!(cmp.cells[0].test_accuracy, single.summary.test_accuracy);
        assert_eq!(cmp.cells[0].final_loss, single.summary.final_loss);
        assert_eq!(single.summary.final_sparsity, 0.5);
    }
}
