//! End-to-end acceptance gate. Each test prints one `PASS`/`FAIL` line with
//! the measured values before asserting.

use std::time::{Duration, Instant};

use lrp_core::checkpoint;
use lrp_core::config::Config;
use lrp_core::data::{gen_dataset, DataKind, DataSpec, Split};
use lrp_core::harness::{cmd_compare, cmd_prune, cmd_train, evaluate};
use lrp_core::lora::{AdapterMode, Mask};
use lrp_core::model::{Model, ModelSpec, TargetSet};
use lrp_core::oracles::{gradcheck_all, merge_equivalence_error, sgd_identity_error, taylor_vs_leave_one_out, LooSetup};
use lrp_core::pruner::{self, zeros_for, PruneConfig, Scope};
use lrp_core::criteria::Criterion;
use lrp_core::report::mean_std;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, took: Duration, limit: Duration, detail: &str) {
    let ok = pass && took <= limit;
    println!(
        "criterion {n} {name}: {} ({detail}; {:.2}s of {}s)",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(took <= limit, "criterion {n} exceeded {}s", limit.as_secs());
}

#[test]
fn criterion_1_gradcheck() {
    let t = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    for seed in 0..100 {
        for c in gradcheck_all(seed).unwrap() {
            if c.measured > worst.1 || !c.measured.is_finite() {
                worst = (c.name.clone(), c.measured);
            }
        }
    }
    let pass = worst.1 <= 1e-6;
    verdict(
        1,
        "gradcheck",
        pass,
        t.elapsed(),
        Duration::from_secs(30),
        &format!("max relative error {:.2e} at {} over 100 seeds", worst.1, worst.0),
    );
}

#[test]
fn criterion_2_sgd_identity() {
    let t = Instant::now();
    let worst = (0..50)
        .map(|s| sgd_identity_error(s, 0.01 * (1 + s % 10) as f64, false).unwrap())
        .fold(0.0f64, f64::max);
    verdict(
        2,
        "sgd-step identity",
        worst <= 1e-10,
        t.elapsed(),
        Duration::from_secs(10),
        &format!("max elementwise gap {worst:.2e} over 50 instances"),
    );
}

#[test]
fn criterion_3_merge_equivalence() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for mode in [AdapterMode::Parallel, AdapterMode::Sequential] {
        for s in 0..100 {
            worst = worst.max(merge_equivalence_error(1000 + s, mode).unwrap());
        }
    }
    verdict(
        3,
        "merge equivalence",
        worst <= 1e-12,
        t.elapsed(),
        Duration::from_secs(10),
        &format!("max |masked forward - merged forward| {worst:.2e} over 2x100 cases"),
    );
}

#[test]
fn criterion_4_taylor_vs_leave_one_out() {
    let t = Instant::now();
    let rhos: Vec<f64> = (0..3)
        .map(|seed| {
            taylor_vs_leave_one_out(&LooSetup {
                seed,
                ..LooSetup::default()
            })
            .unwrap()
            .spearman
        })
        .collect();
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        4,
        "taylor vs leave-one-out",
        min >= 0.5,
        t.elapsed(),
        Duration::from_secs(60),
        &format!("spearman per seed {rhos:.3?}, min {min:.3}"),
    );
}

const TEACHER: &str = "
[base]
kind = lowrank-teacher
classes = 3
dim = 8
hidden = 16
n = 2000
epochs = 30
noise = 0.5
[task]
n = 2000
noise = 0.5
[compare]
criteria = lora-grad, exact-grad
sparsities = 0.3, 0.5
seeds = 0, 1, 2, 3, 4
";

#[test]
fn criterion_5_lora_gradient_vs_exact_gradient() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse(TEACHER).unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    let rep = cmd_compare(&cfg, dir.path(), 4).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for s in [0.3, 0.5] {
        let lrp = rep.group("lora-grad", "joint", s).unwrap();
        let exact = rep.group("exact-grad", "joint", s).unwrap();
        let overlaps: Vec<f64> = rep
            .cells
            .iter()
            .filter(|c| c.criterion == "lora-grad" && c.sparsity == s)
            .filter_map(|c| c.top50_overlap_vs_exact)
            .collect();
        let gap = (lrp.mean_accuracy - exact.mean_accuracy).abs();
        pass &= gap <= 0.02;
        detail.push(format!(
            "s={s}: acc {:.4} vs {:.4}, gap {:.2}pp, top-50% overlap {:.3}",
            lrp.mean_accuracy,
            exact.mean_accuracy,
            100.0 * gap,
            mean_std(&overlaps).0
        ));
    }
    verdict(
        5,
        "lora-grad vs exact-grad",
        pass,
        t.elapsed(),
        Duration::from_secs(300),
        &detail.join("; "),
    );
}

const BLOBS: &str = "
[compare]
criteria = lora-grad, random
sparsities = 0.5
seeds = 0, 1, 2, 3, 4
strategies = joint, one-shot
";

#[test]
fn criteria_6_and_8_blobs_orderings() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse(BLOBS).unwrap();
    assert_eq!(cfg.base.kind, DataKind::Blobs);
    cmd_train(&cfg, dir.path()).unwrap();
    let rep = cmd_compare(&cfg, dir.path(), 4).unwrap();
    let took = t.elapsed();

    let lrp = rep.group("lora-grad", "joint", 0.5).unwrap();
    let rnd = rep.group("random", "joint", 0.5).unwrap();
    let gap = lrp.mean_accuracy - rnd.mean_accuracy;
    verdict(
        6,
        "criterion ordering",
        gap > 0.0 && gap > rnd.std_accuracy,
        took,
        Duration::from_secs(300),
        &format!(
            "lora-grad {:.4} vs random {:.4} (std {:.4}), gap {:.4}",
            lrp.mean_accuracy, rnd.mean_accuracy, rnd.std_accuracy, gap
        ),
    );

    let one = rep.group("lora-grad", "one-shot", 0.5).unwrap();
    verdict(
        8,
        "joint vs one-shot",
        lrp.mean_accuracy >= one.mean_accuracy,
        took,
        Duration::from_secs(300),
        &format!(
            "progressive {:.4} vs one-shot {:.4} at s=0.5",
            lrp.mean_accuracy, one.mean_accuracy
        ),
    );
}

#[test]
fn criterion_7_schedule_and_masks() {
    let t = Instant::now();
    let data = gen_dataset(&DataSpec::new(DataKind::Blobs, 300, 8, 3, 5)).unwrap();
    let mut problems = Vec::new();
    let mut checked_steps = 0usize;
    let cases = [
        (Criterion::LoraGrad, Scope::PerLayer, 0.5, 1),
        (Criterion::LoraGrad, Scope::Global, 0.7, 3),
        (Criterion::Magnitude, Scope::PerLayer, 0.3, 2),
        (Criterion::Movement, Scope::Global, 0.5, 1),
        (Criterion::Random, Scope::PerLayer, 0.9, 4),
    ];
    for (i, &(criterion, scope, s, interval)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut model = Model::init(ModelSpec::mlp(8, &[7, 6], 3, 0), &mut rng).unwrap();
        match criterion.default_tuning() {
            lrp_core::criteria::Tuning::Lora => model.attach_lora(2, AdapterMode::Parallel, TargetSet::All, &mut rng).unwrap(),
            lrp_core::criteria::Tuning::Full => model.prepare_full(TargetSet::All).unwrap(),
        }
        let cfg = PruneConfig {
            target_sparsity: s,
            total_iterations: 57,
            prune_interval: interval,
            criterion,
            scope,
            seed: i as u64,
            ..PruneConfig::default()
        };
        let sched = cfg.schedule();
        let prunable = model.prunable();
        let mut prev: Vec<Mask> = prunable.iter().map(|&l| model.layers[l].weight.mask().clone()).collect();
        let mut observer = |m: &Model, row: &pruner::IterRow| {
            let now: Vec<Mask> = prunable.iter().map(|&l| m.layers[l].weight.mask().clone()).collect();
            let changed = now != prev;
            for (a, b) in prev.iter().zip(&now) {
                if a.keep().iter().zip(b.keep()).any(|(was, is)| !was && *is) {
                    problems.push(format!("case {i}: mask revived at {}", row.iteration));
                }
            }
            let inside = row.iteration >= sched.t_start && row.iteration <= sched.t_end;
            if changed && !inside {
                problems.push(format!("case {i}: mask changed outside window at {}", row.iteration));
            }
            prev = now;
        };
        let run = pruner::run_observed(&mut model, &data, &cfg, &mut observer).unwrap();
        let total: usize = run.events.first().map_or(0, |e| e.sizes.iter().sum());
        for e in &run.events {
            checked_steps += 1;
            let expected = sched.target_at(e.iteration).unwrap();
            if (e.target - expected).abs() > 0.0 {
                problems.push(format!("case {i}: target {} != cubic {expected}", e.target));
            }
            match scope {
                Scope::PerLayer => {
                    for (z, n) in e.zeros.iter().zip(&e.sizes) {
                        if *z != zeros_for(e.target, *n) || (*z as f64 / *n as f64 - e.target).abs() > 1.0 / *n as f64 {
                            problems.push(format!("case {i}: layer has {z}/{n} zeros at target {}", e.target));
                        }
                    }
                }
                Scope::Global => {
                    let z: usize = e.zeros.iter().sum();
                    if z != zeros_for(e.target, total) {
                        problems.push(format!("case {i}: {z}/{total} zeros at target {}", e.target));
                    }
                }
            }
        }
        let last = run.events.last().unwrap();
        if last.iteration != sched.t_end || last.target != s {
            problems.push(format!("case {i}: last prune at {} to {}", last.iteration, last.target));
        }
        let final_zeros: usize = prunable.iter().map(|&l| model.layers[l].weight.mask().zeros()).sum();
        let exact = match scope {
            Scope::PerLayer => last.sizes.iter().map(|&n| zeros_for(s, n)).sum(),
            Scope::Global => zeros_for(s, total),
        };
        if final_zeros != exact {
            problems.push(format!("case {i}: terminal zeros {final_zeros} != {exact}"));
        }
    }
    verdict(
        7,
        "schedule and masks",
        problems.is_empty(),
        t.elapsed(),
        Duration::from_secs(60),
        &if problems.is_empty() {
            format!("{} prune steps over {} runs checked", checked_steps, cases.len())
        } else {
            problems.join("; ")
        },
    );
}

fn without_wall_time(path: &std::path::Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn criterion_9_determinism_and_round_trip() {
    let t = Instant::now();
    let text = "[base]\nn = 400\nepochs = 5\n[task]\nn = 400\n[prune]\nepochs = 4\n[compare]\nseeds = 0, 1, 2\n";
    let cfg = Config::parse(text).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut compares = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        cmd_train(&cfg, d.path()).unwrap();
        cmd_prune(&cfg, d.path()).unwrap();
        compares.push(cmd_compare(&cfg, d.path(), 1 + 2 * i).unwrap());
    }
    let mut problems = Vec::new();
    for f in ["base.lpl", "pruned.lpl", "pruned-merged.lpl", "train.csv", "prune.csv", "compare.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        if a != b {
            problems.push(format!("{f} differs between identical runs"));
        }
    }
    for f in ["train.json", "prune.json", "compare.json"] {
        if without_wall_time(&dirs[0].path().join(f)) != without_wall_time(&dirs[1].path().join(f)) {
            problems.push(format!("{f} differs between identical runs"));
        }
    }
    if compares[0].cells != compares[1].cells {
        problems.push("compare cells depend on the job count".into());
    }

    let pruned = checkpoint::load(&dirs[0].path().join("pruned.lpl")).unwrap();
    if checkpoint::to_bytes(&checkpoint::from_bytes(&checkpoint::to_bytes(&pruned)).unwrap()) != checkpoint::to_bytes(&pruned) {
        problems.push("checkpoint re-encoding is not stable".into());
    }
    let merged = checkpoint::load(&dirs[0].path().join("pruned-merged.lpl")).unwrap();
    if merged != pruned.merged() {
        problems.push("merged checkpoint differs from merging the adapted checkpoint".into());
    }
    let data = gen_dataset(&cfg.task_data()).unwrap();
    let (x, _) = data.split(Split::Test);
    let gap = pruned.predict(&x).unwrap().max_abs_diff(&merged.predict(&x).unwrap()).unwrap();
    if gap > 1e-12 {
        problems.push(format!("reloaded merged model deviates by {gap:e}"));
    }
    let acc = evaluate(&merged, &data, Split::Test).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dirs[0].path().join("prune.json")).unwrap()).unwrap();
    if summary["test_accuracy"].as_f64() != Some(acc) {
        problems.push("reloaded checkpoint does not reproduce the reported accuracy".into());
    }
    verdict(
        9,
        "determinism and round trip",
        problems.is_empty(),
        t.elapsed(),
        Duration::from_secs(30),
        &if problems.is_empty() {
            "checkpoints, CSVs and summaries bit-identical; reload reproduces accuracy".to_string()
        } else {
            problems.join("; ")
        },
    );
}
