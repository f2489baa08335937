use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 3
[base]
n = 300
epochs = 6
[task]
n = 300
[prune]
epochs = 4
[compare]
seeds = 0, 1
[oracle]
gradcheck_seeds = 2
sgd_instances = 5
merge_cases = 5
chain_instances = 5
loo_seeds = 1
loo_budget = 64
";

fn lrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("lab.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = lrp(&["train", "--config", "/nonexistent/lab.cfg", "--out", out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_value_exits_2_and_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[prune]\ntarget_sparsity = 1.5\n");
    let o = lrp(&["prune", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("target_sparsity"), "{err}");
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(code(&lrp(&["train", "--bogus"])), 2);
}

#[test]
fn prune_without_base_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrp(&["prune", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_check_passes_and_fails_on_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = lrp(&["oracle-check", "--config", &cfg, "--out", out]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("PASS sgd-identity")));
    assert!(dir.path().join("oracle.json").exists());

    let cfg = write_config(dir.path(), &format!("{SMALL}corrupt_gradient = true\n"));
    let o = lrp(&["oracle-check", "--config", &cfg, "--out", out]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 1, "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("FAIL sgd-identity")));
}

#[test]
fn oracle_check_without_models_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[oracle]\nmodels =\n");
    let o = lrp(&["oracle-check", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_prune_eval_compare_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), SMALL);

    let o = lrp(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = std::fs::read(dir.path().join("base.lpl")).unwrap();
    assert!(ckpt.starts_with(b"LPLAB1"));

    let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert!(csv.starts_with("iteration,loss,sparsity,lr,config_hash\n"));
    assert!(!csv.contains('\r'));
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let window = losses.len() / 6;
    let smooth: Vec<f64> = losses
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    assert!(smooth.last().unwrap() < smooth.first().unwrap(), "{smooth:?}");

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.json")).unwrap()).unwrap();
    let hash = json["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(csv.lines().nth(1).unwrap().ends_with(&hash));

    let o = lrp(&["prune", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let prune: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("prune.json")).unwrap()).unwrap();
    assert!((prune["final_sparsity"].as_f64().unwrap() - 0.5).abs() < 0.01);

    let o = lrp(&["eval", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["test_accuracy"], prune["test_accuracy"]);

    let o = lrp(&["compare", "--config", &cfg, "--out", out, "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cells = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 2);
}

#[test]
fn seed_flag_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let hash = |seed: &str| {
        let out = dir.path().join(seed);
        let o = lrp(&["oracle-check", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash("1"), hash("2"));
}
