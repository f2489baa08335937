//! Experiment configuration: `key = value` lines grouped under `[section]`
//! headers, `#` starts a comment. Keys before the first header belong to the
//! top level. Every key has a default, so an empty file is a valid config.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::criteria::{Criterion, EmaMode, SeqVariant};
use crate::data::{DataKind, DataSpec};
use crate::error::{LabError, Result};
use crate::lora::AdapterMode;
use crate::model::{Activation, Arch, ModelSpec, TargetSet};
use crate::pruner::{PruneConfig, Scope};

/// How a compare cell combines fine-tuning and pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Prune progressively inside the fine-tuning run.
    Joint,
    /// Fine-tune first, then prune once to the target.
    OneShot,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Joint => "joint",
            Strategy::OneShot => "one-shot",
        })
    }
}

impl FromStr for Strategy {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "one-shot" => Ok(Strategy::OneShot),
            other => Err(LabError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Source task and backbone pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseConfig {
    pub kind: DataKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub teacher_rank: usize,
    pub arch: String,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub tokens: usize,
    pub width: usize,
    pub ffn: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// File name of the trained backbone inside the output directory.
    pub checkpoint: String,
}

/// Downstream task: the source task moved by `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub n: usize,
    pub noise: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub mode: AdapterMode,
    pub targets: TargetSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSection {
    pub criterion: Criterion,
    pub target_sparsity: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub start: f64,
    pub end: f64,
    /// Iterations between mask updates; `None` means one epoch.
    pub interval: Option<usize>,
    pub ema: EmaMode,
    pub scope: Scope,
    pub seq_variant: SeqVariant,
    pub strategy: Strategy,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub criteria: Vec<Criterion>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Architectures whose composite gradients are checked end to end.
    pub models: Vec<String>,
    pub gradcheck_seeds: usize,
    pub sgd_instances: usize,
    pub merge_cases: usize,
    pub chain_instances: usize,
    pub loo_seeds: usize,
    pub loo_budget: usize,
    pub min_spearman: f64,
    /// Perturb `∂L/∂A` before the SGD identity check.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Checkpoint file name inside the output directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub base: BaseConfig,
    pub task: TaskConfig,
    pub lora: LoraConfig,
    pub prune: PruneSection,
    pub compare: CompareConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            base: BaseConfig {
                kind: DataKind::Blobs,
                n: 1200,
                dim: 16,
                classes: 6,
                noise: 2.5,
                data_seed: 11,
                teacher_rank: 2,
                arch: "mlp".into(),
                hidden: vec![8],
                activation: Activation::Relu,
                tokens: 2,
                width: 8,
                ffn: 16,
                epochs: 20,
                lr: 0.05,
                batch_size: 32,
                checkpoint: "base.lpl".into(),
            },
            task: TaskConfig {
                n: 1200,
                noise: 2.5,
                shift: 1.0,
            },
            lora: LoraConfig {
                rank: 4,
                mode: AdapterMode::Parallel,
                targets: TargetSet::All,
            },
            prune: PruneSection {
                criterion: Criterion::LoraGrad,
                target_sparsity: 0.5,
                lambda: 0.9,
                epochs: 10,
                start: 0.1,
                end: 0.7,
                interval: None,
                ema: EmaMode::Recursive,
                scope: Scope::PerLayer,
                seq_variant: SeqVariant::Chain,
                strategy: Strategy::Joint,
                lr: 0.05,
                batch_size: 32,
            },
            compare: CompareConfig {
                criteria: vec![Criterion::LoraGrad, Criterion::Random],
                sparsities: vec![0.5],
                seeds: vec![0, 1, 2, 3, 4],
                strategies: vec![Strategy::Joint],
            },
            oracle: OracleConfig {
                models: vec!["mlp".into(), "transformer".into()],
                gradcheck_seeds: 100,
                sgd_instances: 50,
                merge_cases: 100,
                chain_instances: 50,
                loo_seeds: 3,
                loo_budget: 512,
                min_spearman: 0.5,
                corrupt_gradient: false,
            },
            eval: EvalConfig {
                checkpoint: "pruned-merged.lpl".into(),
            },
        }
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Parsed lines keyed by `(section, key)`; consumed as fields are read so
/// that leftovers can be reported as unknown.
struct Raw {
    entries: BTreeMap<(String, String), Entry>,
}

const SECTIONS: [&str; 7] = ["base", "task", "lora", "prune", "compare", "oracle", "eval"];

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| LabError::Config(format!("line {no}: unterminated section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(LabError::Config(format!("line {no}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {no}: expected `key = value`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(LabError::Config(format!("line {no}: empty key")));
            }
            let entry = Entry {
                value: v.trim().to_string(),
                line: no,
            };
            if let Some(prev) = entries.insert((section.clone(), key.to_string()), entry) {
                return Err(LabError::Config(format!(
                    "line {no}: `{}` already set on line {}",
                    qualified(&section, key),
                    prev.line
                )));
            }
        }
        Ok(Self { entries })
    }

    fn take<T>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(e) = self.entries.remove(&(section.to_string(), key.to_string())) {
            *slot = e.value.parse().map_err(|err| {
                LabError::Config(format!(
                    "line {}: `{}` = `{}`: {err}",
                    e.line,
                    qualified(section, key),
                    e.value
                ))
            })?;
        }
        Ok(())
    }

    fn take_list<T>(&mut self, section: &str, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(e) = self.entries.remove(&(section.to_string(), key.to_string())) {
            let items: std::result::Result<Vec<T>, _> = e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect();
            *slot = items.map_err(|err| {
                LabError::Config(format!("line {}: `{}`: {err}", e.line, qualified(section, key)))
            })?;
        }
        Ok(())
    }

    fn take_interval(&mut self, slot: &mut Option<usize>) -> Result<()> {
        if let Some(e) = self.entries.remove(&("prune".to_string(), "interval".to_string())) {
            *slot = match e.value.as_str() {
                "epoch" => None,
                v => Some(v.parse().map_err(|_| {
                    LabError::Config(format!(
                        "line {}: `prune.interval` must be `epoch` or an iteration count",
                        e.line
                    ))
                })?),
            };
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(((s, k), e)) = self.entries.into_iter().next() {
            return Err(LabError::Config(format!("line {}: unknown key `{}`", e.line, qualified(&s, &k))));
        }
        Ok(())
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Raw::parse(text)?;
        let mut c = Config::default();
        raw.take("", "seed", &mut c.seed)?;

        let b = &mut c.base;
        raw.take("base", "kind", &mut b.kind)?;
        raw.take("base", "n", &mut b.n)?;
        raw.take("base", "dim", &mut b.dim)?;
        raw.take("base", "classes", &mut b.classes)?;
        raw.take("base", "noise", &mut b.noise)?;
        raw.take("base", "data_seed", &mut b.data_seed)?;
        raw.take("base", "teacher_rank", &mut b.teacher_rank)?;
        raw.take("base", "arch", &mut b.arch)?;
        raw.take_list("base", "hidden", &mut b.hidden)?;
        raw.take("base", "activation", &mut b.activation)?;
        raw.take("base", "tokens", &mut b.tokens)?;
        raw.take("base", "width", &mut b.width)?;
        raw.take("base", "ffn", &mut b.ffn)?;
        raw.take("base", "epochs", &mut b.epochs)?;
        raw.take("base", "lr", &mut b.lr)?;
        raw.take("base", "batch_size", &mut b.batch_size)?;
        raw.take("base", "checkpoint", &mut b.checkpoint)?;

        raw.take("task", "n", &mut c.task.n)?;
        raw.take("task", "noise", &mut c.task.noise)?;
        raw.take("task", "shift", &mut c.task.shift)?;

        raw.take("lora", "rank", &mut c.lora.rank)?;
        raw.take("lora", "mode", &mut c.lora.mode)?;
        raw.take("lora", "targets", &mut c.lora.targets)?;

        let p = &mut c.prune;
        raw.take("prune", "criterion", &mut p.criterion)?;
        raw.take("prune", "target_sparsity", &mut p.target_sparsity)?;
        raw.take("prune", "lambda", &mut p.lambda)?;
        raw.take("prune", "epochs", &mut p.epochs)?;
        raw.take("prune", "start", &mut p.start)?;
        raw.take("prune", "end", &mut p.end)?;
        raw.take_interval(&mut p.interval)?;
        raw.take("prune", "ema", &mut p.ema)?;
        raw.take("prune", "scope", &mut p.scope)?;
        raw.take("prune", "seq_variant", &mut p.seq_variant)?;
        raw.take("prune", "strategy", &mut p.strategy)?;
        raw.take("prune", "lr", &mut p.lr)?;
        raw.take("prune", "batch_size", &mut p.batch_size)?;

        raw.take_list("compare", "criteria", &mut c.compare.criteria)?;
        raw.take_list("compare", "sparsities", &mut c.compare.sparsities)?;
        raw.take_list("compare", "seeds", &mut c.compare.seeds)?;
        raw.take_list("compare", "strategies", &mut c.compare.strategies)?;

        let o = &mut c.oracle;
        raw.take_list("oracle", "models", &mut o.models)?;
        raw.take("oracle", "gradcheck_seeds", &mut o.gradcheck_seeds)?;
        raw.take("oracle", "sgd_instances", &mut o.sgd_instances)?;
        raw.take("oracle", "merge_cases", &mut o.merge_cases)?;
        raw.take("oracle", "chain_instances", &mut o.chain_instances)?;
        raw.take("oracle", "loo_seeds", &mut o.loo_seeds)?;
        raw.take("oracle", "loo_budget", &mut o.loo_budget)?;
        raw.take("oracle", "min_spearman", &mut o.min_spearman)?;
        raw.take("oracle", "corrupt_gradient", &mut o.corrupt_gradient)?;

        raw.take("eval", "checkpoint", &mut c.eval.checkpoint)?;
        raw.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks cross-field constraints that single-key parsing cannot see.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        self.model_spec(0)?.validate()?;
        if self.base.epochs == 0 || self.prune.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.base.lr.is_finite() && self.base.lr > 0.0) {
            return bad(format!("base.lr {} must be positive", self.base.lr));
        }
        if !self.task.shift.is_finite() || !self.task.noise.is_finite() || self.task.noise < 0.0 {
            return bad("task.shift must be finite and task.noise >= 0".into());
        }
        if self.lora.rank == 0 {
            return bad("lora.rank must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.prune.target_sparsity) {
            return bad(format!("prune.target_sparsity {} outside [0, 1)", self.prune.target_sparsity));
        }
        self.prune_config(self.prune.criterion, self.prune.target_sparsity, 0, 1)?.validate()?;
        for &s in &self.compare.sparsities {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("compare.sparsities entry {s} outside [0, 1)"));
            }
        }
        for m in &self.oracle.models {
            if m != "mlp" && m != "transformer" {
                return bad(format!("oracle.models entry `{m}` is neither mlp nor transformer"));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, seed: u64) -> Result<ModelSpec> {
        let b = &self.base;
        let arch = match b.arch.as_str() {
            "mlp" => Arch::Mlp {
                hidden: b.hidden.clone(),
                activation: b.activation,
            },
            "transformer" => Arch::Transformer {
                tokens: b.tokens,
                width: b.width,
                ffn: b.ffn,
                activation: b.activation,
            },
            other => return Err(LabError::Config(format!("base.arch `{other}` is neither mlp nor transformer"))),
        };
        Ok(ModelSpec {
            arch,
            input_dim: b.dim,
            classes: b.classes,
            seed,
        })
    }

    pub fn base_data(&self) -> DataSpec {
        let b = &self.base;
        let mut d = DataSpec::new(b.kind, b.n, b.dim, b.classes, b.data_seed);
        d.noise = b.noise;
        d.teacher_rank = b.teacher_rank;
        d
    }

    pub fn task_data(&self) -> DataSpec {
        let mut d = self.base_data();
        d.n = self.task.n;
        d.noise = self.task.noise;
        d.shift = self.task.shift;
        d
    }

    /// Pruner settings for one run; `train_len` sizes epochs in iterations.
    pub fn prune_config(&self, criterion: Criterion, sparsity: f64, seed: u64, train_len: usize) -> Result<PruneConfig> {
        let p = &self.prune;
        let per_epoch = train_len.max(1).div_ceil(p.batch_size.max(1));
        Ok(PruneConfig {
            target_sparsity: sparsity,
            lambda: p.lambda,
            total_iterations: p.epochs * per_epoch,
            prune_start_frac: p.start,
            prune_end_frac: p.end,
            prune_interval: p.interval.unwrap_or(per_epoch),
            criterion,
            ema_mode: p.ema,
            scope: p.scope,
            seq_variant: p.seq_variant,
            seed,
            lr: p.lr,
            batch_size: p.batch_size,
        })
    }

    /// Every field, defaults included, in a form [`Config::parse`] reads
    /// back to an equal value.
    pub fn canonical(&self) -> String {
        fn list<T: fmt::Display>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
        }
        let mut s = String::new();
        let b = &self.base;
        let p = &self.prune;
        let o = &self.oracle;
        let w = &mut s;
        writeln!(w, "seed = {}", self.seed).unwrap();
        writeln!(w, "\n[base]").unwrap();
        writeln!(w, "kind = {}", b.kind).unwrap();
        writeln!(w, "n = {}", b.n).unwrap();
        writeln!(w, "dim = {}", b.dim).unwrap();
        writeln!(w, "classes = {}", b.classes).unwrap();
        writeln!(w, "noise = {:?}", b.noise).unwrap();
        writeln!(w, "data_seed = {}", b.data_seed).unwrap();
        writeln!(w, "teacher_rank = {}", b.teacher_rank).unwrap();
        writeln!(w, "arch = {}", b.arch).unwrap();
        writeln!(w, "hidden = {}", list(&b.hidden)).unwrap();
        writeln!(w, "activation = {}", b.activation).unwrap();
        writeln!(w, "tokens = {}", b.tokens).unwrap();
        writeln!(w, "width = {}", b.width).unwrap();
        writeln!(w, "ffn = {}", b.ffn).unwrap();
        writeln!(w, "epochs = {}", b.epochs).unwrap();
        writeln!(w, "lr = {:?}", b.lr).unwrap();
        writeln!(w, "batch_size = {}", b.batch_size).unwrap();
        writeln!(w, "checkpoint = {}", b.checkpoint).unwrap();
        writeln!(w, "\n[task]").unwrap();
        writeln!(w, "n = {}", self.task.n).unwrap();
        writeln!(w, "noise = {:?}", self.task.noise).unwrap();
        writeln!(w, "shift = {:?}", self.task.shift).unwrap();
        writeln!(w, "\n[lora]").unwrap();
        writeln!(w, "rank = {}", self.lora.rank).unwrap();
        writeln!(w, "mode = {}", self.lora.mode).unwrap();
        writeln!(w, "targets = {}", self.lora.targets).unwrap();
        writeln!(w, "\n[prune]").unwrap();
        writeln!(w, "criterion = {}", p.criterion).unwrap();
        writeln!(w, "target_sparsity = {:?}", p.target_sparsity).unwrap();
        writeln!(w, "lambda = {:?}", p.lambda).unwrap();
        writeln!(w, "epochs = {}", p.epochs).unwrap();
        writeln!(w, "start = {:?}", p.start).unwrap();
        writeln!(w, "end = {:?}", p.end).unwrap();
        match p.interval {
            None => writeln!(w, "interval = epoch").unwrap(),
            Some(n) => writeln!(w, "interval = {n}").unwrap(),
        }
        writeln!(w, "ema = {}", p.ema).unwrap();
        writeln!(w, "scope = {}", p.scope).unwrap();
        writeln!(w, "seq_variant = {}", p.seq_variant).unwrap();
        writeln!(w, "strategy = {}", p.strategy).unwrap();
        writeln!(w, "lr = {:?}", p.lr).unwrap();
        writeln!(w, "batch_size = {}", p.batch_size).unwrap();
        writeln!(w, "\n[compare]").unwrap();
        writeln!(w, "criteria = {}", list(&self.compare.criteria)).unwrap();
        let sp: Vec<String> = self.compare.sparsities.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "sparsities = {}", sp.join(", ")).unwrap();
        writeln!(w, "seeds = {}", list(&self.compare.seeds)).unwrap();
        writeln!(w, "strategies = {}", list(&self.compare.strategies)).unwrap();
        writeln!(w, "\n[oracle]").unwrap();
        writeln!(w, "models = {}", list(&o.models)).unwrap();
        writeln!(w, "gradcheck_seeds = {}", o.gradcheck_seeds).unwrap();
        writeln!(w, "sgd_instances = {}", o.sgd_instances).unwrap();
        writeln!(w, "merge_cases = {}", o.merge_cases).unwrap();
        writeln!(w, "chain_instances = {}", o.chain_instances).unwrap();
        writeln!(w, "loo_seeds = {}", o.loo_seeds).unwrap();
        writeln!(w, "loo_budget = {}", o.loo_budget).unwrap();
        writeln!(w, "min_spearman = {:?}", o.min_spearman).unwrap();
        writeln!(w, "corrupt_gradient = {}", o.corrupt_gradient).unwrap();
        writeln!(w, "\n[eval]").unwrap();
        writeln!(w, "checkpoint = {}", self.eval.checkpoint).unwrap();
        s
    }

    /// SHA-256 of [`Config::canonical`], hex encoded. Two configs that parse
    /// to the same values share a hash regardless of layout or comments.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
