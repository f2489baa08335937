//! Weight-importance criteria and their moving-average smoothing.
//!
//! The central estimator reconstructs the gradient of the adapter product
//! `B·A` from the factor gradients alone:
//!
//! ```text
//! Ĝ = ∂L/∂B · A + B · ∂L/∂A − ∂L/∂B · ∂L/∂A
//! ```
//!
//! which is, up to the learning rate, the change `B_t A_t − B_{t+1} A_{t+1}`
//! under one plain SGD step. The score of a weight is then the squared
//! first-order loss change from zeroing it, `(Ĝ_ij · W_ij)²`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::lora::{AdapterMode, LoraModule};
use crate::tensor::Tensor;

/// Scoring rule used by a pruning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Product gradient reconstructed from adapter gradients.
    LoraGrad,
    /// Exact `∂L/∂W` of the composite weight, with adapter tuning.
    ExactGrad,
    /// Exact first-order Taylor score with full fine-tuning.
    Taylor,
    /// `|W|` with full fine-tuning.
    Magnitude,
    /// `|W|` with adapter tuning.
    MagnitudeLora,
    /// Accumulated `−W ⊙ ∂L/∂W` with full fine-tuning.
    Movement,
    /// Fixed uniform random scores with adapter tuning.
    Random,
}

/// What a run trains while it prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tuning {
    Lora,
    Full,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::LoraGrad,
        Criterion::ExactGrad,
        Criterion::Taylor,
        Criterion::Magnitude,
        Criterion::MagnitudeLora,
        Criterion::Movement,
        Criterion::Random,
    ];

    pub fn default_tuning(self) -> Tuning {
        match self {
            Criterion::Taylor | Criterion::Magnitude | Criterion::Movement => Tuning::Full,
            _ => Tuning::Lora,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::LoraGrad => "lora-grad",
            Criterion::ExactGrad => "exact-grad",
            Criterion::Taylor => "taylor",
            Criterion::Magnitude => "magnitude",
            Criterion::MagnitudeLora => "magnitude-lora",
            Criterion::Movement => "movement",
            Criterion::Random => "random",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown criterion `{s}`")))
    }
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tuning::Lora => "lora",
            Tuning::Full => "full",
        })
    }
}

impl FromStr for Tuning {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Tuning::Lora),
            "full" => Ok(Tuning::Full),
            other => Err(LabError::Config(format!("unknown tuning `{other}`"))),
        }
    }
}

/// Scoring of sequential adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqVariant {
    /// `(Ĝ_ij · w0_ij · W_ij)²`; square layers only.
    Literal,
    /// `((Ĝ·W0)_ij · W_ij)²`; any shape.
    Chain,
}

impl FromStr for SeqVariant {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SeqVariant::Literal),
            "chain" => Ok(SeqVariant::Chain),
            other => Err(LabError::Config(format!("unknown sequential variant `{other}`"))),
        }
    }
}

impl fmt::Display for SeqVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeqVariant::Literal => "literal",
            SeqVariant::Chain => "chain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaMode {
    /// `Ī_t = λ Ī_{t−1} + (1−λ) Î_t`.
    Recursive,
    /// `Ī_t = λ Î_{t−1} + (1−λ) Î_t`.
    Literal,
}

impl FromStr for EmaMode {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(EmaMode::Recursive),
            "literal" => Ok(EmaMode::Literal),
            other => Err(LabError::Config(format!("unknown ema mode `{other}`"))),
        }
    }
}

impl fmt::Display for EmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmaMode::Recursive => "recursive",
            EmaMode::Literal => "literal",
        })
    }
}

/// `Ĝ = G_B·A + B·G_A − G_B·G_A`, built from three rank-r products.
pub fn estimate_product_gradient(a: &Tensor, b: &Tensor, grad_a: &Tensor, grad_b: &Tensor) -> Result<Tensor> {
    if grad_a.shape() != a.shape() {
        return Err(LabError::dim("estimate_product_gradient", a.shape(), grad_a.shape()));
    }
    if grad_b.shape() != b.shape() {
        return Err(LabError::dim("estimate_product_gradient", b.shape(), grad_b.shape()));
    }
    let t1 = grad_b.matmul(a)?;
    let t2 = b.matmul(grad_a)?;
    let t3 = grad_b.matmul(grad_a)?;
    t1.add(&t2)?.sub(&t3)
}

/// [`estimate_product_gradient`] using the gradients stored on the module.
pub fn estimate_from_module(m: &LoraModule) -> Result<Tensor> {
    let missing = || LabError::Usage("adapter gradients are missing; run backward first".into());
    let ga = m.a.grad_tensor().ok_or_else(missing)?;
    let gb = m.b.grad_tensor().ok_or_else(missing)?;
    estimate_product_gradient(&m.a, &m.b, &ga, &gb)
}

/// `Î_ij = (Ĝ_ij · ((BA)_ij + w0_ij))²` for a parallel adapter.
pub fn importance_parallel(m: &LoraModule, g_hat: &Tensor) -> Result<Tensor> {
    if m.mode() != AdapterMode::Parallel {
        return Err(LabError::Usage("parallel importance on a sequential adapter".into()));
    }
    let w = m.base().add(&m.product())?;
    g_hat.zip_with(&w, "importance_parallel", |g, w| (g * w).powi(2))
}

/// Importance for a sequential adapter `W = (BA + I)·W0`, where `Ĝ` is the
/// `d×d` estimate of `∂L/∂(BA)`.
pub fn importance_sequential(m: &LoraModule, g_hat: &Tensor, variant: SeqVariant) -> Result<Tensor> {
    if m.mode() != AdapterMode::Sequential {
        return Err(LabError::Usage("sequential importance on a parallel adapter".into()));
    }
    let (d, k) = m.shape();
    if g_hat.shape() != (d, d) {
        return Err(LabError::dim("importance_sequential", (d, d), g_hat.shape()));
    }
    let w = m.composite();
    match variant {
        SeqVariant::Literal => {
            if d != k {
                return Err(LabError::Config(format!(
                    "literal sequential scoring needs a square layer, got {d}x{k}"
                )));
            }
            let gw0 = g_hat.hadamard(m.base())?;
            gw0.zip_with(&w, "importance_sequential", |g, w| (g * w).powi(2))
        }
        SeqVariant::Chain => {
            let g_w = g_hat.matmul(m.base())?;
            g_w.zip_with(&w, "importance_sequential", |g, w| (g * w).powi(2))
        }
    }
}

/// `Î_ij = (∂L/∂W_ij · W_ij)²`.
pub fn importance_taylor_exact(w: &Tensor, grad_w: &Tensor) -> Result<Tensor> {
    grad_w.zip_with(w, "importance_taylor_exact", |g, w| (g * w).powi(2))
}

pub fn importance_magnitude(w: &Tensor) -> Tensor {
    w.map(f64::abs)
}

/// Uniform `[0, 1)` scores, reproducible per seed.
pub fn importance_random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(rows, cols, &mut rng)
}

/// Scores kept for one prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    /// Latest instantaneous score `Î_t`.
    pub inst: Tensor,
    /// Smoothed score `Ī_t` used for ranking.
    pub smooth: Tensor,
    /// Movement accumulator.
    pub mvp_acc: Tensor,
    prev_inst: Option<Tensor>,
}

impl LayerImportance {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            inst: Tensor::zeros(rows, cols),
            smooth: Tensor::zeros(rows, cols),
            mvp_acc: Tensor::zeros(rows, cols),
            prev_inst: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    pub layers: Vec<LayerImportance>,
    /// Number of EMA updates applied per layer so far.
    pub steps: Vec<u64>,
    lambda: f64,
    mode: EmaMode,
}

impl ImportanceState {
    /// One entry per prunable layer shape.
    pub fn new(shapes: &[(usize, usize)], lambda: f64, mode: EmaMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LabError::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self {
            layers: shapes.iter().map(|&(r, c)| LayerImportance::new(r, c)).collect(),
            steps: vec![0; shapes.len()],
            lambda,
            mode,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> EmaMode {
        self.mode
    }

    /// Folds a new instantaneous score into the moving average of `layer`.
    /// The first update copies the score.
    pub fn ema_update(&mut self, layer: usize, inst_new: Tensor) -> Result<()> {
        let lam = self.lambda;
        let entry = &mut self.layers[layer];
        if inst_new.shape() != entry.smooth.shape() {
            return Err(LabError::dim("ema_update", entry.smooth.shape(), inst_new.shape()));
        }
        let smooth = if self.steps[layer] == 0 {
            inst_new.clone()
        } else {
            let history = match self.mode {
                EmaMode::Recursive => &entry.smooth,
                EmaMode::Literal => entry.prev_inst.as_ref().unwrap_or(&entry.inst),
            };
            history.zip_with(&inst_new, "ema_update", |h, c| lam * h + (1.0 - lam) * c)?
        };
        entry.prev_inst = Some(inst_new.clone());
        entry.inst = inst_new;
        entry.smooth = smooth;
        self.steps[layer] += 1;
        Ok(())
    }

    /// `acc ← acc − ∂L/∂W ⊙ W`; the accumulator is also the ranking score.
    pub fn movement_update(&mut self, layer: usize, w: &Tensor, grad_w: &Tensor) -> Result<()> {
        let entry = &mut self.layers[layer];
        let step = grad_w.hadamard(w)?;
        entry.mvp_acc = entry.mvp_acc.sub(&step)?;
        entry.inst = step.scale(-1.0);
        entry.smooth = entry.mvp_acc.clone();
        self.steps[layer] += 1;
        Ok(())
    }
}
