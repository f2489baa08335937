//! Small classifiers assembled from adaptable linear layers: a multilayer
//! perceptron and a single-head transformer block with mean pooling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{LabError, Result};
use crate::lora::{AdapterMode, DenseWeight, LoraModule, Mask, WeightVars};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

impl FromStr for Activation {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(LabError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Role of a linear layer, used to pick pruning targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Attention,
    Ffn,
    Head,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Attention => "attention",
            LayerKind::Ffn => "ffn",
            LayerKind::Head => "head",
        })
    }
}

impl FromStr for LayerKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(LayerKind::Attention),
            "ffn" => Ok(LayerKind::Ffn),
            "head" => Ok(LayerKind::Head),
            other => Err(LabError::Config(format!("unknown layer kind `{other}`"))),
        }
    }
}

/// Which layers receive adapters and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSet {
    All,
    Ffn,
    Attention,
}

impl TargetSet {
    pub fn includes(self, kind: LayerKind) -> bool {
        match (self, kind) {
            (_, LayerKind::Head) => false,
            (TargetSet::All, _) => true,
            (TargetSet::Ffn, LayerKind::Ffn) => true,
            (TargetSet::Attention, LayerKind::Attention) => true,
            _ => false,
        }
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSet::All => "all",
            TargetSet::Ffn => "ffn",
            TargetSet::Attention => "attention",
        })
    }
}

impl FromStr for TargetSet {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TargetSet::All),
            "ffn" => Ok(TargetSet::Ffn),
            "attention" => Ok(TargetSet::Attention),
            other => Err(LabError::Config(format!("unknown target set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// One block: single-head self-attention and a two-layer feed-forward
    /// net, each with a residual connection and layer norm; the token
    /// outputs are mean-pooled into the classifier head. Inputs of width
    /// `tokens·width` are read as `tokens` rows of `width` features.
    Transformer {
        tokens: usize,
        width: usize,
        ffn: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        Self {
            arch: Arch::Mlp {
                hidden: hidden.to_vec(),
                activation: Activation::Relu,
            },
            input_dim,
            classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(LabError::Config(format!(
                "model needs input_dim >= 1 and classes >= 2, got {} and {}",
                self.input_dim, self.classes
            )));
        }
        match &self.arch {
            Arch::Mlp { hidden, .. } => {
                if hidden.contains(&0) {
                    return Err(LabError::Config("hidden widths must be positive".into()));
                }
            }
            Arch::Transformer { tokens, width, ffn, .. } => {
                if tokens * width != self.input_dim || *ffn == 0 || *width == 0 {
                    return Err(LabError::Config(format!(
                        "transformer needs tokens*width == input_dim ({tokens}*{width} vs {})",
                        self.input_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(name, kind, in, out, has_bias)` for each linear layer, in order.
    pub fn layer_layout(&self) -> Vec<(String, LayerKind, usize, usize, bool)> {
        match &self.arch {
            Arch::Mlp { hidden, .. } => {
                let mut out = Vec::new();
                let mut prev = self.input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    out.push((format!("fc{i}"), LayerKind::Ffn, prev, h, true));
                    prev = h;
                }
                out.push(("head".into(), LayerKind::Head, prev, self.classes, true));
                out
            }
            Arch::Transformer { width, ffn, .. } => {
                let w = *width;
                vec![
                    ("q".into(), LayerKind::Attention, w, w, false),
                    ("k".into(), LayerKind::Attention, w, w, false),
                    ("v".into(), LayerKind::Attention, w, w, false),
                    ("o".into(), LayerKind::Attention, w, w, false),
                    ("ffn1".into(), LayerKind::Ffn, w, *ffn, true),
                    ("ffn2".into(), LayerKind::Ffn, *ffn, w, true),
                    ("head".into(), LayerKind::Head, w, self.classes, true),
                ]
            }
        }
    }

    pub fn activation(&self) -> Activation {
        match &self.arch {
            Arch::Mlp { activation, .. } | Arch::Transformer { activation, .. } => *activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Dense(DenseWeight),
    Lora(LoraModule),
}

impl LayerWeight {
    pub fn mask(&self) -> &Mask {
        match self {
            LayerWeight::Dense(d) => d.mask(),
            LayerWeight::Lora(l) => l.mask(),
        }
    }

    pub(crate) fn mask_mut(&mut self) -> &mut Mask {
        match self {
            LayerWeight::Dense(d) => d.mask_mut(),
            LayerWeight::Lora(l) => l.mask_mut(),
        }
    }

    pub fn apply_mask(&mut self, mask: Mask) -> Result<()> {
        match self {
            LayerWeight::Dense(d) => d.apply_mask(mask),
            LayerWeight::Lora(l) => l.apply_mask(mask),
        }
    }

    /// Unmasked effective weight.
    pub fn composite(&self) -> Tensor {
        match self {
            LayerWeight::Dense(d) => d.w.detached(),
            LayerWeight::Lora(l) => l.composite(),
        }
    }

    pub fn merge(&self) -> Tensor {
        match self {
            LayerWeight::Dense(d) => d.merge(),
            LayerWeight::Lora(l) => l.merge(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask().shape()
    }

    fn on_tape(&self, tape: &mut Tape) -> Result<WeightVars> {
        match self {
            LayerWeight::Dense(d) => d.weight_on_tape(tape),
            LayerWeight::Lora(l) => l.weight_on_tape(tape),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub kind: LayerKind,
    pub weight: LayerWeight,
    pub bias: Option<Tensor>,
    /// Whether this layer takes part in pruning.
    pub prunable: bool,
}

impl Linear {
    pub fn sparsity(&self) -> f64 {
        self.weight.mask().sparsity()
    }

    pub fn lora(&self) -> Option<&LoraModule> {
        match &self.weight {
            LayerWeight::Lora(l) => Some(l),
            LayerWeight::Dense(_) => None,
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: WeightVars,
    pub bias: Option<Var>,
}

/// Per-layer gradient information after one backward pass.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub loss: f64,
    /// Exact `∂L/∂W` of each layer's unmasked composite weight, when the
    /// layer is trainable in any way.
    pub composite: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Linear>,
}

impl Model {
    /// Random initialisation, all weights trainable (pre-training setup).
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let act = spec.activation();
        let layers = spec
            .layer_layout()
            .into_iter()
            .map(|(name, kind, d_in, d_out, has_bias)| {
                let gain = if act == Activation::Relu && kind != LayerKind::Head { 2.0 } else { 1.0 };
                let std = (gain / d_in as f64).sqrt();
                let w = Tensor::randn(d_in, d_out, std, rng).trainable();
                Linear {
                    name,
                    kind,
                    weight: LayerWeight::Dense(DenseWeight::new(w)),
                    bias: has_bias.then(|| Tensor::zeros(1, d_out).trainable()),
                    prunable: false,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Freezes the backbone and puts adapters on every layer in `targets`;
    /// those layers become prunable. The classifier head stays trainable.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        mode: AdapterMode,
        targets: TargetSet,
        rng: &mut R,
    ) -> Result<()> {
        let mut any = false;
        for layer in &mut self.layers {
            let is_head = layer.kind == LayerKind::Head;
            if let Some(b) = &mut layer.bias {
                b.requires_grad = is_head;
                b.zero_grad();
            }
            let w = layer.weight.merge();
            if targets.includes(layer.kind) {
                let mut m = LoraModule::attach(&w, rank, mode, rng)?;
                m.apply_mask(layer.weight.mask().clone())?;
                layer.weight = LayerWeight::Lora(m);
                layer.prunable = true;
                any = true;
            } else {
                let w = if is_head { w.trainable() } else { w };
                layer.weight = LayerWeight::Dense(DenseWeight::with_mask(w, layer.weight.mask().clone())?);
                layer.prunable = false;
            }
        }
        if !any {
            return Err(LabError::Config(format!("target set `{targets}` selects no layer")));
        }
        Ok(())
    }

    /// Full fine-tuning setup: every weight and bias trainable, layers in
    /// `targets` prunable.
    pub fn prepare_full(&mut self, targets: TargetSet) -> Result<()> {
        let mut any = false;
        for layer in &mut self.layers {
            let w = layer.weight.merge().trainable();
            let mask = layer.weight.mask().clone();
            layer.weight = LayerWeight::Dense(DenseWeight::with_mask(w, mask)?);
            if let Some(b) = &mut layer.bias {
                b.requires_grad = true;
            }
            layer.prunable = targets.includes(layer.kind);
            any |= layer.prunable;
        }
        if !any {
            return Err(LabError::Config(format!("target set `{targets}` selects no layer")));
        }
        Ok(())
    }

    pub fn prunable(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable).collect()
    }

    /// Fraction of pruned weights over all prunable layers.
    pub fn sparsity(&self) -> f64 {
        let (z, n) = self
            .layers
            .iter()
            .filter(|l| l.prunable)
            .fold((0, 0), |(z, n), l| (z + l.weight.mask().zeros(), n + l.weight.mask().len()));
        if n == 0 { 0.0 } else { z as f64 / n as f64 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        if x.cols() != self.spec.input_dim {
            return Err(LabError::dim("model input", x.shape(), (x.rows(), self.spec.input_dim)));
        }
        let mut tape = Tape::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let weight = l.weight.on_tape(&mut tape)?;
            let bias = l.bias.as_ref().map(|b| tape.leaf(b));
            layers.push(LayerVars { weight, bias });
        }
        let act = self.spec.activation();
        let logits = match &self.spec.arch {
            Arch::Mlp { .. } => {
                let mut h = tape.constant(x.detached());
                let last = layers.len() - 1;
                for (i, lv) in layers.iter().enumerate() {
                    h = linear(&mut tape, h, lv)?;
                    if i < last {
                        h = activate(&mut tape, h, act)?;
                    }
                }
                h
            }
            Arch::Transformer { tokens, width, .. } => {
                let [q, k, v, o, f1, f2, head] = layers[..] else {
                    return Err(LabError::Invariant("transformer layer count".into()));
                };
                let scale = 1.0 / (*width as f64).sqrt();
                let mut pooled = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let xs = tape.constant(x.row_as_matrix(r, *tokens, *width)?);
                    let qs = linear(&mut tape, xs, &q)?;
                    let ks = linear(&mut tape, xs, &k)?;
                    let vs = linear(&mut tape, xs, &v)?;
                    let kt = tape.transpose(ks)?;
                    let scores = tape.matmul(qs, kt)?;
                    let scores = tape.scale(scores, scale)?;
                    let attn = tape.softmax_rows(scores)?;
                    let mixed = tape.matmul(attn, vs)?;
                    let proj = linear(&mut tape, mixed, &o)?;
                    let res = tape.add(xs, proj)?;
                    let h = tape.layer_norm(res)?;
                    let f = linear(&mut tape, h, &f1)?;
                    let f = activate(&mut tape, f, act)?;
                    let f = linear(&mut tape, f, &f2)?;
                    let res2 = tape.add(h, f)?;
                    let h2 = tape.layer_norm(res2)?;
                    pooled.push(tape.mean_rows(h2)?);
                }
                let pooled = tape.concat_rows(&pooled)?;
                linear(&mut tape, pooled, &head)?
            }
        };
        Ok(Forward { tape, logits, layers })
    }

    /// Logits without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.forward(x)?;
        Ok(f.tape.value(f.logits).detached())
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut f = self.forward(x)?;
        let l = f.tape.softmax_cross_entropy(f.logits, labels)?;
        Ok(f.tape.value(l).get(0, 0))
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?.argmax_rows();
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Forward, cross-entropy and backward. Gradients are added to the
    /// trainable tensors (callers clear them with [`Model::zero_grad`]).
    pub fn backward_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepGrads> {
        let mut f = self.forward(x)?;
        let loss_var = f.tape.softmax_cross_entropy(f.logits, labels)?;
        let loss = f.tape.value(loss_var).get(0, 0);
        if !loss.is_finite() {
            return Err(LabError::NonFinite(format!("loss {loss}")));
        }
        let grads = f.tape.backward(loss_var)?;
        self.absorb(&f, &grads)?;
        let composite = f
            .layers
            .iter()
            .map(|lv| grads.get(lv.weight.composite).map(Tensor::detached))
            .collect();
        Ok(StepGrads { loss, composite })
    }

    fn absorb(&mut self, f: &Forward, grads: &Gradients) -> Result<()> {
        for (layer, lv) in self.layers.iter_mut().zip(&f.layers) {
            match &mut layer.weight {
                LayerWeight::Dense(d) => {
                    if d.w.requires_grad {
                        grads.accumulate_into(lv.weight.dense.expect("dense var"), &mut d.w)?;
                    }
                }
                LayerWeight::Lora(m) => {
                    grads.accumulate_into(lv.weight.a.expect("A var"), &mut m.a)?;
                    grads.accumulate_into(lv.weight.b.expect("B var"), &mut m.b)?;
                }
            }
            if let (Some(b), Some(bv)) = (&mut layer.bias, lv.bias) {
                if b.requires_grad {
                    grads.accumulate_into(bv, b)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.weight {
                LayerWeight::Dense(d) => d.w.zero_grad(),
                LayerWeight::Lora(m) => m.zero_grad(),
            }
            if let Some(b) = &mut layer.bias {
                b.zero_grad();
            }
        }
    }

    /// All trainable tensors, in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.weight {
                LayerWeight::Dense(d) => {
                    if d.w.requires_grad {
                        out.push(&mut d.w);
                    }
                }
                LayerWeight::Lora(m) => {
                    out.push(&mut m.a);
                    out.push(&mut m.b);
                }
            }
            if let Some(b) = &mut layer.bias {
                if b.requires_grad {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            match &layer.weight {
                LayerWeight::Dense(d) if d.w.requires_grad => n += d.w.len(),
                LayerWeight::Dense(_) => {}
                LayerWeight::Lora(m) => n += m.a.len() + m.b.len(),
            }
            if let Some(b) = &layer.bias {
                if b.requires_grad {
                    n += b.len();
                }
            }
        }
        n
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        let mut params = self.params_mut();
        crate::tensor::sgd_step(&mut params, lr)
    }

    /// Re-parameterised copy: every weight folded into a frozen dense
    /// `W ⊙ mask`, masks kept for bookkeeping.
    pub fn merged(&self) -> Model {
        let layers = self
            .layers
            .iter()
            .map(|l| Linear {
                name: l.name.clone(),
                kind: l.kind,
                weight: LayerWeight::Dense(
                    DenseWeight::with_mask(l.weight.merge(), l.weight.mask().clone()).expect("shape"),
                ),
                bias: l.bias.as_ref().map(Tensor::detached),
                prunable: l.prunable,
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
        }
    }
}

fn linear(tape: &mut Tape, x: Var, lv: &LayerVars) -> Result<Var> {
    let z = tape.matmul(x, lv.weight.masked)?;
    match lv.bias {
        Some(b) => tape.add_row(z, b),
        None => Ok(z),
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}
