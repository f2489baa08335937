//! Independent ground truth for the approximations elsewhere in the crate:
//! central finite differences, exact composite-weight gradients, brute-force
//! leave-one-out importance and rank statistics.
//!
//! Only [`exact_composite_grad`] uses the tape to produce its answer, and it
//! is itself checked against finite differences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::criteria::{estimate_product_gradient, importance_taylor_exact};
use crate::data::{gen_dataset, DataKind, DataSpec, Split};
use crate::error::{LabError, Result};
use crate::lora::{AdapterMode, DenseWeight, LoraModule, Mask};
use crate::model::{LayerWeight, Model, ModelSpec, TargetSet};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Coordinates scored by [`leave_one_out_importance`] when not told
/// otherwise.
pub const LOO_BUDGET: usize = 512;

/// Denominator floor of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every coordinate of `theta`.
pub fn finite_diff_grad<F>(f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(LabError::Usage(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = theta.detached();
    let mut out = Tensor::zeros(theta.rows(), theta.cols());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::NonFinite(format!("finite difference at coordinate {i}")));
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all elements.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(LabError::dim("relative_error", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max))
}

/// `∂L/∂W` for the unmasked composite of every prunable layer, obtained by
/// re-materialising each composite as a gradient-carrying leaf in a merged
/// copy of `model`. `model` is not modified.
pub fn exact_composite_grad(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    let mut leafy = model.clone();
    for layer in &mut leafy.layers {
        let w = layer.weight.composite().trainable();
        let mask = layer.weight.mask().clone();
        layer.weight = LayerWeight::Dense(DenseWeight::with_mask(w, mask)?);
    }
    let mut f = leafy.forward(x)?;
    let loss = f.tape.softmax_cross_entropy(f.logits, labels)?;
    let grads = f.tape.backward(loss)?;
    Ok(model
        .prunable()
        .iter()
        .map(|&l| {
            let var = f.layers[l].weight.dense.expect("dense leaf");
            grads
                .get(var)
                .map(Tensor::detached)
                .unwrap_or_else(|| Tensor::zeros(model.layers[l].weight.shape().0, model.layers[l].weight.shape().1))
        })
        .collect())
}

/// Brute-force `I = (L(W) − L(W | w_ij = 0))²` for up to `budget` entries of
/// model layer `layer`, zeroing the merged weight and re-running forward.
/// Returns `(flat index, score)` pairs in index order.
pub fn leave_one_out_importance(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    layer: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let merged = model.merged();
    let base = merged.loss(x, labels)?;
    let n = merged
        .layers
        .get(layer)
        .ok_or_else(|| LabError::Usage(format!("no layer {layer}")))?
        .weight
        .shape();
    let total = n.0 * n.1;
    let mut coords: Vec<usize> = (0..total).collect();
    if budget < total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(budget);
        coords.sort_unstable();
    }
    let mut probe = merged.clone();
    let mut out = Vec::with_capacity(coords.len());
    for i in coords {
        let LayerWeight::Dense(d) = &mut probe.layers[layer].weight else {
            unreachable!("merged layers are dense")
        };
        let orig = d.w.data()[i];
        if orig == 0.0 {
            out.push((i, 0.0));
            continue;
        }
        d.w.data_mut()[i] = 0.0;
        let l = probe.loss(x, labels)?;
        let LayerWeight::Dense(d) = &mut probe.layers[layer].weight else { unreachable!() };
        d.w.data_mut()[i] = orig;
        out.push((i, (base - l).powi(2)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub spearman: f64,
    /// Overlap of the top-`k` (largest score) sets, keyed by the k-fraction
    /// formatted with two decimals.
    pub topk_overlap: BTreeMap<String, f64>,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if saa == sbb { 1.0 } else { 0.0 };
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

fn top_set(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Spearman correlation and top-k overlaps for each fraction in `ks`.
pub fn rank_stats(a: &[f64], b: &[f64], ks: &[f64]) -> Result<RankStats> {
    if a.len() != b.len() {
        return Err(LabError::Usage(format!("rank_stats over {} vs {} scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(LabError::Usage("rank_stats needs at least two scores".into()));
    }
    let spearman = pearson(&average_ranks(a), &average_ranks(b));
    let mut topk_overlap = BTreeMap::new();
    for &frac in ks {
        let k = ((frac * a.len() as f64).round() as usize).clamp(1, a.len());
        let (ta, tb) = (top_set(a, k), top_set(b, k));
        let common = ta.iter().filter(|i| tb.binary_search(i).is_ok()).count();
        topk_overlap.insert(format!("{frac:.2}"), common as f64 / k as f64);
    }
    Ok(RankStats { spearman, topk_overlap })
}

/// Result of one property in the oracle suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// `true` when `measured` must stay below `threshold`, `false` when it
    /// must reach it.
    pub upper_bound: bool,
}

impl PropertyCheck {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            upper_bound: true,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            upper_bound: false,
        }
    }

    pub fn passed(&self) -> bool {
        if !self.measured.is_finite() {
            return false;
        }
        if self.upper_bound {
            self.measured <= self.threshold
        } else {
            self.measured >= self.threshold
        }
    }
}

type OpBuilder = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable op (or small composition) for gradient checking:
/// name, input shapes, whether inputs must avoid a kink at zero, builder.
struct GradcheckCase {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    away_from_zero: bool,
    build: OpBuilder,
}

const GRADCHECK_CASES: &[GradcheckCase] = &[
    GradcheckCase { name: "matmul", shapes: &[(3, 4), (4, 2)], away_from_zero: false, build: |t, v| t.matmul(v[0], v[1]) },
    GradcheckCase { name: "hadamard", shapes: &[(3, 3), (3, 3)], away_from_zero: false, build: |t, v| t.hadamard(v[0], v[1]) },
    GradcheckCase { name: "add", shapes: &[(2, 3), (2, 3)], away_from_zero: false, build: |t, v| t.add(v[0], v[1]) },
    GradcheckCase { name: "sub", shapes: &[(2, 3), (2, 3)], away_from_zero: false, build: |t, v| t.sub(v[0], v[1]) },
    GradcheckCase { name: "add_row", shapes: &[(3, 4), (1, 4)], away_from_zero: false, build: |t, v| t.add_row(v[0], v[1]) },
    GradcheckCase { name: "scale", shapes: &[(2, 3)], away_from_zero: false, build: |t, v| t.scale(v[0], -1.7) },
    GradcheckCase { name: "relu", shapes: &[(3, 4)], away_from_zero: true, build: |t, v| t.relu(v[0]) },
    GradcheckCase { name: "gelu", shapes: &[(3, 4)], away_from_zero: false, build: |t, v| t.gelu(v[0]) },
    GradcheckCase { name: "layer_norm", shapes: &[(3, 5)], away_from_zero: false, build: |t, v| t.layer_norm(v[0]) },
    GradcheckCase { name: "softmax_rows", shapes: &[(3, 4)], away_from_zero: false, build: |t, v| t.softmax_rows(v[0]) },
    GradcheckCase { name: "transpose", shapes: &[(2, 5)], away_from_zero: false, build: |t, v| t.transpose(v[0]) },
    GradcheckCase { name: "mean_rows", shapes: &[(4, 3)], away_from_zero: false, build: |t, v| t.mean_rows(v[0]) },
    GradcheckCase { name: "concat_rows", shapes: &[(2, 3), (1, 3)], away_from_zero: false, build: |t, v| t.concat_rows(&[v[0], v[1]]) },
    GradcheckCase { name: "sum", shapes: &[(3, 3)], away_from_zero: false, build: |t, v| t.sum(v[0]) },
    GradcheckCase { name: "reduce_mean", shapes: &[(3, 3)], away_from_zero: false, build: |t, v| t.reduce_mean(v[0]) },
    GradcheckCase {
        name: "softmax_cross_entropy",
        shapes: &[(4, 3)],
        away_from_zero: false,
        build: |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]),
    },
    GradcheckCase { name: "mse_loss", shapes: &[(3, 2), (3, 2)], away_from_zero: false, build: |t, v| t.mse_loss(v[0], v[1]) },
    GradcheckCase {
        name: "mlp2",
        shapes: &[(5, 4), (4, 6), (1, 6), (6, 3)],
        away_from_zero: false,
        build: |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.gelu(h)?;
            let logits = t.matmul(h, v[3])?;
            t.softmax_cross_entropy(logits, &[0, 1, 2, 1, 0])
        },
    },
    GradcheckCase {
        name: "attention",
        shapes: &[(3, 4), (4, 4), (4, 4)],
        away_from_zero: false,
        build: |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let kt = t.transpose(k)?;
            let s = t.matmul(q, kt)?;
            let s = t.scale(s, 0.5)?;
            let a = t.softmax_rows(s)?;
            let o = t.matmul(a, v[0])?;
            let o = t.add(o, v[0])?;
            t.layer_norm(o)
        },
    },
];

fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize), away_from_zero: bool) -> Tensor {
    let mut t = Tensor::randn(shape.0, shape.1, 1.0, rng);
    if away_from_zero {
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v = if *v < 0.0 { -0.05 } else { 0.05 } - *v;
            }
        }
    }
    t
}

/// Tape gradient vs central differences for every registered op at one
/// seed. Non-scalar outputs are reduced with a random weighting so that no
/// output element is privileged.
pub fn gradcheck_all(seed: u64) -> Result<Vec<PropertyCheck>> {
    let mut out = Vec::with_capacity(GRADCHECK_CASES.len());
    for (ci, case) in GRADCHECK_CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(131).wrapping_add(ci as u64));
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|&s| random_input(&mut rng, s, case.away_from_zero).trainable())
            .collect();
        let probe_out = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let o = (case.build)(&mut tape, &vars)?;
            tape.value(o).shape()
        };
        let weights = Tensor::randn(probe_out.0, probe_out.1, 1.0, &mut rng);
        let scalar = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let o = (case.build)(&mut tape, &vars)?;
            let w = tape.constant(weights.clone());
            let p = tape.hadamard(o, w)?;
            let l = tape.sum(p)?;
            Ok((tape, vars, l))
        };
        let (tape, vars, loss) = scalar(&inputs)?;
        let grads = tape.backward(loss)?;
        let mut worst = 0.0f64;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
            let numeric = finite_diff_grad(
                |theta| {
                    let mut probe = inputs.clone();
                    probe[i] = theta.detached().trainable();
                    let (tape, _, l) = scalar(&probe)?;
                    Ok(tape.value(l).get(0, 0))
                },
                &inputs[i],
                FD_STEP,
            )?;
            worst = worst.max(relative_error(&analytic, &numeric)?);
        }
        out.push(PropertyCheck::at_most(format!("gradcheck/{}", case.name), worst, 1e-6));
    }
    Ok(out)
}

/// Names of the ops covered by [`gradcheck_all`].
pub fn gradcheck_op_names() -> Vec<&'static str> {
    GRADCHECK_CASES.iter().map(|c| c.name).collect()
}

/// One random adapter instance for the algebraic checks: the module, a
/// batch and a regression target.
pub struct AdapterInstance {
    pub module: LoraModule,
    pub x: Tensor,
    pub target: Tensor,
}

pub fn random_adapter(seed: u64, mode: AdapterMode, max_dim: usize, max_rank: usize) -> Result<AdapterInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(max_rank + 1..=max_dim);
    let k = rng.random_range(max_rank + 1..=max_dim);
    let r = rng.random_range(1..=max_rank);
    let base = Tensor::randn(d, k, 1.0, &mut rng);
    let mut module = LoraModule::attach(&base, r, mode, &mut rng)?;
    let a_shape = module.a.shape();
    module.a = Tensor::randn(a_shape.0, a_shape.1, 0.5, &mut rng).trainable();
    module.b = Tensor::randn(d, r, 0.5, &mut rng).trainable();
    let keep: Vec<bool> = (0..d * k).map(|_| rng.random::<f64>() > 0.3).collect();
    module.apply_mask(Mask::from_keep(d, k, keep)?)?;
    let n = rng.random_range(1..=6);
    let x = Tensor::randn(n, d, 1.0, &mut rng);
    let target = Tensor::randn(n, k, 1.0, &mut rng);
    Ok(AdapterInstance { module, x, target })
}

/// Runs the masked forward with an MSE loss and stores `∂L/∂A`, `∂L/∂B` on
/// the module. Returns the tape gradient of the unmasked composite.
pub fn adapter_backward(inst: &mut AdapterInstance) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(inst.x.detached());
    let w = inst.module.weight_on_tape(&mut tape)?;
    let z = tape.matmul(xv, w.masked)?;
    let t = tape.constant(inst.target.detached());
    let l = tape.mse_loss(z, t)?;
    let g = tape.backward(l)?;
    inst.module.zero_grad();
    g.accumulate_into(w.a.expect("A"), &mut inst.module.a)?;
    g.accumulate_into(w.b.expect("B"), &mut inst.module.b)?;
    Ok(g.get(w.composite).cloned().expect("composite depends on A and B"))
}

/// Max elementwise gap between the realised product change of one SGD step
/// and `η·Ĝ_η` where the estimator is fed η-scaled gradients. With
/// `corrupt`, `∂L/∂A` is perturbed before estimation.
pub fn sgd_identity_error(seed: u64, eta: f64, corrupt: bool) -> Result<f64> {
    let mut inst = random_adapter(seed, AdapterMode::Parallel, 32, 4)?;
    adapter_backward(&mut inst)?;
    let m = &inst.module;
    let before = m.product();
    let mut ga = m.a.grad_tensor().expect("grad");
    let gb = m.b.grad_tensor().expect("grad");
    if corrupt {
        ga.data_mut()[0] += 1.0;
    }
    let predicted = estimate_product_gradient(&m.a, &m.b, &ga.scale(eta), &gb.scale(eta))?;
    let mut stepped = inst.module.clone();
    stepped.zero_grad();
    stepped.a.grad = m.a.grad.clone();
    stepped.b.grad = m.b.grad.clone();
    crate::tensor::sgd_step(&mut [&mut stepped.a, &mut stepped.b], eta)?;
    let realised = before.sub(&stepped.product())?;
    realised.max_abs_diff(&predicted)
}

/// Max gap in `∂L/∂B = G_P·Aᵀ` and `∂L/∂A = Bᵀ·G_P`, where `G_P` is the
/// gradient of the adapted product (`B·A` in parallel mode, `B·A + I` in
/// sequential mode) derived from the composite gradient.
pub fn chain_rule_error(seed: u64, mode: AdapterMode) -> Result<f64> {
    let mut inst = random_adapter(seed, mode, 16, 3)?;
    let g_w = adapter_backward(&mut inst)?;
    let m = &inst.module;
    let g_p = match mode {
        AdapterMode::Parallel => g_w,
        AdapterMode::Sequential => g_w.matmul(&m.base().transpose())?,
    };
    let gb = g_p.matmul(&m.a.transpose())?;
    let ga = m.b.transpose().matmul(&g_p)?;
    let e1 = gb.max_abs_diff(&m.b.grad_tensor().expect("grad"))?;
    let e2 = ga.max_abs_diff(&m.a.grad_tensor().expect("grad"))?;
    Ok(e1.max(e2))
}

/// `x·((W ⊙ M))` with plain loops over the adapter factors, sharing no
/// code with the tensor or tape kernels.
pub fn naive_masked_forward(m: &LoraModule, x: &Tensor) -> Tensor {
    let (d, k) = m.shape();
    let (a, b, w0) = (&m.a, &m.b, m.base());
    let mut w = vec![0.0; d * k];
    for i in 0..d {
        for j in 0..k {
            w[i * k + j] = match m.mode() {
                AdapterMode::Parallel => {
                    w0.get(i, j) + (0..m.rank()).map(|r| b.get(i, r) * a.get(r, j)).sum::<f64>()
                }
                AdapterMode::Sequential => (0..d)
                    .map(|l| {
                        let p = (0..m.rank()).map(|r| b.get(i, r) * a.get(r, l)).sum::<f64>()
                            + if i == l { 1.0 } else { 0.0 };
                        p * w0.get(l, j)
                    })
                    .sum(),
            };
            if !m.mask().is_kept(i * k + j) {
                w[i * k + j] = 0.0;
            }
        }
    }
    let mut out = Tensor::zeros(x.rows(), k);
    for n in 0..x.rows() {
        for j in 0..k {
            out.set(n, j, (0..d).map(|i| x.get(n, i) * w[i * k + j]).sum());
        }
    }
    out
}

/// Largest gap between the masked adapter forward and both the merged dense
/// forward and [`naive_masked_forward`], for one random instance.
pub fn merge_equivalence_error(seed: u64, mode: AdapterMode) -> Result<f64> {
    let inst = random_adapter(seed, mode, 24, 4)?;
    let direct = inst.module.forward_masked(&inst.x)?;
    let merged = inst.x.matmul(&inst.module.merge())?;
    let naive = naive_masked_forward(&inst.module, &inst.x);
    Ok(direct.max_abs_diff(&merged)?.max(direct.max_abs_diff(&naive)?))
}

/// Settings for the Taylor-versus-leave-one-out comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct LooSetup {
    pub seed: u64,
    pub data_seed: u64,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub n: usize,
    pub iterations: usize,
    pub lr: f64,
    pub budget: usize,
}

impl Default for LooSetup {
    fn default() -> Self {
        Self {
            seed: 1,
            data_seed: 11,
            input_dim: 16,
            hidden: 8,
            classes: 4,
            n: 400,
            iterations: 30,
            lr: 0.05,
            budget: LOO_BUDGET,
        }
    }
}

/// Trains an MLP whose first layer is `input_dim × hidden` on blobs for a
/// few iterations (mid-training), then compares first-order Taylor scores
/// with brute-force leave-one-out scores on the training split.
pub fn taylor_vs_leave_one_out(setup: &LooSetup) -> Result<RankStats> {
    let mut spec = DataSpec::new(DataKind::Blobs, setup.n, setup.input_dim, setup.classes, setup.data_seed);
    spec.noise = 2.0;
    let data = gen_dataset(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut model = Model::init(ModelSpec::mlp(setup.input_dim, &[setup.hidden], setup.classes, setup.seed), &mut rng)?;
    crate::pruner::train(&mut model, &data, setup.iterations, 32, setup.lr, setup.seed)?;
    model.prepare_full(TargetSet::Ffn)?;
    let (x, y) = data.split(Split::Train);
    let grads = exact_composite_grad(&model, &x, &y)?;
    let taylor = importance_taylor_exact(&model.layers[0].weight.composite(), &grads[0])?;
    let loo = leave_one_out_importance(&model, &x, &y, 0, setup.budget, setup.seed)?;
    let t: Vec<f64> = loo.iter().map(|(i, _)| taylor.data()[*i]).collect();
    let e: Vec<f64> = loo.iter().map(|(_, s)| *s).collect();
    rank_stats(&t, &e, &[0.1, 0.5])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let g = finite_diff_grad(|t| Ok(t.get(0, 0).powi(2)), &Tensor::scalar(3.0), FD_STEP).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-9);
        let c = finite_diff_grad(|_| Ok(4.2), &Tensor::ones(2, 2), FD_STEP).unwrap();
        assert_eq!(c, Tensor::zeros(2, 2));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &Tensor::ones(1, 1), FD_STEP).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &Tensor::ones(1, 1), 0.0).is_err());
    }

    #[test]
    fn ranks_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v: Vec<f64> = (0..30).map(|_| (rng.random::<f64>() * 8.0).floor()).collect();
            let fast = average_ranks(&v);
            let slow = naive_ranks(&v);
            assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }

    #[test]
    fn spearman_against_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let s = rank_stats(&a, &b, &[0.5]).unwrap().spearman;
        // no ties: 1 − 6Σd²/(n(n²−1))
        let (ra, rb) = (naive_ranks(&a), naive_ranks(&b));
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        let n = 40.0;
        let expected = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((s - expected).abs() <= 1e-12);
    }

    #[test]
    fn rank_stats_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let same = rank_stats(&a, &a, &[0.25, 0.5]).unwrap();
        assert!((same.spearman - 1.0).abs() < 1e-15);
        assert!(same.topk_overlap.values().all(|v| *v == 1.0));
        let rev = rank_stats(&a, &[4.0, 3.0, 2.0, 1.0], &[0.5]).unwrap();
        assert!((rev.spearman + 1.0).abs() < 1e-15);
        assert_eq!(rev.topk_overlap["0.50"], 0.0);
        assert!(rank_stats(&a, &a[..3], &[0.5]).is_err());
    }

    #[test]
    fn exact_composite_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = Model::init(ModelSpec::mlp(4, &[5], 3, 0), &mut rng).unwrap();
        m.attach_lora(2, AdapterMode::Sequential, TargetSet::All, &mut rng).unwrap();
        if let LayerWeight::Lora(l) = &mut m.layers[0].weight {
            l.b = Tensor::randn(4, 2, 0.3, &mut rng).trainable();
        }
        let x = Tensor::randn(6, 4, 1.0, &mut rng);
        let y = vec![0, 1, 2, 0, 1, 2];
        let g = exact_composite_grad(&m, &x, &y).unwrap();
        let w = m.layers[0].weight.composite();
        let numeric = finite_diff_grad(
            |theta| {
                let mut probe = m.merged();
                probe.layers[0].weight = LayerWeight::Dense(DenseWeight::new(theta.detached()));
                probe.loss(&x, &y)
            },
            &w,
            FD_STEP,
        )
        .unwrap();
        assert!(relative_error(&g[0], &numeric).unwrap() < 1e-6);
    }

    #[test]
    fn parallel_zero_b_composite_grad_is_base_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut full = Model::init(ModelSpec::mlp(4, &[5], 3, 0), &mut rng).unwrap();
        let mut adapted = full.clone();
        adapted.attach_lora(2, AdapterMode::Parallel, TargetSet::All, &mut rng).unwrap();
        full.prepare_full(TargetSet::All).unwrap();
        let x = Tensor::randn(6, 4, 1.0, &mut rng);
        let y = vec![0, 1, 2, 0, 1, 2];
        let ga = exact_composite_grad(&adapted, &x, &y).unwrap();
        let gf = full.backward_step(&x, &y).unwrap();
        assert!(ga[0].max_abs_diff(gf.composite[0].as_ref().unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn loo_single_weight_closed_form() {
        // One linear layer on one sample: zeroing w changes the loss from
        // CE(w·x) to CE(0); compare with the direct evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Model::init(ModelSpec::mlp(2, &[], 2, 0), &mut rng).unwrap();
        m.layers[0].bias = None;
        let w = Tensor::from_rows(&[&[0.7, -0.2], &[0.0, 0.4]]);
        m.layers[0].weight = LayerWeight::Dense(DenseWeight::new(w));
        let x = Tensor::from_rows(&[&[1.5, -0.5]]);
        let y = [1usize];
        let scores = leave_one_out_importance(&m, &x, &y, 0, LOO_BUDGET, 0).unwrap();
        let ce = |z0: f64, z1: f64| -> f64 { (z0.exp() + z1.exp()).ln() - z1 };
        let full = ce(1.5 * 0.7, 1.5 * -0.2 + -0.5 * 0.4);
        let without_00 = ce(0.0, 1.5 * -0.2 + -0.5 * 0.4);
        assert!((scores[0].1 - (full - without_00).powi(2)).abs() <= 1e-12);
        assert_eq!(scores[2].1, 0.0);
    }

    #[test]
    fn pruned_entry_has_zero_loo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = Model::init(ModelSpec::mlp(3, &[3], 2, 0), &mut rng).unwrap();
        m.prepare_full(TargetSet::All).unwrap();
        let mut keep = vec![true; 9];
        keep[4] = false;
        m.layers[0].weight.apply_mask(Mask::from_keep(3, 3, keep).unwrap()).unwrap();
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let s = leave_one_out_importance(&m, &x, &[0, 1, 0, 1], 0, 100, 0).unwrap();
        assert_eq!(s[4], (4, 0.0));
    }

    #[test]
    fn budget_limits_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Model::init(ModelSpec::mlp(6, &[6], 2, 0), &mut rng).unwrap();
        let x = Tensor::randn(4, 6, 1.0, &mut rng);
        let a = leave_one_out_importance(&m, &x, &[0, 1, 0, 1], 0, 10, 3).unwrap();
        let b = leave_one_out_importance(&m, &x, &[0, 1, 0, 1], 0, 10, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_identity_and_negative_control() {
        for seed in 0..10 {
            assert!(sgd_identity_error(seed, 0.1, false).unwrap() <= 1e-10);
            assert!(sgd_identity_error(seed, 0.1, true).unwrap() > 1e-6);
        }
    }

    #[test]
    fn naive_forward_sees_mask_and_mode() {
        for mode in [AdapterMode::Parallel, AdapterMode::Sequential] {
            let inst = random_adapter(9, mode, 10, 3).unwrap();
            let naive = naive_masked_forward(&inst.module, &inst.x);
            assert!(naive.max_abs_diff(&inst.module.forward_masked(&inst.x).unwrap()).unwrap() <= 1e-12);
            let mut pruned = inst.module.clone();
            let (d, k) = pruned.shape();
            let keep = (0..d * k).map(|i| pruned.mask().is_kept(i) && i != 0 && i != k + 1).collect();
            pruned.apply_mask(Mask::from_keep(d, k, keep).unwrap()).unwrap();
            assert!(naive.max_abs_diff(&naive_masked_forward(&pruned, &inst.x)).unwrap() > 1e-6);
        }
    }

    #[test]
    fn gradcheck_one_seed() {
        for c in gradcheck_all(0).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
