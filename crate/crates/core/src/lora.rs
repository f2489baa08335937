//! Frozen linear weights with low-rank adapters and binary pruning masks.
//!
//! Two adapter placements are supported. In parallel mode the adapted weight
//! is `W = W0 + B·A` with `A: r×k`, `B: d×r`; in sequential mode it is
//! `W = (B·A + I)·W0` with `A: r×d`, `B: d×r`. In both cases the layer
//! computes `x · (W ⊙ mask)`, so the mask always lives on the composite `W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for the `A` factor.
pub const LORA_A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterMode {
    Parallel,
    Sequential,
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMode::Parallel => "parallel",
            AdapterMode::Sequential => "sequential",
        })
    }
}

impl FromStr for AdapterMode {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" | "par" => Ok(AdapterMode::Parallel),
            "sequential" | "seq" => Ok(AdapterMode::Sequential),
            other => Err(LabError::Config(format!("unknown adapter mode `{other}`"))),
        }
    }
}

/// Binary keep-mask. `true` keeps a weight, `false` prunes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    zeros: usize,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
            zeros: 0,
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(LabError::Input(format!(
                "mask has {} entries, shape {rows}x{cols} needs {}",
                keep.len(),
                rows * cols
            )));
        }
        let zeros = keep.iter().filter(|k| !**k).count();
        Ok(Self { rows, cols, keep, zeros })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, idx: usize) -> bool {
        self.keep[idx]
    }

    pub fn zeros(&self) -> usize {
        self.zeros
    }

    /// Fraction of pruned entries.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.zeros as f64 / self.keep.len() as f64
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("mask shape")
    }

    /// Prunes a single flat position. Returns whether it was newly pruned.
    pub(crate) fn prune(&mut self, idx: usize) -> bool {
        if self.keep[idx] {
            self.keep[idx] = false;
            self.zeros += 1;
            true
        } else {
            false
        }
    }

    /// Replaces this mask with `new`, refusing any revival of a pruned entry.
    pub fn replace_monotone(&mut self, new: Mask) -> Result<()> {
        if new.shape() != self.shape() {
            return Err(LabError::dim("apply_mask", self.shape(), new.shape()));
        }
        if let Some(i) = self.keep.iter().zip(&new.keep).position(|(old, new)| !old && *new) {
            return Err(LabError::Invariant(format!(
                "mask entry ({}, {}) was pruned and cannot be revived",
                i / self.cols,
                i % self.cols
            )));
        }
        *self = new;
        Ok(())
    }
}

/// Tape handles produced by one adapted-layer forward.
#[derive(Debug, Clone, Copy)]
pub struct WeightVars {
    /// The unmasked composite `W`; its tape gradient is the exact `∂L/∂W`.
    pub composite: Var,
    /// `W ⊙ mask`.
    pub masked: Var,
    pub a: Option<Var>,
    pub b: Option<Var>,
    /// `B·A`, when adapters are present.
    pub product: Option<Var>,
    /// The dense weight leaf, for non-adapted layers.
    pub dense: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    base: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    mask: Mask,
    mode: AdapterMode,
    rank: usize,
}

impl LoraModule {
    /// Wraps a frozen `d×k` weight with fresh adapters: `A ~ N(0, 0.02²)`,
    /// `B = 0`, mask all ones.
    pub fn attach<R: Rng + ?Sized>(base: &Tensor, rank: usize, mode: AdapterMode, rng: &mut R) -> Result<Self> {
        let (d, k) = base.shape();
        if rank < 1 || rank >= d.min(k) {
            return Err(LabError::Config(format!(
                "adapter rank {rank} must satisfy 1 <= r < min({d}, {k})"
            )));
        }
        let a_cols = match mode {
            AdapterMode::Parallel => k,
            AdapterMode::Sequential => d,
        };
        let a = Tensor::randn(rank, a_cols, LORA_A_INIT_STD, rng).trainable();
        let b = Tensor::zeros(d, rank).trainable();
        Ok(Self {
            base: base.detached(),
            a,
            b,
            mask: Mask::ones(d, k),
            mode,
            rank,
        })
    }

    /// Reassembles a module from stored parts (checkpoint loading).
    pub fn from_parts(base: Tensor, a: Tensor, b: Tensor, mask: Mask, mode: AdapterMode) -> Result<Self> {
        let (d, k) = base.shape();
        let rank = a.rows();
        let a_cols = match mode {
            AdapterMode::Parallel => k,
            AdapterMode::Sequential => d,
        };
        if a.cols() != a_cols || b.shape() != (d, rank) || mask.shape() != (d, k) {
            return Err(LabError::Input(format!(
                "inconsistent adapter parts: W0 {:?}, A {:?}, B {:?}, mask {:?}",
                base.shape(),
                a.shape(),
                b.shape(),
                mask.shape()
            )));
        }
        Ok(Self {
            base: base.detached(),
            a: a.detached().trainable(),
            b: b.detached().trainable(),
            mask,
            mode,
            rank,
        })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    /// `B·A`.
    pub fn product(&self) -> Tensor {
        self.b.matmul(&self.a).expect("adapter shapes are checked at construction")
    }

    /// Unmasked adapted weight `W`.
    pub fn composite(&self) -> Tensor {
        let ba = self.product();
        match self.mode {
            AdapterMode::Parallel => self.base.add(&ba).expect("shape"),
            AdapterMode::Sequential => {
                let p = ba.add(&Tensor::identity(self.base.rows())).expect("shape");
                p.matmul(&self.base).expect("shape")
            }
        }
    }

    /// Re-parameterised dense weight `W ⊙ mask`.
    pub fn merge(&self) -> Tensor {
        self.composite().hadamard(&self.mask.to_tensor()).expect("shape")
    }

    /// Builds `W ⊙ mask` on the tape from trainable `A`, `B` leaves and a
    /// frozen `W0`.
    pub fn weight_on_tape(&self, tape: &mut Tape) -> Result<WeightVars> {
        let a = tape.leaf(&self.a);
        let b = tape.leaf(&self.b);
        let w0 = tape.constant(self.base.detached());
        let product = tape.matmul(b, a)?;
        let composite = match self.mode {
            AdapterMode::Parallel => tape.add(w0, product)?,
            AdapterMode::Sequential => {
                let eye = tape.constant(Tensor::identity(self.base.rows()));
                let p = tape.add(product, eye)?;
                tape.matmul(p, w0)?
            }
        };
        let mask = tape.constant(self.mask.to_tensor());
        let masked = tape.hadamard(composite, mask)?;
        Ok(WeightVars {
            composite,
            masked,
            a: Some(a),
            b: Some(b),
            product: Some(product),
            dense: None,
        })
    }

    /// `x · (W ⊙ mask)` evaluated on a throwaway tape.
    pub fn forward_masked(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.detached());
        let w = self.weight_on_tape(&mut tape)?;
        let z = tape.matmul(xv, w.masked)?;
        Ok(tape.value(z).detached())
    }

    pub fn apply_mask(&mut self, new_mask: Mask) -> Result<()> {
        self.mask.replace_monotone(new_mask)
    }

    pub(crate) fn mask_mut(&mut self) -> &mut Mask {
        &mut self.mask
    }

    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    pub fn zero_grad(&mut self) {
        self.a.zero_grad();
        self.b.zero_grad();
    }
}

/// A plain weight with its own mask: frozen after merging, trainable under
/// full fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeight {
    pub w: Tensor,
    mask: Mask,
}

impl DenseWeight {
    pub fn new(w: Tensor) -> Self {
        let mask = Mask::ones(w.rows(), w.cols());
        Self { w, mask }
    }

    pub fn with_mask(w: Tensor, mask: Mask) -> Result<Self> {
        if w.shape() != mask.shape() {
            return Err(LabError::dim("dense mask", w.shape(), mask.shape()));
        }
        Ok(Self { w, mask })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn merge(&self) -> Tensor {
        self.w.hadamard(&self.mask.to_tensor()).expect("shape")
    }

    pub fn weight_on_tape(&self, tape: &mut Tape) -> Result<WeightVars> {
        let w = tape.leaf(&self.w);
        let mask = tape.constant(self.mask.to_tensor());
        let masked = tape.hadamard(w, mask)?;
        Ok(WeightVars {
            composite: w,
            masked,
            a: None,
            b: None,
            product: None,
            dense: Some(w),
        })
    }

    pub fn apply_mask(&mut self, new_mask: Mask) -> Result<()> {
        self.mask.replace_monotone(new_mask)
    }

    pub(crate) fn mask_mut(&mut self) -> &mut Mask {
        &mut self.mask
    }
}
