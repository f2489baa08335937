//! Synthetic classification tasks with deterministic train/val/test splits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Spirals,
    LowrankTeacher,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Blobs => "blobs",
            DataKind::Spirals => "spirals",
            DataKind::LowrankTeacher => "lowrank-teacher",
        })
    }
}

impl FromStr for DataKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DataKind::Blobs),
            "spirals" => Ok(DataKind::Spirals),
            "lowrank-teacher" => Ok(DataKind::LowrankTeacher),
            other => Err(LabError::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Recipe for a synthetic task.
///
/// `seed` fixes the task structure (class means, spiral embedding, teacher
/// weights). `shift` perturbs that structure into a related downstream
/// task; `shift = 0` is the source task. Samples are drawn from a stream
/// derived from both.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: DataKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub shift: f64,
    pub noise: f64,
    /// Rank of the teacher perturbation for `lowrank-teacher`.
    pub teacher_rank: usize,
}

impl DataSpec {
    pub fn new(kind: DataKind, n: usize, dim: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            dim,
            classes,
            seed,
            shift: 0.0,
            noise: 1.0,
            teacher_rank: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn split(&self, split: Split) -> (Tensor, Vec<usize>) {
        self.batch(self.indices(split))
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Iteration count of `epochs` passes over the training split.
    pub fn iterations(&self, epochs: usize, batch_size: usize) -> usize {
        epochs * self.train.len().div_ceil(batch_size.max(1))
    }
}

/// Shuffled mini-batches over the training split, reshuffled every epoch.
#[derive(Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(train: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || train.is_empty() {
            return Err(LabError::Config("batch size and training split must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            batch_size,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

pub fn gen_dataset(spec: &DataSpec) -> Result<Dataset> {
    if spec.n < 2 || spec.dim < 2 || spec.classes < 2 {
        return Err(LabError::Config(format!(
            "dataset needs n, dim, classes >= 2 (got {}, {}, {})",
            spec.n, spec.dim, spec.classes
        )));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 || !spec.shift.is_finite() {
        return Err(LabError::Config("noise must be >= 0 and shift finite".into()));
    }
    let mut structure = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut perturb = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05EE_D0F5_A1F7);
    let mut samples = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(spec.shift.to_bits()));
    let (features, labels) = match spec.kind {
        DataKind::Blobs => blobs(spec, &mut structure, &mut perturb, &mut samples),
        DataKind::Spirals => spirals(spec, &mut structure, &mut samples),
        DataKind::LowrankTeacher => teacher(spec, &mut structure, &mut perturb, &mut samples)?,
    };
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut samples);
    let n_train = spec.n * 3 / 5;
    let n_val = spec.n / 5;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        name: spec.kind.to_string(),
        features,
        labels,
        classes: spec.classes,
        train,
        val,
        test,
        seed: spec.seed,
    })
}

/// Gaussian clusters; class means `~ N(0, 3²)` per coordinate.
fn blobs(spec: &DataSpec, structure: &mut ChaCha8Rng, perturb: &mut ChaCha8Rng, samples: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let means = Tensor::randn(spec.classes, spec.dim, 3.0, structure);
    let delta = Tensor::randn(spec.classes, spec.dim, 1.0, perturb);
    let means = means.add(&delta.scale(spec.shift)).expect("same shape");
    let noise = Tensor::randn(spec.n, spec.dim, spec.noise.max(1e-12), samples);
    let mut x = Tensor::zeros(spec.n, spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.classes;
        for j in 0..spec.dim {
            x.set(i, j, means.get(c, j) + noise.get(i, j));
        }
        labels.push(c);
    }
    (x, labels)
}

/// Interleaved 2-D spiral arms, linearly embedded into `dim` coordinates.
fn spirals(spec: &DataSpec, structure: &mut ChaCha8Rng, samples: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let embed = Tensor::randn(2, spec.dim, 1.0, structure);
    let mut x = Tensor::zeros(spec.n, spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    let arm = std::f64::consts::TAU / spec.classes as f64;
    for i in 0..spec.n {
        let c = i % spec.classes;
        let t: f64 = samples.random();
        let angle = c as f64 * arm + spec.shift + 1.5 * std::f64::consts::TAU * t;
        let r = 0.2 + t;
        let px = r * angle.cos() + 0.05 * spec.noise * sample_normal(samples);
        let py = r * angle.sin() + 0.05 * spec.noise * sample_normal(samples);
        for j in 0..spec.dim {
            x.set(i, j, px * embed.get(0, j) + py * embed.get(1, j));
        }
        labels.push(c);
    }
    (x, labels)
}

/// Labels are the argmax of a fixed ReLU teacher whose first weight is
/// `W_base + shift·U·V` with `U·V` of rank `teacher_rank`.
fn teacher(
    spec: &DataSpec,
    structure: &mut ChaCha8Rng,
    perturb: &mut ChaCha8Rng,
    samples: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let hidden = 2 * spec.dim;
    let w1 = Tensor::randn(spec.dim, hidden, (2.0 / spec.dim as f64).sqrt(), structure);
    let w2 = Tensor::randn(hidden, spec.classes, (1.0 / hidden as f64).sqrt(), structure);
    let r = spec.teacher_rank.max(1);
    let u = Tensor::randn(spec.dim, r, (1.0 / r as f64).sqrt(), perturb);
    let v = Tensor::randn(r, hidden, (2.0 / spec.dim as f64).sqrt(), perturb);
    let w1 = w1.add(&u.matmul(&v)?.scale(spec.shift))?;
    let x = Tensor::randn(spec.n, spec.dim, 1.0, samples);
    let logits = x.matmul(&w1)?.map(|v| v.max(0.0)).matmul(&w2)?;
    let jitter = Tensor::randn(spec.n, spec.classes, 0.05 * spec.noise.max(1e-12), samples);
    let labels = logits.add(&jitter)?.argmax_rows();
    Ok((x, labels))
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        for kind in [DataKind::Blobs, DataKind::Spirals, DataKind::LowrankTeacher] {
            let spec = DataSpec::new(kind, 50, 4, 3, 7);
            assert_eq!(gen_dataset(&spec).unwrap(), gen_dataset(&spec).unwrap());
        }
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let ds = gen_dataset(&DataSpec::new(DataKind::Blobs, 101, 3, 2, 1)).unwrap();
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.val).chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_sizes_rejected() {
        let mut spec = DataSpec::new(DataKind::Blobs, 0, 4, 3, 7);
        assert!(matches!(gen_dataset(&spec), Err(LabError::Config(_))));
        spec.n = 10;
        spec.classes = 1;
        assert!(gen_dataset(&spec).is_err());
        assert!("moons".parse::<DataKind>().is_err());
    }

    #[test]
    fn shift_changes_structure_only_when_nonzero() {
        let base = DataSpec::new(DataKind::LowrankTeacher, 200, 6, 3, 2);
        let mut moved = base.clone();
        moved.shift = 1.0;
        let (a, b) = (gen_dataset(&base).unwrap(), gen_dataset(&moved).unwrap());
        assert_ne!(a.labels, b.labels);
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let train: Vec<usize> = (0..10).collect();
        let mut b = Batcher::new(&train, 4, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, train);
    }
}
