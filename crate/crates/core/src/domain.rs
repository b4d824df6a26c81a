//! Domain types shared by every module: weight vectors, per-iteration
//! gradient and loss snapshots, the exploration window buffer, and the
//! per-iteration metric record.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::SquareMatrix;

/// Default lower bound on every task weight.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-4;

/// Absolute tolerance on Σw = K.
pub const SUM_TOLERANCE: f64 = 1e-8;

/// Task weights `w ∈ ℝ₊ᴷ` with `Σ wᵢ = K` and `wᵢ > 0`.
///
/// Construction goes through [`make_weight_vector`] (clamp and rescale) or
/// [`WeightVector::from_feasible`] (validate only, used when reading traces).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// All-ones weights.
    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2, "a weight vector needs at least two tasks");
        WeightVector(vec![1.0; k])
    }

    /// Clamp-and-rescale with the default floor.
    pub fn new(raw: &[f64]) -> Result<Self> {
        make_weight_vector(raw, DEFAULT_WEIGHT_FLOOR)
    }

    /// Accepts `values` unchanged if they already satisfy the invariants
    /// (positive, finite, K ≥ 2, sum within tolerance).
    pub fn from_feasible(values: Vec<f64>) -> Result<Self> {
        let k = values.len();
        if k < 2 {
            return Err(invalid(format!("weight vector needs K >= 2, got {k}")));
        }
        if values.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(invalid("weights must be finite and strictly positive"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - k as f64).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("weights sum to {sum}, expected {k}")));
        }
        Ok(WeightVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance to the all-ones vector.
    pub fn distance_to_uniform(&self) -> f64 {
        self.0.iter().map(|w| (w - 1.0).powi(2)).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        WeightVector::from_feasible(values)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Vec<f64> {
        w.0
    }
}

pub(crate) fn check_floor(floor: f64, k: usize) -> Result<()> {
    if !(floor > 0.0 && floor * (k as f64) < k as f64 && floor < 1.0) {
        return Err(invalid(format!("weight floor must lie in (0, 1), got {floor}")));
    }
    Ok(())
}

/// Builds a feasible weight vector from arbitrary finite values.
///
/// Negative entries are clamped to zero, the vector is rescaled to sum to K,
/// and any entry that lands below `floor` is pinned there while the others
/// are rescaled to absorb the difference. This repeats until both the floor
/// and the sum constraint hold.
pub fn make_weight_vector(raw: &[f64], floor: f64) -> Result<WeightVector> {
    let k = raw.len();
    if k < 2 {
        return Err(invalid(format!("weight vector needs K >= 2, got {k}")));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(invalid("weights must be finite"));
    }
    check_floor(floor, k)?;
    let clamped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    if clamped.iter().all(|v| *v == 0.0) {
        return Err(invalid("weight vector has no positive entry"));
    }

    let kf = k as f64;
    let mut pinned = vec![false; k];
    loop {
        let n_pinned = pinned.iter().filter(|p| **p).count();
        let target = kf - floor * n_pinned as f64;
        let free_sum: f64 = clamped
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| v)
            .sum();
        let scale = target / free_sum;
        let mut newly_pinned = false;
        for i in 0..k {
            if !pinned[i] && clamped[i] * scale < floor {
                pinned[i] = true;
                newly_pinned = true;
            }
        }
        if !newly_pinned {
            let w = (0..k)
                .map(|i| if pinned[i] { floor } else { clamped[i] * scale })
                .collect();
            return Ok(WeightVector(w));
        }
    }
}

/// Per-iteration task-gradient information on the shared parameters: the
/// norms and the Gram matrix `GᵀG` of the unweighted task gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    iter: u64,
    norms: Vec<f64>,
    gram: SquareMatrix,
}

impl GradientSnapshot {
    /// Validating constructor.
    pub fn new(iter: u64, norms: Vec<f64>, gram: SquareMatrix) -> Result<Self> {
        let k = norms.len();
        if k == 0 {
            return Err(invalid("gradient snapshot needs at least one task"));
        }
        if gram.dim() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: gram.dim(),
            });
        }
        if norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return Err(invalid("gradient norms must be finite and nonnegative"));
        }
        if gram.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(invalid("Gram matrix must be finite"));
        }
        if gram.asymmetry() > 1e-10 {
            return Err(invalid("Gram matrix is not symmetric"));
        }
        for i in 0..k {
            let sq = norms[i] * norms[i];
            if (gram[(i, i)] - sq).abs() > 1e-8 * sq.max(f64::MIN_POSITIVE) && gram[(i, i)] != sq {
                return Err(invalid(format!(
                    "Gram diagonal {} does not match squared norm {sq} for task {i}",
                    gram[(i, i)]
                )));
            }
            for j in (i + 1)..k {
                let bound = norms[i] * norms[j];
                if gram[(i, j)].abs() > bound * (1.0 + 1e-10) + 1e-300 {
                    return Err(invalid(format!(
                        "Gram entry ({i},{j}) violates Cauchy-Schwarz"
                    )));
                }
            }
        }
        Ok(GradientSnapshot { iter, norms, gram })
    }

    /// Compresses `K` task gradients of dimension `D` into norms and Gram
    /// matrix. The gradients themselves are not retained.
    pub fn from_gradients<G: AsRef<[f64]>>(iter: u64, gradients: &[G]) -> Result<Self> {
        let k = gradients.len();
        if k == 0 {
            return Err(invalid("no task gradients"));
        }
        let d = gradients[0].as_ref().len();
        if d == 0 {
            return Err(invalid("task gradients must have dimension >= 1"));
        }
        for g in gradients {
            if g.as_ref().len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: g.as_ref().len(),
                });
            }
        }
        let mut gram = SquareMatrix::zeros(k);
        for i in 0..k {
            for j in i..k {
                let v = crate::linalg::dot(gradients[i].as_ref(), gradients[j].as_ref());
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let norms = (0..k).map(|i| gram[(i, i)].sqrt()).collect();
        GradientSnapshot::new(iter, norms, gram)
    }

    /// Rebuilds a snapshot from norms and the row-major upper triangle.
    pub fn from_upper(iter: u64, norms: Vec<f64>, upper: &[f64]) -> Result<Self> {
        let k = norms.len();
        if upper.len() != k * (k + 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: k * (k + 1) / 2,
                found: upper.len(),
            });
        }
        let mut gram = SquareMatrix::zeros(k);
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                gram[(i, j)] = upper[idx];
                gram[(j, i)] = upper[idx];
                idx += 1;
            }
        }
        GradientSnapshot::new(iter, norms, gram)
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn num_tasks(&self) -> usize {
        self.norms.len()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn gram(&self) -> &SquareMatrix {
        &self.gram
    }

    /// Row-major upper triangle including the diagonal.
    pub fn gram_upper(&self) -> Vec<f64> {
        let k = self.num_tasks();
        let mut out = Vec::with_capacity(k * (k + 1) / 2);
        for i in 0..k {
            for j in i..k {
                out.push(self.gram[(i, j)]);
            }
        }
        out
    }

    /// Snapshot of the scaled gradients `wₖ gₖ`.
    pub fn scaled(&self, weights: &[f64]) -> Result<GradientSnapshot> {
        let k = self.num_tasks();
        if weights.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: weights.len(),
            });
        }
        let norms = self
            .norms
            .iter()
            .zip(weights)
            .map(|(n, w)| n * w.abs())
            .collect();
        Ok(GradientSnapshot {
            iter: self.iter,
            norms,
            gram: self.scaled_gram(weights),
        })
    }

    /// `diag(w) GᵀG diag(w)`
    pub fn scaled_gram(&self, weights: &[f64]) -> SquareMatrix {
        let k = self.num_tasks();
        let mut out = SquareMatrix::zeros(k);
        for i in 0..k {
            for j in 0..k {
                out[(i, j)] = weights[i] * weights[j] * self.gram[(i, j)];
            }
        }
        out
    }
}

/// Norms and Gram matrix of `K` task gradients; see
/// [`GradientSnapshot::from_gradients`].
pub fn snapshot_from_gradients<G: AsRef<[f64]>>(
    iter: u64,
    task_gradients: &[G],
) -> Result<GradientSnapshot> {
    GradientSnapshot::from_gradients(iter, task_gradients)
}

/// Task losses at one iteration with the cached initial and previous losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSnapshot {
    iter: u64,
    losses: Vec<f64>,
    initial_losses: Vec<f64>,
    prev_losses: Vec<f64>,
}

impl LossSnapshot {
    pub fn new(
        iter: u64,
        losses: Vec<f64>,
        initial_losses: Vec<f64>,
        prev_losses: Vec<f64>,
    ) -> Result<Self> {
        let k = losses.len();
        if k == 0 {
            return Err(invalid("loss snapshot needs at least one task"));
        }
        for v in [&initial_losses, &prev_losses] {
            if v.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: v.len(),
                });
            }
        }
        if losses.iter().chain(&prev_losses).any(|l| !l.is_finite() || *l < 0.0) {
            return Err(invalid("task losses must be finite and nonnegative"));
        }
        if initial_losses.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(invalid("initial task losses must be finite and strictly positive"));
        }
        Ok(LossSnapshot {
            iter,
            losses,
            initial_losses,
            prev_losses,
        })
    }

    /// Snapshot for the first iteration: losses are their own initial and
    /// previous values.
    pub fn first(iter: u64, losses: Vec<f64>) -> Result<Self> {
        LossSnapshot::new(iter, losses.clone(), losses.clone(), losses)
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn num_tasks(&self) -> usize {
        self.losses.len()
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn initial_losses(&self) -> &[f64] {
        &self.initial_losses
    }

    pub fn prev_losses(&self) -> &[f64] {
        &self.prev_losses
    }
}

/// Consecutive (gradient, loss) snapshots of one exploration window.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    capacity: usize,
    stride: u64,
    snapshots: Vec<(GradientSnapshot, LossSnapshot)>,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Self {
        Self::with_stride(capacity, 1)
    }

    /// Buffer whose snapshots are `stride` iterations apart.
    pub fn with_stride(capacity: usize, stride: u64) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        assert!(stride > 0, "window stride must be positive");
        WindowBuffer {
            capacity,
            stride,
            snapshots: Vec::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, grad: GradientSnapshot, loss: LossSnapshot) -> Result<()> {
        if grad.iter() != loss.iter() {
            return Err(invalid(format!(
                "gradient snapshot iter {} does not match loss snapshot iter {}",
                grad.iter(),
                loss.iter()
            )));
        }
        if grad.num_tasks() != loss.num_tasks() {
            return Err(Error::DimensionMismatch {
                expected: grad.num_tasks(),
                found: loss.num_tasks(),
            });
        }
        if self.snapshots.len() >= self.capacity {
            return Err(invalid("window buffer is full"));
        }
        if let Some((last, _)) = self.snapshots.last() {
            if last.num_tasks() != grad.num_tasks() {
                return Err(Error::DimensionMismatch {
                    expected: last.num_tasks(),
                    found: grad.num_tasks(),
                });
            }
            if grad.iter() != last.iter() + self.stride {
                return Err(invalid(format!(
                    "window iterations must be contiguous: {} follows {}",
                    grad.iter(),
                    last.iter()
                )));
            }
        }
        self.snapshots.push((grad, loss));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.snapshots.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_tasks(&self) -> Option<usize> {
        self.snapshots.first().map(|(g, _)| g.num_tasks())
    }

    pub fn snapshots(&self) -> &[(GradientSnapshot, LossSnapshot)] {
        &self.snapshots
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }
}

/// Which parts of a [`MetricRecord`] were undefined or adjusted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegenerateFlags {
    /// Tasks whose (weighted) gradient on the shared parameters is zero.
    pub zero_grad_tasks: Vec<usize>,
    /// κ hit the eigenvalue floor.
    pub cond_floored: bool,
    /// κ undefined (all-zero Gram).
    pub cond_undefined: bool,
    /// A previous loss was zero, so the descending rate is undefined.
    pub ldr_undefined: bool,
    /// Total loss was zero, so the relative loss is undefined.
    pub rl_undefined: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        !self.zero_grad_tasks.is_empty()
            || self.cond_floored
            || self.cond_undefined
            || self.ldr_undefined
            || self.rl_undefined
    }
}

/// One iteration's diagnostics.
///
/// Gradient metrics (`gms_mean`, `gcs_mean`, `cond_number`) are computed on
/// the weight-scaled gradients `wₖ gₖ` that drive the update; the relative
/// loss uses the weighted losses `wₖ lₖ`. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub iter: u64,
    pub gms_mean: Option<f64>,
    pub gcs_mean: Option<f64>,
    pub cond_number: Option<f64>,
    pub ilr_per_task: Vec<f64>,
    pub ilr_std: f64,
    pub ldr_per_task: Option<Vec<f64>>,
    pub rl_per_task: Option<Vec<f64>>,
    pub rl_std: Option<f64>,
    pub weights: WeightVector,
    pub flags: DegenerateFlags,
}
