//! Multi-task optimization diagnostics.
//!
//! Gradient dominance (magnitude similarity), gradient conflict (cosine
//! similarity), instability (condition number of the task-gradient matrix),
//! convergence speed (inverse learning rate, loss descending rate) and loss
//! imbalance (relative loss). Everything is computed from norms and the Gram
//! matrix, never from full gradients.

use crate::domain::{DegenerateFlags, GradientSnapshot, LossSnapshot, MetricRecord, WeightVector};
use crate::error::{degenerate, invalid, Error, Result};
use crate::linalg::symmetric_eigen;

/// Relative floor on the smallest Gram eigenvalue.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

fn check_pair(snapshot: &GradientSnapshot, i: usize, j: usize) -> Result<()> {
    let k = snapshot.num_tasks();
    if i >= k || j >= k {
        return Err(invalid(format!("task index out of range for K={k}")));
    }
    if i == j {
        return Err(invalid("pairwise metric needs two distinct tasks"));
    }
    Ok(())
}

/// `2|gᵢ||gⱼ| / (|gᵢ|² + |gⱼ|²)`, in [0, 1].
pub fn grad_magnitude_similarity(snapshot: &GradientSnapshot, i: usize, j: usize) -> Result<f64> {
    check_pair(snapshot, i, j)?;
    let (a, b) = (snapshot.norms()[i], snapshot.norms()[j]);
    let scale = a.max(b);
    if scale == 0.0 {
        return Err(degenerate(format!("tasks {i} and {j} both have zero gradient")));
    }
    let (a, b) = (a / scale, b / scale);
    Ok((2.0 * a * b / (a * a + b * b)).min(1.0))
}

/// Cosine of the angle between two task gradients, in [-1, 1].
pub fn grad_cosine_similarity(snapshot: &GradientSnapshot, i: usize, j: usize) -> Result<f64> {
    check_pair(snapshot, i, j)?;
    let (a, b) = (snapshot.norms()[i], snapshot.norms()[j]);
    if a == 0.0 || b == 0.0 {
        return Err(degenerate(format!("task {} has zero gradient", if a == 0.0 { i } else { j })));
    }
    Ok((snapshot.gram()[(i, j)] / (a * b)).clamp(-1.0, 1.0))
}

/// Condition number together with whether the eigenvalue floor was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub value: f64,
    pub floored: bool,
}

/// κ of `G·diag(w)` (or of `G` when `weights` is `None`), from the
/// eigenvalues of the K×K (scaled) Gram matrix.
pub fn conditioning(snapshot: &GradientSnapshot, weights: Option<&[f64]>) -> Result<Conditioning> {
    let gram = match weights {
        Some(w) => {
            if w.len() != snapshot.num_tasks() {
                return Err(Error::DimensionMismatch {
                    expected: snapshot.num_tasks(),
                    found: w.len(),
                });
            }
            snapshot.scaled_gram(w)
        }
        None => snapshot.gram().clone(),
    };
    let eig = symmetric_eigen(&gram);
    let lmax = eig.max_value();
    if !(lmax > 0.0) {
        return Err(degenerate("gradient matrix is zero"));
    }
    let floor = EIGENVALUE_FLOOR * lmax;
    let raw_min = eig.min_value();
    let floored = raw_min < floor;
    let lmin = raw_min.max(floor);
    Ok(Conditioning {
        value: (lmax / lmin).sqrt().max(1.0),
        floored,
    })
}

/// `σ_max / σ_min` of the task-gradient matrix, optionally scaled by weights.
pub fn condition_number(snapshot: &GradientSnapshot, weights: Option<&WeightVector>) -> Result<f64> {
    conditioning(snapshot, weights.map(|w| w.as_slice())).map(|c| c.value)
}

/// Per-task `lₖᵗ / lₖ⁰`.
pub fn inverse_learning_rate(snapshot: &LossSnapshot) -> Result<Vec<f64>> {
    ratios(snapshot.losses(), snapshot.initial_losses(), "initial")
}

/// Per-task `lₖᵗ / lₖᵗ⁻¹`.
pub fn loss_descending_rate(snapshot: &LossSnapshot) -> Result<Vec<f64>> {
    ratios(snapshot.losses(), snapshot.prev_losses(), "previous")
}

fn ratios(num: &[f64], den: &[f64], what: &str) -> Result<Vec<f64>> {
    if den.iter().any(|d| !(*d > 0.0)) {
        return Err(degenerate(format!("{what} loss must be strictly positive")));
    }
    Ok(num.iter().zip(den).map(|(n, d)| n / d).collect())
}

/// Each task's share of the total loss.
pub fn relative_loss(snapshot: &LossSnapshot) -> Result<Vec<f64>> {
    relative_shares(snapshot.losses())
}

/// `vᵢ / Σⱼ vⱼ` for nonnegative values.
pub fn relative_shares(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("losses must be finite and nonnegative"));
    }
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(degenerate("total loss is zero"));
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Unweighted mean of a pairwise metric over all unordered pairs; any
/// per-pair error is propagated.
pub fn pairwise_mean<F>(k: usize, mut metric: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if k < 2 {
        return Err(invalid("pairwise mean needs K >= 2"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += metric(i, j)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Like [`pairwise_mean`] but skips degenerate pairs. Returns the mean of the
/// remaining pairs (if any) and the number skipped.
pub fn pairwise_mean_skipping<F>(k: usize, mut metric: F) -> Result<(Option<f64>, usize)>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            match metric(i, j) {
                Ok(v) => {
                    sum += v;
                    count += 1;
                }
                Err(Error::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(((count > 0).then(|| sum / count as f64), skipped))
}

/// Population standard deviation (divisor K).
pub fn task_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Every metric for one iteration. Gradient metrics use `wₖgₖ`, relative
/// loss uses `wₖlₖ`; degenerate values are left out and flagged.
pub fn metric_record(
    grad: &GradientSnapshot,
    loss: &LossSnapshot,
    weights: &WeightVector,
) -> Result<MetricRecord> {
    if grad.iter() != loss.iter() {
        return Err(invalid(format!(
            "gradient snapshot iter {} does not match loss snapshot iter {}",
            grad.iter(),
            loss.iter()
        )));
    }
    let k = grad.num_tasks();
    for found in [loss.num_tasks(), weights.len()] {
        if found != k {
            return Err(Error::DimensionMismatch { expected: k, found });
        }
    }
    let w = weights.as_slice();
    let scaled = grad.scaled(w)?;
    let mut flags = DegenerateFlags {
        zero_grad_tasks: (0..k).filter(|&i| scaled.norms()[i] == 0.0).collect(),
        ..DegenerateFlags::default()
    };

    let (gms_mean, _) = pairwise_mean_skipping(k, |i, j| grad_magnitude_similarity(&scaled, i, j))?;
    let (gcs_mean, _) = pairwise_mean_skipping(k, |i, j| grad_cosine_similarity(&scaled, i, j))?;

    let cond_number = match conditioning(grad, Some(w)) {
        Ok(c) => {
            flags.cond_floored = c.floored;
            Some(c.value)
        }
        Err(Error::Degenerate(_)) => {
            flags.cond_undefined = true;
            None
        }
        Err(e) => return Err(e),
    };

    let ilr_per_task = inverse_learning_rate(loss)?;
    let ilr_std = task_std(&ilr_per_task);

    let ldr_per_task = match loss_descending_rate(loss) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => {
            flags.ldr_undefined = true;
            None
        }
        Err(e) => return Err(e),
    };

    let weighted: Vec<f64> = loss.losses().iter().zip(w).map(|(l, w)| l * w).collect();
    let rl_per_task = match relative_shares(&weighted) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => {
            flags.rl_undefined = true;
            None
        }
        Err(e) => return Err(e),
    };
    let rl_std = rl_per_task.as_deref().map(task_std);

    Ok(MetricRecord {
        iter: grad.iter(),
        gms_mean,
        gcs_mean,
        cond_number,
        ilr_per_task,
        ilr_std,
        ldr_per_task,
        rl_per_task,
        rl_std,
        weights: weights.clone(),
        flags,
    })
}
