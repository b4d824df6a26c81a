//! Multi-task evaluation: relative performance drop and ranking.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Task metric `M` of a multi-task model and its single-task baseline `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub value: f64,
    pub baseline: f64,
    pub higher_is_better: bool,
}

impl TaskScore {
    pub fn lower_better(value: f64, baseline: f64) -> Self {
        TaskScore {
            value,
            baseline,
            higher_is_better: false,
        }
    }

    pub fn higher_better(value: f64, baseline: f64) -> Self {
        TaskScore {
            value,
            baseline,
            higher_is_better: true,
        }
    }

    /// `(−1)^σ · (M − B)/B · 100`: positive when the task got worse.
    pub fn signed_drop(&self) -> Result<f64> {
        if self.baseline == 0.0 || !self.baseline.is_finite() {
            return Err(invalid("baseline must be finite and nonzero"));
        }
        let d = (self.value - self.baseline) / self.baseline * 100.0;
        Ok(if self.higher_is_better { -d } else { d })
    }
}

/// Builds lower-is-better scores from final losses and baselines.
pub fn loss_scores(values: &[f64], baselines: &[f64]) -> Result<Vec<TaskScore>> {
    if values.len() != baselines.len() {
        return Err(Error::DimensionMismatch {
            expected: baselines.len(),
            found: values.len(),
        });
    }
    Ok(values
        .iter()
        .zip(baselines)
        .map(|(&v, &b)| TaskScore::lower_better(v, b))
        .collect())
}

/// Mean signed per-task drop, in percent.
pub fn delta_m(scores: &[TaskScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("no task scores"));
    }
    let mut sum = 0.0;
    for s in scores {
        sum += s.signed_drop()?;
    }
    Ok(sum / scores.len() as f64)
}

/// Sum of the per-task drops that are degradations, in percent.
pub fn delta_m_deg(scores: &[TaskScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("no task scores"));
    }
    let mut sum = 0.0;
    for s in scores {
        sum += s.signed_drop()?.max(0.0);
    }
    Ok(sum)
}

/// 1-based ranks in ascending order; ties share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("cannot rank NaN"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Mean over tasks of each method's rank (1 = best).
/// `method_scores[m][t]` is method `m`'s metric on task `t`.
pub fn mean_rank(method_scores: &[Vec<f64>], higher_is_better: &[bool]) -> Result<Vec<f64>> {
    let methods = method_scores.len();
    if methods < 2 {
        return Err(invalid("mean rank needs at least two methods"));
    }
    let tasks = higher_is_better.len();
    if tasks == 0 {
        return Err(invalid("no tasks"));
    }
    for row in method_scores {
        if row.len() != tasks {
            return Err(Error::DimensionMismatch {
                expected: tasks,
                found: row.len(),
            });
        }
    }
    let mut total = vec![0.0; methods];
    for t in 0..tasks {
        let col: Vec<f64> = method_scores
            .iter()
            .map(|row| if higher_is_better[t] { -row[t] } else { row[t] })
            .collect();
        for (acc, r) in total.iter_mut().zip(average_ranks(&col)?) {
            *acc += r;
        }
    }
    Ok(total.into_iter().map(|s| s / tasks as f64).collect())
}

/// Spearman's ρ: Pearson correlation of the average-tie ranks.
pub fn spearman_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(invalid("Spearman correlation needs at least three points"));
    }
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("Spearman correlation is undefined for constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
