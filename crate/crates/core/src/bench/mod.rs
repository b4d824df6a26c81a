//! Synthetic multi-task problems with exact gradients.

mod mlp;
mod quadratic;
mod sampling;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scheduler::Trainer;

pub use mlp::{make_mlp_problem, MlpRegressionFamily};
pub use quadratic::{
    make_quadratic_problem, reference_instance, QuadraticFamily, QUADRATIC_STEP, REFERENCE_NOISE,
};
pub use sampling::{random_loss_weighting_step, sample_weight_sets, WeightScheme, GRID_LOG_SPAN};

/// Gradient descent with optional heavy-ball momentum:
/// `v ← βv + Σwₖ∇lₖ`, `θ ← θ − h·v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    pub step_size: f64,
    #[serde(default)]
    pub momentum: f64,
}

/// Losses and full-parameter gradients of every task at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvaluation {
    pub losses: Vec<f64>,
    /// `gradients[k]` has one entry per parameter.
    pub gradients: Vec<Vec<f64>>,
}

/// A set of `K` losses over one parameter vector, some of whose entries
/// (the contiguous [`shared_params`](MultiTaskProblem::shared_params)
/// range) are used by every task.
pub trait MultiTaskProblem: Send + Sync {
    fn num_tasks(&self) -> usize;

    fn num_params(&self) -> usize;

    fn shared_params(&self) -> Range<usize>;

    fn initial_params(&self) -> Vec<f64>;

    fn step_rule(&self) -> StepRule;

    /// Training-time losses and gradients at iteration `iter`. May be
    /// stochastic, but must be a deterministic function of
    /// `(params, iter)`.
    fn evaluate(&self, params: &[f64], iter: u64) -> Result<TaskEvaluation>;

    /// Noise-free losses used for scoring.
    fn eval_losses(&self, params: &[f64]) -> Result<Vec<f64>>;

    /// Known single-task optimum losses, when available in closed form.
    fn reference_scores(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Largest per-task error of the analytic gradient against central
/// differences, relative to that task's largest gradient entry.
pub fn gradient_check_error(problem: &dyn MultiTaskProblem, params: &[f64], iter: u64) -> Result<f64> {
    let analytic = problem.evaluate(params, iter)?;
    let k = problem.num_tasks();
    let mut worst = 0.0_f64;
    let mut fd = vec![vec![0.0; params.len()]; k];
    let mut x = params.to_vec();
    for i in 0..params.len() {
        let h = 1e-6 * (1.0 + params[i].abs());
        x[i] = params[i] + h;
        let up = problem.evaluate(&x, iter)?.losses;
        x[i] = params[i] - h;
        let down = problem.evaluate(&x, iter)?.losses;
        x[i] = params[i];
        for t in 0..k {
            fd[t][i] = (up[t] - down[t]) / (2.0 * h);
        }
    }
    for t in 0..k {
        let g = &analytic.gradients[t];
        let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let err = g
            .iter()
            .zip(&fd[t])
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if scale > 0.0 {
            worst = worst.max(err / scale);
        } else {
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Trains one copy per task on that task alone for `iters` steps and
/// returns the best noise-free loss each copy reached.
pub fn run_stl_baselines(problem: &dyn MultiTaskProblem, iters: usize) -> Result<Vec<f64>> {
    let k = problem.num_tasks();
    if k == 0 {
        return Err(invalid("problem has no tasks"));
    }
    let mut best = Vec::with_capacity(k);
    for task in 0..k {
        let mut weights = vec![0.0; k];
        weights[task] = 1.0;
        let mut trainer = Trainer::new(problem);
        let mut b = problem.eval_losses(trainer.params())?[task];
        for _ in 0..iters {
            trainer.step(&weights)?;
            b = b.min(problem.eval_losses(trainer.params())?[task]);
        }
        best.push(b);
    }
    Ok(best)
}

/// Reference scores `Bₖ`: the closed form when the problem has one,
/// otherwise single-task training for `stl_iters` steps.
pub fn baseline_scores(problem: &dyn MultiTaskProblem, stl_iters: usize) -> Result<Vec<f64>> {
    match problem.reference_scores() {
        Some(b) => Ok(b),
        None => run_stl_baselines(problem, stl_iters),
    }
}
