//! Training loops: fixed scalarization, per-step random weights, and the
//! two-phase AutoScale schedule.

use serde::{Deserialize, Serialize};

use crate::bench::{random_loss_weighting_step, MultiTaskProblem};
use crate::costs::{window_cost_raw, CostKind};
use crate::domain::{
    check_floor, snapshot_from_gradients, GradientSnapshot, LossSnapshot, MetricRecord, WeightVector,
    WindowBuffer, DEFAULT_WEIGHT_FLOOR,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::metric_record;
use crate::solver::{project_feasible, solve_window, SearchOptions, SolverReport};

/// Parameters and optimizer state of one training run.
pub struct Trainer<'p> {
    problem: &'p dyn MultiTaskProblem,
    params: Vec<f64>,
    velocity: Vec<f64>,
    iter: u64,
    initial_losses: Option<Vec<f64>>,
    prev_losses: Option<Vec<f64>>,
}

/// Snapshots taken at the start of one step, before the update.
#[derive(Debug, Clone)]
pub struct StepSnapshots {
    pub grad: GradientSnapshot,
    pub loss: LossSnapshot,
}

impl<'p> Trainer<'p> {
    pub fn new(problem: &'p dyn MultiTaskProblem) -> Self {
        let params = problem.initial_params();
        let n = params.len();
        Trainer {
            problem,
            params,
            velocity: vec![0.0; n],
            iter: 0,
            initial_losses: None,
            prev_losses: None,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// One update on `Σ weights[k]·lₖ`. `weights` need not be feasible.
    pub fn step(&mut self, weights: &[f64]) -> Result<StepSnapshots> {
        let k = self.problem.num_tasks();
        if weights.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: weights.len(),
            });
        }
        let eval = self.problem.evaluate(&self.params, self.iter)?;
        if eval.losses.len() != k || eval.gradients.len() != k {
            return Err(Error::Problem(format!(
                "evaluation returned {} losses and {} gradients for {k} tasks",
                eval.losses.len(),
                eval.gradients.len()
            )));
        }
        if eval.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Problem(format!("non-finite loss at iteration {}", self.iter)));
        }
        let shared = self.problem.shared_params();
        let shared_grads: Vec<&[f64]> = eval.gradients.iter().map(|g| &g[shared.clone()]).collect();
        let grad = snapshot_from_gradients(self.iter, &shared_grads)?;

        let initial = self.initial_losses.get_or_insert_with(|| eval.losses.clone()).clone();
        let prev = self.prev_losses.take().unwrap_or_else(|| eval.losses.clone());
        let loss = LossSnapshot::new(self.iter, eval.losses.clone(), initial, prev)?;

        let rule = self.problem.step_rule();
        for (i, v) in self.velocity.iter_mut().enumerate() {
            let g: f64 = (0..k).map(|t| weights[t] * eval.gradients[t][i]).sum();
            *v = rule.momentum * *v + g;
        }
        for (p, v) in self.params.iter_mut().zip(&self.velocity) {
            *p -= rule.step_size * v;
        }
        self.prev_losses = Some(eval.losses);
        self.iter += 1;
        Ok(StepSnapshots { grad, loss })
    }
}

/// Everything logged for one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub grad: GradientSnapshot,
    pub loss: LossSnapshot,
    pub metrics: MetricRecord,
}

pub trait TraceSink {
    fn record(&mut self, rec: &IterationRecord) -> Result<()>;
}

impl TraceSink for Vec<IterationRecord> {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _rec: &IterationRecord) -> Result<()> {
        Ok(())
    }
}

impl<A: TraceSink, B: TraceSink> TraceSink for (A, B) {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        self.0.record(rec)?;
        self.1.record(rec)
    }
}

impl<S: TraceSink> TraceSink for Option<S> {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        match self {
            Some(s) => s.record(rec),
            None => Ok(()),
        }
    }
}

impl<S: TraceSink + ?Sized> TraceSink for &mut S {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        (**self).record(rec)
    }
}

/// Running means of the scalar metrics over a run. Iterations where a
/// metric is undefined do not count towards that metric's mean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub gms: RunningMean,
    pub gcs: RunningMean,
    pub cond: RunningMean,
    pub ilr_std: RunningMean,
    pub rl_std: RunningMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    sum: f64,
    count: u64,
}

impl RunningMean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

impl MetricMeans {
    pub fn push(&mut self, m: &MetricRecord) {
        if let Some(v) = m.gms_mean {
            self.gms.push(v);
        }
        if let Some(v) = m.gcs_mean {
            self.gcs.push(v);
        }
        if let Some(v) = m.cond_number {
            self.cond.push(v);
        }
        self.ilr_std.push(m.ilr_std);
        if let Some(v) = m.rl_std {
            self.rl_std.push(v);
        }
    }
}

impl TraceSink for MetricMeans {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        self.push(&rec.metrics);
        Ok(())
    }
}

fn logged_step(trainer: &mut Trainer<'_>, w: &WeightVector, sink: &mut dyn TraceSink) -> Result<StepSnapshots> {
    let snaps = trainer.step(w.as_slice())?;
    let metrics = metric_record(&snaps.grad, &snaps.loss, w)?;
    sink.record(&IterationRecord {
        grad: snaps.grad.clone(),
        loss: snaps.loss.clone(),
        metrics,
    })?;
    Ok(snaps)
}

/// Trains for `iters` steps using `schedule(iter)` as the weights.
pub fn run_weight_schedule<F>(
    problem: &dyn MultiTaskProblem,
    iters: usize,
    mut schedule: F,
    sink: &mut dyn TraceSink,
) -> Result<Vec<f64>>
where
    F: FnMut(u64) -> Result<WeightVector>,
{
    let mut trainer = Trainer::new(problem);
    for t in 0..iters as u64 {
        let w = schedule(t)?;
        if w.len() != problem.num_tasks() {
            return Err(Error::DimensionMismatch {
                expected: problem.num_tasks(),
                found: w.len(),
            });
        }
        logged_step(&mut trainer, &w, sink)?;
    }
    Ok(trainer.into_params())
}

/// Gradient descent on `Σ wₖlₖ` for `iters` steps.
pub fn run_fixed_scalarization(
    problem: &dyn MultiTaskProblem,
    w: &WeightVector,
    iters: usize,
    sink: &mut dyn TraceSink,
) -> Result<Vec<f64>> {
    run_weight_schedule(problem, iters, |_| Ok(w.clone()), sink)
}

/// Fresh random weights at every step.
pub fn run_random_weighting(
    problem: &dyn MultiTaskProblem,
    iters: usize,
    seed: u64,
    sink: &mut dyn TraceSink,
) -> Result<Vec<f64>> {
    let k = problem.num_tasks();
    run_weight_schedule(problem, iters, |t| random_loss_weighting_step(k, seed, t), sink)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoScaleConfig {
    pub total_iters: usize,
    #[serde(default = "default_alpha")]
    pub exploration_ratio: f64,
    #[serde(default = "default_tau")]
    pub window_size: usize,
    #[serde(default = "default_eta")]
    pub aggregation_size: usize,
    pub cost_kind: CostKind,
    #[serde(default)]
    pub seed: u64,
    /// Snapshot every `stride`-th iteration of a window.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_floor")]
    pub weight_floor: f64,
    /// Evaluation budget of the simplex search.
    #[serde(default = "default_budget")]
    pub search_budget: usize,
    #[serde(default = "default_restarts")]
    pub search_restarts: usize,
}

fn default_alpha() -> f64 {
    0.2
}
fn default_tau() -> usize {
    50
}
fn default_eta() -> usize {
    10
}
fn default_stride() -> usize {
    1
}
fn default_floor() -> f64 {
    DEFAULT_WEIGHT_FLOOR
}
fn default_budget() -> usize {
    SearchOptions::default().budget
}
fn default_restarts() -> usize {
    SearchOptions::default().restarts
}

impl AutoScaleConfig {
    pub fn new(total_iters: usize, cost_kind: CostKind, seed: u64) -> Self {
        AutoScaleConfig {
            total_iters,
            exploration_ratio: default_alpha(),
            window_size: default_tau(),
            aggregation_size: default_eta(),
            cost_kind,
            seed,
            stride: default_stride(),
            weight_floor: default_floor(),
            search_budget: default_budget(),
            search_restarts: default_restarts(),
        }
    }

    /// Length of the exploration phase, `αT`.
    pub fn exploration_iters(&self) -> Result<usize> {
        let a = self.exploration_ratio;
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("exploration ratio {a} is outside [0, 1]")));
        }
        let exact = a * self.total_iters as f64;
        let n = exact.round();
        if (exact - n).abs() > 1e-9 * exact.max(1.0) {
            return Err(Error::Config(format!(
                "exploration ratio {a} times {} iterations is not a whole number",
                self.total_iters
            )));
        }
        Ok(n as usize)
    }

    /// Number of exploration windows, `αT/τ`.
    pub fn num_windows(&self) -> Result<usize> {
        Ok(self.exploration_iters()? / self.window_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if self.window_size == 0 || self.aggregation_size == 0 || self.stride == 0 {
            return Err(Error::Config(
                "window_size, aggregation_size and stride must be positive".into(),
            ));
        }
        let explore = self.exploration_iters()?;
        if explore == 0 {
            return Ok(());
        }
        if explore % self.window_size != 0 {
            return Err(Error::Config(format!(
                "window size {} does not divide the {explore} exploration iterations",
                self.window_size
            )));
        }
        if !self.window_size.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} does not divide window size {}",
                self.stride, self.window_size
            )));
        }
        let windows = explore / self.window_size;
        if self.aggregation_size > windows {
            return Err(Error::Config(format!(
                "aggregation size {} exceeds the {windows} exploration windows; \
                 raise total_iters or exploration_ratio, or lower aggregation_size",
                self.aggregation_size
            )));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0) {
            return Err(Error::Config("weight_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn search_options(&self, window: usize) -> SearchOptions {
        SearchOptions {
            budget: self.search_budget,
            restarts: self.search_restarts,
            floor: self.weight_floor,
            seed: self.seed ^ (window as u64).wrapping_mul(0xD134_2543_DE82_EF95),
            ..SearchOptions::default()
        }
    }
}

/// Result of the weight solve at the end of one exploration window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolve {
    /// 1-based window index `i`.
    pub index: usize,
    /// `wⁱ`
    pub weights: WeightVector,
    /// Window cost of the weights used during the window.
    pub previous_cost: f64,
    /// Window cost of `wⁱ`.
    pub cost: f64,
    pub report: SolverReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistory {
    pub windows: Vec<WindowSolve>,
    /// `ŵ`
    pub final_weight: WeightVector,
    /// Weight used at each iteration, indexed by iteration.
    pub per_iteration: Vec<WeightVector>,
}

impl WeightHistory {
    pub fn window_weights(&self) -> impl Iterator<Item = (usize, &WeightVector)> {
        self.windows.iter().map(|w| (w.index, &w.weights))
    }
}

#[derive(Debug, Clone)]
pub struct AutoScaleOutcome {
    pub params: Vec<f64>,
    pub history: WeightHistory,
}

/// Mean of the last `eta` window weights, projected back onto the feasible
/// set.
pub fn aggregate_final_weight(window_weights: &[WeightVector], eta: usize, floor: f64) -> Result<WeightVector> {
    if eta == 0 {
        return Err(invalid("aggregation size must be positive"));
    }
    if window_weights.len() < eta {
        return Err(Error::Config(format!(
            "only {} window weights available for aggregation size {eta}",
            window_weights.len()
        )));
    }
    let tail = &window_weights[window_weights.len() - eta..];
    let k = tail[0].len();
    check_floor(floor, k)?;
    let mut mean = vec![0.0; k];
    for w in tail {
        if w.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: w.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(w.as_slice()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= eta as f64;
    }
    project_feasible(&mean, floor)
}

/// Exploration windows that re-solve the weights, then fixed-weight
/// training with the aggregate of the last `η` window weights.
pub fn run_autoscale(
    problem: &dyn MultiTaskProblem,
    config: &AutoScaleConfig,
    sink: &mut dyn TraceSink,
) -> Result<AutoScaleOutcome> {
    config.validate()?;
    let k = problem.num_tasks();
    if k < 2 {
        return Err(invalid("AutoScale needs K >= 2 tasks"));
    }
    let num_windows = config.num_windows()?;
    let tau = config.window_size;
    let mut trainer = Trainer::new(problem);
    let mut per_iteration = Vec::with_capacity(config.total_iters);
    let mut windows: Vec<WindowSolve> = Vec::with_capacity(num_windows);
    let mut w = WeightVector::uniform(k);

    for i in 1..=num_windows {
        let mut buffer = WindowBuffer::with_stride(tau / config.stride, config.stride as u64);
        for j in 0..tau {
            let snaps = logged_step(&mut trainer, &w, sink)?;
            per_iteration.push(w.clone());
            if j % config.stride == 0 {
                buffer.push(snaps.grad, snaps.loss)?;
            }
        }
        let report = solve_window(config.cost_kind, &buffer, &w, &config.search_options(i))?;
        let previous_cost = window_cost_raw(config.cost_kind, w.as_slice(), &buffer)?;
        let mut cost = window_cost_raw(config.cost_kind, report.w_star.as_slice(), &buffer)?;
        let next = if cost <= previous_cost {
            report.w_star.clone()
        } else {
            cost = previous_cost;
            w.clone()
        };
        log::debug!(
            "window {i}/{num_windows}: {} -> {:?} (cost {previous_cost:.6e} -> {cost:.6e})",
            config.cost_kind,
            next.as_slice()
        );
        windows.push(WindowSolve {
            index: i,
            weights: next.clone(),
            previous_cost,
            cost,
            report,
        });
        w = next;
    }

    let final_weight = if num_windows == 0 {
        WeightVector::uniform(k)
    } else {
        let ws: Vec<WeightVector> = windows.iter().map(|s| s.weights.clone()).collect();
        aggregate_final_weight(&ws, config.aggregation_size, config.weight_floor)?
    };
    while per_iteration.len() < config.total_iters {
        logged_step(&mut trainer, &final_weight, sink)?;
        per_iteration.push(final_weight.clone());
    }

    Ok(AutoScaleOutcome {
        params: trainer.into_params(),
        history: WeightHistory {
            windows,
            final_weight,
            per_iteration,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::make_quadratic_problem;
    use std::f64::consts::FRAC_PI_2;

    fn small_problem() -> crate::bench::QuadraticFamily {
        make_quadratic_problem(2, 6, &[1.0, 4.0], FRAC_PI_2, 2)
            .unwrap()
            .with_noise(0.1, 2)
    }

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::from_feasible(v.to_vec()).unwrap()
    }

    #[test]
    fn window_count() {
        let mut c = AutoScaleConfig::new(1000, CostKind::EqualGradNorm, 0);
        c.aggregation_size = 4;
        c.validate().unwrap();
        assert_eq!(c.num_windows().unwrap(), 4);
        assert_eq!(c.exploration_iters().unwrap(), 200);
    }

    #[test]
    fn config_errors() {
        let mut c = AutoScaleConfig::new(1000, CostKind::EqualGradNorm, 0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.aggregation_size = 2;
        c.window_size = 30;
        assert!(c.validate().is_err());
        c.window_size = 50;
        c.stride = 3;
        assert!(c.validate().is_err());
        c.stride = 5;
        c.validate().unwrap();
        c.exploration_ratio = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn aggregation_examples() {
        let last = [wv(&[1.0, 1.0]), wv(&[0.8, 1.2])];
        let w = aggregate_final_weight(&last, 2, DEFAULT_WEIGHT_FLOOR).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 1.1).abs() < 1e-15);

        let w = aggregate_final_weight(&last, 1, DEFAULT_WEIGHT_FLOOR).unwrap();
        assert_eq!(w, last[1]);

        let same = vec![wv(&[0.5, 1.5]); 4];
        assert_eq!(aggregate_final_weight(&same, 3, DEFAULT_WEIGHT_FLOOR).unwrap(), same[0]);

        let three = [wv(&[1.2, 0.8]), wv(&[1.0, 1.0]), wv(&[0.7, 1.3])];
        let w = aggregate_final_weight(&three, 3, DEFAULT_WEIGHT_FLOOR).unwrap();
        assert!((w[0] - 2.9 / 3.0).abs() < 1e-12 && (w[1] - 3.1 / 3.0).abs() < 1e-12);

        assert!(matches!(
            aggregate_final_weight(&three, 4, DEFAULT_WEIGHT_FLOOR),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn autoscale_shape() {
        let p = small_problem();
        let mut c = AutoScaleConfig::new(1000, CostKind::EqualGradNorm, 0);
        c.aggregation_size = 2;
        let mut trace = Vec::new();
        let out = run_autoscale(&p, &c, &mut trace).unwrap();
        let h = &out.history;
        assert_eq!(h.windows.len(), 4);
        assert_eq!(trace.len(), 1000);
        assert_eq!(h.per_iteration.len(), 1000);
        let mut prev = WeightVector::uniform(2);
        for (i, s) in h.windows.iter().enumerate() {
            for t in i * 50..(i + 1) * 50 {
                assert_eq!(h.per_iteration[t], prev);
                assert_eq!(trace[t].metrics.weights, prev);
            }
            assert!(s.cost <= s.previous_cost);
            prev = s.weights.clone();
        }
        for t in 200..1000 {
            assert_eq!(h.per_iteration[t], h.final_weight);
        }
        // larger-gradient task gets the smaller weight
        assert!(h.final_weight[0] > h.final_weight[1]);
    }

    #[test]
    fn zero_exploration_is_unitary() {
        let p = small_problem();
        let mut c = AutoScaleConfig::new(300, CostKind::LowConditionNumber, 0);
        c.exploration_ratio = 0.0;
        let mut a = Vec::new();
        let out = run_autoscale(&p, &c, &mut a).unwrap();
        let mut b = Vec::new();
        let params = run_fixed_scalarization(&p, &WeightVector::uniform(2), 300, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(out.params, params);
        assert!(out.history.windows.is_empty());
    }

    #[test]
    fn fixed_runs_are_deterministic() {
        let p = small_problem();
        let w = wv(&[0.4, 1.6]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_fixed_scalarization(&p, &w, 200, &mut a).unwrap();
        run_fixed_scalarization(&p, &w, 200, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_task_training_via_raw_weights() {
        // with all weight on one task the trainer is plain single-task descent
        let p = make_quadratic_problem(2, 4, &[1.0, 1.0], FRAC_PI_2, 0).unwrap();
        let mut trainer = Trainer::new(&p);
        for _ in 0..2000 {
            trainer.step(&[1.0, 0.0]).unwrap();
        }
        let l = p.eval_losses(trainer.params()).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_weighting_changes_every_step() {
        let p = small_problem();
        let mut trace = Vec::new();
        run_random_weighting(&p, 5, 3, &mut trace).unwrap();
        assert_ne!(trace[0].metrics.weights, trace[1].metrics.weights);
        assert_eq!(trace[2].metrics.weights, random_loss_weighting_step(2, 3, 2).unwrap());
    }
}
