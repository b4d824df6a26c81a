//! Weight selection: minimize a window cost over
//! `{w : Σw = K, w ≥ ε_w}`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::costs::{quadratic_form, window_cost_raw, CostKind};
use crate::domain::{check_floor, make_weight_vector, WeightVector, WindowBuffer, DEFAULT_WEIGHT_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigen, SquareMatrix};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    ClosedFormQP,
    SimplexSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub w_star: WeightVector,
    pub cost_at_w_star: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: SolverMethod,
}

const PSD_TOLERANCE: f64 = 1e-8;
const PINV_CUTOFF: f64 = 1e-12;

/// Euclidean projection onto `{Σw = K, w ≥ floor}`.
pub fn project_feasible(raw: &[f64], floor: f64) -> Result<WeightVector> {
    let k = raw.len();
    if k < 2 {
        return Err(invalid("weight vectors need K >= 2"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(invalid("weights must be finite"));
    }
    check_floor(floor, k)?;
    let target = k as f64;
    let mut active = vec![true; k];
    let mut out = vec![floor; k];
    loop {
        let n = active.iter().filter(|a| **a).count();
        let pinned = (k - n) as f64 * floor;
        let sum: f64 = (0..k).filter(|&i| active[i]).map(|i| raw[i]).sum();
        let shift = (sum - (target - pinned)) / n as f64;
        let mut dropped = false;
        for i in 0..k {
            if active[i] && raw[i] - shift < floor {
                active[i] = false;
                dropped = true;
            }
        }
        if !dropped {
            for i in 0..k {
                out[i] = if active[i] { raw[i] - shift } else { floor };
            }
            break;
        }
    }
    finish_feasible(out, floor)
}

/// Wraps a point that is feasible up to rounding.
fn finish_feasible(mut w: Vec<f64>, floor: f64) -> Result<WeightVector> {
    for v in &mut w {
        if *v < floor {
            *v = floor;
        }
    }
    match WeightVector::from_feasible(w.clone()) {
        Ok(v) => Ok(v),
        Err(_) => make_weight_vector(&w, floor),
    }
}

/// Minimizes `wᵀMw` subject to `1ᵀw = K`, `w ≥ floor`.
///
/// Free coordinates are solved from the equality-constrained stationarity
/// condition using the pseudo-inverse on the sum-zero subspace, which picks
/// the minimum-norm step away from uniform weights when `M` is singular
/// there. Coordinates that fall below the floor are pinned one at a time
/// and released again if their multiplier turns negative.
pub fn solve_quadratic(m: &SquareMatrix, floor: f64) -> Result<SolverReport> {
    let k = m.dim();
    if k < 2 {
        return Err(invalid("quadratic solve needs K >= 2"));
    }
    check_floor(floor, k)?;
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    if m.asymmetry() > 1e-10 {
        return Err(invalid("matrix is not symmetric"));
    }
    let eig = symmetric_eigen(m);
    let lmax = eig.max_value().max(0.0);
    let lmin = eig.min_value();
    if lmin < -PSD_TOLERANCE * lmax.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: lmin,
        });
    }

    let mut pinned = vec![false; k];
    let max_iters = 4 * k * k + 8;
    let mut iterations = 0;
    let mut w = vec![1.0; k];
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        w = solve_free(m, &pinned, floor);

        let worst = (0..k)
            .filter(|&i| !pinned[i] && w[i] < floor)
            .min_by(|&a, &b| w[a].total_cmp(&w[b]));
        if let Some(i) = worst {
            pinned[i] = true;
            continue;
        }

        let g = m.mul_vec(&w);
        let free: Vec<usize> = (0..k).filter(|&i| !pinned[i]).collect();
        let nu = free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
        let scale = g.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let release = (0..k)
            .filter(|&i| pinned[i] && g[i] - nu < -1e-10 * scale)
            .min_by(|&a, &b| (g[a] - nu).total_cmp(&(g[b] - nu)));
        match release {
            Some(i) => pinned[i] = false,
            None => {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("active-set loop did not settle after {iterations} passes; enumerating");
        w = enumerate_active_sets(m, floor);
        converged = true;
    }

    let w_star = finish_feasible(w, floor)?;
    Ok(SolverReport {
        cost_at_w_star: m.quadratic(w_star.as_slice()),
        w_star,
        iterations,
        converged,
        method: SolverMethod::ClosedFormQP,
    })
}

/// Equality-constrained minimizer with the pinned coordinates held at the
/// floor.
fn solve_free(m: &SquareMatrix, pinned: &[bool], floor: f64) -> Vec<f64> {
    let k = m.dim();
    let free: Vec<usize> = (0..k).filter(|&i| !pinned[i]).collect();
    let n = free.len();
    let mut w: Vec<f64> = vec![floor; k];
    let budget = k as f64 - (k - n) as f64 * floor;
    if n == 1 {
        w[free[0]] = budget;
        return w;
    }
    let base = budget / n as f64;
    for &i in &free {
        w[i] = base;
    }

    // r = P (M w)_F with w at the uniform-over-free point
    let mw = m.mul_vec(&w);
    let mut r: Vec<f64> = free.iter().map(|&i| mw[i]).collect();
    center(&mut r);

    let mff = m.submatrix(&free);
    let mut pmp = SquareMatrix::zeros(n);
    for a in 0..n {
        let mut row: Vec<f64> = (0..n).map(|b| mff[(a, b)]).collect();
        center(&mut row);
        for b in 0..n {
            pmp[(a, b)] = row[b];
        }
    }
    for b in 0..n {
        let mut col: Vec<f64> = (0..n).map(|a| pmp[(a, b)]).collect();
        center(&mut col);
        for a in 0..n {
            pmp[(a, b)] = col[a];
        }
    }

    let eig = symmetric_eigen(&pmp);
    let cutoff = PINV_CUTOFF * eig.max_value().max(0.0);
    let mut d = vec![0.0; n];
    for (idx, &lambda) in eig.values.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        let v = eig.vector(idx);
        let coef = -crate::linalg::dot(&v, &r) / lambda;
        for a in 0..n {
            d[a] += coef * v[a];
        }
    }
    center(&mut d);
    for (a, &i) in free.iter().enumerate() {
        w[i] = base + d[a];
    }
    w
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v {
        *x -= mean;
    }
}

fn enumerate_active_sets(m: &SquareMatrix, floor: f64) -> Vec<f64> {
    let k = m.dim();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << k) - 1 {
        let pinned: Vec<bool> = (0..k).map(|i| mask & (1 << i) != 0).collect();
        let w = solve_free(m, &pinned, floor);
        if w.iter().any(|v| *v < floor - 1e-12) {
            continue;
        }
        let c = m.quadratic(&w);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, w));
        }
    }
    best.map(|(_, w)| w).unwrap_or_else(|| vec![1.0; k])
}

/// Settings for [`solve_general`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchOptions {
    /// Maximum number of cost evaluations.
    pub budget: usize,
    /// Perturbed restarts per round, in addition to the incumbent.
    pub restarts: usize,
    /// A round that improves the best cost by less than this ends the search.
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            budget: 20_000,
            restarts: 4,
            tolerance: 1e-8,
            floor: DEFAULT_WEIGHT_FLOOR,
            seed: 0,
        }
    }
}

const RESTART_SPREAD: f64 = 1.5;
const MAX_ROUNDS: usize = 50;

struct BudgetExhausted;

struct Search<F> {
    cost: F,
    k: usize,
    floor: f64,
    budget: usize,
    evals: usize,
    best: Candidate,
}

#[derive(Clone)]
struct Candidate {
    w: WeightVector,
    cost: f64,
}

impl Candidate {
    /// Lower cost wins; near-equal costs go to the point closer to uniform.
    fn beats(&self, other: &Candidate) -> bool {
        let tie = 1e-12 * self.cost.abs().max(other.cost.abs()).max(1e-300);
        if self.cost < other.cost - tie {
            return true;
        }
        if self.cost > other.cost + tie {
            return false;
        }
        self.w.distance_to_uniform() < other.w.distance_to_uniform()
    }
}

impl<F> Search<F>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    fn weights(&self, z: &[f64]) -> Result<WeightVector> {
        // w = K · softmax(z, 0), floored
        let zmax = z.iter().copied().fold(0.0_f64, f64::max);
        let mut e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        e.push((-zmax).exp());
        let total: f64 = e.iter().sum();
        let raw: Vec<f64> = e.iter().map(|v| self.k as f64 * v / total).collect();
        make_weight_vector(&raw, self.floor)
    }

    fn eval(&mut self, z: &[f64]) -> std::result::Result<Result<f64>, BudgetExhausted> {
        if self.evals >= self.budget {
            return Err(BudgetExhausted);
        }
        self.evals += 1;
        let w = match self.weights(z) {
            Ok(w) => w,
            Err(e) => return Ok(Err(e)),
        };
        let c = match (self.cost)(w.as_slice()) {
            Ok(c) if c.is_finite() => c,
            Ok(_) | Err(Error::Degenerate(_)) => f64::INFINITY,
            Err(e) => return Ok(Err(e)),
        };
        let cand = Candidate { w, cost: c };
        if cand.beats(&self.best) {
            self.best = cand;
        }
        Ok(Ok(c))
    }

    /// Nelder–Mead from `start`.
    fn nelder_mead(&mut self, start: &[f64], cap: usize) -> std::result::Result<Result<()>, BudgetExhausted> {
        let n = start.len();
        let stop_at = self.evals + cap;
        let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
        for i in 0..n {
            let mut p = start.to_vec();
            p[i] += 0.5;
            simplex.push(p);
        }
        let mut f = Vec::with_capacity(n + 1);
        for p in &simplex {
            match self.eval(p)? {
                Ok(c) => f.push(c),
                Err(e) => return Ok(Err(e)),
            }
        }
        macro_rules! eval_or_return {
            ($p:expr) => {
                match self.eval($p)? {
                    Ok(c) => c,
                    Err(e) => return Ok(Err(e)),
                }
            };
        }
        while self.evals < stop_at {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            f = order.iter().map(|&i| f[i]).collect();

            let spread = (f[n] - f[0]).abs();
            let size = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if (f[0].is_finite() && spread <= 1e-13 * f[0].abs().max(1e-300)) || size < 1e-10 {
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|d| simplex[..n].iter().map(|p| p[d]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                (0..n).map(|d| centroid[d] + t * (simplex[n][d] - centroid[d])).collect()
            };

            let xr = along(-1.0);
            let fr = eval_or_return!(&xr);
            if fr < f[0] {
                let xe = along(-2.0);
                let fe = eval_or_return!(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    f[n] = fe;
                } else {
                    simplex[n] = xr;
                    f[n] = fr;
                }
            } else if fr < f[n - 1] {
                simplex[n] = xr;
                f[n] = fr;
            } else {
                let (xc, fc) = if fr < f[n] {
                    let xc = along(-0.5);
                    let fc = eval_or_return!(&xc);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval_or_return!(&xc);
                    (xc, fc)
                };
                if fc < f[n].min(fr) {
                    simplex[n] = xc;
                    f[n] = fc;
                } else {
                    for i in 1..=n {
                        let p: Vec<f64> = (0..n)
                            .map(|d| simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]))
                            .collect();
                        f[i] = eval_or_return!(&p);
                        simplex[i] = p;
                    }
                }
            }
        }
        Ok(Ok(()))
    }
}

fn to_z(w: &WeightVector) -> Vec<f64> {
    let s = w.as_slice();
    let last = s[s.len() - 1];
    s[..s.len() - 1].iter().map(|v| (v / last).ln()).collect()
}

/// Derivative-free minimization of an arbitrary cost over the feasible
/// weights, parameterized as `w = K·softmax(z)` with the last logit fixed at
/// zero. Each round runs Nelder–Mead from the incumbent and from
/// `restarts` randomly perturbed copies of it.
pub fn solve_general<F>(cost: F, w_init: &WeightVector, opts: &SearchOptions) -> Result<SolverReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let k = w_init.len();
    check_floor(opts.floor, k)?;
    let mut search = Search {
        cost,
        k,
        floor: opts.floor,
        budget: opts.budget,
        evals: 0,
        best: Candidate {
            w: w_init.clone(),
            cost: f64::INFINITY,
        },
    };
    let init_cost = (search.cost)(w_init.as_slice())?;
    if !init_cost.is_finite() {
        return Err(invalid("cost is not finite at the initial weights"));
    }
    search.evals = 1;
    search.best.cost = init_cost;
    let initial = search.best.clone();

    let mut rounds_done = 0;
    let mut converged = false;
    let mut round_start_cost = init_cost;
    let per_start = (opts.budget / (opts.restarts + 1)).clamp(50, 4000);
    'rounds: for round in 0..MAX_ROUNDS {
        let mut rng = stream_rng(opts.seed, Stream::SolverRestarts, round as u64);
        let anchor = to_z(&search.best.w);
        let mut starts = vec![anchor.clone()];
        for _ in 0..opts.restarts {
            starts.push(
                anchor
                    .iter()
                    .map(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + RESTART_SPREAD * n
                    })
                    .collect(),
            );
        }
        for s in &starts {
            match search.nelder_mead(s, per_start) {
                Err(BudgetExhausted) => break 'rounds,
                Ok(Err(e)) => return Err(e),
                Ok(Ok(())) => {}
            }
        }
        rounds_done += 1;
        let improvement = round_start_cost - search.best.cost;
        round_start_cost = search.best.cost;
        if improvement < opts.tolerance {
            converged = true;
            break;
        }
    }

    let best = if rounds_done == 0 {
        initial
    } else {
        search.best
    };
    Ok(SolverReport {
        w_star: best.w,
        cost_at_w_star: best.cost,
        iterations: search.evals,
        converged,
        method: SolverMethod::SimplexSearch,
    })
}

/// Minimizes `window_cost(kind, ·, window)`: closed form for the quadratic
/// kinds, simplex search (started at `w_prev`) otherwise.
pub fn solve_window(
    kind: CostKind,
    window: &WindowBuffer,
    w_prev: &WeightVector,
    opts: &SearchOptions,
) -> Result<SolverReport> {
    if kind.is_quadratic() {
        let m = quadratic_form(kind, window)?;
        let mut report = solve_quadratic(&m, opts.floor)?;
        report.cost_at_w_star = window_cost_raw(kind, report.w_star.as_slice(), window)?;
        Ok(report)
    } else {
        solve_general(|w| window_cost_raw(kind, w, window), w_prev, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::window_cost;
    use crate::domain::{GradientSnapshot, LossSnapshot};
    use crate::metrics::condition_number;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_WEIGHT_FLOOR;

    fn norms_window(norms: &[f64]) -> WindowBuffer {
        let k = norms.len();
        let grads: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { norms[i] } else { 0.0 }).collect())
            .collect();
        let mut w = WindowBuffer::new(1);
        w.push(
            GradientSnapshot::from_gradients(0, &grads).unwrap(),
            LossSnapshot::first(0, vec![1.0; k]).unwrap(),
        )
        .unwrap();
        w
    }

    #[test]
    fn projection_examples() {
        let w = project_feasible(&[0.5, 1.5], EPS).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 1.5]);
        let w = project_feasible(&[3.0, -1.0], EPS).unwrap();
        assert!((w[0] - (2.0 - EPS)).abs() < 1e-14 && w[1] == EPS);
        let w = project_feasible(&[0.0, 0.0, 6.0], EPS).unwrap();
        assert_eq!(w[0], EPS);
        assert_eq!(w[1], EPS);
        assert!((w[2] - (3.0 - 2.0 * EPS)).abs() < 1e-14);
        assert!(project_feasible(&[1.0, f64::NAN], EPS).is_err());
    }

    #[test]
    fn quadratic_balances_gradient_norms() {
        let m = quadratic_form(CostKind::EqualGradNorm, &norms_window(&[2.0, 1.0])).unwrap();
        let r = solve_quadratic(&m, EPS).unwrap();
        assert!((r.w_star[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.w_star[1] - 4.0 / 3.0).abs() < 1e-12);
        assert!(r.cost_at_w_star.abs() < 1e-12);
        assert_eq!(r.method, SolverMethod::ClosedFormQP);
    }

    #[test]
    fn equal_norms_give_uniform() {
        for k in 2..6 {
            let m = quadratic_form(CostKind::EqualGradNorm, &norms_window(&vec![1.7; k])).unwrap();
            let r = solve_quadratic(&m, EPS).unwrap();
            for v in r.w_star.as_slice() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix_gives_uniform() {
        let r = solve_quadratic(&SquareMatrix::zeros(3), EPS).unwrap();
        assert_eq!(r.w_star.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn floor_becomes_active() {
        // (2w₀ + w₁)² + (w₁ − w₂)² is zero at w = (−1, 2, 2)
        let m = SquareMatrix::from_rows(&[
            vec![4.0, 2.0, 0.0],
            vec![2.0, 2.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ]);
        let r = solve_quadratic(&m, EPS).unwrap();
        assert_eq!(r.w_star[0], EPS);
        let best = grid_min(3, 0.01, |w| m.quadratic(w));
        assert!(r.cost_at_w_star <= best + 1e-4);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let m = SquareMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(
            solve_quadratic(&m, EPS),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn low_cond_balances_orthogonal_gradients() {
        let win = norms_window(&[1.0, 2.0]);
        let r = solve_window(
            CostKind::LowConditionNumber,
            &win,
            &WeightVector::uniform(2),
            &SearchOptions::default(),
        )
        .unwrap();
        assert!((r.w_star[0] - 4.0 / 3.0).abs() < 0.02 * 4.0 / 3.0);
        assert!((r.w_star[1] - 2.0 / 3.0).abs() < 0.02 * 2.0 / 3.0);
        let (g, _) = &win.snapshots()[0];
        assert!(condition_number(g, Some(&r.w_star)).unwrap() <= 1.01);
        assert!(r.converged);
    }

    #[test]
    fn low_cond_keeps_optimal_start() {
        let win = norms_window(&[1.0, 1.0, 1.0]);
        let r = solve_window(
            CostKind::LowConditionNumber,
            &win,
            &WeightVector::uniform(3),
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(r.w_star.as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(r.cost_at_w_star, 1.0);
    }

    #[test]
    fn exhausted_budget_returns_start() {
        let win = norms_window(&[1.0, 2.0]);
        let start = WeightVector::uniform(2);
        let opts = SearchOptions {
            budget: 3,
            ..SearchOptions::default()
        };
        let r = solve_window(CostKind::LowConditionNumber, &win, &start, &opts).unwrap();
        assert_eq!(r.w_star, start);
        assert!(!r.converged);
    }

    #[test]
    fn search_is_deterministic() {
        let win = norms_window(&[1.0, 3.0, 0.5]);
        let run = || {
            solve_window(
                CostKind::LowConditionNumber,
                &win,
                &WeightVector::uniform(3),
                &SearchOptions::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    pub(crate) fn grid_min(k: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let n = (k as f64 / step).round() as usize;
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; k - 1];
        loop {
            let used: usize = idx.iter().sum();
            if used <= n {
                let mut w: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
                w.push((n - used) as f64 * step);
                if w.iter().all(|v| *v >= EPS) {
                    best = best.min(f(&w));
                }
            }
            let mut d = 0;
            loop {
                if d == k - 1 {
                    return best;
                }
                idx[d] += 1;
                if idx[d] <= n {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn quadratic_solution_is_feasible_and_stationary(
            rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 2..5),
        ) {
            let k = rows.len();
            // M = BᵀB is PSD
            let mut m = SquareMatrix::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                }
            }
            let r = solve_quadratic(&m, EPS).unwrap();
            let w = r.w_star.as_slice();
            prop_assert!((w.iter().sum::<f64>() - k as f64).abs() < 1e-8);
            prop_assert!(w.iter().all(|v| *v >= EPS));
            if w.iter().all(|v| *v > EPS) {
                let g = m.mul_vec(w);
                let mean = g.iter().sum::<f64>() / k as f64;
                let scale = g.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-12);
                for v in &g {
                    prop_assert!((v - mean).abs() <= 1e-6 * scale);
                }
            }
            let best = grid_min(k, if k > 3 { 0.05 } else { 0.01 }, |w| m.quadratic(w));
            prop_assert!(r.cost_at_w_star <= best + 1e-9);
        }

        #[test]
        fn projection_is_idempotent(raw in prop::collection::vec(-5.0f64..5.0, 2..6)) {
            let w = project_feasible(&raw, EPS).unwrap();
            let again = project_feasible(w.as_slice(), EPS).unwrap();
            for (a, b) in w.as_slice().iter().zip(again.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn search_never_worse_than_start(
            norms in prop::collection::vec(0.1f64..5.0, 2..4),
            raw in prop::collection::vec(0.1f64..3.0, 4),
        ) {
            let k = norms.len();
            let win = norms_window(&norms);
            let start = WeightVector::new(&raw[..k]).unwrap();
            let c0 = window_cost(CostKind::LowConditionNumber, &start, &win).unwrap();
            let r = solve_window(CostKind::LowConditionNumber, &win, &start, &SearchOptions::default()).unwrap();
            prop_assert!(r.cost_at_w_star <= c0);
            let direct = window_cost(CostKind::LowConditionNumber, &r.w_star, &win).unwrap();
            prop_assert!((direct - r.cost_at_w_star).abs() <= 1e-8);
        }
    }
}
