use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{MultiTaskProblem, StepRule, TaskEvaluation};
use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigen, SquareMatrix};
use crate::rng::{stream_rng, Stream};

/// `lₖ(θ) = sₖ·½(θ−cₖ)ᵀQₖ(θ−cₖ) + bₖ` on a fully shared parameter vector.
///
/// With `noise > 0` the training-time centers are perturbed by
/// `N(0, noise²)` per coordinate, drawn afresh for each iteration.
#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    dim: usize,
    curvatures: Vec<Option<Vec<f64>>>,
    centers: Vec<Vec<f64>>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
    noise: f64,
    seed: u64,
    step: StepRule,
}

impl QuadraticFamily {
    /// `curvatures[k]` is a row-major D×D PSD matrix, or `None` for the
    /// identity.
    pub fn new(
        centers: Vec<Vec<f64>>,
        curvatures: Vec<Option<Vec<f64>>>,
        scales: Vec<f64>,
        offsets: Vec<f64>,
        step: StepRule,
    ) -> Result<Self> {
        let k = centers.len();
        if k == 0 {
            return Err(invalid("no tasks"));
        }
        let dim = centers[0].len();
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        for (name, len) in [
            ("curvatures", curvatures.len()),
            ("scales", scales.len()),
            ("offsets", offsets.len()),
        ] {
            if len != k {
                return Err(invalid(format!("{name} has {len} entries for {k} tasks")));
            }
        }
        for c in &centers {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.len(),
                });
            }
        }
        for q in curvatures.iter().flatten() {
            if q.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: q.len(),
                });
            }
        }
        if scales.iter().any(|s| !(*s > 0.0)) || offsets.iter().any(|b| !(*b >= 0.0)) {
            return Err(invalid("scales must be positive and offsets nonnegative"));
        }
        if !(step.step_size > 0.0) {
            return Err(invalid("step size must be positive"));
        }
        Ok(QuadraticFamily {
            dim,
            curvatures,
            centers,
            scales,
            offsets,
            noise: 0.0,
            seed: 0,
            step,
        })
    }

    pub fn with_noise(mut self, noise: f64, seed: u64) -> Self {
        self.noise = noise;
        self.seed = seed;
        self
    }

    pub fn with_step(mut self, step: StepRule) -> Self {
        self.step = step;
        self
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// `Q·x` for task `k`.
    pub fn apply_curvature(&self, k: usize, x: &[f64]) -> Vec<f64> {
        match &self.curvatures[k] {
            None => x.to_vec(),
            Some(q) => (0..self.dim)
                .map(|i| {
                    q[i * self.dim..(i + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect(),
        }
    }

    fn losses_and_grads(&self, params: &[f64], shift: Option<&[Vec<f64>]>) -> TaskEvaluation {
        let k = self.centers.len();
        let mut losses = Vec::with_capacity(k);
        let mut gradients = Vec::with_capacity(k);
        for t in 0..k {
            let d: Vec<f64> = match shift {
                Some(xi) => (0..self.dim)
                    .map(|i| params[i] - self.centers[t][i] - xi[t][i])
                    .collect(),
                None => (0..self.dim).map(|i| params[i] - self.centers[t][i]).collect(),
            };
            let qd = self.apply_curvature(t, &d);
            let s = self.scales[t];
            let quad: f64 = d.iter().zip(&qd).map(|(a, b)| a * b).sum();
            losses.push(s * 0.5 * quad + self.offsets[t]);
            gradients.push(qd.iter().map(|v| s * v).collect());
        }
        TaskEvaluation { losses, gradients }
    }

    fn center_noise(&self, iter: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(self.seed, Stream::GradientNoise, iter);
        (0..self.centers.len())
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.noise * z
                    })
                    .collect()
            })
            .collect()
    }
}

impl MultiTaskProblem for QuadraticFamily {
    fn num_tasks(&self) -> usize {
        self.centers.len()
    }

    fn num_params(&self) -> usize {
        self.dim
    }

    fn shared_params(&self) -> Range<usize> {
        0..self.dim
    }

    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn step_rule(&self) -> StepRule {
        self.step
    }

    fn evaluate(&self, params: &[f64], iter: u64) -> Result<TaskEvaluation> {
        if params.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: params.len(),
            });
        }
        if self.noise > 0.0 {
            let xi = self.center_noise(iter);
            Ok(self.losses_and_grads(params, Some(&xi)))
        } else {
            Ok(self.losses_and_grads(params, None))
        }
    }

    fn eval_losses(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: params.len(),
            });
        }
        Ok(self.losses_and_grads(params, None).losses)
    }

    fn reference_scores(&self) -> Option<Vec<f64>> {
        Some(self.offsets.clone())
    }
}

/// Step size shared by every method on problems built here.
pub const QUADRATIC_STEP: f64 = 0.02;

/// Identity-curvature quadratics whose gradients at `θ₀ = 0` have norms
/// `scales` and meet pairwise at `conflict_angle`. Offsets equal the
/// scales, so relative task degradations do not depend on `sₖ`.
pub fn make_quadratic_problem(
    k: usize,
    dim: usize,
    scales: &[f64],
    conflict_angle: f64,
    seed: u64,
) -> Result<QuadraticFamily> {
    if k < 2 {
        return Err(invalid("need K >= 2 tasks"));
    }
    if dim < k {
        return Err(invalid(format!("dimension {dim} is smaller than K = {k}")));
    }
    if scales.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: scales.len(),
        });
    }
    if !(0.0..=std::f64::consts::PI).contains(&conflict_angle) {
        return Err(invalid("conflict angle must lie in [0, π]"));
    }
    let c = conflict_angle.cos();
    if c < -1.0 / (k as f64 - 1.0) - 1e-12 {
        return Err(invalid(format!(
            "{k} directions cannot meet pairwise at angle {conflict_angle}"
        )));
    }

    // unit vectors in ℝᴷ with pairwise cosine c, from the eigenvectors of
    // their Gram matrix
    let mut gram = SquareMatrix::zeros(k);
    for i in 0..k {
        for j in 0..k {
            gram[(i, j)] = if i == j { 1.0 } else { c };
        }
    }
    let eig = symmetric_eigen(&gram);
    let coords: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|m| eig.vectors[(i, m)] * eig.values[m].max(0.0).sqrt())
                .collect()
        })
        .collect();

    let basis = random_orthonormal(dim, k, seed);
    // gradients at 0 are −sₖcₖ, so the centers carry the geometry
    let centers: Vec<Vec<f64>> = coords
        .iter()
        .map(|x| {
            (0..dim)
                .map(|d| -(0..k).map(|m| x[m] * basis[m][d]).sum::<f64>())
                .collect()
        })
        .collect();
    QuadraticFamily::new(
        centers,
        vec![None; k],
        scales.to_vec(),
        scales.to_vec(),
        StepRule {
            step_size: QUADRATIC_STEP,
            momentum: 0.0,
        },
    )
}

/// `m` orthonormal vectors in ℝᵈ.
fn random_orthonormal(dim: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::ProblemInit, 0);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(m);
    while out.len() < m {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= p * b;
                }
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

/// Gradient noise of the reference instance.
pub const REFERENCE_NOISE: f64 = 0.3;

/// Three tasks on ℝ²⁴ with scales (1, 3, 10), orthogonal gradients at
/// the start and noisy training-time gradients.
pub fn reference_instance(seed: u64) -> QuadraticFamily {
    make_quadratic_problem(3, 24, &[1.0, 3.0, 10.0], std::f64::consts::FRAC_PI_2, seed)
        .expect("reference instance parameters are valid")
        .with_noise(REFERENCE_NOISE, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::gradient_check_error;
    use crate::domain::snapshot_from_gradients;
    use crate::metrics::{grad_cosine_similarity, grad_magnitude_similarity};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn snapshot_at_start(p: &QuadraticFamily) -> crate::domain::GradientSnapshot {
        let e = p.evaluate(&p.initial_params(), 0).unwrap();
        snapshot_from_gradients(0, &e.gradients).unwrap()
    }

    #[test]
    fn orthogonal_equal_scales() {
        let p = make_quadratic_problem(2, 8, &[1.0, 1.0], FRAC_PI_2, 3).unwrap();
        let s = snapshot_at_start(&p);
        assert!((grad_magnitude_similarity(&s, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(grad_cosine_similarity(&s, 0, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scale_ratio_sets_magnitude_similarity() {
        let p = make_quadratic_problem(2, 8, &[1.0, 10.0], FRAC_PI_2, 3).unwrap();
        let s = snapshot_at_start(&p);
        assert!((grad_magnitude_similarity(&s, 0, 1).unwrap() - 20.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn requested_angle_is_realized() {
        for (k, angle) in [(2, 0.3), (2, PI), (3, 2.0), (4, FRAC_PI_2)] {
            let p = make_quadratic_problem(k, 10, &vec![1.0; k], angle, 11).unwrap();
            let s = snapshot_at_start(&p);
            for i in 0..k {
                for j in (i + 1)..k {
                    let c = grad_cosine_similarity(&s, i, j).unwrap();
                    assert!((c - angle.cos()).abs() < 1e-10, "k={k} angle={angle} c={c}");
                }
            }
        }
    }

    #[test]
    fn rejects_infeasible_geometry() {
        assert!(make_quadratic_problem(3, 10, &[1.0; 3], PI, 0).is_err());
        assert!(make_quadratic_problem(3, 2, &[1.0; 3], 1.0, 0).is_err());
        assert!(make_quadratic_problem(1, 2, &[1.0], 1.0, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = reference_instance(5);
        let mut rng = stream_rng(9, Stream::ProblemInit, 1);
        for i in 0..10 {
            let x: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(gradient_check_error(&p, &x, i).unwrap() < 1e-5);
        }
    }

    #[test]
    fn noise_is_repeatable_per_iteration() {
        let p = reference_instance(5);
        let x = vec![0.1; 24];
        assert_eq!(p.evaluate(&x, 3).unwrap(), p.evaluate(&x, 3).unwrap());
        assert_ne!(p.evaluate(&x, 3).unwrap(), p.evaluate(&x, 4).unwrap());
        assert_eq!(p.eval_losses(&x).unwrap(), p.eval_losses(&x).unwrap());
    }
}
