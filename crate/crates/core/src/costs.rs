//! Window-averaged cost functions for weight selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{GradientSnapshot, LossSnapshot, WeightVector, WindowBuffer};
use crate::error::{degenerate, invalid, Error, Result};
use crate::linalg::SquareMatrix;
use crate::metrics::conditioning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostKind {
    /// Equalize the magnitudes of the weighted task gradients.
    #[serde(rename = "equal-grad")]
    EqualGradNorm,
    /// Equalize the weighted task losses.
    #[serde(rename = "equal-loss")]
    EqualLoss,
    /// Minimize the condition number of the weighted gradient matrix.
    #[serde(rename = "low-cond")]
    LowConditionNumber,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [
        CostKind::EqualGradNorm,
        CostKind::EqualLoss,
        CostKind::LowConditionNumber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostKind::EqualGradNorm => "equal-grad",
            CostKind::EqualLoss => "equal-loss",
            CostKind::LowConditionNumber => "low-cond",
        }
    }

    /// Whether the window cost is a quadratic form in `w`.
    pub fn is_quadratic(self) -> bool {
        !matches!(self, CostKind::LowConditionNumber)
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-grad" | "equal-g" => Ok(CostKind::EqualGradNorm),
            "equal-loss" | "equal-l" => Ok(CostKind::EqualLoss),
            "low-cond" => Ok(CostKind::LowConditionNumber),
            other => Err(invalid(format!(
                "unknown cost kind `{other}` (expected equal-grad, equal-loss or low-cond)"
            ))),
        }
    }
}

/// One row of the pair-difference matrix: `+left` at column `i`, `-right`
/// at column `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRow {
    pub i: usize,
    pub j: usize,
    pub left: f64,
    pub right: f64,
}

/// Sparse K(K−1)/2 × K matrix whose row for the pair `(i, j)`, `i < j`,
/// holds `mᵢ` at column `i` and `−mⱼ` at column `j`. Rows are in
/// lexicographic pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDifferenceMatrix {
    k: usize,
    rows: Vec<PairRow>,
}

impl PairDifferenceMatrix {
    pub fn num_tasks(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[PairRow] {
        &self.rows
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![0.0; self.k];
                row[r.i] = r.left;
                row[r.j] = -r.right;
                row
            })
            .collect()
    }

    /// `A·w`
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.left * w[r.i] - r.right * w[r.j]).collect()
    }

    /// `‖A·w‖²`
    pub fn squared_norm(&self, w: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let v = r.left * w[r.i] - r.right * w[r.j];
                v * v
            })
            .sum()
    }

    /// Adds `scale · AᵀA` into `acc`.
    fn accumulate_normal(&self, acc: &mut SquareMatrix, scale: f64) {
        for r in &self.rows {
            acc[(r.i, r.i)] += scale * r.left * r.left;
            acc[(r.j, r.j)] += scale * r.right * r.right;
            acc[(r.i, r.j)] -= scale * r.left * r.right;
            acc[(r.j, r.i)] -= scale * r.left * r.right;
        }
    }
}

pub fn build_pair_matrix(magnitudes: &[f64]) -> Result<PairDifferenceMatrix> {
    let k = magnitudes.len();
    if k < 2 {
        return Err(invalid("pair matrix needs K >= 2"));
    }
    let mut rows = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            rows.push(PairRow {
                i,
                j,
                left: magnitudes[i],
                right: magnitudes[j],
            });
        }
    }
    Ok(PairDifferenceMatrix { k, rows })
}

fn magnitudes(kind: CostKind, grad: &GradientSnapshot, loss: &LossSnapshot) -> Vec<f64> {
    match kind {
        CostKind::EqualGradNorm => grad.norms().to_vec(),
        CostKind::EqualLoss => loss.losses().iter().map(|l| l.abs()).collect(),
        CostKind::LowConditionNumber => unreachable!("κ cost has no pair matrix"),
    }
}

/// Per-iteration cost on raw weights. Shared by the public entry points and
/// the solver's inner loop.
pub(crate) fn cost_per_iteration_raw(
    kind: CostKind,
    w: &[f64],
    grad: &GradientSnapshot,
    loss: &LossSnapshot,
) -> Result<f64> {
    let k = grad.num_tasks();
    if w.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: w.len(),
        });
    }
    match kind {
        CostKind::EqualGradNorm | CostKind::EqualLoss => {
            let a = build_pair_matrix(&magnitudes(kind, grad, loss))?;
            Ok(a.squared_norm(w))
        }
        CostKind::LowConditionNumber => conditioning(grad, Some(w)).map(|c| c.value),
    }
}

/// `Fᵗ(w)` for one iteration.
pub fn cost_per_iteration(
    kind: CostKind,
    w: &WeightVector,
    grad: &GradientSnapshot,
    loss: &LossSnapshot,
) -> Result<f64> {
    if grad.iter() != loss.iter() {
        return Err(invalid("gradient and loss snapshots come from different iterations"));
    }
    cost_per_iteration_raw(kind, w.as_slice(), grad, loss)
}

pub(crate) fn window_cost_raw(kind: CostKind, w: &[f64], window: &WindowBuffer) -> Result<f64> {
    if window.is_empty() {
        return Err(invalid("window is empty"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (g, l) in window.snapshots() {
        match cost_per_iteration_raw(kind, w, g, l) {
            Ok(c) => {
                sum += c;
                used += 1;
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(degenerate("every iteration in the window is degenerate"));
    }
    if used < window.len() {
        log::debug!(
            "{kind} window cost: skipped {} degenerate iterations of {}",
            window.len() - used,
            window.len()
        );
    }
    Ok(sum / used as f64)
}

/// Mean of [`cost_per_iteration`] over the window, skipping degenerate
/// iterations.
pub fn window_cost(kind: CostKind, w: &WeightVector, window: &WindowBuffer) -> Result<f64> {
    window_cost_raw(kind, w.as_slice(), window)
}

/// `M = (1/τ) Σ AᵗᵀAᵗ`, so that `window_cost(w) = wᵀMw` for the
/// least-squares cost kinds.
pub fn quadratic_form(kind: CostKind, window: &WindowBuffer) -> Result<SquareMatrix> {
    if !kind.is_quadratic() {
        return Err(invalid(format!("{kind} is not a quadratic cost")));
    }
    let k = window
        .num_tasks()
        .ok_or_else(|| invalid("window is empty"))?;
    let mut m = SquareMatrix::zeros(k);
    let scale = 1.0 / window.len() as f64;
    for (g, l) in window.snapshots() {
        build_pair_matrix(&magnitudes(kind, g, l))?.accumulate_normal(&mut m, scale);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn orth_snapshot(iter: u64, norms: &[f64]) -> GradientSnapshot {
        let k = norms.len();
        let grads: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { norms[i] } else { 0.0 }).collect())
            .collect();
        GradientSnapshot::from_gradients(iter, &grads).unwrap()
    }

    fn window_of(entries: &[(&[f64], &[f64])]) -> WindowBuffer {
        let mut w = WindowBuffer::new(entries.len());
        for (t, (norms, losses)) in entries.iter().enumerate() {
            let t = t as u64;
            w.push(
                orth_snapshot(t, norms),
                LossSnapshot::new(t, losses.to_vec(), losses.to_vec(), losses.to_vec()).unwrap(),
            )
            .unwrap();
        }
        w
    }

    #[test]
    fn three_task_layout() {
        let a = build_pair_matrix(&[1.5, 2.5, 3.5]).unwrap();
        assert_eq!(
            a.to_dense(),
            vec![
                vec![1.5, -2.5, 0.0],
                vec![1.5, 0.0, -3.5],
                vec![0.0, 2.5, -3.5],
            ]
        );
    }

    #[test]
    fn two_task_layout() {
        assert_eq!(build_pair_matrix(&[1.0, 2.0]).unwrap().to_dense(), vec![vec![1.0, -2.0]]);
        assert!(build_pair_matrix(&[1.0]).is_err());
    }

    #[test]
    fn balanced_magnitudes_vanish_on_uniform_weights() {
        let a = build_pair_matrix(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.apply(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn per_iteration_examples() {
        let g = orth_snapshot(0, &[2.0, 1.0]);
        let l = LossSnapshot::first(0, vec![1.0, 1.0]).unwrap();
        let w = WeightVector::from_feasible(vec![2.0 / 3.0, 4.0 / 3.0]).unwrap();
        assert!(cost_per_iteration(CostKind::EqualGradNorm, &w, &g, &l).unwrap() < 1e-30);

        let l = LossSnapshot::first(0, vec![0.3, 0.3, 0.3]).unwrap();
        let g3 = orth_snapshot(0, &[1.0, 5.0, 9.0]);
        let c = cost_per_iteration(CostKind::EqualLoss, &WeightVector::uniform(3), &g3, &l).unwrap();
        assert_eq!(c, 0.0);

        let g = orth_snapshot(0, &[1.0, 2.0]);
        let l = LossSnapshot::first(0, vec![1.0, 1.0]).unwrap();
        let w = WeightVector::from_feasible(vec![4.0 / 3.0, 2.0 / 3.0]).unwrap();
        let c = cost_per_iteration(CostKind::LowConditionNumber, &w, &g, &l).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_examples() {
        let w = WeightVector::uniform(2);
        let constant = window_of(&[(&[1.0, 3.0], &[1.0, 2.0]), (&[1.0, 3.0], &[1.0, 2.0])]);
        let single = window_of(&[(&[1.0, 3.0], &[1.0, 2.0])]);
        for kind in CostKind::ALL {
            let a = window_cost(kind, &w, &constant).unwrap();
            let b = window_cost(kind, &w, &single).unwrap();
            assert!((a - b).abs() < 1e-15, "{kind}");
        }

        // costs 0 and 4
        let two = window_of(&[(&[1.0, 1.0], &[1.0, 1.0]), (&[1.0, 3.0], &[1.0, 1.0])]);
        assert_eq!(window_cost(CostKind::EqualGradNorm, &w, &two).unwrap(), 2.0);

        let balanced = window_of(&[(&[2.0, 2.0], &[1.0, 1.0]), (&[0.5, 0.5], &[1.0, 1.0])]);
        assert_eq!(window_cost(CostKind::EqualGradNorm, &w, &balanced).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_iterations_are_skipped() {
        let w = WeightVector::uniform(2);
        let mixed = window_of(&[(&[0.0, 0.0], &[1.0, 1.0]), (&[1.0, 2.0], &[1.0, 1.0])]);
        let c = window_cost(CostKind::LowConditionNumber, &w, &mixed).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
        let dead = window_of(&[(&[0.0, 0.0], &[1.0, 1.0])]);
        assert!(matches!(
            window_cost(CostKind::LowConditionNumber, &w, &dead),
            Err(Error::Degenerate(_))
        ));
        assert!(window_cost(CostKind::EqualGradNorm, &w, &WindowBuffer::new(1)).is_err());
    }

    #[test]
    fn quadratic_form_examples() {
        let m = quadratic_form(CostKind::EqualGradNorm, &window_of(&[(&[1.0, 1.0], &[1.0, 1.0])]))
            .unwrap();
        assert_eq!(m, SquareMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));

        let m = quadratic_form(
            CostKind::EqualGradNorm,
            &window_of(&[(&[3.0, 3.0, 3.0], &[1.0; 3]), (&[0.2, 0.2, 0.2], &[1.0; 3])]),
        )
        .unwrap();
        assert!(m.mul_vec(&[1.0, 1.0, 1.0]).iter().all(|v| v.abs() < 1e-15));
        assert!(quadratic_form(CostKind::LowConditionNumber, &WindowBuffer::new(1)).is_err());
    }

    fn arb_window() -> impl Strategy<Value = (WindowBuffer, Vec<f64>)> {
        (2usize..5, 1usize..6).prop_flat_map(|(k, tau)| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..10.0, k), tau),
                prop::collection::vec(prop::collection::vec(0.01f64..10.0, k), tau),
                prop::collection::vec(0.01f64..5.0, k),
            )
                .prop_map(move |(norms, losses, raw_w)| {
                    let mut win = WindowBuffer::new(norms.len());
                    for (t, (n, l)) in norms.iter().zip(&losses).enumerate() {
                        let t = t as u64;
                        win.push(
                            orth_snapshot(t, n),
                            LossSnapshot::new(t, l.clone(), l.clone(), l.clone()).unwrap(),
                        )
                        .unwrap();
                    }
                    (win, raw_w)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn quadratic_form_matches_direct_cost((win, raw_w) in arb_window()) {
            let w = WeightVector::new(&raw_w).unwrap();
            for kind in [CostKind::EqualGradNorm, CostKind::EqualLoss] {
                let m = quadratic_form(kind, &win).unwrap();
                let direct = window_cost(kind, &w, &win).unwrap();
                let quad = m.quadratic(w.as_slice());
                prop_assert!((direct - quad).abs() <= 1e-10 * direct.max(1e-300) + 1e-14);
                prop_assert!(direct >= 0.0);
            }
            prop_assert!(window_cost(CostKind::LowConditionNumber, &w, &win).map(|c| c >= 1.0).unwrap_or(true));
        }

        #[test]
        fn zero_cost_at_balance(norms in prop::collection::vec(0.1f64..10.0, 2..5), c in 0.1f64..3.0) {
            // weights ∝ 1/norms balance every weighted magnitude
            let raw: Vec<f64> = norms.iter().map(|n| c / n).collect();
            let w = WeightVector::new(&raw).unwrap();
            let mut win = WindowBuffer::new(1);
            win.push(orth_snapshot(0, &norms), LossSnapshot::first(0, norms.clone()).unwrap()).unwrap();
            prop_assume!(w.min() > crate::domain::DEFAULT_WEIGHT_FLOOR);
            prop_assert!(window_cost(CostKind::EqualGradNorm, &w, &win).unwrap() < 1e-8);
            prop_assert!(window_cost(CostKind::EqualLoss, &w, &win).unwrap() < 1e-8);
        }
    }
}
