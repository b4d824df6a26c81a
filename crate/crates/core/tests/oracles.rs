use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autoscale::bench::{
    make_quadratic_problem, run_stl_baselines, MultiTaskProblem, QuadraticFamily, StepRule,
};
use autoscale::domain::{snapshot_from_gradients, LossSnapshot, WeightVector};
use autoscale::metrics::{condition_number, grad_cosine_similarity, metric_record};
use autoscale::scheduler::{run_fixed_scalarization, NullSink};

fn random_grads(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn gram_path_matches_full_matrix_at_large_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for &d in &[10, 1_000, 10_000] {
        for k in 2..=4 {
            let grads = random_grads(&mut rng, k, d);
            let s = snapshot_from_gradients(0, &grads).unwrap();
            let g = DMatrix::from_fn(d, k, |r, c| grads[c][r]);
            let gram = g.transpose() * &g;
            for i in 0..k {
                for j in 0..k {
                    let rel = (s.gram()[(i, j)] - gram[(i, j)]).abs() / gram[(i, i)];
                    assert!(rel < 1e-12, "d={d} k={k} ({i},{j})");
                }
            }
            let sv = g.singular_values();
            let oracle = sv.max() / sv.min();
            let ours = condition_number(&s, None).unwrap();
            assert!((ours - oracle).abs() / oracle < 1e-8, "d={d} k={k}: {ours} vs {oracle}");

            let w = WeightVector::new(&(0..k).map(|i| 1.0 + i as f64).collect::<Vec<_>>()).unwrap();
            let gw = DMatrix::from_fn(d, k, |r, c| w[c] * grads[c][r]);
            let sv = gw.singular_values();
            let weighted = condition_number(&s, Some(&w)).unwrap();
            assert!((weighted - sv.max() / sv.min()).abs() / weighted < 1e-8);
        }
    }
}

#[test]
fn weighted_cosine_equals_unweighted_at_large_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let grads = random_grads(&mut rng, 3, 10_000);
    let s = snapshot_from_gradients(0, &grads).unwrap();
    let w = WeightVector::new(&[0.01, 1.0, 20.0]).unwrap();
    let scaled = s.scaled(w.as_slice()).unwrap();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let a = grad_cosine_similarity(&s, i, j).unwrap();
        let b = grad_cosine_similarity(&scaled, i, j).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    let rec = metric_record(&s, &LossSnapshot::first(0, vec![1.0; 3]).unwrap(), &w).unwrap();
    assert!((rec.gcs_mean.unwrap() - {
        let u = metric_record(&s, &LossSnapshot::first(0, vec![1.0; 3]).unwrap(), &WeightVector::uniform(3))
            .unwrap();
        u.gcs_mean.unwrap()
    })
    .abs()
        < 1e-12);
}

fn two_task(centers: [Vec<f64>; 2], scales: [f64; 2]) -> QuadraticFamily {
    QuadraticFamily::new(
        centers.to_vec(),
        vec![None, None],
        scales.to_vec(),
        vec![0.5, 0.25],
        StepRule {
            step_size: 0.02,
            momentum: 0.0,
        },
    )
    .unwrap()
}

#[test]
fn fixed_weights_reach_the_weighted_optimum() {
    // min Σ wₖsₖ·½|θ−cₖ|² is θ*(w) = Σ wₖsₖcₖ / Σ wₖsₖ
    let c1 = vec![1.0, -2.0, 0.5];
    let c2 = vec![-3.0, 1.0, 2.0];
    let scales = [1.0, 3.0];
    let p = two_task([c1.clone(), c2.clone()], scales);
    for w1 in [0.1, 0.5, 1.0, 1.5, 1.9] {
        let w = WeightVector::from_feasible(vec![w1, 2.0 - w1]).unwrap();
        let theta = run_fixed_scalarization(&p, &w, 3000, &mut NullSink).unwrap();
        let a = w[0] * scales[0];
        let b = w[1] * scales[1];
        for d in 0..3 {
            let expected = (a * c1[d] + b * c2[d]) / (a + b);
            assert!((theta[d] - expected).abs() < 1e-4, "w1={w1} d={d}");
        }
    }
}

#[test]
fn pareto_front_trades_one_loss_for_the_other() {
    let p = two_task([vec![1.0, 0.0], vec![0.0, 1.0]], [1.0, 1.0]);
    let mut prev: Option<Vec<f64>> = None;
    for w1 in [0.2, 0.6, 1.0, 1.4, 1.8] {
        let w = WeightVector::from_feasible(vec![w1, 2.0 - w1]).unwrap();
        let theta = run_fixed_scalarization(&p, &w, 2000, &mut NullSink).unwrap();
        let l = p.eval_losses(&theta).unwrap();
        if let Some(q) = prev {
            assert!(l[0] < q[0] && l[1] > q[1], "{l:?} after {q:?}");
        }
        prev = Some(l);
    }
}

#[test]
fn compatible_tasks_share_an_optimum() {
    let p = make_quadratic_problem(2, 6, &[1.0, 1.0], 0.0, 3).unwrap();
    let theta = run_fixed_scalarization(&p, &WeightVector::uniform(2), 2000, &mut NullSink).unwrap();
    let l = p.eval_losses(&theta).unwrap();
    let b = p.reference_scores().unwrap();
    for k in 0..2 {
        assert!((l[k] - b[k]).abs() < 1e-9);
    }
}

#[test]
fn single_task_training_recovers_quadratic_offsets() {
    let p = make_quadratic_problem(3, 12, &[1.0, 3.0, 10.0], 1.2, 8).unwrap();
    let b = run_stl_baselines(&p, 3000).unwrap();
    for (got, want) in b.iter().zip(p.reference_scores().unwrap()) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
