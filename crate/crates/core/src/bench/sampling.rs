use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{make_weight_vector, WeightVector, DEFAULT_WEIGHT_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `K · Dirichlet(1, …, 1)`
    #[serde(rename = "dirichlet-uniform")]
    DirichletUniform,
    /// Deterministic points evenly spaced in log-weight space around the
    /// uniform weights.
    #[serde(rename = "log-uniform-grid")]
    LogUniformGrid,
}

impl WeightScheme {
    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::DirichletUniform => "dirichlet-uniform",
            WeightScheme::LogUniformGrid => "log-uniform-grid",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet-uniform" => Ok(WeightScheme::DirichletUniform),
            "log-uniform-grid" => Ok(WeightScheme::LogUniformGrid),
            other => Err(invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

/// Largest log ratio `ln(wᵢ/wⱼ)` on the log-uniform grid.
pub const GRID_LOG_SPAN: f64 = 2.772_588_722_239_781; // ln 16

pub fn sample_weight_sets(n: usize, k: usize, seed: u64, scheme: WeightScheme) -> Result<Vec<WeightVector>> {
    if n < 2 {
        return Err(invalid("need at least two weight sets"));
    }
    if k < 2 {
        return Err(invalid("need K >= 2"));
    }
    match scheme {
        WeightScheme::DirichletUniform => dirichlet(n, k, seed),
        WeightScheme::LogUniformGrid => log_grid(n, k),
    }
}

fn dirichlet(n: usize, k: usize, seed: u64) -> Result<Vec<WeightVector>> {
    let mut out: Vec<WeightVector> = Vec::with_capacity(n);
    let mut counter = 0u64;
    while out.len() < n {
        let mut rng = stream_rng(seed, Stream::WeightSampling, counter);
        counter += 1;
        let e: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = e.iter().sum();
        let w = make_weight_vector(
            &e.iter().map(|v| k as f64 * v / total).collect::<Vec<_>>(),
            DEFAULT_WEIGHT_FLOOR,
        )?;
        if !out.contains(&w) {
            out.push(w);
        }
    }
    Ok(out)
}

fn softmax_weights(z: &[f64]) -> Result<WeightVector> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let k = z.len() as f64;
    make_weight_vector(&e.iter().map(|v| k * v / total).collect::<Vec<_>>(), DEFAULT_WEIGHT_FLOOR)
}

fn log_grid(n: usize, k: usize) -> Result<Vec<WeightVector>> {
    if k == 2 {
        return (0..n)
            .map(|i| {
                let x = -GRID_LOG_SPAN + 2.0 * GRID_LOG_SPAN * i as f64 / (n - 1) as f64;
                softmax_weights(&[x / 2.0, -x / 2.0])
            })
            .collect();
    }
    // integer points with zero sum, nearest the origin first
    let mut radius = 1i64;
    let points = loop {
        let mut pts = Vec::new();
        let mut cur = vec![-radius; k - 1];
        loop {
            let last = -cur.iter().sum::<i64>();
            if last.abs() <= radius {
                let mut p = cur.clone();
                p.push(last);
                pts.push(p);
            }
            let mut d = 0;
            while d < k - 1 {
                cur[d] += 1;
                if cur[d] <= radius {
                    break;
                }
                cur[d] = -radius;
                d += 1;
            }
            if d == k - 1 {
                break;
            }
        }
        let norm = |p: &Vec<i64>| p.iter().map(|v| v * v).sum::<i64>();
        pts.sort_by(|a, b| norm(a).cmp(&norm(b)).then_with(|| b.cmp(a)));
        // every point of norm ≤ radius² is inside the box, so the first n
        // are exact once the n-th has norm ≤ radius²
        if pts.len() >= n && norm(&pts[n - 1]) <= radius * radius {
            pts.truncate(n);
            break pts;
        }
        radius += 1;
    };
    let spread = points
        .iter()
        .map(|p| p.iter().max().unwrap() - p.iter().min().unwrap())
        .max()
        .unwrap_or(1)
        .max(1);
    let step = GRID_LOG_SPAN / spread as f64;
    points
        .iter()
        .map(|p| softmax_weights(&p.iter().map(|&v| v as f64 * step).collect::<Vec<_>>()))
        .collect()
}

/// `K · softmax(z)` with `z ~ N(0, I)`, drawn from the `(seed, iter)` stream.
pub fn random_loss_weighting_step(k: usize, seed: u64, iter: u64) -> Result<WeightVector> {
    if k < 2 {
        return Err(invalid("need K >= 2"));
    }
    let mut rng = stream_rng(seed, Stream::RandomWeighting, iter);
    let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    softmax_weights(&z)
}
