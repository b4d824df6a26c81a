use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{MultiTaskProblem, StepRule, TaskEvaluation};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

const TEACHER_WIDTH: usize = 4;

/// Regression with a shared two-hidden-layer tanh trunk and one linear head
/// per task. Targets come from a small random teacher network of the same
/// shape plus Gaussian label noise. Losses are `½·mean((ŷₖ − yₖ)²)`.
///
/// Parameters are laid out as `[W₁, b₁, W₂, b₂ | v₁, c₁ | … | v_K, c_K]`;
/// only the trunk is shared.
#[derive(Debug, Clone)]
pub struct MlpRegressionFamily {
    k: usize,
    input_dim: usize,
    width: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    init: Vec<f64>,
    step: StepRule,
}

struct Layout {
    d: usize,
    w: usize,
}

impl Layout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.w * self.d
    }
    fn w2(&self) -> usize {
        self.b1() + self.w
    }
    fn b2(&self) -> usize {
        self.w2() + self.w * self.w
    }
    fn shared(&self) -> usize {
        self.b2() + self.w
    }
    fn head(&self, k: usize) -> usize {
        self.shared() + k * (self.w + 1)
    }
    fn total(&self, k: usize) -> usize {
        self.head(k)
    }
}

struct Hidden {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn forward_trunk(p: &[f64], l: &Layout, x: &[f64]) -> Hidden {
    let (d, w) = (l.d, l.w);
    let h1: Vec<f64> = (0..w)
        .map(|i| {
            let row = &p[l.w1() + i * d..l.w1() + (i + 1) * d];
            (row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[l.b1() + i]).tanh()
        })
        .collect();
    let h2: Vec<f64> = (0..w)
        .map(|i| {
            let row = &p[l.w2() + i * w..l.w2() + (i + 1) * w];
            (row.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>() + p[l.b2() + i]).tanh()
        })
        .collect();
    Hidden { h1, h2 }
}

fn head_output(p: &[f64], l: &Layout, k: usize, h2: &[f64]) -> f64 {
    let o = l.head(k);
    p[o..o + l.w].iter().zip(h2).map(|(a, b)| a * b).sum::<f64>() + p[o + l.w]
}

fn gaussian_params(rng: &mut ChaCha8Rng, l: &Layout, k: usize) -> Vec<f64> {
    let mut p = vec![0.0; l.total(k)];
    let mut fill = |p: &mut [f64], range: Range<usize>, fan_in: usize| {
        let s = (1.0 / fan_in as f64).sqrt();
        for v in &mut p[range] {
            let z: f64 = StandardNormal.sample(rng);
            *v = s * z;
        }
    };
    fill(&mut p, l.w1()..l.b1(), l.d);
    fill(&mut p, l.w2()..l.b2(), l.w);
    for t in 0..k {
        fill(&mut p, l.head(t)..l.head(t) + l.w, l.w);
    }
    p
}

impl MlpRegressionFamily {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_samples(&self) -> usize {
        self.inputs.len()
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn with_step(mut self, step: StepRule) -> Self {
        self.step = step;
        self
    }

    fn layout(&self) -> Layout {
        Layout {
            d: self.input_dim,
            w: self.width,
        }
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        let n = self.layout().total(self.k);
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: params.len(),
            });
        }
        Ok(())
    }

    fn loss_scale(&self) -> f64 {
        1.0 / self.inputs.len() as f64
    }
}

impl MultiTaskProblem for MlpRegressionFamily {
    fn num_tasks(&self) -> usize {
        self.k
    }

    fn num_params(&self) -> usize {
        self.layout().total(self.k)
    }

    fn shared_params(&self) -> Range<usize> {
        0..self.layout().shared()
    }

    fn initial_params(&self) -> Vec<f64> {
        self.init.clone()
    }

    fn step_rule(&self) -> StepRule {
        self.step
    }

    fn evaluate(&self, p: &[f64], _iter: u64) -> Result<TaskEvaluation> {
        self.check_len(p)?;
        let l = self.layout();
        let (d, w) = (l.d, l.w);
        let scale = self.loss_scale();
        let mut losses = vec![0.0; self.k];
        let mut gradients = vec![vec![0.0; p.len()]; self.k];
        let mut delta2 = vec![0.0; w];
        let mut delta1 = vec![0.0; w];

        for (x, ys) in self.inputs.iter().zip(&self.targets) {
            let Hidden { h1, h2 } = forward_trunk(p, &l, x);
            for t in 0..self.k {
                let g = &mut gradients[t];
                let r = head_output(p, &l, t, &h2) - ys[t];
                losses[t] += 0.5 * scale * r * r;
                let r = r * scale;

                let o = l.head(t);
                for i in 0..w {
                    g[o + i] += r * h2[i];
                    delta2[i] = r * p[o + i] * (1.0 - h2[i] * h2[i]);
                }
                g[o + w] += r;

                for i in 0..w {
                    let row = l.w2() + i * w;
                    for j in 0..w {
                        g[row + j] += delta2[i] * h1[j];
                    }
                    g[l.b2() + i] += delta2[i];
                }
                for j in 0..w {
                    let back: f64 = (0..w).map(|i| p[l.w2() + i * w + j] * delta2[i]).sum();
                    delta1[j] = back * (1.0 - h1[j] * h1[j]);
                }
                for j in 0..w {
                    let row = l.w1() + j * d;
                    for m in 0..d {
                        g[row + m] += delta1[j] * x[m];
                    }
                    g[l.b1() + j] += delta1[j];
                }
            }
        }
        Ok(TaskEvaluation { losses, gradients })
    }

    fn eval_losses(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_len(p)?;
        let l = self.layout();
        let scale = self.loss_scale();
        let mut losses = vec![0.0; self.k];
        for (x, ys) in self.inputs.iter().zip(&self.targets) {
            let h = forward_trunk(p, &l, x);
            for t in 0..self.k {
                let r = head_output(p, &l, t, &h.h2) - ys[t];
                losses[t] += 0.5 * scale * r * r;
            }
        }
        Ok(losses)
    }
}

/// Deterministic instance: inputs, teacher, label noise and student
/// initialization all derive from `seed`.
pub fn make_mlp_problem(
    k: usize,
    input_dim: usize,
    width: usize,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<MlpRegressionFamily> {
    if k == 0 || input_dim == 0 || width == 0 || samples == 0 {
        return Err(invalid("MLP sizes must be positive"));
    }
    if !(noise >= 0.0) {
        return Err(invalid("label noise must be nonnegative"));
    }
    let mut data_rng = stream_rng(seed, Stream::Dataset, 0);
    let inputs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..input_dim).map(|_| data_rng.sample(StandardNormal)).collect())
        .collect();

    let teacher_layout = Layout {
        d: input_dim,
        w: TEACHER_WIDTH,
    };
    let mut teacher_rng = stream_rng(seed, Stream::Dataset, 1);
    let teacher = gaussian_params(&mut teacher_rng, &teacher_layout, k);
    let mut noise_rng = stream_rng(seed, Stream::Dataset, 2);
    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            let h = forward_trunk(&teacher, &teacher_layout, x);
            (0..k)
                .map(|t| {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    head_output(&teacher, &teacher_layout, t, &h.h2) + noise * z
                })
                .collect()
        })
        .collect();

    let layout = Layout { d: input_dim, w: width };
    let mut init_rng = stream_rng(seed, Stream::ProblemInit, 0);
    let init = gaussian_params(&mut init_rng, &layout, k);

    Ok(MlpRegressionFamily {
        k,
        input_dim,
        width,
        inputs,
        targets,
        init,
        step: StepRule {
            step_size: 0.05,
            momentum: 0.9,
        },
    })
}
