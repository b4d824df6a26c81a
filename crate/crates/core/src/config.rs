//! Declarative run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    make_mlp_problem, make_quadratic_problem, MultiTaskProblem, StepRule, WeightScheme, QUADRATIC_STEP,
    REFERENCE_NOISE,
};
use crate::costs::CostKind;
use crate::domain::DEFAULT_WEIGHT_FLOOR;
use crate::error::{Error, Result};
use crate::scheduler::AutoScaleConfig;
use crate::solver::SearchOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Autoscale,
    Unitary,
    Fixed,
    Rlw,
    Stl,
    Sweep,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Autoscale => "autoscale",
            Method::Unitary => "unitary",
            Method::Fixed => "fixed",
            Method::Rlw => "rlw",
            Method::Stl => "stl",
            Method::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoscale" => Ok(Method::Autoscale),
            "unitary" => Ok(Method::Unitary),
            "fixed" => Ok(Method::Fixed),
            "rlw" => Ok(Method::Rlw),
            "stl" => Ok(Method::Stl),
            "sweep" => Ok(Method::Sweep),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        tasks: usize,
        dim: usize,
        scales: Vec<f64>,
        conflict_angle: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default = "quadratic_step")]
        step_size: f64,
    },
    Mlp {
        tasks: usize,
        input_dim: usize,
        width: usize,
        samples: usize,
        #[serde(default)]
        label_noise: f64,
        #[serde(default = "mlp_step")]
        step_size: f64,
        #[serde(default = "mlp_momentum")]
        momentum: f64,
    },
}

fn quadratic_step() -> f64 {
    QUADRATIC_STEP
}
fn mlp_step() -> f64 {
    0.05
}
fn mlp_momentum() -> f64 {
    0.9
}

impl Default for ProblemConfig {
    /// The imbalanced three-task quadratic testbed.
    fn default() -> Self {
        ProblemConfig::Quadratic {
            tasks: 3,
            dim: 24,
            scales: vec![1.0, 3.0, 10.0],
            conflict_angle: std::f64::consts::FRAC_PI_2,
            noise: REFERENCE_NOISE,
            step_size: QUADRATIC_STEP,
        }
    }
}

impl ProblemConfig {
    pub fn num_tasks(&self) -> usize {
        match self {
            ProblemConfig::Quadratic { tasks, .. } | ProblemConfig::Mlp { tasks, .. } => *tasks,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn MultiTaskProblem>> {
        Ok(match self {
            ProblemConfig::Quadratic {
                tasks,
                dim,
                scales,
                conflict_angle,
                noise,
                step_size,
            } => Box::new(
                make_quadratic_problem(*tasks, *dim, scales, *conflict_angle, seed)?
                    .with_noise(*noise, seed)
                    .with_step(StepRule {
                        step_size: *step_size,
                        momentum: 0.0,
                    }),
            ),
            ProblemConfig::Mlp {
                tasks,
                input_dim,
                width,
                samples,
                label_noise,
                step_size,
                momentum,
            } => Box::new(
                make_mlp_problem(*tasks, *input_dim, *width, *samples, *label_noise, seed)?.with_step(
                    StepRule {
                        step_size: *step_size,
                        momentum: *momentum,
                    },
                ),
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoScaleSection {
    pub cost: CostKind,
    pub alpha: f64,
    pub tau: usize,
    pub eta: usize,
    pub stride: usize,
    pub weight_floor: f64,
    pub search_budget: usize,
    pub search_restarts: usize,
}

impl Default for AutoScaleSection {
    fn default() -> Self {
        let s = SearchOptions::default();
        AutoScaleSection {
            cost: CostKind::LowConditionNumber,
            alpha: 0.2,
            tau: 50,
            eta: 10,
            stride: 1,
            weight_floor: DEFAULT_WEIGHT_FLOOR,
            search_budget: s.budget,
            search_restarts: s.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n: usize,
    pub scheme: WeightScheme,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            n: 19,
            scheme: WeightScheme::DirichletUniform,
            threads: 0,
        }
    }
}

/// Where results go. Not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Trace file of a single run.
    pub trace: PathBuf,
    /// Directory for sweep traces and tables.
    pub dir: PathBuf,
    /// Whether sweeps write one trace per run.
    pub sweep_traces: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            trace: PathBuf::from("trace.jsonl"),
            dir: PathBuf::from("sweep"),
            sweep_traces: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Weights for `method = "fixed"`.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Training steps per task when baselines have no closed form.
    #[serde(default = "default_stl_iters")]
    pub stl_iters: usize,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub autoscale: AutoScaleSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_method() -> Method {
    Method::Autoscale
}
fn default_iters() -> usize {
    5000
}
fn default_stl_iters() -> usize {
    5000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: default_method(),
            seed: 0,
            iters: default_iters(),
            weights: None,
            stl_iters: default_stl_iters(),
            run_id: None,
            problem: ProblemConfig::default(),
            autoscale: AutoScaleSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of everything except the output section.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        match self.method {
            Method::Autoscale => format!("autoscale-{}-s{}", self.autoscale.cost, self.seed),
            m => format!("{m}-s{}", self.seed),
        }
    }

    pub fn autoscale_config(&self) -> AutoScaleConfig {
        let a = &self.autoscale;
        AutoScaleConfig {
            total_iters: self.iters,
            exploration_ratio: a.alpha,
            window_size: a.tau,
            aggregation_size: a.eta,
            cost_kind: a.cost,
            seed: self.seed,
            stride: a.stride,
            weight_floor: a.weight_floor,
            search_budget: a.search_budget,
            search_restarts: a.search_restarts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be positive".into()));
        }
        let k = self.problem.num_tasks();
        match self.method {
            Method::Autoscale => self.autoscale_config().validate()?,
            Method::Fixed => match &self.weights {
                None => return Err(Error::Config("method `fixed` needs `weights`".into())),
                Some(w) if w.len() != k => {
                    return Err(Error::Config(format!("{} weights given for {k} tasks", w.len())))
                }
                Some(_) => {}
            },
            Method::Sweep if self.sweep.n < 2 => {
                return Err(Error::Config("sweeps need n >= 2".into()))
            }
            _ => {}
        }
        Ok(())
    }
}
