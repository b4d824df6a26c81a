//! Line-delimited JSON traces: one iteration record per line, optionally
//! followed by a run summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::WeightScheme;
use crate::config::Method;
use crate::costs::CostKind;
use crate::domain::{DegenerateFlags, GradientSnapshot, LossSnapshot, MetricRecord, WeightVector};
use crate::error::{Error, Result};
use crate::scheduler::{IterationRecord, TraceSink};

pub const TRACE_VERSION: u32 = 1;

/// Identifies the run a line belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub method: Method,
    pub cost_kind: Option<CostKind>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationLine {
    pub v: u32,
    pub run_id: String,
    pub method: Method,
    #[serde(deserialize_with = "Option::deserialize")]
    pub cost_kind: Option<CostKind>,
    pub seed: u64,
    pub config_hash: String,
    pub iter: u64,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Row-major upper triangle of the Gram matrix, diagonal included.
    pub gram_upper: Vec<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub gms_mean: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub gcs_mean: Option<f64>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub cond_number: Option<f64>,
    pub ilr: Vec<f64>,
    pub ilr_std: f64,
    #[serde(deserialize_with = "Option::deserialize")]
    pub ldr: Option<Vec<f64>>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub rl: Option<Vec<f64>>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub rl_std: Option<f64>,
    pub degenerate_flags: DegenerateFlags,
}

/// Final scores of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryLine {
    pub v: u32,
    pub run_id: String,
    pub method: Method,
    #[serde(deserialize_with = "Option::deserialize")]
    pub cost_kind: Option<CostKind>,
    pub seed: u64,
    pub config_hash: String,
    pub iters: u64,
    /// How the run's fixed weights were drawn, for sweep members.
    #[serde(deserialize_with = "Option::deserialize")]
    pub scheme: Option<WeightScheme>,
    pub final_losses: Vec<f64>,
    pub baselines: Vec<f64>,
    pub delta_m: f64,
    pub delta_m_deg: f64,
    /// `ŵ` for AutoScale, the fixed weights for fixed-weight runs.
    #[serde(deserialize_with = "Option::deserialize")]
    pub final_weight: Option<Vec<f64>>,
    /// Weights chosen at the end of each exploration window.
    pub window_weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceLine {
    Iteration(IterationLine),
    Summary(SummaryLine),
}

const ITERATION_FIELDS: &[&str] = &[
    "v",
    "run_id",
    "method",
    "cost_kind",
    "seed",
    "config_hash",
    "iter",
    "weights",
    "losses",
    "grad_norms",
    "gram_upper",
    "gms_mean",
    "gcs_mean",
    "cond_number",
    "ilr",
    "ilr_std",
    "ldr",
    "rl",
    "rl_std",
    "degenerate_flags",
];

const SUMMARY_FIELDS: &[&str] = &[
    "v",
    "run_id",
    "method",
    "cost_kind",
    "seed",
    "config_hash",
    "iters",
    "scheme",
    "final_losses",
    "baselines",
    "delta_m",
    "delta_m_deg",
    "final_weight",
    "window_weights",
];

impl IterationLine {
    pub fn new(meta: &RunMeta, rec: &IterationRecord) -> Self {
        let m = &rec.metrics;
        IterationLine {
            v: TRACE_VERSION,
            run_id: meta.run_id.clone(),
            method: meta.method,
            cost_kind: meta.cost_kind,
            seed: meta.seed,
            config_hash: meta.config_hash.clone(),
            iter: m.iter,
            weights: m.weights.as_slice().to_vec(),
            losses: rec.loss.losses().to_vec(),
            grad_norms: rec.grad.norms().to_vec(),
            gram_upper: rec.grad.gram_upper(),
            gms_mean: m.gms_mean,
            gcs_mean: m.gcs_mean,
            cond_number: m.cond_number,
            ilr: m.ilr_per_task.clone(),
            ilr_std: m.ilr_std,
            ldr: m.ldr_per_task.clone(),
            rl: m.rl_per_task.clone(),
            rl_std: m.rl_std,
            degenerate_flags: m.flags.clone(),
        }
    }

    pub fn gradient_snapshot(&self) -> Result<GradientSnapshot> {
        GradientSnapshot::from_upper(self.iter, self.grad_norms.clone(), &self.gram_upper)
    }

    /// Loss snapshot given the run's first and previous losses.
    pub fn loss_snapshot(&self, initial: &[f64], prev: &[f64]) -> Result<LossSnapshot> {
        LossSnapshot::new(self.iter, self.losses.clone(), initial.to_vec(), prev.to_vec())
    }

    pub fn metric_record(&self) -> Result<MetricRecord> {
        Ok(MetricRecord {
            iter: self.iter,
            gms_mean: self.gms_mean,
            gcs_mean: self.gcs_mean,
            cond_number: self.cond_number,
            ilr_per_task: self.ilr.clone(),
            ilr_std: self.ilr_std,
            ldr_per_task: self.ldr.clone(),
            rl_per_task: self.rl.clone(),
            rl_std: self.rl_std,
            weights: WeightVector::from_feasible(self.weights.clone())?,
            flags: self.degenerate_flags.clone(),
        })
    }
}

impl TraceLine {
    pub fn run_id(&self) -> &str {
        match self {
            TraceLine::Iteration(l) => &l.run_id,
            TraceLine::Summary(l) => &l.run_id,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace lines serialize")
    }
}

/// Parses one line; errors carry line number 1.
pub fn parse_trace_line(text: &str) -> Result<TraceLine> {
    parse_trace_line_at(text, 1)
}

pub fn parse_trace_line_at(text: &str, line: usize) -> Result<TraceLine> {
    let fail = |message: String| Error::Trace { line, message };
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            let hint = match first_absent_field(text) {
                Some(f) => format!("; missing field `{f}`"),
                None => String::new(),
            };
            return Err(fail(format!("malformed record: {e}{hint}")));
        }
    };
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == TRACE_VERSION as u64 => {}
        Some(v) => {
            return Err(fail(format!(
                "trace version {v} is not supported (expected {TRACE_VERSION})"
            )))
        }
        None => return Err(fail("missing field `v`".into())),
    }
    serde_json::from_value(value).map_err(|e| fail(e.to_string()))
}

/// First expected key that does not occur in a (possibly cut-off) line.
fn first_absent_field(text: &str) -> Option<&'static str> {
    let fields = if text.contains("\"record\":\"summary\"") {
        SUMMARY_FIELDS
    } else {
        ITERATION_FIELDS
    };
    if !text.contains("\"record\"") {
        return Some("record");
    }
    fields
        .iter()
        .find(|f| !text.contains(&format!("\"{f}\":")))
        .copied()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceLine>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trace_line_at(&line, i + 1)?);
    }
    Ok(out)
}

/// Streams iteration records to a writer as trace lines.
pub struct TraceWriter<W: Write> {
    meta: RunMeta,
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path, meta: RunMeta) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(TraceWriter::new(BufWriter::new(File::create(path)?), meta))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W, meta: RunMeta) -> Self {
        TraceWriter { meta, out }
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    pub fn write_line(&mut self, line: &TraceLine) -> Result<()> {
        self.out.write_all(line.to_json().as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TraceSink for TraceWriter<W> {
    fn record(&mut self, rec: &IterationRecord) -> Result<()> {
        let line = TraceLine::Iteration(IterationLine::new(&self.meta, rec));
        self.write_line(&line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IterationLine {
        IterationLine {
            v: 1,
            run_id: "r".into(),
            method: Method::Autoscale,
            cost_kind: Some(CostKind::LowConditionNumber),
            seed: 3,
            config_hash: "ab".into(),
            iter: 4,
            weights: vec![0.5, 1.5],
            losses: vec![1.0, 0.1 + 0.2],
            grad_norms: vec![1.0, 2.0],
            gram_upper: vec![1.0, 0.5, 4.0],
            gms_mean: Some(0.8),
            gcs_mean: None,
            cond_number: Some(1.0 / 3.0),
            ilr: vec![1.0, 1.0],
            ilr_std: 0.0,
            ldr: None,
            rl: Some(vec![0.25, 0.75]),
            rl_std: Some(0.25),
            degenerate_flags: DegenerateFlags::default(),
        }
    }

    #[test]
    fn round_trip() {
        let line = TraceLine::Iteration(sample());
        let text = line.to_json();
        assert!(!text.contains('\n'));
        assert_eq!(parse_trace_line(&text).unwrap(), line);
    }

    #[test]
    fn truncated_line_names_missing_field() {
        let text = TraceLine::Iteration(sample()).to_json();
        let cut = &text[..text.find("\"gms_mean\"").unwrap()];
        let err = parse_trace_line(cut).unwrap_err().to_string();
        assert!(err.contains("gms_mean"), "{err}");
    }

    #[test]
    fn missing_null_field_is_an_error() {
        let text = TraceLine::Iteration(sample()).to_json().replace("\"gcs_mean\":null,", "");
        let err = parse_trace_line(&text).unwrap_err().to_string();
        assert!(err.contains("gcs_mean"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = TraceLine::Iteration(sample()).to_json().replacen('{', "{\"extra\":1,", 1);
        assert!(parse_trace_line(&text).is_err());
    }

    #[test]
    fn version_mismatch() {
        let text = TraceLine::Iteration(sample()).to_json().replace("\"v\":1", "\"v\":2");
        let err = parse_trace_line(&text).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn line_numbers_in_errors() {
        match parse_trace_line_at("{", 17) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 17),
            other => panic!("{other:?}"),
        }
    }
}
