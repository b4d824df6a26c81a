//! The work behind each CLI subcommand.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{baseline_scores, sample_weight_sets, WeightScheme};
use crate::config::{Method, RunConfig};
use crate::domain::WeightVector;
use crate::error::{Error, Result};
use crate::eval::{delta_m, delta_m_deg, loss_scores, mean_rank, spearman_correlation, TaskScore};
use crate::metrics::metric_record;
use crate::scheduler::{run_autoscale, run_fixed_scalarization, run_random_weighting, MetricMeans};
use crate::trace::{read_trace, IterationLine, RunMeta, SummaryLine, TraceLine, TraceWriter, TRACE_VERSION};

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: SummaryLine,
    pub means: MetricMeans,
}

impl RunOutcome {
    pub fn scores(&self) -> Vec<TaskScore> {
        self.summary
            .final_losses
            .iter()
            .zip(&self.summary.baselines)
            .map(|(&v, &b)| TaskScore::lower_better(v, b))
            .collect()
    }
}

fn run_meta(config: &RunConfig) -> RunMeta {
    RunMeta {
        run_id: config.run_id(),
        method: config.method,
        cost_kind: (config.method == Method::Autoscale).then_some(config.autoscale.cost),
        seed: config.seed,
        config_hash: config.hash(),
    }
}

/// Trains according to `config` and writes a trace to `trace` if given.
/// `baselines` overrides the problem's reference scores.
pub fn execute_run(
    config: &RunConfig,
    trace: Option<&Path>,
    baselines: Option<&[f64]>,
    scheme: Option<WeightScheme>,
) -> Result<RunOutcome> {
    config.validate()?;
    if config.method == Method::Sweep {
        return Err(Error::Config("sweeps run through the sweep command".into()));
    }
    let problem = config.problem.build(config.seed)?;
    let problem = problem.as_ref();
    let k = problem.num_tasks();
    let baselines = match baselines {
        Some(b) => b.to_vec(),
        None => baseline_scores(problem, config.stl_iters)?,
    };
    let meta = run_meta(config);

    let mut means = MetricMeans::default();
    let mut writer = match trace {
        Some(p) => Some(TraceWriter::create(p, meta.clone())?),
        None => None,
    };

    let (final_losses, final_weight, window_weights) = {
        let mut sink = (&mut means, writer.as_mut());
        match config.method {
            Method::Autoscale => {
                let out = run_autoscale(problem, &config.autoscale_config(), &mut sink)?;
                let windows = out
                    .history
                    .windows
                    .iter()
                    .map(|w| w.weights.as_slice().to_vec())
                    .collect();
                (
                    problem.eval_losses(&out.params)?,
                    Some(out.history.final_weight.into_vec()),
                    windows,
                )
            }
            Method::Unitary | Method::Fixed => {
                let w = match config.method {
                    Method::Fixed => {
                        let raw = config.weights.clone().expect("validated");
                        WeightVector::from_feasible(raw.clone())
                            .or_else(|_| WeightVector::new(&raw))
                            .map_err(|e| Error::Config(format!("fixed weights: {e}")))?
                    }
                    _ => WeightVector::uniform(k),
                };
                let params = run_fixed_scalarization(problem, &w, config.iters, &mut sink)?;
                (problem.eval_losses(&params)?, Some(w.into_vec()), Vec::new())
            }
            Method::Rlw => {
                let params = run_random_weighting(problem, config.iters, config.seed, &mut sink)?;
                (problem.eval_losses(&params)?, None, Vec::new())
            }
            Method::Stl => (
                crate::bench::run_stl_baselines(problem, config.iters)?,
                None,
                Vec::new(),
            ),
            Method::Sweep => unreachable!(),
        }
    };

    let scores = loss_scores(&final_losses, &baselines)?;
    let summary = SummaryLine {
        v: TRACE_VERSION,
        run_id: meta.run_id.clone(),
        method: meta.method,
        cost_kind: meta.cost_kind,
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        iters: config.iters as u64,
        scheme,
        delta_m: delta_m(&scores)?,
        delta_m_deg: delta_m_deg(&scores)?,
        final_losses,
        baselines,
        final_weight,
        window_weights,
    };
    if let Some(mut w) = writer {
        w.write_line(&TraceLine::Summary(summary.clone()))?;
        w.finish()?;
    }
    Ok(RunOutcome { summary, means })
}

pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome> {
    execute_run(config, Some(&config.output.trace), None, None)
}

/// One row of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub run_id: String,
    pub weights: Vec<f64>,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the lowest Δm.
    pub best: Option<usize>,
    pub table: PathBuf,
}

/// Fixed-weight runs over sampled weight sets. Failed runs are reported in
/// the table and do not stop the sweep.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepReport> {
    let k = config.problem.num_tasks();
    if config.sweep.n < 2 {
        return Err(Error::Config("sweeps need n >= 2".into()));
    }
    if config.iters == 0 {
        return Err(Error::Config("iters must be positive".into()));
    }
    let weight_sets = sample_weight_sets(config.sweep.n, k, config.seed, config.sweep.scheme)?;
    let problem = config.problem.build(config.seed)?;
    let baselines = baseline_scores(problem.as_ref(), config.stl_iters)?;
    drop(problem);

    let dir = &config.output.dir;
    std::fs::create_dir_all(dir)?;
    let run_one = |(i, w): (usize, &WeightVector)| -> SweepRow {
        let mut c = config.clone();
        c.method = Method::Fixed;
        c.weights = Some(w.as_slice().to_vec());
        c.run_id = Some(format!("sweep-{i:03}"));
        let run_id = c.run_id();
        let trace = config
            .output
            .sweep_traces
            .then(|| dir.join(format!("{run_id}.jsonl")));
        let outcome = execute_run(&c, trace.as_deref(), Some(&baselines), Some(config.sweep.scheme))
            .map_err(|e| {
                log::error!("{run_id} failed: {e}");
                e.to_string()
            });
        SweepRow {
            run_id,
            weights: w.as_slice().to_vec(),
            outcome,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.sweep.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<SweepRow> =
        pool.install(|| weight_sets.par_iter().enumerate().map(run_one).collect());

    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.outcome.as_ref().ok().map(|o| (i, o.summary.delta_m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);

    let table = dir.join("sweep.csv");
    write_sweep_table(&table, &rows, best, k)?;
    Ok(SweepReport { rows, best, table })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_sweep_table(path: &Path, rows: &[SweepRow], best: Option<usize>, k: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run_id".to_string(), "rank".into(), "best".into()];
    header.extend((1..=k).map(|i| format!("w{i}")));
    header.extend(
        [
            "delta_m",
            "delta_m_deg",
            "gms_mean",
            "gcs_mean",
            "cond_mean",
            "ilr_std_mean",
            "rl_std_mean",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;

    let ok: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.summary.delta_m))
        .collect();
    let ranks = crate::eval::average_ranks(&ok)?;
    let mut next_rank = ranks.into_iter();
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![r.run_id.clone()];
        match &r.outcome {
            Ok(o) => {
                rec.push(next_rank.next().map(|x| x.to_string()).unwrap_or_default());
                rec.push((best == Some(i)).to_string());
                rec.extend(r.weights.iter().map(|v| v.to_string()));
                let m = &o.means;
                rec.extend([
                    o.summary.delta_m.to_string(),
                    o.summary.delta_m_deg.to_string(),
                    fmt_opt(m.gms.mean()),
                    fmt_opt(m.gcs.mean()),
                    fmt_opt(m.cond.mean()),
                    fmt_opt(m.ilr_std.mean()),
                    fmt_opt(m.rl_std.mean()),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.push(String::new());
                rec.push("false".into());
                rec.extend(r.weights.iter().map(|v| v.to_string()));
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Scalar metrics that can be exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricName {
    Gms,
    Gcs,
    Cond,
    IlrStd,
    RlStd,
}

impl MetricName {
    pub const ALL: [MetricName; 5] = [
        MetricName::Gms,
        MetricName::Gcs,
        MetricName::Cond,
        MetricName::IlrStd,
        MetricName::RlStd,
    ];

    pub fn column(self) -> &'static str {
        match self {
            MetricName::Gms => "gms_mean",
            MetricName::Gcs => "gcs_mean",
            MetricName::Cond => "cond_number",
            MetricName::IlrStd => "ilr_std",
            MetricName::RlStd => "rl_std",
        }
    }

    fn value(self, line: &IterationLine) -> Option<f64> {
        match self {
            MetricName::Gms => line.gms_mean,
            MetricName::Gcs => line.gcs_mean,
            MetricName::Cond => line.cond_number,
            MetricName::IlrStd => Some(line.ilr_std),
            MetricName::RlStd => line.rl_std,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::Gms => "gms",
            MetricName::Gcs => "gcs",
            MetricName::Cond => "cond",
            MetricName::IlrStd => "ilr_std",
            MetricName::RlStd => "rl_std",
        })
    }
}

impl FromStr for MetricName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.to_string() == s || m.column() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub metrics: Vec<MetricName>,
    /// Trailing moving-average window for trajectories; `None` or 1 leaves
    /// them raw.
    pub smoothing: Option<usize>,
    pub out_dir: PathBuf,
    /// Recompute every logged metric from the logged raw quantities and
    /// fail on any difference.
    pub verify: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            metrics: MetricName::ALL.to_vec(),
            smoothing: None,
            out_dir: PathBuf::from("analysis"),
            verify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub run_id: String,
    pub method: Method,
    pub iterations: usize,
    pub delta_m: Option<f64>,
    pub delta_m_deg: Option<f64>,
    pub means: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub runs: Vec<RunAggregate>,
    /// `(metric, ρ(Δm, run mean))`, `None` where undefined.
    pub correlations: Vec<(MetricName, Option<f64>)>,
    pub files: Vec<PathBuf>,
}

struct RunLines {
    id: String,
    iterations: Vec<IterationLine>,
    summary: Option<SummaryLine>,
}

fn verify_run(run: &RunLines) -> Result<()> {
    let Some(first) = run.iterations.first() else {
        return Ok(());
    };
    if first.iter != 0 || run.iterations.windows(2).any(|w| w[1].iter != w[0].iter + 1) {
        log::warn!("{}: iterations are not contiguous from 0; skipping recompute check", run.id);
        return Ok(());
    }
    let initial = first.losses.clone();
    let mut prev = first.losses.clone();
    for line in &run.iterations {
        let grad = line.gradient_snapshot()?;
        let loss = line.loss_snapshot(&initial, &prev)?;
        let logged = line.metric_record()?;
        let recomputed = metric_record(&grad, &loss, &logged.weights)?;
        if recomputed != logged {
            return Err(Error::Trace {
                line: line.iter as usize + 1,
                message: format!("{}: logged metrics differ from recomputed values", run.id),
            });
        }
        prev = line.losses.clone();
    }
    Ok(())
}

fn smooth(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    if window <= 1 {
        return values.to_vec();
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.and_then(|_| {
                let lo = (i + 1).saturating_sub(window);
                let seen: Vec<f64> = values[lo..=i].iter().flatten().copied().collect();
                (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
            })
        })
        .collect()
}

/// Writes `trajectories.csv`, `runs.csv` and `correlations.csv` under
/// `opts.out_dir`.
pub fn cmd_analyze(traces: &[PathBuf], opts: &AnalyzeOptions) -> Result<AnalyzeReport> {
    let mut order: Vec<String> = Vec::new();
    let mut runs: HashMap<String, RunLines> = HashMap::new();
    for path in traces {
        for line in read_trace(path)? {
            let id = line.run_id().to_string();
            let entry = runs.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                RunLines {
                    id,
                    iterations: Vec::new(),
                    summary: None,
                }
            });
            match line {
                TraceLine::Iteration(l) => entry.iterations.push(l),
                TraceLine::Summary(s) => entry.summary = Some(s),
            }
        }
    }
    if opts.verify {
        for id in &order {
            verify_run(&runs[id])?;
        }
    }

    std::fs::create_dir_all(&opts.out_dir)?;
    let traj_path = opts.out_dir.join("trajectories.csv");
    let mut traj = csv::Writer::from_path(&traj_path)?;
    let mut header = vec!["run_id".to_string(), "iter".into()];
    header.extend(opts.metrics.iter().map(|m| m.column().to_string()));
    traj.write_record(&header)?;

    let mut aggregates = Vec::with_capacity(order.len());
    for id in &order {
        let run = &runs[id];
        let columns: Vec<Vec<Option<f64>>> = opts
            .metrics
            .iter()
            .map(|m| {
                let raw: Vec<Option<f64>> = run.iterations.iter().map(|l| m.value(l)).collect();
                smooth(&raw, opts.smoothing.unwrap_or(1))
            })
            .collect();
        for (row, line) in run.iterations.iter().enumerate() {
            let mut rec = vec![id.clone(), line.iter.to_string()];
            rec.extend(columns.iter().map(|c| fmt_opt(c[row])));
            traj.write_record(&rec)?;
        }
        let means = opts
            .metrics
            .iter()
            .map(|m| {
                let vals: Vec<f64> = run.iterations.iter().filter_map(|l| m.value(l)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let method = run
            .summary
            .as_ref()
            .map(|s| s.method)
            .or_else(|| run.iterations.first().map(|l| l.method))
            .unwrap_or(Method::Fixed);
        aggregates.push(RunAggregate {
            run_id: id.clone(),
            method,
            iterations: run.iterations.len(),
            delta_m: run.summary.as_ref().map(|s| s.delta_m),
            delta_m_deg: run.summary.as_ref().map(|s| s.delta_m_deg),
            means,
        });
    }
    traj.flush()?;

    let runs_path = opts.out_dir.join("runs.csv");
    let mut rw = csv::Writer::from_path(&runs_path)?;
    let mut header = vec![
        "run_id".to_string(),
        "method".into(),
        "iterations".into(),
        "delta_m".into(),
        "delta_m_deg".into(),
    ];
    header.extend(opts.metrics.iter().map(|m| format!("{}_run_mean", m.column())));
    rw.write_record(&header)?;
    for a in &aggregates {
        let mut rec = vec![
            a.run_id.clone(),
            a.method.to_string(),
            a.iterations.to_string(),
            fmt_opt(a.delta_m),
            fmt_opt(a.delta_m_deg),
        ];
        rec.extend(a.means.iter().map(|v| fmt_opt(*v)));
        rw.write_record(&rec)?;
    }
    rw.flush()?;

    let corr_path = opts.out_dir.join("correlations.csv");
    let mut cw = csv::Writer::from_path(&corr_path)?;
    cw.write_record(["metric", "runs", "spearman_rho"])?;
    let mut correlations = Vec::new();
    for (mi, m) in opts.metrics.iter().enumerate() {
        let (x, y): (Vec<f64>, Vec<f64>) = aggregates
            .iter()
            .filter_map(|a| Some((a.delta_m?, a.means[mi]?)))
            .unzip();
        let rho = spearman_correlation(&x, &y).ok();
        cw.write_record([m.column().to_string(), x.len().to_string(), fmt_opt(rho)])?;
        correlations.push((*m, rho));
    }
    cw.flush()?;

    Ok(AnalyzeReport {
        runs: aggregates,
        correlations,
        files: vec![traj_path, runs_path, corr_path],
    })
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    pub task: String,
    pub value: f64,
    pub baseline: f64,
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub delta_m: f64,
    pub delta_m_deg: f64,
    pub mean_rank: Option<f64>,
}

/// Δm, Δm_deg and mean rank per method from a score CSV with columns
/// `method,task,value,baseline,higher_is_better`.
pub fn cmd_eval(scores: &Path) -> Result<Vec<EvalRow>> {
    let mut reader = csv::Reader::from_path(scores)?;
    let mut methods: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    let mut table: HashMap<(String, String), ScoreRow> = HashMap::new();
    for row in reader.deserialize() {
        let row: ScoreRow = row?;
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
        if !tasks.contains(&row.task) {
            tasks.push(row.task.clone());
        }
        table.insert((row.method.clone(), row.task.clone()), row);
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("score file has no rows".into()));
    }
    let mut matrix = Vec::with_capacity(methods.len());
    let mut rows = Vec::with_capacity(methods.len());
    let mut higher = vec![false; tasks.len()];
    for m in &methods {
        let mut scores = Vec::with_capacity(tasks.len());
        let mut values = Vec::with_capacity(tasks.len());
        for (ti, t) in tasks.iter().enumerate() {
            let r = table.get(&(m.clone(), t.clone())).ok_or_else(|| {
                Error::InvalidInput(format!("method `{m}` has no score for task `{t}`"))
            })?;
            higher[ti] = r.higher_is_better;
            scores.push(TaskScore {
                value: r.value,
                baseline: r.baseline,
                higher_is_better: r.higher_is_better,
            });
            values.push(r.value);
        }
        rows.push(EvalRow {
            method: m.clone(),
            delta_m: delta_m(&scores)?,
            delta_m_deg: delta_m_deg(&scores)?,
            mean_rank: None,
        });
        matrix.push(values);
    }
    if methods.len() >= 2 {
        for (row, mr) in rows.iter_mut().zip(mean_rank(&matrix, &higher)?) {
            row.mean_rank = Some(mr);
        }
    }
    Ok(rows)
}

pub fn write_eval_table<W: std::io::Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
