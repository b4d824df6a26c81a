use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autoscale::bench::WeightScheme;
use autoscale::commands::{cmd_analyze, cmd_eval, cmd_run, cmd_sweep, write_eval_table, AnalyzeOptions, MetricName};
use autoscale::config::{Method, RunConfig};
use autoscale::costs::CostKind;
use autoscale::error::Result;

#[derive(Parser)]
#[command(name = "autoscale", version, about = "Loss weighting for multi-task training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its trace.
    Run(RunArgs),
    /// Train one fixed-weight model per sampled weight set.
    Sweep(SweepArgs),
    /// Summarize traces into trajectory, run and correlation tables.
    Analyze(AnalyzeArgs),
    /// Compute Δm, Δm_deg and mean rank from a score table.
    Eval(EvalArgs),
}

/// Options shared by `run` and `sweep`. Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: Option<Method>,
    /// Weights for `--method fixed`, comma separated.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    cost: Option<CostKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    eta: Option<usize>,
    /// Trace output path.
    #[arg(long, short)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short)]
    n: Option<usize>,
    #[arg(long)]
    scheme: Option<WeightScheme>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip per-run traces and write only the table.
    #[arg(long)]
    no_traces: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Metrics to export, comma separated.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<MetricName>>,
    /// Trailing moving-average window for trajectories.
    #[arg(long)]
    smooth: Option<usize>,
    #[arg(long, default_value = "analysis")]
    out_dir: PathBuf,
    /// Do not recompute logged metrics.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with columns method,task,value,baseline,higher_is_better.
    scores: PathBuf,
    /// Output CSV; stdout if omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(t) = common.iters {
        c.iters = t;
    }
    if let Some(id) = &common.run_id {
        c.run_id = Some(id.clone());
    }
    Ok(c)
}

fn print_scores(losses: &[f64], baselines: &[f64], dm: f64, dm_deg: f64) {
    println!("{:>6} {:>14} {:>14}", "task", "loss", "baseline");
    for (k, (l, b)) in losses.iter().zip(baselines).enumerate() {
        println!("{:>6} {:>14.6e} {:>14.6e}", k + 1, l, b);
    }
    println!("delta_m     {dm:.4}%");
    println!("delta_m_deg {dm_deg:.4}%");
}

fn run(args: RunArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    if let Some(m) = args.method {
        c.method = m;
    }
    if args.weights.is_some() {
        c.weights = args.weights;
        if args.method.is_none() {
            c.method = Method::Fixed;
        }
    }
    if let Some(v) = args.cost {
        c.autoscale.cost = v;
    }
    if let Some(v) = args.alpha {
        c.autoscale.alpha = v;
    }
    if let Some(v) = args.tau {
        c.autoscale.tau = v;
    }
    if let Some(v) = args.eta {
        c.autoscale.eta = v;
    }
    if let Some(t) = args.trace {
        c.output.trace = t;
    }
    if c.method == Method::Sweep {
        return sweep_with(c);
    }
    let out = cmd_run(&c)?;
    let s = &out.summary;
    println!("run {} ({})", s.run_id, c.output.trace.display());
    if let Some(w) = &s.final_weight {
        println!("weights {w:?}");
    }
    print_scores(&s.final_losses, &s.baselines, s.delta_m, s.delta_m_deg);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    if let Some(n) = args.n {
        c.sweep.n = n;
    }
    if let Some(s) = args.scheme {
        c.sweep.scheme = s;
    }
    if let Some(t) = args.threads {
        c.sweep.threads = t;
    }
    if let Some(d) = args.out_dir {
        c.output.dir = d;
    }
    if args.no_traces {
        c.output.sweep_traces = false;
    }
    sweep_with(c)
}

fn sweep_with(c: RunConfig) -> Result<()> {
    let report = cmd_sweep(&c)?;
    let failed = report.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "{} runs, {failed} failed, table {}",
        report.rows.len(),
        report.table.display()
    );
    if let Some(i) = report.best {
        let row = &report.rows[i];
        let s = &row.outcome.as_ref().expect("best run succeeded").summary;
        println!("best {} weights {:?}", row.run_id, row.weights);
        print_scores(&s.final_losses, &s.baselines, s.delta_m, s.delta_m_deg);
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let opts = AnalyzeOptions {
        metrics: args.metrics.unwrap_or_else(|| MetricName::ALL.to_vec()),
        smoothing: args.smooth,
        out_dir: args.out_dir,
        verify: !args.no_verify,
    };
    let report = cmd_analyze(&args.traces, &opts)?;
    println!("{} runs", report.runs.len());
    for (m, rho) in &report.correlations {
        match rho {
            Some(r) => println!("spearman(delta_m, {m}) = {r:.4}"),
            None => println!("spearman(delta_m, {m}) undefined"),
        }
    }
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let rows = cmd_eval(&args.scores)?;
    match args.out {
        Some(p) => write_eval_table(&rows, std::fs::File::create(p)?),
        None => write_eval_table(&rows, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AUTOSCALE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
