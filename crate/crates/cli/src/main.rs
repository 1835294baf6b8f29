//! `higate`: command-line front end for hierarchical-inference experiments.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use higate::calibration::{fit_temperature_with, reliability, DEFAULT_BINS};
use higate::evaluation::{
    evaluate, full_offload_crossover, sweep_alpha_ratio, sweep_beta, sweep_threshold,
    write_sweep_csv, CostModel, SweepPolicy, DEFAULT_GRID_STEP,
};
use higate::learners::{GateHyper, LearnerKind};
use higate::policies::{build_gate, GateStage, PolicySpec};
use higate::report::{emit_reliability_plotdata, parse_grid, run, ExperimentConfig, PolicyRequest};
use higate::synth::{generate, SynthConfig};
use higate::trace::{load_trace, save_trace, Trace};
use higate::{Error, Execution, Result};

const POLICY_HELP: &str = "Policy: ft, cft, cft@T=<t>, ft:<theta>, cft:<theta>@T=<t>, \
gate:pre|post:<model.json>, full-offload, never-offload. Threshold rules accept locally \
when confidence >= theta (a confidence equal to theta is accepted).";

const RUN_POLICY_HELP: &str = "Replaces the configured policy list. Accepts ft, cft, cft@T=<t>, \
ft:<theta>, cft:<theta>@T=<t>, full-offload, never-offload, and gate:pre|post:lr|svm|rf to \
train a gate. Threshold rules accept locally when confidence >= theta.";

#[derive(Parser)]
#[command(
    name = "higate",
    version,
    about = "Offloading decisions for on-device inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trace as JSON Lines.
    Generate(GenerateArgs),
    /// Fit a temperature and report ECE before and after.
    Calibrate(CalibrateArgs),
    /// Train a complexity gate and save it as JSON.
    TrainGate(TrainGateArgs),
    /// Evaluate fixed policies on a trace.
    Evaluate(EvaluateArgs),
    /// Sweep the threshold theta (accept locally when confidence >= theta) and report the CPI-optimal one.
    SweepThreshold(SweepThresholdArgs),
    /// Sweep the offload cost beta.
    SweepBeta(SweepArgs),
    /// Sweep the ratio alpha/beta at fixed beta.
    SweepRatio(SweepArgs),
    /// Full pipeline from a JSON config; flags override config fields.
    Run(RunArgs),
}

#[derive(Args)]
struct CostArgs {
    /// Cost of running the on-device model.
    #[arg(long)]
    alpha: Option<f64>,
    /// Cost of offloading to the remote model.
    #[arg(long)]
    beta: Option<f64>,
    /// Cost of a wrong final answer.
    #[arg(long)]
    gamma: Option<f64>,
    /// Cost of evaluating a learned gate.
    #[arg(long)]
    gate_cost: Option<f64>,
}

impl CostArgs {
    fn apply(&self, base: CostModel) -> CostModel {
        CostModel {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
            gamma: self.gamma.unwrap_or(base.gamma),
            gate_cost: self.gate_cost.unwrap_or(base.gate_cost),
        }
    }
}

#[derive(Args)]
struct TraceArgs {
    /// Trace file (JSON Lines).
    #[arg(long)]
    trace: PathBuf,
    /// Treat every offloaded sample as answered correctly.
    #[arg(long)]
    lml_oracle: bool,
}

impl TraceArgs {
    fn load(&self) -> Result<Trace> {
        let trace = load_trace(&self.trace)?;
        Ok(if self.lml_oracle {
            trace.with_lml_oracle()
        } else {
            trace
        })
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    /// Power applied to the calibrated probabilities (1 keeps them calibrated).
    #[arg(long, default_value_t = 2.0)]
    overconfidence: f64,
    #[arg(long, default_value_t = 0.995)]
    lml_acc: f64,
    #[arg(long, default_value_t = 5.0)]
    q_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    q_beta: f64,
    /// Attach raw-input features of this dimension.
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Also write reliability plot data (CSV) here.
    #[arg(long)]
    plotdata: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGateArgs {
    #[command(flatten)]
    trace: TraceArgs,
    /// Where the gate sits: before (pre, raw features) or after (post, softmax) the on-device model.
    #[arg(long, default_value = "post")]
    gate_stage: GateStage,
    #[arg(long, default_value = "lr")]
    gate_kind: LearnerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long = "policy", required = true, help = POLICY_HELP)]
    policies: Vec<String>,
}

#[derive(Args)]
struct SweepThresholdArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    /// Sweep temperature-scaled confidences instead of raw ones.
    #[arg(long)]
    temperature: Option<f64>,
    /// Write the per-threshold table (CSV) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    trace: TraceArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    /// Beta values, `start:end:step` or a comma list.
    #[arg(long, default_value = "0:1:0.1")]
    beta_grid: String,
    /// Alpha/beta ratios, `start:end:step` or a comma list.
    #[arg(long, default_value = "0:1:0.1")]
    ratio_grid: String,
    #[arg(long = "policy", required = true, help = POLICY_HELP)]
    policies: Vec<String>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    beta_grid: Option<String>,
    #[arg(long)]
    ratio_grid: Option<String>,
    #[arg(long = "policy", help = RUN_POLICY_HELP)]
    policies: Vec<String>,
    #[arg(long)]
    calibrate: Option<bool>,
    #[arg(long)]
    lml_oracle: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// `HIGATE_THREADS` caps the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("HIGATE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "HIGATE_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::TrainGate(a) => cmd_train_gate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SweepThreshold(a) => cmd_sweep_threshold(a),
        Command::SweepBeta(a) => cmd_sweep(a, false),
        Command::SweepRatio(a) => cmd_sweep(a, true),
        Command::Run(a) => cmd_run(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::Output {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Output {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Output {
            path: path.to_path_buf(),
            source: e,
        })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::Output {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let config = SynthConfig {
        n: a.n,
        num_classes: a.num_classes,
        q_alpha: a.q_alpha,
        q_beta: a.q_beta,
        lml_acc: a.lml_acc,
        overconfidence: a.overconfidence,
        feature_dim: a.feature_dim,
        feature_noise: a.feature_noise,
        seed: a.seed,
    };
    let trace = generate(&config)?;
    save_trace(&trace, &a.out)?;
    eprintln!(
        "wrote {} records to {} (on-device accuracy {:.4})",
        trace.len(),
        a.out.display(),
        trace.sml_accuracy()
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let trace = a.trace.load()?;
    let fit = fit_temperature_with(&trace, a.bins, Execution::default())?;
    if let Some(path) = &a.plotdata {
        let before = reliability(&trace, a.bins, 1.0)?;
        let after = reliability(&trace, a.bins, fit.temperature)?;
        let mut w = create(path)?;
        emit_reliability_plotdata(&before, Some(&after), &mut w)?;
        finish(w, path)?;
    }
    print_json(&fit)
}

fn cmd_train_gate(a: TrainGateArgs) -> Result<()> {
    let trace = a.trace.load()?;
    let hyper = GateHyper::with_kind(a.gate_kind);
    let build = build_gate(&trace, a.gate_stage, &hyper, a.seed)?;
    let mut w = create(&a.out)?;
    w.write_all(build.model().to_json()?.as_bytes())
        .map_err(|e| Error::Output {
            path: a.out.clone(),
            source: e,
        })?;
    finish(w, &a.out)?;
    print_json(&build.metrics)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let trace = a.trace.load()?;
    let cm = a.cost.apply(CostModel::default());
    let mut reports = Vec::new();
    for s in &a.policies {
        let policy = PolicySpec::parse(s)?;
        reports.push(evaluate(&trace, &policy, &cm)?);
    }
    print_json(&reports)
}

fn cmd_sweep_threshold(a: SweepThresholdArgs) -> Result<()> {
    let trace = a.trace.load()?;
    let cm = a.cost.apply(CostModel::default());
    let sweep = sweep_threshold(&trace, &cm, a.grid_step, a.temperature)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        sweep.write_csv(&mut w)?;
        finish(w, path)?;
    }
    print_json(&serde_json::json!({
        "theta": sweep.best_theta(),
        "temperature": sweep.temperature,
        "report": sweep.best_report(),
    }))
}

/// Resolves sweep policies. `cft` without a temperature fits one on the trace.
fn sweep_policies(trace: &Trace, specs: &[String]) -> Result<Vec<SweepPolicy>> {
    let mut fitted = None;
    let mut out = Vec::new();
    for s in specs {
        let policy = match s.parse::<PolicyRequest>()? {
            PolicyRequest::Ft => SweepPolicy::Reoptimized { temperature: None },
            PolicyRequest::Cft => {
                let t = match fitted {
                    Some(t) => t,
                    None => {
                        let t = fit_temperature_with(trace, DEFAULT_BINS, Execution::default())?
                            .temperature;
                        fitted = Some(t);
                        t
                    }
                };
                SweepPolicy::Reoptimized {
                    temperature: Some(t),
                }
            }
            PolicyRequest::CftWith(t) => SweepPolicy::Reoptimized {
                temperature: Some(t),
            },
            PolicyRequest::TrainGate(..) => {
                return Err(Error::PolicySpec {
                    spec: s.clone(),
                    reason: "sweeps take a trained model file (see train-gate), or use `run`"
                        .into(),
                })
            }
            PolicyRequest::Concrete(p) => SweepPolicy::Fixed(p),
        };
        out.push(policy);
    }
    Ok(out)
}

fn cmd_sweep(a: SweepArgs, ratio: bool) -> Result<()> {
    let trace = a.trace.load()?;
    let cm = a.cost.apply(CostModel::default());
    let policies = sweep_policies(&trace, &a.policies)?;
    let rows = if ratio {
        let grid = parse_grid(&a.ratio_grid)?;
        let rows = sweep_alpha_ratio(&trace, &policies, &cm, &grid, a.grid_step)?;
        match full_offload_crossover(&rows, &grid) {
            Some(r) => eprintln!("full offload is cheapest from alpha/beta = {r}"),
            None => eprintln!("full offload is not cheapest at the top of the ratio grid"),
        }
        rows
    } else {
        let grid = parse_grid(&a.beta_grid)?;
        sweep_beta(&trace, &policies, &cm, &grid, a.grid_step)?
    };
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_sweep_csv(&rows, &mut w)?;
            finish(w, path)
        }
        None => write_sweep_csv(&rows, io::stdout().lock()),
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(trace) = a.trace {
        config.trace = Some(trace);
        config.synth = None;
    }
    if config.trace.is_none() && config.synth.is_none() {
        config.synth = Some(SynthConfig::default());
    }
    if let Some(dir) = a.out_dir {
        config.out_dir = dir;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.cost = a.cost.apply(config.cost);
    if let Some(step) = a.grid_step {
        config.grid_step = step;
    }
    if let Some(g) = &a.beta_grid {
        config.beta_grid = parse_grid(g)?;
    }
    if let Some(g) = &a.ratio_grid {
        config.ratio_grid = parse_grid(g)?;
    }
    if !a.policies.is_empty() {
        config.policies = a.policies;
    }
    if let Some(c) = a.calibrate {
        config.calibrate = c;
    }
    if a.lml_oracle {
        config.lml_oracle = true;
    }
    let output = run(&config)?;
    eprintln!(
        "wrote {} files to {}",
        output.files.len(),
        config.out_dir.display()
    );
    print_json(&output.report)
}
