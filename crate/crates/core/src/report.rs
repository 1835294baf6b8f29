//! Experiment orchestration and artifact emission.
//!
//! [`run`] takes an [`ExperimentConfig`] through load (or generate), split,
//! optional temperature fitting, gate training and the threshold / beta /
//! alpha-ratio sweeps, then writes JSON reports, CSV tables and a manifest.
//! Identical configs produce byte-identical outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    ece, fit_temperature_with, reliability, CalibrationResult, ReliabilityBins,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, full_offload_crossover, round12, sweep_alpha_ratio, sweep_beta, sweep_threshold,
    write_sweep_csv, CostModel, EvaluationReport, SweepPolicy, SweepRow, DEFAULT_GRID_STEP,
};
use crate::exec::Execution;
use crate::learners::{GateHyper, LearnerKind};
use crate::policies::{build_gate, GateMetrics, GateStage, PolicySpec, DEFAULT_GATE_THRESHOLD};
use crate::synth::{generate, SynthConfig};
use crate::trace::{load_trace, split_trace, Trace};

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("bad grid `{s}`; expected start:end:step or a,b,c"));
    let num = |t: &str| t.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let (start, end, step) = (
            num(parts[0]).ok_or_else(bad)?,
            num(parts[1]).ok_or_else(bad)?,
            num(parts[2]).ok_or_else(bad)?,
        );
        if step <= 0.0 || end < start {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=count)
            .map(|i| round12(start + i as f64 * step))
            .collect());
    }
    if parts.len() == 1 {
        let values: Option<Vec<f64>> = s.split(',').map(num).collect();
        return values.filter(|v| !v.is_empty()).ok_or_else(bad);
    }
    Err(bad())
}

/// A policy as requested in a config: either concrete, or something the
/// pipeline has to fit first (threshold re-optimisation, temperature, gate).
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyRequest {
    /// `ft`: threshold re-optimised per cost point.
    Ft,
    /// `cft`: as `ft` on temperature-scaled confidences, temperature fitted.
    Cft,
    /// `cft@T=1.8`: as `cft` with a given temperature.
    CftWith(f64),
    /// `gate:post:lr` and friends: train a gate of this kind.
    TrainGate(GateStage, LearnerKind),
    Concrete(PolicySpec),
}

impl FromStr for PolicyRequest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "ft" => return Ok(PolicyRequest::Ft),
            "cft" => return Ok(PolicyRequest::Cft),
            _ => {}
        }
        if let Some(t) = s.strip_prefix("cft@T=") {
            let t: f64 = t.parse().map_err(|_| Error::PolicySpec {
                spec: s.to_string(),
                reason: "bad temperature".into(),
            })?;
            PolicySpec::calibrated(0.0, t)?;
            return Ok(PolicyRequest::CftWith(t));
        }
        if let Some(rest) = s.strip_prefix("gate:") {
            if let Some((stage, kind)) = rest.split_once(':') {
                if let (Ok(stage), Ok(kind)) = (stage.parse(), kind.parse()) {
                    return Ok(PolicyRequest::TrainGate(stage, kind));
                }
            }
        }
        PolicySpec::parse(s).map(PolicyRequest::Concrete)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trace: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Share of the trace used to train gates and fit the temperature; the
    /// rest is the evaluation split.
    pub gate_train_fraction: f64,
    pub calibrate: bool,
    pub num_bins: usize,
    pub policies: Vec<String>,
    pub gate: GateHyper,
    pub gate_threshold: f64,
    pub cost: CostModel,
    pub grid_step: f64,
    pub beta_grid: Vec<f64>,
    pub ratio_grid: Vec<f64>,
    pub lml_oracle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trace: None,
            synth: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            gate_train_fraction: 0.5,
            calibrate: true,
            num_bins: 10,
            policies: ["ft", "cft", "gate:post:lr", "full-offload", "never-offload"]
                .map(String::from)
                .to_vec(),
            gate: GateHyper::default(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            cost: CostModel::default(),
            grid_step: DEFAULT_GRID_STEP,
            beta_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            ratio_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            lml_oracle: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<Vec<PolicyRequest>> {
        match (&self.trace, &self.synth) {
            (Some(p), None) => {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "trace file not found"),
                    ));
                }
            }
            (None, Some(s)) => s.validate()?,
            _ => {
                return Err(Error::invalid(
                    "exactly one of `trace` or `synth` must be set",
                ))
            }
        }
        if !(self.gate_train_fraction > 0.0 && self.gate_train_fraction < 1.0) {
            return Err(Error::invalid("gate_train_fraction must lie in (0, 1)"));
        }
        if self.num_bins < 1 {
            return Err(Error::invalid("num_bins must be at least 1"));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::invalid("gate_threshold must lie in (0, 1)"));
        }
        self.cost.validate()?;
        self.gate.validate()?;
        crate::evaluation::theta_grid(self.grid_step)?;
        if self.beta_grid.is_empty() || self.ratio_grid.is_empty() {
            return Err(Error::invalid("cost grids must be non-empty"));
        }
        if self.policies.is_empty() {
            return Err(Error::invalid("at least one policy is required"));
        }
        let requests: Vec<PolicyRequest> = self
            .policies
            .iter()
            .map(|p| p.parse())
            .collect::<Result<_>>()?;
        if requests.contains(&PolicyRequest::Cft) && !self.calibrate {
            return Err(Error::invalid("policy `cft` needs calibrate = true"));
        }
        Ok(requests)
    }
}

/// Reliability bins as plot-ready CSV; only occupied bins are emitted.
pub fn emit_reliability_plotdata<W: Write>(
    before: &ReliabilityBins,
    after: Option<&ReliabilityBins>,
    mut w: W,
) -> Result<()> {
    let io = |e| Error::output("<csv>", e);
    writeln!(w, "bin_low,bin_high,count,mean_conf,mean_acc,stage").map_err(io)?;
    for (stage, bins) in [("before", Some(before)), ("after", after)] {
        let Some(bins) = bins else { continue };
        for (m, b) in bins.bins.iter().enumerate() {
            if b.count == 0 {
                continue;
            }
            let (lo, hi) = bins.bounds(m);
            writeln!(
                w,
                "{},{},{},{},{},{}",
                round12(lo),
                round12(hi),
                b.count,
                b.mean_conf,
                b.mean_acc,
                stage
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub source: String,
    pub n: usize,
    pub num_classes: usize,
    pub feature_dim: Option<usize>,
    pub sml_accuracy: f64,
    pub lml_accuracy: f64,
}

impl TraceSummary {
    pub fn of(trace: &Trace, source: String) -> Self {
        TraceSummary {
            source,
            n: trace.len(),
            num_classes: trace.num_classes(),
            feature_dim: trace.feature_dim(),
            sml_accuracy: trace.sml_accuracy(),
            lml_accuracy: trace.lml_accuracy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    /// Fitted on the gate-training split.
    pub fit: CalibrationResult,
    pub eval_ece_before: f64,
    pub eval_ece_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub policy: String,
    pub model_file: String,
    pub metrics: GateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    /// Threshold chosen at the base cost point, for re-optimised rules.
    pub theta: Option<f64>,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trace: TraceSummary,
    pub gate_train_size: usize,
    pub evaluation_size: usize,
    pub lml_oracle: bool,
    pub calibration: Option<CalibrationSummary>,
    pub gates: Vec<GateSummary>,
    pub evaluations: Vec<PolicyEvaluation>,
    /// Smallest alpha/beta grid ratio from which full offload is cheapest.
    pub full_offload_crossover: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub split_seed: u64,
    pub gate_seed: u64,
    pub files: Vec<String>,
}

/// Writes artifacts one at a time into the output directory.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::output(dir, e))?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::output(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub beta_rows: Vec<SweepRow>,
    pub ratio_rows: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
}

const SPLIT_SEED_TAG: u64 = 0x5eed_0001;
const GATE_SEED_TAG: u64 = 0x5eed_0002;

pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let requests = config.validate()?;
    let split_seed = config.seed ^ SPLIT_SEED_TAG;
    let gate_seed = config.seed ^ GATE_SEED_TAG;

    let (trace, source) = match (&config.trace, &config.synth) {
        (Some(path), _) => (
            load_trace(path).map_err(|e| e.in_stage("load"))?,
            path.display().to_string(),
        ),
        (None, Some(s)) => (
            generate(s).map_err(|e| e.in_stage("generate"))?,
            format!("synth(seed={})", s.seed),
        ),
        _ => unreachable!("validated"),
    };
    let trace = if config.lml_oracle {
        trace.with_lml_oracle()
    } else {
        trace
    };
    let (gate_train, eval) = split_trace(&trace, config.gate_train_fraction, split_seed)
        .map_err(|e| e.in_stage("split"))?;

    let mut out = Emitter::new(&config.out_dir)?;
    let mut notes = vec![
        "temperature is fitted on the gate-training split; ECE is reported on both splits"
            .to_string(),
        "threshold rules re-select their threshold at every cost point; gates are trained once"
            .to_string(),
    ];
    if config.lml_oracle {
        notes.push("large-model errors are not charged (lml_oracle)".to_string());
    }

    let calibration = if config.calibrate {
        let fit = fit_temperature_with(&gate_train, config.num_bins, Execution::default())
            .map_err(|e| e.in_stage("calibrate"))?;
        let before = reliability(&gate_train, config.num_bins, 1.0)?;
        let after = reliability(&gate_train, config.num_bins, fit.temperature)?;
        let mut csv = Vec::new();
        emit_reliability_plotdata(&before, Some(&after), &mut csv)?;
        out.write("reliability.csv", &csv)?;
        Some(CalibrationSummary {
            fit,
            eval_ece_before: ece(&reliability(&eval, config.num_bins, 1.0)?)?,
            eval_ece_after: ece(&reliability(&eval, config.num_bins, fit.temperature)?)?,
        })
    } else {
        None
    };
    let temperature = calibration.as_ref().map(|c| c.fit.temperature);

    let mut gates = Vec::new();
    let mut sweep_policies = Vec::new();
    for (i, req) in requests.iter().enumerate() {
        let policy = match req {
            PolicyRequest::Ft => SweepPolicy::Reoptimized { temperature: None },
            PolicyRequest::Cft => SweepPolicy::Reoptimized { temperature },
            PolicyRequest::CftWith(t) => SweepPolicy::Reoptimized {
                temperature: Some(*t),
            },
            PolicyRequest::TrainGate(stage, kind) => {
                let hyper = GateHyper {
                    kind: *kind,
                    ..config.gate.clone()
                };
                let build = build_gate(
                    &gate_train,
                    *stage,
                    &hyper,
                    gate_seed.wrapping_add(i as u64),
                )
                .map_err(|e| e.in_stage("train-gate"))?;
                let name = format!("gate_{}_{}.json", stage.as_str(), kind.as_str());
                out.write(&name, build.model().to_json()?.as_bytes())?;
                let mut spec = build.policy.clone();
                if let PolicySpec::Gate(g) = &mut spec {
                    g.threshold = config.gate_threshold;
                }
                gates.push(GateSummary {
                    policy: spec.to_string(),
                    model_file: name,
                    metrics: build.metrics,
                });
                SweepPolicy::Fixed(spec)
            }
            PolicyRequest::Concrete(spec) => {
                let mut spec = spec.clone();
                if let PolicySpec::Gate(g) = &mut spec {
                    g.threshold = config.gate_threshold;
                }
                SweepPolicy::Fixed(spec)
            }
        };
        sweep_policies.push(policy);
    }

    let mut evaluations = Vec::new();
    for policy in &sweep_policies {
        let eval_one = match policy {
            SweepPolicy::Reoptimized { temperature } => {
                let sweep = sweep_threshold(&eval, &config.cost, config.grid_step, *temperature)?;
                let name = if temperature.is_some() {
                    "threshold_cft.csv"
                } else {
                    "threshold_ft.csv"
                };
                let mut csv = Vec::new();
                sweep.write_csv(&mut csv)?;
                if !out.files.iter().any(|f| f == name) {
                    out.write(name, &csv)?;
                }
                PolicyEvaluation {
                    theta: Some(sweep.best_theta()),
                    report: sweep.best_report().clone(),
                }
            }
            SweepPolicy::Fixed(spec) => PolicyEvaluation {
                theta: None,
                report: evaluate(&eval, spec, &config.cost).map_err(|e| e.in_stage("evaluate"))?,
            },
        };
        evaluations.push(eval_one);
    }

    let beta_rows = sweep_beta(
        &eval,
        &sweep_policies,
        &config.cost,
        &config.beta_grid,
        config.grid_step,
    )
    .map_err(|e| e.in_stage("sweep-beta"))?;
    let mut csv = Vec::new();
    write_sweep_csv(&beta_rows, &mut csv)?;
    out.write("beta_sweep.csv", &csv)?;

    let ratio_rows = sweep_alpha_ratio(
        &eval,
        &sweep_policies,
        &config.cost,
        &config.ratio_grid,
        config.grid_step,
    )
    .map_err(|e| e.in_stage("sweep-ratio"))?;
    let mut csv = Vec::new();
    write_sweep_csv(&ratio_rows, &mut csv)?;
    out.write("ratio_sweep.csv", &csv)?;

    let report = RunReport {
        trace: TraceSummary::of(&trace, source),
        gate_train_size: gate_train.len(),
        evaluation_size: eval.len(),
        lml_oracle: config.lml_oracle,
        calibration,
        gates,
        evaluations,
        full_offload_crossover: full_offload_crossover(&ratio_rows, &config.ratio_grid),
        notes,
    };
    out.json("report.json", &report)?;

    let mut files = out.files.clone();
    files.push("manifest.json".to_string());
    let manifest = Manifest {
        config: config.clone(),
        split_seed,
        gate_seed,
        files,
    };
    out.json("manifest.json", &manifest)?;

    Ok(RunOutput {
        report,
        beta_rows,
        ratio_rows,
        files: out.files.iter().map(|f| config.out_dir.join(f)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Bin;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.0:1.0:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
        assert_eq!(parse_grid("0.1,0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a:b").is_err());
    }

    #[test]
    fn policy_requests() {
        assert_eq!("ft".parse::<PolicyRequest>().unwrap(), PolicyRequest::Ft);
        assert_eq!(
            "cft@T=2".parse::<PolicyRequest>().unwrap(),
            PolicyRequest::CftWith(2.0)
        );
        assert_eq!(
            "gate:pre:rf".parse::<PolicyRequest>().unwrap(),
            PolicyRequest::TrainGate(GateStage::Pre, LearnerKind::Rf)
        );
        assert_eq!(
            "ft:0.3".parse::<PolicyRequest>().unwrap(),
            PolicyRequest::Concrete(PolicySpec::FixedThreshold { theta: 0.3 })
        );
        assert!("cft@T=-1".parse::<PolicyRequest>().is_err());
    }

    #[test]
    fn reliability_csv_rows() {
        let before = ReliabilityBins {
            num_bins: 10,
            bins: (0..10)
                .map(|m| {
                    if m == 9 {
                        Bin {
                            count: 4,
                            mean_conf: 0.95,
                            mean_acc: 0.75,
                        }
                    } else {
                        Bin::default()
                    }
                })
                .collect(),
        };
        let mut buf = Vec::new();
        emit_reliability_plotdata(&before, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "bin_low,bin_high,count,mean_conf,mean_acc,stage\n0.9,1,4,0.95,0.75,before\n"
        );
    }

    #[test]
    fn config_requires_single_source() {
        let c = ExperimentConfig::default();
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            trace: Some(PathBuf::from("/definitely/missing.jsonl")),
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Io { .. })));
    }
}
