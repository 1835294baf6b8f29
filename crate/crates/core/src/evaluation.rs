//! Per-image cost model, confusion counts, and threshold / cost sweeps.
//!
//! Every sample pays `alpha` if the on-device model runs, `gate_cost` if a
//! learned gate is evaluated, `beta` if it is offloaded and `gamma` if the
//! final answer (local or remote) is wrong. Confusion counts treat
//! "simple and accepted locally" as the positive outcome.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::scaled_confidence;
use crate::error::{Error, Result};
use crate::exec::{ordered_sum, Execution};
use crate::policies::{decide, Decision, PolicyFamily, PolicySpec};
use crate::trace::{gate_label, Trace, TraceRecord};

pub const DEFAULT_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gate_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            alpha: 0.0,
            beta: 0.5,
            gamma: 1.0,
            gate_cost: 0.0,
        }
    }
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        CostModel {
            alpha,
            beta,
            gamma,
            gate_cost: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("gate_cost", self.gate_cost),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// What happened to one sample under a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOutcome {
    pub decision: Decision,
    pub ran_sml: bool,
    pub ran_gate: bool,
    pub correct: bool,
}

impl SampleOutcome {
    pub fn new(family: PolicyFamily, decision: Decision, record: &TraceRecord) -> Self {
        let correct = match decision {
            Decision::AcceptLocal => record.sml_correct(),
            Decision::Offload => record.lml_correct,
        };
        SampleOutcome {
            decision,
            ran_sml: family.runs_sml(decision),
            ran_gate: family.runs_gate(),
            correct,
        }
    }

    pub fn offloaded(&self) -> bool {
        self.decision == Decision::Offload
    }

    pub fn cost(&self, cm: &CostModel) -> f64 {
        let mut c = 0.0;
        if self.ran_sml {
            c += cm.alpha;
        }
        if self.ran_gate {
            c += cm.gate_cost;
        }
        if self.offloaded() {
            c += cm.beta;
        }
        if !self.correct {
            c += cm.gamma;
        }
        c
    }
}

pub fn sample_cost(
    family: PolicyFamily,
    decision: Decision,
    record: &TraceRecord,
    cm: &CostModel,
) -> f64 {
    SampleOutcome::new(family, decision, record).cost(cm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// Simple, accepted locally.
    pub tp: usize,
    /// Complex, accepted locally.
    pub fp: usize,
    /// Simple, offloaded.
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Complex, offloaded.
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: String,
    pub family: PolicyFamily,
    pub cost_model: CostModel,
    pub n: usize,
    pub cpi: f64,
    pub system_accuracy: f64,
    pub offload_fraction: f64,
    pub sml_fraction: f64,
    pub gate_fraction: f64,
    pub error_fraction: f64,
    pub confusion: ConfusionCounts,
    pub f1: f64,
}

impl EvaluationReport {
    /// `alpha*sml + gate_cost*gate + beta*offload + gamma*error` fractions.
    pub fn decomposed_cpi(&self) -> f64 {
        let cm = &self.cost_model;
        cm.alpha * self.sml_fraction
            + cm.gate_cost * self.gate_fraction
            + cm.beta * self.offload_fraction
            + cm.gamma * self.error_fraction
    }
}

fn aggregate(
    trace: &Trace,
    policy: String,
    family: PolicyFamily,
    decisions: &[Decision],
    cm: &CostModel,
) -> EvaluationReport {
    let n = trace.len();
    let mut confusion = ConfusionCounts::default();
    let (mut sml, mut gate, mut off, mut wrong) = (0usize, 0usize, 0usize, 0usize);
    let mut costs = Vec::with_capacity(n);
    for (record, &decision) in trace.records().iter().zip(decisions) {
        let o = SampleOutcome::new(family, decision, record);
        costs.push(o.cost(cm));
        sml += usize::from(o.ran_sml);
        gate += usize::from(o.ran_gate);
        off += usize::from(o.offloaded());
        wrong += usize::from(!o.correct);
        let complex = gate_label(record).is_complex();
        match (complex, o.offloaded()) {
            (false, false) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, true) => confusion.fn_ += 1,
            (true, true) => confusion.tn += 1,
        }
    }
    let nf = n as f64;
    EvaluationReport {
        policy,
        family,
        cost_model: *cm,
        n,
        cpi: ordered_sum(costs) / nf,
        system_accuracy: (n - wrong) as f64 / nf,
        offload_fraction: off as f64 / nf,
        sml_fraction: sml as f64 / nf,
        gate_fraction: gate as f64 / nf,
        error_fraction: wrong as f64 / nf,
        f1: confusion.f1(),
        confusion,
    }
}

pub fn evaluate(trace: &Trace, policy: &PolicySpec, cm: &CostModel) -> Result<EvaluationReport> {
    evaluate_with(trace, policy, cm, Execution::default())
}

pub fn evaluate_with(
    trace: &Trace,
    policy: &PolicySpec,
    cm: &CostModel,
    exec: Execution,
) -> Result<EvaluationReport> {
    cm.validate()?;
    let decisions: Vec<Decision> = exec
        .map_slice(trace.records(), |r| decide(policy, r))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(aggregate(
        trace,
        policy.to_string(),
        policy.family(),
        &decisions,
        cm,
    ))
}

/// `{0, step, 2*step, ...}` up to and including 1.
pub fn theta_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::invalid(format!(
            "grid step must lie in (0, 0.5], got {step}"
        )));
    }
    let count = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=count)
        .map(|i| round12(i as f64 * step).min(1.0))
        .collect();
    if *grid.last().unwrap() < 1.0 {
        grid.push(1.0);
    }
    Ok(grid)
}

pub(crate) fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub theta: f64,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub temperature: Option<f64>,
    pub points: Vec<ThresholdPoint>,
    /// Index of the lowest-CPI point; ties go to the smaller threshold.
    pub best: usize,
}

impl ThresholdSweep {
    pub fn best_theta(&self) -> f64 {
        self.points[self.best].theta
    }

    pub fn best_report(&self) -> &EvaluationReport {
        &self.points[self.best].report
    }

    pub fn best_policy(&self) -> PolicySpec {
        let theta = self.best_theta();
        match self.temperature {
            Some(temperature) => PolicySpec::CalibratedThreshold { theta, temperature },
            None => PolicySpec::FixedThreshold { theta },
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::output("<csv>", e);
        writeln!(w, "theta,cpi,accuracy,offload_fraction,f1").map_err(io)?;
        for p in &self.points {
            let r = &p.report;
            writeln!(
                w,
                "{},{},{},{},{}",
                p.theta, r.cpi, r.system_accuracy, r.offload_fraction, r.f1
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

pub fn sweep_threshold(
    trace: &Trace,
    cm: &CostModel,
    grid_step: f64,
    temperature: Option<f64>,
) -> Result<ThresholdSweep> {
    sweep_threshold_with(trace, cm, grid_step, temperature, Execution::default())
}

/// Evaluates the threshold rule at every grid point. With a temperature the
/// rule runs on temperature-scaled confidences.
pub fn sweep_threshold_with(
    trace: &Trace,
    cm: &CostModel,
    grid_step: f64,
    temperature: Option<f64>,
    exec: Execution,
) -> Result<ThresholdSweep> {
    cm.validate()?;
    let grid = theta_grid(grid_step)?;
    if let Some(t) = temperature {
        PolicySpec::calibrated(0.0, t)?;
    }
    let confidences = exec.map_slice(trace.records(), |r| match temperature {
        Some(t) => scaled_confidence(&r.sml_probs, t),
        None => r.confidence(),
    });
    let points = exec.map_slice(&grid, |&theta| {
        let policy = match temperature {
            Some(t) => PolicySpec::CalibratedThreshold {
                theta,
                temperature: t,
            },
            None => PolicySpec::FixedThreshold { theta },
        };
        let decisions: Vec<Decision> = confidences
            .iter()
            .map(|&c| {
                if c >= theta {
                    Decision::AcceptLocal
                } else {
                    Decision::Offload
                }
            })
            .collect();
        let report = aggregate(trace, policy.to_string(), policy.family(), &decisions, cm);
        ThresholdPoint { theta, report }
    });
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.report.cpi < points[best].report.cpi {
            best = i;
        }
    }
    Ok(ThresholdSweep {
        temperature,
        points,
        best,
    })
}

/// A policy taking part in a cost sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepPolicy {
    /// Threshold rule whose threshold is re-optimised at every cost point.
    Reoptimized { temperature: Option<f64> },
    /// Evaluated as-is at every cost point.
    Fixed(PolicySpec),
}

impl SweepPolicy {
    pub fn label(&self) -> String {
        match self {
            SweepPolicy::Reoptimized { temperature: None } => "ft".to_string(),
            SweepPolicy::Reoptimized {
                temperature: Some(t),
            } => format!("cft@T={t}"),
            SweepPolicy::Fixed(p) => p.to_string(),
        }
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "policy,beta,alpha,gamma,cpi,accuracy,offload_fraction,tp,fp,fn,tn,f1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub cpi: f64,
    pub accuracy: f64,
    pub offload_fraction: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub f1: f64,
    /// Threshold selected at this point, for re-optimised threshold rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl SweepRow {
    fn from_report(policy: String, report: &EvaluationReport, theta: Option<f64>) -> Self {
        let cm = report.cost_model;
        SweepRow {
            policy,
            beta: cm.beta,
            alpha: cm.alpha,
            gamma: cm.gamma,
            cpi: report.cpi,
            accuracy: report.system_accuracy,
            offload_fraction: report.offload_fraction,
            tp: report.confusion.tp,
            fp: report.confusion.fp,
            fn_: report.confusion.fn_,
            tn: report.confusion.tn,
            f1: report.f1,
            theta,
        }
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    let io = |e| Error::output("<csv>", e);
    writeln!(w, "{SWEEP_CSV_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.beta,
            r.alpha,
            r.gamma,
            r.cpi,
            r.accuracy,
            r.offload_fraction,
            r.tp,
            r.fp,
            r.fn_,
            r.tn,
            r.f1
        )
        .map_err(io)?;
    }
    Ok(())
}

fn sweep_costs(
    trace: &Trace,
    policies: &[SweepPolicy],
    costs: &[CostModel],
    grid_step: f64,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if policies.is_empty() || costs.is_empty() {
        return Err(Error::invalid(
            "sweeps need at least one policy and one grid point",
        ));
    }
    for cm in costs {
        cm.validate()?;
    }
    theta_grid(grid_step)?;
    let jobs = policies.len() * costs.len();
    exec.map_range(jobs, |job| {
        let policy = &policies[job / costs.len()];
        let cm = &costs[job % costs.len()];
        match policy {
            SweepPolicy::Reoptimized { temperature } => {
                let sweep = sweep_threshold_with(trace, cm, grid_step, *temperature, exec)?;
                Ok(SweepRow::from_report(
                    policy.label(),
                    sweep.best_report(),
                    Some(sweep.best_theta()),
                ))
            }
            SweepPolicy::Fixed(spec) => {
                let report = evaluate_with(trace, spec, cm, exec)?;
                Ok(SweepRow::from_report(policy.label(), &report, None))
            }
        }
    })
    .into_iter()
    .collect()
}

/// One row per (policy, beta), policy-major. Threshold rules re-select their
/// threshold at each beta; other policies are evaluated unchanged.
pub fn sweep_beta(
    trace: &Trace,
    policies: &[SweepPolicy],
    base: &CostModel,
    beta_grid: &[f64],
    grid_step: f64,
) -> Result<Vec<SweepRow>> {
    sweep_beta_with(
        trace,
        policies,
        base,
        beta_grid,
        grid_step,
        Execution::default(),
    )
}

pub fn sweep_beta_with(
    trace: &Trace,
    policies: &[SweepPolicy],
    base: &CostModel,
    beta_grid: &[f64],
    grid_step: f64,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let costs: Vec<CostModel> = beta_grid
        .iter()
        .map(|&beta| CostModel { beta, ..*base })
        .collect();
    sweep_costs(trace, policies, &costs, grid_step, exec)
}

/// One row per (policy, alpha/beta ratio) with `alpha = ratio * beta`.
pub fn sweep_alpha_ratio(
    trace: &Trace,
    policies: &[SweepPolicy],
    base: &CostModel,
    ratio_grid: &[f64],
    grid_step: f64,
) -> Result<Vec<SweepRow>> {
    sweep_alpha_ratio_with(
        trace,
        policies,
        base,
        ratio_grid,
        grid_step,
        Execution::default(),
    )
}

pub fn sweep_alpha_ratio_with(
    trace: &Trace,
    policies: &[SweepPolicy],
    base: &CostModel,
    ratio_grid: &[f64],
    grid_step: f64,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if let Some(r) = ratio_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid(format!(
            "alpha/beta ratios must lie in [0, 1], got {r}"
        )));
    }
    let costs: Vec<CostModel> = ratio_grid
        .iter()
        .map(|&r| CostModel {
            alpha: r * base.beta,
            ..*base
        })
        .collect();
    sweep_costs(trace, policies, &costs, grid_step, exec)
}

/// Smallest grid ratio from which full offload has the lowest CPI at every
/// larger grid ratio. `rows` must come from [`sweep_alpha_ratio`] over
/// `ratio_grid` with a `full-offload` policy among others.
pub fn full_offload_crossover(rows: &[SweepRow], ratio_grid: &[f64]) -> Option<f64> {
    let per_ratio = |k: usize| -> Option<bool> {
        let at: Vec<&SweepRow> = rows.iter().skip(k).step_by(ratio_grid.len()).collect();
        let full = at.iter().find(|r| r.policy == "full-offload")?;
        Some(at.iter().all(|r| full.cpi <= r.cpi))
    };
    let mut crossover = None;
    for k in (0..ratio_grid.len()).rev() {
        if per_ratio(k)? {
            crossover = Some(ratio_grid[k]);
        } else {
            break;
        }
    }
    crossover
}
