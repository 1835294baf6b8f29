//! Offloading decision modules: confidence thresholds (raw or temperature
//! scaled), learned gates before or after the on-device model, and the two
//! constant baselines.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::scaled_confidence;
use crate::error::{Error, Result};
use crate::learners::{GateHyper, GateModel};
use crate::trace::{downsample_balance, gate_label, split_records, Trace, TraceRecord};

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;
/// Share of the balanced gate data used for training; the rest is held out.
pub const GATE_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    AcceptLocal,
    Offload,
}

/// Where a learned gate sits relative to the on-device model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateStage {
    /// Sees the raw input features; offloaded samples skip the small model.
    Pre,
    /// Sees the small model's softmax vector.
    Post,
}

impl GateStage {
    pub fn as_str(self) -> &'static str {
        match self {
            GateStage::Pre => "pre",
            GateStage::Post => "post",
        }
    }

    /// The gate's input vector for a record.
    pub fn features(self, record: &TraceRecord) -> Result<Vec<f64>> {
        match self {
            GateStage::Post => Ok(post_gate_features(&record.sml_probs)),
            GateStage::Pre => record
                .features
                .clone()
                .ok_or_else(|| Error::MissingFeatures {
                    id: record.id.clone(),
                }),
        }
    }
}

/// Softmax vector followed by the same values sorted in descending order.
/// The sorted half exposes the top probabilities at fixed positions, which a
/// linear gate cannot otherwise extract from class-ordered coordinates.
pub fn post_gate_features(probs: &[f64]) -> Vec<f64> {
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out = Vec::with_capacity(2 * probs.len());
    out.extend_from_slice(probs);
    out.extend(sorted);
    out
}

impl std::str::FromStr for GateStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(GateStage::Pre),
            "post" => Ok(GateStage::Post),
            other => Err(Error::invalid(format!("unknown gate stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatePolicy {
    pub stage: GateStage,
    pub model: Arc<GateModel>,
    /// Offload iff score >= threshold.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyFamily {
    FixedThreshold,
    CalibratedThreshold,
    PostGate,
    PreGate,
    FullOffload,
    NeverOffload,
}

impl PolicyFamily {
    /// Whether the on-device model runs on a sample under this family.
    pub fn runs_sml(self, decision: Decision) -> bool {
        match self {
            PolicyFamily::FullOffload => false,
            PolicyFamily::PreGate => decision == Decision::AcceptLocal,
            _ => true,
        }
    }

    pub fn runs_gate(self) -> bool {
        matches!(self, PolicyFamily::PostGate | PolicyFamily::PreGate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    FixedThreshold { theta: f64 },
    CalibratedThreshold { theta: f64, temperature: f64 },
    Gate(GatePolicy),
    FullOffload,
    NeverOffload,
}

impl PolicySpec {
    pub fn fixed(theta: f64) -> Result<Self> {
        check_theta(theta)?;
        Ok(PolicySpec::FixedThreshold { theta })
    }

    pub fn calibrated(theta: f64, temperature: f64) -> Result<Self> {
        check_theta(theta)?;
        check_temperature(temperature)?;
        Ok(PolicySpec::CalibratedThreshold { theta, temperature })
    }

    pub fn gate(stage: GateStage, model: GateModel) -> Self {
        PolicySpec::Gate(GatePolicy {
            stage,
            model: Arc::new(model),
            threshold: DEFAULT_GATE_THRESHOLD,
        })
    }

    pub fn family(&self) -> PolicyFamily {
        match self {
            PolicySpec::FixedThreshold { .. } => PolicyFamily::FixedThreshold,
            PolicySpec::CalibratedThreshold { .. } => PolicyFamily::CalibratedThreshold,
            PolicySpec::Gate(g) if g.stage == GateStage::Pre => PolicyFamily::PreGate,
            PolicySpec::Gate(_) => PolicyFamily::PostGate,
            PolicySpec::FullOffload => PolicyFamily::FullOffload,
            PolicySpec::NeverOffload => PolicyFamily::NeverOffload,
        }
    }

    /// Parses `ft:0.55`, `cft:0.5@T=1.8`, `gate:post:model.json`,
    /// `gate:pre:model.json`, `full-offload` or `never-offload`. Gate models
    /// are read from disk.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::PolicySpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let s = spec.trim();
        match s {
            "full-offload" => return Ok(PolicySpec::FullOffload),
            "never-offload" => return Ok(PolicySpec::NeverOffload),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("ft:") {
            let theta = parse_number(rest).ok_or_else(|| bad("expected ft:<theta>"))?;
            return PolicySpec::fixed(theta).map_err(|e| bad(&e.to_string()));
        }
        if let Some(rest) = s.strip_prefix("cft:") {
            let (theta, t) = rest
                .split_once("@T=")
                .ok_or_else(|| bad("expected cft:<theta>@T=<temperature>"))?;
            let theta = parse_number(theta).ok_or_else(|| bad("bad threshold"))?;
            let t = parse_number(t).ok_or_else(|| bad("bad temperature"))?;
            return PolicySpec::calibrated(theta, t).map_err(|e| bad(&e.to_string()));
        }
        if let Some(rest) = s.strip_prefix("gate:") {
            let (stage, path) = rest
                .split_once(':')
                .ok_or_else(|| bad("expected gate:<pre|post>:<model.json>"))?;
            let stage: GateStage = stage
                .parse()
                .map_err(|_| bad("stage must be pre or post"))?;
            let model = load_gate_model(path)?;
            return Ok(PolicySpec::gate(stage, model));
        }
        Err(bad("unknown policy family"))
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::FixedThreshold { theta } => write!(f, "ft:{theta}"),
            PolicySpec::CalibratedThreshold { theta, temperature } => {
                write!(f, "cft:{theta}@T={temperature}")
            }
            PolicySpec::Gate(g) => write!(f, "gate:{}:{}", g.stage.as_str(), g.model.kind.as_str()),
            PolicySpec::FullOffload => f.write_str("full-offload"),
            PolicySpec::NeverOffload => f.write_str("never-offload"),
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "threshold must lie in [0, 1], got {theta}"
        )))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

pub fn load_gate_model(path: impl AsRef<Path>) -> Result<GateModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GateModel::from_json(&text)
}

/// Accept-or-offload decision. Threshold rules accept on `conf >= theta`;
/// gates offload on `score >= threshold` (score = probability of complex).
pub fn decide(policy: &PolicySpec, record: &TraceRecord) -> Result<Decision> {
    let accept_if = |ok: bool| {
        if ok {
            Decision::AcceptLocal
        } else {
            Decision::Offload
        }
    };
    Ok(match policy {
        PolicySpec::FixedThreshold { theta } => accept_if(record.confidence() >= *theta),
        PolicySpec::CalibratedThreshold { theta, temperature } => {
            accept_if(scaled_confidence(&record.sml_probs, *temperature) >= *theta)
        }
        PolicySpec::Gate(g) => {
            let score = g.model.predict_score(&g.stage.features(record)?)?;
            accept_if(score < g.threshold)
        }
        PolicySpec::FullOffload => Decision::Offload,
        PolicySpec::NeverOffload => Decision::AcceptLocal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateMetrics {
    pub balanced_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Accuracy of complex-vs-simple predictions on the held-out 20%.
    pub held_out_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GateBuild {
    pub policy: PolicySpec,
    pub metrics: GateMetrics,
}

impl GateBuild {
    pub fn model(&self) -> &GateModel {
        match &self.policy {
            PolicySpec::Gate(g) => &g.model,
            _ => unreachable!("gate builds always hold a gate policy"),
        }
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gate labels, class balancing, 80:20 split, standardisation and training.
pub fn build_gate(
    train: &Trace,
    stage: GateStage,
    hyper: &GateHyper,
    seed: u64,
) -> Result<GateBuild> {
    if stage == GateStage::Pre {
        if let Some(r) = train.records().iter().find(|r| r.features.is_none()) {
            return Err(Error::MissingFeatures { id: r.id.clone() });
        }
    }
    let balanced = downsample_balance(train.records(), derive_seed(seed, 1))?;
    let (fit, held_out) = split_records(&balanced, GATE_TRAIN_FRACTION, derive_seed(seed, 2))?;

    let xy = |records: &[TraceRecord]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut x = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        for r in records {
            x.push(stage.features(r)?);
            y.push(gate_label(r).is_complex());
        }
        Ok((x, y))
    };
    let (x_fit, y_fit) = xy(&fit)?;
    let (x_test, y_test) = xy(&held_out)?;

    let model = GateModel::train(&x_fit, &y_fit, hyper, derive_seed(seed, 3))?;
    let mut hits = 0usize;
    for (x, &y) in x_test.iter().zip(&y_test) {
        let complex = model.predict_score(x)? >= DEFAULT_GATE_THRESHOLD;
        hits += usize::from(complex == y);
    }
    let metrics = GateMetrics {
        balanced_size: balanced.len(),
        train_size: fit.len(),
        test_size: held_out.len(),
        held_out_accuracy: hits as f64 / held_out.len() as f64,
    };
    Ok(GateBuild {
        policy: PolicySpec::gate(stage, model),
        metrics,
    })
}

/// Gate on the softmax output, after the on-device model.
pub fn build_post_gate(train: &Trace, hyper: &GateHyper, seed: u64) -> Result<GateBuild> {
    build_gate(train, GateStage::Post, hyper, seed)
}

/// Gate on raw input features, before the on-device model.
pub fn build_pre_gate(train: &Trace, hyper: &GateHyper, seed: u64) -> Result<GateBuild> {
    build_gate(train, GateStage::Pre, hyper, seed)
}
