//! Synthetic traces with a known calibration ground truth.
//!
//! Each record draws a top-class probability `p1` and decides correctness
//! with probability exactly `p1`; a wrong label falls on the other classes in
//! proportion to their probabilities. The undistorted vectors are therefore
//! calibrated by construction. A power distortion `p_i^c / sum_j p_j^c` then inflates
//! confidence without moving the argmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trace::{Trace, TraceRecord};

const CLASS_MEAN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub q_alpha: f64,
    pub q_beta: f64,
    pub lml_acc: f64,
    pub overconfidence: f64,
    pub feature_dim: Option<usize>,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10_000,
            num_classes: 10,
            q_alpha: 5.0,
            q_beta: 1.0,
            lml_acc: 0.995,
            overconfidence: 2.0,
            feature_dim: None,
            feature_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::invalid("synth n must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("synth num_classes must be at least 2"));
        }
        if !(self.q_alpha > 0.0 && self.q_beta > 0.0) {
            return Err(Error::invalid("beta shape parameters must be positive"));
        }
        if !(self.lml_acc > 0.0 && self.lml_acc <= 1.0) {
            return Err(Error::invalid("lml_acc must lie in (0, 1]"));
        }
        if !(self.overconfidence >= 1.0 && self.overconfidence.is_finite()) {
            return Err(Error::invalid("overconfidence exponent must be >= 1"));
        }
        if self.feature_dim == Some(0) {
            return Err(Error::invalid("feature_dim must be positive when set"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::invalid("feature_noise must be non-negative"));
        }
        Ok(())
    }

    /// Expected small-model accuracy: `1/K + (1 - 1/K) * E[q]`.
    pub fn expected_sml_accuracy(&self) -> f64 {
        let k = self.num_classes as f64;
        let mean_q = self.q_alpha / (self.q_alpha + self.q_beta);
        1.0 / k + (1.0 - 1.0 / k) * mean_q
    }
}

/// Normalised power distortion `p_i^c / sum_j p_j^c`.
pub fn power_distort(probs: &[f64], c: f64) -> Vec<f64> {
    let powered: Vec<f64> = probs.iter().map(|p| p.powf(c)).collect();
    let sum: f64 = powered.iter().sum();
    powered.into_iter().map(|p| p / sum).collect()
}

pub fn generate(config: &SynthConfig) -> Result<Trace> {
    generate_with(config, Execution::default())
}

pub fn generate_with(config: &SynthConfig, exec: Execution) -> Result<Trace> {
    config.validate()?;
    let class_means = config.feature_dim.map(|d| class_means(config, d));
    let records = exec.map_range(config.n, |i| draw_record(config, class_means.as_deref(), i));
    Trace::new(records)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_means(config: &SynthConfig, d: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(config.seed, CLASS_MEAN_STREAM);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..config.num_classes)
        .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn draw_record(config: &SynthConfig, means: Option<&[Vec<f64>]>, index: usize) -> TraceRecord {
    let k = config.num_classes;
    let mut rng = stream_rng(config.seed, index as u64);

    let pred = rng.random_range(0..k);
    let q: f64 = Beta::new(config.q_alpha, config.q_beta)
        .expect("validated shape parameters")
        .sample(&mut rng);
    let top = 1.0 / k as f64 + (1.0 - 1.0 / k as f64) * q;
    let correct = rng.random_bool(top.clamp(0.0, 1.0));

    // Flat Dirichlet over the remaining classes.
    let mut rest: Vec<f64> = (0..k - 1).map(|_| Exp1.sample(&mut rng)).collect();
    let rest_sum: f64 = rest.iter().sum();
    let rest_mass = 1.0 - top;
    for r in &mut rest {
        *r = *r / rest_sum * rest_mass;
    }
    keep_below(&mut rest, top, rest_mass);

    let mut probs = Vec::with_capacity(k);
    let mut rest_iter = rest.into_iter();
    for class in 0..k {
        if class == pred {
            probs.push(top);
        } else {
            probs.push(rest_iter.next().unwrap_or(0.0));
        }
    }
    // A wrong label lands on another class in proportion to its mass, so the
    // whole vector (not just its maximum) is the true label distribution.
    let label = if correct {
        pred
    } else {
        let mut u = rng.random::<f64>() * rest_mass;
        let mut chosen = if pred == 0 { 1 } else { 0 };
        for (class, &p) in probs.iter().enumerate() {
            if class == pred {
                continue;
            }
            chosen = class;
            if u < p {
                break;
            }
            u -= p;
        }
        chosen
    };
    if config.overconfidence != 1.0 {
        probs = power_distort(&probs, config.overconfidence);
    }

    let lml_correct = rng.random_bool(config.lml_acc);

    let mut record = TraceRecord::new(format!("syn-{index:06}"), label, probs, lml_correct);
    if let Some(means) = means {
        let sd = config.feature_noise * (1.0 + (1.0 - top));
        let noise = Normal::new(0.0, sd.max(0.0)).expect("finite noise scale");
        let features = means[label]
            .iter()
            .map(|m| m + noise.sample(&mut rng))
            .collect();
        record.features = Some(features);
    }
    record
}

/// Mixes the non-top entries toward uniform until all lie strictly below
/// `top`. Uniform entries are `mass / len <= top` whenever `top >= 1/K`.
fn keep_below(rest: &mut [f64], top: f64, mass: f64) {
    let max = rest.iter().cloned().fold(0.0, f64::max);
    if max < top || rest.is_empty() {
        return;
    }
    let uniform = mass / rest.len() as f64;
    if uniform >= top {
        rest.iter_mut().for_each(|r| *r = uniform);
        return;
    }
    // Choose lambda so the largest entry lands just below the top one.
    let target = uniform + (top - uniform) * 0.999;
    let lambda = (max - target) / (max - uniform);
    for r in rest.iter_mut() {
        *r = (1.0 - lambda) * *r + lambda * uniform;
    }
}
