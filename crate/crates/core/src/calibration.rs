//! Temperature scaling, reliability binning and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ordered_sum, Execution};
use crate::trace::Trace;

/// Clamp for the likelihood of the true class.
pub const NLL_EPSILON: f64 = 1e-12;
/// Floor applied before taking the log of a probability.
pub const LOGIT_FLOOR: f64 = f64::MIN_POSITIVE;

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 10.0;
/// Golden-section stopping width, in log-temperature.
pub const LOG_T_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 10;

/// Softmax of `ln(p) / T`.
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(scaled_softmax(probs, temperature))
}

fn scaled_softmax(probs: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = probs
        .iter()
        .map(|&p| p.max(LOGIT_FLOOR).ln() / temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Max of the temperature-scaled vector.
pub fn scaled_confidence(probs: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return probs.iter().cloned().fold(0.0, f64::max);
    }
    scaled_softmax(probs, temperature)
        .into_iter()
        .fold(0.0, f64::max)
}

pub fn negative_log_likelihood(trace: &Trace, temperature: f64) -> Result<f64> {
    negative_log_likelihood_with(trace, temperature, Execution::default())
}

pub fn negative_log_likelihood_with(
    trace: &Trace,
    temperature: f64,
    exec: Execution,
) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let terms = exec.map_slice(trace.records(), |r| {
        let q = scaled_softmax(&r.sml_probs, temperature)[r.label];
        -q.max(NLL_EPSILON).ln()
    });
    Ok(ordered_sum(terms) / trace.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub temperature: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub num_bins: usize,
}

/// Fits a single temperature by minimising NLL with golden-section search
/// over `ln T` in `[ln 0.05, ln 10]`. The bounds and `T = 1` are always
/// evaluated, so the fitted NLL never exceeds the uncalibrated one.
pub fn fit_temperature(fit_trace: &Trace) -> Result<CalibrationResult> {
    fit_temperature_with(fit_trace, DEFAULT_BINS, Execution::default())
}

pub fn fit_temperature_with(
    fit_trace: &Trace,
    num_bins: usize,
    exec: Execution,
) -> Result<CalibrationResult> {
    let nll = |log_t: f64| negative_log_likelihood_with(fit_trace, log_t.exp(), exec);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = nll(x1)?;
    let mut f2 = nll(x2)?;
    while hi - lo > LOG_T_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = nll(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = nll(x2)?;
        }
    }

    let nll_before = nll(0.0)?;
    let mut best = (0.0, nll_before);
    let mid = 0.5 * (lo + hi);
    for candidate in [mid, MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln()] {
        let value = nll(candidate)?;
        if value < best.1 {
            best = (candidate, value);
        }
    }
    let temperature = best.0.exp();

    let ece_before = ece(&reliability_with(fit_trace, num_bins, 1.0, exec)?)?;
    let ece_after = ece(&reliability_with(fit_trace, num_bins, temperature, exec)?)?;
    Ok(CalibrationResult {
        temperature,
        ece_before,
        ece_after,
        nll_before,
        nll_after: best.1,
        num_bins,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

/// Equal-width confidence bins. Bin `m` covers `(m/M, (m+1)/M]`, bin 0 also
/// includes 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn from_pairs(
        num_bins: usize,
        pairs: impl IntoIterator<Item = (f64, bool)>,
    ) -> Result<Self> {
        if num_bins < 1 {
            return Err(Error::invalid("number of bins must be at least 1"));
        }
        let mut conf_sum = vec![0.0; num_bins];
        let mut hits = vec![0usize; num_bins];
        let mut counts = vec![0usize; num_bins];
        for (conf, correct) in pairs {
            let m = bin_index(conf, num_bins);
            counts[m] += 1;
            conf_sum[m] += conf;
            hits[m] += usize::from(correct);
        }
        let bins = (0..num_bins)
            .map(|m| {
                if counts[m] == 0 {
                    Bin::default()
                } else {
                    let n = counts[m] as f64;
                    Bin {
                        count: counts[m],
                        mean_conf: conf_sum[m] / n,
                        mean_acc: hits[m] as f64 / n,
                    }
                }
            })
            .collect();
        Ok(ReliabilityBins { num_bins, bins })
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `(low, high)` edges of bin `m`.
    pub fn bounds(&self, m: usize) -> (f64, f64) {
        bin_bounds(m, self.num_bins)
    }
}

fn bin_bounds(m: usize, num_bins: usize) -> (f64, f64) {
    (m as f64 / num_bins as f64, (m + 1) as f64 / num_bins as f64)
}

pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    let conf = conf.clamp(0.0, 1.0);
    let mut m = ((conf * num_bins as f64).ceil() as usize).saturating_sub(1);
    m = m.min(num_bins - 1);
    // Correct for rounding in conf * M against the exact edge values.
    while m > 0 && conf <= bin_bounds(m, num_bins).0 {
        m -= 1;
    }
    while m + 1 < num_bins && conf > bin_bounds(m, num_bins).1 {
        m += 1;
    }
    m
}

pub fn reliability(trace: &Trace, num_bins: usize, temperature: f64) -> Result<ReliabilityBins> {
    reliability_with(trace, num_bins, temperature, Execution::default())
}

pub fn reliability_with(
    trace: &Trace,
    num_bins: usize,
    temperature: f64,
    exec: Execution,
) -> Result<ReliabilityBins> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let pairs = exec.map_slice(trace.records(), |r| {
        (
            scaled_confidence(&r.sml_probs, temperature),
            r.sml_correct(),
        )
    });
    ReliabilityBins::from_pairs(num_bins, pairs)
}

/// Count-weighted mean absolute gap between accuracy and confidence.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    let n = bins.total();
    if n == 0 {
        return Err(Error::invalid("ECE needs at least one binned sample"));
    }
    Ok(ordered_sum(bins.bins.iter().map(|b| {
        b.count as f64 / n as f64 * (b.mean_acc - b.mean_conf).abs()
    })))
}
