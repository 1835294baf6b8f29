//! Test-only oracles and fixtures. Nothing here calls into the code paths
//! it is used to check.
#![allow(dead_code)]

use higate::evaluation::EvaluationReport;
use higate::synth::{generate, SynthConfig};
use higate::trace::{Trace, TraceRecord};

pub fn synth(n: usize, c: f64, seed: u64) -> Trace {
    generate(&SynthConfig {
        n,
        overconfidence: c,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn synth_with_features(n: usize, seed: u64) -> Trace {
    generate(&SynthConfig {
        n,
        seed,
        feature_dim: Some(8),
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Mean NLL of the true class after temperature scaling, computed directly
/// with log-sum-exp on `ln p / T`.
pub struct NllOracle {
    logs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl NllOracle {
    pub fn new(trace: &Trace) -> Self {
        NllOracle {
            logs: trace
                .records()
                .iter()
                .map(|r| r.sml_probs.iter().map(|p| p.max(1e-300).ln()).collect())
                .collect(),
            labels: trace.records().iter().map(|r| r.label).collect(),
        }
    }

    pub fn nll(&self, t: f64) -> f64 {
        let mut total = 0.0;
        for (logs, &y) in self.logs.iter().zip(&self.labels) {
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
            let lse = max + logs.iter().map(|l| (l / t - max).exp()).sum::<f64>().ln();
            total += lse - logs[y] / t;
        }
        total / self.labels.len() as f64
    }

    /// Minimiser over a uniform grid in ln T with the given step.
    pub fn grid_argmin_log_t(&self, step: f64) -> f64 {
        let (lo, hi) = (0.05f64.ln(), 10f64.ln());
        let count = ((hi - lo) / step).floor() as usize;
        let mut best = (lo, f64::INFINITY);
        for i in 0..=count {
            let x = lo + i as f64 * step;
            let v = self.nll(x.exp());
            if v < best.1 {
                best = (x, v);
            }
        }
        best.0
    }
}

/// Independent per-record cost for threshold rules (the small model always runs).
pub fn threshold_cost(r: &TraceRecord, accept: bool, alpha: f64, beta: f64, gamma: f64) -> f64 {
    let wrong = if accept {
        r.sml_pred != r.label
    } else {
        !r.lml_correct
    };
    alpha + if accept { 0.0 } else { beta } + if wrong { gamma } else { 0.0 }
}

/// Exhaustive search over "accept iff confidence >= c" for every distinct
/// confidence c, plus "offload everything". Returns (best threshold, CPI).
pub fn exhaustive_threshold(trace: &Trace, alpha: f64, beta: f64, gamma: f64) -> (f64, f64) {
    let mut confs: Vec<f64> = trace
        .records()
        .iter()
        .map(|r| max_prob(&r.sml_probs))
        .collect();
    confs.sort_by(|a, b| a.total_cmp(b));
    confs.dedup();
    let mut candidates = confs;
    candidates.push(f64::INFINITY);
    let n = trace.len() as f64;
    let mut best = (f64::NAN, f64::INFINITY);
    for &c in &candidates {
        let cpi = trace
            .records()
            .iter()
            .map(|r| threshold_cost(r, max_prob(&r.sml_probs) >= c, alpha, beta, gamma))
            .sum::<f64>()
            / n;
        if cpi < best.1 - 1e-15 {
            best = (c, cpi);
        }
    }
    best
}

pub fn max_prob(p: &[f64]) -> f64 {
    p.iter().cloned().fold(0.0, f64::max)
}

/// CPI decomposition identity.
pub fn assert_decomposition(report: &EvaluationReport) {
    let gap = (report.cpi - report.decomposed_cpi()).abs();
    assert!(
        gap <= 1e-12,
        "decomposition gap {gap:e} for {}",
        report.policy
    );
}

/// Trace where confidence alone determines complexity: simple samples have
/// top probability in [0.75, 0.99], complex ones in [0.2, 0.45].
pub fn confidence_separable(n: usize, k: usize, seed: u64) -> Trace {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let label = rng.random_range(0..k);
            let complex = rng.random_bool(0.15);
            let top = if complex {
                rng.random_range(0.2..0.45)
            } else {
                rng.random_range(0.75..0.99)
            };
            let pred = if complex {
                (label + 1 + rng.random_range(0..k - 1)) % k
            } else {
                label
            };
            let mut rest: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = rest.iter().sum();
            // cap each non-top entry below the top one
            rest.iter_mut().for_each(|r| *r = *r / s * (1.0 - top));
            while rest.iter().any(|&r| r >= top) {
                let u = (1.0 - top) / (k - 1) as f64;
                rest.iter_mut().for_each(|r| *r = 0.5 * *r + 0.5 * u);
            }
            let mut probs = Vec::with_capacity(k);
            let mut it = rest.into_iter();
            for c in 0..k {
                probs.push(if c == pred { top } else { it.next().unwrap() });
            }
            TraceRecord::new(format!("sep-{i}"), label, probs, rng.random_bool(0.995))
        })
        .collect();
    Trace::new(records).unwrap()
}
