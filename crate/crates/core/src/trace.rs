//! Inference traces: one record per evaluated sample, holding the ground
//! truth, the small model's softmax output and whether the large model got
//! the sample right.
//!
//! Traces are stored as JSON Lines. Each line is an object with the keys
//! `id`, `label`, `sml_probs`, `lml_correct` and optionally `sml_pred` and
//! `features`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum (and range) of a probability vector.
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub id: String,
    pub label: usize,
    pub sml_probs: Vec<f64>,
    pub sml_pred: usize,
    pub lml_correct: bool,
    pub features: Option<Vec<f64>>,
}

impl TraceRecord {
    /// Builds a record, deriving `sml_pred` from the probabilities.
    pub fn new(
        id: impl Into<String>,
        label: usize,
        sml_probs: Vec<f64>,
        lml_correct: bool,
    ) -> Self {
        let sml_pred = argmax(&sml_probs);
        TraceRecord {
            id: id.into(),
            label,
            sml_probs,
            sml_pred,
            lml_correct,
            features: None,
        }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }

    /// Max softmax value of the small model.
    pub fn confidence(&self) -> f64 {
        self.sml_probs[self.sml_pred]
    }

    pub fn sml_correct(&self) -> bool {
        self.sml_pred == self.label
    }
}

/// Whether the on-device model suffices for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComplexityLabel {
    Simple,
    Complex,
}

impl ComplexityLabel {
    pub fn is_complex(self) -> bool {
        self == ComplexityLabel::Complex
    }
}

/// Complex iff the small model's prediction is wrong.
pub fn gate_label(record: &TraceRecord) -> ComplexityLabel {
    if record.sml_pred == record.label {
        ComplexityLabel::Simple
    } else {
        ComplexityLabel::Complex
    }
}

/// Index of the largest entry; the smallest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
    num_classes: usize,
    feature_dim: Option<usize>,
}

impl Trace {
    /// Validates records and renormalises their probability vectors.
    ///
    /// Line numbers in errors are 1-based record positions.
    pub fn new(records: Vec<TraceRecord>) -> Result<Self> {
        let mut records = records;
        if records.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let num_classes = records[0].sml_probs.len();
        let mut feature_dim = None;
        for (i, rec) in records.iter_mut().enumerate() {
            let line = i + 1;
            validate_record(rec, line, num_classes, &mut feature_dim, false)?;
        }
        Ok(Trace {
            records,
            num_classes,
            feature_dim,
        })
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    /// Empirical accuracy of the small model.
    pub fn sml_accuracy(&self) -> f64 {
        let hits = self.records.iter().filter(|r| r.sml_correct()).count();
        hits as f64 / self.len() as f64
    }

    /// Empirical accuracy of the large model.
    pub fn lml_accuracy(&self) -> f64 {
        let hits = self.records.iter().filter(|r| r.lml_correct).count();
        hits as f64 / self.len() as f64
    }

    /// Copy of the trace in which the large model is always right.
    pub fn with_lml_oracle(&self) -> Trace {
        let mut out = self.clone();
        for r in &mut out.records {
            r.lml_correct = true;
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.records {
            let raw = RawRecord::from(rec);
            serde_json::to_writer(&mut w, &raw)?;
            w.write_all(b"\n")
                .map_err(|e| Error::output("<writer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut records = Vec::new();
        let mut num_classes = None;
        let mut feature_dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            let k = *num_classes.get_or_insert(raw.sml_probs.len());
            let given_pred = raw.sml_pred;
            let mut rec = TraceRecord {
                id: raw.id,
                label: raw.label,
                sml_pred: 0,
                sml_probs: raw.sml_probs,
                lml_correct: raw.lml_correct,
                features: raw.features,
            };
            rec.sml_pred = given_pred.unwrap_or(usize::MAX);
            validate_record(&mut rec, line_no, k, &mut feature_dim, given_pred.is_none())?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(Trace {
            records,
            num_classes: num_classes.unwrap_or(0),
            feature_dim,
        })
    }
}

fn validate_record(
    rec: &mut TraceRecord,
    line: usize,
    num_classes: usize,
    feature_dim: &mut Option<usize>,
    derive_pred: bool,
) -> Result<()> {
    let k = rec.sml_probs.len();
    if k < 2 {
        return Err(Error::MalformedLine {
            line,
            message: format!("sml_probs needs at least 2 entries, got {k}"),
        });
    }
    if k != num_classes {
        return Err(Error::ClassCount {
            line,
            expected: num_classes,
            found: k,
        });
    }
    if rec.label >= k {
        return Err(Error::LabelRange {
            line,
            label: rec.label,
            num_classes: k,
        });
    }
    for &p in &rec.sml_probs {
        if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
            return Err(Error::ProbabilityRange { line, value: p });
        }
    }
    let sum: f64 = rec.sml_probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::ProbabilitySum { line, sum });
    }
    for p in &mut rec.sml_probs {
        *p = p.clamp(0.0, 1.0);
    }
    let clamped_sum: f64 = rec.sml_probs.iter().sum();
    // Vectors already normalised up to rounding are left untouched, so
    // rebuilding a trace from its own records is exact.
    if (clamped_sum - 1.0).abs() > num_classes as f64 * f64::EPSILON {
        for p in &mut rec.sml_probs {
            *p /= clamped_sum;
        }
    }
    let arg = argmax(&rec.sml_probs);
    if derive_pred {
        rec.sml_pred = arg;
    } else if rec.sml_pred != arg {
        return Err(Error::PredictionMismatch {
            line,
            given: rec.sml_pred,
            argmax: arg,
        });
    }
    if let Some(f) = &rec.features {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedLine {
                line,
                message: "non-finite feature value".into(),
            });
        }
        match feature_dim {
            None => *feature_dim = Some(f.len()),
            Some(d) if *d != f.len() => {
                return Err(Error::FeatureDim {
                    line,
                    expected: *d,
                    found: f.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    label: usize,
    sml_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sml_pred: Option<usize>,
    lml_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

impl From<&TraceRecord> for RawRecord {
    fn from(r: &TraceRecord) -> Self {
        RawRecord {
            id: r.id.clone(),
            label: r.label,
            sml_probs: r.sml_probs.clone(),
            sml_pred: Some(r.sml_pred),
            lml_correct: r.lml_correct,
            features: r.features.clone(),
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Trace::read_jsonl(file)
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::output(path, e))?;
    let mut w = BufWriter::new(file);
    trace.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::output(path, e))
}

/// Seeded shuffle followed by a prefix split of sizes `floor(n*f)` and the rest.
pub fn split_trace(trace: &Trace, train_fraction: f64, seed: u64) -> Result<(Trace, Trace)> {
    let (a, b) = split_records(trace.records(), train_fraction, seed)?;
    Ok((Trace::new(a)?, Trace::new(b)?))
}

pub(crate) fn split_records(
    records: &[TraceRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<TraceRecord>, Vec<TraceRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = records.len();
    if n < 2 {
        return Err(Error::TooFewRecords { needed: 2, got: n });
    }
    let cut = (n as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == n {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} leaves an empty half for {n} records"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first = idx[..cut].iter().map(|&i| records[i].clone()).collect();
    let second = idx[cut..].iter().map(|&i| records[i].clone()).collect();
    Ok((first, second))
}

/// Indices of a class-balanced subsample: the majority class is sampled
/// without replacement down to the minority count, and the result is shuffled.
pub(crate) fn balanced_indices(is_positive: &[bool], seed: u64) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..is_positive.len()).partition(|&i| is_positive[i]);
    if pos.is_empty() {
        return Err(Error::MissingClass("Complex"));
    }
    if neg.is_empty() {
        return Err(Error::MissingClass("Simple"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = pos.len().min(neg.len());
    let mut out = Vec::with_capacity(2 * m);
    for mut group in [pos, neg] {
        if group.len() > m {
            group = rand::seq::index::sample(&mut rng, group.len(), m)
                .into_iter()
                .map(|j| group[j])
                .collect();
        }
        out.extend(group);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Subsamples the majority complexity class so Simple and Complex counts match.
pub fn downsample_balance(records: &[TraceRecord], seed: u64) -> Result<Vec<TraceRecord>> {
    let complex: Vec<bool> = records.iter().map(|r| gate_label(r).is_complex()).collect();
    let idx = balanced_indices(&complex, seed)?;
    Ok(idx.into_iter().map(|i| records[i].clone()).collect())
}
