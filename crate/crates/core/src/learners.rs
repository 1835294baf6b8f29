//! Deterministic binary classifiers used as offloading gates.
//!
//! Label convention: `true` = complex (class 1), `false` = simple.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean/std per column. Zero-variance columns get std 1.
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::invalid(
                "cannot fit a standardizer on an empty matrix",
            ));
        }
        let d = x[0].len();
        check_rows(x, d)?;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x {
            for j in 0..d {
                let diff = row[j] - mean[j];
                var[j] += diff * diff;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn apply_all(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter().map(|row| self.apply(row)).collect()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_rows(x: &[Vec<f64>], d: usize) -> Result<()> {
    for row in x {
        check_dim(d, row.len())?;
    }
    Ok(())
}

fn check_training_set(x: &[Vec<f64>], y: &[bool]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    check_rows(x, d)?;
    if !y.iter().any(|&v| v) {
        return Err(Error::MissingClass("Complex"));
    }
    if y.iter().all(|&v| v) {
        return Err(Error::MissingClass("Simple"));
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    #[serde(alias = "logistic")]
    Lr,
    Svm,
    Rf,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Lr => "lr",
            LearnerKind::Svm => "svm",
            LearnerKind::Rf => "rf",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" | "logistic" => Ok(LearnerKind::Lr),
            "svm" => Ok(LearnerKind::Svm),
            "rf" | "forest" => Ok(LearnerKind::Rf),
            other => Err(Error::invalid(format!("unknown gate kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestHyper {
    pub num_trees: usize,
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` samples `floor(sqrt(d))` features per split.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestHyper {
    fn default() -> Self {
        ForestHyper {
            num_trees: 100,
            max_depth: Some(12),
            min_leaf: 2,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateHyper {
    pub kind: LearnerKind,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub forest: ForestHyper,
}

impl Default for GateHyper {
    fn default() -> Self {
        GateHyper {
            kind: LearnerKind::Lr,
            l2_lambda: 1e-4,
            learning_rate: 0.1,
            epochs: 500,
            svm_lambda: 1e-4,
            svm_epochs: 20,
            forest: ForestHyper::default(),
        }
    }
}

impl GateHyper {
    pub fn with_kind(kind: LearnerKind) -> Self {
        GateHyper {
            kind,
            ..GateHyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.l2_lambda >= 0.0
            && self.learning_rate > 0.0
            && self.epochs > 0
            && self.svm_lambda > 0.0
            && self.svm_epochs > 0
            && self.forest.num_trees > 0
            && self.forest.min_leaf > 0
            && self.forest.max_depth != Some(0)
            && self.forest.features_per_split != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("gate hyperparameters must be positive"))
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Logistic,
    Svm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: LinearKind,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.weights.len(), x.len())?;
        Ok(dot(&self.weights, x) + self.bias)
    }

    /// Probability-like score of the positive class. SVM margins are squashed
    /// through the same sigmoid, so score 0.5 is margin 0.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.margin(x)?))
    }
}

/// Mean cross-entropy plus `(lambda/2) * |w|^2`, with its gradient.
pub fn logistic_loss_and_grad(
    x: &[Vec<f64>],
    y: &[bool],
    weights: &[f64],
    bias: f64,
    lambda: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = dot(weights, row) + bias;
        let t = if label { 1.0 } else { 0.0 };
        // log(1 + e^z) - t z, computed stably
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        loss += softplus - t * z;
        let err = sigmoid(z) - t;
        for (g, v) in grad_w.iter_mut().zip(row) {
            *g += err * v;
        }
        grad_b += err;
    }
    let reg: f64 = weights.iter().map(|w| w * w).sum::<f64>() * 0.5 * lambda;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + lambda * w;
    }
    (loss / n + reg, grad_w, grad_b / n)
}

/// Full-batch gradient descent from zero weights.
pub fn train_logistic(x: &[Vec<f64>], y: &[bool], hyper: &GateHyper) -> Result<LinearModel> {
    Ok(train_logistic_traced(x, y, hyper)?.0)
}

/// As [`train_logistic`], also returning the loss before each epoch and after
/// the last one.
pub fn train_logistic_traced(
    x: &[Vec<f64>],
    y: &[bool],
    hyper: &GateHyper,
) -> Result<(LinearModel, Vec<f64>)> {
    hyper.validate()?;
    let d = check_training_set(x, y)?;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    for _ in 0..hyper.epochs {
        let (loss, gw, gb) = logistic_loss_and_grad(x, y, &w, b, hyper.l2_lambda);
        losses.push(loss);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= hyper.learning_rate * gi;
        }
        b -= hyper.learning_rate * gb;
    }
    losses.push(logistic_loss_and_grad(x, y, &w, b, hyper.l2_lambda).0);
    Ok((
        LinearModel {
            kind: LinearKind::Logistic,
            weights: w,
            bias: b,
        },
        losses,
    ))
}

/// Sub-gradient of the mean hinge loss (without the regulariser) at `(w, b)`.
/// Labels map to `+1` (complex) and `-1` (simple).
pub fn hinge_subgradient(
    x: &[Vec<f64>],
    y: &[bool],
    weights: &[f64],
    bias: f64,
) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let s = if label { 1.0 } else { -1.0 };
        if s * (dot(weights, row) + bias) < 1.0 {
            for (g, v) in gw.iter_mut().zip(row) {
                *g -= s * v / n;
            }
            gb -= s / n;
        }
    }
    (gw, gb)
}

/// Stochastic sub-gradient descent on the regularised hinge loss with step
/// `1 / (lambda * t)`. The bias is treated as the weight of a constant input,
/// and iterates are projected onto the ball of radius `1 / sqrt(lambda)`.
pub fn train_linear_svm(
    x: &[Vec<f64>],
    y: &[bool],
    hyper: &GateHyper,
    seed: u64,
) -> Result<LinearModel> {
    hyper.validate()?;
    let d = check_training_set(x, y)?;
    let lambda = hyper.svm_lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    for _ in 0..hyper.svm_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let s = if y[i] { 1.0 } else { -1.0 };
            let margin = s * (dot(&w, &x[i]) + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|wi| *wi *= shrink);
            b *= shrink;
            if margin < 1.0 {
                for (wi, v) in w.iter_mut().zip(&x[i]) {
                    *wi += eta * s * v;
                }
                b += eta * s;
            }
            let norm = (w.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
            if norm > radius {
                let scale = radius / norm;
                w.iter_mut().for_each(|wi| *wi *= scale);
                b *= scale;
            }
        }
    }
    Ok(LinearModel {
        kind: LinearKind::Svm,
        weights: w,
        bias: b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        fraction: f64,
    },
}

/// Flat node list; node 0 is the root. `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Fraction of complex training samples in the leaf reached by `x`.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { fraction } => return *fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub hyper: ForestHyper,
    pub dim: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let sum: f64 = self.trees.iter().map(|t| t.score(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

pub fn train_random_forest(
    x: &[Vec<f64>],
    y: &[bool],
    hyper: &GateHyper,
    seed: u64,
) -> Result<ForestModel> {
    train_random_forest_with(x, y, hyper, seed, Execution::default())
}

/// Bagged CART trees on Gini impurity. Each tree draws from its own RNG
/// stream `(seed, tree index)`, so trees may be grown concurrently.
pub fn train_random_forest_with(
    x: &[Vec<f64>],
    y: &[bool],
    hyper: &GateHyper,
    seed: u64,
    exec: Execution,
) -> Result<ForestModel> {
    hyper.validate()?;
    let d = check_training_set(x, y)?;
    let fh = hyper.forest;
    let mtry = fh
        .features_per_split
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
        .min(d);
    let trees = exec.map_range(fh.num_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let n = x.len();
        let sample: Vec<usize> = if fh.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut builder = TreeBuilder {
            x,
            y,
            hyper: fh,
            mtry,
            rng,
            nodes: Vec::new(),
        };
        builder.grow(sample, 0);
        Tree {
            nodes: builder.nodes,
        }
    });
    Ok(ForestModel {
        hyper: fh,
        dim: d,
        trees,
    })
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    hyper: ForestHyper,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

impl TreeBuilder<'_> {
    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let pos = samples.iter().filter(|&&i| self.y[i]).count();
        let fraction = pos as f64 / samples.len() as f64;
        self.nodes.push(Node::Leaf { fraction });

        let pure = pos == 0 || pos == samples.len();
        let depth_ok = self.hyper.max_depth.is_none_or(|m| depth < m);
        if pure || !depth_ok || samples.len() < 2 * self.hyper.min_leaf {
            return id;
        }
        let Some(split) = self.find_split(&samples) else {
            return id;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&i| self.x[i][split.feature] <= split.threshold);
        let left_id = self.grow(left, depth + 1);
        let right_id = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_id,
            right: right_id,
        };
        id
    }

    /// Best Gini split over `mtry` randomly ordered features; keeps scanning
    /// further features when none of the first `mtry` admits a valid split.
    fn find_split(&mut self, samples: &[usize]) -> Option<SplitChoice> {
        let d = self.x[samples[0]].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(&mut self.rng);
        let mut best: Option<SplitChoice> = None;
        for (k, &f) in features.iter().enumerate() {
            if k >= self.mtry && best.is_some() {
                break;
            }
            if let Some(c) = self.best_for_feature(samples, f) {
                if best.as_ref().is_none_or(|b| c.impurity < b.impurity) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_for_feature(&self, samples: &[usize], feature: usize) -> Option<SplitChoice> {
        let mut order: Vec<(f64, bool)> = samples
            .iter()
            .map(|&i| (self.x[i][feature], self.y[i]))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = order.len();
        let total_pos = order.iter().filter(|o| o.1).count();
        let min_leaf = self.hyper.min_leaf;
        let mut left_pos = 0;
        let mut best: Option<SplitChoice> = None;
        for i in 0..n - 1 {
            left_pos += usize::from(order[i].1);
            let left_n = i + 1;
            if order[i].0 == order[i + 1].0 || left_n < min_leaf || n - left_n < min_leaf {
                continue;
            }
            let impurity = (left_n as f64 * gini(left_pos, left_n)
                + (n - left_n) as f64 * gini(total_pos - left_pos, n - left_n))
                / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let (lo, hi) = (order[i].0, order[i + 1].0);
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum GateBody {
    Linear(LinearModel),
    Forest(ForestModel),
}

/// A trained gate: learner plus the standardizer fitted on its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub kind: LearnerKind,
    pub hyper: GateHyper,
    pub seed: u64,
    pub standardizer: Standardizer,
    pub body: GateBody,
}

impl GateModel {
    /// Fits the standardizer on `x` and trains the configured learner.
    pub fn train(x: &[Vec<f64>], y: &[bool], hyper: &GateHyper, seed: u64) -> Result<Self> {
        let standardizer = Standardizer::fit(x)?;
        let z = standardizer.apply_all(x)?;
        let body = match hyper.kind {
            LearnerKind::Lr => GateBody::Linear(train_logistic(&z, y, hyper)?),
            LearnerKind::Svm => GateBody::Linear(train_linear_svm(&z, y, hyper, seed)?),
            LearnerKind::Rf => GateBody::Forest(train_random_forest(&z, y, hyper, seed)?),
        };
        Ok(GateModel {
            kind: hyper.kind,
            hyper: hyper.clone(),
            seed,
            standardizer,
            body,
        })
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Score in `[0, 1]` that `x` is complex.
    pub fn predict_score(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(x)?;
        match &self.body {
            GateBody::Linear(m) => m.score(&z),
            GateBody::Forest(f) => f.score(&z),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: GateModel = serde_json::from_str(text)?;
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        check_dim(d, self.standardizer.std.len())?;
        match &self.body {
            GateBody::Linear(m) => {
                check_dim(d, m.weights.len())?;
                if !m.weights.iter().all(|w| w.is_finite()) || !m.bias.is_finite() {
                    return Err(Error::invalid("non-finite linear gate weights"));
                }
            }
            GateBody::Forest(f) => {
                check_dim(d, f.dim)?;
                if f.trees.is_empty() {
                    return Err(Error::invalid("forest has no trees"));
                }
                for tree in &f.trees {
                    let n = tree.nodes.len();
                    if n == 0 {
                        return Err(Error::invalid("empty tree"));
                    }
                    for node in &tree.nodes {
                        match *node {
                            Node::Split {
                                feature,
                                left,
                                right,
                                ..
                            } => {
                                if feature >= d || left >= n || right >= n {
                                    return Err(Error::invalid("tree node index out of range"));
                                }
                            }
                            Node::Leaf { fraction } => {
                                if !(0.0..=1.0).contains(&fraction) {
                                    return Err(Error::invalid("leaf fraction outside [0, 1]"));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
