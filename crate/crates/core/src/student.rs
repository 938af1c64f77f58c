//! Multinomial logistic regression over instance embeddings, trained on gold
//! labels plus lambda-weighted teacher soft labels.
//!
//! The objective is
//!
//! ```text
//! mean_{labeled} CE(target, p(x)) + lambda * mean_{weak} CE(q, p(x))
//! ```
//!
//! where `CE(t, p) = -sum_k t_k ln p_k` and `p(x) = softmax(W x + b)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::macro_f1;
use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::teacher::TeacherOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentHyper {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for StudentHyper {
    fn default() -> Self {
        StudentHyper {
            lambda: 1.0,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 32,
            early_stop_patience: Some(10),
            seed: 0,
        }
    }
}

impl StudentHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    Gold,
    Teacher,
    Student,
}

/// `(corpus position, target distribution)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDataset {
    pub source: TargetSource,
    pub items: Vec<(usize, Vec<f64>)>,
}

impl SoftDataset {
    pub fn empty(source: TargetSource) -> Self {
        SoftDataset { source, items: Vec::new() }
    }

    /// One-hot targets from `(position, label)` pairs.
    pub fn from_labels(pairs: impl IntoIterator<Item = (usize, Label)>, num_classes: usize) -> Self {
        let items = pairs
            .into_iter()
            .map(|(idx, label)| {
                let mut t = vec![0.0; num_classes];
                t[label.index()] = 1.0;
                (idx, t)
            })
            .collect();
        SoftDataset { source: TargetSource::Gold, items }
    }

    /// One-hot gold targets for the given positions; positions without gold are skipped.
    pub fn from_gold(corpus: &Corpus, positions: &[usize]) -> Self {
        Self::from_labels(
            positions
                .iter()
                .filter_map(|&i| corpus.instance(i).gold_label.map(|l| (i, l))),
            corpus.num_classes(),
        )
    }

    /// Teacher soft labels, minus the positions for which `exclude` is true.
    pub fn from_teacher(output: &TeacherOutput, exclude: impl Fn(usize) -> bool) -> Self {
        let items = output
            .soft_labels
            .iter()
            .filter(|(idx, _)| !exclude(**idx))
            .map(|(&idx, q)| (idx, q.clone()))
            .collect();
        SoftDataset { source: TargetSource::Teacher, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub validation_f1: Option<f64>,
    /// Training objective after each epoch (index 0 is the initial model).
    pub loss_history: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    num_classes: usize,
    dim: usize,
    /// Row-major `num_classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub meta: TrainingMeta,
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl StudentModel {
    pub fn zeros(num_classes: usize, dim: usize, lambda: f64) -> Self {
        StudentModel {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
            lambda,
            meta: TrainingMeta::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        Label::from_index(argmax(&self.logits(x)))
    }

    /// Softmax outputs for the given corpus positions.
    pub fn predict_proba(&self, corpus: &Corpus, positions: &[usize]) -> Result<SoftDataset> {
        if corpus.embedding_dim() != self.dim {
            return Err(Error::DimensionMismatch {
                id: "<student model>".into(),
                expected: self.dim,
                found: corpus.embedding_dim(),
            });
        }
        let items = positions
            .iter()
            .map(|&i| (i, self.probabilities(&corpus.instance(i).embedding)))
            .collect();
        Ok(SoftDataset { source: TargetSource::Student, items })
    }

    /// Macro-F1 of hard predictions on positions with gold labels.
    pub fn macro_f1_on(&self, corpus: &Corpus, positions: &[usize]) -> Option<f64> {
        let (pred, gold): (Vec<Label>, Vec<Label>) = positions
            .iter()
            .filter_map(|&i| {
                let inst = corpus.instance(i);
                inst.gold_label.map(|g| (self.predict(&inst.embedding), g))
            })
            .unzip();
        if gold.is_empty() {
            return None;
        }
        macro_f1(&pred, &gold, self.num_classes).ok()
    }

    /// Text layout:
    ///
    /// ```text
    /// student v1
    /// classes <K>
    /// dim <d>
    /// lambda <f64>
    /// seed <u64>
    /// weights
    /// <K lines of d space-separated values>
    /// bias
    /// <K space-separated values>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "student v1");
        let _ = writeln!(out, "classes {}", self.num_classes);
        let _ = writeln!(out, "dim {}", self.dim);
        let _ = writeln!(out, "lambda {:?}", self.lambda);
        let _ = writeln!(out, "seed {}", self.meta.seed);
        let _ = writeln!(out, "weights");
        for k in 0..self.num_classes {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            let _ = writeln!(out, "{}", join_floats(row));
        }
        let _ = writeln!(out, "bias");
        let _ = writeln!(out, "{}", join_floats(&self.bias));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(&format!("missing {what}")));
        if next("header")? != "student v1" {
            return Err(bad("unknown header"));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}")))
        };
        let num_classes: usize = field(next("classes")?, "classes")?.parse().map_err(|_| bad("classes"))?;
        let dim: usize = field(next("dim")?, "dim")?.parse().map_err(|_| bad("dim"))?;
        let lambda: f64 = field(next("lambda")?, "lambda")?.parse().map_err(|_| bad("lambda"))?;
        let seed: u64 = field(next("seed")?, "seed")?.parse().map_err(|_| bad("seed"))?;
        if next("weights")? != "weights" {
            return Err(bad("expected weights"));
        }
        let mut weights = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            let row = parse_floats(next("weight row")?)?;
            if row.len() != dim {
                return Err(bad("weight row length"));
            }
            weights.extend(row);
        }
        if next("bias")? != "bias" {
            return Err(bad("expected bias"));
        }
        let bias = parse_floats(next("bias values")?)?;
        if bias.len() != num_classes {
            return Err(bad("bias length"));
        }
        Ok(StudentModel {
            num_classes,
            dim,
            weights,
            bias,
            lambda,
            meta: TrainingMeta { seed, ..Default::default() },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::ModelFormat(format!("bad number {t:?}"))))
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adds `weight * CE(target, p(x))` to the loss and its gradient to `grad`.
fn accumulate(model: &StudentModel, x: &[f64], target: &[f64], weight: f64, grad: &mut Gradient) -> f64 {
    let logits = model.logits(x);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let target_mass: f64 = target.iter().sum();
    for k in 0..model.num_classes {
        let log_p = logits[k] - log_z;
        if target[k] > 0.0 {
            loss -= target[k] * log_p;
        }
        let delta = weight * (target_mass * log_p.exp() - target[k]);
        grad.bias[k] += delta;
        let row = &mut grad.weights[k * model.dim..(k + 1) * model.dim];
        for (g, v) in row.iter_mut().zip(x) {
            *g += delta * v;
        }
    }
    weight * loss
}

fn zero_gradient(model: &StudentModel) -> Gradient {
    Gradient {
        weights: vec![0.0; model.weights.len()],
        bias: vec![0.0; model.bias.len()],
    }
}

fn batch_objective(
    model: &StudentModel,
    corpus: &Corpus,
    labeled: &[&(usize, Vec<f64>)],
    weak: &[&(usize, Vec<f64>)],
    lambda: f64,
) -> (f64, Gradient) {
    let mut grad = zero_gradient(model);
    let mut loss = 0.0;
    if !labeled.is_empty() {
        let w = 1.0 / labeled.len() as f64;
        for (idx, t) in labeled {
            loss += accumulate(model, &corpus.instance(*idx).embedding, t, w, &mut grad);
        }
    }
    if !weak.is_empty() && lambda != 0.0 {
        let w = lambda / weak.len() as f64;
        for (idx, t) in weak {
            loss += accumulate(model, &corpus.instance(*idx).embedding, t, w, &mut grad);
        }
    }
    (loss, grad)
}

/// Full objective and its exact gradient.
pub fn loss_and_gradient(
    model: &StudentModel,
    corpus: &Corpus,
    labeled: &SoftDataset,
    weak: &SoftDataset,
) -> (f64, Gradient) {
    let l: Vec<_> = labeled.items.iter().collect();
    let w: Vec<_> = weak.items.iter().collect();
    batch_objective(model, corpus, &l, &w, model.lambda)
}

/// `batch` consecutive items of `order`, starting at `start` and wrapping.
fn window<'a>(items: &'a [(usize, Vec<f64>)], order: &[usize], start: usize, batch: usize) -> Vec<&'a (usize, Vec<f64>)> {
    if order.is_empty() {
        return Vec::new();
    }
    let take = batch.min(order.len());
    (0..take).map(|t| &items[order[(start + t) % order.len()]]).collect()
}

/// Mini-batch gradient descent, each step pairing a labeled batch with a weak
/// batch; one epoch is a pass over the larger of the two sets. With early
/// stopping the best validation macro-F1 snapshot (epoch 0 included) is returned.
pub fn train(corpus: &Corpus, labeled: &SoftDataset, weak: &SoftDataset, hyper: &StudentHyper) -> Result<StudentModel> {
    hyper.validate()?;
    if labeled.is_empty() {
        return Err(Error::Training("labeled set is empty".into()));
    }
    let validation = corpus.split(Split::Validation);
    if hyper.early_stop_patience.is_some() && validation.is_empty() {
        return Err(Error::Training("early stopping needs a validation split".into()));
    }
    let empty = SoftDataset::empty(TargetSource::Teacher);
    let weak = if hyper.lambda == 0.0 { &empty } else { weak };

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = StudentModel::zeros(corpus.num_classes(), corpus.embedding_dim(), hyper.lambda);
    let mut labeled_order: Vec<usize> = (0..labeled.len()).collect();
    let mut weak_order: Vec<usize> = (0..weak.len()).collect();
    let steps = labeled.len().max(weak.len()).div_ceil(hyper.batch_size);

    let mut history = vec![loss_and_gradient(&model, corpus, labeled, weak).0];
    let mut best: Option<(f64, usize, StudentModel)> = hyper
        .early_stop_patience
        .map(|_| (model.macro_f1_on(corpus, validation).unwrap_or(0.0), 0, model.clone()));
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=hyper.epochs {
        labeled_order.shuffle(&mut rng);
        weak_order.shuffle(&mut rng);
        for step in 0..steps {
            let start = step * hyper.batch_size;
            let lb = window(&labeled.items, &labeled_order, start, hyper.batch_size);
            let wb = window(&weak.items, &weak_order, start, hyper.batch_size);
            let (_, grad) = batch_objective(&model, corpus, &lb, &wb, hyper.lambda);
            for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
                *w -= hyper.learning_rate * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b -= hyper.learning_rate * g;
            }
        }
        epochs_run = epoch;
        history.push(loss_and_gradient(&model, corpus, labeled, weak).0);

        if let (Some(patience), Some((best_f1, best_epoch, snapshot))) = (hyper.early_stop_patience, best.as_mut()) {
            let f1 = model.macro_f1_on(corpus, validation).unwrap_or(0.0);
            if f1 > *best_f1 {
                *best_f1 = f1;
                *best_epoch = epoch;
                *snapshot = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }

    let (mut result, best_epoch, validation_f1) = match best {
        Some((f1, epoch, snapshot)) => (snapshot, epoch, Some(f1)),
        None => {
            let f1 = model.macro_f1_on(corpus, validation);
            (model, epochs_run, f1)
        }
    };
    result.meta = TrainingMeta {
        epochs_run,
        best_epoch,
        final_train_loss: history[best_epoch.min(history.len() - 1)],
        validation_f1,
        loss_history: history,
        seed: hyper.seed,
    };
    Ok(result)
}
