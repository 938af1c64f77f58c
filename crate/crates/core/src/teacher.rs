//! Label models that turn rule votes into soft labels over covered instances.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::LabelMatrix;

/// Soft labels for the instances with at least one vote, keyed by corpus position.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub soft_labels: BTreeMap<usize, Vec<f64>>,
    pub model: TeacherModel,
}

impl TeacherOutput {
    pub fn empty(model: TeacherModel) -> Self {
        TeacherOutput {
            soft_labels: BTreeMap::new(),
            model,
        }
    }

    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        self.soft_labels.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.soft_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft_labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherModel {
    MajorityVote,
    DawidSkene(DawidSkeneModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DawidSkeneModel {
    /// `confusions[rule][true_class][emitted_class]`, rows summing to 1.
    pub confusions: Vec<Vec<Vec<f64>>>,
    pub prior: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub trait Teacher: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, matrix: &LabelMatrix, num_classes: usize) -> TeacherOutput;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    MajorityVote,
    DawidSkene,
}

impl TeacherKind {
    pub fn build(self) -> Box<dyn Teacher> {
        match self {
            TeacherKind::MajorityVote => Box::new(MajorityVote),
            TeacherKind::DawidSkene => Box::new(DawidSkene::default()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::MajorityVote => "majority_vote",
            TeacherKind::DawidSkene => "dawid_skene",
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority_vote" | "mv" => Ok(TeacherKind::MajorityVote),
            "dawid_skene" | "ds" => Ok(TeacherKind::DawidSkene),
            other => Err(Error::InvalidParameter(format!("unknown teacher {other:?}"))),
        }
    }
}

/// Unweighted vote shares.
#[derive(Debug, Clone, Copy, Default)]
pub struct MajorityVote;

impl Teacher for MajorityVote {
    fn name(&self) -> &'static str {
        "majority_vote"
    }

    fn fit(&self, matrix: &LabelMatrix, num_classes: usize) -> TeacherOutput {
        majority_vote(matrix, num_classes)
    }
}

pub fn majority_vote(matrix: &LabelMatrix, num_classes: usize) -> TeacherOutput {
    let mut out = TeacherOutput::empty(TeacherModel::MajorityVote);
    for (pos, &idx) in matrix.instances().iter().enumerate() {
        if let Some(q) = vote_shares(matrix, pos, num_classes) {
            out.soft_labels.insert(idx, q);
        }
    }
    out
}

fn vote_shares(matrix: &LabelMatrix, pos: usize, num_classes: usize) -> Option<Vec<f64>> {
    let votes = matrix.votes(pos);
    if votes.is_empty() {
        return None;
    }
    let mut counts = vec![0.0; num_classes];
    for &(_, label) in votes {
        counts[label.index()] += 1.0;
    }
    let total = votes.len() as f64;
    Some(counts.into_iter().map(|c| c / total).collect())
}

/// Dawid-Skene EM: per-rule confusion matrices and a class prior, with
/// abstains treated as missing observations.
#[derive(Debug, Clone, Copy)]
pub struct DawidSkene {
    pub max_iter: usize,
    pub tol: f64,
    pub smoothing: f64,
}

impl Default for DawidSkene {
    fn default() -> Self {
        DawidSkene {
            max_iter: 100,
            tol: 1e-6,
            smoothing: 0.01,
        }
    }
}

impl Teacher for DawidSkene {
    fn name(&self) -> &'static str {
        "dawid_skene"
    }

    fn fit(&self, matrix: &LabelMatrix, num_classes: usize) -> TeacherOutput {
        dawid_skene(matrix, num_classes, self.max_iter, self.tol, self.smoothing)
            .expect("default parameters are valid")
    }
}

/// Initial posteriors of the EM: majority-vote shares on covered instances,
/// as `(matrix position, posterior)` pairs.
pub fn dawid_skene_init(matrix: &LabelMatrix, num_classes: usize) -> Vec<(usize, Vec<f64>)> {
    (0..matrix.instances().len())
        .filter_map(|pos| vote_shares(matrix, pos, num_classes).map(|q| (pos, q)))
        .collect()
}

pub fn dawid_skene(
    matrix: &LabelMatrix,
    num_classes: usize,
    max_iter: usize,
    tol: f64,
    smoothing: f64,
) -> Result<TeacherOutput> {
    if max_iter < 1 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    if smoothing.is_nan() || smoothing < 0.0 {
        return Err(Error::InvalidParameter("smoothing must be non-negative".into()));
    }
    let k = num_classes;
    let init = dawid_skene_init(matrix, k);
    let positions: Vec<usize> = init.iter().map(|(p, _)| *p).collect();
    let mut posterior: Vec<Vec<f64>> = init.into_iter().map(|(_, q)| q).collect();
    let n_rules = matrix.num_rules();
    if positions.is_empty() {
        return Ok(TeacherOutput::empty(TeacherModel::DawidSkene(DawidSkeneModel {
            confusions: vec![vec![vec![1.0 / k as f64; k]; k]; n_rules],
            prior: vec![1.0 / k as f64; k],
            iterations: 0,
            converged: true,
        })));
    }

    let mut confusions = vec![vec![vec![0.0; k]; k]; n_rules];
    let mut prior = vec![0.0; k];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;

        // M-step
        prior.iter_mut().for_each(|p| *p = 0.0);
        for q in &posterior {
            for (p, &v) in prior.iter_mut().zip(q) {
                *p += v;
            }
        }
        let n = positions.len() as f64;
        prior.iter_mut().for_each(|p| *p /= n);

        for rule in confusions.iter_mut() {
            for row in rule.iter_mut() {
                row.iter_mut().for_each(|c| *c = smoothing);
            }
        }
        for (q, &pos) in posterior.iter().zip(&positions) {
            for &(rule, label) in matrix.votes(pos) {
                let conf = &mut confusions[rule as usize];
                for (true_class, &w) in q.iter().enumerate() {
                    conf[true_class][label.index()] += w;
                }
            }
        }
        for rule in confusions.iter_mut() {
            for row in rule.iter_mut() {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|c| *c /= total);
                } else {
                    row.iter_mut().for_each(|c| *c = 1.0 / k as f64);
                }
            }
        }

        // E-step
        let mut delta = 0.0f64;
        let mut log_p = vec![0.0; k];
        for (q, &pos) in posterior.iter_mut().zip(&positions) {
            for (c, lp) in log_p.iter_mut().enumerate() {
                *lp = prior[c].ln();
                for &(rule, label) in matrix.votes(pos) {
                    *lp += confusions[rule as usize][c][label.index()].ln();
                }
            }
            let fresh = normalize_log(&log_p);
            for (old, new) in q.iter_mut().zip(fresh) {
                delta = delta.max((*old - new).abs());
                *old = new;
            }
        }
        if delta < tol {
            converged = true;
            break;
        }
    }

    let soft_labels = positions
        .iter()
        .map(|&pos| matrix.instances()[pos])
        .zip(posterior)
        .collect();
    Ok(TeacherOutput {
        soft_labels,
        model: TeacherModel::DawidSkene(DawidSkeneModel {
            confusions,
            prior,
            iterations,
            converged,
        }),
    })
}

/// Softmax of log-weights; all-impossible rows fall back to uniform.
fn normalize_log(log_p: &[f64]) -> Vec<f64> {
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / log_p.len() as f64; log_p.len()];
    }
    let exps: Vec<f64> = log_p.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
