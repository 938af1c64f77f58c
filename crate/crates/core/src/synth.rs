//! Planted-rule corpus generator for benchmarks and tests.
//!
//! Embeddings come from class-conditional Gaussians. Each planted atom `p{j}`
//! is tied to one class with a target precision and coverage; noise atoms
//! `n{j}` are independent of the class. Instance text is the space-joined
//! atom values, so unigram extraction reproduces the feature sets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureAtom, Instance, Label, Split, TemplateSet};
use crate::error::{Error, Result};
use crate::rules::{Rule, RuleSource, RuleStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_unlabeled: usize,
    pub labeled_per_class: usize,
    pub validation_per_class: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin, in noise standard deviations.
    pub separation: f64,
    pub n_planted: usize,
    pub coverage_range: (f64, f64),
    pub precision_range: (f64, f64),
    pub n_noise: usize,
    pub noise_coverage_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            n_unlabeled: 2000,
            labeled_per_class: 20,
            validation_per_class: 20,
            n_test: 500,
            dim: 100,
            separation: 1.5,
            n_planted: 30,
            coverage_range: (0.03, 0.12),
            precision_range: (0.6, 0.98),
            n_noise: 20,
            noise_coverage_range: (0.05, 0.3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAtom {
    pub atom: FeatureAtom,
    pub label: Label,
    /// Expected fraction of all instances carrying the atom.
    pub coverage: f64,
    /// Expected fraction of carriers belonging to `label`.
    pub precision: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub planted: Vec<PlantedAtom>,
}

impl SynthCorpus {
    /// One single-atom rule per planted atom, predicting its class.
    pub fn planted_rules(&self) -> Vec<Rule> {
        self.planted
            .iter()
            .map(|p| {
                Rule::new([p.atom.clone()], p.label, RuleSource::Expert, RuleStatus::Accepted)
                    .expect("planted atoms form valid rules")
            })
            .collect()
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    let k = config.num_classes;
    if k < 2 || config.dim == 0 || config.n_unlabeled == 0 || config.labeled_per_class == 0 {
        return Err(Error::InvalidParameter("synthetic corpus needs K >= 2, dim >= 1 and non-empty splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..config.dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * config.separation).collect()
        })
        .collect();

    let planted: Vec<PlantedAtom> = (0..config.n_planted)
        .map(|j| {
            let coverage = rng.random_range(config.coverage_range.0..=config.coverage_range.1);
            let precision = rng.random_range(config.precision_range.0..=config.precision_range.1);
            PlantedAtom {
                atom: FeatureAtom::ngram(format!("p{j}")),
                label: Label::from_index(j % k),
                coverage,
                precision,
            }
        })
        .collect();
    let noise: Vec<f64> = (0..config.n_noise)
        .map(|_| rng.random_range(config.noise_coverage_range.0..=config.noise_coverage_range.1))
        .collect();

    let mut plan: Vec<(Split, usize)> = Vec::new();
    for y in 0..k {
        plan.extend(std::iter::repeat_n((Split::Labeled, y), config.labeled_per_class));
        plan.extend(std::iter::repeat_n((Split::Validation, y), config.validation_per_class));
    }
    for i in 0..config.n_unlabeled {
        plan.push((Split::Unlabeled, i % k));
    }
    for i in 0..config.n_test {
        plan.push((Split::Test, i % k));
    }
    plan.shuffle(&mut rng);

    let mut counters = [0usize; 4];
    let instances = plan
        .into_iter()
        .map(|(split, y)| {
            let embedding: Vec<f64> = means[y].iter().map(|m| m + unit.sample(&mut rng)).collect();
            let mut features = BTreeSet::new();
            for p in &planted {
                // P(atom | class) so that overall coverage and precision hit their targets.
                let rate = if p.label.index() == y {
                    p.precision * p.coverage * k as f64
                } else {
                    (1.0 - p.precision) * p.coverage * k as f64 / (k - 1) as f64
                };
                if rng.random_bool(rate.clamp(0.0, 1.0)) {
                    features.insert(p.atom.clone());
                }
            }
            for (j, &c) in noise.iter().enumerate() {
                if rng.random_bool(c) {
                    features.insert(FeatureAtom::ngram(format!("n{j}")));
                }
            }
            let slot = Split::ALL.iter().position(|s| *s == split).expect("known split");
            counters[slot] += 1;
            Instance {
                id: format!("{}-{:05}", split.as_str(), counters[slot]),
                text: features.iter().map(|a| a.value.as_str()).collect::<Vec<_>>().join(" "),
                embedding,
                gold_label: Some(Label::from_index(y)),
                split,
                features,
            }
        })
        .collect();
    let corpus = Corpus::new(instances, k, TemplateSet::default())?;
    Ok(SynthCorpus { corpus, planted })
}
