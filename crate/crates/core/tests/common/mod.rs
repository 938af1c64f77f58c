#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teachloop::corpus::{Corpus, FeatureAtom, Instance, Label, Split, TemplateSet};
use teachloop::features::FeatureIndex;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn instance(id: String, split: Split, gold: Option<Label>, embedding: Vec<f64>, atoms: BTreeSet<FeatureAtom>) -> Instance {
    Instance {
        text: atoms.iter().map(|a| a.value.as_str()).collect::<Vec<_>>().join(" "),
        id,
        embedding,
        gold_label: gold,
        split,
        features: atoms,
    }
}

pub fn indexed(corpus: Corpus) -> (Arc<Corpus>, Arc<FeatureIndex>) {
    let index = FeatureIndex::build(&corpus);
    (Arc::new(corpus), Arc::new(index))
}

/// Small corpus for session tests. Atom `a{y}` marks class `y` with
/// probability 0.6, `b{j}` atoms are shared noise, and embeddings are
/// shifted per class.
pub fn session_corpus(seed: u64, k: usize, n_unlabeled: usize) -> (Arc<Corpus>, Arc<FeatureIndex>) {
    let mut rng = rng(seed);
    let mut instances = Vec::new();
    let mut add = |split: Split, i: usize, rng: &mut ChaCha8Rng| {
        let y = i % k;
        let mut atoms = BTreeSet::new();
        if rng.random_bool(0.6) {
            atoms.insert(FeatureAtom::ngram(format!("a{y}")));
        }
        for j in 0..4 {
            if rng.random_bool(0.3) {
                atoms.insert(FeatureAtom::ngram(format!("b{j}")));
            }
        }
        let embedding = (0..3)
            .map(|d| if d == y % 3 { 1.5 } else { 0.0 } + rng.random_range(-1.0..1.0))
            .collect();
        instances.push(instance(format!("{}-{i}", split.as_str()), split, Some(Label::from_index(y)), embedding, atoms));
    };
    for i in 0..2 * k {
        add(Split::Labeled, i, &mut rng);
    }
    for i in 0..n_unlabeled {
        add(Split::Unlabeled, i, &mut rng);
    }
    for i in 0..8 {
        add(Split::Validation, i, &mut rng);
        add(Split::Test, i, &mut rng);
    }
    indexed(Corpus::new(instances, k, TemplateSet::default()).unwrap())
}
