//! N-gram extraction and the inverted index from atoms to instances.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::corpus::{Corpus, FeatureAtom, Split};

pub type AtomId = u32;

const CLITICS: [&str; 6] = ["'s", "'re", "'ll", "'ve", "'m", "'d"];

/// Lowercases `text` and splits it on whitespace, with punctuation split off
/// into single-character tokens and English clitics separated
/// (`won't` -> `wo`, `n't`; `it's` -> `it`, `'s`).
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_alphanumeric() {
                // A word run: alphanumerics, plus apostrophes sitting between two of them.
                let start = i;
                while i < chars.len()
                    && (chars[i].is_alphanumeric()
                        || (chars[i] == '\''
                            && i + 1 < chars.len()
                            && chars[i + 1].is_alphanumeric()
                            && i > start))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                split_clitics(&word, &mut tokens);
            } else {
                tokens.push(chars[i].to_string());
                i += 1;
            }
        }
    }
    tokens
}

fn split_clitics(word: &str, out: &mut Vec<String>) {
    if let Some(stem) = word.strip_suffix("n't") {
        if !stem.is_empty() && !stem.contains('\'') {
            out.push(stem.to_string());
            out.push("n't".to_string());
            return;
        }
    }
    for clitic in CLITICS {
        if let Some(stem) = word.strip_suffix(clitic) {
            if !stem.is_empty() && !stem.contains('\'') {
                out.push(stem.to_string());
                out.push(clitic.to_string());
                return;
            }
        }
    }
    // Leftover apostrophes become punctuation tokens.
    let mut current = String::new();
    for c in word.chars() {
        if c == '\'' {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push("'".to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
}

/// All contiguous token n-grams of order `1..=n_max`, as `NGRAM` atoms.
pub fn extract_ngrams(text: &str, n_max: usize) -> BTreeSet<FeatureAtom> {
    let tokens = tokenize(text);
    let mut out = BTreeSet::new();
    for n in 1..=n_max.max(1) {
        for window in tokens.windows(n) {
            out.insert(FeatureAtom::ngram(window.join(" ")));
        }
    }
    out
}

/// Inverted index over a corpus' feature sets.
///
/// Atom ids follow the sorted order of the atoms themselves, so comparing
/// sorted id lists is the same as comparing atom lists lexicographically.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    vocabulary: Vec<FeatureAtom>,
    ids: HashMap<FeatureAtom, AtomId>,
    postings: Vec<Vec<u32>>,
    labeled_counts: Vec<u32>,
    unlabeled_counts: Vec<u32>,
    instance_atoms: Vec<Vec<AtomId>>,
    splits: Vec<Split>,
}

impl FeatureIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let vocab_set: BTreeSet<&FeatureAtom> = corpus
            .instances()
            .iter()
            .flat_map(|inst| inst.features.iter())
            .collect();
        let vocabulary: Vec<FeatureAtom> = vocab_set.into_iter().cloned().collect();
        let ids: HashMap<FeatureAtom, AtomId> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i as AtomId))
            .collect();
        let mut postings = vec![Vec::new(); vocabulary.len()];
        let mut labeled_counts = vec![0u32; vocabulary.len()];
        let mut unlabeled_counts = vec![0u32; vocabulary.len()];
        let mut instance_atoms = Vec::with_capacity(corpus.len());
        let mut splits = Vec::with_capacity(corpus.len());
        for (idx, inst) in corpus.instances().iter().enumerate() {
            // BTreeSet iteration is sorted, so these id lists are sorted too.
            let atoms: Vec<AtomId> = inst.features.iter().map(|a| ids[a]).collect();
            for &a in &atoms {
                postings[a as usize].push(idx as u32);
                match inst.split {
                    Split::Labeled => labeled_counts[a as usize] += 1,
                    Split::Unlabeled => unlabeled_counts[a as usize] += 1,
                    _ => {}
                }
            }
            instance_atoms.push(atoms);
            splits.push(inst.split);
        }
        FeatureIndex {
            vocabulary,
            ids,
            postings,
            labeled_counts,
            unlabeled_counts,
            instance_atoms,
            splits,
        }
    }

    pub fn vocabulary(&self) -> &[FeatureAtom] {
        &self.vocabulary
    }

    pub fn atom_id(&self, atom: &FeatureAtom) -> Option<AtomId> {
        self.ids.get(atom).copied()
    }

    pub fn atom(&self, id: AtomId) -> &FeatureAtom {
        &self.vocabulary[id as usize]
    }

    /// Sorted instance positions containing the atom.
    pub fn postings(&self, id: AtomId) -> &[u32] {
        &self.postings[id as usize]
    }

    pub fn frequency(&self, id: AtomId) -> usize {
        self.postings[id as usize].len()
    }

    pub fn unlabeled_coverage(&self, id: AtomId) -> usize {
        self.unlabeled_counts[id as usize] as usize
    }

    pub fn labeled_coverage(&self, id: AtomId) -> usize {
        self.labeled_counts[id as usize] as usize
    }

    /// Sorted atom ids of one instance.
    pub fn instance_atoms(&self, idx: usize) -> &[AtomId] {
        &self.instance_atoms[idx]
    }

    pub fn split_of(&self, idx: usize) -> Split {
        self.splits[idx]
    }

    pub fn num_instances(&self) -> usize {
        self.instance_atoms.len()
    }

    /// Instances containing every atom of `atoms`. An atom unknown to the
    /// index matches nothing; an empty conjunction matches everything.
    pub fn covered(&self, atoms: &[FeatureAtom]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(atoms.len());
        for atom in atoms {
            match self.atom_id(atom) {
                Some(id) => ids.push(id),
                None => return Vec::new(),
            }
        }
        self.covered_ids(&ids)
    }

    pub fn covered_ids(&self, ids: &[AtomId]) -> Vec<u32> {
        let Some((&first, rest)) = ids.split_first() else {
            return (0..self.num_instances() as u32).collect();
        };
        let mut acc = self.postings(first).to_vec();
        for &id in rest {
            acc = intersect_sorted(&acc, self.postings(id));
            if acc.is_empty() {
                break;
            }
        }
        acc
    }

    /// Diagnostic dump: one `{"kind","value","frequency","unlabeled","labeled"}` record per atom.
    pub fn vocabulary_records(&self) -> String {
        let mut out = String::new();
        for (i, atom) in self.vocabulary.iter().enumerate() {
            let rec = serde_json::json!({
                "kind": atom.kind.as_str(),
                "value": atom.value,
                "frequency": self.postings[i].len(),
                "unlabeled": self.unlabeled_counts[i],
                "labeled": self.labeled_counts[i],
            });
            let _ = writeln!(out, "{rec}");
        }
        out
    }
}

/// Intersection of two sorted, duplicate-free lists.
pub fn intersect_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}
