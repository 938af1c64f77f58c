//! Labeling rules, their statistics, and the sparse rules-by-instances vote matrix.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_lines, AtomRecord, Corpus, FeatureAtom, Instance, Label, Split};
use crate::error::{Error, Result};
use crate::features::FeatureIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSource {
    Expert,
    Mined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleStatus {
    Candidate,
    Accepted,
    Rejected,
}

/// Dedup identity of a rule: its predicate and emitted label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleKey {
    pub predicate: Vec<FeatureAtom>,
    pub label: Label,
}

/// A conjunction of feature atoms that emits one class when every atom is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RuleRecord", try_from = "RuleRecord")]
pub struct Rule {
    pub id: String,
    predicate: Vec<FeatureAtom>,
    pub label: Label,
    pub source: RuleSource,
    pub status: RuleStatus,
}

impl Rule {
    /// Builds a rule with a content-derived id.
    pub fn new(
        predicate: impl IntoIterator<Item = FeatureAtom>,
        label: Label,
        source: RuleSource,
        status: RuleStatus,
    ) -> Result<Self> {
        let predicate: Vec<FeatureAtom> = predicate
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if predicate.is_empty() {
            return Err(Error::InvalidRule("predicate must not be empty".into()));
        }
        if label.0 == 0 {
            return Err(Error::InvalidRule("labels are 1-based".into()));
        }
        let id = content_id(&predicate, label);
        Ok(Rule {
            id,
            predicate,
            label,
            source,
            status,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Sorted, duplicate-free atoms of the conjunction.
    pub fn predicate(&self) -> &[FeatureAtom] {
        &self.predicate
    }

    pub fn key(&self) -> RuleKey {
        RuleKey {
            predicate: self.predicate.clone(),
            label: self.label,
        }
    }

    /// `NGRAM=http AND PMT=ASKS_FOR=donations`
    pub fn render_predicate(&self) -> String {
        self.predicate
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" AND ")
    }

    pub fn to_record_line(&self) -> String {
        serde_json::to_string(self).expect("rule record serializes")
    }
}

impl From<Rule> for RuleRecord {
    fn from(rule: Rule) -> Self {
        RuleRecord {
            id: rule.id,
            predicate: rule.predicate.iter().map(FeatureAtom::to_record).collect(),
            label: rule.label.0 as i64,
            source: rule.source,
            status: rule.status,
        }
    }
}

impl TryFrom<RuleRecord> for Rule {
    type Error = Error;

    fn try_from(record: RuleRecord) -> Result<Self> {
        if record.label < 1 || record.label > u32::MAX as i64 {
            return Err(Error::InvalidRule(format!("label {} is not a class index", record.label)));
        }
        let atoms = record
            .predicate
            .iter()
            .map(FeatureAtom::from_record)
            .collect::<Result<Vec<_>>>()?;
        Ok(Rule::new(atoms, Label(record.label as u32), record.source, record.status)?.with_id(record.id))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.render_predicate(), self.label)
    }
}

fn content_id(predicate: &[FeatureAtom], label: Label) -> String {
    let mut hasher = Sha256::new();
    for atom in predicate {
        hasher.update(atom.to_string().as_bytes());
        hasher.update([0u8]);
    }
    hasher.update(label.0.to_le_bytes());
    let digest = hasher.finalize();
    format!("r{}", hex::encode(&digest[..6]))
}

/// Returns the rule's label iff the instance carries every predicate atom.
pub fn evaluate(rule: &Rule, instance: &Instance) -> Option<Label> {
    rule.predicate
        .iter()
        .all(|atom| instance.features.contains(atom))
        .then_some(rule.label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleStats {
    pub coverage_unlabeled: usize,
    pub coverage_unlabeled_fraction: f64,
    pub coverage_labeled: usize,
    pub precision_labeled: Option<f64>,
    pub precision_unlabeled_oracle: Option<f64>,
}

/// Gold labels of the labeled split, indexed by corpus position.
pub fn labeled_view(corpus: &Corpus) -> Vec<Option<Label>> {
    let mut view = vec![None; corpus.len()];
    for &idx in corpus.split(Split::Labeled) {
        view[idx] = corpus.instance(idx).gold_label;
    }
    view
}

/// Coverage and precision of a rule against the corpus' labeled split.
pub fn compute_stats(rule: &Rule, corpus: &Corpus, index: &FeatureIndex, with_oracle: bool) -> RuleStats {
    let known = labeled_view(corpus);
    compute_stats_with(rule, corpus, index, &known, with_oracle)
}

/// Like [`compute_stats`], with labeled precision measured against `known`
/// (one optional label per corpus position) instead of the labeled split.
pub fn compute_stats_with(
    rule: &Rule,
    corpus: &Corpus,
    index: &FeatureIndex,
    known: &[Option<Label>],
    with_oracle: bool,
) -> RuleStats {
    let covered = index.covered(rule.predicate());
    stats_for_covered(&covered, rule.label, corpus, index, known, with_oracle)
}

pub(crate) fn stats_for_covered(
    covered: &[u32],
    label: Label,
    corpus: &Corpus,
    index: &FeatureIndex,
    known: &[Option<Label>],
    with_oracle: bool,
) -> RuleStats {
    let mut cov_u = 0usize;
    let mut cov_l = 0usize;
    let mut hit_l = 0usize;
    let mut gold_u = 0usize;
    let mut hit_u = 0usize;
    for &i in covered {
        let i = i as usize;
        if let Some(l) = known[i] {
            cov_l += 1;
            if l == label {
                hit_l += 1;
            }
        }
        if index.split_of(i) == Split::Unlabeled {
            cov_u += 1;
            if with_oracle {
                if let Some(g) = corpus.instance(i).gold_label {
                    gold_u += 1;
                    if g == label {
                        hit_u += 1;
                    }
                }
            }
        }
    }
    let n_u = corpus.split(Split::Unlabeled).len();
    RuleStats {
        coverage_unlabeled: cov_u,
        coverage_unlabeled_fraction: if n_u == 0 { 0.0 } else { cov_u as f64 / n_u as f64 },
        coverage_labeled: cov_l,
        precision_labeled: (cov_l > 0).then(|| hit_l as f64 / cov_l as f64),
        precision_unlabeled_oracle: (with_oracle && gold_u > 0).then(|| hit_u as f64 / gold_u as f64),
    }
}

/// Sparse rules x instances vote matrix; a missing entry is an abstain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelMatrix {
    rule_ids: Vec<String>,
    instances: Vec<usize>,
    rows: Vec<Vec<(u32, Label)>>,
}

impl LabelMatrix {
    /// Assembles a matrix from `(rule position, instance position, vote)` triples.
    /// Votes are kept per instance in rule order.
    pub fn from_votes(
        rule_ids: Vec<String>,
        instances: Vec<usize>,
        votes: impl IntoIterator<Item = (usize, usize, Label)>,
    ) -> Self {
        let mut rows = vec![Vec::new(); instances.len()];
        for (rule, inst, label) in votes {
            assert!(rule < rule_ids.len() && inst < instances.len(), "vote out of bounds");
            rows[inst].push((rule as u32, label));
        }
        for row in &mut rows {
            row.sort_by_key(|&(r, _)| r);
            row.dedup_by_key(|&mut (r, _)| r);
        }
        LabelMatrix {
            rule_ids,
            instances,
            rows,
        }
    }

    pub fn rule_ids(&self) -> &[String] {
        &self.rule_ids
    }

    pub fn num_rules(&self) -> usize {
        self.rule_ids.len()
    }

    /// Corpus positions of the matrix columns, in iteration order.
    pub fn instances(&self) -> &[usize] {
        &self.instances
    }

    /// Votes on the instance at matrix position `pos`, as `(rule position, label)`.
    pub fn votes(&self, pos: usize) -> &[(u32, Label)] {
        &self.rows[pos]
    }

    pub fn entry(&self, rule: usize, pos: usize) -> Option<Label> {
        self.rows[pos]
            .binary_search_by_key(&(rule as u32), |&(r, _)| r)
            .ok()
            .map(|i| self.rows[pos][i].1)
    }

    pub fn num_entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_entries() == 0
    }
}

/// Votes of `rules` on `instances` (corpus positions). Conflicts are kept.
pub fn build_label_matrix(rules: &[Rule], index: &FeatureIndex, instances: &[usize]) -> LabelMatrix {
    let mut position = vec![u32::MAX; index.num_instances()];
    for (pos, &idx) in instances.iter().enumerate() {
        position[idx] = pos as u32;
    }
    let mut votes = Vec::new();
    for (r, rule) in rules.iter().enumerate() {
        for idx in index.covered(rule.predicate()) {
            let pos = position[idx as usize];
            if pos != u32::MAX {
                votes.push((r, pos as usize, rule.label));
            }
        }
    }
    LabelMatrix::from_votes(
        rules.iter().map(|r| r.id.clone()).collect(),
        instances.to_vec(),
        votes,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleRecord {
    id: String,
    predicate: Vec<AtomRecord>,
    label: i64,
    source: RuleSource,
    status: RuleStatus,
}

/// Result of reading a rule file: representable rules plus the records that
/// fall outside the atom-conjunction family, with reasons.
#[derive(Debug, Clone, Default)]
pub struct RuleImport {
    pub rules: Vec<Rule>,
    pub unsupported: Vec<(usize, String)>,
}

/// Reads a line-delimited rule file. Malformed JSON is an error; records
/// using unknown atom kinds (regexes, lexicons, ...) are reported as unsupported.
pub fn read_rules(path: impl AsRef<Path>, num_classes: usize) -> Result<RuleImport> {
    let path = path.as_ref();
    let mut import = RuleImport::default();
    let mut seen = BTreeSet::new();
    for (line_no, line) in read_lines(path)? {
        let record: RuleRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if record.label < 1 || record.label as usize > num_classes {
            return Err(Error::InvalidRule(format!(
                "{}:{line_no}: label {} outside 1..={num_classes}",
                path.display(),
                record.label
            )));
        }
        let atoms: std::result::Result<Vec<FeatureAtom>, Error> =
            record.predicate.iter().map(FeatureAtom::from_record).collect();
        let atoms = match atoms {
            Ok(atoms) => atoms,
            Err(e) => {
                log::warn!("{}:{line_no}: skipping unsupported rule {}: {e}", path.display(), record.id);
                import.unsupported.push((line_no, e.to_string()));
                continue;
            }
        };
        let rule = Rule::new(atoms, Label(record.label as u32), record.source, record.status)
            .map_err(|e| Error::InvalidRule(format!("{}:{line_no}: {e}", path.display())))?
            .with_id(record.id);
        if seen.insert(rule.key()) {
            import.rules.push(rule);
        }
    }
    Ok(import)
}

pub fn rules_to_records(rules: &[Rule]) -> String {
    let mut out = String::new();
    for rule in rules {
        out.push_str(&rule.to_record_line());
        out.push('\n');
    }
    out
}

pub fn write_rules(path: impl AsRef<Path>, rules: &[Rule]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rules_to_records(rules)).map_err(|e| Error::io(path, e))
}
