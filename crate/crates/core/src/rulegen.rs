//! Anchored Apriori search for candidate rules, and top-beta selection for querying.
//!
//! Candidates are conjunctions of atoms present in one freshly labeled
//! anchor instance, all predicting the anchor's label. The search is
//! level-wise: size-1 predicates first, then joins of surviving predicates.
//! Only unlabeled coverage prunes the frontier, since it is anti-monotone
//! in the predicate; labeled precision is checked on each emitted rule.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureAtom, Label};
use crate::error::{Error, Result};
use crate::features::{intersect_sorted, AtomId, FeatureIndex};
use crate::rules::{stats_for_covered, Rule, RuleKey, RuleSource, RuleStats, RuleStatus};

pub const DEFAULT_MAX_LEVEL_WIDTH: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleGenParams {
    /// Minimum number of covered unlabeled instances (anchor included).
    pub t_cov: usize,
    /// Minimum precision on the labeled set, when it is defined.
    pub t_prec: f64,
    /// Maximum conjunction length.
    pub t_len: usize,
    /// Maximum number of rules queried per anchor.
    pub beta: usize,
    pub max_level_width: usize,
}

impl Default for RuleGenParams {
    fn default() -> Self {
        RuleGenParams {
            t_cov: 100,
            t_prec: 0.75,
            t_len: 3,
            beta: 1,
            max_level_width: DEFAULT_MAX_LEVEL_WIDTH,
        }
    }
}

impl RuleGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.t_cov < 1 {
            return Err(Error::InvalidParameter("t_cov must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_prec) {
            return Err(Error::InvalidParameter(format!("t_prec must lie in [0, 1], got {}", self.t_prec)));
        }
        if self.t_len < 1 {
            return Err(Error::InvalidParameter("t_len must be at least 1".into()));
        }
        if self.max_level_width < 1 {
            return Err(Error::InvalidParameter("max_level_width must be at least 1".into()));
        }
        Ok(())
    }
}

/// A mined rule together with the statistics that admitted it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub rule: Rule,
    pub stats: RuleStats,
}

/// Read-only inputs for mining: the corpus, its index, and the currently
/// known labels (one optional label per corpus position).
#[derive(Clone, Copy)]
pub struct MiningContext<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a FeatureIndex,
    pub known: &'a [Option<Label>],
}

struct Itemset {
    atoms: Vec<AtomId>,
    covered: Vec<u32>,
}

/// All rules over the anchor's atoms that satisfy the coverage, precision and
/// length constraints, minus those in `existing`. Sorted by unlabeled coverage
/// (descending), then predicate.
pub fn extract_candidates(
    anchor: usize,
    anchor_label: Label,
    ctx: MiningContext<'_>,
    params: &RuleGenParams,
    existing: &HashSet<RuleKey>,
) -> Vec<Candidate> {
    let index = ctx.index;
    let mut level: Vec<Itemset> = index
        .instance_atoms(anchor)
        .iter()
        .filter(|&&a| index.unlabeled_coverage(a) >= params.t_cov)
        .map(|&a| Itemset {
            atoms: vec![a],
            covered: index.postings(a).to_vec(),
        })
        .collect();
    cap_level(&mut level, params.max_level_width, 1);

    let mut out = Vec::new();
    let mut size = 1;
    loop {
        for set in &level {
            if let Some(candidate) = admit(set, anchor_label, ctx, params, existing) {
                out.push(candidate);
            }
        }
        if size >= params.t_len || level.len() < 2 {
            break;
        }
        level = next_level(&level, index, params.t_cov);
        size += 1;
        cap_level(&mut level, params.max_level_width, size);
        if level.is_empty() {
            break;
        }
    }
    out.sort_by(|a, b| {
        b.stats
            .coverage_unlabeled
            .cmp(&a.stats.coverage_unlabeled)
            .then_with(|| a.rule.predicate().cmp(b.rule.predicate()))
    });
    out
}

fn cap_level(level: &mut Vec<Itemset>, cap: usize, size: usize) {
    if level.len() > cap {
        log::warn!(
            "candidate search: {} predicates of size {size} survive, truncating to {cap}",
            level.len()
        );
        level.truncate(cap);
    }
}

fn admit(
    set: &Itemset,
    label: Label,
    ctx: MiningContext<'_>,
    params: &RuleGenParams,
    existing: &HashSet<RuleKey>,
) -> Option<Candidate> {
    let stats = stats_for_covered(&set.covered, label, ctx.corpus, ctx.index, ctx.known, false);
    if let Some(p) = stats.precision_labeled {
        if p < params.t_prec {
            return None;
        }
    }
    let atoms: Vec<FeatureAtom> = set.atoms.iter().map(|&a| ctx.index.atom(a).clone()).collect();
    let rule = Rule::new(atoms, label, RuleSource::Mined, RuleStatus::Candidate).ok()?;
    if existing.contains(&rule.key()) {
        return None;
    }
    Some(Candidate { rule, stats })
}

/// Apriori join: extend each predicate with a later atom from a sibling that
/// shares its prefix, keeping only joins whose every sub-predicate survived.
fn next_level(level: &[Itemset], index: &FeatureIndex, t_cov: usize) -> Vec<Itemset> {
    let survivors: HashSet<&[AtomId]> = level.iter().map(|s| s.atoms.as_slice()).collect();
    let mut next = Vec::new();
    let k = level[0].atoms.len();
    for (i, left) in level.iter().enumerate() {
        for right in &level[i + 1..] {
            // Levels are sorted, so siblings sharing a prefix are contiguous.
            if left.atoms[..k - 1] != right.atoms[..k - 1] {
                break;
            }
            let (a, b) = (left.atoms[k - 1], right.atoms[k - 1]);
            let mut atoms = left.atoms.clone();
            let (small, large) = if a < b { (a, b) } else { (b, a) };
            atoms[k - 1] = small;
            atoms.push(large);
            let all_subsets_survive = (0..atoms.len()).all(|skip| {
                let sub: Vec<AtomId> = atoms
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != skip)
                    .map(|(_, &x)| x)
                    .collect();
                survivors.contains(sub.as_slice())
            });
            if !all_subsets_survive {
                continue;
            }
            let covered = intersect_sorted(&left.covered, index.postings(right.atoms[k - 1]));
            let coverage_unlabeled = covered
                .iter()
                .filter(|&&i| index.split_of(i as usize) == crate::corpus::Split::Unlabeled)
                .count();
            if coverage_unlabeled >= t_cov {
                next.push(Itemset { atoms, covered });
            }
        }
    }
    next.sort_by(|x, y| x.atoms.cmp(&y.atoms));
    next
}

/// Ranking used for querying: higher labeled precision first (undefined
/// precision last), then higher unlabeled coverage, then predicate order.
pub fn query_order(a: &Candidate, b: &Candidate) -> Ordering {
    let prec = match (a.stats.precision_labeled, b.stats.precision_labeled) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    prec.then_with(|| b.stats.coverage_unlabeled.cmp(&a.stats.coverage_unlabeled))
        .then_with(|| a.rule.predicate().cmp(b.rule.predicate()))
}

/// The top `beta` candidates predicting `anchor_label`, by [`query_order`].
pub fn select_for_query(candidates: &[Candidate], anchor_label: Label, beta: usize) -> Vec<Candidate> {
    let mut agreeing: Vec<&Candidate> = candidates.iter().filter(|c| c.rule.label == anchor_label).collect();
    agreeing.sort_by(|a, b| query_order(a, b));
    let mut seen = BTreeSet::new();
    agreeing
        .into_iter()
        .filter(|c| seen.insert(c.rule.key()))
        .take(beta)
        .cloned()
        .collect()
}
