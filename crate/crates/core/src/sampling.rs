//! Instance selection: Ward-linkage hierarchy with entropy-driven cluster
//! sampling, plus uncertainty and random baselines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::student::SoftDataset;

/// Number of clusters the hierarchy is cut into for sampling.
pub const FRONTIER_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Hierarchical,
    Uncertainty,
    Random,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Hierarchical => "hierarchical",
            SamplerKind::Uncertainty => "uncertainty",
            SamplerKind::Random => "random",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(SamplerKind::Hierarchical),
            "uncertainty" => Ok(SamplerKind::Uncertainty),
            "random" => Ok(SamplerKind::Random),
            other => Err(Error::InvalidParameter(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Increase in within-cluster sum of squares caused by the merge.
    pub height: f64,
    pub size: usize,
}

/// Binary merge tree. Node ids `0..n` are leaves (positions in `leaves`);
/// the node created by merge `s` has id `n + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    leaves: Vec<usize>,
    merges: Vec<Merge>,
    leaf_of: HashMap<usize, usize>,
}

impl ClusterTree {
    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Corpus position of each leaf.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_of(&self, corpus_pos: usize) -> Option<usize> {
        self.leaf_of.get(&corpus_pos).copied()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        self.leaves.len() + self.merges.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.leaves.len() + self.merges.len()
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        node.checked_sub(self.leaves.len())
            .map(|s| (self.merges[s].left, self.merges[s].right))
    }

    pub fn height(&self, node: usize) -> f64 {
        node.checked_sub(self.leaves.len())
            .map_or(0.0, |s| self.merges[s].height)
    }

    pub fn size(&self, node: usize) -> usize {
        node.checked_sub(self.leaves.len())
            .map_or(1, |s| self.merges[s].size)
    }

    /// Leaf indices under `node`, ascending.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size(node));
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            match self.children(x) {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => out.push(x),
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` clusters present after `n - k` merges, ascending by node id.
    pub fn cut(&self, k: usize) -> Vec<usize> {
        let n = self.leaves.len();
        let k = k.clamp(1, n);
        let mut frontier = vec![self.root()];
        for s in (0..self.merges.len()).rev() {
            if frontier.len() >= k {
                break;
            }
            let node = n + s;
            let pos = frontier.iter().position(|&x| x == node).expect("merge node on frontier");
            frontier.swap_remove(pos);
            frontier.push(self.merges[s].left);
            frontier.push(self.merges[s].right);
        }
        frontier.sort_unstable();
        frontier
    }

    /// Parent array dump: one line `node parent height size` per node, root parent `-1`.
    pub fn to_parent_array(&self) -> String {
        let mut parent = vec![-1i64; self.num_nodes()];
        let n = self.leaves.len();
        for (s, m) in self.merges.iter().enumerate() {
            parent[m.left] = (n + s) as i64;
            parent[m.right] = (n + s) as i64;
        }
        let mut out = String::new();
        for (node, p) in parent.iter().enumerate() {
            let _ = writeln!(out, "{node}\t{p}\t{:?}\t{}", self.height(node), self.size(node));
        }
        out
    }
}

/// Condensed symmetric distance matrix over slots.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

fn pair_key(d: f64, a: usize, b: usize) -> (f64, usize, usize) {
    (d, a.min(b), a.max(b))
}

fn key_less(x: (f64, usize, usize), y: (f64, usize, usize)) -> bool {
    x.0 < y.0 || (x.0 == y.0 && (x.1, x.2) < (y.1, y.2))
}

/// Ward agglomerative clustering over `points` (corpus positions paired with
/// embeddings). Each step merges the pair minimizing `(increase, smaller id,
/// larger id)` lexicographically, using Lance-Williams distance updates and a
/// cached nearest neighbour per cluster.
pub fn build_hierarchy(points: &[(usize, &[f64])]) -> Result<ClusterTree> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewInstances(n));
    }
    // Squared Euclidean distances; Lance-Williams on these yields twice the Ward increment.
    let mut dist = Condensed { n, data: vec![0.0; n * (n - 1) / 2] };
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points[i].1.iter().zip(points[j].1).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.set(i, j, d);
        }
    }
    let mut active = vec![true; n];
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut nn: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];

    let best_for = |slot: usize, dist: &Condensed, active: &[bool], ids: &[usize]| -> (f64, usize) {
        let mut best: Option<((f64, usize, usize), usize)> = None;
        for other in 0..n {
            if other == slot || !active[other] {
                continue;
            }
            let key = pair_key(dist.get(slot, other), ids[slot], ids[other]);
            if best.is_none_or(|(b, _)| key_less(key, b)) {
                best = Some((key, other));
            }
        }
        best.map_or((f64::INFINITY, usize::MAX), |(k, o)| (k.0, o))
    };

    for slot in 0..n {
        nn[slot] = best_for(slot, &dist, &active, &ids);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<((f64, usize, usize), usize)> = None;
        for slot in 0..n {
            if !active[slot] {
                continue;
            }
            let (d, other) = nn[slot];
            let key = pair_key(d, ids[slot], ids[other]);
            if best.is_none_or(|(b, _)| key_less(key, b)) {
                best = Some((key, slot));
            }
        }
        let (key, a) = best.expect("at least two active clusters");
        let b = nn[a].1;
        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        let (na, nb) = (sizes[keep], sizes[drop]);
        let d_ab = key.0;
        let (left, right) = if ids[keep] < ids[drop] { (ids[keep], ids[drop]) } else { (ids[drop], ids[keep]) };
        merges.push(Merge { left, right, height: d_ab / 2.0, size: na + nb });

        active[drop] = false;
        for k in 0..n {
            if !active[k] || k == keep {
                continue;
            }
            let nk = sizes[k] as f64;
            let total = (na + nb) as f64 + nk;
            let updated = ((na as f64 + nk) * dist.get(keep, k) + (nb as f64 + nk) * dist.get(drop, k) - nk * d_ab)
                / total;
            dist.set(keep, k, updated);
        }
        sizes[keep] = na + nb;
        ids[keep] = n + step;

        if step + 2 == n {
            break;
        }
        nn[keep] = best_for(keep, &dist, &active, &ids);
        for k in 0..n {
            if !active[k] || k == keep {
                continue;
            }
            if nn[k].1 == keep || nn[k].1 == drop {
                nn[k] = best_for(k, &dist, &active, &ids);
            } else {
                let cand = pair_key(dist.get(k, keep), ids[k], ids[keep]);
                let cur = pair_key(nn[k].0, ids[k], ids[nn[k].1]);
                if key_less(cand, cur) {
                    nn[k] = (cand.0, keep);
                }
            }
        }
    }

    let leaves: Vec<usize> = points.iter().map(|p| p.0).collect();
    let leaf_of = leaves.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    Ok(ClusterTree { leaves, merges, leaf_of })
}

/// Mutable selection state: which leaves were queried, plus the seeded RNG.
#[derive(Debug, Clone)]
pub struct SamplerState {
    queried: Vec<bool>,
    pub purity_threshold: f64,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// Threshold defaults to `0.1 ln K`.
    pub fn new(tree: &ClusterTree, num_classes: usize, seed: u64) -> Self {
        SamplerState {
            queried: vec![false; tree.num_leaves()],
            purity_threshold: 0.1 * (num_classes as f64).ln(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_queried(&self, leaf: usize) -> bool {
        self.queried[leaf]
    }

    pub fn mark_queried(&mut self, leaf: usize) {
        self.queried[leaf] = true;
    }

    pub fn remaining(&self) -> usize {
        self.queried.iter().filter(|q| !**q).count()
    }
}

struct ClusterStat {
    open: Vec<usize>,
    entropy_sum: f64,
}

impl ClusterStat {
    fn mean(&self) -> f64 {
        if self.open.is_empty() {
            0.0
        } else {
            self.entropy_sum / self.open.len() as f64
        }
    }
}

fn leaf_entropies(tree: &ClusterTree, soft: &SoftDataset) -> Vec<Option<f64>> {
    let mut out = vec![None; tree.num_leaves()];
    for (pos, p) in &soft.items {
        if let Some(leaf) = tree.leaf_of(*pos) {
            out[leaf] = Some(entropy(p));
        }
    }
    out
}

/// Cluster-adaptive selection over the frontier cut of `tree`: repeatedly take
/// the open cluster with the largest mean entropy (clusters below the purity
/// threshold only when no other is open; ties broken by the state's RNG) and
/// draw one unqueried member uniformly. Returns corpus positions.
pub fn select_batch(tree: &ClusterTree, state: &mut SamplerState, soft: &SoftDataset, batch: usize) -> Result<Vec<usize>> {
    let entropies = leaf_entropies(tree, soft);
    let mut clusters: Vec<ClusterStat> = Vec::new();
    for node in tree.cut(FRONTIER_SIZE) {
        let mut stat = ClusterStat { open: Vec::new(), entropy_sum: 0.0 };
        for leaf in tree.members(node) {
            if state.queried[leaf] {
                continue;
            }
            let h = entropies[leaf].ok_or_else(|| {
                Error::Session(format!("no student distribution for instance at position {}", tree.leaves[leaf]))
            })?;
            stat.open.push(leaf);
            stat.entropy_sum += h;
        }
        clusters.push(stat);
    }

    let mut picked = Vec::new();
    while picked.len() < batch {
        let open: Vec<usize> = (0..clusters.len()).filter(|&c| !clusters[c].open.is_empty()).collect();
        if open.is_empty() {
            break;
        }
        let impure: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&c| clusters[c].mean() >= state.purity_threshold)
            .collect();
        let pool = if impure.is_empty() { open } else { impure };
        let top = pool.iter().map(|&c| clusters[c].mean()).fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = pool.into_iter().filter(|&c| clusters[c].mean() >= top - 1e-12).collect();
        let &c = tied.choose(&mut state.rng).expect("non-empty pool");
        let slot = rand::Rng::random_range(&mut state.rng, 0..clusters[c].open.len());
        let leaf = clusters[c].open.remove(slot);
        clusters[c].entropy_sum -= entropies[leaf].unwrap_or(0.0);
        if clusters[c].open.is_empty() {
            clusters[c].entropy_sum = 0.0;
        }
        state.queried[leaf] = true;
        picked.push(tree.leaves[leaf]);
    }
    Ok(picked)
}

/// Top-`k` positions by entropy, ties by corpus position.
pub fn uncertainty_select(soft: &SoftDataset, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = soft.items.iter().map(|(pos, p)| (entropy(p), *pos)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, pos)| pos).collect()
}

/// Seeded uniform sample of `k` positions without replacement.
pub fn random_select(positions: &[usize], k: usize, seed: u64) -> Vec<usize> {
    random_select_with(positions, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_select_with(positions: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = positions.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}
