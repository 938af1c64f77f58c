//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use common::{indexed, instance, rng, session_corpus};
use teachloop::analysis::{fit_pc_weights, paired_t_test, PCRecord};
use teachloop::corpus::{Corpus, FeatureAtom, Label, Split, TemplateSet};
use teachloop::features::FeatureIndex;
use teachloop::rulegen::{extract_candidates, MiningContext, RuleGenParams};
use teachloop::rules::{labeled_view, LabelMatrix, Rule, RuleKey, RuleSource, RuleStats, RuleStatus};
use teachloop::sampling::SamplerKind;
use teachloop::session::{
    replay, run_active_learning, run_session, run_wsl, Answer, Engine, Oracle, QueryKind, SessionConfig,
    SimulatedOracle, COST_EPS,
};
use teachloop::student::{loss_and_gradient, softmax, SoftDataset, StudentHyper, StudentModel, TargetSource};
use teachloop::synth::{generate, SynthConfig};
use teachloop::teacher::{dawid_skene, DawidSkene, TeacherKind, TeacherModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("dawid_skene_matches_reference_em", ds_matches_reference),
        ("apriori_matches_brute_force", apriori_matches_brute_force),
        ("student_gradient_and_softmax", gradient_and_softmax),
        ("session_invariants_200_runs", session_invariants),
        ("zero_budget_equals_wsl", zero_budget_equals_wsl),
        ("zero_beta_equals_active_learning", zero_beta_equals_active_learning),
        ("unit_costs_split_evenly", unit_costs_split_evenly),
        ("synthetic_benchmark_ordering", synthetic_benchmark),
        ("pc_weight_recovery", pc_weight_recovery),
        ("rule_oracle_strict_threshold", rule_oracle_threshold),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("{tag} {name} [{:.1}s] {}", start.elapsed().as_secs_f64(), result.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// ---------------------------------------------------------------------------
// Dawid-Skene against a dense, probability-space EM.

struct ReferenceDs {
    posteriors: Vec<Option<Vec<f64>>>,
    confusions: Vec<Vec<Vec<f64>>>,
    prior: Vec<f64>,
}

fn reference_em(votes: &[Vec<Option<usize>>], n: usize, k: usize, max_iter: usize, tol: f64, smoothing: f64) -> ReferenceDs {
    let m = votes.len();
    let mut t: Vec<Option<Vec<f64>>> = (0..n)
        .map(|i| {
            let cast: Vec<usize> = (0..m).filter_map(|j| votes[j][i]).collect();
            if cast.is_empty() {
                return None;
            }
            let mut q = vec![0.0; k];
            for l in &cast {
                q[*l] += 1.0;
            }
            Some(q.iter().map(|c| c / cast.len() as f64).collect())
        })
        .collect();
    let n_cov = t.iter().filter(|q| q.is_some()).count();
    let mut prior = vec![1.0 / k as f64; k];
    let mut conf = vec![vec![vec![1.0 / k as f64; k]; k]; m];
    if n_cov == 0 {
        return ReferenceDs { posteriors: t, confusions: conf, prior };
    }
    for _ in 0..max_iter {
        for c in 0..k {
            prior[c] = t.iter().flatten().map(|q| q[c]).sum::<f64>() / n_cov as f64;
        }
        for j in 0..m {
            for c in 0..k {
                let mut row = vec![smoothing; k];
                for i in 0..n {
                    if let (Some(l), Some(q)) = (votes[j][i], &t[i]) {
                        row[l] += q[c];
                    }
                }
                let s: f64 = row.iter().sum();
                conf[j][c] = if s > 0.0 {
                    row.iter().map(|v| v / s).collect()
                } else {
                    vec![1.0 / k as f64; k]
                };
            }
        }
        let mut delta = 0.0f64;
        for i in 0..n {
            let Some(q) = t[i].as_mut() else { continue };
            let mut p: Vec<f64> = (0..k)
                .map(|c| {
                    (0..m)
                        .filter_map(|j| votes[j][i].map(|l| conf[j][c][l]))
                        .product::<f64>()
                        * prior[c]
                })
                .collect();
            let s: f64 = p.iter().sum();
            if s > 0.0 {
                p.iter_mut().for_each(|v| *v /= s);
            } else {
                p = vec![1.0 / k as f64; k];
            }
            for (old, new) in q.iter_mut().zip(p) {
                delta = delta.max((*old - new).abs());
                *old = new;
            }
        }
        if delta < tol {
            break;
        }
    }
    ReferenceDs { posteriors: t, confusions: conf, prior }
}

fn ds_matches_reference() -> Outcome {
    let params = DawidSkene::default();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let k = 2;
        let n = r.random_range(1..=6);
        let m = r.random_range(1..=3);
        let votes: Vec<Vec<Option<usize>>> = (0..m)
            .map(|_| (0..n).map(|_| r.random_bool(0.6).then(|| r.random_range(0..k))).collect())
            .collect();
        let triples = (0..m).flat_map(|j| {
            let row = votes[j].clone();
            (0..n).filter_map(move |i| row[i].map(|l| (j, i, Label::from_index(l))))
        });
        let matrix = LabelMatrix::from_votes((0..m).map(|j| format!("r{j}")).collect(), (0..n).collect(), triples);
        let got = dawid_skene(&matrix, k, params.max_iter, params.tol, params.smoothing).unwrap();
        let want = reference_em(&votes, n, k, params.max_iter, params.tol, params.smoothing);

        let mut diff = 0.0f64;
        for i in 0..n {
            match (got.soft_labels.get(&i), &want.posteriors[i]) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        diff = diff.max((x - y).abs());
                    }
                }
                (None, None) => {}
                _ => diff = f64::INFINITY,
            }
        }
        if let TeacherModel::DawidSkene(model) = &got.model {
            for (x, y) in model.prior.iter().zip(&want.prior) {
                diff = diff.max((x - y).abs());
            }
            for (a, b) in model.confusions.iter().flatten().flatten().zip(want.confusions.iter().flatten().flatten()) {
                diff = diff.max((a - b).abs());
            }
        } else {
            diff = f64::INFINITY;
        }
        worst = worst.max(diff);
        if diff > 1e-6 {
            failures.push(seed);
        }
    }
    outcome(
        failures.is_empty(),
        format!("100 seeds, max abs difference {worst:.2e} (tolerance 1e-6), failing seeds {failures:?}"),
    )
}

// ---------------------------------------------------------------------------
// Anchored Apriori against exhaustive subset enumeration.

fn mining_corpus(seed: u64) -> (Corpus, FeatureIndex) {
    let mut r = rng(seed);
    let n = r.random_range(60..=300);
    let n_atoms = r.random_range(5..=40);
    let k = r.random_range(2..=3);
    let density: f64 = r.random_range(0.05..0.3);
    let instances = (0..n)
        .map(|i| {
            let split = match r.random_range(0..10) {
                0..=1 => Split::Labeled,
                2..=7 => Split::Unlabeled,
                8 => Split::Validation,
                _ => Split::Test,
            };
            let y = r.random_range(0..k);
            let atoms: BTreeSet<FeatureAtom> = (0..n_atoms)
                .filter(|a| r.random_bool(if a % k == y { (density * 1.5).min(1.0) } else { density }))
                .map(|a| FeatureAtom::ngram(format!("f{a}")))
                .collect();
            instance(format!("i{i}"), split, Some(Label::from_index(y)), vec![0.0], atoms)
        })
        .collect();
    let corpus = Corpus::new(instances, k, TemplateSet::default()).unwrap();
    let index = FeatureIndex::build(&corpus);
    (corpus, index)
}

fn brute_force(
    corpus: &Corpus,
    anchor: usize,
    label: Label,
    known: &[Option<Label>],
    params: &RuleGenParams,
) -> BTreeMap<Vec<FeatureAtom>, RuleStats> {
    let atoms: Vec<FeatureAtom> = corpus.instance(anchor).features.iter().cloned().collect();
    let n_u = corpus.split(Split::Unlabeled).len();
    let mut out = BTreeMap::new();
    let mut subset = Vec::new();
    fn walk(
        start: usize,
        atoms: &[FeatureAtom],
        subset: &mut Vec<FeatureAtom>,
        t_len: usize,
        visit: &mut dyn FnMut(&[FeatureAtom]),
    ) {
        for i in start..atoms.len() {
            subset.push(atoms[i].clone());
            visit(subset);
            if subset.len() < t_len {
                walk(i + 1, atoms, subset, t_len, visit);
            }
            subset.pop();
        }
    }
    walk(0, &atoms, &mut subset, params.t_len, &mut |pred| {
        let mut cov_u = 0;
        let mut cov_l = 0;
        let mut hit = 0;
        for (i, inst) in corpus.instances().iter().enumerate() {
            if !pred.iter().all(|a| inst.features.contains(a)) {
                continue;
            }
            if inst.split == Split::Unlabeled {
                cov_u += 1;
            }
            if let Some(l) = known[i] {
                cov_l += 1;
                if l == label {
                    hit += 1;
                }
            }
        }
        let precision = (cov_l > 0).then(|| hit as f64 / cov_l as f64);
        if cov_u < params.t_cov || precision.is_some_and(|p| p < params.t_prec) {
            return;
        }
        out.insert(
            pred.to_vec(),
            RuleStats {
                coverage_unlabeled: cov_u,
                coverage_unlabeled_fraction: cov_u as f64 / n_u as f64,
                coverage_labeled: cov_l,
                precision_labeled: precision,
                precision_unlabeled_oracle: None,
            },
        );
    });
    out
}

fn apriori_matches_brute_force() -> Outcome {
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let (corpus, index) = mining_corpus(seed);
        let mut r = rng(seed + 10_000);
        let mut known = labeled_view(&corpus);
        for &i in corpus.split(Split::Unlabeled) {
            if r.random_bool(0.1) {
                known[i] = corpus.instance(i).gold_label;
            }
        }
        for _ in 0..5 {
            let anchor = *corpus.split(Split::Unlabeled).choose(&mut r).unwrap();
            let label = Label::from_index(r.random_range(0..corpus.num_classes()));
            let params = RuleGenParams {
                t_cov: r.random_range(1..=12),
                t_prec: *[0.0, 0.3, 0.5, 0.75, 0.9].choose(&mut r).unwrap(),
                t_len: r.random_range(1..=3),
                beta: 1,
                ..Default::default()
            };
            let mut expected = brute_force(&corpus, anchor, label, &known, &params);
            let existing: HashSet<RuleKey> = expected
                .keys()
                .enumerate()
                .filter(|(j, _)| j % 4 == 1)
                .map(|(_, pred)| Rule::new(pred.clone(), label, RuleSource::Mined, RuleStatus::Candidate).unwrap().key())
                .collect();
            expected.retain(|pred, _| {
                !existing.contains(&Rule::new(pred.clone(), label, RuleSource::Mined, RuleStatus::Candidate).unwrap().key())
            });
            let ctx = MiningContext {
                corpus: &corpus,
                index: &index,
                known: &known,
            };
            let got = extract_candidates(anchor, label, ctx, &params, &existing);
            let ordered = got.windows(2).all(|w| {
                (w[0].stats.coverage_unlabeled, std::cmp::Reverse(w[0].rule.predicate()))
                    > (w[1].stats.coverage_unlabeled, std::cmp::Reverse(w[1].rule.predicate()))
            });
            let labels_ok = got.iter().all(|c| c.rule.label == label);
            let got: BTreeMap<Vec<FeatureAtom>, RuleStats> =
                got.into_iter().map(|c| (c.rule.predicate().to_vec(), c.stats)).collect();
            checked += expected.len();
            if got != expected || !ordered || !labels_ok {
                failures.push(seed);
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("50 seeds x 5 anchors, {checked} rules compared, failing seeds {failures:?}"),
    )
}

// ---------------------------------------------------------------------------
// Student objective.

fn gradient_and_softmax() -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut grad_failures = 0;
    let mut worst_norm = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(seed + 20_000);
        let k = r.random_range(2..=5);
        let d = r.random_range(1..=6);
        let n_l = r.random_range(1..=6);
        let n_w = r.random_range(0..=6);
        let instances = (0..n_l + n_w)
            .map(|i| {
                let x = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
                let split = if i < n_l { Split::Labeled } else { Split::Unlabeled };
                instance(format!("x{i}"), split, Some(Label::from_index(i % k)), x, BTreeSet::new())
            })
            .collect();
        let corpus = Corpus::new(instances, k, TemplateSet::default()).unwrap();
        let labeled = SoftDataset::from_labels((0..n_l).map(|i| (i, Label::from_index(r.random_range(0..k)))), k);
        let weak = SoftDataset {
            source: TargetSource::Teacher,
            items: (n_l..n_l + n_w)
                .map(|i| {
                    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    (i, raw.into_iter().map(|v| v / s).collect())
                })
                .collect(),
        };
        let mut model = StudentModel::zeros(k, d, r.random_range(0.0..2.0));
        model.weights.iter_mut().for_each(|w| *w = r.random_range(-1.5..1.5));
        model.bias.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
        let (_, grad) = loss_and_gradient(&model, &corpus, &labeled, &weak);
        let h = 1e-6;
        let n_w_params = model.weights.len();
        for p in 0..n_w_params + model.bias.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let analytic = if p < n_w_params {
                plus.weights[p] += h;
                minus.weights[p] -= h;
                grad.weights[p]
            } else {
                plus.bias[p - n_w_params] += h;
                minus.bias[p - n_w_params] -= h;
                grad.bias[p - n_w_params]
            };
            let numeric = (loss_and_gradient(&plus, &corpus, &labeled, &weak).0
                - loss_and_gradient(&minus, &corpus, &labeled, &weak).0)
                / (2.0 * h);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-12);
            if abs > 1e-9 {
                worst_rel = worst_rel.max(rel);
                if rel > 1e-5 {
                    grad_failures += 1;
                }
            }
        }
        for _ in 0..20 {
            let scale = 10f64.powi(r.random_range(-2..=3));
            let logits: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0) * scale).collect();
            let p = softmax(&logits);
            worst_norm = worst_norm.max((p.iter().sum::<f64>() - 1.0).abs());
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                worst_norm = f64::INFINITY;
            }
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0) * scale).collect();
            let q = model.probabilities(&x);
            worst_norm = worst_norm.max((q.iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        grad_failures == 0 && worst_norm <= 1e-9,
        format!(
            "100 configs, worst gradient relative error {worst_rel:.2e} (tolerance 1e-5), \
             {grad_failures} failures; worst softmax normalization error {worst_norm:.2e} (tolerance 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------------------
// Session invariants.

fn random_config(r: &mut impl Rng, seed: u64) -> SessionConfig {
    let costs = [0.5, 1.0, 1.5, 2.0];
    SessionConfig {
        teacher: if r.random_bool(0.5) { TeacherKind::MajorityVote } else { TeacherKind::DawidSkene },
        sampler: *[SamplerKind::Hierarchical, SamplerKind::Uncertainty, SamplerKind::Random]
            .choose(r)
            .unwrap(),
        rulegen: RuleGenParams {
            t_cov: r.random_range(1..=4),
            t_prec: *[0.0, 0.5, 0.75].choose(r).unwrap(),
            t_len: r.random_range(1..=3),
            beta: r.random_range(0..=3),
            ..Default::default()
        },
        student: StudentHyper {
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        },
        batch: r.random_range(1..=6),
        budget: (r.random_range(0..=60) as f64) / 2.0,
        cost_instance: *costs.choose(r).unwrap(),
        cost_rule: *costs.choose(r).unwrap(),
        t_oracle: *[0.5, 0.75, 1.0].choose(r).unwrap(),
        seed,
    }
}

/// Drives `engine` like the simulated expert, checking accounting after
/// every answer. Returns the first violation.
fn drive_checked(engine: &mut Engine, oracle: &mut SimulatedOracle) -> Result<(), String> {
    let total = engine.budget().total;
    while let Some(q) = engine.next_for_simulation() {
        let answer = match q.kind {
            QueryKind::Instance => Answer::Label(oracle.answer_instance(engine.corpus(), q.position).unwrap()),
            QueryKind::Rule => {
                if oracle.answer_rule(q.rule.as_ref().unwrap(), q.position).unwrap() {
                    Answer::Accept
                } else {
                    Answer::Reject
                }
            }
        };
        let ts = engine.log().len() as u64;
        engine.answer(&q.query_id, answer, ts).map_err(|e| e.to_string())?;
        let b = engine.budget();
        if b.spent + b.reserved > total + COST_EPS {
            return Err(format!("spent {} + reserved {} exceeds {total}", b.spent, b.reserved));
        }
        let logged: f64 = engine.log().iter().map(|e| e.cost).fold(0.0, |a, c| a + c);
        if logged != b.spent {
            return Err(format!("logged cost {logged} differs from spent {}", b.spent));
        }
    }
    Ok(())
}

fn check_session(engine: &Engine, initial_rules: &[Rule]) -> Result<(), String> {
    let corpus = engine.corpus();
    let b = engine.budget();
    if !engine.is_terminated() || b.reserved != 0.0 || b.spent > b.total + COST_EPS {
        return Err(format!("bad final budget {b:?} / status {}", engine.status()));
    }
    let mut asked = HashSet::new();
    let mut anchor_labels: BTreeMap<(usize, String), Label> = BTreeMap::new();
    for entry in engine.log() {
        match entry.kind {
            QueryKind::Instance => {
                if !asked.insert(entry.subject_id.clone()) {
                    return Err(format!("instance {} queried twice", entry.subject_id));
                }
                let pos = corpus.index_of(&entry.subject_id).unwrap();
                if corpus.instance(pos).split != Split::Unlabeled {
                    return Err(format!("queried {} outside the unlabeled pool", entry.subject_id));
                }
                let Answer::Label(l) = entry.answer else {
                    return Err("instance query answered with a verdict".into());
                };
                anchor_labels.insert((entry.iteration, entry.subject_id.clone()), l);
            }
            QueryKind::Rule => {
                let rule = entry.rule.as_ref().ok_or("rule entry without rule")?;
                let anchor = corpus.index_of(&entry.anchor_id).ok_or("unknown anchor")?;
                if !rule.predicate().iter().all(|a| corpus.instance(anchor).features.contains(a)) {
                    return Err(format!("rule {} does not cover its anchor {}", rule.id, entry.anchor_id));
                }
                match anchor_labels.get(&(entry.iteration, entry.anchor_id.clone())) {
                    Some(&l) if l == rule.label => {}
                    _ => return Err(format!("rule {} disagrees with its anchor's label", rule.id)),
                }
            }
        }
    }
    let replayed = replay(corpus, initial_rules, engine.log()).map_err(|e| e.to_string())?;
    if replayed.canonical_json() != engine.digest().canonical_json() {
        return Err("replayed state differs".into());
    }
    Ok(())
}

fn active_learning_matches(engine: &Engine, rules: &[Rule], oracle: &mut SimulatedOracle) -> Result<(), String> {
    let al = run_active_learning(engine.corpus(), &FeatureIndex::build(engine.corpus()), rules, engine.config(), oracle)
        .map_err(|e| e.to_string())?;
    let interactive: Vec<(usize, String, Label)> = engine
        .log()
        .iter()
        .map(|e| match e.answer {
            Answer::Label(l) => Ok((e.iteration, e.subject_id.clone(), l)),
            _ => Err("rule query in a beta = 0 session".to_string()),
        })
        .collect::<Result<_, _>>()?;
    if interactive != al.queries {
        return Err(format!(
            "query sequences differ ({} interactive vs {} standalone)",
            interactive.len(),
            al.queries.len()
        ));
    }
    if al.spent != engine.budget().spent || al.student.weights != engine.student().unwrap().weights {
        return Err("final spend or student differs".into());
    }
    Ok(())
}

fn session_invariants() -> Outcome {
    let results: Vec<(u64, Result<(usize, usize), String>)> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let run = || -> Result<(usize, usize), String> {
                let mut r = rng(seed + 30_000);
                let k = r.random_range(2..=3);
                let (corpus, index) = session_corpus(seed, k, r.random_range(20..=60));
                let config = random_config(&mut r, seed);
                let initial: Vec<Rule> = if r.random_bool(0.5) {
                    vec![Rule::new([FeatureAtom::ngram("a0")], Label(1), RuleSource::Expert, RuleStatus::Accepted).unwrap()]
                } else {
                    Vec::new()
                };
                let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), config.t_oracle).unwrap();
                let mut engine = Engine::new(corpus.clone(), index.clone(), &initial, config.clone()).map_err(|e| e.to_string())?;
                drive_checked(&mut engine, &mut oracle)?;
                check_session(&engine, &initial)?;

                let mut ablation = config.clone();
                ablation.rulegen.beta = 0;
                let mut engine0 = Engine::new(corpus.clone(), index.clone(), &initial, ablation).map_err(|e| e.to_string())?;
                drive_checked(&mut engine0, &mut oracle)?;
                check_session(&engine0, &initial)?;
                active_learning_matches(&engine0, &initial, &mut oracle)?;
                let rule_queries = engine.log().iter().filter(|e| e.kind == QueryKind::Rule).count();
                Ok((engine.log().len(), rule_queries))
            };
            (seed, run())
        })
        .collect();
    let mut queries = 0;
    let mut rule_queries = 0;
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok((q, rq)) => {
                queries += q;
                rule_queries += rq;
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    outcome(
        failures.is_empty() && rule_queries > 0,
        format!(
            "200 sessions plus their beta = 0 twins, {queries} queries ({rule_queries} rule queries); \
             conservation, uniqueness, anchoring, replay and active-learning equivalence; failures {:?}",
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// Degenerate configurations.

fn small_synth(seed: u64, k: usize) -> (Arc<Corpus>, Arc<FeatureIndex>, Vec<Rule>) {
    let s = generate(&SynthConfig {
        num_classes: k,
        n_unlabeled: 300,
        n_test: 100,
        dim: 10,
        seed,
        ..Default::default()
    })
    .unwrap();
    let rules = s.planted_rules();
    let (c, i) = indexed(s.corpus);
    (c, i, rules)
}

fn zero_budget_equals_wsl() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..6u64 {
        let (corpus, index, rules) = small_synth(seed, 2 + (seed as usize % 3));
        let config = SessionConfig {
            teacher: if seed % 2 == 0 { TeacherKind::DawidSkene } else { TeacherKind::MajorityVote },
            budget: 0.0,
            seed,
            student: StudentHyper { epochs: 30, ..Default::default() },
            ..Default::default()
        };
        let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), 0.75).unwrap();
        let engine = run_session(config.clone(), corpus.clone(), index.clone(), &rules, &mut oracle).unwrap();
        let (teacher, student) = run_wsl(&corpus, &index, &rules, &config).unwrap();
        let same = engine.log().is_empty()
            && engine.student().unwrap().weights == student.weights
            && engine.student().unwrap().bias == student.bias
            && engine.teacher_output().unwrap().soft_labels == teacher.soft_labels;
        if !same {
            failures.push(seed);
        }
    }
    outcome(
        failures.is_empty(),
        format!("6 synthetic corpora, both teachers: identical teacher outputs and student parameters; failing seeds {failures:?}"),
    )
}

fn zero_beta_equals_active_learning() -> Outcome {
    let mut failures = Vec::new();
    let mut compared = 0;
    for seed in 0..3u64 {
        for sampler in [SamplerKind::Hierarchical, SamplerKind::Uncertainty, SamplerKind::Random] {
            let (corpus, index, rules) = small_synth(seed, 3);
            let mut config = SessionConfig {
                teacher: TeacherKind::MajorityVote,
                sampler,
                budget: 40.0,
                seed,
                student: StudentHyper { epochs: 20, ..Default::default() },
                ..Default::default()
            };
            config.rulegen.beta = 0;
            let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), 0.75).unwrap();
            let engine = run_session(config, corpus.clone(), index.clone(), &rules[..5], &mut oracle).unwrap();
            compared += engine.log().len();
            if let Err(e) = active_learning_matches(&engine, &rules[..5], &mut oracle) {
                failures.push(format!("seed {seed} {sampler}: {e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("3 seeds x 3 samplers, {compared} queries matched one-for-one; failures {failures:?}"),
    )
}

fn unit_costs_split_evenly() -> Outcome {
    // Every instance carries a unique atom, so each labeled anchor always has
    // a fresh candidate rule.
    let mut r = rng(7);
    let mut instances = Vec::new();
    for (split, n) in [(Split::Labeled, 6), (Split::Unlabeled, 200), (Split::Validation, 10), (Split::Test, 10)] {
        for i in 0..n {
            let y = i % 2;
            let mut atoms = BTreeSet::from([FeatureAtom::ngram(format!("{}{i}", split.as_str()))]);
            if r.random_bool(0.5) {
                atoms.insert(FeatureAtom::ngram(format!("c{y}")));
            }
            let x = vec![y as f64 * 2.0 + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            instances.push(instance(format!("{}-{i}", split.as_str()), split, Some(Label::from_index(y)), x, atoms));
        }
    }
    let (corpus, index) = indexed(Corpus::new(instances, 2, TemplateSet::default()).unwrap());
    let mut details = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let config = SessionConfig {
            teacher: TeacherKind::MajorityVote,
            rulegen: RuleGenParams {
                t_cov: 1,
                t_prec: 0.0,
                t_len: 1,
                beta: 1,
                ..Default::default()
            },
            student: StudentHyper { epochs: 10, ..Default::default() },
            budget: 100.0,
            cost_instance: 1.0,
            cost_rule: 1.0,
            batch: 10,
            seed,
            ..Default::default()
        };
        let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), 0.75).unwrap();
        let engine = run_session(config, corpus.clone(), index.clone(), &[], &mut oracle).unwrap();
        let n_inst = engine.log().iter().filter(|e| e.kind == QueryKind::Instance).count();
        let n_rule = engine.log().len() - n_inst;
        let per_anchor = engine
            .log()
            .iter()
            .filter(|e| e.kind == QueryKind::Instance)
            .all(|e| engine.log().iter().filter(|x| x.kind == QueryKind::Rule && x.anchor_id == e.subject_id).count() == 1);
        ok &= n_inst == 50 && n_rule == 50 && per_anchor && engine.budget().spent == 100.0;
        details.push(format!("({n_inst}, {n_rule})"));
    }
    outcome(ok, format!("T=100, unit costs, beta=1, 3 seeds: (instance, rule) queries {}", details.join(" ")))
}

// ---------------------------------------------------------------------------
// Planted-rule benchmark.

fn final_test_f1(corpus: &Arc<Corpus>, index: &Arc<FeatureIndex>, seed: u64, beta: usize, budget: f64) -> f64 {
    let mut config = SessionConfig {
        teacher: TeacherKind::MajorityVote,
        budget,
        seed,
        ..Default::default()
    };
    config.rulegen.beta = beta;
    let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), config.t_oracle).unwrap();
    let engine = run_session(config, corpus.clone(), index.clone(), &[], &mut oracle).unwrap();
    engine.metrics().last().unwrap().test_f1.unwrap()
}

fn synthetic_benchmark() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for k in 2..=4usize {
        let rows: Vec<[f64; 3]> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let s = generate(&SynthConfig {
                    num_classes: k,
                    seed,
                    ..Default::default()
                })
                .unwrap();
                let (corpus, index) = indexed(s.corpus);
                [
                    final_test_f1(&corpus, &index, seed, 1, 100.0),
                    final_test_f1(&corpus, &index, seed, 0, 100.0),
                    final_test_f1(&corpus, &index, seed, 1, 0.0),
                ]
            })
            .collect();
        let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        let mean = |j: usize| col(j).iter().sum::<f64>() / rows.len() as f64;
        let upper = paired_t_test(&col(0), &col(1)).unwrap();
        let lower = paired_t_test(&col(1), &col(2)).unwrap();
        let pass = upper.mean_diff > 0.0 && upper.p_value < 0.05 && lower.mean_diff > 0.0 && lower.p_value < 0.05;
        ok &= pass;
        lines.push(format!(
            "K={k}: interactive {:.3} > labels-only {:.3} (p={:.1e}) > no-budget {:.3} (p={:.1e})",
            mean(0),
            mean(1),
            upper.p_value,
            mean(2),
            lower.p_value
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    outcome(ok, format!("10 seeds per K, majority-vote teacher; {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// Precision/coverage weight fit.

fn pc_weight_recovery() -> Outcome {
    let step = 0.01;
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut ok = true;
    let mut lines = Vec::new();
    for w in [0.3, 0.5, 0.7, 0.8] {
        let mut fitted = Vec::new();
        for seed in 0..10u64 {
            let mut r = rng(seed + 40_000);
            let records: Vec<PCRecord> = (0..200)
                .map(|_| {
                    let p: f64 = r.random_range(0.3..1.0);
                    let c: f64 = r.random_range(0.05..1.0);
                    PCRecord {
                        teacher_precision: p,
                        teacher_coverage: c,
                        student_f1: p.powf(w) * c.powf(1.0 - w) + noise.sample(&mut r),
                        teacher: "synthetic".into(),
                        fraction: 1.0,
                        seed,
                    }
                })
                .collect();
            let fit = fit_pc_weights(&records, step).unwrap();
            ok &= (fit.w_precision - w).abs() <= step + 1e-9;
            fitted.push(fit.w_precision);
        }
        let lo = fitted.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = fitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lines.push(format!("w={w}: fitted in [{lo:.2}, {hi:.2}]"));
    }
    outcome(ok, format!("10 noisy record sets per weight, grid step {step}; {}", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// Simulated rule oracle.

fn oracle_corpus(pattern: &[bool]) -> (Arc<Corpus>, Arc<FeatureIndex>) {
    let f = FeatureAtom::ngram("f");
    let g = FeatureAtom::ngram("g");
    let mut instances = Vec::new();
    for (i, &correct) in pattern.iter().enumerate() {
        let y = if correct { 0 } else { 1 };
        instances.push(instance(format!("u{i}"), Split::Unlabeled, Some(Label::from_index(y)), vec![0.0], BTreeSet::from([f.clone()])));
    }
    // Carriers outside the unlabeled pool and unlabeled non-carriers must not count.
    for i in 0..2 {
        instances.push(instance(format!("l{i}"), Split::Labeled, Some(Label(2)), vec![0.0], BTreeSet::from([f.clone()])));
        instances.push(instance(format!("t{i}"), Split::Test, Some(Label(2)), vec![0.0], BTreeSet::from([f.clone()])));
        instances.push(instance(format!("o{i}"), Split::Unlabeled, Some(Label(1)), vec![0.0], BTreeSet::from([g.clone()])));
    }
    indexed(Corpus::new(instances, 2, TemplateSet::default()).unwrap())
}

fn rule_oracle_threshold() -> Outcome {
    let rule = Rule::new([FeatureAtom::ngram("f")], Label(1), RuleSource::Mined, RuleStatus::Candidate).unwrap();
    // Thresholds in quarters, so the expected answer is exact integer arithmetic.
    // At t = 1 the only passing rules are the perfect ones.
    let quarters = [0u64, 1, 2, 3, 4];
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for n in 0..=12usize {
        for mask in 0u32..(1 << n) {
            let pattern: Vec<bool> = (0..n).map(|b| mask >> b & 1 == 1).collect();
            let correct = pattern.iter().filter(|&&c| c).count();
            let (corpus, index) = oracle_corpus(&pattern);
            for &q in &quarters {
                let oracle = SimulatedOracle::new(corpus.clone(), index.clone(), q as f64 / 4.0).unwrap();
                let expected = n > 0 && (4 * correct as u64 > q * n as u64 || (q == 4 && correct == n));
                cases += 1;
                if oracle.rule_counts(&rule) != (correct, n) || oracle.judge(&rule) != expected {
                    mismatches += 1;
                }
            }
        }
    }
    let boundary = teachloop::session::accepts(8, 10, 0.75)
        && !teachloop::session::accepts(7, 10, 0.75)
        && !teachloop::session::accepts(3, 4, 0.75)
        && !teachloop::session::accepts(0, 0, 0.0);

    // With t_oracle = 1 the accepted set is exactly the rules that are
    // correct on every covered unlabeled instance.
    let (corpus, index, planted) = small_synth(3, 3);
    let oracle = SimulatedOracle::new(corpus.clone(), index.clone(), 1.0).unwrap();
    let atoms: Vec<FeatureAtom> = index.vocabulary().to_vec();
    let mut perfect_mismatch = 0;
    let mut perfect = 0;
    let mut candidates: Vec<Vec<FeatureAtom>> = atoms.iter().map(|a| vec![a.clone()]).collect();
    for p in planted.iter().take(10) {
        for a in atoms.iter().take(20) {
            candidates.push(vec![p.predicate()[0].clone(), a.clone()]);
        }
    }
    for pred in &candidates {
        for y in 0..3 {
            let Ok(rule) = Rule::new(pred.clone(), Label::from_index(y), RuleSource::Mined, RuleStatus::Candidate) else {
                continue;
            };
            let covered: Vec<&teachloop::corpus::Instance> = corpus
                .split(Split::Unlabeled)
                .iter()
                .map(|&i| corpus.instance(i))
                .filter(|inst| rule.predicate().iter().all(|a| inst.features.contains(a)))
                .collect();
            let brute = !covered.is_empty() && covered.iter().all(|inst| inst.gold_label == Some(rule.label));
            perfect += brute as usize;
            if oracle.judge(&rule) != brute {
                perfect_mismatch += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && boundary && perfect_mismatch == 0,
        format!(
            "{cases} exhaustive cases over covered sets of size 0..=12 at t in {{0, .25, .5, .75, 1}}: {mismatches} mismatches; \
             boundary cases {}; t=1 on a planted corpus: {perfect} perfect rules, {perfect_mismatch} mismatches",
            if boundary { "ok" } else { "wrong" }
        ),
    )
}
