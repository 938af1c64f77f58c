//! The budgeted interactive loop.
//!
//! Each iteration trains the teacher on the accepted rules and the student on
//! the current labels plus teacher soft labels, then issues a batch of
//! instance queries. Answering an instance query mines rules anchored on it
//! and issues up to `beta` rule queries. Labels and rule verdicts are staged
//! and applied when the batch is complete, at which point the next iteration
//! starts. Costs are reserved when a query is issued and charged when it is
//! answered, so `spent + reserved <= total` always holds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::features::FeatureIndex;
use crate::rulegen::{extract_candidates, select_for_query, MiningContext, RuleGenParams};
use crate::rules::{build_label_matrix, Rule, RuleKey, RuleStats, RuleStatus};
use crate::sampling::{
    build_hierarchy, random_select_with, select_batch, uncertainty_select, ClusterTree, SamplerKind, SamplerState,
};
use crate::student::{train, SoftDataset, StudentHyper, StudentModel};
use crate::teacher::{TeacherKind, TeacherOutput};

/// Slack for comparing accumulated real-valued costs.
pub const COST_EPS: f64 = 1e-9;

const SAMPLER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub teacher: TeacherKind,
    pub sampler: SamplerKind,
    #[serde(flatten)]
    pub rulegen: RuleGenParams,
    /// `student.seed` is replaced by `seed` when the session trains.
    pub student: StudentHyper,
    pub batch: usize,
    pub budget: f64,
    pub cost_instance: f64,
    pub cost_rule: f64,
    pub t_oracle: f64,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            teacher: TeacherKind::DawidSkene,
            sampler: SamplerKind::Hierarchical,
            rulegen: RuleGenParams::default(),
            student: StudentHyper::default(),
            batch: 10,
            budget: 100.0,
            cost_instance: 1.0,
            cost_rule: 1.0,
            t_oracle: 0.75,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.rulegen.validate()?;
        self.student.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be at least 1".into()));
        }
        if !(self.budget >= 0.0) || !self.budget.is_finite() {
            return Err(Error::InvalidParameter("budget must be a finite non-negative number".into()));
        }
        if !(self.cost_instance > 0.0) || !(self.cost_rule > 0.0) {
            return Err(Error::InvalidParameter("query costs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.t_oracle) {
            return Err(Error::InvalidParameter("t_oracle must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Student hyperparameters with the session seed applied.
    pub fn student_hyper(&self) -> StudentHyper {
        StudentHyper {
            seed: self.seed,
            ..self.student.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub total: f64,
    pub cost_instance: f64,
    pub cost_rule: f64,
    pub spent: f64,
    /// Cost of issued, unanswered queries.
    pub reserved: f64,
}

impl Budget {
    pub fn new(total: f64, cost_instance: f64, cost_rule: f64) -> Self {
        Budget {
            total,
            cost_instance,
            cost_rule,
            spent: 0.0,
            reserved: 0.0,
        }
    }

    pub fn remaining(&self) -> f64 {
        self.total - self.spent
    }

    /// Budget neither spent nor reserved.
    pub fn free(&self) -> f64 {
        self.total - self.spent - self.reserved
    }

    pub fn can_afford(&self, cost: f64) -> bool {
        self.free() + COST_EPS >= cost
    }

    /// How many queries of `cost` the free budget funds.
    pub fn affordable(&self, cost: f64) -> usize {
        ((self.free() + COST_EPS) / cost).floor().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Instance,
    Rule,
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Instance => "instance",
            QueryKind::Rule => "rule",
        })
    }
}

/// `{"label": 2}`, `"accept"` or `"reject"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Label(Label),
    Accept,
    Reject,
}

impl Answer {
    pub fn kind(self) -> QueryKind {
        match self {
            Answer::Label(_) => QueryKind::Instance,
            Answer::Accept | Answer::Reject => QueryKind::Rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: String,
    pub kind: QueryKind,
    pub iteration: usize,
    /// Issue order within the session.
    pub issued_at: u64,
    /// The queried instance, or the anchor of a rule query.
    pub instance_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<RuleStats>,
    /// A few other unlabeled instances the rule covers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covered_sample: Vec<SampleInstance>,
    #[serde(skip)]
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInstance {
    pub id: String,
    pub text: String,
}

const COVERED_SAMPLE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub seq: u64,
    pub iteration: usize,
    pub query_id: String,
    pub kind: QueryKind,
    /// Instance id for instance queries, rule id for rule queries.
    pub subject_id: String,
    pub anchor_id: String,
    pub answer: Answer,
    pub cost: f64,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub labeled: usize,
    pub accepted_rules: usize,
    pub rejected_rules: usize,
    pub spent: f64,
    pub teacher_coverage: usize,
    pub validation_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

pub fn metrics_tsv(rows: &[MetricRow]) -> String {
    let mut out =
        String::from("iteration\tlabeled\taccepted_rules\trejected_rules\tspent\tteacher_coverage\tvalidation_f1\ttest_f1\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.iteration,
            r.labeled,
            r.accepted_rules,
            r.rejected_rules,
            r.spent,
            r.teacher_coverage,
            opt(r.validation_f1),
            opt(r.test_f1)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BudgetExhausted,
    PoolExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingAnswers,
    Terminated(Termination),
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionStatus::AwaitingAnswers => f.write_str("awaiting answers"),
            SessionStatus::Terminated(Termination::BudgetExhausted) => f.write_str("terminated: budget exhausted"),
            SessionStatus::Terminated(Termination::PoolExhausted) => f.write_str("terminated: unlabeled pool exhausted"),
        }
    }
}

/// The replayable part of a session: labels, rule sets and spent budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDigest {
    /// `(instance id, label)` sorted by id.
    pub labeled: Vec<(String, Label)>,
    /// Sorted by rule id.
    pub accepted: Vec<Rule>,
    pub rejected: Vec<Rule>,
    pub spent: f64,
}

impl StateDigest {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("digest serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub status: String,
    pub terminated: bool,
    pub iteration: usize,
    pub budget: Budget,
    pub remaining: f64,
    pub labeled: usize,
    pub accepted_rules: usize,
    pub rejected_rules: usize,
    pub pending: usize,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub query_id: String,
    pub budget: Budget,
    pub terminated: bool,
    pub status: String,
    /// True when the same answer had already been recorded.
    pub duplicate: bool,
}

/// Splits initial rules into the accepted set (everything not marked
/// rejected, stamped accepted) and the rejected set.
pub fn normalize_initial_rules(rules: &[Rule]) -> (Vec<Rule>, Vec<Rule>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for rule in rules {
        if !seen.insert(rule.key()) {
            continue;
        }
        let mut rule = rule.clone();
        if rule.status == RuleStatus::Rejected {
            rejected.push(rule);
        } else {
            rule.status = RuleStatus::Accepted;
            accepted.push(rule);
        }
    }
    (accepted, rejected)
}

/// Teacher over the unlabeled pool minus `labeled`, then the student on the
/// labels plus teacher soft labels. Early stopping is disabled when the corpus
/// has no validation split.
pub fn train_pair(
    corpus: &Corpus,
    index: &FeatureIndex,
    labeled: &[(usize, Label)],
    rules: &[Rule],
    teacher: TeacherKind,
    hyper: &StudentHyper,
) -> Result<(TeacherOutput, StudentModel)> {
    let labeled_set: HashSet<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let pool: Vec<usize> = corpus
        .split(Split::Unlabeled)
        .iter()
        .copied()
        .filter(|i| !labeled_set.contains(i))
        .collect();
    let matrix = build_label_matrix(rules, index, &pool);
    let output = teacher.build().fit(&matrix, corpus.num_classes());
    let gold = SoftDataset::from_labels(labeled.iter().copied(), corpus.num_classes());
    let weak = SoftDataset::from_teacher(&output, |i| labeled_set.contains(&i));
    let mut hyper = hyper.clone();
    if corpus.split(Split::Validation).is_empty() {
        hyper.early_stop_patience = None;
    }
    let student = train(corpus, &gold, &weak, &hyper)?;
    Ok((output, student))
}

/// Non-interactive pipeline on the initial labels and rules.
pub fn run_wsl(
    corpus: &Corpus,
    index: &FeatureIndex,
    rules: &[Rule],
    config: &SessionConfig,
) -> Result<(TeacherOutput, StudentModel)> {
    let labeled = initial_labels(corpus);
    let (accepted, _) = normalize_initial_rules(rules);
    train_pair(corpus, index, &labeled, &accepted, config.teacher, &config.student_hyper())
}

fn initial_labels(corpus: &Corpus) -> Vec<(usize, Label)> {
    corpus
        .split(Split::Labeled)
        .iter()
        .filter_map(|&i| corpus.instance(i).gold_label.map(|l| (i, l)))
        .collect()
}

fn metric_row(
    corpus: &Corpus,
    iteration: usize,
    labeled: usize,
    accepted: usize,
    rejected: usize,
    spent: f64,
    teacher: &TeacherOutput,
    student: &StudentModel,
) -> MetricRow {
    MetricRow {
        iteration,
        labeled,
        accepted_rules: accepted,
        rejected_rules: rejected,
        spent,
        teacher_coverage: teacher.len(),
        validation_f1: student.macro_f1_on(corpus, corpus.split(Split::Validation)),
        test_f1: student.macro_f1_on(corpus, corpus.split(Split::Test)),
    }
}

/// Instance selection over the unlabeled pool, shared by the interactive
/// engine and the standalone active-learning loop.
#[derive(Debug, Clone)]
pub struct Selector {
    kind: SamplerKind,
    pool: Vec<usize>,
    queried: Vec<bool>,
    tree: Option<ClusterTree>,
    state: Option<SamplerState>,
    rng: ChaCha8Rng,
}

impl Selector {
    pub fn new(corpus: &Corpus, kind: SamplerKind, seed: u64) -> Result<Self> {
        let pool = corpus.split(Split::Unlabeled).to_vec();
        let (tree, state) = if kind == SamplerKind::Hierarchical {
            let points: Vec<(usize, &[f64])> =
                pool.iter().map(|&i| (i, corpus.instance(i).embedding.as_slice())).collect();
            let tree = build_hierarchy(&points)?;
            let state = SamplerState::new(&tree, corpus.num_classes(), seed ^ SAMPLER_STREAM);
            (Some(tree), Some(state))
        } else {
            (None, None)
        };
        Ok(Selector {
            kind,
            queried: vec![false; pool.len()],
            pool,
            tree,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_STREAM),
        })
    }

    pub fn tree(&self) -> Option<&ClusterTree> {
        self.tree.as_ref()
    }

    /// Unqueried pool positions, ascending.
    pub fn open(&self) -> Vec<usize> {
        self.pool
            .iter()
            .zip(&self.queried)
            .filter(|(_, q)| !**q)
            .map(|(&p, _)| p)
            .collect()
    }

    pub fn select(&mut self, corpus: &Corpus, student: &StudentModel, k: usize) -> Result<Vec<usize>> {
        let open = self.open();
        if k == 0 || open.is_empty() {
            return Ok(Vec::new());
        }
        let picks = match self.kind {
            SamplerKind::Random => random_select_with(&open, k, &mut self.rng),
            SamplerKind::Uncertainty => uncertainty_select(&student.predict_proba(corpus, &open)?, k),
            SamplerKind::Hierarchical => {
                let soft = student.predict_proba(corpus, &open)?;
                let tree = self.tree.as_ref().expect("hierarchical selector has a tree");
                select_batch(tree, self.state.as_mut().expect("hierarchical selector has state"), &soft, k)?
            }
        };
        for &p in &picks {
            let slot = self.pool.binary_search(&p).expect("selected from the pool");
            self.queried[slot] = true;
        }
        Ok(picks)
    }
}

#[derive(Debug, Clone)]
struct Issued {
    query: PendingQuery,
    cost: f64,
}

/// State machine for one session; drive it with [`Engine::answer`].
pub struct Engine {
    corpus: Arc<Corpus>,
    index: Arc<FeatureIndex>,
    config: SessionConfig,
    selector: Selector,
    labeled: BTreeMap<usize, Label>,
    /// Labels known when the current iteration started; used for mining.
    known_at_start: Vec<Option<Label>>,
    rules: Vec<Rule>,
    rejected: Vec<Rule>,
    known_keys: HashSet<RuleKey>,
    staged_labels: Vec<(usize, Label)>,
    staged_rules: Vec<Rule>,
    pending: Vec<Issued>,
    answered: HashMap<String, Answer>,
    budget: Budget,
    iteration: usize,
    next_query: u64,
    log: Vec<QueryLogEntry>,
    metrics: Vec<MetricRow>,
    status: SessionStatus,
    student: Option<StudentModel>,
    teacher: Option<TeacherOutput>,
}

impl Engine {
    /// Validates the configuration, builds the hierarchy and opens the first iteration.
    pub fn new(corpus: Arc<Corpus>, index: Arc<FeatureIndex>, rules: &[Rule], config: SessionConfig) -> Result<Self> {
        config.validate()?;
        if corpus.split(Split::Labeled).is_empty() {
            return Err(Error::Session("the corpus has no labeled instances".into()));
        }
        let selector = Selector::new(&corpus, config.sampler, config.seed)?;
        let (accepted, rejected) = normalize_initial_rules(rules);
        let known_keys = accepted.iter().chain(&rejected).map(Rule::key).collect();
        let labeled: BTreeMap<usize, Label> = initial_labels(&corpus).into_iter().collect();
        let budget = Budget::new(config.budget, config.cost_instance, config.cost_rule);
        let mut engine = Engine {
            known_at_start: vec![None; corpus.len()],
            corpus,
            index,
            config,
            selector,
            labeled,
            rules: accepted,
            rejected,
            known_keys,
            staged_labels: Vec::new(),
            staged_rules: Vec::new(),
            pending: Vec::new(),
            answered: HashMap::new(),
            budget,
            iteration: 0,
            next_query: 0,
            log: Vec::new(),
            metrics: Vec::new(),
            status: SessionStatus::AwaitingAnswers,
            student: None,
            teacher: None,
        };
        engine.start_iteration()?;
        Ok(engine)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn is_terminated(&self) -> bool {
        matches!(self.status, SessionStatus::Terminated(_))
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[QueryLogEntry] {
        &self.log
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    /// Accepted rules, initial ones first.
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rejected_rules(&self) -> &[Rule] {
        &self.rejected
    }

    pub fn labeled(&self) -> &BTreeMap<usize, Label> {
        &self.labeled
    }

    pub fn student(&self) -> Option<&StudentModel> {
        self.student.as_ref()
    }

    pub fn teacher_output(&self) -> Option<&TeacherOutput> {
        self.teacher.as_ref()
    }

    pub fn tree(&self) -> Option<&ClusterTree> {
        self.selector.tree()
    }

    /// Pending queries in issue order.
    pub fn pending(&self) -> Vec<PendingQuery> {
        self.pending.iter().map(|p| p.query.clone()).collect()
    }

    /// The query a simulated expert answers next: the earliest pending rule
    /// query, else the earliest pending instance query.
    pub fn next_for_simulation(&self) -> Option<PendingQuery> {
        self.pending
            .iter()
            .find(|p| p.query.kind == QueryKind::Rule)
            .or_else(|| self.pending.first())
            .map(|p| p.query.clone())
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            status: self.status.to_string(),
            terminated: self.is_terminated(),
            iteration: self.iteration,
            budget: self.budget.clone(),
            remaining: self.budget.remaining(),
            labeled: self.labeled.len() + self.staged_labels.len(),
            accepted_rules: self.rules.len() + self.staged_rules.iter().filter(|r| r.status == RuleStatus::Accepted).count(),
            rejected_rules: self.rejected.len()
                + self.staged_rules.iter().filter(|r| r.status == RuleStatus::Rejected).count(),
            pending: self.pending.len(),
            metrics: self.metrics.clone(),
        }
    }

    /// Labels, rules and spend including answers staged in the open iteration.
    pub fn digest(&self) -> StateDigest {
        let mut labeled: Vec<(String, Label)> = self
            .labeled
            .iter()
            .map(|(&i, &l)| (i, l))
            .chain(self.staged_labels.iter().copied())
            .map(|(i, l)| (self.corpus.instance(i).id.clone(), l))
            .collect();
        labeled.sort();
        let mut accepted = self.rules.clone();
        let mut rejected = self.rejected.clone();
        for r in &self.staged_rules {
            match r.status {
                RuleStatus::Rejected => rejected.push(r.clone()),
                _ => accepted.push(r.clone()),
            }
        }
        accepted.sort_by(|a, b| a.id.cmp(&b.id));
        rejected.sort_by(|a, b| a.id.cmp(&b.id));
        StateDigest {
            labeled,
            accepted,
            rejected,
            spent: self.budget.spent,
        }
    }

    fn retrain(&mut self) -> Result<()> {
        let labeled: Vec<(usize, Label)> = self.labeled.iter().map(|(&i, &l)| (i, l)).collect();
        let (teacher, student) = train_pair(
            &self.corpus,
            &self.index,
            &labeled,
            &self.rules,
            self.config.teacher,
            &self.config.student_hyper(),
        )?;
        self.metrics.push(metric_row(
            &self.corpus,
            self.iteration,
            self.labeled.len(),
            self.rules.len(),
            self.rejected.len(),
            self.budget.spent,
            &teacher,
            &student,
        ));
        self.teacher = Some(teacher);
        self.student = Some(student);
        Ok(())
    }

    fn finish(&mut self, reason: Termination) -> Result<()> {
        self.retrain()?;
        self.status = SessionStatus::Terminated(reason);
        log::info!("session {} after {} iterations, spent {}", self.status, self.iteration, self.budget.spent);
        Ok(())
    }

    fn start_iteration(&mut self) -> Result<()> {
        if !self.budget.can_afford(self.config.cost_instance) {
            return self.finish(Termination::BudgetExhausted);
        }
        if self.selector.open().is_empty() {
            return self.finish(Termination::PoolExhausted);
        }
        self.retrain()?;
        let k = self.config.batch.min(self.budget.affordable(self.config.cost_instance));
        let student = self.student.as_ref().expect("trained above");
        let picks = self.selector.select(&self.corpus, student, k)?;
        if picks.is_empty() {
            self.status = SessionStatus::Terminated(Termination::PoolExhausted);
            return Ok(());
        }
        self.known_at_start = vec![None; self.corpus.len()];
        for (&i, &l) in &self.labeled {
            self.known_at_start[i] = Some(l);
        }
        for pos in picks {
            self.issue(QueryKind::Instance, pos, None, None);
        }
        Ok(())
    }

    fn issue(&mut self, kind: QueryKind, position: usize, rule: Option<Rule>, stats: Option<RuleStats>) {
        self.next_query += 1;
        let cost = match kind {
            QueryKind::Instance => self.config.cost_instance,
            QueryKind::Rule => self.config.cost_rule,
        };
        self.budget.reserved += cost;
        let inst = self.corpus.instance(position);
        let covered_sample = match &rule {
            Some(r) => self
                .index
                .covered(r.predicate())
                .into_iter()
                .map(|i| i as usize)
                .filter(|&i| i != position && self.corpus.instance(i).split == Split::Unlabeled)
                .take(COVERED_SAMPLE)
                .map(|i| SampleInstance {
                    id: self.corpus.instance(i).id.clone(),
                    text: self.corpus.instance(i).text.clone(),
                })
                .collect(),
            None => Vec::new(),
        };
        let query = PendingQuery {
            query_id: format!("q{}", self.next_query),
            kind,
            iteration: self.iteration,
            issued_at: self.next_query,
            instance_id: inst.id.clone(),
            text: inst.text.clone(),
            rendered_predicate: rule.as_ref().map(Rule::render_predicate),
            rule,
            stats,
            covered_sample,
            position,
        };
        self.pending.push(Issued { query, cost });
    }

    /// Records an answer. Resubmitting an identical answer is acknowledged
    /// without effect; a conflicting one is an error.
    pub fn answer(&mut self, query_id: &str, answer: Answer, timestamp: u64) -> Result<AnswerAck> {
        if self.check_answer(query_id, answer)? {
            return Ok(self.ack(query_id, true));
        }
        let slot = self
            .pending
            .iter()
            .position(|p| p.query.query_id == query_id)
            .expect("checked above");
        let kind = self.pending[slot].query.kind;
        let issued = self.pending.remove(slot);
        self.budget.reserved -= issued.cost;
        if self.budget.reserved.abs() < COST_EPS {
            self.budget.reserved = 0.0;
        }
        self.budget.spent += issued.cost;
        self.answered.insert(query_id.to_string(), answer);
        let query = issued.query;
        let mut entry = QueryLogEntry {
            seq: self.log.len() as u64,
            iteration: self.iteration,
            query_id: query.query_id.clone(),
            kind,
            subject_id: query.instance_id.clone(),
            anchor_id: query.instance_id.clone(),
            answer,
            cost: issued.cost,
            timestamp,
            rule: None,
        };

        match answer {
            Answer::Label(label) => {
                self.log.push(entry);
                self.staged_labels.push((query.position, label));
                self.propose_rules(query.position, label);
            }
            Answer::Accept | Answer::Reject => {
                let mut rule = query.rule.expect("rule query carries its rule");
                rule.status = if answer == Answer::Accept {
                    RuleStatus::Accepted
                } else {
                    RuleStatus::Rejected
                };
                entry.subject_id = rule.id.clone();
                entry.rule = Some(rule.clone());
                self.log.push(entry);
                self.staged_rules.push(rule);
            }
        }

        if self.pending.is_empty() {
            self.close_iteration()?;
        }
        Ok(self.ack(query_id, false))
    }

    /// Validates an answer without applying it. Returns `true` when the
    /// identical answer was already recorded.
    pub fn check_answer(&self, query_id: &str, answer: Answer) -> Result<bool> {
        if let Some(previous) = self.answered.get(query_id) {
            if *previous == answer {
                return Ok(true);
            }
            return Err(Error::AlreadyAnswered(query_id.to_string()));
        }
        if let SessionStatus::Terminated(_) = self.status {
            return Err(Error::Terminated(self.status.to_string()));
        }
        let query = self
            .pending
            .iter()
            .find(|p| p.query.query_id == query_id)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))?;
        let kind = query.query.kind;
        if answer.kind() != kind {
            return Err(Error::AnswerMismatch {
                query_id: query_id.to_string(),
                expected: match kind {
                    QueryKind::Instance => "a class label".into(),
                    QueryKind::Rule => "accept or reject".into(),
                },
            });
        }
        if let Answer::Label(l) = answer {
            if !l.in_range(self.corpus.num_classes()) {
                return Err(Error::AnswerMismatch {
                    query_id: query_id.to_string(),
                    expected: format!("a class label in 1..={}", self.corpus.num_classes()),
                });
            }
        }
        Ok(false)
    }

    fn ack(&self, query_id: &str, duplicate: bool) -> AnswerAck {
        AnswerAck {
            query_id: query_id.to_string(),
            budget: self.budget.clone(),
            terminated: self.is_terminated(),
            status: self.status.to_string(),
            duplicate,
        }
    }

    fn propose_rules(&mut self, anchor: usize, label: Label) {
        let beta = self.config.rulegen.beta;
        if beta == 0 || !self.budget.can_afford(self.config.cost_rule) {
            return;
        }
        let ctx = MiningContext {
            corpus: &self.corpus,
            index: &self.index,
            known: &self.known_at_start,
        };
        let candidates = extract_candidates(anchor, label, ctx, &self.config.rulegen, &self.known_keys);
        for c in select_for_query(&candidates, label, beta) {
            if !self.budget.can_afford(self.config.cost_rule) {
                break;
            }
            self.known_keys.insert(c.rule.key());
            self.issue(QueryKind::Rule, anchor, Some(c.rule), Some(c.stats));
        }
    }

    fn close_iteration(&mut self) -> Result<()> {
        for (pos, label) in self.staged_labels.drain(..) {
            self.labeled.insert(pos, label);
        }
        for rule in self.staged_rules.drain(..) {
            match rule.status {
                RuleStatus::Rejected => self.rejected.push(rule),
                _ => self.rules.push(rule),
            }
        }
        self.iteration += 1;
        self.start_iteration()
    }
}

/// Answers queries on behalf of an expert.
pub trait Oracle {
    fn answer_instance(&mut self, corpus: &Corpus, position: usize) -> Result<Label>;
    fn answer_rule(&mut self, rule: &Rule, anchor: usize) -> Result<bool>;
}

/// Gold labels for instances; accepts a rule iff its accuracy on the
/// unlabeled instances it covers is strictly above `t_oracle`.
pub struct SimulatedOracle {
    corpus: Arc<Corpus>,
    index: Arc<FeatureIndex>,
    t_oracle: f64,
}

impl SimulatedOracle {
    pub fn new(corpus: Arc<Corpus>, index: Arc<FeatureIndex>, t_oracle: f64) -> Result<Self> {
        if let Some(&i) = corpus
            .split(Split::Unlabeled)
            .iter()
            .find(|&&i| corpus.instance(i).gold_label.is_none())
        {
            return Err(Error::Oracle(format!(
                "simulation needs gold labels on the unlabeled split; {:?} has none",
                corpus.instance(i).id
            )));
        }
        Ok(SimulatedOracle { corpus, index, t_oracle })
    }

    /// `(correct, covered)` over unlabeled instances.
    pub fn rule_counts(&self, rule: &Rule) -> (usize, usize) {
        let mut covered = 0;
        let mut correct = 0;
        for i in self.index.covered(rule.predicate()) {
            let inst = self.corpus.instance(i as usize);
            if inst.split == Split::Unlabeled {
                covered += 1;
                if inst.gold_label == Some(rule.label) {
                    correct += 1;
                }
            }
        }
        (correct, covered)
    }

    pub fn judge(&self, rule: &Rule) -> bool {
        let (correct, covered) = self.rule_counts(rule);
        accepts(correct, covered, self.t_oracle)
    }
}

/// `correct / covered > t_oracle`, rejecting when nothing is covered. At
/// `t_oracle = 1` only perfectly precise rules pass.
pub fn accepts(correct: usize, covered: usize, t_oracle: f64) -> bool {
    if covered == 0 {
        return false;
    }
    if t_oracle >= 1.0 {
        return correct == covered;
    }
    correct as f64 > t_oracle * covered as f64
}

impl Oracle for SimulatedOracle {
    fn answer_instance(&mut self, corpus: &Corpus, position: usize) -> Result<Label> {
        corpus
            .instance(position)
            .gold_label
            .ok_or_else(|| Error::Oracle(format!("no gold label for {:?}", corpus.instance(position).id)))
    }

    fn answer_rule(&mut self, rule: &Rule, _anchor: usize) -> Result<bool> {
        Ok(self.judge(rule))
    }
}

/// Answers pending queries with `oracle` until the session terminates.
/// Timestamps are the log sequence numbers.
pub fn drive(engine: &mut Engine, oracle: &mut dyn Oracle) -> Result<()> {
    while let Some(query) = engine.next_for_simulation() {
        let answer = match query.kind {
            QueryKind::Instance => Answer::Label(oracle.answer_instance(engine.corpus(), query.position)?),
            QueryKind::Rule => {
                let rule = query.rule.as_ref().expect("rule query carries its rule");
                if oracle.answer_rule(rule, query.position)? {
                    Answer::Accept
                } else {
                    Answer::Reject
                }
            }
        };
        let ts = engine.log().len() as u64;
        engine.answer(&query.query_id, answer, ts)?;
    }
    Ok(())
}

/// Runs a full session against `oracle` and returns the terminated engine.
pub fn run_session(
    config: SessionConfig,
    corpus: Arc<Corpus>,
    index: Arc<FeatureIndex>,
    rules: &[Rule],
    oracle: &mut dyn Oracle,
) -> Result<Engine> {
    let mut engine = Engine::new(corpus, index, rules, config)?;
    drive(&mut engine, oracle)?;
    Ok(engine)
}

/// Folds a query log onto the initial labels and rules.
pub fn replay(corpus: &Corpus, initial_rules: &[Rule], log: &[QueryLogEntry]) -> Result<StateDigest> {
    let mut labeled: BTreeMap<String, Label> = initial_labels(corpus)
        .into_iter()
        .map(|(i, l)| (corpus.instance(i).id.clone(), l))
        .collect();
    let (mut accepted, mut rejected) = normalize_initial_rules(initial_rules);
    let mut spent = 0.0;
    for entry in log {
        spent += entry.cost;
        match (entry.answer, &entry.rule) {
            (Answer::Label(l), _) => {
                labeled.insert(entry.subject_id.clone(), l);
            }
            (Answer::Accept, Some(rule)) => accepted.push(rule.clone()),
            (Answer::Reject, Some(rule)) => rejected.push(rule.clone()),
            (_, None) => {
                return Err(Error::Session(format!("log entry {} lacks its rule", entry.seq)));
            }
        }
    }
    accepted.sort_by(|a, b| a.id.cmp(&b.id));
    rejected.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(StateDigest {
        labeled: labeled.into_iter().collect(),
        accepted,
        rejected,
        spent,
    })
}

/// Result of the label-only loop.
#[derive(Debug, Clone)]
pub struct ActiveLearningRun {
    /// `(iteration, instance id, label)` in query order.
    pub queries: Vec<(usize, String, Label)>,
    pub spent: f64,
    pub student: StudentModel,
    pub metrics: Vec<MetricRow>,
}

/// Pool-based active learning with the configured sampler: per iteration,
/// retrain, pick a batch, label it. Rules are used by the teacher but never
/// mined or queried.
pub fn run_active_learning(
    corpus: &Corpus,
    index: &FeatureIndex,
    rules: &[Rule],
    config: &SessionConfig,
    oracle: &mut dyn Oracle,
) -> Result<ActiveLearningRun> {
    config.validate()?;
    let (accepted, rejected) = normalize_initial_rules(rules);
    let hyper = config.student_hyper();
    let mut selector = Selector::new(corpus, config.sampler, config.seed)?;
    let mut labeled: BTreeMap<usize, Label> = initial_labels(corpus).into_iter().collect();
    let mut queries = Vec::new();
    let mut metrics = Vec::new();
    let mut spent = 0.0;
    let mut iteration = 0;
    loop {
        let budget = Budget {
            spent,
            ..Budget::new(config.budget, config.cost_instance, config.cost_rule)
        };
        let pairs: Vec<(usize, Label)> = labeled.iter().map(|(&i, &l)| (i, l)).collect();
        let stop = !budget.can_afford(config.cost_instance) || selector.open().is_empty();
        let (teacher, student) = train_pair(corpus, index, &pairs, &accepted, config.teacher, &hyper)?;
        metrics.push(metric_row(corpus, iteration, pairs.len(), accepted.len(), rejected.len(), spent, &teacher, &student));
        if stop {
            return Ok(ActiveLearningRun { queries, spent, student, metrics });
        }
        let k = config.batch.min(budget.affordable(config.cost_instance));
        let picks = selector.select(corpus, &student, k)?;
        for pos in picks {
            let label = oracle.answer_instance(corpus, pos)?;
            spent += config.cost_instance;
            queries.push((iteration, corpus.instance(pos).id.clone(), label));
            labeled.insert(pos, label);
        }
        iteration += 1;
    }
}
