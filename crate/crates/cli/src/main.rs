use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};
use teachloop::analysis::{
    fit_pc_weights, mean_std, parse_pc_records_tsv, pc_records_tsv, sweep_teachers, weights_tsv, PCRecord,
};
use teachloop::api::{CorpusEntry, Server, Service};
use teachloop::corpus::{infer_num_classes, load_corpus_with_templates, Corpus, Split, TemplateSet};
use teachloop::features::FeatureIndex;
use teachloop::rulegen::{extract_candidates, select_for_query, MiningContext};
use teachloop::rules::{labeled_view, read_rules, rules_to_records, Rule};
use teachloop::sampling::SamplerKind;
use teachloop::session::{metrics_tsv, run_session, Engine, SessionConfig, SimulatedOracle};
use teachloop::teacher::TeacherKind;

const ROOT_ENV: &str = "TEACHLOOP_ARTIFACT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "teachloop", version, about = "Interactive rule and label acquisition for weak supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run sessions against gold labels and write per-seed artifacts.
    Simulate(SimulateArgs),
    /// Train teacher/student pairs on rule subsets and fit precision/coverage weights.
    Sweep(SweepArgs),
    /// Fit precision/coverage weights to an existing records table.
    Analyze(AnalyzeArgs),
    /// Host the session service on a TCP port.
    Serve(ServeArgs),
    /// Mine candidate rules anchored on the labeled split.
    ExtractRules(ExtractArgs),
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Line-delimited instance records.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of classes; inferred from the largest gold label when omitted.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Feature sidecar files, applied in order.
    #[arg(long)]
    sidecar: Vec<PathBuf>,
    /// Prompt template declarations (JSON).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Maximum n-gram order extracted from text; 0 disables extraction.
    #[arg(long, default_value_t = 3)]
    ngrams: usize,
}

#[derive(Args, Debug, Clone)]
struct SessionArgs {
    /// Session config JSON; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total query budget [default: 100].
    #[arg(long)]
    budget: Option<f64>,
    /// Cost of an instance query [default: 1].
    #[arg(long)]
    ti: Option<f64>,
    /// Cost of a rule query [default: 1].
    #[arg(long)]
    tr: Option<f64>,
    /// Rules queried per labeled anchor [default: 1].
    #[arg(long)]
    beta: Option<usize>,
    /// Instances selected per iteration [default: 10].
    #[arg(long)]
    batch: Option<usize>,
    /// Minimum unlabeled coverage of a candidate rule [default: 100].
    #[arg(long)]
    tcov: Option<usize>,
    /// Minimum labeled precision of a candidate rule [default: 0.75].
    #[arg(long)]
    tprec: Option<f64>,
    /// Maximum predicate length [default: 3].
    #[arg(long)]
    tlen: Option<usize>,
    /// Accuracy a rule must exceed to be accepted by the simulated expert [default: 0.75].
    #[arg(long)]
    toracle: Option<f64>,
    /// majority_vote (mv) or dawid_skene (ds) [default: dawid_skene].
    #[arg(long)]
    teacher: Option<String>,
    /// hierarchical, uncertainty or random [default: hierarchical].
    #[arg(long)]
    sampler: Option<String>,
    /// Weight of the weak-label loss [default: 1].
    #[arg(long)]
    lambda: Option<f64>,
}

impl SessionArgs {
    fn resolve(&self) -> Result<SessionConfig> {
        let mut c: SessionConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SessionConfig::default(),
        };
        if let Some(v) = self.budget {
            c.budget = v;
        }
        if let Some(v) = self.ti {
            c.cost_instance = v;
        }
        if let Some(v) = self.tr {
            c.cost_rule = v;
        }
        if let Some(v) = self.beta {
            c.rulegen.beta = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        if let Some(v) = self.tcov {
            c.rulegen.t_cov = v;
        }
        if let Some(v) = self.tprec {
            c.rulegen.t_prec = v;
        }
        if let Some(v) = self.tlen {
            c.rulegen.t_len = v;
        }
        if let Some(v) = self.toracle {
            c.t_oracle = v;
        }
        if let Some(v) = &self.teacher {
            c.teacher = v.parse::<TeacherKind>()?;
        }
        if let Some(v) = &self.sampler {
            c.sampler = v.parse::<SamplerKind>()?;
        }
        if let Some(v) = self.lambda {
            c.student.lambda = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    session: SessionArgs,
    /// Initial rule file.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Artifact directory [default: $TEACHLOOP_ARTIFACT_ROOT/simulate].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Expert rule file.
    #[arg(long)]
    rules: PathBuf,
    /// Rule fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    fractions: Vec<f64>,
    /// Teachers, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "majority_vote,dawid_skene")]
    teachers: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Artifact directory [default: $TEACHLOOP_ARTIFACT_ROOT/sweep].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Records table written by `sweep`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Artifact directory [default: $TEACHLOOP_ARTIFACT_ROOT/analyze].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// Session root [default: $TEACHLOOP_ARTIFACT_ROOT].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Rules to exclude from the output.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    tcov: usize,
    #[arg(long, default_value_t = 0.75)]
    tprec: f64,
    #[arg(long, default_value_t = 3)]
    tlen: usize,
    /// Keep only the top rules per anchor; all candidates when omitted.
    #[arg(long)]
    beta: Option<usize>,
    /// Artifact directory [default: $TEACHLOOP_ARTIFACT_ROOT/extract-rules].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn artifact_root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from)
}

fn out_dir(out: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| artifact_root().join(name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_echo(dir: &Path, echo: Value) -> Result<()> {
    write(&dir.join("config.json"), &(serde_json::to_string_pretty(&echo)? + "\n"))
}

fn load(args: &CorpusArgs) -> Result<(Arc<Corpus>, Arc<FeatureIndex>)> {
    let k = match args.num_classes {
        Some(k) => k,
        None => infer_num_classes(&args.corpus)?,
    };
    let templates = match &args.templates {
        Some(p) => TemplateSet::load(p)?,
        None => TemplateSet::default(),
    };
    let mut corpus = load_corpus_with_templates(&args.corpus, k, templates)
        .with_context(|| format!("loading {}", args.corpus.display()))?;
    if args.ngrams > 0 {
        corpus.add_ngram_features(args.ngrams);
    }
    for sidecar in &args.sidecar {
        let added = corpus
            .ingest_sidecar(sidecar)
            .with_context(|| format!("ingesting {}", sidecar.display()))?;
        log::info!("{}: {added} new atoms", sidecar.display());
    }
    let index = FeatureIndex::build(&corpus);
    Ok((Arc::new(corpus), Arc::new(index)))
}

fn load_rules(path: &Option<PathBuf>, k: usize) -> Result<Vec<Rule>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let import = read_rules(path, k).with_context(|| format!("reading {}", path.display()))?;
    if !import.unsupported.is_empty() {
        log::warn!("{}: {} unsupported rules skipped", path.display(), import.unsupported.len());
    }
    Ok(import.rules)
}

fn corpus_echo(args: &CorpusArgs, k: usize) -> Value {
    json!({
        "corpus": args.corpus,
        "num_classes": k,
        "sidecars": args.sidecar,
        "templates": args.templates,
        "ngrams": args.ngrams,
    })
}

fn fmt_f1(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = args.session.resolve()?;
    let (corpus, index) = load(&args.corpus)?;
    let rules = load_rules(&args.rules, corpus.num_classes())?;
    let dir = out_dir(&args.out, "simulate")?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed.wrapping_add(i)).collect();
    write_echo(
        &dir,
        json!({
            "command": "simulate",
            "input": corpus_echo(&args.corpus, corpus.num_classes()),
            "rules": args.rules,
            "seeds": seeds,
            "session": base,
        }),
    )?;

    let runs: Vec<Result<Engine>> = seeds
        .par_iter()
        .map(|&seed| {
            let config = SessionConfig { seed, ..base.clone() };
            let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), config.t_oracle)?;
            Ok(run_session(config, corpus.clone(), index.clone(), &rules, &mut oracle)?)
        })
        .collect();

    let mut table = String::from("seed\tqueries\tspent\tlabeled\taccepted_rules\trejected_rules\ttest_f1\ttest_f1_std\n");
    let mut f1s = Vec::new();
    for (&seed, run) in seeds.iter().zip(runs) {
        let engine = run.with_context(|| format!("seed {seed}"))?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        write_session(&seed_dir, &engine)?;
        let last = engine.metrics().last().cloned();
        let test_f1 = last.as_ref().and_then(|m| m.test_f1);
        if let Some(f) = test_f1 {
            f1s.push(f);
        }
        let digest = engine.digest();
        table.push_str(&format!(
            "{seed}\t{}\t{}\t{}\t{}\t{}\t{}\tNA\n",
            engine.log().len(),
            engine.budget().spent,
            digest.labeled.len(),
            digest.accepted.len(),
            digest.rejected.len(),
            fmt_f1(test_f1)
        ));
    }
    let (mean, std) = if f1s.is_empty() { (None, None) } else {
        let (m, s) = mean_std(&f1s);
        (Some(m), Some(s))
    };
    table.push_str(&format!("aggregate\tNA\tNA\tNA\tNA\tNA\t{}\t{}\n", fmt_f1(mean), fmt_f1(std)));
    write(&dir.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_session(dir: &Path, engine: &Engine) -> Result<()> {
    let mut log = String::new();
    for entry in engine.log() {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    write(&dir.join("query_log.jsonl"), &log)?;
    write(&dir.join("metrics.tsv"), &metrics_tsv(engine.metrics()))?;
    let digest = engine.digest();
    let mut rules = digest.accepted;
    rules.extend(digest.rejected);
    write(&dir.join("rules.jsonl"), &rules_to_records(&rules))?;
    if let Some(student) = engine.student() {
        student.save(dir.join("model.txt"))?;
    }
    Ok(())
}

fn fit_by_teacher(records: &[PCRecord], grid_step: f64) -> Result<String> {
    let mut names: Vec<&str> = records.iter().map(|r| r.teacher.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let mut rows = Vec::new();
    for name in &names {
        let subset: Vec<PCRecord> = records.iter().filter(|r| r.teacher == *name).cloned().collect();
        match fit_pc_weights(&subset, grid_step) {
            Ok(w) => rows.push((name.to_string(), w)),
            Err(e) => log::warn!("skipping fit for {name}: {e}"),
        }
    }
    if names.len() > 1 {
        rows.push(("all".to_string(), fit_pc_weights(records, grid_step)?));
    }
    if rows.is_empty() {
        bail!("no teacher has enough records for a weight fit");
    }
    Ok(weights_tsv(&rows))
}

fn sweep(args: SweepArgs) -> Result<()> {
    let teachers = args
        .teachers
        .iter()
        .map(|t| t.parse::<TeacherKind>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (corpus, index) = load(&args.corpus)?;
    let rules = load_rules(&Some(args.rules.clone()), corpus.num_classes())?;
    if rules.is_empty() {
        bail!("{} contains no usable rules", args.rules.display());
    }
    let dir = out_dir(&args.out, "sweep")?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed.wrapping_add(i)).collect();
    let hyper = teachloop::student::StudentHyper {
        lambda: args.lambda,
        ..Default::default()
    };
    write_echo(
        &dir,
        json!({
            "command": "sweep",
            "input": corpus_echo(&args.corpus, corpus.num_classes()),
            "rules": args.rules,
            "fractions": args.fractions,
            "teachers": teachers,
            "seeds": seeds,
            "grid_step": args.grid_step,
            "student": hyper,
        }),
    )?;
    let records = sweep_teachers(&corpus, &index, &rules, &args.fractions, &teachers, &seeds, &hyper)?;
    write(&dir.join("pc_records.tsv"), &pc_records_tsv(&records))?;
    let weights = fit_by_teacher(&records, args.grid_step)?;
    write(&dir.join("weights.tsv"), &weights)?;
    print!("{weights}");
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let records = parse_pc_records_tsv(&text).with_context(|| format!("parsing {}", args.input.display()))?;
    let dir = out_dir(&args.out, "analyze")?;
    write_echo(
        &dir,
        json!({ "command": "analyze", "input": args.input, "grid_step": args.grid_step }),
    )?;
    let weights = fit_by_teacher(&records, args.grid_step)?;
    write(&dir.join("weights.tsv"), &weights)?;
    print!("{weights}");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let (corpus, index) = load(&args.corpus)?;
    let rules = load_rules(&args.rules, corpus.num_classes())?;
    let root = args.out.clone().unwrap_or_else(artifact_root);
    let service = Service::new(&root)?;
    write_echo(
        &root,
        json!({
            "command": "serve",
            "input": corpus_echo(&args.corpus, corpus.num_classes()),
            "rules": args.rules,
            "host": args.host,
            "port": args.port,
        }),
    )?;
    service.register_corpus("default", CorpusEntry { corpus, index, rules });
    let server = Server::bind((args.host.as_str(), args.port), Arc::new(service))
        .with_context(|| format!("binding {}:{}", args.host, args.port))?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "listening on {}", server.local_addr()?)?;
    stdout.flush()?;
    server.run()?;
    log::info!("server stopped");
    Ok(())
}

fn extract_rules(args: ExtractArgs) -> Result<()> {
    let (corpus, index) = load(&args.corpus)?;
    let params = teachloop::rulegen::RuleGenParams {
        t_cov: args.tcov,
        t_prec: args.tprec,
        t_len: args.tlen,
        beta: args.beta.unwrap_or(usize::MAX),
        ..Default::default()
    };
    params.validate()?;
    let mut existing: HashSet<_> = load_rules(&args.rules, corpus.num_classes())?
        .iter()
        .map(Rule::key)
        .collect();
    let dir = out_dir(&args.out, "extract-rules")?;
    write_echo(
        &dir,
        json!({
            "command": "extract-rules",
            "input": corpus_echo(&args.corpus, corpus.num_classes()),
            "rules": args.rules,
            "t_cov": args.tcov,
            "t_prec": args.tprec,
            "t_len": args.tlen,
            "beta": args.beta,
        }),
    )?;
    let known = labeled_view(&corpus);
    let ctx = MiningContext {
        corpus: &corpus,
        index: &index,
        known: &known,
    };
    let mut out = Vec::new();
    for &anchor in corpus.split(Split::Labeled) {
        let Some(label) = corpus.instance(anchor).gold_label else { continue };
        let candidates = extract_candidates(anchor, label, ctx, &params, &existing);
        for c in select_for_query(&candidates, label, params.beta) {
            if existing.insert(c.rule.key()) {
                out.push(c.rule);
            }
        }
    }
    write(&dir.join("rules.jsonl"), &rules_to_records(&out))?;
    println!("{} rules written to {}", out.len(), dir.join("rules.jsonl").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::Serve(a) => serve(a),
        Command::ExtractRules(a) => extract_rules(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
