use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::json;
use teachloop::api::Client;
use teachloop::corpus::load_corpus;
use teachloop::features::FeatureIndex;
use teachloop::rules::{read_rules, write_rules};
use teachloop::session::{run_active_learning, run_wsl, SessionConfig, SimulatedOracle};
use teachloop::synth::{generate, SynthConfig};
use teachloop::teacher::TeacherKind;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    corpus: PathBuf,
    rules: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = generate(&SynthConfig {
        n_unlabeled: 300,
        labeled_per_class: 6,
        validation_per_class: 6,
        n_test: 60,
        dim: 8,
        n_planted: 8,
        n_noise: 4,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth.corpus.write(&corpus).unwrap();
    let rules = dir.path().join("rules.jsonl");
    write_rules(&rules, &synth.planted_rules()).unwrap();
    Fixture { dir, corpus, rules }
}

fn teachloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teachloop")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulate_args<'a>(f: &'a Fixture, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "simulate",
        "--corpus",
        f.corpus.to_str().unwrap(),
        "--rules",
        f.rules.to_str().unwrap(),
        "--ngrams",
        "0",
        "--tcov",
        "10",
        "--batch",
        "4",
        "--teacher",
        "mv",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    if !extra.contains(&"--budget") {
        args.extend(["--budget", "20"]);
    }
    args
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn config_for(budget: f64, beta: usize) -> SessionConfig {
    let mut c = SessionConfig {
        teacher: TeacherKind::MajorityVote,
        batch: 4,
        budget,
        ..Default::default()
    };
    c.rulegen.t_cov = 10;
    c.rulegen.beta = beta;
    c
}

#[test]
fn simulate_artifacts_are_byte_stable() {
    let f = fixture();
    let a = f.dir.path().join("a");
    let b = f.dir.path().join("b");
    ok(teachloop(&simulate_args(&f, a.to_str().unwrap(), &["--seed", "3"])));
    ok(teachloop(&simulate_args(&f, b.to_str().unwrap(), &["--seed", "3"])));
    let ta = read_tree(&a);
    let tb = read_tree(&b);
    for name in ["config.json", "summary.tsv", "seed-3/query_log.jsonl", "seed-3/metrics.tsv", "seed-3/rules.jsonl", "seed-3/model.txt"] {
        assert!(ta.contains_key(Path::new(name)), "missing {name}");
    }
    assert_eq!(ta, tb);
    let echo: serde_json::Value = serde_json::from_slice(&ta[Path::new("config.json")]).unwrap();
    assert_eq!(echo["session"]["budget"], 20.0);
    assert_eq!(echo["session"]["t_cov"], 10);
}

#[test]
fn seeds_flag_emits_one_row_per_seed_and_an_aggregate() {
    let f = fixture();
    let out = f.dir.path().join("runs");
    let stdout = ok(teachloop(&simulate_args(&f, out.to_str().unwrap(), &["--seeds", "3", "--seed", "7"])));
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("seed\t"));
    for (row, seed) in rows[1..4].iter().zip(7..) {
        assert!(row.starts_with(&format!("{seed}\t")));
        assert!(out.join(format!("seed-{seed}")).is_dir());
    }
    assert!(rows[4].starts_with("aggregate\t"));
    assert_eq!(fs::read_to_string(out.join("summary.tsv")).unwrap(), stdout);
}

#[test]
fn zero_budget_matches_weak_supervision_baseline() {
    let f = fixture();
    let out = f.dir.path().join("wsl");
    ok(teachloop(&simulate_args(&f, out.to_str().unwrap(), &["--budget", "0"])));
    assert_eq!(fs::read_to_string(out.join("seed-0/query_log.jsonl")).unwrap(), "");

    let corpus = load_corpus(&f.corpus, 2).unwrap();
    let index = FeatureIndex::build(&corpus);
    let rules = read_rules(&f.rules, 2).unwrap().rules;
    let (_, student) = run_wsl(&corpus, &index, &rules, &config_for(0.0, 1)).unwrap();
    assert_eq!(fs::read_to_string(out.join("seed-0/model.txt")).unwrap(), student.to_text());
}

#[test]
fn zero_beta_matches_active_learning() {
    let f = fixture();
    let out = f.dir.path().join("al");
    ok(teachloop(&simulate_args(&f, out.to_str().unwrap(), &["--beta", "0"])));
    let logged: Vec<String> = fs::read_to_string(out.join("seed-0/query_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["subject_id"].as_str().unwrap().to_string())
        .collect();

    let corpus = std::sync::Arc::new(load_corpus(&f.corpus, 2).unwrap());
    let index = std::sync::Arc::new(FeatureIndex::build(&corpus));
    let rules = read_rules(&f.rules, 2).unwrap().rules;
    let mut oracle = SimulatedOracle::new(corpus.clone(), index.clone(), 0.75).unwrap();
    let run = run_active_learning(&corpus, &index, &rules, &config_for(20.0, 0), &mut oracle).unwrap();
    let expected: Vec<String> = run.queries.into_iter().map(|(_, id, _)| id).collect();
    assert_eq!(logged.len(), 20);
    assert_eq!(logged, expected);
}

#[test]
fn artifact_root_comes_from_environment() {
    let f = fixture();
    let root = f.dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_teachloop"))
        .args(["simulate", "--corpus", f.corpus.to_str().unwrap(), "--ngrams", "0", "--budget", "0"])
        .env("TEACHLOOP_ARTIFACT_ROOT", &root)
        .output()
        .unwrap();
    ok(out);
    assert!(root.join("simulate/config.json").is_file());
    assert!(root.join("simulate/seed-0/metrics.tsv").is_file());
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let f = fixture();
    let out = teachloop(&["simulate", "--corpus", f.corpus.to_str().unwrap(), "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));

    let out = teachloop(&["simulate", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = teachloop(&["simulate", "--corpus", f.corpus.to_str().unwrap(), "--toracle", "1.5"]);
    assert!(!out.status.success());

    let empty = f.dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = teachloop(&["sweep", "--corpus", f.corpus.to_str().unwrap(), "--rules", empty.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn sweep_writes_records_and_grid_weights_and_analyze_refits() {
    let f = fixture();
    let out = f.dir.path().join("sweep");
    let base = [
        "sweep",
        "--corpus",
        f.corpus.to_str().unwrap(),
        "--rules",
        f.rules.to_str().unwrap(),
        "--ngrams",
        "0",
    ];

    let single = f.dir.path().join("single");
    let mut args = base.to_vec();
    args.extend(["--fractions", "1.0", "--teachers", "mv", "--grid-step", "0.5", "--out", single.to_str().unwrap()]);
    // One record cannot support a fit.
    assert!(!teachloop(&args).status.success());
    assert_eq!(fs::read_to_string(single.join("pc_records.tsv")).unwrap().lines().count(), 2);

    let mut args = base.to_vec();
    args.extend([
        "--fractions",
        "0.25,0.5,1.0",
        "--teachers",
        "mv,ds",
        "--seeds",
        "2",
        "--grid-step",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    let stdout = ok(teachloop(&args));
    let records = fs::read_to_string(out.join("pc_records.tsv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 3 * 2 * 2);
    let weights = fs::read_to_string(out.join("weights.tsv")).unwrap();
    assert_eq!(weights, stdout);
    let rows: Vec<Vec<&str>> = weights.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["dawid_skene", "majority_vote", "all"]);
    for r in &rows {
        let wp: f64 = r[1].parse().unwrap();
        let wc: f64 = r[2].parse().unwrap();
        assert!([0.0, 0.5, 1.0].contains(&wp), "{wp}");
        assert!((wp + wc - 1.0).abs() < 1e-12);
    }

    let refit = f.dir.path().join("refit");
    let stdout = ok(teachloop(&[
        "analyze",
        "--input",
        out.join("pc_records.tsv").to_str().unwrap(),
        "--grid-step",
        "0.5",
        "--out",
        refit.to_str().unwrap(),
    ]));
    assert_eq!(stdout.lines().count(), 4);
    assert!(refit.join("config.json").is_file());
    let w_of = |text: &str| text.lines().map(|l| l.split('\t').nth(1).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(w_of(&stdout), w_of(&weights));
}

#[test]
fn extract_rules_writes_anchored_candidates() {
    let f = fixture();
    let out = f.dir.path().join("mined");
    let common = ["extract-rules", "--corpus", f.corpus.to_str().unwrap(), "--ngrams", "0", "--tcov", "10", "--tprec", "0.5"];
    let mut args = common.to_vec();
    args.extend(["--tlen", "2", "--out", out.to_str().unwrap()]);
    ok(teachloop(&args));
    let corpus = load_corpus(&f.corpus, 2).unwrap();
    let index = FeatureIndex::build(&corpus);
    let mined = read_rules(out.join("rules.jsonl"), 2).unwrap().rules;
    assert!(!mined.is_empty());
    for rule in &mined {
        assert!(rule.predicate().len() <= 2);
        let anchored = corpus
            .split(teachloop::corpus::Split::Labeled)
            .iter()
            .any(|&i| corpus.instance(i).gold_label == Some(rule.label) && rule.predicate().iter().all(|a| corpus.instance(i).features.contains(a)));
        assert!(anchored, "{rule}");
        let stats = teachloop::rules::compute_stats(rule, &corpus, &index, false);
        assert!(stats.coverage_unlabeled >= 10);
    }

    let excluded = f.dir.path().join("excluded");
    let mined_path = out.join("rules.jsonl");
    let mut args = common.to_vec();
    args.extend(["--tlen", "2", "--rules", mined_path.to_str().unwrap(), "--out", excluded.to_str().unwrap()]);
    ok(teachloop(&args));
    assert_eq!(fs::read_to_string(excluded.join("rules.jsonl")).unwrap(), "");
}

struct ServerProcess(std::process::Child);

impl ServerProcess {
    fn wait_success(&mut self) -> bool {
        self.0.wait().unwrap().success()
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(f: &Fixture, root: &Path) -> (ServerProcess, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_teachloop"))
        .args([
            "serve",
            "--corpus",
            f.corpus.to_str().unwrap(),
            "--rules",
            f.rules.to_str().unwrap(),
            "--ngrams",
            "0",
            "--port",
            "0",
            "--out",
            root.to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    (ServerProcess(child), addr)
}

#[test]
fn serve_runs_sessions_and_shuts_down_cleanly() {
    let f = fixture();
    let root = f.dir.path().join("service");
    let (mut child, addr) = start_server(&f, &root);
    let mut client = Client::connect(&addr).unwrap();
    let config = json!({"teacher": "majority_vote", "t_cov": 10, "budget": 6, "batch": 3, "seed": 1});
    let id = client
        .call(&json!({"op": "create_session", "config": config, "idempotency_key": "k1"}))
        .unwrap()
        .unwrap();
    let id = id["session"].as_str().unwrap().to_string();
    let batch = client.call(&json!({"op": "next_queries", "session": id})).unwrap().unwrap();
    let first = batch["queries"][0]["query_id"].as_str().unwrap().to_string();
    client
        .call(&json!({"op": "submit_answer", "session": id, "query_id": first, "answer": {"label": 1}}))
        .unwrap()
        .unwrap();
    let pending = client.call(&json!({"op": "next_queries", "session": id})).unwrap().unwrap();
    let err = client.call(&json!({"op": "next_queries", "session": "nope"})).unwrap().unwrap_err();
    assert_eq!(err.code, "unknown_session");
    client.call(&json!({"op": "shutdown"})).unwrap().unwrap();
    assert!(child.wait_success());
    assert!(root.join("config.json").is_file());
    assert!(root.join("sessions").join(&id).join("pending.json").is_file());

    let (mut child, addr) = start_server(&f, &root);
    let mut client = Client::connect(&addr).unwrap();
    let sessions = client.call(&json!({"op": "list_sessions"})).unwrap().unwrap();
    assert_eq!(sessions, json!([id]));
    let resumed = client.call(&json!({"op": "next_queries", "session": id})).unwrap().unwrap();
    assert_eq!(resumed, pending);
    client.call(&json!({"op": "shutdown"})).unwrap().unwrap();
    assert!(child.wait_success());
}

#[test]
fn serve_reports_port_in_use() {
    let f = fixture();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let root = f.dir.path().join("s");
    let out = teachloop(&["serve", "--corpus", f.corpus.to_str().unwrap(), "--ngrams", "0", "--port", &port, "--out", root.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("binding"));
}
