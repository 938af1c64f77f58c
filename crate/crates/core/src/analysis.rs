//! Metrics, teacher precision/coverage measurement, the precision-coverage
//! weight fit, and report tables.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::features::FeatureIndex;
use crate::rules::Rule;
use crate::session::train_pair;
use crate::student::{argmax, StudentHyper};
use crate::teacher::{TeacherKind, TeacherOutput};

/// Unweighted mean of per-class F1. Classes with neither gold nor predicted
/// instances are skipped; if every class is skipped (empty input) the result is 0.
pub fn macro_f1(predictions: &[Label], gold: &[Label], num_classes: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: gold.len(),
        });
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut gold_n = vec![0usize; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        for l in [p, g] {
            if !l.in_range(num_classes) {
                return Err(Error::InvalidParameter(format!("label {l} outside 1..={num_classes}")));
            }
        }
        pred_n[p.index()] += 1;
        gold_n[g.index()] += 1;
        if p == g {
            tp[p.index()] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for k in 0..num_classes {
        if pred_n[k] == 0 && gold_n[k] == 0 {
            continue;
        }
        counted += 1;
        total += 2.0 * tp[k] as f64 / (pred_n[k] + gold_n[k]) as f64;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCRecord {
    pub teacher_precision: f64,
    pub teacher_coverage: f64,
    pub student_f1: f64,
    pub teacher: String,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCWeights {
    pub w_precision: f64,
    pub w_coverage: f64,
    pub scale: f64,
    pub fit_error: f64,
}

const PC_FLOOR: f64 = 1e-6;
const FIT_TIE: f64 = 1e-12;

/// Grid search over `w_precision` in `{0, step, 2 step, ..., 1}` for the
/// predictor `a * precision^w_p * coverage^(1 - w_p)`, with `a` fit by least
/// squares at each grid point. Ties (within 1e-12) go to the smaller weight.
pub fn fit_pc_weights(records: &[PCRecord], grid_step: f64) -> Result<PCWeights> {
    if records.len() < 2 {
        return Err(Error::InvalidParameter("weight fit needs at least 2 records".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::InvalidParameter("grid_step must lie in (0, 0.5]".into()));
    }
    let steps = (1.0 / grid_step).round() as usize;
    let mut grid: Vec<f64> = (0..=steps)
        .map(|i| i as f64 * grid_step)
        .filter(|&w| w < 1.0 - 1e-9)
        .collect();
    grid.push(1.0);

    let logs: Vec<(f64, f64, f64)> = records
        .iter()
        .map(|r| {
            (
                r.teacher_precision.max(PC_FLOOR).ln(),
                r.teacher_coverage.max(PC_FLOOR).ln(),
                r.student_f1,
            )
        })
        .collect();

    let mut best: Option<PCWeights> = None;
    for w in grid {
        let g: Vec<f64> = logs.iter().map(|&(lp, lc, _)| (w * lp + (1.0 - w) * lc).exp()).collect();
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let gy: f64 = g.iter().zip(&logs).map(|(v, &(_, _, y))| v * y).sum();
        let scale = if gg > 0.0 { gy / gg } else { 0.0 };
        let mse = g
            .iter()
            .zip(&logs)
            .map(|(v, &(_, _, y))| (scale * v - y).powi(2))
            .sum::<f64>()
            / records.len() as f64;
        if best.as_ref().is_none_or(|b| mse < b.fit_error - FIT_TIE) {
            best = Some(PCWeights {
                w_precision: w,
                w_coverage: 1.0 - w,
                scale,
                fit_error: mse,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// `(precision, coverage)` of a teacher against unlabeled gold labels, or
/// `None` when the teacher covers nothing.
pub fn teacher_pc(output: &TeacherOutput, corpus: &Corpus) -> Option<(f64, f64)> {
    let unlabeled = corpus.split(Split::Unlabeled);
    if unlabeled.is_empty() {
        return None;
    }
    let mut covered = 0usize;
    let mut correct = 0usize;
    for &idx in unlabeled {
        let Some(q) = output.soft_labels.get(&idx) else { continue };
        let Some(gold) = corpus.instance(idx).gold_label else { continue };
        covered += 1;
        if Label::from_index(argmax(q)) == gold {
            correct += 1;
        }
    }
    (covered > 0).then(|| (correct as f64 / covered as f64, covered as f64 / unlabeled.len() as f64))
}

/// The rules used for `fraction` under `seed`: a prefix of a seeded
/// permutation, so larger fractions are supersets of smaller ones.
pub fn rule_subset(rules: &[Rule], fraction: f64, seed: u64) -> Vec<Rule> {
    let mut order: Vec<usize> = (0..rules.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = ((fraction * rules.len() as f64).ceil() as usize).clamp(1, rules.len());
    let mut chosen: Vec<usize> = order[..take].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| rules[i].clone()).collect()
}

/// One record per `(fraction, teacher, seed)` whose teacher covers something,
/// in that nesting order.
pub fn sweep_teachers(
    corpus: &Corpus,
    index: &FeatureIndex,
    rules: &[Rule],
    fractions: &[f64],
    teachers: &[TeacherKind],
    seeds: &[u64],
    hyper: &StudentHyper,
) -> Result<Vec<PCRecord>> {
    if rules.is_empty() {
        return Err(Error::InvalidParameter("sweep needs a non-empty rule set".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidParameter(format!("fraction {f} outside (0, 1]")));
    }
    let mut jobs = Vec::new();
    for &fraction in fractions {
        for &teacher in teachers {
            for &seed in seeds {
                jobs.push((fraction, teacher, seed));
            }
        }
    }
    let labeled: Vec<(usize, Label)> = corpus
        .split(Split::Labeled)
        .iter()
        .filter_map(|&i| corpus.instance(i).gold_label.map(|l| (i, l)))
        .collect();
    let test = corpus.split(Split::Test);
    let results: Vec<Result<Option<PCRecord>>> = jobs
        .par_iter()
        .map(|&(fraction, teacher, seed)| {
            let subset = rule_subset(rules, fraction, seed);
            let hyper = StudentHyper { seed, ..hyper.clone() };
            let (output, student) = train_pair(corpus, index, &labeled, &subset, teacher, &hyper)?;
            let Some((precision, coverage)) = teacher_pc(&output, corpus) else {
                return Ok(None);
            };
            Ok(Some(PCRecord {
                teacher_precision: precision,
                teacher_coverage: coverage,
                student_f1: student.macro_f1_on(corpus, test).unwrap_or(0.0),
                teacher: teacher.as_str().to_string(),
                fraction,
                seed,
            }))
        })
        .collect();
    let mut records = Vec::new();
    for r in results {
        if let Some(rec) = r? {
            records.push(rec);
        }
    }
    Ok(records)
}

/// Scatter data: `teacher fraction seed precision coverage student_f1`.
pub fn pc_records_tsv(records: &[PCRecord]) -> String {
    let mut out = PC_COLUMNS.join("\t") + "\n";
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.teacher, r.fraction, r.seed, r.teacher_precision, r.teacher_coverage, r.student_f1
        );
    }
    out
}

/// Parses the table written by [`pc_records_tsv`].
pub fn parse_pc_records_tsv(text: &str) -> Result<Vec<PCRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.split('\t').collect::<Vec<_>>() == PC_COLUMNS => {}
        _ => return Err(Error::InvalidParameter(format!("expected header {:?}", PC_COLUMNS.join("\t")))),
    }
    lines
        .map(|(i, line)| {
            let bad = |what: &str| Error::InvalidParameter(format!("line {}: bad {what}", i + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != PC_COLUMNS.len() {
                return Err(bad("column count"));
            }
            let num = |j: usize| cols[j].parse::<f64>().map_err(|_| bad(PC_COLUMNS[j]));
            Ok(PCRecord {
                teacher: cols[0].to_string(),
                fraction: num(1)?,
                seed: cols[2].parse().map_err(|_| bad("seed"))?,
                teacher_precision: num(3)?,
                teacher_coverage: num(4)?,
                student_f1: num(5)?,
            })
        })
        .collect()
}

const PC_COLUMNS: [&str; 6] = ["teacher", "fraction", "seed", "precision", "coverage", "student_f1"];

/// Weights table: `label w_precision w_coverage scale mse`, one row per fit.
pub fn weights_tsv(rows: &[(String, PCWeights)]) -> String {
    let mut out = String::from("label\tw_precision\tw_coverage\tscale\tmse\n");
    for (label, w) in rows {
        let _ = writeln!(
            out,
            "{label}\t{:.2}\t{:.2}\t{:.6}\t{:.6e}",
            w.w_precision, w.w_coverage, w.scale, w.fit_error
        );
    }
    out
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `a > b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&diffs);
    let n = diffs.len();
    if sd == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        return Ok(PairedTest { n, mean_diff: mean, t, p_value: p });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidParameter(format!("t distribution: {e}")))?;
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_value: 1.0 - dist.cdf(t),
    })
}
