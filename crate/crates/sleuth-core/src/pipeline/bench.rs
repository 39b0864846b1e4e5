//! Strategy benchmarking and classifier metrics.
//!
//! [`run_benchmark`] explores every malicious corpus sample under each
//! strategy and records how many path pops the first detection took
//! (budget-capped when a strategy never gets there). Per-strategy medians
//! and the relative reduction against depth-first search summarize the
//! comparison. Sample runs are independent, so the grid fans out through
//! [`crate::par::map`] and speeds up on the parallel feature.
//!
//! [`binary_metrics`] and [`auc`] grade scored labels: threshold metrics
//! plus the rank-based area under the ROC curve with the usual half-credit
//! for ties.

use serde::{Deserialize, Serialize};

use super::corpus::{Label, SampleMeta};
use super::{detect, DetectConfig, ScoreBackend, Strategy};
use crate::ltl::builtin_specs;
use crate::par;
use crate::vm::Program;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub strategies: Vec<Strategy>,
    /// Repetitions per (strategy, sample); the run seed varies per rep.
    pub reps: usize,
    pub detect: DetectConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { strategies: Strategy::ALL.to_vec(), reps: 1, detect: DetectConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub sample: String,
    pub rep: usize,
    pub detected: bool,
    /// Pops until first detection; the budget when none happened.
    pub paths_to_detection: usize,
    pub vm_steps: u64,
    pub solver_nodes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub detection_rate: f64,
    pub median_paths: f64,
    /// `(dfs - this) / dfs`, when dfs was benchmarked.
    pub reduction_vs_dfs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<StrategySummary>,
}

/// Median of an unsorted slice; even lengths average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Benchmarks the malicious samples of a corpus; benign entries are
/// skipped since "paths to detection" means nothing for them.
pub fn run_benchmark(samples: &[(SampleMeta, Program)], config: &BenchConfig) -> BenchReport {
    let malicious: Vec<&(SampleMeta, Program)> =
        samples.iter().filter(|(m, _)| m.label == Label::Malicious).collect();
    let mut tasks: Vec<(Strategy, usize, &SampleMeta, &Program)> = Vec::new();
    for &strategy in &config.strategies {
        for rep in 0..config.reps.max(1) {
            for (meta, program) in &malicious {
                tasks.push((strategy, rep, meta, program));
            }
        }
    }
    let specs = builtin_specs();
    let rows: Vec<BenchRow> = par::map(&tasks, |&(strategy, rep, meta, program)| {
        let detect_config = DetectConfig {
            strategy,
            seed: config.detect.seed.wrapping_add(rep as u64),
            ..config.detect.clone()
        };
        let backend = ScoreBackend::default();
        let report =
            detect::<std::io::Sink>(program, &specs, &backend, &detect_config, None);
        BenchRow {
            strategy: strategy.name().into(),
            sample: meta.name.clone(),
            rep,
            detected: report.malicious,
            paths_to_detection: report
                .first_detection
                .unwrap_or(detect_config.budget_paths),
            vm_steps: report.effort.vm_steps,
            solver_nodes: report.effort.solver_nodes,
        }
    });
    let mut summary = Vec::new();
    let median_for = |name: &str, rows: &[BenchRow]| -> Option<f64> {
        let paths: Vec<f64> = rows
            .iter()
            .filter(|r| r.strategy == name)
            .map(|r| r.paths_to_detection as f64)
            .collect();
        (!paths.is_empty()).then(|| median(&paths))
    };
    let dfs_median = median_for(Strategy::Dfs.name(), &rows);
    for &strategy in &config.strategies {
        let name = strategy.name();
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.strategy == name).collect();
        if mine.is_empty() {
            continue;
        }
        let med = median_for(name, &rows).expect("non-empty");
        let reduction = match (strategy, dfs_median) {
            (Strategy::Dfs, _) => None,
            (_, Some(dfs)) if dfs > 0.0 => Some((dfs - med) / dfs),
            _ => None,
        };
        summary.push(StrategySummary {
            strategy: name.into(),
            runs: mine.len(),
            detection_rate: mine.iter().filter(|r| r.detected).count() as f64 / mine.len() as f64,
            median_paths: med,
            reduction_vs_dfs: reduction,
        });
    }
    BenchReport { rows, summary }
}

/// One row per run plus a trailing summary block, machine-readable.
pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from("strategy,sample,rep,detected,paths_to_detection,vm_steps,solver_nodes\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy, r.sample, r.rep, r.detected, r.paths_to_detection, r.vm_steps, r.solver_nodes
        ));
    }
    out.push_str("\nstrategy,runs,detection_rate,median_paths,reduction_vs_dfs\n");
    for s in &report.summary {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.strategy,
            s.runs,
            s.detection_rate,
            s.median_paths,
            s.reduction_vs_dfs.map_or(String::new(), |r| r.to_string()),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

/// Threshold metrics over `(score, is_malicious)` pairs; `score >=
/// threshold` predicts malicious. Undefined ratios (empty denominators)
/// report 0.
pub fn binary_metrics(scored: &[(f64, bool)], threshold: f64) -> Metrics {
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for &(score, truth) in scored {
        match (score >= threshold, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: ratio(tp + tn, scored.len()),
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    }
}

/// Rank-based AUC: the probability a random malicious sample outscores a
/// random benign one, ties counting half. Returns 0.5 when either class
/// is absent.
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|(_, y)| *y).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scored.iter().filter(|(_, y)| !*y).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += match p.partial_cmp(n).expect("scores are not NaN") {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}
