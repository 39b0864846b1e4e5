//! End-to-end detection: explore, solve, score, verify, report.
//!
//! [`detect`] runs the full loop over one program. A priority queue of
//! candidate inputs starts with the all-zeros run; each pop concretely
//! executes the program with a symbolic shadow, scores the completed path,
//! checks it against the temporal behavior specs, then tries to solve each
//! fork the run discovered and queues feasible alternates with a priority
//! chosen by the active [`Strategy`]. The budget counts pops, so runs with
//! different strategies are comparable path-for-path.
//!
//! In strict mode (the default) a detection requires the replayed trace to
//! satisfy a behavior spec; the score is advisory. In permissive mode the
//! score alone decides, which is useful for measuring the classifier but
//! can false-positive. Reports carry deterministic effort counters
//! (machine steps, solver nodes, solver calls) instead of wall times so
//! identical runs serialize identically.

pub mod bench;
pub mod corpus;

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::classifier::{Classifier, DEFAULT_THRESHOLD};
use crate::concolic::{explore, ExplorationQueue, ExploreConfig, PathRun};
use crate::features::{extract, vocabulary_hash, FeatureVector};
use crate::ltl::{builtin_specs, classify_trace, Spec};
use crate::oracle::{
    fork_context, path_context, score_features, score_remote, PathContext, RemoteConfig,
    ScorerParams,
};
use crate::solver::{check_sat_with_stats, Budget, SatResult};
use crate::vm::{Program, Termination, VmConfig};

/// Queue priority policy for fork candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Score fork contexts with the path scorer.
    Guided,
    /// Uniform random priorities from the run seed.
    Random,
    /// Earlier discoveries first.
    Bfs,
    /// Later discoveries first.
    Dfs,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Guided, Strategy::Random, Strategy::Bfs, Strategy::Dfs];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Guided => "guided",
            Strategy::Random => "random",
            Strategy::Bfs => "bfs",
            Strategy::Dfs => "dfs",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Strategy, String> {
        match s {
            "guided" => Ok(Strategy::Guided),
            "random" => Ok(Strategy::Random),
            "bfs" => Ok(Strategy::Bfs),
            "dfs" => Ok(Strategy::Dfs),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// How fork contexts and finished paths get their maliciousness score.
pub enum ScoreBackend {
    /// Logistic scorer over the feature vector.
    Heuristic(ScorerParams),
    /// Trained transformer classifier.
    Transformer(Box<Classifier>),
    /// Remote scoring endpoint; unreachable endpoints fall back to 0.5.
    Remote(RemoteConfig),
}

impl Default for ScoreBackend {
    fn default() -> Self {
        ScoreBackend::Heuristic(ScorerParams::informed_prior())
    }
}

impl ScoreBackend {
    fn score_context(&self, ctx: &PathContext) -> f64 {
        match self {
            ScoreBackend::Heuristic(params) => score_features(params, &ctx.features),
            ScoreBackend::Transformer(model) => model.score(&ctx.features),
            ScoreBackend::Remote(cfg) => score_remote(cfg, ctx),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectConfig {
    pub explore: ExploreConfig,
    pub vm: VmConfig,
    /// Maximum queue pops.
    pub budget_paths: usize,
    /// Solver node budget per feasibility check; node counts keep reports
    /// deterministic where wall-clock budgets would not.
    pub solver_nodes: u64,
    pub strategy: Strategy,
    pub seed: u64,
    pub threshold: f64,
    /// Require temporal verification for a verdict.
    pub strict: bool,
    /// Keep exploring after the first detection.
    pub find_all: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            explore: ExploreConfig::default(),
            vm: VmConfig::default(),
            budget_paths: 100,
            solver_nodes: 1_000_000,
            strategy: Strategy::Guided,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            strict: true,
            find_all: false,
        }
    }
}

/// One explored path in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathReport {
    pub index: usize,
    pub input: Vec<u8>,
    pub constraint: String,
    pub score: f64,
    pub matched_specs: Vec<String>,
    pub malicious: bool,
    pub steps: usize,
    pub termination: String,
}

/// Deterministic effort accounting.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Effort {
    pub vm_steps: u64,
    pub solver_nodes: u64,
    pub solver_calls: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub program: String,
    pub strategy: String,
    pub seed: u64,
    pub budget_paths: usize,
    pub strict: bool,
    pub paths_explored: usize,
    pub forks_discovered: usize,
    pub forks_feasible: usize,
    /// Pop index (1-based) of the first detection, if any.
    pub first_detection: Option<usize>,
    pub detections: Vec<PathReport>,
    pub malicious: bool,
    pub effort: Effort,
    pub vocab_hash: String,
}

fn termination_name(t: &Termination) -> String {
    match t {
        Termination::Halted => "halted".into(),
        Termination::Faulted { addr } => format!("faulted@{addr:#x}"),
        Termination::StepLimit => "step-limit".into(),
    }
}

/// JSONL sink for exploration traffic: one record per explored path and
/// one per scored fork candidate.
pub struct ExplorationLog<W: Write> {
    out: W,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord<'a> {
    Path {
        index: usize,
        priority: f64,
        input: &'a [u8],
        constraint: &'a str,
        score: f64,
        matched_specs: &'a [String],
    },
    Fork {
        parent: usize,
        site: usize,
        priority: f64,
        feasible: bool,
        context: &'a PathContext,
    },
}

impl<W: Write> ExplorationLog<W> {
    pub fn new(out: W) -> Self {
        ExplorationLog { out }
    }

    fn write(&mut self, record: &LogRecord) {
        let line = serde_json::to_string(record).expect("log record serializes");
        let _ = writeln!(self.out, "{line}");
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Explores `program` under `config`, scoring with `backend`, verifying
/// against `specs` (the builtin behavior specs when empty is not intended:
/// pass [`builtin_specs`] for the standard set).
pub fn detect<W: Write>(
    program: &Program,
    specs: &[Spec],
    backend: &ScoreBackend,
    config: &DetectConfig,
    mut log: Option<&mut ExplorationLog<W>>,
) -> DetectionReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut queue: ExplorationQueue<Vec<u8>> = ExplorationQueue::new();
    let mut pushed: BTreeSet<String> = BTreeSet::new();
    let mut completed: BTreeSet<String> = BTreeSet::new();
    let mut effort = Effort::default();
    let mut report = DetectionReport {
        program: program.meta.name.clone(),
        strategy: config.strategy.name().into(),
        seed: config.seed,
        budget_paths: config.budget_paths,
        strict: config.strict,
        paths_explored: 0,
        forks_discovered: 0,
        forks_feasible: 0,
        first_detection: None,
        detections: Vec::new(),
        malicious: false,
        effort: Effort::default(),
        vocab_hash: vocabulary_hash(),
    };
    queue.push(Vec::new(), 1.0);
    let solver_budget = Budget::nodes(config.solver_nodes);
    while let Some((input, priority)) = queue.pop() {
        if report.paths_explored == config.budget_paths {
            break;
        }
        report.paths_explored += 1;
        let index = report.paths_explored;
        let run = explore(program, &input, &config.explore, &config.vm);
        effort.vm_steps += run.trace.steps() as u64;
        let constraint_text = run.constraint.to_string();
        let fresh = completed.insert(constraint_text.clone());
        let (score, matched, malicious) = if fresh {
            let features = extract(&run.constraint, &run.trace, program);
            let score = score_path(backend, program, &run, features);
            let matched = classify_trace(&run.trace, specs);
            let malicious = if config.strict {
                !matched.is_empty()
            } else {
                score >= config.threshold
            };
            (score, matched, malicious)
        } else {
            (0.0, Vec::new(), false)
        };
        if let Some(log) = log.as_deref_mut() {
            log.write(&LogRecord::Path {
                index,
                priority,
                input: &input,
                constraint: &constraint_text,
                score,
                matched_specs: &matched,
            });
        }
        if fresh && malicious {
            report.detections.push(PathReport {
                index,
                input: input.clone(),
                constraint: constraint_text,
                score,
                matched_specs: matched,
                malicious: true,
                steps: run.trace.steps(),
                termination: termination_name(&run.trace.termination),
            });
            report.malicious = true;
            if report.first_detection.is_none() {
                report.first_detection = Some(index);
            }
            if !config.find_all {
                break;
            }
        }
        for fork in &run.forks {
            report.forks_discovered += 1;
            let fork_text = fork.constraint.to_string();
            if !pushed.insert(fork_text) {
                continue;
            }
            let ctx = fork_context(program, &run, fork);
            let fork_priority = match config.strategy {
                Strategy::Guided => backend.score_context(&ctx),
                Strategy::Random => rng.gen::<f64>(),
                Strategy::Bfs => 1.0 / (queue.pushes() + 2) as f64,
                Strategy::Dfs => (queue.pushes() + 1) as f64 / (queue.pushes() + 2) as f64,
            };
            let (sat, nodes) = check_sat_with_stats(&fork.constraint, &solver_budget);
            effort.solver_calls += 1;
            effort.solver_nodes += nodes;
            let feasible = matches!(sat, SatResult::Sat(_));
            if feasible {
                report.forks_feasible += 1;
            }
            if let Some(log) = log.as_deref_mut() {
                log.write(&LogRecord::Fork {
                    parent: index,
                    site: fork.site,
                    priority: fork_priority,
                    feasible,
                    context: &ctx,
                });
            }
            if let SatResult::Sat(model) = sat {
                let len = model
                    .assignments()
                    .map(|(byte, _)| byte as usize + 1)
                    .max()
                    .unwrap_or(0)
                    .max(input.len());
                queue.push(model.input_vec(len), fork_priority);
            }
        }
    }
    report.effort = effort;
    report
}

fn score_path(
    backend: &ScoreBackend,
    program: &Program,
    run: &PathRun,
    features: FeatureVector,
) -> f64 {
    match backend {
        ScoreBackend::Heuristic(params) => score_features(params, &features),
        ScoreBackend::Transformer(model) => model.score(&features),
        ScoreBackend::Remote(cfg) => score_remote(cfg, &path_context(program, run)),
    }
}

/// Convenience wrapper: builtin specs, default backend, no log.
pub fn detect_default(program: &Program, config: &DetectConfig) -> DetectionReport {
    let specs = builtin_specs();
    detect::<std::io::Sink>(program, &specs, &ScoreBackend::default(), config, None)
}

/// Process exit code for a finished detection: 1 flags malice, 0 is clean.
/// Errors before a report exist map to 2 at the boundary.
pub fn exit_code(report: &DetectionReport) -> i32 {
    if report.malicious {
        1
    } else {
        0
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn save_report(path: &Path, report: &DetectionReport) -> Result<(), ReportError> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<DetectionReport, ReportError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Renders a report as the JSON byte stream used for both files and
/// stdout, so every consumer sees identical bytes.
pub fn report_bytes(report: &DetectionReport) -> Vec<u8> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    json.into_bytes()
}
