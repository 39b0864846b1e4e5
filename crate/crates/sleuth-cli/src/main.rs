//! `sleuth`: concolic malware path analysis from the command line.
//!
//! Exit codes: 0 clean, 1 behavior detected (or signature matched), 2
//! error. Subcommands cover the full workflow: detect on one program,
//! corpus generation, classifier training, scorer refinement, strategy
//! benchmarking, and signature synthesis/matching.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

use sleuth_core::classifier::{Classifier, ModelConfig, TrainConfig};
use sleuth_core::concolic::{explore, ExploreConfig};
use sleuth_core::features::extract;
use sleuth_core::ltl::{builtin_specs, classify_trace, parse_specs, Spec};
use sleuth_core::oracle::{RemoteConfig, ScorerParams};
use sleuth_core::pipeline::bench::{run_benchmark, to_csv, BenchConfig};
use sleuth_core::pipeline::corpus::{
    generate_corpus, labeled_dataset, load_spec, read_corpus, CorpusSpec, Label,
};
use sleuth_core::pipeline::{
    detect, exit_code, report_bytes, save_report, DetectConfig, ExplorationLog, ScoreBackend,
    Strategy,
};
use sleuth_core::refine::{policy_update, read_history};
use sleuth_core::signatures::{
    compile, load_signatures, matches, save_signatures, SignatureConfig, SignatureInput,
};
use sleuth_core::solver::{check_sat, parse_constraint, Budget, SatResult};
use sleuth_core::vm::asm::parse_program;
use sleuth_core::vm::{run_concrete, Program, VmConfig};

#[derive(Parser)]
#[command(name = "sleuth", version, about = "Concolic malware path analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore a program and report malicious paths.
    Detect(DetectArgs),
    /// Run a program concretely and print its trace and verdict.
    Run(RunArgs),
    /// Check satisfiability of a path constraint.
    Solve(SolveArgs),
    /// Generate a labeled corpus from a TOML spec.
    Corpus(CorpusArgs),
    /// Train the transformer classifier on a corpus.
    Train(TrainArgs),
    /// Update scorer weights from a detection history.
    Refine(RefineArgs),
    /// Compare search strategies on a corpus.
    Bench(BenchArgs),
    /// Synthesize or match behavioral signatures.
    #[command(subcommand)]
    Sign(SignCommand),
}

#[derive(Args)]
struct DetectArgs {
    /// Assembly file to analyze.
    program: PathBuf,
    /// Fork prioritization strategy.
    #[arg(long, default_value = "guided")]
    strategy: Strategy,
    /// Maximum explored paths.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    /// Solver node budget per feasibility check.
    #[arg(long, default_value_t = 1_000_000)]
    solver_nodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score threshold for permissive mode.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Flag on score alone instead of requiring spec verification.
    #[arg(long)]
    permissive: bool,
    /// Keep exploring after the first detection.
    #[arg(long)]
    find_all: bool,
    /// Behavior spec file (`name: formula` lines); builtin when absent.
    #[arg(long)]
    specs: Option<PathBuf>,
    /// Transformer checkpoint to score with.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scorer weights JSON to score with.
    #[arg(long, conflicts_with = "model")]
    scorer: Option<PathBuf>,
    /// Remote scoring endpoint URL.
    #[arg(long, conflicts_with_all = ["model", "scorer"])]
    remote: Option<String>,
    /// Write the JSON report here (stdout always gets it too).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write a JSONL exploration log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    program: PathBuf,
    /// Input bytes, comma separated (`--input 66,7`).
    #[arg(long, value_delimiter = ',')]
    input: Vec<u8>,
    /// Print each observation.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 4096)]
    step_limit: usize,
}

#[derive(Args)]
struct SolveArgs {
    /// Constraint text, e.g. "(and (eq in[0] 7) (ult in[1] 10))".
    constraint: String,
    #[arg(long, default_value_t = 1_000_000)]
    nodes: u64,
}

#[derive(Args)]
struct CorpusArgs {
    /// TOML corpus spec.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from `sleuth corpus`).
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum token sequence length.
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Args)]
struct RefineArgs {
    /// JSONL detection history.
    #[arg(long)]
    history: PathBuf,
    /// Scorer weights JSON to update; informed prior when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Updated weights destination (defaults to --params path).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ascent step size.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Strategies to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![Strategy::Guided, Strategy::Random, Strategy::Bfs, Strategy::Dfs])]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SignCommand {
    /// Cluster detections from a corpus into family signatures.
    Synth(SignSynthArgs),
    /// Match a program against saved signatures.
    Match(SignMatchArgs),
}

#[derive(Args)]
struct SignSynthArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clustering radius in embedded feature space.
    #[arg(long, default_value_t = 2.0)]
    eps: f64,
    /// Minimum cluster size.
    #[arg(long, default_value_t = 3)]
    min_pts: usize,
    #[arg(long, default_value_t = 100)]
    budget: usize,
}

#[derive(Args)]
struct SignMatchArgs {
    /// Signature file from `sleuth sign synth`.
    #[arg(long)]
    signatures: PathBuf,
    program: PathBuf,
    #[arg(long, default_value_t = 100)]
    budget: usize,
}

fn load_program(path: &Path) -> Result<Program> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    parse_program(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_specs(path: Option<&Path>) -> Result<Vec<Spec>> {
    match path {
        None => Ok(builtin_specs()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            parse_specs(&text).map_err(|e| anyhow!("{}: {e}", p.display()))
        }
    }
}

fn load_backend(args: &DetectArgs) -> Result<ScoreBackend> {
    if let Some(model) = &args.model {
        let classifier = Classifier::load(model)
            .with_context(|| format!("loading checkpoint {}", model.display()))?;
        return Ok(ScoreBackend::Transformer(Box::new(classifier)));
    }
    if let Some(scorer) = &args.scorer {
        let params = read_scorer(scorer)?;
        return Ok(ScoreBackend::Heuristic(params));
    }
    if let Some(endpoint) = &args.remote {
        let config = RemoteConfig { endpoint: endpoint.clone(), ..Default::default() };
        return Ok(ScoreBackend::Remote(config));
    }
    Ok(ScoreBackend::default())
}

fn read_scorer(path: &Path) -> Result<ScorerParams> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let params: ScorerParams = serde_json::from_str(&text)?;
    if !params.compatible() {
        bail!("{}: weights built against a different feature vocabulary", path.display());
    }
    Ok(params)
}

fn write_scorer(path: &Path, params: &ScorerParams) -> Result<()> {
    let mut json = serde_json::to_string_pretty(params)?;
    json.push('\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<i32> {
    let program = load_program(&args.program)?;
    let specs = load_specs(args.specs.as_deref())?;
    let backend = load_backend(&args)?;
    let config = DetectConfig {
        budget_paths: args.budget,
        solver_nodes: args.solver_nodes,
        strategy: args.strategy,
        seed: args.seed,
        threshold: args.threshold,
        strict: !args.permissive,
        find_all: args.find_all,
        ..Default::default()
    };
    let report = match &args.log {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            let mut log = ExplorationLog::new(std::io::BufWriter::new(file));
            let report = detect(&program, &specs, &backend, &config, Some(&mut log));
            log.into_inner().flush()?;
            report
        }
        None => detect::<std::io::Sink>(&program, &specs, &backend, &config, None),
    };
    if let Some(path) = &args.report {
        save_report(path, &report)?;
    }
    std::io::stdout().write_all(&report_bytes(&report))?;
    Ok(exit_code(&report))
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let program = load_program(&args.program)?;
    let trace = run_concrete(&program, &args.input, args.step_limit, &VmConfig::default());
    if args.trace {
        for obs in &trace.observations {
            println!("step {:4}  loc {:4}  uid {:4}  {:?}", obs.step, obs.loc, obs.uid, obs.events);
        }
    }
    let matched = classify_trace(&trace, &builtin_specs());
    println!("steps: {}", trace.steps());
    println!("termination: {:?}", trace.termination);
    println!("matched: {}", if matched.is_empty() { "-".into() } else { matched.join(",") });
    Ok(if matched.is_empty() { 0 } else { 1 })
}

fn cmd_solve(args: SolveArgs) -> Result<i32> {
    let constraint = parse_constraint(&args.constraint).map_err(|e| anyhow!("parse: {e}"))?;
    match check_sat(&constraint, &Budget::nodes(args.nodes)) {
        SatResult::Sat(model) => {
            let assignments: Vec<String> =
                model.assignments().map(|(b, v)| format!("in[{b}]={v}")).collect();
            println!("sat {}", assignments.join(" "));
            Ok(0)
        }
        SatResult::Unsat => {
            println!("unsat");
            Ok(1)
        }
        SatResult::Unknown => {
            println!("unknown (budget exhausted)");
            Ok(2)
        }
    }
}

fn cmd_corpus(args: CorpusArgs) -> Result<i32> {
    let spec: CorpusSpec = load_spec(&args.spec)?;
    let manifest = generate_corpus(&spec, &args.out)?;
    let malicious = manifest.samples.iter().filter(|s| s.label == Label::Malicious).count();
    println!(
        "wrote {} samples ({malicious} malicious, {} benign) to {}",
        manifest.samples.len(),
        manifest.samples.len() - malicious,
        args.out.display()
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let samples = read_corpus(&args.corpus)?;
    let data = labeled_dataset(&samples);
    log::info!("training on {} labeled paths", data.len());
    let mut model = Classifier::init(ModelConfig { max_len: args.max_len, ..Default::default() }, args.seed);
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        ..Default::default()
    };
    let report = model.train(&data, &config)?;
    model.save(&args.out)?;
    for epoch in report.epochs.iter().step_by(10.max(report.epochs.len() / 5)) {
        println!(
            "epoch {:3}  lr {:.5}  loss {:.4}  accuracy {:.3}",
            epoch.epoch, epoch.lr, epoch.mean_loss, epoch.accuracy
        );
    }
    println!("final accuracy {:.3}; checkpoint {}", report.final_accuracy, args.out.display());
    Ok(0)
}

fn cmd_refine(args: RefineArgs) -> Result<i32> {
    let records = read_history(&args.history)?;
    if records.is_empty() {
        bail!("history {} is empty", args.history.display());
    }
    let mut params = match &args.params {
        Some(path) => read_scorer(path)?,
        None => ScorerParams::informed_prior(),
    };
    policy_update(&mut params, &records, args.alpha);
    let out = args
        .out
        .as_ref()
        .or(args.params.as_ref())
        .ok_or_else(|| anyhow!("need --out when --params is absent"))?;
    write_scorer(out, &params)?;
    let confirmed = records.iter().filter(|r| r.confirmed).count();
    println!(
        "updated weights from {} records ({confirmed} confirmed) -> {}",
        records.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let samples = read_corpus(&args.corpus)?;
    let config = BenchConfig {
        strategies: args.strategies,
        reps: args.reps,
        detect: DetectConfig { budget_paths: args.budget, seed: args.seed, ..Default::default() },
    };
    let report = run_benchmark(&samples, &config);
    for s in &report.summary {
        let reduction = s
            .reduction_vs_dfs
            .map_or(String::from("-"), |r| format!("{:.1}%", r * 100.0));
        println!(
            "{:8} runs {:3}  detect {:5.1}%  median paths {:6.1}  vs dfs {}",
            s.strategy,
            s.runs,
            s.detection_rate * 100.0,
            s.median_paths,
            reduction
        );
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, to_csv(&report))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("rows -> {}", path.display());
    }
    Ok(0)
}

/// First detection of each malicious sample, replayed into signature
/// inputs.
fn detection_inputs(
    samples: &[(sleuth_core::pipeline::corpus::SampleMeta, Program)],
    budget: usize,
) -> Vec<SignatureInput> {
    let specs = builtin_specs();
    let backend = ScoreBackend::default();
    let mut inputs = Vec::new();
    for (meta, program) in samples {
        if meta.label != Label::Malicious {
            continue;
        }
        let config = DetectConfig { budget_paths: budget, ..Default::default() };
        let report = detect::<std::io::Sink>(program, &specs, &backend, &config, None);
        let Some(hit) = report.detections.first() else { continue };
        let run = explore(program, &hit.input, &ExploreConfig::default(), &VmConfig::default());
        let features = extract(&run.constraint, &run.trace, program);
        inputs.push(SignatureInput {
            name: meta.name.clone(),
            constraint: run.constraint,
            trace: run.trace,
            features,
        });
    }
    inputs
}

fn cmd_sign_synth(args: SignSynthArgs) -> Result<i32> {
    let samples = read_corpus(&args.corpus)?;
    let inputs = detection_inputs(&samples, args.budget);
    if inputs.is_empty() {
        bail!("no detections in corpus {}", args.corpus.display());
    }
    let config = SignatureConfig { eps: args.eps, min_pts: args.min_pts, ..Default::default() };
    let sigs = sleuth_core::signatures::synthesize(&inputs, &config);
    save_signatures(&args.out, &sigs)?;
    for sig in &sigs {
        println!(
            "{}: {} members, formula {}, constraint {}",
            sig.name,
            sig.members.len(),
            sig.formula,
            sig.constraint
        );
    }
    println!("{} signatures -> {}", sigs.len(), args.out.display());
    Ok(0)
}

fn cmd_sign_match(args: SignMatchArgs) -> Result<i32> {
    let program = load_program(&args.program)?;
    let sigs = load_signatures(&args.signatures)?;
    let compiled: Vec<_> = sigs.iter().map(compile).collect::<Result<_, _>>()?;
    let specs = builtin_specs();
    let backend = ScoreBackend::default();
    let config = DetectConfig { budget_paths: args.budget, ..Default::default() };
    let report = detect::<std::io::Sink>(&program, &specs, &backend, &config, None);
    let Some(hit) = report.detections.first() else {
        println!("no malicious path found");
        return Ok(0);
    };
    let run = explore(&program, &hit.input, &ExploreConfig::default(), &VmConfig::default());
    let budget = Budget::nodes(200_000);
    let mut matched = Vec::new();
    for sig in &compiled {
        if matches(sig, &run.constraint, &run.trace, &budget) {
            matched.push(sig.name.clone());
        }
    }
    if matched.is_empty() {
        println!("malicious path matches no known signature");
        Ok(0)
    } else {
        println!("matched: {}", matched.join(","));
        Ok(1)
    }
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Detect(args) => cmd_detect(args),
        Command::Run(args) => cmd_run(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Corpus(args) => cmd_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Sign(SignCommand::Synth(args)) => cmd_sign_synth(args),
        Command::Sign(SignCommand::Match(args)) => cmd_sign_match(args),
    }
}

fn main() {
    env_logger::init();
    match run() {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
