//! End-to-end tests of the `sleuth` binary: exit codes, report output,
//! and the corpus -> train -> sign workflow on tiny inputs.

use assert_cmd::Command;
use predicates::prelude::*;
use std::path::Path;

fn sleuth() -> Command {
    Command::cargo_bin("sleuth").unwrap()
}

fn write_program(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const EXFIL: &str = "\
.name cli-exfil
main:
    INPUT r0
    CONST r1, 0x42
    BR NE r0, r1, out
    READ_FILE SENSITIVE_DOC
    SEND 4
out:
    HALT
";

const QUIET: &str = "\
.name cli-quiet
main:
    INPUT r0
    GETUID r1
    ADD r2, r0, r1
    HALT
";

#[test]
fn detect_flags_exfil_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "exfil.asm", EXFIL);
    sleuth()
        .args(["detect"])
        .arg(&program)
        .assert()
        .code(1)
        .stdout(predicate::str::contains("\"malicious\": true"))
        .stdout(predicate::str::contains("\"exfil\""));
}

#[test]
fn detect_passes_quiet_program_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "quiet.asm", QUIET);
    sleuth()
        .args(["detect"])
        .arg(&program)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("\"malicious\": false"));
}

#[test]
fn detect_report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "exfil.asm", EXFIL);
    let report = dir.path().join("report.json");
    let out = sleuth()
        .args(["detect"])
        .arg(&program)
        .arg("--report")
        .arg(&report)
        .assert()
        .code(1)
        .get_output()
        .stdout
        .clone();
    assert_eq!(std::fs::read(&report).unwrap(), out);
}

#[test]
fn detect_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "exfil.asm", EXFIL);
    let run = |seed: &str| {
        sleuth()
            .args(["detect", "--strategy", "random", "--seed", seed])
            .arg(&program)
            .assert()
            .get_output()
            .stdout
            .clone()
    };
    assert_eq!(run("9"), run("9"));
    assert_ne!(run("9"), run("10"), "seed must land in the report");
}

#[test]
fn detect_rejects_missing_file_with_exit_two() {
    sleuth()
        .args(["detect", "/nonexistent/zzz.asm"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("error:"));
}

#[test]
fn detect_writes_exploration_log() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "exfil.asm", EXFIL);
    let log = dir.path().join("explore.jsonl");
    sleuth()
        .args(["detect"])
        .arg(&program)
        .arg("--log")
        .arg(&log)
        .assert()
        .code(1);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().any(|l| l.contains("\"kind\":\"fork\"")), "log: {text}");
    assert!(text.lines().any(|l| l.contains("\"kind\":\"path\"")), "log: {text}");
}

#[test]
fn run_prints_trace_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let program = write_program(dir.path(), "exfil.asm", EXFIL);
    sleuth()
        .args(["run", "--input", "66", "--trace"])
        .arg(&program)
        .assert()
        .code(1)
        .stdout(predicate::str::contains("matched: exfil"))
        .stdout(predicate::str::contains("ReadFile"));
    sleuth()
        .args(["run", "--input", "0"])
        .arg(&program)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("matched: -"));
}

#[test]
fn solve_reports_sat_unsat() {
    sleuth()
        .args(["solve", "(and (eq in[0] 7) (ult in[1] 3))"])
        .assert()
        .code(0)
        .stdout(predicate::str::contains("sat in[0]=7 in[1]=0"));
    sleuth()
        .args(["solve", "(and (eq in[0] 7) (eq in[0] 8))"])
        .assert()
        .code(1)
        .stdout(predicate::str::contains("unsat"));
    sleuth().args(["solve", "(bogus"]).assert().code(2);
}

#[test]
fn corpus_bench_train_sign_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("corpus.toml");
    std::fs::write(
        &spec,
        "name = \"cli\"\nseed = 5\nmalicious = 2\nbenign = 2\ntrigger_bytes = 1\nvariants = 2\n",
    )
    .unwrap();
    let corpus = dir.path().join("corpus");
    sleuth()
        .args(["corpus", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&corpus)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("4 malicious"));
    assert!(corpus.join("manifest.json").is_file());

    let csv = dir.path().join("bench.csv");
    sleuth()
        .args(["bench", "--budget", "30", "--strategies", "guided,dfs", "--corpus"])
        .arg(&corpus)
        .arg("--csv")
        .arg(&csv)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("guided"));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("strategy,sample,rep,detected"));

    let model = dir.path().join("model.json");
    sleuth()
        .args(["train", "--epochs", "2", "--batch-size", "4", "--max-len", "32", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&model)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("final accuracy"));
    let sample = corpus.join("samples").join("mal-000-exfil.asm");
    sleuth()
        .args(["detect", "--model"])
        .arg(&model)
        .arg(&sample)
        .assert()
        .code(1);

    let sigs = dir.path().join("sigs.json");
    sleuth()
        .args(["sign", "synth", "--min-pts", "2", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&sigs)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("family-0"));
    sleuth()
        .args(["sign", "match", "--signatures"])
        .arg(&sigs)
        .arg(corpus.join("samples").join("mal-000-exfil-v1.asm"))
        .assert()
        .code(1)
        .stdout(predicate::str::contains("matched: family-"));
}

#[test]
fn refine_updates_weights_file() {
    let dir = tempfile::tempdir().unwrap();
    let exfil = write_program(dir.path(), "exfil.asm", EXFIL);
    let report_path = dir.path().join("report.json");
    sleuth()
        .args(["detect"])
        .arg(&exfil)
        .arg("--report")
        .arg(&report_path)
        .assert()
        .code(1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let detection = &report["detections"][0];

    // Build a history record from the reported detection by re-extracting
    // features through the run subcommand's machinery is overkill here; the
    // report does not carry the vector, so refine from a handmade record
    // with the library's own vocabulary hash.
    let vocab = report["vocab_hash"].as_str().unwrap();
    let mut values = vec![0.0; 20];
    values[0] = 1.0;
    values[5] = 1.0;
    let record = serde_json::json!({
        "features": {"version": 1, "vocab_hash": vocab, "values": values},
        "score": detection["score"],
        "weight": 1.0,
        "confirmed": true,
    });
    let history = dir.path().join("history.jsonl");
    std::fs::write(&history, format!("{record}\n")).unwrap();

    let weights = dir.path().join("weights.json");
    sleuth()
        .args(["refine", "--alpha", "0.1", "--history"])
        .arg(&history)
        .arg("--out")
        .arg(&weights)
        .assert()
        .code(0)
        .stdout(predicate::str::contains("1 confirmed"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&weights).unwrap()).unwrap();
    assert!(parsed["weights"].as_array().unwrap().len() == 20);
}
