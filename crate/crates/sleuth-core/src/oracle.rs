//! Maliciousness scoring for path candidates.
//!
//! A [`PathContext`] packages what a scorer may look at: the canonical path
//! constraint text, a disassembly window, and the numeric features. Scoring
//! is pluggable: [`score_heuristic`] is a local logistic model over the
//! feature vector, and [`score_remote`] asks an external language model by
//! rendering the context into a fixed prompt. Remote failures degrade to a
//! neutral 0.5 so exploration keeps moving without the service.

use serde::{Deserialize, Serialize};

use crate::concolic::{ForkPoint, PathRun};
use crate::features::{
    self, build_cfg, cfg_features, static_syscall_bag, symbolic_features, FeatureVector,
    FEATURE_DIM, SYSCALL_OFFSET,
};
use crate::vm::{asm, Program, SyscallKind};

/// Everything a scorer may inspect about one path candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathContext {
    /// Canonical text of the path constraint.
    pub constraint: String,
    /// Disassembly window around the site of interest.
    pub disasm: String,
    pub features: FeatureVector,
}

/// Instruction width of the disassembly window shown to scorers.
pub const DISASM_WINDOW: usize = 16;

/// Context for a fork candidate. The constraint and its shape features are
/// the fork's own; the syscall bag is *static*, counted over the
/// disassembly window around the fork site, because the flipped branch has
/// not executed yet and its prefix trace carries no payload signal. CFG
/// features describe the parent trace up to the fork. Region-write slots
/// stay zero.
pub fn fork_context(program: &Program, parent: &PathRun, fork: &ForkPoint) -> PathContext {
    let disasm = asm::disassemble(program, fork.site, DISASM_WINDOW);
    let window_bag = static_syscall_bag(asm::window(program, fork.site, DISASM_WINDOW));
    let prefix = parent.trace.prefix(fork.step + 1);
    let cfg = build_cfg(program, &prefix);
    let features = features::assemble(
        symbolic_features(&fork.constraint),
        window_bag,
        [0.0; crate::vm::Region::ALL.len()],
        cfg_features(&cfg),
    );
    PathContext { constraint: fork.constraint.to_string(), disasm, features }
}

/// Context for a completed path: full dynamic features, disassembly
/// centered on the last executed location.
pub fn path_context(program: &Program, run: &PathRun) -> PathContext {
    let center = run.trace.locs.last().copied().unwrap_or(program.entry);
    let disasm = asm::disassemble(program, center, DISASM_WINDOW);
    let features = features::extract(&run.constraint, &run.trace, program);
    PathContext { constraint: run.constraint.to_string(), disasm, features }
}

/// Renders the scoring prompt for a context. The template is fixed;
/// remote-scored runs are only comparable when every path used the same
/// wording.
pub fn render_prompt(ctx: &PathContext) -> String {
    format!(
        "Analyze the following symbolic execution path constraint and disassembly context. \
Rate the likelihood (0.0-1.0) that this path leads to malicious behavior:\n\n\
Path Constraint: {}\nDisassembly: {}\nMaliciousness Score: ",
        ctx.constraint, ctx.disasm
    )
}

/// Logistic-model parameters for the local scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub vocab_hash: String,
}

impl ScorerParams {
    pub fn zeros() -> ScorerParams {
        ScorerParams {
            weights: vec![0.0; FEATURE_DIM],
            bias: 0.0,
            vocab_hash: features::vocabulary_hash(),
        }
    }

    /// Hand-set prior: danger-adjacent syscalls (send, setuid, mprotect,
    /// file write) weigh in at +1 against a -1 bias, so a window with none
    /// of them scores low and one or two of them score at or above 0.5.
    /// This is the untrained starting point that policy refinement improves.
    pub fn informed_prior() -> ScorerParams {
        let mut p = ScorerParams::zeros();
        for kind in [
            SyscallKind::Send,
            SyscallKind::Setuid,
            SyscallKind::Mprotect,
            SyscallKind::WriteFile,
        ] {
            p.weights[SYSCALL_OFFSET + kind.index()] = 1.0;
        }
        p.bias = -1.0;
        p
    }

    pub fn compatible(&self) -> bool {
        self.weights.len() == FEATURE_DIM && self.vocab_hash == features::vocabulary_hash()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Local scorer: logistic regression over the context's feature vector.
pub fn score_heuristic(params: &ScorerParams, ctx: &PathContext) -> f64 {
    score_features(params, &ctx.features)
}

/// The same model applied straight to a feature vector.
pub fn score_features(params: &ScorerParams, features: &FeatureVector) -> f64 {
    assert!(params.compatible(), "scorer parameters from an incompatible extractor");
    assert!(features.compatible(), "feature vector from an incompatible extractor");
    let dot: f64 = params
        .weights
        .iter()
        .zip(&features.values)
        .map(|(w, f)| w * f)
        .sum();
    sigmoid(dot + params.bias)
}

/// Remote scoring endpoint configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub timeout_millis: u64,
    pub max_retries: u32,
    /// Environment variable holding the bearer token, if the endpoint wants
    /// one.
    pub api_key_env: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8600/score".to_string(),
            model: "path-scorer".to_string(),
            temperature: 0.1,
            max_new_tokens: 10,
            timeout_millis: 10_000,
            max_retries: 2,
            api_key_env: "SCORER_API_KEY".to_string(),
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    prompt: String,
    temperature: f64,
    max_new_tokens: u32,
}

/// Pulls a score out of a response body: a numeric `score` field, or the
/// first float found in a `text` / `completion` field.
fn parse_score_body(body: &str) -> Option<f64> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    if let Some(s) = v.get("score").and_then(|s| s.as_f64()) {
        return Some(s.clamp(0.0, 1.0));
    }
    let text = v
        .get("text")
        .or_else(|| v.get("completion"))
        .and_then(|t| t.as_str())?;
    first_float(text).map(|s| s.clamp(0.0, 1.0))
}

fn first_float(text: &str) -> Option<f64> {
    let mut start = None;
    for (i, c) in text.char_indices() {
        match c {
            '0'..='9' | '.' => {
                if start.is_none() {
                    start = Some(i);
                }
            }
            _ => {
                if let Some(s) = start {
                    if let Ok(v) = text[s..i].parse::<f64>() {
                        return Some(v);
                    }
                    start = None;
                }
            }
        }
    }
    start.and_then(|s| text[s..].parse::<f64>().ok())
}

/// Neutral score used when the remote is unreachable or unparseable.
pub const REMOTE_FALLBACK_SCORE: f64 = 0.5;

/// Scores a context against the remote endpoint. Retries transient
/// failures; after the last attempt fails, returns
/// [`REMOTE_FALLBACK_SCORE`] so the caller's exploration loop never stalls
/// on the network.
pub fn score_remote(cfg: &RemoteConfig, ctx: &PathContext) -> f64 {
    let client = match reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_millis(cfg.timeout_millis))
        .build()
    {
        Ok(c) => c,
        Err(e) => {
            log::warn!("remote scorer client construction failed: {e}");
            return REMOTE_FALLBACK_SCORE;
        }
    };
    let request = ScoreRequest {
        model: &cfg.model,
        prompt: render_prompt(ctx),
        temperature: cfg.temperature,
        max_new_tokens: cfg.max_new_tokens,
    };
    let api_key = std::env::var(&cfg.api_key_env).ok();
    for attempt in 0..=cfg.max_retries {
        let mut req = client.post(&cfg.endpoint).json(&request);
        if let Some(key) = &api_key {
            req = req.bearer_auth(key);
        }
        match req.send().and_then(|r| r.error_for_status()).and_then(|r| r.text()) {
            Ok(body) => match parse_score_body(&body) {
                Some(score) => return score,
                None => {
                    log::warn!("remote scorer returned unparseable body: {body:?}");
                    return REMOTE_FALLBACK_SCORE;
                }
            },
            Err(e) => {
                log::warn!("remote scorer attempt {attempt} failed: {e}");
            }
        }
    }
    REMOTE_FALLBACK_SCORE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concolic::{explore, ExploreConfig};
    use crate::solver::parse_constraint;
    use crate::vm::{parse_program, VmConfig};

    fn sample_context() -> PathContext {
        let p = parse_program(
            "INPUT r0\nCONST r1, 66\nBR EQ r0, r1, hit\nHALT\nhit:\nREAD_FILE SENSITIVE_DOC\nSEND 1\nHALT\n",
        )
        .unwrap();
        let run = explore(&p, &[0], &ExploreConfig::default(), &VmConfig::default());
        fork_context(&p, &run, &run.forks[0])
    }

    #[test]
    fn prompt_is_bit_stable() {
        let ctx = PathContext {
            constraint: "(eq in[0] 66)".to_string(),
            disasm: "0000: INPUT r0".to_string(),
            features: FeatureVector::zeros(),
        };
        assert_eq!(
            render_prompt(&ctx),
            "Analyze the following symbolic execution path constraint and disassembly context. \
Rate the likelihood (0.0-1.0) that this path leads to malicious behavior:\n\n\
Path Constraint: (eq in[0] 66)\nDisassembly: 0000: INPUT r0\nMaliciousness Score: "
        );
    }

    #[test]
    fn fork_context_sees_static_payload_window() {
        let ctx = sample_context();
        assert_eq!(ctx.constraint, "(eq in[0] 66)");
        let send = ctx.features.values[SYSCALL_OFFSET + SyscallKind::Send.index()];
        let read = ctx.features.values[SYSCALL_OFFSET + SyscallKind::ReadFile.index()];
        assert_eq!(send, 1.0);
        assert_eq!(read, 1.0);
        assert!(ctx.disasm.contains("SEND 1"));
    }

    #[test]
    fn informed_prior_ranks_payload_forks_above_plain_ones() {
        let params = ScorerParams::informed_prior();
        let payload = sample_context();
        let p = parse_program(
            "INPUT r0\nCONST r1, 66\nBR EQ r0, r1, hit\nHALT\nhit:\nCONST r2, 1\nHALT\n",
        )
        .unwrap();
        let run = explore(&p, &[0], &ExploreConfig::default(), &VmConfig::default());
        let plain = fork_context(&p, &run, &run.forks[0]);
        let hot = score_heuristic(&params, &payload);
        let cold = score_heuristic(&params, &plain);
        assert!(hot > cold, "{hot} should beat {cold}");
        assert!(hot >= 0.5);
        assert!(cold < 0.5);
    }

    #[test]
    fn score_is_invariant_under_clause_reordering() {
        let params = ScorerParams::informed_prior();
        let a = parse_constraint("(and (ult in[0] 10) (eq in[1] 3))").unwrap();
        let b = parse_constraint("(and (eq in[1] 3) (ult in[0] 10))").unwrap();
        let fa = symbolic_features(&a);
        let fb = symbolic_features(&b);
        assert_eq!(fa, fb);
        let mk = |f: [f64; 4]| {
            crate::features::assemble(f, [0.0; 9], [0.0; 3], [1.0, 0.0, 1.0, 0.0])
        };
        assert_eq!(
            score_features(&params, &mk(fa)),
            score_features(&params, &mk(fb))
        );
    }

    #[test]
    fn parse_score_accepts_number_and_text() {
        assert_eq!(parse_score_body(r#"{"score": 0.84}"#), Some(0.84));
        assert_eq!(parse_score_body(r#"{"text": "0.93"}"#), Some(0.93));
        assert_eq!(parse_score_body(r#"{"completion": " 0.7 is my answer"}"#), Some(0.7));
        assert_eq!(parse_score_body(r#"{"score": 7.0}"#), Some(1.0));
        assert_eq!(parse_score_body(r#"{"other": 1}"#), None);
        assert_eq!(parse_score_body("not json"), None);
    }

    #[test]
    fn remote_scorer_round_trips_via_local_server() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 8192];
            let n = stream.read(&mut buf).unwrap();
            let request = String::from_utf8_lossy(&buf[..n]).to_string();
            let body = r#"{"text": "0.91"}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });
        let cfg = RemoteConfig {
            endpoint: format!("http://{addr}/score"),
            max_retries: 0,
            ..RemoteConfig::default()
        };
        let ctx = sample_context();
        let score = score_remote(&cfg, &ctx);
        assert_eq!(score, 0.91);
        let request = handle.join().unwrap();
        assert!(request.contains("Maliciousness Score"));
        assert!(request.contains("path-scorer"));
    }

    #[test]
    fn remote_scorer_falls_back_when_unreachable() {
        let cfg = RemoteConfig {
            endpoint: "http://127.0.0.1:9/score".to_string(),
            timeout_millis: 200,
            max_retries: 1,
            ..RemoteConfig::default()
        };
        let ctx = sample_context();
        assert_eq!(score_remote(&cfg, &ctx), REMOTE_FALLBACK_SCORE);
    }

    #[test]
    fn scorer_params_serde_round_trip() {
        let p = ScorerParams::informed_prior();
        let json = serde_json::to_string_pretty(&p).unwrap();
        let back: ScorerParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert!(back.compatible());
    }
}
