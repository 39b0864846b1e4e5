//! Reward-driven refinement of the heuristic path scorer.
//!
//! Every explored path that reaches a verdict becomes a [`DetectionRecord`]:
//! the fork's feature vector, the score the policy gave it, the priority
//! weight it was queued with, and whether temporal verification confirmed
//! malice. Records accumulate across runs in a JSONL history file.
//!
//! Refinement treats the scorer as a stochastic selection policy and does a
//! REINFORCE-style ascent step: confirmed detections earn `+1.0` scaled by
//! their priority weight, false alarms cost `-0.1` scaled the same way, and
//! the policy gradient for the logistic scorer is `r * (1 - s) * f` per
//! record. One call to [`policy_update`] applies the averaged step.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

use crate::features::FeatureVector;
use crate::oracle::{score_features, ScorerParams};

/// Reward for a path whose verdict was confirmed malicious.
pub const CONFIRMED_REWARD: f64 = 1.0;
/// Penalty for a flagged path that verification rejected.
pub const FALSE_ALARM_PENALTY: f64 = -0.1;

/// One scored path with its eventual verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Fork-candidate features the policy scored.
    pub features: FeatureVector,
    /// Score the policy assigned when the path was queued.
    pub score: f64,
    /// Priority weight the path carried in the exploration queue.
    pub weight: f64,
    /// Whether temporal verification confirmed the path as malicious.
    pub confirmed: bool,
}

impl DetectionRecord {
    pub fn reward(&self) -> f64 {
        if self.confirmed {
            CONFIRMED_REWARD * self.weight
        } else {
            FALSE_ALARM_PENALTY * self.weight
        }
    }
}

/// Rewards in record order.
pub fn compute_rewards(records: &[DetectionRecord]) -> Vec<f64> {
    records.iter().map(DetectionRecord::reward).collect()
}

/// Expected-reward surrogate `J = mean(r * ln s)` under the current
/// parameters; [`policy_update`] ascends its gradient.
pub fn objective(params: &ScorerParams, records: &[DetectionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let sum: f64 = records
        .iter()
        .map(|rec| {
            let s = score_features(params, &rec.features).clamp(1e-12, 1.0 - 1e-12);
            rec.reward() * s.ln()
        })
        .sum();
    sum / records.len() as f64
}

/// Analytic gradient of [`objective`]: per record `r * (1 - s) * f` for the
/// weights and `r * (1 - s)` for the bias, averaged.
pub fn policy_gradient(params: &ScorerParams, records: &[DetectionRecord]) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = 0.0;
    if records.is_empty() {
        return (gw, gb);
    }
    for rec in records {
        let s = score_features(params, &rec.features);
        let coeff = rec.reward() * (1.0 - s);
        for (g, f) in gw.iter_mut().zip(&rec.features.values) {
            *g += coeff * f;
        }
        gb += coeff;
    }
    let inv = 1.0 / records.len() as f64;
    gw.iter_mut().for_each(|g| *g *= inv);
    (gw, gb * inv)
}

/// One ascent step `theta += alpha * grad J`. The step is linear in
/// `alpha`: doubling the rate exactly doubles the parameter delta.
pub fn policy_update(params: &mut ScorerParams, records: &[DetectionRecord], alpha: f64) {
    let (gw, gb) = policy_gradient(params, records);
    for (w, g) in params.weights.iter_mut().zip(&gw) {
        *w += alpha * g;
    }
    params.bias += alpha * gb;
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads a JSONL history file; blank lines are skipped.
pub fn read_history(path: &Path) -> Result<Vec<DetectionRecord>, HistoryError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|source| HistoryError::Parse { line: i + 1, source })?;
        records.push(rec);
    }
    Ok(records)
}

/// Appends records to a JSONL history file, creating it if needed.
pub fn append_history(path: &Path, records: &[DetectionRecord]) -> Result<(), HistoryError> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureVector, FEATURE_DIM, SYSCALL_OFFSET};
    use crate::vm::SyscallKind;

    fn record(send_count: f64, weight: f64, confirmed: bool) -> DetectionRecord {
        let mut v = vec![0.0; FEATURE_DIM];
        v[0] = 1.0;
        v[SYSCALL_OFFSET + SyscallKind::Send.index()] = send_count;
        let features = FeatureVector::new(v);
        let score = score_features(&ScorerParams::informed_prior(), &features);
        DetectionRecord { features, score, weight, confirmed }
    }

    #[test]
    fn rewards_scale_with_priority_weight() {
        let records =
            vec![record(2.0, 1.0, true), record(0.0, 0.5, false), record(1.0, 0.25, true)];
        assert_eq!(compute_rewards(&records), vec![1.0, -0.05, 0.25]);
    }

    #[test]
    fn confirmed_detections_raise_their_score() {
        let mut params = ScorerParams::informed_prior();
        let rec = record(2.0, 1.0, true);
        let before = score_features(&params, &rec.features);
        policy_update(&mut params, &[rec.clone()], 0.5);
        let after = score_features(&params, &rec.features);
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn false_alarms_lower_their_score() {
        let mut params = ScorerParams::informed_prior();
        let rec = record(3.0, 1.0, false);
        let before = score_features(&params, &rec.features);
        policy_update(&mut params, &[rec.clone()], 0.5);
        let after = score_features(&params, &rec.features);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn update_is_linear_in_the_step_size() {
        let records = vec![record(2.0, 1.0, true), record(1.0, 0.5, false)];
        let base = ScorerParams::informed_prior();
        let mut once = base.clone();
        policy_update(&mut once, &records, 0.1);
        let mut twice = base.clone();
        policy_update(&mut twice, &records, 0.2);
        for ((w0, w1), w2) in base.weights.iter().zip(&once.weights).zip(&twice.weights) {
            let d1 = w1 - w0;
            let d2 = w2 - w0;
            assert_eq!(d2, 2.0 * d1);
        }
        assert_eq!(twice.bias - base.bias, 2.0 * (once.bias - base.bias));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let records = vec![
            record(2.0, 1.0, true),
            record(0.0, 0.5, false),
            record(4.0, 0.75, true),
            record(1.0, 0.3, false),
        ];
        let params = ScorerParams::informed_prior();
        let (gw, gb) = policy_gradient(&params, &records);
        let h = 1e-6;
        let mut max_err = 0.0f64;
        for i in 0..params.weights.len() {
            let mut up = params.clone();
            up.weights[i] += h;
            let mut down = params.clone();
            down.weights[i] -= h;
            let numeric = (objective(&up, &records) - objective(&down, &records)) / (2.0 * h);
            max_err = max_err.max((gw[i] - numeric).abs());
        }
        let mut up = params.clone();
        up.bias += h;
        let mut down = params.clone();
        down.bias -= h;
        let numeric = (objective(&up, &records) - objective(&down, &records)) / (2.0 * h);
        max_err = max_err.max((gb - numeric).abs());
        assert!(max_err < 1e-6, "max abs error {max_err}");
    }

    #[test]
    fn empty_history_is_a_no_op() {
        let mut params = ScorerParams::informed_prior();
        let before = params.clone();
        policy_update(&mut params, &[], 1.0);
        assert_eq!(params.weights, before.weights);
        assert_eq!(params.bias, before.bias);
        assert_eq!(objective(&params, &[]), 0.0);
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let first = vec![record(2.0, 1.0, true)];
        let second = vec![record(0.0, 0.5, false), record(1.0, 0.25, true)];
        append_history(&path, &first).unwrap();
        append_history(&path, &second).unwrap();
        let back = read_history(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].weight, 1.0);
        assert!(back[0].confirmed);
        assert_eq!(back[2].weight, 0.25);
        assert_eq!(compute_rewards(&back), vec![1.0, -0.05, 0.25]);
    }

    #[test]
    fn bad_history_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        std::fs::write(&path, "{\"not\": \"a record\"}\n").unwrap();
        match read_history(&path) {
            Err(HistoryError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
