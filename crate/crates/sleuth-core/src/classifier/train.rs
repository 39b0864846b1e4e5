//! Training loop for the path classifier.
//!
//! Loss is binary cross-entropy with class weights and label smoothing.
//! Misclassifying a benign path as malicious is the expensive error in
//! triage, so the benign (negative) class carries `fp_weight` while the
//! malicious class carries `fn_weight`. Optimization is plain gradient
//! descent with decoupled weight decay, cosine-annealed learning rate with
//! warm restarts, and global-norm gradient clipping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{backward, forward, Layout};
use super::Classifier;
use crate::features::FeatureVector;

/// Hyperparameters. Defaults are the reference configuration; tests that
/// need faster convergence on tiny fixtures override `lr` per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub fp_weight: f64,
    pub fn_weight: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
    /// Epochs in the first cosine cycle.
    pub restart_period: usize,
    /// Cycle length multiplier after each restart.
    pub restart_mult: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.01,
            fp_weight: 5.0,
            fn_weight: 1.0,
            dropout: 0.1,
            label_smoothing: 0.05,
            grad_clip: 1.0,
            restart_period: 10,
            restart_mult: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("training set has only {0} examples; both classes are required")]
    SingleClass(&'static str),
}

/// Per-epoch record for reporting and regression tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_accuracy: f64,
}

/// Smoothed target: pulls hard labels `label_smoothing` toward the other
/// class.
pub fn smooth_label(y: bool, eps: f64) -> f64 {
    if y {
        1.0 - eps
    } else {
        eps
    }
}

/// Weighted smoothed BCE for one example.
pub fn sample_loss(score: f64, y: bool, cfg: &TrainConfig) -> f64 {
    let yt = smooth_label(y, cfg.label_smoothing);
    let s = score.clamp(1e-12, 1.0 - 1e-12);
    -(cfg.fn_weight * yt * s.ln() + cfg.fp_weight * (1.0 - yt) * (1.0 - s).ln())
}

/// dL/dz for the weighted smoothed BCE through the sigmoid. The malicious
/// term contributes `-fn_weight * yt * (1 - s)`, the benign term
/// `fp_weight * (1 - yt) * s`; both scale linearly in their weight.
pub fn loss_dlogit(score: f64, y: bool, cfg: &TrainConfig) -> f64 {
    let yt = smooth_label(y, cfg.label_smoothing);
    -cfg.fn_weight * yt * (1.0 - score) + cfg.fp_weight * (1.0 - yt) * score
}

/// Cosine annealing with warm restarts, evaluated at an epoch index.
/// Within a cycle of length `t_i`, the rate decays from `lr` to 0 along a
/// half cosine, then the cycle restarts with `t_i * restart_mult`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut t_i = cfg.restart_period.max(1);
    let mut t_cur = epoch;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i = t_i.saturating_mul(cfg.restart_mult.max(1));
    }
    let frac = t_cur as f64 / t_i as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales `grads` in place so its global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [f64], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

impl Classifier {
    /// Trains in place over `(features, is_malicious)` pairs. Refuses
    /// single-class sets: the weighted loss would just saturate the bias.
    pub fn train(
        &mut self,
        data: &[(FeatureVector, bool)],
        cfg: &TrainConfig,
    ) -> Result<TrainReport, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Empty);
        }
        if data.iter().all(|(_, y)| *y) {
            return Err(TrainError::SingleClass("malicious"));
        }
        if data.iter().all(|(_, y)| !*y) {
            return Err(TrainError::SingleClass("benign"));
        }
        let layout = Layout::of(&self.config);
        let tokenized: Vec<(Vec<usize>, bool)> =
            data.iter().map(|(f, y)| (self.tokenize(f), *y)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..tokenized.len()).collect();
        let mut grads = vec![0.0; layout.total];
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let lr = lr_at_epoch(cfg, epoch);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                for &i in chunk {
                    let (tokens, y) = &tokenized[i];
                    let cache = if cfg.dropout > 0.0 {
                        let mut gen = || rng.gen::<f64>();
                        forward(
                            &self.config,
                            &layout,
                            &self.params,
                            tokens,
                            Some((cfg.dropout, &mut gen)),
                        )
                    } else {
                        forward(&self.config, &layout, &self.params, tokens, None)
                    };
                    loss_sum += sample_loss(cache.score, *y, cfg);
                    let dlogit = loss_dlogit(cache.score, *y, cfg);
                    backward(&self.config, &layout, &self.params, &cache, dlogit, &mut grads);
                }
                let inv = 1.0 / chunk.len() as f64;
                grads.iter_mut().for_each(|g| *g *= inv);
                clip_global_norm(&mut grads, cfg.grad_clip);
                for (p, g) in self.params.iter_mut().zip(&grads) {
                    // Decoupled decay: shrink weights, then take the step.
                    *p -= lr * cfg.weight_decay * *p + lr * g;
                }
            }
            let accuracy = self.accuracy_tokens(&tokenized, &layout);
            epochs.push(EpochStats {
                epoch,
                lr,
                mean_loss: loss_sum / tokenized.len() as f64,
                accuracy,
            });
        }
        let final_accuracy = epochs.last().map(|e| e.accuracy).unwrap_or(0.0);
        Ok(TrainReport { epochs, final_accuracy })
    }

    fn accuracy_tokens(&self, tokenized: &[(Vec<usize>, bool)], layout: &Layout) -> f64 {
        let correct = tokenized
            .iter()
            .filter(|(tokens, y)| {
                let s = forward(&self.config, layout, &self.params, tokens, None).score;
                (s >= super::DEFAULT_THRESHOLD) == *y
            })
            .count();
        correct as f64 / tokenized.len() as f64
    }

    /// Training accuracy on a labeled set at the default threshold.
    pub fn accuracy(&self, data: &[(FeatureVector, bool)]) -> f64 {
        let layout = Layout::of(&self.config);
        let tokenized: Vec<(Vec<usize>, bool)> =
            data.iter().map(|(f, y)| (self.tokenize(f), *y)).collect();
        self.accuracy_tokens(&tokenized, &layout)
    }

    /// Maximum relative error between the analytic gradient and a central
    /// finite difference of the loss, over every parameter. Dropout is off
    /// so the loss is deterministic.
    pub fn gradient_check(&self, features: &FeatureVector, y: bool, cfg: &TrainConfig) -> f64 {
        let layout = Layout::of(&self.config);
        let tokens = self.tokenize(features);
        let cache = forward(&self.config, &layout, &self.params, &tokens, None);
        let mut grads = vec![0.0; layout.total];
        backward(
            &self.config,
            &layout,
            &self.params,
            &cache,
            loss_dlogit(cache.score, y, cfg),
            &mut grads,
        );
        let mut params = self.params.clone();
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for i in 0..layout.total {
            let orig = params[i];
            params[i] = orig + h;
            let up =
                sample_loss(forward(&self.config, &layout, &params, &tokens, None).score, y, cfg);
            params[i] = orig - h;
            let down =
                sample_loss(forward(&self.config, &layout, &params, &tokens, None).score, y, cfg);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        max_rel
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelConfig;
    use crate::features::{FeatureVector, FEATURE_DIM, SYSCALL_OFFSET};
    use crate::vm::SyscallKind;

    fn feature_with_sends(n: f64) -> FeatureVector {
        let mut v = vec![0.0; FEATURE_DIM];
        v[0] = 2.0;
        v[1] = 3.0;
        v[SYSCALL_OFFSET + SyscallKind::Send.index()] = n;
        FeatureVector::new(v)
    }

    fn tiny_model() -> Classifier {
        Classifier::init(
            ModelConfig { d_model: 8, n_heads: 2, n_layers: 1, d_ff: 12, max_len: 16 },
            3,
        )
    }

    #[test]
    fn schedule_restarts_and_decays() {
        let cfg = TrainConfig { lr: 1.0, restart_period: 4, restart_mult: 2, ..Default::default() };
        assert!((lr_at_epoch(&cfg, 0) - 1.0).abs() < 1e-12);
        assert!(lr_at_epoch(&cfg, 3) < lr_at_epoch(&cfg, 1));
        // Epoch 4 starts the second cycle back at full rate.
        assert!((lr_at_epoch(&cfg, 4) - 1.0).abs() < 1e-12);
        // Second cycle is twice as long: epoch 4 + 8 = 12 restarts again.
        assert!((lr_at_epoch(&cfg, 12) - 1.0).abs() < 1e-12);
        assert!(lr_at_epoch(&cfg, 11) < 0.1);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![3.0, 4.0];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn benign_gradient_scales_linearly_in_fp_weight() {
        let base = TrainConfig { fp_weight: 1.0, label_smoothing: 0.0, ..Default::default() };
        let doubled = TrainConfig { fp_weight: 2.0, ..base.clone() };
        for s in [0.1, 0.5, 0.9] {
            let g1 = loss_dlogit(s, false, &base);
            let g2 = loss_dlogit(s, false, &doubled);
            assert_eq!(g2, 2.0 * g1);
            assert_eq!(sample_loss(s, false, &doubled), 2.0 * sample_loss(s, false, &base));
        }
    }

    #[test]
    fn smoothing_moves_targets_off_the_rails() {
        assert_eq!(smooth_label(true, 0.05), 0.95);
        assert_eq!(smooth_label(false, 0.05), 0.05);
        assert_eq!(smooth_label(true, 0.0), 1.0);
    }

    #[test]
    fn refuses_single_class_sets() {
        let mut model = tiny_model();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let all_pos = vec![(feature_with_sends(2.0), true)];
        assert!(matches!(model.train(&all_pos, &cfg), Err(TrainError::SingleClass("malicious"))));
        let all_neg = vec![(feature_with_sends(0.0), false)];
        assert!(matches!(model.train(&all_neg, &cfg), Err(TrainError::SingleClass("benign"))));
        assert!(matches!(model.train(&[], &cfg), Err(TrainError::Empty)));
    }

    fn exfil_like(variant: u64) -> FeatureVector {
        let mut v = vec![0.0; FEATURE_DIM];
        v[0] = 2.0;
        v[1] = 6.0 + (variant % 3) as f64;
        v[SYSCALL_OFFSET + SyscallKind::ReadFile.index()] = 1.0;
        v[SYSCALL_OFFSET + SyscallKind::Send.index()] = 2.0 + (variant % 2) as f64;
        v[crate::features::REGION_OFFSET] = 1.0;
        v[crate::features::CFG_OFFSET] = 5.0;
        v[crate::features::CFG_OFFSET + 1] = 5.0;
        FeatureVector::new(v)
    }

    fn quiet_like(variant: u64) -> FeatureVector {
        let mut v = vec![0.0; FEATURE_DIM];
        v[0] = 1.0;
        v[1] = 2.0;
        v[SYSCALL_OFFSET + SyscallKind::Getuid.index()] = 1.0 + (variant % 2) as f64;
        v[crate::features::CFG_OFFSET] = 3.0;
        v[crate::features::CFG_OFFSET + 1] = 2.0;
        FeatureVector::new(v)
    }

    #[test]
    fn training_separates_a_simple_fixture() {
        let mut model = tiny_model();
        let mut data = Vec::new();
        for i in 0..8u64 {
            data.push((exfil_like(i), true));
            data.push((quiet_like(i), false));
        }
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 2,
            lr: 0.05,
            dropout: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let report = model.train(&data, &cfg).unwrap();
        assert!(
            report.final_accuracy >= 0.99,
            "accuracy {} after {} epochs",
            report.final_accuracy,
            report.epochs.len()
        );
        assert!(model.score(&exfil_like(0)) > model.score(&quiet_like(0)));
    }

    #[test]
    fn gradient_check_on_tiny_model() {
        let model = tiny_model();
        let cfg = TrainConfig::default();
        let err = model.gradient_check(&feature_with_sends(2.0), true, &cfg);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let data: Vec<(FeatureVector, bool)> = (0..6)
            .map(|i| (feature_with_sends(i as f64), i % 2 == 0))
            .collect();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..Default::default() };
        let mut a = tiny_model();
        let mut b = tiny_model();
        let ra = a.train(&data, &cfg).unwrap();
        let rb = b.train(&data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(
            ra.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
            rb.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>()
        );
    }
}
