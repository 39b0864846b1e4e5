//! Transformer-based path classifier.
//!
//! Feature vectors are rendered into short token sequences: a CLS marker,
//! log-bucketed magnitude tokens for the constraint-shape group, one token
//! per observed syscall, then bucketed CFG and memory-write counts, padded
//! to the model's sequence length. A small encoder (see [`model`]) reads
//! the sequence and emits a maliciousness score in (0, 1); `score >=`
//! [`DEFAULT_THRESHOLD`] flags the path. Training lives in [`train`].
//!
//! Checkpoints are JSON and carry the feature vocabulary hash; loading
//! rejects checkpoints built against a different feature layout.

pub mod model;
pub mod train;

pub use model::{Layout, ModelConfig};
pub use train::{TrainConfig, TrainError, TrainReport};

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::features::{
    vocabulary_hash, FeatureVector, CFG_OFFSET, CONSTRAINT_OFFSET, REGION_OFFSET, SYSCALL_OFFSET,
};
use crate::vm::SyscallKind;

pub const PAD_TOKEN: usize = 0;
pub const CLS_TOKEN: usize = 1;
/// Log-spaced magnitude buckets for numeric features.
pub const NUM_BUCKETS: usize = 16;
const NUM_BASE: usize = 2;
const SYSCALL_BASE: usize = NUM_BASE + NUM_BUCKETS;
pub const VOCAB_SIZE: usize = SYSCALL_BASE + SyscallKind::ALL.len();

/// Scores at or above this are classified malicious.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Magnitude bucket: 0 stays 0, positive values land in
/// `floor(log2(v)) + 1`, clamped to the top bucket.
pub fn magnitude_bucket(v: f64) -> usize {
    if v < 1.0 {
        0
    } else {
        (((v.log2().floor() as i64) + 1).min(NUM_BUCKETS as i64 - 1)) as usize
    }
}

fn num_token(v: f64) -> usize {
    NUM_BASE + magnitude_bucket(v)
}

pub fn syscall_token(kind: SyscallKind) -> usize {
    SYSCALL_BASE + kind.index()
}

/// Renders a feature vector as a padded token sequence of length
/// `max_len`. The syscall segment repeats each kind's token once per
/// occurrence and is truncated first when space runs out.
pub fn token_sequence(features: &FeatureVector, max_len: usize) -> Vec<usize> {
    let v = &features.values;
    let mut tokens = vec![CLS_TOKEN];
    for i in CONSTRAINT_OFFSET..SYSCALL_OFFSET {
        tokens.push(num_token(v[i]));
    }
    // Reserve room for the cfg and region groups that follow.
    let tail = (v.len() - CFG_OFFSET) + (CFG_OFFSET - REGION_OFFSET);
    let room = max_len.saturating_sub(tokens.len() + tail);
    let mut used = 0;
    'outer: for kind in SyscallKind::ALL {
        let count = v[SYSCALL_OFFSET + kind.index()].max(0.0) as usize;
        for _ in 0..count {
            if used == room {
                break 'outer;
            }
            tokens.push(syscall_token(kind));
            used += 1;
        }
    }
    for i in CFG_OFFSET..v.len() {
        tokens.push(num_token(v[i]));
    }
    for i in REGION_OFFSET..CFG_OFFSET {
        tokens.push(num_token(v[i]));
    }
    tokens.resize(max_len, PAD_TOKEN);
    tokens
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint feature vocabulary {got} does not match current {want}")]
    VocabMismatch { got: String, want: String },
    #[error("checkpoint holds {got} parameters but the config needs {want}")]
    ParamCount { got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A scoring model: encoder shape plus its flat parameter vector.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

impl Classifier {
    /// Randomly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Classifier {
        let params = model::init_params(&config, seed);
        Classifier { config, params }
    }

    /// Initialized encoder with a zeroed output head, so every input
    /// scores exactly 0.5 until training moves the head.
    pub fn neutral(config: ModelConfig) -> Classifier {
        let mut c = Classifier::init(config, 0);
        let layout = Layout::of(&c.config);
        for i in layout.head_w1.start..layout.head_b2.end {
            c.params[i] = 0.0;
        }
        c
    }

    pub fn tokenize(&self, features: &FeatureVector) -> Vec<usize> {
        token_sequence(features, self.config.max_len)
    }

    /// Maliciousness score in (0, 1); deterministic (no dropout).
    pub fn score(&self, features: &FeatureVector) -> f64 {
        let layout = Layout::of(&self.config);
        model::forward(&self.config, &layout, &self.params, &self.tokenize(features), None).score
    }

    pub fn classify(&self, features: &FeatureVector, threshold: f64) -> bool {
        self.score(features) >= threshold
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab_hash: vocabulary_hash(),
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Classifier, CheckpointError> {
        let want = vocabulary_hash();
        if ckpt.vocab_hash != want {
            return Err(CheckpointError::VocabMismatch { got: ckpt.vocab_hash, want });
        }
        let need = Layout::of(&ckpt.config).total;
        if ckpt.params.len() != need {
            return Err(CheckpointError::ParamCount { got: ckpt.params.len(), want: need });
        }
        Ok(Classifier { config: ckpt.config, params: ckpt.params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Classifier, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Classifier::from_checkpoint(ckpt)
    }
}
