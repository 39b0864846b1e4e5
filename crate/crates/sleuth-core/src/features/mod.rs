//! Numeric path summaries consumed by the scorer and the classifier.
//!
//! A feature vector concatenates four groups, always in this order:
//!
//! | slots   | group                                                    |
//! |---------|----------------------------------------------------------|
//! | 0..4    | constraint shape: distinct symbolic bytes, max clause    |
//! |         | depth, or-connective count, bitwise-heavy clause count   |
//! | 4..13   | syscall bag, one slot per kind in vocabulary order       |
//! | 13..16  | memory writes per region (text, data, stack)             |
//! | 16..20  | CFG shape: nodes, edges, cyclomatic complexity, deepest  |
//! |         | loop nesting                                             |
//!
//! Vectors carry a layout version and a hash of the vocabulary they were
//! extracted under, so downstream consumers (classifier checkpoints,
//! signatures) can refuse inputs from an incompatible extractor.

mod cfg;

pub use cfg::{build_cfg, static_syscall_bag, Cfg, NaturalLoop};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::solver::{BinOp, PathConstraint, SymExpr, UnOp};
use crate::vm::{Program, Region, SyscallKind, Trace, TraceEvent};

/// Total feature dimension.
pub const FEATURE_DIM: usize = 4 + SyscallKind::ALL.len() + Region::ALL.len() + 4;

/// Bump when the layout above changes shape or meaning.
pub const FEATURE_VERSION: u32 = 1;

/// First slot of each group.
pub const CONSTRAINT_OFFSET: usize = 0;
pub const SYSCALL_OFFSET: usize = 4;
pub const REGION_OFFSET: usize = SYSCALL_OFFSET + SyscallKind::ALL.len();
pub const CFG_OFFSET: usize = REGION_OFFSET + Region::ALL.len();

/// SHA-256 over the canonical layout description. Changes whenever the
/// dimension, ordering, or any vocabulary name changes.
pub fn vocabulary_hash() -> String {
    let mut desc = format!("path-features v{FEATURE_VERSION} dim={FEATURE_DIM};constraint=[sym_bytes,max_depth,or_count,bitwise_clauses];syscalls=[");
    for k in SyscallKind::ALL {
        desc.push_str(k.name());
        desc.push(',');
    }
    desc.push_str("];regions=[");
    for r in Region::ALL {
        desc.push_str(r.name());
        desc.push(',');
    }
    desc.push_str("];cfg=[nodes,edges,cyclomatic,loop_nesting]");
    let digest = Sha256::digest(desc.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A versioned feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub version: u32,
    pub vocab_hash: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> FeatureVector {
        assert_eq!(values.len(), FEATURE_DIM);
        FeatureVector { version: FEATURE_VERSION, vocab_hash: vocabulary_hash(), values }
    }

    pub fn zeros() -> FeatureVector {
        FeatureVector::new(vec![0.0; FEATURE_DIM])
    }

    /// Does this vector come from the extractor compiled into this binary?
    pub fn compatible(&self) -> bool {
        self.version == FEATURE_VERSION
            && self.vocab_hash == vocabulary_hash()
            && self.values.len() == FEATURE_DIM
    }
}

fn clause_has_bitwise(e: &SymExpr) -> bool {
    match e {
        SymExpr::Const(_) | SymExpr::SymByte(_) => false,
        SymExpr::Unary(UnOp::Not, _) => true,
        SymExpr::Unary(UnOp::Neg, a) => clause_has_bitwise(a),
        SymExpr::Binary(op, a, b) => {
            matches!(op, BinOp::And | BinOp::Or | BinOp::Xor | BinOp::Shl | BinOp::Shr)
                || clause_has_bitwise(a)
                || clause_has_bitwise(b)
        }
        SymExpr::Cmp(_, a, b) | SymExpr::BoolAnd(a, b) | SymExpr::BoolOr(a, b) => {
            clause_has_bitwise(a) || clause_has_bitwise(b)
        }
        SymExpr::BoolNot(a) => clause_has_bitwise(a),
    }
}

fn count_bool_or(e: &SymExpr) -> usize {
    match e {
        SymExpr::Const(_) | SymExpr::SymByte(_) => 0,
        SymExpr::Unary(_, a) | SymExpr::BoolNot(a) => count_bool_or(a),
        SymExpr::Binary(_, a, b) | SymExpr::Cmp(_, a, b) | SymExpr::BoolAnd(a, b) => {
            count_bool_or(a) + count_bool_or(b)
        }
        SymExpr::BoolOr(a, b) => 1 + count_bool_or(a) + count_bool_or(b),
    }
}

/// Constraint-shape features: distinct symbolic bytes, deepest clause,
/// or-connective count, clauses containing bitwise operations.
pub fn symbolic_features(pc: &PathConstraint) -> [f64; 4] {
    let sym_bytes = pc.sym_bytes().len() as f64;
    let max_depth = pc.clauses.iter().map(|c| c.depth()).max().unwrap_or(0) as f64;
    let or_count: usize = pc.clauses.iter().map(count_bool_or).sum();
    let bitwise = pc.clauses.iter().filter(|c| clause_has_bitwise(c)).count() as f64;
    [sym_bytes, max_depth, or_count as f64, bitwise]
}

/// Per-kind syscall counts over the trace's events, vocabulary order.
pub fn syscall_bag(trace: &Trace) -> [f64; SyscallKind::ALL.len()] {
    let mut bag = [0.0; SyscallKind::ALL.len()];
    for ev in trace.events() {
        if let TraceEvent::Syscall(sc) = ev {
            bag[sc.kind().index()] += 1.0;
        }
    }
    bag
}

/// Memory write counts per region, region order.
pub fn region_writes(trace: &Trace) -> [f64; Region::ALL.len()] {
    let mut counts = [0.0; Region::ALL.len()];
    for ev in trace.events() {
        if let TraceEvent::MemWrite { region, .. } = ev {
            let idx = Region::ALL.iter().position(|r| r == region).unwrap();
            counts[idx] += 1.0;
        }
    }
    counts
}

/// CFG-shape features of one trace's dynamic control-flow graph.
pub fn cfg_features(cfg: &Cfg) -> [f64; 4] {
    [
        cfg.node_count() as f64,
        cfg.edge_count() as f64,
        cfg.cyclomatic_complexity() as f64,
        cfg.max_loop_nesting() as f64,
    ]
}

/// Full extraction for one explored path.
pub fn extract(pc: &PathConstraint, trace: &Trace, program: &Program) -> FeatureVector {
    let cfg = build_cfg(program, trace);
    assemble(symbolic_features(pc), syscall_bag(trace), region_writes(trace), cfg_features(&cfg))
}

/// Assembles a vector from its four groups; the one place that knows the
/// concatenation order.
pub fn assemble(
    constraint: [f64; 4],
    syscalls: [f64; SyscallKind::ALL.len()],
    regions: [f64; Region::ALL.len()],
    cfg: [f64; 4],
) -> FeatureVector {
    let mut values = Vec::with_capacity(FEATURE_DIM);
    values.extend_from_slice(&constraint);
    values.extend_from_slice(&syscalls);
    values.extend_from_slice(&regions);
    values.extend_from_slice(&cfg);
    FeatureVector::new(values)
}
