//! Concolic detection workbench.
//!
//! The crate drives a toy register machine with concolic execution, checks
//! execution traces against finite-trace temporal specs, prioritizes path
//! exploration with a learned maliciousness scorer, and distills confirmed
//! detections into reusable signatures.
//!
//! Module map:
//! - [`vm`]: the machine, its assembly format, and concrete execution
//! - [`solver`]: bitvector expressions over symbolic input bytes plus a
//!   complete byte-domain constraint solver
//! - [`ltl`]: finite-trace temporal formulas and the built-in behavior specs
//! - [`concolic`]: symbolic shadow execution, path forking, and the scored
//!   exploration queue
//! - [`features`]: numeric path summaries (constraint shape, syscall bag,
//!   control-flow metrics)
//! - [`oracle`]: path maliciousness scoring (local heuristic or remote model)
//! - [`classifier`]: a from-scratch transformer encoder over path features
//! - [`refine`]: policy-gradient updates to the heuristic scorer from
//!   detection history
//! - [`signatures`]: clustering, constraint generalization, and temporal
//!   pattern mining over confirmed detections
//! - [`pipeline`]: the end-to-end detector, corpus generation, benchmarks,
//!   and report formats

pub mod classifier;
pub mod concolic;
pub mod features;
pub mod ltl;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod refine;
pub mod signatures;
pub mod solver;
pub mod vm;
