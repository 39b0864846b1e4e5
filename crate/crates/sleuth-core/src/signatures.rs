//! Behavioral signature synthesis from confirmed detections.
//!
//! Confirmed malicious paths are embedded by z-scoring their feature
//! vectors, grouped with a deterministic density clustering, and each
//! cluster is distilled into a [`Signature`]: a generalized path constraint
//! (the clauses every member's constraint entails) plus a mined temporal
//! formula (the most specific template formulas that hold on every member
//! trace). A candidate path matches a signature when its own constraint
//! entails the generalized constraint and its trace satisfies the formula,
//! so matching is implication both ways: logically narrower input, same
//! observable behavior.
//!
//! Determinism is load-bearing throughout: clustering visits points in
//! index order and borders join the lowest-numbered cluster, candidate
//! clauses keep first-occurrence order, and template mining breaks ties by
//! enumeration order. Two runs over the same detections produce identical
//! signatures.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::features::{vocabulary_hash, FeatureVector};
use crate::ltl::{self, AtomicProp, Formula, Term};
use crate::solver::{entails, parse_constraint, Budget, PathConstraint};
use crate::vm::{PathId, Perms, Region, SyscallKind, Trace};

/// Clustering and generalization knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureConfig {
    /// Neighborhood radius in embedded feature space.
    pub eps: f64,
    /// Neighbors (self included) needed to make a point core.
    pub min_pts: usize,
    /// Solver budget per entailment query during generalization.
    pub entail_budget_nodes: u64,
    /// How many mined formulas are conjoined, most specific first.
    pub max_formulas: usize,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        SignatureConfig { eps: 2.0, min_pts: 3, entail_budget_nodes: 200_000, max_formulas: 3 }
    }
}

/// One confirmed detection offered to synthesis.
#[derive(Debug, Clone)]
pub struct SignatureInput {
    pub name: String,
    pub constraint: PathConstraint,
    pub trace: Trace,
    pub features: FeatureVector,
}

/// A synthesized family signature. Constraint and formula are stored in
/// their text forms so signatures survive as plain JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Signature {
    pub name: String,
    pub constraint: String,
    pub formula: String,
    pub members: Vec<String>,
    pub vocab_hash: String,
}

/// Z-scores each feature dimension across the set. Dimensions with zero
/// variance embed to 0 so they contribute no distance.
pub fn embed(features: &[FeatureVector]) -> Vec<Vec<f64>> {
    if features.is_empty() {
        return Vec::new();
    }
    let dim = features[0].values.len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    features
        .iter()
        .map(|f| {
            f.values
                .iter()
                .zip(&mean)
                .zip(&var)
                .map(|((v, m), s)| if *s > 0.0 { (v - m) / s.sqrt() } else { 0.0 })
                .collect()
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Density clustering; `labels[i]` is the cluster of point `i`, `None` for
/// noise. Points are visited in index order, clusters are numbered in
/// discovery order, and a border point reachable from several clusters
/// joins the lowest-numbered one, so the labeling is a pure function of
/// the input order.
pub fn cluster(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| distance(&points[i], &points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        let mut queue = std::collections::VecDeque::from([start]);
        labels[start] = Some(id);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                match labels[q] {
                    // Borders keep their first (lowest) cluster.
                    Some(_) => {}
                    None => {
                        labels[q] = Some(id);
                        if core[q] {
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Reference clustering straight from the definitions: core points are
/// connected-component'd over the "within eps" relation, then borders take
/// the smallest component id among their core neighbors. Used to check
/// [`cluster`] in tests.
pub fn cluster_reference(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| distance(&points[i], &points[j]) <= eps;
    let core: Vec<bool> =
        (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut comp: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = Some(next);
        while let Some(p) = stack.pop() {
            for q in 0..n {
                if core[q] && comp[q].is_none() && near(p, q) {
                    comp[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Keeps the clauses that every member constraint entails, in first-
/// occurrence order. A clause the solver cannot decide within budget is
/// dropped: signatures must never over-claim.
pub fn generalize_constraints(members: &[&PathConstraint], budget: &Budget) -> PathConstraint {
    let mut seen = std::collections::BTreeSet::new();
    let mut candidates = Vec::new();
    for member in members {
        for clause in &member.clauses {
            if seen.insert(clause.to_string()) {
                candidates.push(clause.clone());
            }
        }
    }
    let mut kept = PathConstraint::default();
    'clauses: for clause in candidates {
        for member in members {
            if entails(member, &clause, budget) != Some(true) {
                continue 'clauses;
            }
        }
        kept.push(clause);
    }
    kept
}

/// Atom vocabulary for template mining, in a fixed order.
pub fn template_atoms() -> Vec<AtomicProp> {
    let mut atoms = vec![AtomicProp::ReadsSensitive, AtomicProp::SendAny];
    for path in PathId::ALL {
        atoms.push(AtomicProp::WritesTo(path));
    }
    for region in [Region::Text, Region::Data, Region::Stack] {
        atoms.push(AtomicProp::WritesRegion(region));
    }
    atoms.push(AtomicProp::Mprotect(Perms::RWX));
    atoms.push(AtomicProp::UidEq(Term::Lit(0)));
    atoms.push(AtomicProp::UidNe(Term::Lit(0)));
    for kind in SyscallKind::ALL {
        atoms.push(AtomicProp::Syscall(kind));
    }
    atoms
}

/// One mined template instance with its specificity rank.
#[derive(Debug, Clone)]
struct Mined {
    formula: Formula,
    specificity: u8,
}

/// Enumerate template instances: ordered eventualities `F(a && F b)`,
/// single eventualities `F a`, and absence invariants `G !a`. A template
/// survives only if it holds on every member trace; the `max_formulas`
/// most specific survivors are conjoined. Specificity prefers ordered
/// eventualities over single ones over absences. When nothing survives the
/// mined formula degenerates to a tautology, which matches everything and
/// leaves discrimination to the constraint.
pub fn mine_formula(traces: &[&Trace], config: &SignatureConfig) -> Formula {
    let atoms = template_atoms();
    let holds_on_all =
        |f: &Formula| traces.iter().all(|t| ltl::holds(f, t));
    let mut mined: Vec<Mined> = Vec::new();
    for a in &atoms {
        for b in &atoms {
            let f = Formula::Eventually(Box::new(Formula::And(
                Box::new(Formula::Atom(a.clone())),
                Box::new(Formula::Eventually(Box::new(Formula::Atom(b.clone())))),
            )));
            if holds_on_all(&f) {
                mined.push(Mined { formula: f, specificity: 3 });
            }
        }
    }
    for a in &atoms {
        let f = Formula::Eventually(Box::new(Formula::Atom(a.clone())));
        if holds_on_all(&f) {
            mined.push(Mined { formula: f, specificity: 2 });
        }
    }
    for a in &atoms {
        let f = Formula::Globally(Box::new(Formula::Not(Box::new(Formula::Atom(a.clone())))));
        if holds_on_all(&f) {
            mined.push(Mined { formula: f, specificity: 1 });
        }
    }
    // Stable sort keeps enumeration order within a specificity class.
    mined.sort_by(|x, y| y.specificity.cmp(&x.specificity));
    let chosen: Vec<Formula> =
        mined.into_iter().take(config.max_formulas.max(1)).map(|m| m.formula).collect();
    match chosen.into_iter().reduce(|acc, f| Formula::And(Box::new(acc), Box::new(f))) {
        Some(f) => f,
        None => {
            let exec = Formula::Atom(AtomicProp::Syscall(SyscallKind::Exec));
            Formula::Or(
                Box::new(Formula::Globally(Box::new(Formula::Not(Box::new(exec.clone()))))),
                Box::new(Formula::Eventually(Box::new(exec))),
            )
        }
    }
}

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("signature `{name}` constraint: {detail}")]
    BadConstraint { name: String, detail: String },
    #[error("signature `{name}` formula: {detail}")]
    BadFormula { name: String, detail: String },
    #[error("signature `{name}` was built against feature vocabulary {got}, current is {want}")]
    VocabMismatch { name: String, got: String, want: String },
}

/// Synthesizes one signature per cluster of at least `min_pts` members.
/// Noise points produce nothing.
pub fn synthesize(inputs: &[SignatureInput], config: &SignatureConfig) -> Vec<Signature> {
    let features: Vec<FeatureVector> = inputs.iter().map(|i| i.features.clone()).collect();
    let embedded = embed(&features);
    let labels = cluster(&embedded, config.eps, config.min_pts);
    let cluster_count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let budget = Budget::nodes(config.entail_budget_nodes);
    let mut signatures = Vec::new();
    for id in 0..cluster_count {
        let member_idx: Vec<usize> =
            (0..inputs.len()).filter(|&i| labels[i] == Some(id)).collect();
        if member_idx.len() < config.min_pts {
            continue;
        }
        let constraints: Vec<&PathConstraint> =
            member_idx.iter().map(|&i| &inputs[i].constraint).collect();
        let traces: Vec<&Trace> = member_idx.iter().map(|&i| &inputs[i].trace).collect();
        let generalized = generalize_constraints(&constraints, &budget);
        let formula = mine_formula(&traces, config);
        signatures.push(Signature {
            name: format!("family-{id}"),
            constraint: generalized.to_string(),
            formula: formula.to_string(),
            members: member_idx.iter().map(|&i| inputs[i].name.clone()).collect(),
            vocab_hash: vocabulary_hash(),
        });
    }
    signatures
}

/// Parsed view of a signature ready for matching.
pub struct CompiledSignature {
    pub name: String,
    pub constraint: PathConstraint,
    pub formula: Formula,
}

pub fn compile(sig: &Signature) -> Result<CompiledSignature, SignatureError> {
    let want = vocabulary_hash();
    if sig.vocab_hash != want {
        return Err(SignatureError::VocabMismatch {
            name: sig.name.clone(),
            got: sig.vocab_hash.clone(),
            want,
        });
    }
    let constraint = parse_constraint(&sig.constraint).map_err(|e| {
        SignatureError::BadConstraint { name: sig.name.clone(), detail: e.to_string() }
    })?;
    let formula = ltl::parse_formula(&sig.formula)
        .map_err(|e| SignatureError::BadFormula { name: sig.name.clone(), detail: e.to_string() })?;
    Ok(CompiledSignature { name: sig.name.clone(), constraint, formula })
}

/// A path matches when its constraint entails every signature clause and
/// its trace satisfies the signature formula.
pub fn matches(
    sig: &CompiledSignature,
    constraint: &PathConstraint,
    trace: &Trace,
    budget: &Budget,
) -> bool {
    sig.constraint.clauses.iter().all(|clause| entails(constraint, clause, budget) == Some(true))
        && ltl::holds(&sig.formula, trace)
}

pub fn save_signatures(path: &Path, sigs: &[Signature]) -> Result<(), SignatureError> {
    let json = serde_json::to_string_pretty(sigs)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_signatures(path: &Path) -> Result<Vec<Signature>, SignatureError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
