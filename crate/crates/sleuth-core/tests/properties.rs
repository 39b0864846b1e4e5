//! Randomized invariant checks. Where a component ships its own reference
//! implementation (the naive temporal evaluator, exhaustive solving) these
//! drive the two against each other; elsewhere they pin structural
//! invariants: round-tripping text forms, score ranges, token shapes, and
//! the refinement relation between a path constraint and its extensions.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sleuth_core::classifier::{
    magnitude_bucket, token_sequence, CLS_TOKEN, NUM_BUCKETS, PAD_TOKEN, VOCAB_SIZE,
};
use sleuth_core::classifier::train::{clip_global_norm, lr_at_epoch, TrainConfig};
use sleuth_core::features::{extract, vocabulary_hash, FeatureVector, FEATURE_DIM};
use sleuth_core::ltl::{holds, holds_naive};
use sleuth_core::oracle::{score_features, ScorerParams};
use sleuth_core::solver::{
    check_sat, entails, negate_branch, parse_constraint, parse_expr, BinOp, Budget,
    PathConstraint, SatResult, SymExpr, UnOp,
};
use sleuth_core::vm::asm::{parse_program, pretty_print};
use sleuth_core::vm::CmpKind;

fn arb_unop() -> impl Strategy<Value = UnOp> {
    prop_oneof![Just(UnOp::Not), Just(UnOp::Neg)]
}

fn arb_binop() -> impl Strategy<Value = BinOp> {
    prop_oneof![
        Just(BinOp::Add),
        Just(BinOp::Sub),
        Just(BinOp::Mul),
        Just(BinOp::And),
        Just(BinOp::Or),
        Just(BinOp::Xor),
        Just(BinOp::Shl),
        Just(BinOp::Shr),
    ]
}

fn arb_cmp() -> impl Strategy<Value = CmpKind> {
    prop_oneof![
        Just(CmpKind::Eq),
        Just(CmpKind::Ne),
        Just(CmpKind::Slt),
        Just(CmpKind::Sle),
        Just(CmpKind::Ult),
        Just(CmpKind::Ule),
    ]
}

/// Bitvector-sorted expressions over `in[0..bytes]`.
fn arb_bv(bytes: u16) -> impl Strategy<Value = SymExpr> {
    let leaf = prop_oneof![
        any::<u32>().prop_map(SymExpr::Const),
        (0..bytes).prop_map(SymExpr::SymByte),
    ];
    leaf.prop_recursive(3, 24, 2, |inner| {
        prop_oneof![
            (arb_unop(), inner.clone())
                .prop_map(|(op, a)| SymExpr::Unary(op, a.boxed())),
            (arb_binop(), inner.clone(), inner)
                .prop_map(|(op, a, b)| SymExpr::Binary(op, a.boxed(), b.boxed())),
        ]
    })
}

/// Boolean-sorted expressions (branch conditions and clauses).
fn arb_condition(bytes: u16) -> impl Strategy<Value = SymExpr> {
    let leaf = (arb_cmp(), arb_bv(bytes), arb_bv(bytes))
        .prop_map(|(k, a, b)| SymExpr::Cmp(k, a.boxed(), b.boxed()));
    leaf.prop_recursive(2, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| SymExpr::BoolAnd(a.boxed(), b.boxed())),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| SymExpr::BoolOr(a.boxed(), b.boxed())),
            inner.prop_map(|a| SymExpr::BoolNot(a.boxed())),
        ]
    })
}

proptest! {
    #[test]
    fn expr_text_round_trips(e in arb_condition(4)) {
        let text = e.to_string();
        let back = parse_expr(&text).expect("printed expression parses");
        prop_assert_eq!(back, e);
    }

    /// Parsing a printed constraint preserves its meaning, and the text
    /// form canonicalizes in one parse: clause-level conjunctions dissolve
    /// into the clause list, after which print and parse are inverses.
    #[test]
    fn constraint_text_canonicalizes_in_one_parse(
        clauses in prop::collection::vec(arb_condition(3), 0..4),
    ) {
        let pc = PathConstraint::from_clauses(clauses);
        let once = parse_constraint(&pc.to_string()).expect("printed constraint parses");
        let twice = parse_constraint(&once.to_string()).expect("canonical form parses");
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(twice.to_string(), once.to_string());
        for input in [vec![], vec![7u8], vec![255, 3, 0]] {
            let eval = |p: &PathConstraint| p.clauses.iter().all(|c| c.eval(&input).as_bool());
            prop_assert_eq!(eval(&once), eval(&pc));
        }
    }

    #[test]
    fn branch_negation_complements_and_is_involutive(
        cond in arb_condition(2),
        input in prop::collection::vec(any::<u8>(), 0..3),
    ) {
        let neg = negate_branch(&cond);
        prop_assert_eq!(neg.eval(&input).as_bool(), !cond.eval(&input).as_bool());
        let double = negate_branch(&neg);
        prop_assert_eq!(double.eval(&input).as_bool(), cond.eval(&input).as_bool());
    }

    #[test]
    fn solver_agrees_with_brute_force_and_finds_minimal_models(
        clauses in prop::collection::vec(arb_condition(1), 1..3),
    ) {
        let pc = PathConstraint::from_clauses(clauses);
        let budget = Budget::nodes(1_000_000);
        let brute = (0..=255u8)
            .find(|v| pc.clauses.iter().all(|c| c.eval(&[*v]).as_bool()));
        match check_sat(&pc, &budget) {
            SatResult::Sat(model) => {
                let witness = model.input_vec(1);
                prop_assert_eq!(Some(witness[0]), brute, "model is not the smallest witness");
            }
            SatResult::Unsat => prop_assert_eq!(brute, None),
            SatResult::Unknown => prop_assert!(false, "budget exhausted on one-byte constraint"),
        }
    }

    /// Extending a path constraint refines it: the extension entails every
    /// clause of its prefix.
    #[test]
    fn extended_constraints_entail_their_prefix(
        prefix in prop::collection::vec(arb_condition(1), 1..3),
        extra in prop::collection::vec(arb_condition(1), 1..3),
    ) {
        let base = PathConstraint::from_clauses(prefix.clone());
        let mut refined = base.clone();
        for clause in extra {
            refined.push(clause);
        }
        let budget = Budget::nodes(1_000_000);
        for clause in &base.clauses {
            prop_assert_eq!(entails(&refined, clause, &budget), Some(true));
        }
    }

    #[test]
    fn heuristic_scores_stay_in_unit_interval(
        weights in prop::collection::vec(-100.0f64..100.0, FEATURE_DIM),
        bias in -100.0f64..100.0,
        values in prop::collection::vec(0.0f64..1000.0, FEATURE_DIM),
    ) {
        let params = ScorerParams { weights, bias, vocab_hash: vocabulary_hash() };
        let score = score_features(&params, &FeatureVector::new(values));
        prop_assert!((0.0..=1.0).contains(&score), "score {} out of range", score);
    }

    #[test]
    fn token_sequences_are_well_formed(
        values in prop::collection::vec(0.0f64..1e6, FEATURE_DIM),
        max_len in 12usize..96,
    ) {
        let tokens = token_sequence(&FeatureVector::new(values), max_len);
        prop_assert_eq!(tokens.len(), max_len);
        prop_assert_eq!(tokens[0], CLS_TOKEN);
        prop_assert!(tokens.iter().all(|&t| t < VOCAB_SIZE));
        // Padding, once started, runs to the end.
        let first_pad = tokens.iter().position(|&t| t == PAD_TOKEN);
        if let Some(i) = first_pad {
            prop_assert!(tokens[i..].iter().all(|&t| t == PAD_TOKEN));
        }
    }

    #[test]
    fn magnitude_buckets_are_monotone_and_bounded(v in 0.0f64..1e12, w in 0.0f64..1e12) {
        let (lo, hi) = if v <= w { (v, w) } else { (w, v) };
        prop_assert!(magnitude_bucket(lo) <= magnitude_bucket(hi));
        prop_assert!(magnitude_bucket(hi) < NUM_BUCKETS);
    }

    #[test]
    fn lr_schedule_stays_within_bounds(epoch in 0usize..200, lr in 1e-5f64..1.0) {
        let cfg = TrainConfig { lr, ..TrainConfig::default() };
        let at = lr_at_epoch(&cfg, epoch);
        prop_assert!((0.0..=lr).contains(&at), "lr {} outside [0, {}]", at, lr);
    }

    #[test]
    fn gradient_clipping_caps_norm_and_preserves_direction(
        mut grads in prop::collection::vec(-50.0f64..50.0, 1..40),
        clip in 0.5f64..10.0,
    ) {
        let original = grads.clone();
        let pre_norm = clip_global_norm(&mut grads, clip);
        let post_norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(post_norm <= clip * (1.0 + 1e-9));
        let expected: f64 = original.iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!((pre_norm - expected).abs() <= 1e-9 * expected.max(1.0));
        if pre_norm > clip {
            let scale = clip / pre_norm;
            for (g, o) in grads.iter().zip(&original) {
                prop_assert!((g - o * scale).abs() <= 1e-12 * o.abs().max(1.0));
            }
        } else {
            prop_assert_eq!(grads, original);
        }
    }

    /// The labeling evaluator against the recursive reference, with the
    /// generators seeded per case so failures shrink to a seed.
    #[test]
    fn temporal_evaluators_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let formula = random_formula(&mut rng, 4, &mut Vec::new());
        let trace = random_trace(&mut rng);
        prop_assert_eq!(holds(&formula, &trace), holds_naive(&formula, &trace));
    }

    #[test]
    fn assembly_round_trips_through_pretty_print(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let program = random_assembly(&mut rng);
        let printed = pretty_print(&program);
        let back = parse_program(&printed).expect("printed assembly parses");
        prop_assert_eq!(pretty_print(&back), printed);
    }
}

// ---------------------------------------------------------------------------
// Seeded generators for the structured cases above.

use sleuth_core::ltl::{AtomicProp, Formula, Term};
use sleuth_core::vm::{
    Observation, PathId, Perms, Program, Region, SyscallEvent, SyscallKind, Termination, Trace,
    TraceEvent,
};

fn random_formula(rng: &mut ChaCha8Rng, depth: usize, scope: &mut Vec<String>) -> Formula {
    let atom = |rng: &mut ChaCha8Rng, scope: &[String]| {
        let term = |rng: &mut ChaCha8Rng| {
            if !scope.is_empty() && rng.gen_bool(0.5) {
                Term::Var(scope.choose(rng).unwrap().clone())
            } else {
                Term::Lit(*[0u32, 1, 1000, 1001].choose(rng).unwrap())
            }
        };
        match rng.gen_range(0..9) {
            0 => AtomicProp::ReadsSensitive,
            1 => AtomicProp::Reads(*PathId::ALL.choose(rng).unwrap()),
            2 => AtomicProp::SendAny,
            3 => AtomicProp::WritesTo(*PathId::ALL.choose(rng).unwrap()),
            4 => AtomicProp::WritesRegion(*Region::ALL.choose(rng).unwrap()),
            5 => AtomicProp::Mprotect(Perms(rng.gen_range(0..8))),
            6 => AtomicProp::UidEq(term(rng)),
            7 => AtomicProp::UidNe(term(rng)),
            _ => AtomicProp::Syscall(*SyscallKind::ALL.choose(rng).unwrap()),
        }
    };
    if depth == 0 || rng.gen_bool(0.3) {
        return Formula::Atom(atom(rng, scope));
    }
    match rng.gen_range(0..10) {
        0 => Formula::Not(random_formula(rng, depth - 1, scope).boxed()),
        1 => Formula::And(
            random_formula(rng, depth - 1, scope).boxed(),
            random_formula(rng, depth - 1, scope).boxed(),
        ),
        2 => Formula::Or(
            random_formula(rng, depth - 1, scope).boxed(),
            random_formula(rng, depth - 1, scope).boxed(),
        ),
        3 => Formula::Implies(
            random_formula(rng, depth - 1, scope).boxed(),
            random_formula(rng, depth - 1, scope).boxed(),
        ),
        4 => Formula::Next(random_formula(rng, depth - 1, scope).boxed()),
        5 => Formula::Eventually(random_formula(rng, depth - 1, scope).boxed()),
        6 => Formula::Globally(random_formula(rng, depth - 1, scope).boxed()),
        7 => Formula::Until(
            random_formula(rng, depth - 1, scope).boxed(),
            random_formula(rng, depth - 1, scope).boxed(),
        ),
        _ => {
            let var = format!("v{}", scope.len());
            scope.push(var.clone());
            let body = random_formula(rng, depth - 1, scope).boxed();
            scope.pop();
            if rng.gen_bool(0.5) {
                Formula::Exists(var, body)
            } else {
                Formula::Forall(var, body)
            }
        }
    }
}

fn random_trace(rng: &mut ChaCha8Rng) -> Trace {
    let n = rng.gen_range(0..=16);
    let mut uid = 1000u32;
    let mut observations = Vec::new();
    for i in 0..n {
        let pre = uid;
        let event = match rng.gen_range(0..8) {
            0 => {
                let path = *PathId::ALL.choose(rng).unwrap();
                TraceEvent::Syscall(SyscallEvent::ReadFile {
                    path,
                    sensitive: path == PathId::SensitiveDoc,
                })
            }
            1 => TraceEvent::Syscall(SyscallEvent::Send { socket: rng.gen_range(0..3) }),
            2 => TraceEvent::Syscall(SyscallEvent::WriteFile {
                path: *PathId::ALL.choose(rng).unwrap(),
            }),
            3 => TraceEvent::Syscall(SyscallEvent::Mprotect {
                region: *Region::ALL.choose(rng).unwrap(),
                perms: Perms(rng.gen_range(0..8)),
            }),
            4 => {
                let value = rng.gen_range(0..2);
                uid = value;
                TraceEvent::Syscall(SyscallEvent::Setuid { value })
            }
            5 => TraceEvent::MemWrite {
                addr: rng.gen_range(0..0x3000),
                value: rng.gen(),
                region: *Region::ALL.choose(rng).unwrap(),
            },
            6 => TraceEvent::BranchTaken { site: rng.gen_range(0..8), taken: rng.gen() },
            _ => TraceEvent::Syscall(SyscallEvent::Getuid),
        };
        observations.push(Observation { step: i, loc: i, uid: pre, events: vec![event] });
    }
    Trace { locs: (0..n + 1).collect(), observations, termination: Termination::Halted }
}

fn random_assembly(rng: &mut ChaCha8Rng) -> Program {
    let mut lines = vec![format!(".name prog-{}", rng.gen_range(0..1000))];
    lines.push("INPUT r0".into());
    let n = rng.gen_range(1..=6);
    for b in 0..n {
        match rng.gen_range(0..6) {
            0 => lines.push(format!("CONST r1, {}", rng.gen_range(-100_000i32..100_000))),
            1 => lines.push("ADD r2, r0, r1".into()),
            2 => lines.push("READ_FILE SENSITIVE_DOC".into()),
            3 => lines.push(format!("SEND {}", rng.gen_range(0..8))),
            4 => lines.push("MPROTECT TEXT, RWX".into()),
            _ => lines.push("GETUID r3".into()),
        }
        if rng.gen_bool(0.4) {
            lines.push(format!("BR NE r0, r1, L{b}"));
            lines.push(format!("L{b}:"));
        }
    }
    lines.push("HALT".into());
    parse_program(&lines.join("\n")).expect("generated assembly parses")
}

/// The syscall-bag block of the feature vector is a bag: permuting the
/// observation order leaves it untouched.
#[test]
fn syscall_bag_ignores_event_order() {
    let program = parse_program("HALT").unwrap();
    let pc = PathConstraint::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let trace = random_trace(&mut rng);
        let base = extract(&pc, &trace, &program);
        let mut shuffled = trace.clone();
        shuffled.observations.shuffle(&mut rng);
        let permuted = extract(&pc, &shuffled, &program);
        assert_eq!(&base.values[4..13], &permuted.values[4..13]);
    }
}
