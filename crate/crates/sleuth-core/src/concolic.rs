//! Concolic execution: a concrete run drives the path while a symbolic
//! shadow mirrors every register and memory byte as an expression over the
//! input bytes.
//!
//! Each executed branch whose condition mentions symbolic input contributes
//! one clause to the path constraint (the condition as taken) and one fork
//! candidate (the prefix collected so far plus the negated condition).
//! Solving a fork's constraint yields an input that drives execution down
//! the other side; forked paths re-execute from program entry with that
//! input. Memory addressing is concretized: loads and stores use the
//! concrete address, so a symbolic pointer narrows exploration rather than
//! failing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use crate::solver::{
    check_sat, negate_branch, Budget, PathConstraint, SatResult, SymExpr,
};
use crate::vm::{AluOp, Instruction, Loc, Program, Reg, Trace, VmConfig};

/// Limits for a single concolic run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreConfig {
    /// Maximum executed steps per run.
    pub step_limit: usize,
    /// Maximum fork candidates produced per branch site per run; bounds the
    /// paths spawned by input-dependent loops.
    pub loop_unroll_limit: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig { step_limit: 4096, loop_unroll_limit: 8 }
    }
}

/// A fork candidate: the same path up to a branch, then the other side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkPoint {
    /// Location of the branch instruction.
    pub site: Loc,
    /// Step index of the branch in the parent run.
    pub step: usize,
    /// Direction the parent run took.
    pub taken: bool,
    /// Prefix clauses plus the negated condition; any model of this drives
    /// execution through the branch the other way.
    pub constraint: PathConstraint,
}

/// Result of one concolic run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathRun {
    pub input: Vec<u8>,
    pub trace: Trace,
    /// Conjunction of branch conditions as taken; every input satisfying it
    /// follows the same branch decisions.
    pub constraint: PathConstraint,
    pub forks: Vec<ForkPoint>,
}

/// Shallow constant folding keeps shadows of fully concrete computation
/// constant-sized.
fn fold_binary(op: AluOp, a: SymExpr, b: SymExpr) -> SymExpr {
    use crate::solver::BinOp;
    let bin = match op {
        AluOp::Add => BinOp::Add,
        AluOp::Sub => BinOp::Sub,
        AluOp::Mul => BinOp::Mul,
        AluOp::And => BinOp::And,
        AluOp::Or => BinOp::Or,
        AluOp::Xor => BinOp::Xor,
        AluOp::Shl => BinOp::Shl,
        AluOp::Shr => BinOp::Shr,
    };
    if let (SymExpr::Const(x), SymExpr::Const(y)) = (&a, &b) {
        return SymExpr::Const(bin.eval(*x, *y));
    }
    SymExpr::Binary(bin, a.boxed(), b.boxed())
}

struct Shadow {
    regs: [SymExpr; Reg::COUNT],
    mem: std::collections::BTreeMap<u32, SymExpr>,
}

impl Shadow {
    fn new() -> Shadow {
        Shadow {
            regs: std::array::from_fn(|_| SymExpr::Const(0)),
            mem: Default::default(),
        }
    }
}

/// Runs `program` on `input`, recording the concrete trace, the path
/// constraint, and all fork candidates. The symbolic shadow mirrors the
/// machine exactly, so every recorded clause evaluates true under `input`;
/// this is asserted at each branch.
pub fn explore(
    program: &Program,
    input: &[u8],
    cfg: &ExploreConfig,
    vm_cfg: &VmConfig,
) -> PathRun {
    use crate::vm::{step, MachineState};

    let mut state = MachineState::new(program.entry, vm_cfg);
    let mut shadow = Shadow::new();
    let mut constraint = PathConstraint::new();
    let mut forks = Vec::new();
    let mut forks_per_site: std::collections::BTreeMap<Loc, usize> = Default::default();

    let mut locs = Vec::new();
    let mut observations = Vec::new();
    let mut termination = crate::vm::Termination::StepLimit;

    for step_idx in 0..cfg.step_limit {
        if state.halted() {
            break;
        }
        let loc = state.pc;
        let uid = state.uid;
        let instr = program.instructions[loc].clone();

        // Pre-step shadow updates that need pre-state values.
        match &instr {
            Instruction::Const { dst, imm } => {
                shadow.regs[dst.index()] = SymExpr::Const(*imm as u32);
            }
            Instruction::Mov { dst, src } => {
                shadow.regs[dst.index()] = shadow.regs[src.index()].clone();
            }
            Instruction::Alu { op, dst, lhs, rhs } => {
                shadow.regs[dst.index()] = fold_binary(
                    *op,
                    shadow.regs[lhs.index()].clone(),
                    shadow.regs[rhs.index()].clone(),
                );
            }
            Instruction::Not { dst, src } => {
                let s = shadow.regs[src.index()].clone();
                shadow.regs[dst.index()] = match s {
                    SymExpr::Const(c) => SymExpr::Const(!c),
                    other => SymExpr::Unary(crate::solver::UnOp::Not, other.boxed()),
                };
            }
            Instruction::Load { dst, addr } => {
                // Concretized addressing: the concrete address picks the cell.
                let a = state.regs[addr.index()];
                shadow.regs[dst.index()] = shadow
                    .mem
                    .get(&a)
                    .cloned()
                    .unwrap_or_else(|| {
                        SymExpr::Const(state.mem.get(&a).copied().unwrap_or(0) as u32)
                    });
            }
            Instruction::Store { addr, src } => {
                let a = state.regs[addr.index()];
                if a < vm_cfg.addr_space {
                    let v = shadow.regs[src.index()].clone();
                    let low = match v {
                        SymExpr::Const(c) => SymExpr::Const(c & 0xff),
                        other => fold_binary(AluOp::And, other, SymExpr::Const(0xff)),
                    };
                    shadow.mem.insert(a, low);
                }
            }
            Instruction::Input { dst } | Instruction::Time { dst } => {
                let idx = state.input_cursor;
                shadow.regs[dst.index()] = if idx <= u16::MAX as usize {
                    SymExpr::SymByte(idx as u16)
                } else {
                    SymExpr::Const(input.get(idx).copied().unwrap_or(0) as u32)
                };
            }
            Instruction::Getuid { dst } => {
                // uid is always concrete: SETUID takes an immediate.
                shadow.regs[dst.index()] = SymExpr::Const(state.uid);
            }
            Instruction::Br { cmp, lhs, rhs, .. } => {
                let cond = SymExpr::Cmp(
                    *cmp,
                    shadow.regs[lhs.index()].clone().boxed(),
                    shadow.regs[rhs.index()].clone().boxed(),
                );
                if !cond.sym_bytes().is_empty() {
                    let taken = cmp.eval(state.regs[lhs.index()], state.regs[rhs.index()]);
                    let clause = if taken { cond } else { negate_branch(&cond) };
                    assert!(
                        clause.eval(input).as_bool(),
                        "shadow diverged from concrete execution at {loc}"
                    );
                    let count = forks_per_site.entry(loc).or_insert(0);
                    if *count < cfg.loop_unroll_limit {
                        *count += 1;
                        let mut fork = constraint.clone();
                        fork.push(negate_branch(&clause));
                        forks.push(ForkPoint { site: loc, step: step_idx, taken, constraint: fork });
                    }
                    constraint.push(clause);
                }
            }
            _ => {}
        }

        locs.push(loc);
        let events = step(program, &mut state, input, vm_cfg);
        if !events.is_empty() {
            observations.push(crate::vm::Observation { step: step_idx, loc, uid, events });
        }
        if let Some(t) = state.termination() {
            termination = t;
            break;
        }
    }
    let trace = Trace { locs, observations, termination };
    debug_assert_eq!(
        trace,
        crate::vm::run_concrete(program, input, cfg.step_limit, vm_cfg),
        "shadowed execution must match plain concrete execution"
    );
    assert!(constraint.holds(input), "path constraint must hold on its own input");
    PathRun { input: input.to_vec(), trace, constraint, forks }
}

/// Max-priority queue over path candidates. Ties break first-in first-out,
/// so equal-score strategies degrade to breadth-first order and the whole
/// exploration stays deterministic.
#[derive(Debug)]
pub struct ExplorationQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    seq: u64,
}

#[derive(Debug)]
struct Entry<T> {
    score: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.seq.cmp(&self.seq))
    }
}

impl<T> ExplorationQueue<T> {
    pub fn new() -> Self {
        ExplorationQueue { heap: BinaryHeap::new(), seq: 0 }
    }

    /// Number of pushes so far; also the insertion stamp of the next push.
    pub fn pushes(&self) -> u64 {
        self.seq
    }

    pub fn push(&mut self, item: T, score: f64) {
        let entry = Entry { score, seq: self.seq, item };
        self.seq += 1;
        self.heap.push(entry);
    }

    /// Highest score first; FIFO among equal scores.
    pub fn pop(&mut self) -> Option<(T, f64)> {
        self.heap.pop().map(|e| (e.item, e.score))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

impl<T> Default for ExplorationQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Exhaustively enumerates feasible paths breadth-first: solve a pending
/// constraint, run it, queue every new fork. Paths are deduplicated by
/// canonical constraint text. Complete for programs whose runs stay within
/// `cfg.step_limit` and whose fork constraints the solver decides within
/// `budget`.
pub fn enumerate_all(
    program: &Program,
    cfg: &ExploreConfig,
    vm_cfg: &VmConfig,
    budget: &Budget,
) -> Vec<PathRun> {
    let mut pending: VecDeque<PathConstraint> = VecDeque::new();
    pending.push_back(PathConstraint::new());
    let mut queued: BTreeSet<String> = BTreeSet::new();
    queued.insert(PathConstraint::new().to_string());
    let mut completed: BTreeSet<String> = BTreeSet::new();
    let mut runs = Vec::new();
    while let Some(pc) = pending.pop_front() {
        let model = match check_sat(&pc, budget) {
            SatResult::Sat(m) => m,
            SatResult::Unsat | SatResult::Unknown => continue,
        };
        let input = model.input_vec(0);
        let run = explore(program, &input, cfg, vm_cfg);
        if !completed.insert(run.constraint.to_string()) {
            continue;
        }
        for fork in &run.forks {
            let key = fork.constraint.to_string();
            if queued.insert(key) {
                pending.push_back(fork.constraint.clone());
            }
        }
        runs.push(run);
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::parse_program;

    fn prog(text: &str) -> Program {
        parse_program(text).unwrap()
    }

    fn defaults() -> (ExploreConfig, VmConfig, Budget) {
        (ExploreConfig::default(), VmConfig::default(), Budget::unlimited())
    }

    #[test]
    fn straight_line_has_no_forks() {
        let p = prog("CONST r0, 1\nSEND 1\nHALT\n");
        let (ec, vc, _) = defaults();
        let run = explore(&p, &[], &ec, &vc);
        assert!(run.constraint.is_empty());
        assert!(run.forks.is_empty());
    }

    #[test]
    fn concrete_branch_contributes_nothing() {
        let p = prog("CONST r0, 1\nCONST r1, 2\nBR ULT r0, r1, out\nSEND 1\nout:\nHALT\n");
        let (ec, vc, _) = defaults();
        let run = explore(&p, &[], &ec, &vc);
        assert!(run.constraint.is_empty());
        assert!(run.forks.is_empty());
    }

    #[test]
    fn symbolic_branch_records_clause_and_fork() {
        let p = prog("INPUT r0\nCONST r1, 66\nBR EQ r0, r1, hit\nHALT\nhit:\nSEND 1\nHALT\n");
        let (ec, vc, budget) = defaults();
        let run = explore(&p, &[0], &ec, &vc);
        assert_eq!(run.constraint.to_string(), "(ne in[0] 66)");
        assert_eq!(run.forks.len(), 1);
        let fork = &run.forks[0];
        assert_eq!(fork.site, 2);
        assert!(!fork.taken);
        match check_sat(&fork.constraint, &budget) {
            SatResult::Sat(m) => assert_eq!(m.get(0), 66),
            other => panic!("fork should be satisfiable, got {other:?}"),
        }
    }

    #[test]
    fn fork_model_reaches_other_side() {
        let p = prog("INPUT r0\nCONST r1, 66\nBR EQ r0, r1, hit\nHALT\nhit:\nSEND 1\nHALT\n");
        let (ec, vc, budget) = defaults();
        let run = explore(&p, &[0], &ec, &vc);
        let model = match check_sat(&run.forks[0].constraint, &budget) {
            SatResult::Sat(m) => m,
            other => panic!("unexpected {other:?}"),
        };
        let forked = explore(&p, &model.input_vec(1), &ec, &vc);
        assert_eq!(forked.constraint.to_string(), "(eq in[0] 66)");
        assert!(forked.trace.locs.contains(&5));
    }

    #[test]
    fn derived_value_branches_stay_symbolic() {
        // in[0]*2 + 10 == 30 => in[0] == 10
        let p = prog(
            "INPUT r0\nCONST r1, 2\nMUL r0, r0, r1\nCONST r1, 10\nADD r0, r0, r1\nCONST r1, 30\nBR EQ r0, r1, hit\nHALT\nhit:\nSEND 1\nHALT\n",
        );
        let (ec, vc, budget) = defaults();
        let run = explore(&p, &[0], &ec, &vc);
        let model = match check_sat(&run.forks[0].constraint, &budget) {
            SatResult::Sat(m) => m,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(model.get(0), 10);
    }

    #[test]
    fn enumerate_three_branch_program_finds_all_paths() {
        let p = prog(
            "\
INPUT r0
INPUT r1
INPUT r2
CONST r3, 10
BR ULT r0, r3, a
a:
BR ULT r1, r3, b
b:
BR ULT r2, r3, c
c:
HALT
",
        );
        let (ec, vc, budget) = defaults();
        let runs = enumerate_all(&p, &ec, &vc, &budget);
        assert_eq!(runs.len(), 8);
        let constraints: BTreeSet<String> =
            runs.iter().map(|r| r.constraint.to_string()).collect();
        assert_eq!(constraints.len(), 8);
        for run in &runs {
            assert!(run.constraint.holds(&run.input));
        }
    }

    #[test]
    fn enumerate_skips_infeasible_paths() {
        // Second branch repeats the first condition: only 2 feasible paths.
        let p = prog(
            "INPUT r0\nCONST r1, 10\nBR ULT r0, r1, a\na:\nBR ULT r0, r1, b\nb:\nHALT\n",
        );
        let (ec, vc, budget) = defaults();
        let runs = enumerate_all(&p, &ec, &vc, &budget);
        assert_eq!(runs.len(), 2);
    }

    #[test]
    fn loop_unroll_limit_caps_forks_per_site() {
        // Count down from in[0]: the loop branch forks at the same site on
        // every iteration.
        let p = prog(
            "INPUT r0\nCONST r1, 1\nCONST r2, 0\nloop:\nBR ULE r0, r2, done\nSUB r0, r0, r1\nJMP loop\ndone:\nHALT\n",
        );
        let vc = VmConfig::default();
        let ec = ExploreConfig { step_limit: 4096, loop_unroll_limit: 3 };
        let run = explore(&p, &[100], &ec, &vc);
        let site_forks = run.forks.iter().filter(|f| f.site == 3).count();
        assert_eq!(site_forks, 3);
    }

    #[test]
    fn queue_orders_by_score_then_fifo() {
        let mut q = ExplorationQueue::new();
        q.push("low", 0.1);
        q.push("first-high", 0.9);
        q.push("second-high", 0.9);
        q.push("mid", 0.5);
        let order: Vec<&str> = std::iter::from_fn(|| q.pop().map(|(i, _)| i)).collect();
        assert_eq!(order, vec!["first-high", "second-high", "mid", "low"]);
    }

    #[test]
    fn queue_sequences_fifo_for_uniform_scores() {
        let mut q = ExplorationQueue::new();
        for i in 0..10 {
            q.push(i, 1.0);
        }
        let order: Vec<i32> = std::iter::from_fn(|| q.pop().map(|(i, _)| i)).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn time_reads_are_symbolic() {
        // A timing check guards the payload; the fork must still be solvable.
        let p = prog(
            "TIME r0\nCONST r1, 200\nBR ULT r0, r1, sleep\nEXEC\nHALT\nsleep:\nHALT\n",
        );
        let (ec, vc, budget) = defaults();
        let run = explore(&p, &[0], &ec, &vc);
        assert_eq!(run.forks.len(), 1);
        let model = match check_sat(&run.forks[0].constraint, &budget) {
            SatResult::Sat(m) => m,
            other => panic!("unexpected {other:?}"),
        };
        let forked = explore(&p, &model.input_vec(1), &ec, &vc);
        assert!(forked.trace.locs.contains(&3), "payload must execute");
    }
}
