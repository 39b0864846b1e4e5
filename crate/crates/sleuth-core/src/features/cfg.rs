//! Dynamic control-flow graph recovery from an execution trace.
//!
//! Nodes are basic-block leaders: statically computed leaders (entry,
//! control-transfer targets, fall-through successors of transfers)
//! restricted to locations the trace actually executed. Edges are the block
//! transitions the trace witnessed. A single trace therefore yields a
//! connected subgraph of the static CFG.

use std::collections::{BTreeMap, BTreeSet};

use crate::vm::{Instruction, Loc, Program, Trace};

/// A dynamic control-flow graph. `nodes` are block leader locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub entry: Loc,
    pub nodes: BTreeSet<Loc>,
    pub edges: BTreeSet<(Loc, Loc)>,
}

impl Cfg {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Weakly connected components; 1 for any single-trace graph.
    pub fn component_count(&self) -> usize {
        let mut seen: BTreeSet<Loc> = BTreeSet::new();
        let mut undirected: BTreeMap<Loc, Vec<Loc>> = BTreeMap::new();
        for (a, b) in &self.edges {
            undirected.entry(*a).or_default().push(*b);
            undirected.entry(*b).or_default().push(*a);
        }
        let mut components = 0;
        for start in &self.nodes {
            if !seen.insert(*start) {
                continue;
            }
            components += 1;
            let mut stack = vec![*start];
            while let Some(n) = stack.pop() {
                for next in undirected.get(&n).into_iter().flatten() {
                    if seen.insert(*next) {
                        stack.push(*next);
                    }
                }
            }
        }
        components
    }

    /// Cyclomatic complexity `E - V + 2P`.
    pub fn cyclomatic_complexity(&self) -> i64 {
        self.edge_count() as i64 - self.node_count() as i64
            + 2 * self.component_count() as i64
    }

    /// Immediate predecessor lists, sorted.
    fn predecessors(&self) -> BTreeMap<Loc, Vec<Loc>> {
        let mut preds: BTreeMap<Loc, Vec<Loc>> = BTreeMap::new();
        for n in &self.nodes {
            preds.insert(*n, Vec::new());
        }
        for (a, b) in &self.edges {
            preds.get_mut(b).expect("edge endpoint is a node").push(*a);
        }
        preds
    }

    /// Dominator sets by iterative dataflow. Nodes unreachable from entry
    /// keep the full set (they dominate nothing of interest).
    pub fn dominators(&self) -> BTreeMap<Loc, BTreeSet<Loc>> {
        let all: BTreeSet<Loc> = self.nodes.iter().copied().collect();
        let preds = self.predecessors();
        let mut dom: BTreeMap<Loc, BTreeSet<Loc>> = self
            .nodes
            .iter()
            .map(|n| {
                if *n == self.entry {
                    (*n, BTreeSet::from([*n]))
                } else {
                    (*n, all.clone())
                }
            })
            .collect();
        let mut changed = true;
        while changed {
            changed = false;
            for n in &self.nodes {
                if *n == self.entry {
                    continue;
                }
                let mut meet: Option<BTreeSet<Loc>> = None;
                for p in &preds[n] {
                    let dp = &dom[p];
                    meet = Some(match meet {
                        None => dp.clone(),
                        Some(acc) => acc.intersection(dp).copied().collect(),
                    });
                }
                let mut next = meet.unwrap_or_default();
                next.insert(*n);
                if next != dom[n] {
                    dom.insert(*n, next);
                    changed = true;
                }
            }
        }
        dom
    }

    /// Natural loops: one per back edge `n -> h` with `h` dominating `n`,
    /// bodies unioned per header.
    pub fn natural_loops(&self) -> Vec<NaturalLoop> {
        let dom = self.dominators();
        let preds = self.predecessors();
        let mut by_header: BTreeMap<Loc, BTreeSet<Loc>> = BTreeMap::new();
        for (n, h) in &self.edges {
            if !dom[n].contains(h) {
                continue;
            }
            let body = by_header.entry(*h).or_insert_with(|| BTreeSet::from([*h]));
            // Everything that reaches n without passing through h.
            let mut stack = vec![*n];
            while let Some(m) = stack.pop() {
                if body.insert(m) {
                    for p in preds.get(&m).into_iter().flatten() {
                        stack.push(*p);
                    }
                }
            }
        }
        by_header
            .into_iter()
            .map(|(header, body)| NaturalLoop { header, body })
            .collect()
    }

    /// Deepest loop nesting: the largest chain of loops each strictly
    /// containing the next. 0 without loops, 1 for flat loops.
    pub fn max_loop_nesting(&self) -> usize {
        let loops = self.natural_loops();
        let mut depth = vec![1usize; loops.len()];
        // Loops nest by strict body containment; headers are unique, so
        // containment is a partial order. Process by ascending body size.
        let mut order: Vec<usize> = (0..loops.len()).collect();
        order.sort_by_key(|i| loops[*i].body.len());
        for idx in 0..order.len() {
            let i = order[idx];
            for &j in &order[idx + 1..] {
                if loops[j].body.len() > loops[i].body.len()
                    && loops[i].body.is_subset(&loops[j].body)
                {
                    depth[j] = depth[j].max(depth[i] + 1);
                }
            }
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

/// A natural loop: its header and the block set it spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaturalLoop {
    pub header: Loc,
    pub body: BTreeSet<Loc>,
}

/// Static leader set: entry, control-transfer targets, and fall-through
/// successors of control transfers.
fn static_leaders(program: &Program) -> BTreeSet<Loc> {
    let mut leaders = BTreeSet::from([program.entry]);
    for (loc, instr) in program.instructions.iter().enumerate() {
        if let Some(target) = instr.target() {
            leaders.insert(target);
            if loc + 1 < program.len() {
                leaders.insert(loc + 1);
            }
        }
    }
    leaders
}

/// Builds the dynamic CFG of one trace. Empty traces produce an empty graph
/// with the program entry as its nominal entry node set.
pub fn build_cfg(program: &Program, trace: &Trace) -> Cfg {
    let executed: BTreeSet<Loc> = trace.locs.iter().copied().collect();
    let leaders: BTreeSet<Loc> = static_leaders(program)
        .into_iter()
        .filter(|l| executed.contains(l))
        .collect();
    // Map each executed location to its block leader: the greatest leader
    // at or below it.
    let block_of = |loc: Loc| -> Loc {
        leaders
            .range(..=loc)
            .next_back()
            .copied()
            .unwrap_or(loc)
    };
    let mut nodes: BTreeSet<Loc> = BTreeSet::new();
    let mut edges: BTreeSet<(Loc, Loc)> = BTreeSet::new();
    for loc in &trace.locs {
        nodes.insert(block_of(*loc));
    }
    for pair in trace.locs.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        // A block transition happens exactly when control enters a leader.
        if leaders.contains(&b) {
            edges.insert((block_of(a), block_of(b)));
        }
    }
    let entry = trace.locs.first().copied().map(block_of).unwrap_or(program.entry);
    Cfg { entry, nodes, edges }
}

/// Counts instructions in `instrs` that emit each syscall kind, in
/// vocabulary order. The static analogue of the trace syscall bag, used to
/// describe a disassembly window.
pub fn static_syscall_bag(instrs: &[Instruction]) -> [f64; crate::vm::SyscallKind::ALL.len()] {
    let mut bag = [0.0; crate::vm::SyscallKind::ALL.len()];
    for i in instrs {
        if let Some(kind) = i.syscall_kind() {
            bag[kind.index()] += 1.0;
        }
    }
    bag
}
