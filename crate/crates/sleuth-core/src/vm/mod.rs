//! Toy register machine that stands in for real binaries.
//!
//! Programs are lists of instructions over eight 32-bit registers, a
//! byte-granular sparse memory, and a small syscall surface rich enough to
//! express the built-in behavior specs (file reads, sends, uid changes,
//! mprotect, region writes). Execution is fully deterministic: a trace is a
//! pure function of (program, input bytes, step limit).
//!
//! The assembly text format lives in [`asm`]; `parse_program` and
//! `pretty_print` round-trip.

pub mod asm;

pub use asm::{disassemble, parse_program, pretty_print, ParseError};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Index into a program's instruction list.
pub type Loc = usize;

/// Register index, always in `0..8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const COUNT: usize = 8;

    pub fn new(index: u8) -> Option<Reg> {
        (index < Self::COUNT as u8).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Comparison kinds used by `BR` (and mirrored by the solver's compare ops).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpKind {
    Eq,
    Ne,
    /// Signed less-than.
    Slt,
    /// Signed less-or-equal.
    Sle,
    /// Unsigned less-than.
    Ult,
    /// Unsigned less-or-equal.
    Ule,
}

impl CmpKind {
    pub fn eval(self, lhs: u32, rhs: u32) -> bool {
        match self {
            CmpKind::Eq => lhs == rhs,
            CmpKind::Ne => lhs != rhs,
            CmpKind::Slt => (lhs as i32) < (rhs as i32),
            CmpKind::Sle => (lhs as i32) <= (rhs as i32),
            CmpKind::Ult => lhs < rhs,
            CmpKind::Ule => lhs <= rhs,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CmpKind::Eq => "EQ",
            CmpKind::Ne => "NE",
            CmpKind::Slt => "SLT",
            CmpKind::Sle => "SLE",
            CmpKind::Ult => "ULT",
            CmpKind::Ule => "ULE",
        }
    }
}

/// Three-operand ALU operations. All arithmetic wraps at 32 bits; shift
/// amounts are masked to 5 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    pub fn eval(self, lhs: u32, rhs: u32) -> u32 {
        match self {
            AluOp::Add => lhs.wrapping_add(rhs),
            AluOp::Sub => lhs.wrapping_sub(rhs),
            AluOp::Mul => lhs.wrapping_mul(rhs),
            AluOp::And => lhs & rhs,
            AluOp::Or => lhs | rhs,
            AluOp::Xor => lhs ^ rhs,
            AluOp::Shl => lhs << (rhs & 0x1f),
            AluOp::Shr => lhs >> (rhs & 0x1f),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AluOp::Add => "ADD",
            AluOp::Sub => "SUB",
            AluOp::Mul => "MUL",
            AluOp::And => "AND",
            AluOp::Or => "OR",
            AluOp::Xor => "XOR",
            AluOp::Shl => "SHL",
            AluOp::Shr => "SHR",
        }
    }
}

/// Closed vocabulary of file-path identifiers, so `writes_to`/`reads`
/// predicates are decidable by equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathId {
    SensitiveDoc,
    Cron,
    Systemd,
    Tmp,
    Log,
    TextSection,
}

impl PathId {
    pub const ALL: [PathId; 6] = [
        PathId::SensitiveDoc,
        PathId::Cron,
        PathId::Systemd,
        PathId::Tmp,
        PathId::Log,
        PathId::TextSection,
    ];

    pub fn is_sensitive(self) -> bool {
        matches!(self, PathId::SensitiveDoc)
    }

    pub fn name(self) -> &'static str {
        match self {
            PathId::SensitiveDoc => "SENSITIVE_DOC",
            PathId::Cron => "CRON",
            PathId::Systemd => "SYSTEMD",
            PathId::Tmp => "TMP",
            PathId::Log => "LOG",
            PathId::TextSection => "TEXT_SECTION",
        }
    }

    pub fn from_name(s: &str) -> Option<PathId> {
        Self::ALL.iter().copied().find(|p| p.name() == s)
    }
}

/// Named address-space regions. The text region stands in for `.text`; a
/// store whose address falls inside it counts as self-modification for the
/// polymorphism spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    Text,
    Data,
    Stack,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Text, Region::Data, Region::Stack];

    pub fn name(self) -> &'static str {
        match self {
            Region::Text => "TEXT",
            Region::Data => "DATA",
            Region::Stack => "STACK",
        }
    }

    pub fn from_name(s: &str) -> Option<Region> {
        Self::ALL.iter().copied().find(|r| r.name() == s)
    }

    /// Region containing `addr` under `cfg`'s address-space split.
    pub fn of_addr(addr: u32, cfg: &VmConfig) -> Region {
        if addr < cfg.text_end {
            Region::Text
        } else if addr < cfg.data_end {
            Region::Data
        } else {
            Region::Stack
        }
    }
}

/// Memory protection flag set (R=1, W=2, X=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Perms(pub u8);

impl Perms {
    pub const R: Perms = Perms(1);
    pub const W: Perms = Perms(2);
    pub const X: Perms = Perms(4);
    pub const RWX: Perms = Perms(7);

    pub fn from_name(s: &str) -> Option<Perms> {
        if s == "NONE" {
            return Some(Perms(0));
        }
        let mut bits = 0u8;
        for c in s.chars() {
            match c {
                'R' => bits |= 1,
                'W' => bits |= 2,
                'X' => bits |= 4,
                _ => return None,
            }
        }
        Some(Perms(bits))
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "NONE");
        }
        if self.0 & 1 != 0 {
            write!(f, "R")?;
        }
        if self.0 & 2 != 0 {
            write!(f, "W")?;
        }
        if self.0 & 4 != 0 {
            write!(f, "X")?;
        }
        Ok(())
    }
}

/// Syscall vocabulary. This is the fixed ordering used by the feature
/// extractor's bag-of-syscalls; do not reorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SyscallKind {
    ReadFile,
    Send,
    WriteFile,
    Mprotect,
    Setuid,
    Getuid,
    Time,
    Exec,
    Socket,
}

impl SyscallKind {
    pub const ALL: [SyscallKind; 9] = [
        SyscallKind::ReadFile,
        SyscallKind::Send,
        SyscallKind::WriteFile,
        SyscallKind::Mprotect,
        SyscallKind::Setuid,
        SyscallKind::Getuid,
        SyscallKind::Time,
        SyscallKind::Exec,
        SyscallKind::Socket,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            SyscallKind::ReadFile => "READ_FILE",
            SyscallKind::Send => "SEND",
            SyscallKind::WriteFile => "WRITE_FILE",
            SyscallKind::Mprotect => "MPROTECT",
            SyscallKind::Setuid => "SETUID",
            SyscallKind::Getuid => "GETUID",
            SyscallKind::Time => "TIME",
            SyscallKind::Exec => "EXEC",
            SyscallKind::Socket => "SOCKET",
        }
    }
}

/// One instruction. Operand arity is fixed by the variant, registers are
/// range-checked at construction, so a well-typed value is well-formed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    Const { dst: Reg, imm: i32 },
    Mov { dst: Reg, src: Reg },
    Alu { op: AluOp, dst: Reg, lhs: Reg, rhs: Reg },
    Not { dst: Reg, src: Reg },
    Load { dst: Reg, addr: Reg },
    Store { addr: Reg, src: Reg },
    Jmp { target: Loc },
    Br { cmp: CmpKind, lhs: Reg, rhs: Reg, target: Loc },
    Input { dst: Reg },
    ReadFile { path: PathId },
    Send { socket: u32 },
    WriteFile { path: PathId },
    Mprotect { region: Region, perms: Perms },
    Setuid { value: u32 },
    Getuid { dst: Reg },
    Time { dst: Reg },
    Exec,
    Socket,
    Halt,
}

impl Instruction {
    /// Syscall kind this instruction emits, if any.
    pub fn syscall_kind(&self) -> Option<SyscallKind> {
        match self {
            Instruction::ReadFile { .. } => Some(SyscallKind::ReadFile),
            Instruction::Send { .. } => Some(SyscallKind::Send),
            Instruction::WriteFile { .. } => Some(SyscallKind::WriteFile),
            Instruction::Mprotect { .. } => Some(SyscallKind::Mprotect),
            Instruction::Setuid { .. } => Some(SyscallKind::Setuid),
            Instruction::Getuid { .. } => Some(SyscallKind::Getuid),
            Instruction::Time { .. } => Some(SyscallKind::Time),
            Instruction::Exec => Some(SyscallKind::Exec),
            Instruction::Socket => Some(SyscallKind::Socket),
            _ => None,
        }
    }

    /// Branch/jump target, if this is a control transfer.
    pub fn target(&self) -> Option<Loc> {
        match self {
            Instruction::Jmp { target } | Instruction::Br { target, .. } => Some(*target),
            _ => None,
        }
    }

    pub fn is_control_transfer(&self) -> bool {
        matches!(self, Instruction::Jmp { .. } | Instruction::Br { .. })
    }
}

/// Free-form program metadata carried through the text format as `.name` /
/// `.seed` directives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgramMeta {
    pub name: String,
    pub seed: String,
}

/// A loaded program: instructions, resolved labels, and the entry location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub entry: Loc,
    pub labels: BTreeMap<String, Loc>,
    pub meta: ProgramMeta,
}

/// Program construction / validation failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("program has no instructions")]
    Empty,
    #[error("branch target {target} at location {site} is out of range")]
    InvalidTarget { site: Loc, target: Loc },
    #[error("label `{0}` points past the end of the program")]
    DanglingLabel(String),
    #[error("entry location {0} is out of range")]
    InvalidEntry(Loc),
}

impl Program {
    /// Builds and validates a program. Entry is the `entry` label when
    /// defined, else location 0.
    pub fn new(
        instructions: Vec<Instruction>,
        labels: BTreeMap<String, Loc>,
        meta: ProgramMeta,
    ) -> Result<Program, ProgramError> {
        let entry = labels.get("entry").copied().unwrap_or(0);
        let p = Program { instructions, entry, labels, meta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.instructions.is_empty() {
            return Err(ProgramError::Empty);
        }
        if self.entry >= self.instructions.len() {
            return Err(ProgramError::InvalidEntry(self.entry));
        }
        for (name, loc) in &self.labels {
            if *loc >= self.instructions.len() {
                return Err(ProgramError::DanglingLabel(name.clone()));
            }
        }
        for (site, instr) in self.instructions.iter().enumerate() {
            if let Some(target) = instr.target() {
                if target >= self.instructions.len() {
                    return Err(ProgramError::InvalidTarget { site, target });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Labels attached to `loc`, in name order.
    pub fn labels_at(&self, loc: Loc) -> Vec<&str> {
        self.labels
            .iter()
            .filter(|(_, l)| **l == loc)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Static count of input-consuming instructions (`INPUT` and `TIME`).
    /// Used as the default symbolic-input width for loop-free programs.
    pub fn input_reads(&self) -> usize {
        self.instructions
            .iter()
            .filter(|i| matches!(i, Instruction::Input { .. } | Instruction::Time { .. }))
            .count()
    }
}

/// Interpreter configuration: address-space bound, region split, initial uid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmConfig {
    /// One past the largest valid memory address.
    pub addr_space: u32,
    /// Exclusive end of the text region (starts at 0).
    pub text_end: u32,
    /// Exclusive end of the data region (stack runs to `addr_space`).
    pub data_end: u32,
    pub initial_uid: u32,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { addr_space: 0x10000, text_end: 0x1000, data_end: 0x8000, initial_uid: 1000 }
    }
}

/// Why execution stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Halted,
    /// Memory access outside the configured address space.
    Faulted { addr: u32 },
    /// Step limit reached; the trace is a truncation of a longer run.
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Running,
    Halted,
    Faulted { addr: u32 },
}

/// Machine state: program counter, registers, sparse byte memory, uid, and
/// the input cursor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: Loc,
    pub regs: [u32; Reg::COUNT],
    pub mem: BTreeMap<u32, u8>,
    pub uid: u32,
    pub input_cursor: usize,
    status: Status,
}

impl MachineState {
    pub fn new(entry: Loc, cfg: &VmConfig) -> MachineState {
        MachineState {
            pc: entry,
            regs: [0; Reg::COUNT],
            mem: BTreeMap::new(),
            uid: cfg.initial_uid,
            input_cursor: 0,
            status: Status::Running,
        }
    }

    pub fn halted(&self) -> bool {
        self.status != Status::Running
    }

    /// Why the machine stopped, if it has.
    pub fn termination(&self) -> Option<Termination> {
        match self.status {
            Status::Running => None,
            Status::Halted => Some(Termination::Halted),
            Status::Faulted { addr } => Some(Termination::Faulted { addr }),
        }
    }

    fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    fn set_reg(&mut self, r: Reg, v: u32) {
        self.regs[r.index()] = v;
    }
}

/// One observable event emitted by a single instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Syscall(SyscallEvent),
    UidChange { old: u32, new: u32 },
    MemWrite { addr: u32, value: u8, region: Region },
    BranchTaken { site: Loc, taken: bool },
}

/// Syscall record with its arguments as executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyscallEvent {
    ReadFile { path: PathId, sensitive: bool },
    Send { socket: u32 },
    WriteFile { path: PathId },
    Mprotect { region: Region, perms: Perms },
    Setuid { value: u32 },
    Getuid,
    Time { value: u32 },
    Exec,
    Socket,
}

impl SyscallEvent {
    pub fn kind(&self) -> SyscallKind {
        match self {
            SyscallEvent::ReadFile { .. } => SyscallKind::ReadFile,
            SyscallEvent::Send { .. } => SyscallKind::Send,
            SyscallEvent::WriteFile { .. } => SyscallKind::WriteFile,
            SyscallEvent::Mprotect { .. } => SyscallKind::Mprotect,
            SyscallEvent::Setuid { .. } => SyscallKind::Setuid,
            SyscallEvent::Getuid => SyscallKind::Getuid,
            SyscallEvent::Time { .. } => SyscallKind::Time,
            SyscallEvent::Exec => SyscallKind::Exec,
            SyscallEvent::Socket => SyscallKind::Socket,
        }
    }
}

/// An observable trace position: an event-emitting step together with the
/// state snapshot it executed in. `uid` is the uid *before* the instruction
/// ran, so a `SETUID 0` position still shows the pre-escalation uid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub step: usize,
    pub loc: Loc,
    pub uid: u32,
    pub events: Vec<TraceEvent>,
}

/// A finite execution trace: the executed location sequence, the observable
/// positions (event-emitting steps), and why the run stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub locs: Vec<Loc>,
    pub observations: Vec<Observation>,
    pub termination: Termination,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.locs.len()
    }

    pub fn truncated(&self) -> bool {
        self.termination == Termination::StepLimit
    }

    /// All events in emission order, flattened.
    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.observations.iter().flat_map(|o| o.events.iter())
    }

    /// Prefix of this trace covering steps `0..steps`. Observations are
    /// cut accordingly and the prefix is marked truncated unless it covers
    /// the whole trace.
    pub fn prefix(&self, steps: usize) -> Trace {
        if steps >= self.steps() {
            return self.clone();
        }
        Trace {
            locs: self.locs[..steps].to_vec(),
            observations: self
                .observations
                .iter()
                .filter(|o| o.step < steps)
                .cloned()
                .collect(),
            termination: Termination::StepLimit,
        }
    }
}

/// Executes the instruction at `state.pc`, mutating `state` and returning
/// any events emitted. Calling on a halted state is a contract violation.
pub fn step(
    program: &Program,
    state: &mut MachineState,
    input: &[u8],
    cfg: &VmConfig,
) -> Vec<TraceEvent> {
    assert!(!state.halted(), "step on a halted machine");
    let mut events = Vec::new();
    let instr = &program.instructions[state.pc];
    let mut next_pc = state.pc + 1;
    match instr {
        Instruction::Const { dst, imm } => state.set_reg(*dst, *imm as u32),
        Instruction::Mov { dst, src } => state.set_reg(*dst, state.reg(*src)),
        Instruction::Alu { op, dst, lhs, rhs } => {
            state.set_reg(*dst, op.eval(state.reg(*lhs), state.reg(*rhs)));
        }
        Instruction::Not { dst, src } => state.set_reg(*dst, !state.reg(*src)),
        Instruction::Load { dst, addr } => {
            let a = state.reg(*addr);
            if a >= cfg.addr_space {
                state.status = Status::Faulted { addr: a };
                return events;
            }
            let v = state.mem.get(&a).copied().unwrap_or(0);
            state.set_reg(*dst, v as u32);
        }
        Instruction::Store { addr, src } => {
            let a = state.reg(*addr);
            if a >= cfg.addr_space {
                state.status = Status::Faulted { addr: a };
                return events;
            }
            let v = (state.reg(*src) & 0xff) as u8;
            state.mem.insert(a, v);
            events.push(TraceEvent::MemWrite { addr: a, value: v, region: Region::of_addr(a, cfg) });
        }
        Instruction::Jmp { target } => next_pc = *target,
        Instruction::Br { cmp, lhs, rhs, target } => {
            let taken = cmp.eval(state.reg(*lhs), state.reg(*rhs));
            events.push(TraceEvent::BranchTaken { site: state.pc, taken });
            if taken {
                next_pc = *target;
            }
        }
        Instruction::Input { dst } => {
            let v = input.get(state.input_cursor).copied().unwrap_or(0);
            state.input_cursor += 1;
            state.set_reg(*dst, v as u32);
        }
        Instruction::ReadFile { path } => {
            events.push(TraceEvent::Syscall(SyscallEvent::ReadFile {
                path: *path,
                sensitive: path.is_sensitive(),
            }));
        }
        Instruction::Send { socket } => {
            events.push(TraceEvent::Syscall(SyscallEvent::Send { socket: *socket }));
        }
        Instruction::WriteFile { path } => {
            events.push(TraceEvent::Syscall(SyscallEvent::WriteFile { path: *path }));
        }
        Instruction::Mprotect { region, perms } => {
            events.push(TraceEvent::Syscall(SyscallEvent::Mprotect {
                region: *region,
                perms: *perms,
            }));
        }
        Instruction::Setuid { value } => {
            let old = state.uid;
            state.uid = *value;
            events.push(TraceEvent::Syscall(SyscallEvent::Setuid { value: *value }));
            events.push(TraceEvent::UidChange { old, new: *value });
        }
        Instruction::Getuid { dst } => {
            state.set_reg(*dst, state.uid);
            events.push(TraceEvent::Syscall(SyscallEvent::Getuid));
        }
        Instruction::Time { dst } => {
            // Environment time is modeled as the next input byte, so timing
            // checks stay symbolically solvable.
            let v = input.get(state.input_cursor).copied().unwrap_or(0);
            state.input_cursor += 1;
            state.set_reg(*dst, v as u32);
            events.push(TraceEvent::Syscall(SyscallEvent::Time { value: v as u32 }));
        }
        Instruction::Exec => events.push(TraceEvent::Syscall(SyscallEvent::Exec)),
        Instruction::Socket => events.push(TraceEvent::Syscall(SyscallEvent::Socket)),
        Instruction::Halt => {
            state.status = Status::Halted;
            return events;
        }
    }
    state.pc = next_pc;
    events
}

/// Runs `program` on `input` from its entry point for at most `step_limit`
/// steps. Deterministic: identical arguments give identical traces.
pub fn run_concrete(program: &Program, input: &[u8], step_limit: usize, cfg: &VmConfig) -> Trace {
    assert!(step_limit >= 1, "step_limit must be at least 1");
    let mut state = MachineState::new(program.entry, cfg);
    let mut locs = Vec::new();
    let mut observations = Vec::new();
    let mut termination = Termination::StepLimit;
    for step_idx in 0..step_limit {
        if state.halted() {
            break;
        }
        let loc = state.pc;
        let uid = state.uid;
        locs.push(loc);
        let events = step(program, &mut state, input, cfg);
        if !events.is_empty() {
            observations.push(Observation { step: step_idx, loc, uid, events });
        }
        match state.status {
            Status::Running => {}
            Status::Halted => {
                termination = Termination::Halted;
                break;
            }
            Status::Faulted { addr } => {
                termination = Termination::Faulted { addr };
                break;
            }
        }
    }
    if state.halted() && termination == Termination::StepLimit {
        // Halt happened on an earlier step, loop exited at the top.
        termination = match state.status {
            Status::Faulted { addr } => Termination::Faulted { addr },
            _ => Termination::Halted,
        };
    }
    Trace { locs, observations, termination }
}
