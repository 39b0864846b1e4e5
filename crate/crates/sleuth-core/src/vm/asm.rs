//! Assembly text format: one instruction per line, `;` comments, `label:`
//! definitions (optionally followed by an instruction on the same line), and
//! optional `.name` / `.seed` metadata directives.
//!
//! `parse_program` and `pretty_print` round-trip:
//! `parse_program(&pretty_print(p)) == p` for every valid program.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    AluOp, CmpKind, Instruction, Loc, PathId, Perms, Program, ProgramError, ProgramMeta, Reg,
    Region,
};

/// Parse failure with a 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("bad operand `{got}`: expected {expected}")]
    BadOperand { expected: &'static str, got: String },
    #[error("expected {expected} operands, found {got}")]
    OperandCount { expected: usize, got: usize },
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("invalid label name `{0}`")]
    BadLabel(String),
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("{0}")]
    Invalid(ProgramError),
}

fn err(line: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, kind }
}

fn is_label_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Pending instruction with unresolved label operands.
enum Pending {
    Ready(Instruction),
    Jmp { label: String, line: usize },
    Br { cmp: CmpKind, lhs: Reg, rhs: Reg, label: String, line: usize },
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, ParseError> {
    let bad = || err(line, ParseErrorKind::BadOperand { expected: "register r0..r7", got: tok.to_string() });
    let rest = tok.strip_prefix('r').ok_or_else(bad)?;
    let idx: u8 = rest.parse().map_err(|_| bad())?;
    Reg::new(idx).ok_or_else(bad)
}

fn parse_int(tok: &str, line: usize) -> Result<i64, ParseError> {
    let bad = || err(line, ParseErrorKind::BadOperand { expected: "integer", got: tok.to_string() });
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).map_err(|_| bad())?
    } else {
        body.parse::<i64>().map_err(|_| bad())?
    };
    Ok(if neg { -value } else { value })
}

fn parse_imm32(tok: &str, line: usize) -> Result<i32, ParseError> {
    let v = parse_int(tok, line)?;
    if v < i32::MIN as i64 || v > u32::MAX as i64 {
        return Err(err(
            line,
            ParseErrorKind::BadOperand { expected: "32-bit immediate", got: tok.to_string() },
        ));
    }
    Ok(v as u32 as i32)
}

fn parse_u32(tok: &str, line: usize) -> Result<u32, ParseError> {
    let v = parse_int(tok, line)?;
    if !(0..=u32::MAX as i64).contains(&v) {
        return Err(err(
            line,
            ParseErrorKind::BadOperand { expected: "unsigned 32-bit integer", got: tok.to_string() },
        ));
    }
    Ok(v as u32)
}

fn parse_path(tok: &str, line: usize) -> Result<PathId, ParseError> {
    PathId::from_name(tok).ok_or_else(|| {
        err(line, ParseErrorKind::BadOperand { expected: "path identifier", got: tok.to_string() })
    })
}

fn parse_mem_operand(tok: &str, line: usize) -> Result<Reg, ParseError> {
    tok.strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| {
            err(line, ParseErrorKind::BadOperand { expected: "memory operand [rN]", got: tok.to_string() })
        })
        .and_then(|inner| parse_reg(inner, line))
}

fn parse_cmp(tok: &str, line: usize) -> Result<CmpKind, ParseError> {
    [CmpKind::Eq, CmpKind::Ne, CmpKind::Slt, CmpKind::Sle, CmpKind::Ult, CmpKind::Ule]
        .into_iter()
        .find(|c| c.name() == tok)
        .ok_or_else(|| {
            err(line, ParseErrorKind::BadOperand { expected: "comparison kind", got: tok.to_string() })
        })
}

fn expect_arity(ops: &[&str], n: usize, line: usize) -> Result<(), ParseError> {
    if ops.len() != n {
        return Err(err(line, ParseErrorKind::OperandCount { expected: n, got: ops.len() }));
    }
    Ok(())
}

fn parse_instruction(text: &str, line: usize) -> Result<Pending, ParseError> {
    let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let alu = |op: AluOp, ops: &[&str]| -> Result<Pending, ParseError> {
        expect_arity(ops, 3, line)?;
        Ok(Pending::Ready(Instruction::Alu {
            op,
            dst: parse_reg(ops[0], line)?,
            lhs: parse_reg(ops[1], line)?,
            rhs: parse_reg(ops[2], line)?,
        }))
    };
    match mnemonic {
        "CONST" => {
            expect_arity(&ops, 2, line)?;
            Ok(Pending::Ready(Instruction::Const {
                dst: parse_reg(ops[0], line)?,
                imm: parse_imm32(ops[1], line)?,
            }))
        }
        "MOV" => {
            expect_arity(&ops, 2, line)?;
            Ok(Pending::Ready(Instruction::Mov {
                dst: parse_reg(ops[0], line)?,
                src: parse_reg(ops[1], line)?,
            }))
        }
        "ADD" => alu(AluOp::Add, &ops),
        "SUB" => alu(AluOp::Sub, &ops),
        "MUL" => alu(AluOp::Mul, &ops),
        "AND" => alu(AluOp::And, &ops),
        "OR" => alu(AluOp::Or, &ops),
        "XOR" => alu(AluOp::Xor, &ops),
        "SHL" => alu(AluOp::Shl, &ops),
        "SHR" => alu(AluOp::Shr, &ops),
        "NOT" => {
            expect_arity(&ops, 2, line)?;
            Ok(Pending::Ready(Instruction::Not {
                dst: parse_reg(ops[0], line)?,
                src: parse_reg(ops[1], line)?,
            }))
        }
        "LOAD" => {
            expect_arity(&ops, 2, line)?;
            Ok(Pending::Ready(Instruction::Load {
                dst: parse_reg(ops[0], line)?,
                addr: parse_mem_operand(ops[1], line)?,
            }))
        }
        "STORE" => {
            expect_arity(&ops, 2, line)?;
            Ok(Pending::Ready(Instruction::Store {
                addr: parse_mem_operand(ops[0], line)?,
                src: parse_reg(ops[1], line)?,
            }))
        }
        "JMP" => {
            expect_arity(&ops, 1, line)?;
            if !is_label_name(ops[0]) {
                return Err(err(line, ParseErrorKind::BadLabel(ops[0].to_string())));
            }
            Ok(Pending::Jmp { label: ops[0].to_string(), line })
        }
        "BR" => {
            // BR CMP rA, rB, label: the comparison rides with the mnemonic.
            let (cmp_tok, rest) = rest.split_once(char::is_whitespace).ok_or_else(|| {
                err(line, ParseErrorKind::OperandCount { expected: 4, got: ops.len() })
            })?;
            let cmp = parse_cmp(cmp_tok, line)?;
            let ops: Vec<&str> = rest.split(',').map(str::trim).collect();
            expect_arity(&ops, 3, line)?;
            if !is_label_name(ops[2]) {
                return Err(err(line, ParseErrorKind::BadLabel(ops[2].to_string())));
            }
            Ok(Pending::Br {
                cmp,
                lhs: parse_reg(ops[0], line)?,
                rhs: parse_reg(ops[1], line)?,
                label: ops[2].to_string(),
                line,
            })
        }
        "INPUT" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::Input { dst: parse_reg(ops[0], line)? }))
        }
        "READ_FILE" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::ReadFile { path: parse_path(ops[0], line)? }))
        }
        "SEND" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::Send { socket: parse_u32(ops[0], line)? }))
        }
        "WRITE_FILE" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::WriteFile { path: parse_path(ops[0], line)? }))
        }
        "MPROTECT" => {
            expect_arity(&ops, 2, line)?;
            let region = Region::from_name(ops[0]).ok_or_else(|| {
                err(line, ParseErrorKind::BadOperand { expected: "region name", got: ops[0].to_string() })
            })?;
            let perms = Perms::from_name(ops[1]).ok_or_else(|| {
                err(line, ParseErrorKind::BadOperand { expected: "permission flags", got: ops[1].to_string() })
            })?;
            Ok(Pending::Ready(Instruction::Mprotect { region, perms }))
        }
        "SETUID" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::Setuid { value: parse_u32(ops[0], line)? }))
        }
        "GETUID" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::Getuid { dst: parse_reg(ops[0], line)? }))
        }
        "TIME" => {
            expect_arity(&ops, 1, line)?;
            Ok(Pending::Ready(Instruction::Time { dst: parse_reg(ops[0], line)? }))
        }
        "EXEC" => {
            expect_arity(&ops, 0, line)?;
            Ok(Pending::Ready(Instruction::Exec))
        }
        "SOCKET" => {
            expect_arity(&ops, 0, line)?;
            Ok(Pending::Ready(Instruction::Socket))
        }
        "HALT" => {
            expect_arity(&ops, 0, line)?;
            Ok(Pending::Ready(Instruction::Halt))
        }
        other => Err(err(line, ParseErrorKind::UnknownMnemonic(other.to_string()))),
    }
}

/// Parses assembly text into a validated [`Program`].
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut pending: Vec<Pending> = Vec::new();
    let mut labels: BTreeMap<String, Loc> = BTreeMap::new();
    let mut meta = ProgramMeta::default();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let mut body = match raw.split_once(';') {
            Some((code, _comment)) => code.trim(),
            None => raw.trim(),
        };
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('.') {
            let (directive, value) = match rest.split_once(char::is_whitespace) {
                Some((d, v)) => (d, v.trim()),
                None => (rest, ""),
            };
            match directive {
                "name" => meta.name = value.to_string(),
                "seed" => meta.seed = value.to_string(),
                other => return Err(err(line, ParseErrorKind::UnknownDirective(other.to_string()))),
            }
            continue;
        }
        // Leading label definitions, possibly several, possibly followed by
        // an instruction on the same line.
        while let Some(colon) = body.find(':') {
            let (name, rest) = body.split_at(colon);
            let name = name.trim();
            if !is_label_name(name) {
                break;
            }
            if labels.insert(name.to_string(), pending.len()).is_some() {
                return Err(err(line, ParseErrorKind::DuplicateLabel(name.to_string())));
            }
            body = rest[1..].trim();
            if body.is_empty() {
                break;
            }
        }
        if body.is_empty() {
            continue;
        }
        pending.push(parse_instruction(body, line)?);
    }
    let resolve = |label: &str, line: usize| -> Result<Loc, ParseError> {
        labels
            .get(label)
            .copied()
            .ok_or_else(|| err(line, ParseErrorKind::UndefinedLabel(label.to_string())))
    };
    let mut instructions = Vec::with_capacity(pending.len());
    for p in pending {
        instructions.push(match p {
            Pending::Ready(i) => i,
            Pending::Jmp { label, line } => Instruction::Jmp { target: resolve(&label, line)? },
            Pending::Br { cmp, lhs, rhs, label, line } => {
                Instruction::Br { cmp, lhs, rhs, target: resolve(&label, line)? }
            }
        });
    }
    Program::new(instructions, labels, meta)
        .map_err(|e| err(last_line.max(1), ParseErrorKind::Invalid(e)))
}

/// Deterministic label to reference a location by: the alphabetically first
/// label defined there.
fn label_for(program: &Program, loc: Loc) -> Option<&str> {
    program
        .labels
        .iter()
        .filter(|(_, l)| **l == loc)
        .map(|(n, _)| n.as_str())
        .next()
}

fn render_instruction(program: &Program, instr: &Instruction) -> String {
    match instr {
        Instruction::Const { dst, imm } => format!("CONST {dst}, {imm}"),
        Instruction::Mov { dst, src } => format!("MOV {dst}, {src}"),
        Instruction::Alu { op, dst, lhs, rhs } => format!("{} {dst}, {lhs}, {rhs}", op.name()),
        Instruction::Not { dst, src } => format!("NOT {dst}, {src}"),
        Instruction::Load { dst, addr } => format!("LOAD {dst}, [{addr}]"),
        Instruction::Store { addr, src } => format!("STORE [{addr}], {src}"),
        Instruction::Jmp { target } => match label_for(program, *target) {
            Some(name) => format!("JMP {name}"),
            None => format!("JMP L{target}"),
        },
        Instruction::Br { cmp, lhs, rhs, target } => {
            let name = label_for(program, *target)
                .map(str::to_string)
                .unwrap_or_else(|| format!("L{target}"));
            format!("BR {} {lhs}, {rhs}, {name}", cmp.name())
        }
        Instruction::Input { dst } => format!("INPUT {dst}"),
        Instruction::ReadFile { path } => format!("READ_FILE {}", path.name()),
        Instruction::Send { socket } => format!("SEND {socket}"),
        Instruction::WriteFile { path } => format!("WRITE_FILE {}", path.name()),
        Instruction::Mprotect { region, perms } => {
            format!("MPROTECT {}, {perms}", region.name())
        }
        Instruction::Setuid { value } => format!("SETUID {value}"),
        Instruction::Getuid { dst } => format!("GETUID {dst}"),
        Instruction::Time { dst } => format!("TIME {dst}"),
        Instruction::Exec => "EXEC".to_string(),
        Instruction::Socket => "SOCKET".to_string(),
        Instruction::Halt => "HALT".to_string(),
    }
}

/// Renders a program back to assembly text. Inverse of [`parse_program`]
/// for programs whose jump targets all carry a label (always true for
/// parsed programs).
pub fn pretty_print(program: &Program) -> String {
    let mut out = String::new();
    if !program.meta.name.is_empty() {
        writeln!(out, ".name {}", program.meta.name).unwrap();
    }
    if !program.meta.seed.is_empty() {
        writeln!(out, ".seed {}", program.meta.seed).unwrap();
    }
    for (loc, instr) in program.instructions.iter().enumerate() {
        for name in program.labels_at(loc) {
            writeln!(out, "{name}:").unwrap();
        }
        writeln!(out, "    {}", render_instruction(program, instr)).unwrap();
    }
    out
}

/// Renders a window of `width` instructions centered on `center`, one per
/// line, each prefixed with its location. Used as classifier / scoring
/// context around a fork site.
pub fn disassemble(program: &Program, center: Loc, width: usize) -> String {
    if width == 0 || program.is_empty() {
        return String::new();
    }
    let half = width / 2;
    let start = center.saturating_sub(half);
    let end = (start + width).min(program.len());
    let start = end.saturating_sub(width);
    let mut out = String::new();
    for loc in start..end {
        let marker = if loc == center { ">" } else { " " };
        writeln!(
            out,
            "{marker}{loc:04}: {}",
            render_instruction(program, &program.instructions[loc])
        )
        .unwrap();
    }
    out
}

/// Instructions inside the same window [`disassemble`] renders, for callers
/// that need the window's opcodes rather than its text.
pub fn window(program: &Program, center: Loc, width: usize) -> &[Instruction] {
    if width == 0 || program.is_empty() {
        return &[];
    }
    let half = width / 2;
    let start = center.saturating_sub(half);
    let end = (start + width).min(program.len());
    let start = end.saturating_sub(width);
    &program.instructions[start..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::VmConfig;

    #[test]
    fn parses_labels_comments_directives() {
        let text = "\
.name sample
.seed 42
; setup
entry:
    CONST r0, 0x10 ; hex immediate
    INPUT r1
loop: BR NE r0, r1, loop
    HALT
";
        let p = parse_program(text).unwrap();
        assert_eq!(p.meta.name, "sample");
        assert_eq!(p.meta.seed, "42");
        assert_eq!(p.entry, 0);
        assert_eq!(p.labels["loop"], 2);
        assert_eq!(p.instructions[0], Instruction::Const { dst: Reg::new(0).unwrap(), imm: 16 });
        assert_eq!(p.instructions[2].target(), Some(2));
    }

    #[test]
    fn entry_label_overrides_location_zero() {
        let p = parse_program("HALT\nentry:\nSEND 1\nHALT\n").unwrap();
        assert_eq!(p.entry, 1);
        let t = crate::vm::run_concrete(&p, &[], 10, &VmConfig::default());
        assert_eq!(t.locs[0], 1);
    }

    #[test]
    fn undefined_label_is_an_error() {
        let e = parse_program("JMP nowhere\nHALT\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(matches!(e.kind, ParseErrorKind::UndefinedLabel(_)));
    }

    #[test]
    fn duplicate_label_is_an_error() {
        let e = parse_program("a:\nHALT\na:\nHALT\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::DuplicateLabel(_)));
    }

    #[test]
    fn bad_register_reports_line() {
        let e = parse_program("CONST r0, 1\nMOV r9, r0\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn negative_and_hex_immediates() {
        let p = parse_program("CONST r0, -1\nCONST r1, 0xFFFFFFFF\nHALT\n").unwrap();
        assert_eq!(p.instructions[0], Instruction::Const { dst: Reg::new(0).unwrap(), imm: -1 });
        assert_eq!(p.instructions[1], Instruction::Const { dst: Reg::new(1).unwrap(), imm: -1 });
    }

    #[test]
    fn round_trip_fixture() {
        let text = "\
.name rt
entry:
    INPUT r0
    CONST r1, 66
    BR EQ r0, r1, hit
    HALT
hit:
    READ_FILE SENSITIVE_DOC
    MPROTECT TEXT, RWX
    STORE [r2], r0
    SEND 1
    HALT
";
        let p = parse_program(text).unwrap();
        let printed = pretty_print(&p);
        let q = parse_program(&printed).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn disassemble_window_clamps_at_edges() {
        let p = parse_program("CONST r0, 1\nCONST r1, 2\nCONST r2, 3\nHALT\n").unwrap();
        let tail = disassemble(&p, 3, 8);
        assert_eq!(tail.lines().count(), 4);
        assert!(tail.lines().last().unwrap().contains("HALT"));
        let head = disassemble(&p, 0, 2);
        assert_eq!(head.lines().count(), 2);
        assert!(head.starts_with(">0000:"));
    }
}
