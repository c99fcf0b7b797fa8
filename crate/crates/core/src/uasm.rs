//! Line-oriented micro-assembler and disassembler.
//!
//! ```text
//! cld:
//!   tmp1 = unk_109(1)      // comment
//!   UJMPC(tmp1, .slow)
//! .fast:
//!   NOP
//!   SEQW UEND0
//! ```
//!
//! Statements pack into triads in order. A label starts a new triad, padding
//! the previous one. A `SEQW` line attaches to the triad holding the
//! preceding uop and closes it; a `SEQW` with no pending uop gets a triad of
//! padding. `dst = src` is a plain register move.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::uisa::{
    CondCode, MicroOp, Microprogram, Opcode, Operand, Param, Reg, SeqDirective, Slot, Sym, Target,
    Triad, UAddr,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown opcode `{token}`")]
    UnknownOpcode { token: String, line: usize },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { label: String, line: usize },
    #[error("line {line}: malformed operand `{text}`")]
    MalformedOperand { text: String, line: usize },
    #[error("line {line}: malformed statement `{text}`")]
    MalformedStatement { text: String, line: usize },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { label: String, line: usize },
    #[error("program has no uops, so the entrypoint is unresolved")]
    UnresolvedEntrypoint,
    #[error("validation failed: {0}")]
    Invalid(#[from] crate::uisa::ValidateError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetRef {
    Label(String),
    Reg(Reg),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UopStmt {
    pub op: Opcode,
    pub cond: Option<CondCode>,
    pub dst: Option<Operand>,
    pub srcs: Vec<Operand>,
    pub target: Option<TargetRef>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SeqStmt {
    Plain(SeqDirective),
    Goto(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Label(String),
    Uop(UopStmt),
    Seqw(SeqStmt),
    Comment(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceUnit {
    pub name: String,
    /// Statements with their 1-based source line numbers.
    pub lines: Vec<(usize, Stmt)>,
}

fn parse_int(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()
    } else if let Some(neg) = s.strip_prefix('-') {
        parse_int(neg).map(|v| v.wrapping_neg())
    } else {
        s.replace('_', "").parse().ok()
    }
}

pub fn parse_operand(text: &str, line: usize) -> Result<Operand, AsmError> {
    let t = text.trim();
    if let Some(r) = Reg::parse(t) {
        return Ok(Operand::Reg(r));
    }
    if let Some(p) = Param::parse(t) {
        return Ok(Operand::Param(p));
    }
    if let Some(s) = Sym::parse(t) {
        return Ok(Operand::Sym(s));
    }
    if let Some(v) = parse_int(t) {
        return Ok(Operand::Imm(v));
    }
    Err(AsmError::MalformedOperand { text: t.to_string(), line })
}

fn is_label_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '#' | '_' | '/' | ' ' | '-'))
}

fn parse_uop(text: &str, line: usize) -> Result<UopStmt, AsmError> {
    let malformed = || AsmError::MalformedStatement { text: text.to_string(), line };
    let (dst, rhs) = match text.split_once('=') {
        Some((l, r)) => (Some(parse_operand(l, line)?), r.trim()),
        None => (None, text.trim()),
    };
    if let Some(d) = &dst {
        if !matches!(d, Operand::Reg(_) | Operand::Param(_)) {
            return Err(AsmError::MalformedOperand { text: d.to_string(), line });
        }
    }
    let Some(open) = rhs.find('(') else {
        // Bare `dst = src` is a move; a bare mnemonic is a zero-operand call.
        if dst.is_some() {
            let src = parse_operand(rhs, line)?;
            return Ok(UopStmt { op: Opcode::Move, cond: None, dst, srcs: vec![src], target: None });
        }
        let (op, cond) = Opcode::parse(rhs)
            .ok_or_else(|| AsmError::UnknownOpcode { token: rhs.to_string(), line })?;
        return Ok(UopStmt { op, cond, dst, srcs: vec![], target: None });
    };
    if !rhs.ends_with(')') {
        return Err(malformed());
    }
    let mnem = rhs[..open].trim();
    let (op, cond) = Opcode::parse(mnem)
        .ok_or_else(|| AsmError::UnknownOpcode { token: mnem.to_string(), line })?;
    let inner = rhs[open + 1..rhs.len() - 1].trim();
    let mut args: Vec<&str> = if inner.is_empty() { vec![] } else { inner.split(',').map(str::trim).collect() };
    let mut target = None;
    if op.is_branch() {
        let t = args.pop().ok_or_else(malformed)?;
        target = Some(match Reg::parse(t) {
            Some(r) => TargetRef::Reg(r),
            None if is_label_name(t) && parse_int(t).is_none() => TargetRef::Label(t.to_string()),
            None => return Err(AsmError::MalformedOperand { text: t.to_string(), line }),
        });
    }
    let srcs = args.into_iter().map(|a| parse_operand(a, line)).collect::<Result<Vec<_>, _>>()?;
    Ok(UopStmt { op, cond, dst, srcs, target })
}

/// Parses source text into statements without resolving labels.
pub fn parse_source(name: &str, text: &str) -> Result<SourceUnit, AsmError> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let (code, comment) = match raw.find("//") {
            Some(p) => (&raw[..p], Some(raw[p + 2..].trim())),
            None => (raw, None),
        };
        let code = code.trim();
        if code.is_empty() {
            if let Some(c) = comment {
                lines.push((line, Stmt::Comment(c.to_string())));
            }
            continue;
        }
        let stmt = if let Some(label) = code.strip_suffix(':') {
            let label = label.trim();
            if !is_label_name(label) {
                return Err(AsmError::MalformedStatement { text: code.to_string(), line });
            }
            Stmt::Label(label.to_string())
        } else if code.len() >= 5 && code[..5].eq_ignore_ascii_case("SEQW ") {
            let rest = code[5..].trim();
            let mut parts = rest.split_whitespace();
            let head = parts.next().unwrap_or("");
            if head.eq_ignore_ascii_case("GOTO") {
                let label = rest[4..].trim();
                if !is_label_name(label) {
                    return Err(AsmError::MalformedStatement { text: code.to_string(), line });
                }
                Stmt::Seqw(SeqStmt::Goto(label.to_string()))
            } else {
                let d = SeqDirective::NAMED
                    .iter()
                    .find(|(_, n)| n.eq_ignore_ascii_case(rest))
                    .map(|(d, _)| *d)
                    .ok_or_else(|| AsmError::UnknownOpcode { token: format!("SEQW {rest}"), line })?;
                Stmt::Seqw(SeqStmt::Plain(d))
            }
        } else {
            Stmt::Uop(parse_uop(code, line)?)
        };
        lines.push((line, stmt));
    }
    Ok(SourceUnit { name: name.to_string(), lines })
}

/// Packs statements into triads and resolves labels.
pub fn assemble(src: &SourceUnit) -> Result<Microprogram, AsmError> {
    // First pass: triad layout and label addresses.
    enum Pending {
        Uop(usize, UopStmt),
        Seq(usize, SeqStmt),
    }
    type Layout = (Vec<(usize, UopStmt)>, Option<(usize, SeqStmt)>);
    let mut triads: Vec<Layout> = Vec::new();
    let mut cur: Vec<(usize, UopStmt)> = Vec::new();
    let mut labels: Vec<(String, UAddr)> = Vec::new();
    let mut seen = BTreeSet::new();
    let flush = |cur: &mut Vec<(usize, UopStmt)>, triads: &mut Vec<_>, seq: Option<(usize, SeqStmt)>| {
        triads.push((std::mem::take(cur), seq));
    };
    for (line, stmt) in &src.lines {
        let item = match stmt {
            Stmt::Comment(_) => continue,
            Stmt::Label(name) => {
                if !seen.insert(name.clone()) {
                    return Err(AsmError::DuplicateLabel { label: name.clone(), line: *line });
                }
                if !cur.is_empty() {
                    flush(&mut cur, &mut triads, None);
                }
                labels.push((name.clone(), triads.len() as UAddr * 3));
                continue;
            }
            Stmt::Uop(u) => Pending::Uop(*line, u.clone()),
            Stmt::Seqw(s) => Pending::Seq(*line, s.clone()),
        };
        match item {
            Pending::Uop(line, u) => {
                if cur.len() == 3 {
                    flush(&mut cur, &mut triads, None);
                }
                cur.push((line, u));
            }
            Pending::Seq(line, s) => flush(&mut cur, &mut triads, Some((line, s))),
        }
    }
    if !cur.is_empty() {
        flush(&mut cur, &mut triads, None);
    }
    if triads.is_empty() {
        return Err(AsmError::UnresolvedEntrypoint);
    }

    let resolve = |name: &str, line: usize| -> Result<UAddr, AsmError> {
        labels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| *a)
            .filter(|a| (*a as usize / 3) < triads.len())
            .ok_or_else(|| AsmError::UnresolvedLabel { label: name.to_string(), line })
    };

    let mut out = Vec::with_capacity(triads.len());
    for (uops, seq) in &triads {
        let mut slots = [Slot::Pad, Slot::Pad, Slot::Pad];
        for (i, (line, u)) in uops.iter().enumerate() {
            let target = match &u.target {
                None => None,
                Some(TargetRef::Reg(r)) => Some(Target::Indirect(*r)),
                Some(TargetRef::Label(l)) => Some(Target::Direct(resolve(l, *line)?)),
            };
            slots[i] = Slot::Op(MicroOp {
                op: u.op,
                cond: u.cond,
                dst: u.dst.clone(),
                srcs: u.srcs.clone(),
                target,
            });
        }
        let seqw = match seq {
            None => SeqDirective::None,
            Some((_, SeqStmt::Plain(d))) => *d,
            Some((line, SeqStmt::Goto(l))) => SeqDirective::Goto(resolve(l, *line)?),
        };
        out.push(Triad { slots, seqw });
    }
    let prog = Microprogram { name: src.name.clone(), entry: 0, triads: out, labels };
    prog.validate()?;
    Ok(prog)
}

pub fn assemble_text(name: &str, text: &str) -> Result<Microprogram, AsmError> {
    assemble(&parse_source(name, text)?)
}

/// Produces canonical source. Padding slots are omitted; direct targets
/// without a label get a synthetic `Uxxxx` label.
pub fn disassemble(p: &Microprogram) -> SourceUnit {
    let mut labels = p.labels.clone();
    let mut targets: BTreeSet<UAddr> = p
        .uops()
        .filter_map(|(_, u)| match u.target {
            Some(Target::Direct(a)) => Some(a),
            _ => None,
        })
        .collect();
    targets.extend(p.triads.iter().filter_map(|t| match t.seqw {
        SeqDirective::Goto(a) => Some(a),
        _ => None,
    }));
    for a in targets {
        if p.label_at(a).is_none() {
            labels.push((format!("U{a:04x}"), a));
        }
    }
    let name_of = |a: UAddr| -> String {
        labels.iter().find(|(_, x)| *x == a).map(|(n, _)| n.clone()).unwrap_or_else(|| format!("U{a:04x}"))
    };
    let mut lines = Vec::new();
    let mut n = 0;
    let mut push = |s: Stmt| {
        n += 1;
        lines.push((n, s));
    };
    for (i, t) in p.triads.iter().enumerate() {
        let base = i as UAddr * 3;
        for (name, _) in labels.iter().filter(|(_, a)| *a == base) {
            push(Stmt::Label(name.clone()));
        }
        for s in &t.slots {
            if let Slot::Op(u) = s {
                push(Stmt::Uop(UopStmt {
                    op: u.op,
                    cond: u.cond,
                    dst: u.dst.clone(),
                    srcs: u.srcs.clone(),
                    target: match &u.target {
                        None => None,
                        Some(Target::Direct(a)) => Some(TargetRef::Label(name_of(*a))),
                        Some(Target::Indirect(r)) => Some(TargetRef::Reg(*r)),
                    },
                }));
            }
        }
        match t.seqw {
            SeqDirective::None => {}
            SeqDirective::Goto(a) => push(Stmt::Seqw(SeqStmt::Goto(name_of(a)))),
            d => push(Stmt::Seqw(SeqStmt::Plain(d))),
        }
    }
    SourceUnit { name: p.name.clone(), lines }
}

pub fn render_uop_stmt(u: &UopStmt) -> String {
    let mut args: Vec<String> = u.srcs.iter().map(|s| s.to_string()).collect();
    match &u.target {
        Some(TargetRef::Label(l)) => args.push(l.clone()),
        Some(TargetRef::Reg(r)) => args.push(r.to_string()),
        None => {}
    }
    let body = if u.op == Opcode::Move && u.srcs.len() == 1 && u.target.is_none() {
        args.join(", ")
    } else {
        format!("{}({})", u.op.mnemonic(u.cond), args.join(", "))
    };
    match &u.dst {
        Some(d) => format!("{d} = {body}"),
        None => body,
    }
}

impl SourceUnit {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (_, s)) in self.lines.iter().enumerate() {
            match s {
                Stmt::Label(l) => {
                    if i > 0 {
                        out.push('\n');
                    }
                    let _ = writeln!(out, "{l}:");
                }
                Stmt::Uop(u) => {
                    let _ = writeln!(out, "  {}", render_uop_stmt(u));
                }
                Stmt::Seqw(SeqStmt::Plain(d)) => {
                    let name = SeqDirective::NAMED.iter().find(|(x, _)| x == d).map(|(_, n)| *n).unwrap_or("NONE");
                    let _ = writeln!(out, "  SEQW {name}");
                }
                Stmt::Seqw(SeqStmt::Goto(l)) => {
                    let _ = writeln!(out, "  SEQW GOTO {l}");
                }
                Stmt::Comment(c) => {
                    let _ = writeln!(out, "  // {c}");
                }
            }
        }
        out
    }
}

pub fn disassemble_text(p: &Microprogram) -> String {
    disassemble(p).to_text()
}
