//! Select-based hardening of conditional microcode branches, plus a static
//! classifier for the three microcode-branch leak classes.
//!
//! Both passes reason about paths through one microprogram. A path follows
//! fall-through edges of conditional branches, direct targets of
//! unconditional ones, and sequence words between triads. Loops are the
//! address ranges closed by a backward transfer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::machine::{exec, ExecError, Env, Scenario, Seg, TaintedValue};
use crate::pipeline::{predict, PredictionPolicy};
use crate::uasm::{assemble, disassemble, AsmError, Stmt, UopStmt};
use crate::uisa::{
    invert_cond, triad_position, BranchKind, CondCode, MicroOp, Microprogram, Opcode, Operand, Param, Reg,
    RegFile, SeqDirective, Sym, Target, UAddr,
};

pub use crate::corpus::VulnClass;

const WALK_LIMIT: usize = 4096;

// ---------------------------------------------------------------------------
// Control flow

/// First uop executed when sequencing reaches `a`, applying sequence words
/// of triads that run out of uops.
fn resolve(p: &Microprogram, mut a: UAddr) -> Option<UAddr> {
    for _ in 0..=p.triads.len() {
        let t = a / 3;
        if t as usize >= p.triads.len() {
            return None;
        }
        if let Some(s) = (a % 3..3).find(|s| p.uop(t * 3 + s).is_some()) {
            return Some(t * 3 + s);
        }
        match p.triads[t as usize].seqw {
            d if d.is_end() => return None,
            SeqDirective::Goto(x) => a = x,
            _ => a = (t + 1) * 3,
        }
    }
    None
}

/// Where sequencing goes after the uop at `a` falls through.
fn fall_through(p: &Microprogram, a: UAddr) -> Option<UAddr> {
    let t = a / 3;
    if let Some(s) = (a % 3 + 1..3).find(|s| p.uop(t * 3 + s).is_some()) {
        return Some(t * 3 + s);
    }
    match p.triads.get(t as usize)?.seqw {
        d if d.is_end() => None,
        SeqDirective::Goto(x) => resolve(p, x),
        _ => resolve(p, (t + 1) * 3),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LoopRange {
    head: UAddr,
    end: UAddr,
}

impl LoopRange {
    fn contains(&self, a: UAddr) -> bool {
        (self.head..=self.end).contains(&a)
    }
}

/// Loops closed by a backward `SEQW GOTO` or backward direct branch.
fn loops(p: &Microprogram) -> Vec<LoopRange> {
    let mut out = Vec::new();
    for (i, t) in p.triads.iter().enumerate() {
        let end = i as UAddr * 3 + 2;
        if let SeqDirective::Goto(x) = t.seqw {
            if x <= end {
                out.push(LoopRange { head: x, end });
            }
        }
    }
    for (a, u) in p.uops() {
        if let Some(Target::Direct(x)) = u.target {
            if x <= a {
                out.push(LoopRange { head: x, end: a / 3 * 3 + 2 });
            }
        }
    }
    out.sort_by_key(|l| (l.head, l.end));
    out.dedup();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WalkEnd {
    Uend,
    Fault,
    /// Came back to an address already on the path or in the stop set.
    Revisit(UAddr),
    /// Entered a loop the walk is not allowed into.
    Foreign,
    Indirect,
    Limit,
}

#[derive(Clone, Debug)]
struct Step {
    addr: UAddr,
    /// A backward transfer was taken somewhere before this step.
    after_back_edge: bool,
}

#[derive(Clone, Debug)]
struct Walk {
    steps: Vec<Step>,
    end: WalkEnd,
}

/// Follows the fall-through path from `start`, reached from `from`.
fn walk(
    p: &Microprogram,
    from: Option<UAddr>,
    start: Option<UAddr>,
    stop: &BTreeSet<UAddr>,
    foreign: &[LoopRange],
) -> Walk {
    let mut steps = Vec::new();
    let mut seen = BTreeSet::new();
    let mut back = false;
    let mut prev = from;
    let mut cur = start;
    while let Some(a) = cur {
        if stop.contains(&a) || !seen.insert(a) {
            return Walk { steps, end: WalkEnd::Revisit(a) };
        }
        if foreign.iter().any(|l| l.contains(a) && !prev.is_some_and(|q| l.contains(q))) {
            return Walk { steps, end: WalkEnd::Foreign };
        }
        if steps.len() >= WALK_LIMIT {
            return Walk { steps, end: WalkEnd::Limit };
        }
        if prev.is_some_and(|q| a <= q) {
            back = true;
        }
        steps.push(Step { addr: a, after_back_edge: back });
        let u = p.uop(a).expect("walk visits real uops");
        if u.op == Opcode::SigEvent && raises(u) {
            return Walk { steps, end: WalkEnd::Fault };
        }
        prev = Some(a);
        cur = match (u.branch_kind(), &u.target) {
            (Some(BranchKind::UncondDirect), Some(Target::Direct(t))) => resolve(p, *t),
            (Some(BranchKind::UncondIndirect), _) => return Walk { steps, end: WalkEnd::Indirect },
            _ => fall_through(p, a),
        };
    }
    Walk { steps, end: WalkEnd::Uend }
}

/// SIGEVENT with a nonzero (or unknown) code.
fn raises(u: &MicroOp) -> bool {
    !matches!(u.srcs.first(), Some(Operand::Imm(0)))
}

fn target_of(u: &MicroOp) -> Option<UAddr> {
    match u.target {
        Some(Target::Direct(t)) => Some(t),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Locations and abstract values

/// A register-like location a select can guard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Loc {
    Reg(Reg),
    Param(Param),
}

impl Loc {
    fn of(op: &Operand) -> Option<Loc> {
        match op {
            Operand::Reg(r) if r.is_architectural() => Some(Loc::Reg(r.container())),
            Operand::Reg(r) => Some(Loc::Reg(*r)),
            Operand::Param(p) if is_reg_param(*p) => Some(Loc::Param(*p)),
            _ => None,
        }
    }

    fn operand(self) -> Operand {
        match self {
            Loc::Reg(r) => Operand::Reg(r),
            Loc::Param(p) => Operand::Param(p),
        }
    }

    /// Visible to later macro-ops.
    pub fn is_architectural(self) -> bool {
        match self {
            Loc::Reg(r) => r.is_architectural(),
            Loc::Param(_) => true,
        }
    }

    pub fn parse(s: &str) -> Option<Loc> {
        Reg::parse(s)
            .map(|r| Loc::of(&Operand::Reg(r)).expect("registers are locations"))
            .or_else(|| Param::parse(s).filter(|p| is_reg_param(*p)).map(Loc::Param))
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.operand(), f)
    }
}

fn is_reg_param(p: Param) -> bool {
    matches!(p, Param::R64 | Param::R32 | Param::BndUb)
}

fn reads(u: &MicroOp) -> Vec<Loc> {
    let mut v: Vec<Loc> = u.srcs.iter().filter_map(Loc::of).collect();
    if let Some(Target::Indirect(r)) = &u.target {
        v.extend(Loc::of(&Operand::Reg(*r)));
    }
    v.dedup();
    v
}

fn writes(u: &MicroOp) -> Vec<Loc> {
    let mut v: Vec<Loc> = u.dst.iter().filter_map(Loc::of).collect();
    if matches!(u.op, Opcode::CmpUjmp | Opcode::BtUjmp) {
        v.extend(u.srcs.first().and_then(Loc::of));
    }
    v
}

fn is_pure(op: Opcode) -> bool {
    use Opcode::*;
    matches!(
        op,
        Move | Add8
            | Add32
            | Add64
            | Sub32
            | Sub64
            | And32
            | And64
            | Or32
            | Or64
            | Xor32
            | Xor64
            | NotAnd32
            | NotAnd64
            | Rol32
            | Shl32
            | Shl64
            | Shr32
            | Shr64
            | ShrDsz64
            | ZeroExt32
            | ZeroExt64
            | ZeroExtN
            | AddSub64
    )
}

struct NoEnv;

impl Env for NoEnv {
    fn read_creg(&mut self, _: u16) -> TaintedValue {
        TaintedValue::default()
    }
    fn write_creg(&mut self, _: u16, _: TaintedValue) {}
    fn read_uram(&mut self, _: u16) -> TaintedValue {
        TaintedValue::default()
    }
    fn write_uram(&mut self, _: u16, _: TaintedValue) {}
    fn read_seg(&mut self, _: Seg) -> TaintedValue {
        TaintedValue::default()
    }
    fn read_mem(&mut self, a: u64, _: usize) -> Result<(u64, crate::machine::Taint), ExecError> {
        Err(ExecError::UnmappedMemory(a))
    }
}

/// Which state holds secrets, from a scenario or a conservative default.
struct Secrets<'a>(Option<&'a Scenario>);

impl Secrets<'_> {
    fn initial(&self) -> BTreeSet<Loc> {
        self.0
            .map(|sc| sc.regs.iter().filter(|(_, _, s)| *s).map(|(r, _, _)| Loc::Reg(r.container())).collect())
            .unwrap_or_default()
    }

    fn creg(&self, addr: Option<u64>) -> bool {
        match self.0 {
            Some(sc) => sc.creg.iter().any(|(a, _, s)| *s && addr.is_none_or(|x| x == *a as u64)),
            None => addr.is_none(),
        }
    }

    fn uram(&self, addr: Option<u64>) -> bool {
        match self.0 {
            Some(sc) => sc.uram.iter().any(|(a, _, s)| *s && addr.is_none_or(|x| x == *a as u64)),
            None => true,
        }
    }

    fn seg(&self, seg: Option<Seg>) -> bool {
        match self.0 {
            Some(sc) => sc.seg.iter().any(|(g, _, s)| *s && seg.is_none_or(|x| x == *g)),
            None => true,
        }
    }

    fn mem(&self, addr: Option<u64>) -> bool {
        let Some(sc) = self.0 else { return false };
        sc.mem.iter().any(|m| {
            m.secret
                && addr.is_none_or(|a| a < m.addr + m.bytes.len() as u64 && m.addr < a.saturating_add(8))
        })
    }
}

#[derive(Clone, Debug, Default)]
struct AbsState {
    secret: BTreeSet<Loc>,
    konst: BTreeMap<Loc, u64>,
}

impl AbsState {
    fn value(&self, op: &Operand) -> Option<u64> {
        match op {
            Operand::Imm(v) => Some(*v),
            _ => Loc::of(op).and_then(|l| self.konst.get(&l).copied()),
        }
    }

    fn is_secret(&self, l: Loc) -> bool {
        self.secret.contains(&l) && !self.konst.contains_key(&l)
    }

    fn is_zero(&self, l: Loc) -> bool {
        self.konst.get(&l) == Some(&0)
    }

    fn guard(&mut self, l: Loc) {
        self.secret.remove(&l);
        self.konst.insert(l, 0);
    }

    fn address(&self, srcs: &[Operand]) -> Option<u64> {
        let s = match srcs.first() {
            Some(Operand::Sym(Sym::Ds)) => &srcs[1..],
            _ => srcs,
        };
        let v: Option<Vec<u64>> = s.iter().map(|o| self.value(o)).collect();
        match v?.as_slice() {
            [a] => Some(*a),
            [b, d] => Some(b.wrapping_add(*d)),
            [b, i, sc, d] => Some(b.wrapping_add(i.wrapping_mul(*sc)).wrapping_add(*d)),
            _ => None,
        }
    }

    /// Updates the state for one executed uop.
    fn step(&mut self, u: &MicroOp, secrets: &Secrets) {
        let srcs_secret = reads(u).into_iter().any(|l| self.is_secret(l));
        let (secret, konst) = match u.op {
            op if is_pure(op) => {
                let konst = u
                    .srcs
                    .iter()
                    .map(|o| self.value(o).map(Operand::Imm))
                    .collect::<Option<Vec<_>>>()
                    .and_then(|srcs| {
                        let bound = MicroOp { srcs, dst: Some(Operand::Reg(Reg::tmp(0))), ..u.clone() };
                        let read = |_: Reg| TaintedValue::default();
                        exec(&bound, &read, &mut NoEnv).ok()?.writes.first().map(|(_, v)| v.data)
                    });
                (srcs_secret && konst.is_none(), konst)
            }
            Opcode::Select => {
                let v = u.srcs.get(1);
                let zero = v.and_then(|o| self.value(o)) == Some(0);
                (!zero && v.and_then(Loc::of).is_some_and(|l| self.is_secret(l)), zero.then_some(0))
            }
            Opcode::RdCreg64 => {
                let addr = match u.srcs.first() {
                    Some(Operand::Sym(s)) => s.creg().map(u64::from),
                    Some(o) => self.value(o),
                    None => None,
                };
                (srcs_secret || secrets.creg(addr), None)
            }
            Opcode::ReadUram64 => (srcs_secret || secrets.uram(u.srcs.first().and_then(|o| self.value(o))), None),
            Opcode::RdSeg => {
                let seg = match u.srcs.first() {
                    Some(Operand::Sym(Sym::Fs)) => Some(Seg::Fs),
                    Some(Operand::Sym(Sym::Gs)) => Some(Seg::Gs),
                    _ => None,
                };
                (secrets.seg(seg), None)
            }
            op if op.is_load() => (secrets.mem(self.address(&u.srcs)), None),
            _ => (srcs_secret, None),
        };
        for w in writes(u) {
            match (konst, u.dst.as_ref().and_then(Loc::of) == Some(w)) {
                (Some(k), true) => {
                    self.konst.insert(w, k);
                    self.secret.remove(&w);
                }
                _ => {
                    self.konst.remove(&w);
                    if secret {
                        self.secret.insert(w);
                    } else {
                        self.secret.remove(&w);
                    }
                }
            }
        }
    }
}

/// Abstract state on arrival at each uop along the predicted path from the
/// entrypoint.
fn states_from_entry(p: &Microprogram, secrets: &Secrets) -> BTreeMap<UAddr, AbsState> {
    let w = walk(p, None, resolve(p, p.entry), &BTreeSet::new(), &[]);
    let mut st = AbsState { secret: secrets.initial(), ..AbsState::default() };
    let mut out = BTreeMap::new();
    for s in &w.steps {
        out.entry(s.addr).or_insert_with(|| st.clone());
        st.step(p.uop(s.addr).expect("walk visits real uops"), secrets);
    }
    out
}

// ---------------------------------------------------------------------------
// Scanner

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanFinding {
    pub addr: UAddr,
    /// The branch as written, with its target label.
    pub uop: String,
    pub class: VulnClass,
    pub evidence: String,
    pub remediation: &'static str,
}

impl fmt::Display for ScanFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U{:04x} {:<28} {}  {} ({})", self.addr, self.uop, self.class, self.evidence, self.remediation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    Loc(Loc),
    Creg(String),
    Uram(String),
    Mem(String),
}

/// Symbolic architectural writes along a walk, as expression strings over
/// the values live at its start.
fn symbolic_writes(p: &Microprogram, w: &Walk) -> BTreeMap<Key, String> {
    let mut env: BTreeMap<Key, String> = BTreeMap::new();
    for s in &w.steps {
        let u = p.uop(s.addr).expect("walk visits real uops");
        let expr = |env: &BTreeMap<Key, String>, o: &Operand| match Loc::of(o) {
            Some(l) => env.get(&Key::Loc(l)).cloned().unwrap_or_else(|| l.to_string()),
            None => o.to_string(),
        };
        let args: Vec<String> = u.srcs.iter().map(|o| expr(&env, o)).collect();
        let value = if u.op == Opcode::Move {
            args.first().cloned().unwrap_or_default()
        } else {
            format!("{}({})", u.mnemonic(), args.join(", "))
        };
        let last = args.last().cloned().unwrap_or_default();
        match u.op {
            Opcode::WrCreg64 | Opcode::BtsWrCreg64 | Opcode::BtrWrCreg64 => {
                env.insert(Key::Creg(last), value);
            }
            Opcode::GenArithFlags => {
                env.insert(Key::Creg(Sym::Rflags.name().to_string()), value);
            }
            Opcode::WriteUram64 => {
                env.insert(Key::Uram(last), value);
            }
            op if op.is_store() => {
                env.insert(Key::Mem(args[1..].join(", ")), value);
            }
            _ => {
                for l in writes(u) {
                    env.insert(Key::Loc(l), value.clone());
                }
            }
        }
    }
    env.retain(|k, _| !matches!(k, Key::Loc(l) if !l.is_architectural()));
    env
}

/// Classifies every conditional branch of `p`.
///
/// * MEB: the taken path raises an event.
/// * MIL: the predicted path loops back to the branch through a memory load,
///   so a mispredicted exit keeps loading past the architectural end.
/// * MVI: both paths reach the end of the program and commit different
///   architectural values.
pub fn scan(p: &Microprogram, scenario: Option<&Scenario>) -> Vec<ScanFinding> {
    let secrets = Secrets(scenario);
    let states = states_from_entry(p, &secrets);
    let mut out = Vec::new();
    for (addr, u) in p.uops() {
        if !u.is_cond_branch() {
            continue;
        }
        let Some(t) = target_of(u) else { continue };
        let taken = walk(p, None, resolve(p, t), &BTreeSet::new(), &[]);
        let predicted = walk(p, Some(addr), fall_through(p, addr), &[addr].into(), &[]);
        let finding = |class, evidence: String, remediation| ScanFinding {
            addr,
            uop: p.render_uop(u),
            class,
            evidence,
            remediation,
        };
        if taken.end == WalkEnd::Fault {
            let ev = taken.steps.last().map(|s| p.render_uop(p.uop(s.addr).expect("step"))).unwrap_or_default();
            let mut evidence = format!("taken path raises {ev}; predicted path runs on");
            if let Some(st) = states.get(&addr) {
                let live: Vec<String> = st.secret.iter().map(Loc::to_string).collect();
                if !live.is_empty() {
                    evidence.push_str(&format!(" with secret {}", live.join(", ")));
                }
            }
            out.push(finding(VulnClass::Meb, evidence, "harden"));
            continue;
        }
        if predicted.end == WalkEnd::Revisit(addr) {
            let load = predicted.steps.iter().find(|s| p.uop(s.addr).is_some_and(|x| x.op.is_load()));
            if let Some(l) = load {
                let evidence = format!(
                    "predicted path loops back through {}",
                    p.render_uop(p.uop(l.addr).expect("step"))
                );
                out.push(finding(VulnClass::Mil, evidence, "avoid instruction"));
                continue;
            }
        }
        if taken.end == WalkEnd::Uend && predicted.end == WalkEnd::Uend {
            let a = symbolic_writes(p, &taken);
            let b = symbolic_writes(p, &predicted);
            if a != b {
                let differ: BTreeSet<&Key> = a.keys().chain(b.keys()).filter(|k| a.get(k) != b.get(k)).collect();
                let names: Vec<String> = differ
                    .into_iter()
                    .map(|k| match k {
                        Key::Loc(l) => l.to_string(),
                        Key::Creg(x) => format!("creg[{x}]"),
                        Key::Uram(x) => format!("uram[{x}]"),
                        Key::Mem(x) => format!("mem[{x}]"),
                    })
                    .collect();
                let evidence = format!("paths commit different values to {}", names.join(", "));
                out.push(finding(VulnClass::Mvi, evidence, "harden"));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Hardening

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Selection {
    /// Guard secret-carrying registers and architectural outputs.
    #[default]
    TaintGuided,
    /// Guard exactly these locations after the branch at each address.
    Explicit(BTreeMap<UAddr, Vec<Loc>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardenPolicy {
    pub selection: Selection,
    /// Leave branches inside loop bodies alone.
    pub skip_loops: bool,
}

impl Default for HardenPolicy {
    fn default() -> Self {
        HardenPolicy { selection: Selection::TaintGuided, skip_loops: true }
    }
}

impl HardenPolicy {
    pub fn explicit(sites: impl IntoIterator<Item = (UAddr, Vec<Loc>)>) -> HardenPolicy {
        HardenPolicy { selection: Selection::Explicit(sites.into_iter().collect()), skip_loops: true }
    }
}

#[derive(Debug, Error)]
pub enum HardenError {
    #[error("no conditional branch at U{0:04x}")]
    NotABranch(UAddr),
    #[error("{loc} is not live after the branch at U{branch:04x}")]
    NotLive { branch: UAddr, loc: Loc },
    #[error("no free temporary to hold the condition of the branch at U{0:04x}")]
    NoFreeTemp(UAddr),
    #[error("hardening moves the branch `{uop}` to a different prediction category")]
    PredictionChanged { uop: String },
    #[error(transparent)]
    Asm(#[from] AsmError),
}

#[derive(Clone, Debug)]
struct Insert {
    after: UAddr,
    /// Copies go before selects at the same point.
    kind: u8,
    seq: usize,
    uop: MicroOp,
}

struct Ctx<'a> {
    p: &'a Microprogram,
    inserts: Vec<Insert>,
    free: Vec<Reg>,
}

impl Ctx<'_> {
    fn push(&mut self, after: UAddr, kind: u8, uop: MicroOp) {
        let seq = self.inserts.len();
        self.inserts.push(Insert { after, kind, seq, uop });
    }
}

fn select(cc: CondCode, cond: Reg, l: Loc) -> MicroOp {
    MicroOp { cond: Some(cc), ..MicroOp::new(Opcode::Select, Some(l.operand()), vec![Operand::Reg(cond), l.operand()]) }
}

/// Last branch of the run of conditional branches that falls through from
/// `addr` without crossing a label.
fn run_end(p: &Microprogram, addr: UAddr) -> UAddr {
    let mut e = addr;
    while let Some(n) = fall_through(p, e) {
        let next_is_branch = p.uop(n).is_some_and(MicroOp::is_cond_branch);
        if n <= e || !next_is_branch || p.label_at(n).is_some() || p.seqw_at(e) != SeqDirective::None && n / 3 != e / 3
        {
            break;
        }
        e = n;
    }
    e
}

fn harden_branch(
    cx: &mut Ctx,
    addr: UAddr,
    policy: &HardenPolicy,
    secrets: &Secrets,
    entry: Option<&AbsState>,
    all_loops: &[LoopRange],
) -> Result<(), HardenError> {
    let p = cx.p;
    let u = p.uop(addr).expect("branch address holds a uop");
    let (Some(cc), Some(c)) = (u.cond, u.cond_reg()) else { return Ok(()) };
    let inv = invert_cond(cc);
    let listed: Option<&Vec<Loc>> = match &policy.selection {
        Selection::TaintGuided => None,
        Selection::Explicit(m) => match m.get(&addr) {
            Some(v) => Some(v),
            None => return Ok(()),
        },
    };

    let end = run_end(p, addr);
    let mut run = vec![addr];
    let mut a = addr;
    while a != end {
        a = fall_through(p, a).expect("run continues");
        run.push(a);
    }
    let foreign: Vec<LoopRange> = all_loops.iter().filter(|l| !l.contains(addr)).copied().collect();
    let w = walk(p, Some(end), fall_through(p, end), &run.iter().copied().collect(), &foreign);

    let cond_loc = Loc::Reg(c);
    let mut aliases: BTreeSet<Reg> = BTreeSet::new();
    if !run[1..].iter().any(|b| writes(p.uop(*b).expect("run")).contains(&cond_loc)) {
        aliases.insert(c);
    }
    let mut copy: Option<Reg> = None;
    let cond_for = |cx: &mut Ctx, aliases: &BTreeSet<Reg>, copy: &mut Option<Reg>| -> Result<Reg, HardenError> {
        if aliases.contains(&c) {
            return Ok(c);
        }
        if let Some(r) = aliases.iter().next().copied().or(*copy) {
            return Ok(r);
        }
        let r = cx.free.pop().ok_or(HardenError::NoFreeTemp(addr))?;
        cx.push(addr, 0, MicroOp::new(Opcode::Move, Some(Operand::Reg(r)), vec![Operand::Reg(c)]));
        *copy = Some(r);
        Ok(r)
    };

    let first_def: BTreeMap<Loc, &Step> = w.steps.iter().rev().flat_map(|s| {
        writes(p.uop(s.addr).expect("step")).into_iter().map(move |l| (l, s))
    }).collect();
    // Guard at the branch when the location is read before the path
    // redefines it in this iteration.
    let at_branch_if_read = |l: Loc| first_def.get(&l).is_none_or(|s| s.after_back_edge);

    // An existing select right after step `i` (past other selects and
    // condition copies) already guards `l`.
    let guarded_from = |i: usize, l: Loc, aliases: &BTreeSet<Reg>, copy: Option<Reg>| {
        let mut ok: BTreeSet<Reg> = aliases.clone();
        ok.extend(copy);
        for s in &w.steps[i..] {
            let x = p.uop(s.addr).expect("step");
            match x.op {
                Opcode::Select => {
                    let cond = x.srcs.first().and_then(Operand::reg);
                    if x.cond == Some(inv)
                        && cond.is_some_and(|r| ok.contains(&r))
                        && x.dst.as_ref().and_then(Loc::of) == Some(l)
                        && x.srcs.get(1) == x.dst.as_ref()
                    {
                        return true;
                    }
                }
                Opcode::Move if x.dst_reg().is_some_and(|d| d.file == RegFile::Scratch) => {}
                _ => return false,
            }
        }
        false
    };

    let mut st = entry.cloned().unwrap_or_else(|| AbsState { secret: secrets.initial(), ..AbsState::default() });
    let mut touched: BTreeSet<Loc> = BTreeSet::new();
    let mut handled: BTreeSet<Loc> = BTreeSet::new();
    for (i, s) in w.steps.iter().enumerate() {
        let x = p.uop(s.addr).expect("step");
        if x.op == Opcode::Select
            && x.cond == Some(inv)
            && x.srcs.first().and_then(Operand::reg).is_some_and(|r| aliases.contains(&r) || Some(r) == copy)
            && x.dst.as_ref().is_some_and(|d| x.srcs.get(1) == Some(d))
        {
            let l = Loc::of(x.dst.as_ref().expect("dst")).expect("select dst");
            st.guard(l);
            touched.insert(l);
            handled.insert(l);
            continue;
        }
        for r in reads(x) {
            if !touched.insert(r) {
                continue;
            }
            let want = match listed {
                Some(v) => v.contains(&r) && at_branch_if_read(r),
                None => {
                    st.is_secret(r)
                        || (r.is_architectural() && !st.is_zero(r) && first_def.get(&r).is_some_and(|d| d.after_back_edge))
                }
            };
            if want && guarded_from(0, r, &aliases, copy) {
                st.guard(r);
                handled.insert(r);
            } else if want {
                let cr = cond_for(cx, &aliases, &mut copy)?;
                cx.push(end, 1, select(inv, cr, r));
                st.guard(r);
                handled.insert(r);
            }
        }
        st.step(x, secrets);
        if x.op == Opcode::Move {
            if let (Some(Loc::Reg(d)), Some(Operand::Reg(src))) = (x.dst.as_ref().and_then(Loc::of), x.srcs.first()) {
                if aliases.contains(src) && d.file == RegFile::Scratch {
                    aliases.insert(d);
                    continue;
                }
            }
        }
        for wl in writes(x) {
            if let Loc::Reg(r) = wl {
                aliases.remove(&r);
            }
            touched.insert(wl);
            let first = first_def.get(&wl).is_some_and(|d| d.addr == s.addr);
            let want = match listed {
                Some(v) => v.contains(&wl) && !handled.contains(&wl) && !s.after_back_edge,
                None => {
                    st.is_secret(wl)
                        || (wl.is_architectural()
                            && first
                            && !handled.contains(&wl)
                            && !s.after_back_edge
                            && !st.is_zero(wl))
                }
            };
            if want && guarded_from(i + 1, wl, &aliases, copy) {
                handled.insert(wl);
            } else if want {
                let cr = cond_for(cx, &aliases, &mut copy)?;
                cx.push(s.addr, 1, select(inv, cr, wl));
                st.guard(wl);
                handled.insert(wl);
            }
        }
    }
    if let Some(v) = listed {
        if let Some(l) = v.iter().find(|l| !handled.contains(l)) {
            return Err(HardenError::NotLive { branch: addr, loc: *l });
        }
    }
    Ok(())
}

fn used_regs(p: &Microprogram) -> BTreeSet<Reg> {
    let mut s = BTreeSet::new();
    for (_, u) in p.uops() {
        s.extend(u.read_regs());
        s.extend(u.written_regs());
    }
    s
}

fn to_stmt(u: &MicroOp) -> UopStmt {
    UopStmt { op: u.op, cond: u.cond, dst: u.dst.clone(), srcs: u.srcs.clone(), target: None }
}

fn category(u: &MicroOp, a: UAddr) -> Option<crate::pipeline::Prediction> {
    predict(u, triad_position(a), &PredictionPolicy::default())
}

/// Inserts inverted-condition selects after conditional branches.
///
/// A guarded location gets its select right after its first definition on
/// the fall-through path, or right after the branch (past any directly
/// following branches) when the path reads it first. If the condition
/// register is overwritten before the select, it is copied into the highest
/// unused temporary right after the branch. Selects already present are
/// recognized, so hardening twice adds nothing.
pub fn harden(p: &Microprogram, policy: &HardenPolicy, scenario: Option<&Scenario>) -> Result<Microprogram, HardenError> {
    p.validate().map_err(AsmError::from)?;
    if let Selection::Explicit(m) = &policy.selection {
        if let Some(a) = m.keys().find(|a| !p.uop(**a).is_some_and(MicroOp::is_cond_branch)) {
            return Err(HardenError::NotABranch(*a));
        }
    }
    let secrets = Secrets(scenario);
    let states = states_from_entry(p, &secrets);
    let all_loops = loops(p);
    let used = used_regs(p);
    let free: Vec<Reg> = (0..16).map(Reg::tmp).filter(|r| !used.contains(r)).collect();
    let mut cx = Ctx { p, inserts: Vec::new(), free };
    let branches: Vec<UAddr> = p.uops().filter(|(_, u)| u.is_cond_branch()).map(|(a, _)| a).collect();
    for addr in branches {
        if policy.skip_loops && all_loops.iter().any(|l| l.contains(addr)) {
            continue;
        }
        harden_branch(&mut cx, addr, policy, &secrets, states.get(&addr), &all_loops)?;
    }
    if cx.inserts.is_empty() {
        return Ok(p.clone());
    }
    let mut inserts = cx.inserts;
    inserts.sort_by_key(|i| (i.after, i.kind, i.seq));

    let src = disassemble(p);
    let addrs: Vec<UAddr> = p.uops().map(|(a, _)| a).collect();
    let mut k = 0;
    let mut lines = Vec::with_capacity(src.lines.len() + inserts.len());
    let mut origin: Vec<Option<usize>> = Vec::new();
    for (line, stmt) in src.lines {
        let is_uop = matches!(stmt, Stmt::Uop(_));
        lines.push((line, stmt));
        if is_uop {
            origin.push(Some(k));
            for i in inserts.iter().filter(|i| i.after == addrs[k]) {
                lines.push((line, Stmt::Uop(to_stmt(&i.uop))));
                origin.push(None);
            }
            k += 1;
        }
    }
    let out = assemble(&crate::uasm::SourceUnit { name: src.name, lines })?;

    let old: Vec<(UAddr, &MicroOp)> = p.uops().collect();
    for ((na, nu), o) in out.uops().zip(&origin) {
        if let Some(k) = o {
            let (oa, ou) = old[*k];
            if ou.branch_kind().is_some() && !ou.is_cond_branch() && category(ou, oa) != category(nu, na) {
                return Err(HardenError::PredictionChanged { uop: p.render_uop(ou) });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Overhead

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopOverhead {
    pub header: String,
    pub before: usize,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Overhead {
    pub before: usize,
    pub after: usize,
    pub loops: Vec<LoopOverhead>,
}

impl Overhead {
    pub fn delta(&self) -> i64 {
        self.after as i64 - self.before as i64
    }
}

/// Loop bodies closed by a backward `SEQW GOTO`, keyed by header label.
fn loop_bodies(p: &Microprogram) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (i, t) in p.triads.iter().enumerate() {
        let end = i as UAddr * 3 + 2;
        if let SeqDirective::Goto(x) = t.seqw {
            if x <= end {
                let n = p.uops().filter(|(a, _)| (x..=end).contains(a)).count();
                out.insert(p.label_or_addr(x), n);
            }
        }
    }
    out
}

/// Static uop counts of `p` and its hardened form `q`.
pub fn overhead(p: &Microprogram, q: &Microprogram) -> Overhead {
    let before = loop_bodies(p);
    let after = loop_bodies(q);
    let loops = before
        .iter()
        .map(|(h, n)| LoopOverhead { header: h.clone(), before: *n, after: after.get(h).copied().unwrap_or(0) })
        .collect();
    Overhead { before: p.uop_count(), after: q.uop_count(), loops }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_fixture;
    use crate::uasm::assemble_text;

    fn branch_addrs(p: &Microprogram) -> Vec<UAddr> {
        p.uops().filter(|(_, u)| u.is_cond_branch()).map(|(a, _)| a).collect()
    }

    fn selects(p: &Microprogram) -> Vec<String> {
        p.uops().filter(|(_, u)| u.op == Opcode::Select).map(|(_, u)| p.render_uop(u)).collect()
    }

    #[test]
    fn rdfsbase_gets_one_select_after_the_read() {
        let fx = load_fixture("rdfsbase").unwrap();
        let h = harden(&fx.program, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        assert_eq!(selects(&h), ["tmp2 = SELECTC(tmp0, tmp2)"]);
        let order: Vec<Opcode> = h.uops().map(|(_, u)| u.op).collect();
        let rd = order.iter().position(|o| *o == Opcode::RdSeg).unwrap();
        assert_eq!(order[rd + 1], Opcode::Select);
    }

    #[test]
    fn rdpmc_explicit_matches_vendor_patch() {
        let fx = load_fixture("rdpmc").unwrap();
        let b = branch_addrs(&fx.program);
        let tmp7 = Loc::parse("tmp7").unwrap();
        let pol = HardenPolicy::explicit([(b[1], vec![tmp7]), (b[2], vec![tmp7])]);
        let h = harden(&fx.program, &pol, None).unwrap();
        assert_eq!(selects(&h), ["tmp7 = SELECTZ(tmp1, tmp7)", "tmp7 = SELECTNZ(tmp3, tmp7)"]);
        assert_eq!(overhead(&fx.program, &h).delta(), 2);
        let patched = load_fixture("rdpmc_patched").unwrap().program;
        let ops = |p: &Microprogram| p.uops().map(|(_, u)| p.render_uop(u)).collect::<Vec<_>>();
        assert_eq!(ops(&h), ops(&patched));
        assert_eq!(overhead(&h, &harden(&h, &pol, None).unwrap()).delta(), 0);
    }

    #[test]
    fn rdpmc_taint_guided_also_guards_the_enable_check() {
        let fx = load_fixture("rdpmc").unwrap();
        let h = harden(&fx.program, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        assert_eq!(
            selects(&h),
            ["tmp7 = SELECTNZ(tmp2, tmp7)", "tmp7 = SELECTZ(tmp1, tmp7)", "tmp7 = SELECTNZ(tmp3, tmp7)"]
        );
        let again = harden(&h, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        assert_eq!(again, h);
    }

    #[test]
    fn div_explicit_guards_outputs_after_their_definitions() {
        let fx = load_fixture("div").unwrap();
        let b = branch_addrs(&fx.program)[0];
        let locs = vec![Loc::parse("rax").unwrap(), Loc::parse("rdx").unwrap()];
        let h = harden(&fx.program, &HardenPolicy::explicit([(b, locs)]), None).unwrap();
        let text: Vec<String> = h.uops().map(|(_, u)| h.render_uop(u)).collect();
        let q = text.iter().position(|t| t == "rax = UDIV64(rax, r64)").unwrap();
        assert_eq!(text[q + 1], "rax = SELECTZ(tmp0, rax)");
        assert_eq!(text[q + 3], "rdx = SELECTZ(tmp0, rdx)");
        let tg = harden(&fx.program, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        assert_eq!(selects(&tg), selects(&h));
    }

    #[test]
    fn xgetbv_copies_an_overwritten_condition() {
        let fx = load_fixture("xgetbv").unwrap();
        let h = harden(&fx.program, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        let s = selects(&h);
        assert!(h.uops().any(|(_, u)| h.render_uop(u) == "tmp15 = tmp0"));
        assert!(s.contains(&"tmp0 = SELECTC(tmp15, tmp0)".to_string()), "{s:?}");
        assert!(s.contains(&"rax = SELECTC(tmp15, rax)".to_string()), "{s:?}");
        assert_eq!(harden(&h, &HardenPolicy::default(), Some(&fx.scenario)).unwrap(), h);
    }

    #[test]
    fn scasb_loop_body_grows_by_two_without_skipping() {
        let fx = load_fixture("scasb").unwrap();
        let pol = HardenPolicy { skip_loops: false, ..HardenPolicy::default() };
        let h = harden(&fx.program, &pol, Some(&fx.scenario)).unwrap();
        let o = overhead(&fx.program, &h);
        assert_eq!(o.loops, [LoopOverhead { header: ".loop".into(), before: 6, after: 8 }]);
        assert_eq!(selects(&h), ["rdi = SELECTNZ(tmp10, rdi)", "rdi = SELECTNZ(tmp4, rdi)"]);
        let skipped = harden(&fx.program, &HardenPolicy::default(), Some(&fx.scenario)).unwrap();
        assert_eq!(overhead(&fx.program, &skipped).loops[0].after, 6);
    }

    #[test]
    fn explicit_policy_errors() {
        let fx = load_fixture("rdpmc").unwrap();
        let pol = HardenPolicy::explicit([(0, vec![Loc::parse("tmp7").unwrap()])]);
        assert!(matches!(harden(&fx.program, &pol, None), Err(HardenError::NotABranch(0))));
        let b = branch_addrs(&fx.program)[2];
        let pol = HardenPolicy::explicit([(b, vec![Loc::parse("r9").unwrap()])]);
        assert!(matches!(harden(&fx.program, &pol, None), Err(HardenError::NotLive { .. })));
    }

    #[test]
    fn scanner_matches_fixture_labels() {
        for name in crate::corpus::fixture_names() {
            let fx = load_fixture(name).unwrap();
            let got: Vec<VulnClass> = scan(&fx.program, Some(&fx.scenario)).iter().map(|f| f.class).collect();
            assert_eq!(got, fx.findings, "{name}");
        }
    }

    #[test]
    fn scasb_findings_are_the_loop_exits() {
        let fx = load_fixture("scasb").unwrap();
        let f = scan(&fx.program, None);
        assert!(f.iter().all(|x| x.uop.ends_with(".done)") && x.remediation == "avoid instruction"));
    }

    #[test]
    fn benign_branch_has_no_finding() {
        let p = assemble_text("t", "t:\n tmp0 = OR64(rax)\n UJMPZ(tmp0, .b)\n rbx = tmp0\n SEQW UEND0\n.b:\n rbx = tmp0\n SEQW UEND0\n").unwrap();
        assert!(scan(&p, None).is_empty());
    }

    #[test]
    fn padding_shift_that_changes_prediction_is_rejected() {
        // The unconditional jump sits last in its triad (predicted taken);
        // one inserted select pushes it to a first slot.
        let src = "t:\n tmp1 = RDCREG64(tmp2)\n UJMPZ(tmp0, .x)\n UJMP(.y)\n.x:\n SIGEVENT(1)\n SEQW UEND0\n.y:\n rax = tmp1\n SEQW UEND0\n";
        let p = assemble_text("t", src).unwrap();
        let e = harden(&p, &HardenPolicy::default(), None).unwrap_err();
        assert!(matches!(e, HardenError::PredictionChanged { .. }), "{e}");
    }
}
