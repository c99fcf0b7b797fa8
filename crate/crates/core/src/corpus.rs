//! Fixture library, macro-op text front end and attack drivers.
//!
//! Fixtures live in `corpus/` as a micro-assembly file plus a scenario file.
//! Both are embedded at build time; setting `UBRANCH_CORPUS` to a directory
//! makes [`load_fixture`] read from there instead.
//!
//! Fixture metadata sits in `//@ key: value` lines of the `.uasm` file:
//! `mnemonic`, `operands` (kinds `r64`, `r32`, `m32`, `m64`, `bnd.ub`),
//! `invoke` (a default macro-op line), `class` and `findings`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::channel::{probe_recover, taint_oracle, LeakReport, ProbeError};
use crate::machine::{MemInit, Scenario, ScenarioError};
use crate::pipeline::{run, Config, MacroBody, MacroOp, MacroProgram, PipelineTrace, RunError};
use crate::uasm::{assemble_text, AsmError};
use crate::uisa::{Microprogram, MicroOp, Opcode, Operand, Param, Reg, Width};
use crate::uslh::{harden, HardenError, HardenPolicy};

/// Directory whose `<name>.uasm`/`<name>.scn` files shadow the embedded fixtures.
pub const CORPUS_ENV: &str = "UBRANCH_CORPUS";

macro_rules! embed {
    ($($name:literal),* $(,)?) => {
        &[$(($name,
            include_str!(concat!("../corpus/", $name, ".uasm")),
            include_str!(concat!("../corpus/", $name, ".scn")))),*]
    };
}

const EMBEDDED: &[(&str, &str, &str)] = embed!(
    "cld",
    "std",
    "rdfsbase",
    "rdgsbase",
    "xgetbv",
    "rdpmc",
    "rdpmc_patched",
    "bound",
    "bndcn",
    "div",
    "scasb",
    "into",
);

/// Every fixture name, in a stable order.
pub fn fixture_names() -> Vec<&'static str> {
    EMBEDDED.iter().map(|(n, _, _)| *n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VulnClass {
    Meb,
    Mvi,
    Mil,
}

impl VulnClass {
    pub fn name(self) -> &'static str {
        match self {
            VulnClass::Meb => "MEB",
            VulnClass::Mvi => "MVI",
            VulnClass::Mil => "MIL",
        }
    }

    pub fn parse(s: &str) -> Option<VulnClass> {
        match s.to_ascii_uppercase().as_str() {
            "MEB" => Some(VulnClass::Meb),
            "MVI" => Some(VulnClass::Mvi),
            "MIL" => Some(VulnClass::Mil),
            _ => None,
        }
    }
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth label of a whole fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureClass {
    Vulnerable(VulnClass),
    /// Leaks only through a fault delivered late at retirement.
    MeltdownContrast,
    Benign,
}

impl FixtureClass {
    fn parse(s: &str) -> Option<FixtureClass> {
        match s.trim().to_ascii_lowercase().as_str() {
            "meltdown" => Some(FixtureClass::MeltdownContrast),
            "benign" => Some(FixtureClass::Benign),
            other => VulnClass::parse(other).map(FixtureClass::Vulnerable),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FixtureClass::Vulnerable(v) => v.name(),
            FixtureClass::MeltdownContrast => "meltdown-contrast",
            FixtureClass::Benign => "benign",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandKind {
    R64,
    R32,
    M32,
    M64,
    BndUb,
}

impl OperandKind {
    fn parse(s: &str) -> Option<OperandKind> {
        match s.trim() {
            "r64" => Some(OperandKind::R64),
            "r32" => Some(OperandKind::R32),
            "m32" => Some(OperandKind::M32),
            "m64" => Some(OperandKind::M64),
            "bnd.ub" => Some(OperandKind::BndUb),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: String,
    pub source: String,
    pub program: Microprogram,
    pub mnemonic: String,
    pub operands: Vec<OperandKind>,
    pub invoke: String,
    pub class: FixtureClass,
    pub findings: Vec<VulnClass>,
    pub scenario_text: String,
    pub scenario: Scenario,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),
    #[error("reading {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("fixture `{name}`: {err}")]
    Asm { name: String, err: AsmError },
    #[error("fixture `{name}`: {err}")]
    Scenario { name: String, err: ScenarioError },
    #[error("fixture `{name}`: bad metadata: {msg}")]
    Meta { name: String, msg: String },
}

fn read_sources(name: &str) -> Result<(String, String), CorpusError> {
    if let Some(dir) = std::env::var_os(CORPUS_ENV) {
        let dir = PathBuf::from(dir);
        let read = |ext: &str| {
            let path = dir.join(format!("{name}.{ext}"));
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(err) => Err(CorpusError::Io { path, err }),
            }
        };
        if let Some(src) = read("uasm")? {
            return Ok((src, read("scn")?.unwrap_or_default()));
        }
    }
    EMBEDDED
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, u, s)| (u.to_string(), s.to_string()))
        .ok_or_else(|| CorpusError::UnknownFixture(name.to_string()))
}

/// Loads, assembles and validates one fixture.
pub fn load_fixture(name: &str) -> Result<Fixture, CorpusError> {
    let (source, scenario_text) = read_sources(name)?;
    parse_fixture(name, &source, &scenario_text)
}

pub fn load_all() -> Result<Vec<Fixture>, CorpusError> {
    fixture_names().into_iter().map(load_fixture).collect()
}

/// Builds a fixture from its two source texts.
pub fn parse_fixture(name: &str, source: &str, scenario_text: &str) -> Result<Fixture, CorpusError> {
    let meta_err = |msg: String| CorpusError::Meta { name: name.to_string(), msg };
    let mut meta = BTreeMap::new();
    for line in source.lines() {
        if let Some(rest) = line.trim().strip_prefix("//@") {
            let (k, v) = rest.split_once(':').ok_or_else(|| meta_err(format!("`{}`", line.trim())))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| meta.get(k).cloned().unwrap_or_default();
    let program = assemble_text(name, source).map_err(|err| CorpusError::Asm { name: name.to_string(), err })?;
    let scenario =
        Scenario::parse(scenario_text).map_err(|err| CorpusError::Scenario { name: name.to_string(), err })?;
    let operands = get("operands")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| OperandKind::parse(s).ok_or_else(|| meta_err(format!("operand kind `{}`", s.trim()))))
        .collect::<Result<Vec<_>, _>>()?;
    let findings = get("findings")
        .split_whitespace()
        .map(|s| VulnClass::parse(s).ok_or_else(|| meta_err(format!("finding class `{s}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let class = FixtureClass::parse(&get("class")).ok_or_else(|| meta_err("missing or bad class".into()))?;
    let mnemonic = get("mnemonic");
    if mnemonic.is_empty() {
        return Err(meta_err("missing mnemonic".into()));
    }
    let invoke = match get("invoke") {
        s if s.is_empty() => mnemonic.clone(),
        s => s,
    };
    Ok(Fixture {
        name: name.to_string(),
        source: source.to_string(),
        program,
        mnemonic,
        operands,
        invoke,
        class,
        findings,
        scenario_text: scenario_text.to_string(),
        scenario,
    })
}

// ---------------------------------------------------------------------------
// Macro-op text

#[derive(Debug, Error, PartialEq, Eq)]
#[error("macro line {line}: {msg}")]
pub struct MacroParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug)]
struct MsromEntry {
    program: Microprogram,
    operands: Vec<OperandKind>,
}

/// Mnemonic table for macro-op text: a handful of simple instructions decoded
/// directly, plus every microcoded fixture.
#[derive(Clone, Debug, Default)]
pub struct Isa {
    msrom: BTreeMap<String, MsromEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct MemRef {
    base: Option<Reg>,
    idx: Option<(Reg, u64)>,
    disp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum MacroArg {
    Reg(Reg),
    Imm(u64),
    Mem(MemRef),
}

fn parse_num(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn parse_mem(s: &str) -> Option<MemRef> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut m = MemRef { base: None, idx: None, disp: 0 };
    for term in inner.split('+').map(str::trim) {
        if let Some((r, sc)) = term.split_once('*') {
            if m.idx.is_some() {
                return None;
            }
            m.idx = Some((Reg::parse(r.trim())?, parse_num(sc)?));
        } else if let Some(r) = Reg::parse(term) {
            match (m.base, m.idx) {
                (None, _) => m.base = Some(r),
                (Some(_), None) => m.idx = Some((r, 1)),
                _ => return None,
            }
        } else {
            m.disp = m.disp.wrapping_add(parse_num(term)?);
        }
    }
    Some(m)
}

fn parse_arg(s: &str) -> Option<MacroArg> {
    let mut s = s.trim();
    for prefix in ["byte ", "dword ", "qword ", "ptr "] {
        if s.len() > prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = s[prefix.len()..].trim_start();
        }
    }
    if s.starts_with('[') {
        return parse_mem(s).map(MacroArg::Mem);
    }
    if let Some(r) = Reg::parse(s) {
        return Some(MacroArg::Reg(r));
    }
    parse_num(s).map(MacroArg::Imm)
}

impl MemRef {
    fn address_operands(&self) -> Vec<Operand> {
        let base = self.base.map(Operand::Reg).unwrap_or(Operand::Imm(0));
        match (self.idx, self.base) {
            (Some((i, sc)), _) => vec![base, Operand::Reg(i), Operand::Imm(sc), Operand::Imm(self.disp)],
            (None, Some(_)) if self.disp == 0 => vec![base],
            (None, Some(_)) => vec![base, Operand::Imm(self.disp)],
            (None, None) => vec![Operand::Imm(self.disp)],
        }
    }

    fn bind(&self, b: &mut BTreeMap<Param, Operand>, params: [Param; 4]) {
        let [pb, pi, ps, pd] = params;
        b.insert(pb, self.base.map(Operand::Reg).unwrap_or(Operand::Imm(0)));
        b.insert(pi, self.idx.map(|(r, _)| Operand::Reg(r)).unwrap_or(Operand::Imm(0)));
        b.insert(ps, Operand::Imm(self.idx.map(|(_, s)| s).unwrap_or(1)));
        b.insert(pd, Operand::Imm(self.disp));
    }
}

fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur);
    }
    out.into_iter().map(|a| a.trim().to_string()).collect()
}

impl Isa {
    /// All corpus microprograms by mnemonic. Where two fixtures share a
    /// mnemonic the unpatched one wins.
    pub fn from_corpus() -> Result<Isa, CorpusError> {
        let mut isa = Isa::default();
        for fx in load_all()? {
            if fx.name.ends_with("_patched") {
                continue;
            }
            isa.insert(&fx.mnemonic, fx.program, fx.operands);
        }
        Ok(isa)
    }

    pub fn insert(&mut self, mnemonic: &str, program: Microprogram, operands: Vec<OperandKind>) {
        self.msrom.insert(mnemonic.to_ascii_lowercase(), MsromEntry { program, operands });
    }

    /// Swaps the microprogram behind a mnemonic, keeping its operand kinds.
    pub fn replace(&mut self, mnemonic: &str, program: Microprogram) -> bool {
        match self.msrom.get_mut(&mnemonic.to_ascii_lowercase()) {
            Some(e) => {
                e.program = program;
                true
            }
            None => false,
        }
    }

    pub fn mnemonics(&self) -> impl Iterator<Item = &str> {
        self.msrom.keys().map(String::as_str)
    }

    /// Parses `;`- or newline-separated macro-ops.
    pub fn assemble(&self, text: &str) -> Result<MacroProgram, MacroParseError> {
        let mut mp = MacroProgram::default();
        for (i, raw) in text.lines().enumerate() {
            let code = raw.split("//").next().unwrap_or("");
            for stmt in code.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let op = self.parse_macro(stmt, i + 1, &mut mp)?;
                mp.ops.push(op);
            }
        }
        Ok(mp)
    }

    fn parse_macro(&self, stmt: &str, line: usize, mp: &mut MacroProgram) -> Result<MacroOp, MacroParseError> {
        let err = |msg: String| MacroParseError { line, msg };
        let mut words = stmt.splitn(2, char::is_whitespace);
        let mut mnem = words.next().unwrap_or("").to_ascii_lowercase();
        let mut rest = words.next().unwrap_or("").trim().to_string();
        if matches!(mnem.as_str(), "rep" | "repe" | "repne") {
            let mut w = rest.splitn(2, char::is_whitespace);
            mnem = format!("{mnem} {}", w.next().unwrap_or("").to_ascii_lowercase());
            rest = w.next().unwrap_or("").trim().to_string();
        }
        let args = split_args(&rest)
            .iter()
            .map(|a| parse_arg(a).ok_or_else(|| err(format!("bad operand `{a}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let text = if rest.is_empty() { mnem.clone() } else { format!("{mnem} {rest}") };

        if let Some(e) = self.msrom.get(&mnem) {
            if args.len() != e.operands.len() {
                return Err(err(format!("`{mnem}` takes {} operands", e.operands.len())));
            }
            let mut b = BTreeMap::new();
            for (kind, arg) in e.operands.iter().zip(&args) {
                match (kind, arg) {
                    (OperandKind::R64, MacroArg::Reg(r)) => {
                        b.insert(Param::R64, Operand::Reg(*r));
                    }
                    (OperandKind::R32, MacroArg::Reg(r)) => {
                        b.insert(Param::R32, Operand::Reg(*r));
                    }
                    (OperandKind::BndUb, MacroArg::Reg(r)) => {
                        b.insert(Param::BndUb, Operand::Reg(*r));
                    }
                    (OperandKind::M32, MacroArg::Mem(m)) => {
                        m.bind(&mut b, [Param::M32Base, Param::M32Idx, Param::M32Scale, Param::M32Disp])
                    }
                    (OperandKind::M64, MacroArg::Mem(m)) => {
                        m.bind(&mut b, [Param::M64Base, Param::M64Idx, Param::M64Scale, Param::M64Disp])
                    }
                    (k, _) => return Err(err(format!("operand kind mismatch for `{mnem}`: expected {k:?}"))),
                }
            }
            let program = mp.add_program(e.program.clone());
            return Ok(MacroOp { text, body: MacroBody::Msrom { program, bindings: b } });
        }

        let uops = mite_uops(&mnem, &args).map_err(err)?;
        MacroOp::mite(&text, uops).map_err(|e| MacroParseError { line, msg: e.to_string() })
    }
}

fn mite_uops(mnem: &str, args: &[MacroArg]) -> Result<Vec<MicroOp>, String> {
    use MacroArg::*;
    let reg = |r: &crate::uisa::Reg| Operand::Reg(*r);
    let w64 = |r: &crate::uisa::Reg, a: Opcode, b: Opcode| match r.width {
        Width::W64 => Ok(a),
        Width::W32 => Ok(b),
        _ => Err(format!("`{mnem}` needs a 32- or 64-bit register")),
    };
    let one = |op: Opcode, dst: Option<Operand>, srcs: Vec<Operand>| Ok(vec![MicroOp::new(op, dst, srcs)]);
    match (mnem, args) {
        ("nop", []) => one(Opcode::Nop, None, vec![]),
        ("lfence", []) => one(Opcode::LFence, None, vec![]),
        ("sfence", []) => one(Opcode::SFence, None, vec![]),
        ("mov", [Reg(d), Imm(v)]) => one(Opcode::Move, Some(reg(d)), vec![Operand::Imm(*v)]),
        ("mov", [Reg(d), Reg(s)]) => one(Opcode::Move, Some(reg(d)), vec![reg(s)]),
        ("mov", [Reg(d), Mem(m)]) => one(w64(d, Opcode::Ld64, Opcode::Ld32)?, Some(reg(d)), m.address_operands()),
        ("mov", [Mem(m), Reg(s)]) => {
            let op = match s.width {
                Width::W64 => Opcode::St64,
                Width::W32 => Opcode::St32,
                Width::W8 => Opcode::St8,
                Width::W16 => return Err("16-bit stores are not modeled".into()),
            };
            let mut srcs = vec![reg(s)];
            srcs.extend(m.address_operands());
            one(op, None, srcs)
        }
        ("movzx", [Reg(d), Mem(m)]) => one(Opcode::LdZxN, Some(reg(d)), m.address_operands()),
        (alu, [Reg(d), src]) => {
            let (a, b) = match alu {
                "add" => (Opcode::Add64, Opcode::Add32),
                "sub" => (Opcode::Sub64, Opcode::Sub32),
                "and" => (Opcode::And64, Opcode::And32),
                "or" => (Opcode::Or64, Opcode::Or32),
                "xor" => (Opcode::Xor64, Opcode::Xor32),
                "shl" => (Opcode::Shl64, Opcode::Shl32),
                "shr" => (Opcode::Shr64, Opcode::Shr32),
                _ => return Err(format!("unknown instruction `{mnem}`")),
            };
            let s = match src {
                Reg(r) => reg(r),
                Imm(v) => Operand::Imm(*v),
                Mem(_) => return Err(format!("`{mnem}` with a memory operand is not modeled")),
            };
            one(w64(d, a, b)?, Some(reg(d)), vec![reg(d), s])
        }
        _ => Err(format!("unknown instruction or operands `{mnem}`")),
    }
}

// ---------------------------------------------------------------------------
// Attack drivers

pub const PROBE_BASE: u64 = 0x10_0000;
pub const PROBE_STRIDE: u64 = 512;
pub const PROBE_BUCKETS: usize = 256;

/// Two dependent loads over cold lines keep the ROB head busy so the victim
/// branch cannot retire (and squash) before the transmitter runs.
const BLOCKER: &str = "mov r14, [0x8000]; mov r14, [r14 + 0x9000]";
/// Cold slot used to deliver a slow operand.
pub const SLOW_SLOT: u64 = 0xa000;
/// Buffer whose out-of-range byte holds the secret.
const BUF: u64 = 0x2_0000;
const OOB_INDEX: u64 = 0x40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Faulting instruction exposes privileged state through its output.
    Meb1,
    /// Faulting check guards an access done by later macro-ops.
    Meb2,
    /// Mispredicted path hands a wrong value to later macro-ops.
    Mvi,
    /// Leak inside the microprogram itself after priming slow operands.
    Mil,
    /// Out-of-range counter index read through rdpmc.
    Pcidx,
}

/// What the transmitter encodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Reg(Reg),
    /// `rdx:rax`, combined into rax first.
    RdxRax,
    /// Byte at `[rsi + rax]`, read after the vulnerable instruction.
    OutOfBounds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Driver {
    pub pattern: Pattern,
    pub setup: Vec<String>,
    pub invoke: Option<String>,
    pub output: Option<Output>,
    pub byte_sel: u8,
    pub transmit_base: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DriverError {
    #[error("driver parameter `{0}` is not bound")]
    Unbound(&'static str),
    #[error("byte selector {0} is out of range")]
    ByteSel(u8),
}

fn transmit(out: &Output, byte_sel: u8, base: u64) -> Vec<String> {
    let mut v = Vec::new();
    let src = match out {
        Output::Reg(r) => r.to_string(),
        Output::RdxRax => {
            v.push("shl rdx, 32".into());
            v.push("and rax, 0xffffffff".into());
            v.push("or rax, rdx".into());
            "rax".into()
        }
        Output::OutOfBounds => {
            v.push("movzx rdx, byte [rsi + rax]".into());
            "rdx".into()
        }
    };
    v.push(format!("mov r13, {src}"));
    if byte_sel > 0 {
        v.push(format!("shr r13, {}", byte_sel as u32 * 8));
    }
    v.push("and r13, 0xff".into());
    v.push("shl r13, 9".into());
    v.push(format!("mov r15, [r13 + {base:#x}]"));
    v
}

/// Renders a driver template into macro-op text.
pub fn attack_driver(d: &Driver) -> Result<String, DriverError> {
    if d.byte_sel > 7 {
        return Err(DriverError::ByteSel(d.byte_sel));
    }
    let invoke = d.invoke.as_ref().ok_or(DriverError::Unbound("vulnerable instruction"))?;
    let mut lines: Vec<String> = Vec::new();
    if matches!(d.pattern, Pattern::Meb1 | Pattern::Meb2 | Pattern::Pcidx) {
        lines.extend(BLOCKER.split(';').map(|s| s.trim().to_string()));
    }
    lines.extend(d.setup.iter().cloned());
    lines.push(invoke.clone());
    if d.pattern != Pattern::Mil {
        let out = d.output.as_ref().ok_or(DriverError::Unbound("transmitted output"))?;
        lines.extend(transmit(out, d.byte_sel, d.transmit_base));
    }
    Ok(lines.join("\n"))
}

pub const ATTACK_NAMES: [&str; 10] = [
    "meb-rdfsbase",
    "meb-rdgsbase",
    "meb-xgetbv",
    "meb-rdpmc",
    "pcidx",
    "meb-bound",
    "meb-into",
    "meltdown-bndcn",
    "mvi-div",
    "mil-scasb",
];

#[derive(Clone, Debug, Default)]
pub struct AttackOptions {
    /// Target control register for `pcidx`.
    pub creg: Option<u16>,
    pub byte_sel: u8,
    /// Run against the select-hardened microprogram.
    pub hardened: bool,
}

#[derive(Clone, Debug)]
pub struct Attack {
    pub name: String,
    pub fixture: String,
    pub pattern: Pattern,
    pub text: String,
    pub program: MacroProgram,
    pub scenario: Scenario,
    /// Full value the attack aims to expose, when one is defined.
    pub planted: Option<u64>,
    pub byte_sel: u8,
    /// Register whose architectural value the transmitter also encodes.
    pub arch_output: Option<Reg>,
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("unknown attack `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Macro(#[from] MacroParseError),
    #[error(transparent)]
    Harden(#[from] HardenError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("creg {0:#x} is outside 0x2200..0x22ff")]
    CregRange(u16),
}

/// Distinct 64-bit secret for a control-register address.
pub fn creg_secret(addr: u16) -> u64 {
    let mut z = (addr as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Logical counter index that makes rdpmc read `creg`.
pub fn pcidx_index(creg: u16) -> u32 {
    let phys = (creg as u32).wrapping_sub(0x2260) & 0xff;
    phys.rotate_right(2)
}

fn secret_byte_scenario(sc: &mut Scenario, byte: u8) {
    sc.set_reg(Reg::parse("rsi").expect("rsi"), BUF, false);
    sc.set_reg(Reg::RAX, OOB_INDEX, false);
    sc.mem.push(MemInit { addr: BUF, bytes: vec![0; 16], secret: false });
    sc.mem.push(MemInit { addr: BUF + OOB_INDEX, bytes: vec![byte], secret: true });
}

const OOB_SECRET: u8 = 0xa7;

/// Builds a named attack: driver text, bound macro program and scenario.
pub fn build_attack(name: &str, opts: &AttackOptions) -> Result<Attack, AttackError> {
    let fixture = match name {
        "meb-rdfsbase" => "rdfsbase",
        "meb-rdgsbase" => "rdgsbase",
        "meb-xgetbv" => "xgetbv",
        "meb-rdpmc" | "pcidx" => "rdpmc",
        "meb-bound" => "bound",
        "meb-into" => "into",
        "meltdown-bndcn" => "bndcn",
        "mvi-div" => "div",
        "mil-scasb" => "scasb",
        other => return Err(AttackError::Unknown(other.to_string())),
    };
    let fx = load_fixture(fixture)?;
    let mut sc = fx.scenario.clone();
    let mut driver = Driver {
        pattern: Pattern::Meb1,
        setup: vec![],
        invoke: Some(fx.invoke.clone()),
        output: None,
        byte_sel: opts.byte_sel,
        transmit_base: PROBE_BASE,
    };
    let mut planted = None;
    let mut arch_output = None;
    match name {
        "meb-rdfsbase" | "meb-rdgsbase" => {
            driver.output = Some(Output::Reg(Reg::RAX));
            planted = sc.seg.first().map(|(_, v, _)| *v);
        }
        "meb-xgetbv" => {
            driver.output = Some(Output::Reg(Reg::RAX));
            planted = sc.uram.iter().find(|(a, _, _)| *a == 0x5b).map(|(_, v, _)| (v >> 56) | 1);
        }
        "meb-rdpmc" => {
            driver.output = Some(Output::RdxRax);
            planted = sc.creg.iter().find(|(a, _, _)| *a == 0x2260).map(|(_, v, _)| *v);
        }
        "pcidx" => {
            let creg = opts.creg.unwrap_or(0x2290);
            if !(0x2200..=0x22ff).contains(&creg) {
                return Err(AttackError::CregRange(creg));
            }
            driver.pattern = Pattern::Pcidx;
            driver.output = Some(Output::RdxRax);
            driver.setup = vec![format!("mov rcx, [{SLOW_SLOT:#x}]")];
            sc.creg.clear();
            for a in 0x2200u16..=0x22ff {
                sc.set_creg(a, creg_secret(a), true);
            }
            sc.mem.push(MemInit { addr: SLOW_SLOT, bytes: (pcidx_index(creg) as u64).to_le_bytes().to_vec(), secret: false });
            sc.flush.push((SLOW_SLOT, 8));
            planted = Some(creg_secret(creg));
        }
        "meb-bound" | "meb-into" => {
            driver.pattern = Pattern::Meb2;
            driver.output = Some(Output::OutOfBounds);
            secret_byte_scenario(&mut sc, OOB_SECRET);
            if name == "meb-bound" {
                sc.flush.push((0x6000, 8));
            }
            planted = Some(OOB_SECRET as u64);
        }
        "meltdown-bndcn" => {
            driver.pattern = Pattern::Meb2;
            driver.output = Some(Output::OutOfBounds);
            secret_byte_scenario(&mut sc, OOB_SECRET);
            let ub = sc.regs.iter().find(|(r, _, _)| *r == Reg::parse("rbx").expect("rbx")).map(|(_, v, _)| *v);
            let ptr = ub.unwrap_or(0).max(BUF) + OOB_INDEX;
            sc.mem.retain(|m| m.addr != 0x6100);
            sc.mem.push(MemInit { addr: 0x6100, bytes: ptr.to_le_bytes().to_vec(), secret: false });
            sc.flush.push((0x6100, 8));
            planted = Some(OOB_SECRET as u64);
        }
        "mvi-div" => {
            driver.pattern = Pattern::Mvi;
            driver.output = Some(Output::Reg(Reg::RAX));
            let get = |r: Reg| sc.regs.iter().find(|(x, _, _)| *x == r).map(|(_, v, _)| *v).unwrap_or(0);
            let (hi, lo, d) = (get(Reg::RDX), get(Reg::RAX), get(Reg::RCX));
            sc.regs.retain(|(r, _, _)| *r != Reg::RDX);
            sc.mem.push(MemInit { addr: SLOW_SLOT, bytes: hi.to_le_bytes().to_vec(), secret: false });
            sc.flush.push((SLOW_SLOT, 8));
            driver.setup = vec![format!("mov rdx, [{SLOW_SLOT:#x}]")];
            planted = (d != 0).then(|| lo / d);
            arch_output = Some(Reg::RAX);
        }
        "mil-scasb" => {
            driver.pattern = Pattern::Mil;
            let len = sc.regs.iter().find(|(r, _, _)| *r == Reg::RCX).map(|(_, v, _)| *v).unwrap_or(0);
            sc.regs.retain(|(r, _, _)| *r != Reg::RCX);
            sc.mem.push(MemInit { addr: SLOW_SLOT, bytes: len.to_le_bytes().to_vec(), secret: false });
            sc.flush.push((SLOW_SLOT, 8));
            let strings: Vec<(u64, u64)> = sc.mem.iter().map(|m| (m.addr, m.bytes.len() as u64)).collect();
            sc.flush.extend(strings.into_iter().filter(|(a, _)| *a != SLOW_SLOT));
            driver.setup = vec![format!("mov rcx, [{SLOW_SLOT:#x}]")];
        }
        _ => unreachable!("fixture match covers every attack name"),
    }
    let text = attack_driver(&driver)?;
    let mut isa = Isa::from_corpus()?;
    if opts.hardened {
        let hp = harden(&fx.program, &HardenPolicy::default(), Some(&sc))?;
        isa.replace(&fx.mnemonic, hp);
    }
    let program = isa.assemble(&text)?;
    Ok(Attack {
        name: name.to_string(),
        fixture: fixture.to_string(),
        pattern: driver.pattern,
        text,
        program,
        scenario: sc,
        planted,
        byte_sel: opts.byte_sel,
        arch_output,
    })
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub trace: PipelineTrace,
    pub leak: LeakReport,
    pub recovered: Result<u8, ProbeError>,
}

/// Runs the attack, then plays the receiver: flushes the bucket the
/// architectural result is known to touch and probes the array.
pub fn run_attack(a: &Attack, cfg: &Config) -> Result<AttackRun, AttackError> {
    let trace = run(&a.program, &a.scenario, cfg)?;
    let leak = taint_oracle(&trace, a.scenario.unauthorized);
    let mut cache = trace.cache.clone();
    if let Some(r) = a.arch_output {
        if trace.fault.is_none() {
            let b = (trace.state.reg(r).data >> (a.byte_sel as u32 * 8)) & 0xff;
            cache.flush(PROBE_BASE + b * PROBE_STRIDE);
        }
    }
    let recovered = if a.pattern == Pattern::Mil {
        Err(ProbeError::NoSignal)
    } else {
        probe_recover(&mut cache, PROBE_BASE, PROBE_STRIDE, PROBE_BUCKETS).map(|b| b as u8)
    };
    Ok(AttackRun { trace, leak, recovered })
}

/// Recovers a full 64-bit value one byte-selector run at a time.
pub fn recover_u64(name: &str, opts: &AttackOptions, cfg: &Config) -> Result<Vec<Result<u8, ProbeError>>, AttackError> {
    (0..8u8)
        .map(|k| {
            let a = build_attack(name, &AttackOptions { byte_sel: k, ..opts.clone() })?;
            Ok(run_attack(&a, cfg)?.recovered)
        })
        .collect()
}
