//! Micro-op instruction set: registers, flags, condition codes, micro-ops,
//! triads, sequence words and the microprogram container.
//!
//! Micro-addresses are abstract integers starting at zero. Triad `i` holds
//! addresses `3*i .. 3*i+2`, so the slot position of any address is
//! `addr % 3`.

use std::fmt;

use thiserror::Error;

pub type UAddr = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegFile {
    Arch,
    Scratch,
    ArchFp,
    ScratchFp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Width {
    W8,
    W16,
    W32,
    W64,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::W8 => 8,
            Width::W16 => 16,
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W64 => u64::MAX,
            w => (1u64 << w.bits()) - 1,
        }
    }
}

const ARCH64: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13",
    "r14", "r15",
];
const ARCH32: [&str; 16] = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d",
    "r13d", "r14d", "r15d",
];
const ARCH16: [&str; 16] = [
    "ax", "cx", "dx", "bx", "sp", "bp", "si", "di", "r8w", "r9w", "r10w", "r11w", "r12w", "r13w",
    "r14w", "r15w",
];
const ARCH8: [&str; 16] = [
    "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b",
    "r13b", "r14b", "r15b",
];

/// A register name. Sub-width views of architectural registers alias the
/// low bits of the containing 64-bit register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg {
    pub file: RegFile,
    pub index: u8,
    pub width: Width,
}

impl Reg {
    pub const fn arch(index: u8) -> Reg {
        Reg { file: RegFile::Arch, index, width: Width::W64 }
    }

    pub const fn tmp(index: u8) -> Reg {
        Reg { file: RegFile::Scratch, index, width: Width::W64 }
    }

    pub const RAX: Reg = Reg::arch(0);
    pub const RCX: Reg = Reg::arch(1);
    pub const RDX: Reg = Reg::arch(2);
    pub const RBX: Reg = Reg::arch(3);
    pub const RSI: Reg = Reg::arch(6);
    pub const RDI: Reg = Reg::arch(7);

    /// The full-width register this name aliases.
    pub fn container(self) -> Reg {
        Reg { width: Width::W64, ..self }
    }

    pub fn is_architectural(self) -> bool {
        matches!(self.file, RegFile::Arch | RegFile::ArchFp)
    }

    pub fn parse(name: &str) -> Option<Reg> {
        let lower = name.to_ascii_lowercase();
        let n = lower.as_str();
        for (table, width) in [
            (&ARCH64, Width::W64),
            (&ARCH32, Width::W32),
            (&ARCH16, Width::W16),
            (&ARCH8, Width::W8),
        ] {
            if let Some(i) = table.iter().position(|r| *r == n) {
                return Some(Reg { file: RegFile::Arch, index: i as u8, width });
            }
        }
        let indexed = |prefix: &str, file: RegFile| -> Option<Reg> {
            let rest = n.strip_prefix(prefix)?;
            if rest.is_empty() || (rest.len() > 1 && rest.starts_with('0')) {
                return None;
            }
            let index: u8 = rest.parse().ok()?;
            (index < 16).then_some(Reg { file, index, width: Width::W64 })
        };
        indexed("tmm", RegFile::ScratchFp)
            .or_else(|| indexed("tmp", RegFile::Scratch))
            .or_else(|| indexed("xmm", RegFile::ArchFp))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.index as usize;
        match (self.file, self.width) {
            (RegFile::Arch, Width::W64) => f.write_str(ARCH64[i]),
            (RegFile::Arch, Width::W32) => f.write_str(ARCH32[i]),
            (RegFile::Arch, Width::W16) => f.write_str(ARCH16[i]),
            (RegFile::Arch, Width::W8) => f.write_str(ARCH8[i]),
            (RegFile::Scratch, _) => write!(f, "tmp{i}"),
            (RegFile::ArchFp, _) => write!(f, "xmm{i}"),
            (RegFile::ScratchFp, _) => write!(f, "tmm{i}"),
        }
    }
}

/// Arithmetic flags carried by every integer register value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FlagSet {
    pub zero: bool,
    pub carry: bool,
    pub overflow: bool,
    pub sign: bool,
    pub parity: bool,
    pub aux: bool,
}

impl FlagSet {
    /// Packs the flags as bits 0..6 in the order CF, PF, AF, ZF, SF, OF.
    pub fn bits(self) -> u8 {
        (self.carry as u8)
            | (self.parity as u8) << 1
            | (self.aux as u8) << 2
            | (self.zero as u8) << 3
            | (self.sign as u8) << 4
            | (self.overflow as u8) << 5
    }

    pub fn from_bits(b: u8) -> FlagSet {
        FlagSet {
            carry: b & 1 != 0,
            parity: b & 2 != 0,
            aux: b & 4 != 0,
            zero: b & 8 != 0,
            sign: b & 16 != 0,
            overflow: b & 32 != 0,
        }
    }

    /// All 64 combinations of the six flags.
    pub fn all() -> impl Iterator<Item = FlagSet> {
        (0u8..64).map(FlagSet::from_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CondCode {
    Z,
    NZ,
    C,
    NC,
    O,
    NO,
    L,
    GE,
    G,
    LE,
    BE,
    A,
}

impl CondCode {
    pub const ALL: [CondCode; 12] = [
        CondCode::Z,
        CondCode::NZ,
        CondCode::C,
        CondCode::NC,
        CondCode::O,
        CondCode::NO,
        CondCode::L,
        CondCode::GE,
        CondCode::G,
        CondCode::LE,
        CondCode::BE,
        CondCode::A,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            CondCode::Z => "Z",
            CondCode::NZ => "NZ",
            CondCode::C => "C",
            CondCode::NC => "NC",
            CondCode::O => "O",
            CondCode::NO => "NO",
            CondCode::L => "L",
            CondCode::GE => "GE",
            CondCode::G => "G",
            CondCode::LE => "LE",
            CondCode::BE => "BE",
            CondCode::A => "A",
        }
    }

    pub fn parse(s: &str) -> Option<CondCode> {
        CondCode::ALL.into_iter().find(|c| c.suffix().eq_ignore_ascii_case(s))
    }
}

pub fn eval_cond(cc: CondCode, f: FlagSet) -> bool {
    match cc {
        CondCode::Z => f.zero,
        CondCode::NZ => !f.zero,
        CondCode::C => f.carry,
        CondCode::NC => !f.carry,
        CondCode::O => f.overflow,
        CondCode::NO => !f.overflow,
        CondCode::L => f.sign != f.overflow,
        CondCode::GE => f.sign == f.overflow,
        CondCode::G => !f.zero && f.sign == f.overflow,
        CondCode::LE => f.zero || f.sign != f.overflow,
        CondCode::BE => f.carry || f.zero,
        CondCode::A => !f.carry && !f.zero,
    }
}

pub fn invert_cond(cc: CondCode) -> CondCode {
    match cc {
        CondCode::Z => CondCode::NZ,
        CondCode::NZ => CondCode::Z,
        CondCode::C => CondCode::NC,
        CondCode::NC => CondCode::C,
        CondCode::O => CondCode::NO,
        CondCode::NO => CondCode::O,
        CondCode::L => CondCode::GE,
        CondCode::GE => CondCode::L,
        CondCode::G => CondCode::LE,
        CondCode::LE => CondCode::G,
        CondCode::BE => CondCode::A,
        CondCode::A => CondCode::BE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TriadPosition {
    First,
    Second,
    Last,
}

pub fn triad_position(addr: UAddr) -> TriadPosition {
    match addr % 3 {
        0 => TriadPosition::First,
        1 => TriadPosition::Second,
        _ => TriadPosition::Last,
    }
}

/// Named operands that appear verbatim in listings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    Cr4,
    Rflags,
    Fs,
    Gs,
    Base,
    Ds,
}

/// Control-register bus address used for `CR4` in this model.
pub const CREG_CR4: u16 = 0x0004;
/// Control-register bus address used for `RFLAGS` in this model.
pub const CREG_RFLAGS: u16 = 0x0010;

impl Sym {
    const NAMES: [(Sym, &'static str); 6] = [
        (Sym::Cr4, "CR4"),
        (Sym::Rflags, "RFLAGS"),
        (Sym::Fs, "FS"),
        (Sym::Gs, "GS"),
        (Sym::Base, "BASE"),
        (Sym::Ds, "DS"),
    ];

    pub fn name(self) -> &'static str {
        Sym::NAMES.iter().find(|(s, _)| *s == self).map(|(_, n)| *n).unwrap_or("?")
    }

    pub fn parse(s: &str) -> Option<Sym> {
        Sym::NAMES.iter().find(|(_, n)| n.eq_ignore_ascii_case(s)).map(|(s, _)| *s)
    }

    /// Control-register address for symbols that name one.
    pub fn creg(self) -> Option<u16> {
        match self {
            Sym::Cr4 => Some(CREG_CR4),
            Sym::Rflags => Some(CREG_RFLAGS),
            _ => None,
        }
    }
}

/// Macro-op operand placeholders, bound when the owning macro-op is decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    R64,
    R32,
    M32Base,
    M32Idx,
    M32Scale,
    M32Disp,
    M64Base,
    M64Idx,
    M64Scale,
    M64Disp,
    BndUb,
}

impl Param {
    pub const ALL: [(Param, &'static str); 11] = [
        (Param::R64, "r64"),
        (Param::R32, "r32"),
        (Param::M32Base, "m32base"),
        (Param::M32Idx, "m32idx"),
        (Param::M32Scale, "m32scale"),
        (Param::M32Disp, "m32disp"),
        (Param::M64Base, "m64base"),
        (Param::M64Idx, "m64idx"),
        (Param::M64Scale, "m64scale"),
        (Param::M64Disp, "m64disp"),
        (Param::BndUb, "bnd.ub"),
    ];

    pub fn name(self) -> &'static str {
        Param::ALL.iter().find(|(p, _)| *p == self).map(|(_, n)| *n).unwrap_or("?")
    }

    pub fn parse(s: &str) -> Option<Param> {
        Param::ALL.iter().find(|(_, n)| n.eq_ignore_ascii_case(s)).map(|(p, _)| *p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
    Sym(Sym),
    Param(Param),
}

impl Operand {
    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) if *v < 10 => write!(f, "{v}"),
            Operand::Imm(v) => write!(f, "{v:#x}"),
            Operand::Sym(s) => f.write_str(s.name()),
            Operand::Param(p) => f.write_str(p.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Direct(UAddr),
    Indirect(Reg),
}

/// Opcode families. Conditional families carry their condition code in
/// [`MicroOp::cond`]; the printed mnemonic is the family name plus suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Nop,
    Move,
    Add8,
    Add32,
    Add64,
    Sub32,
    Sub64,
    And32,
    And64,
    Or32,
    Or64,
    Xor32,
    Xor64,
    NotAnd32,
    NotAnd64,
    Rol32,
    Shl32,
    Shl64,
    Shr32,
    Shr64,
    ShrDsz64,
    ZeroExt32,
    ZeroExt64,
    ZeroExtN,
    AddSub64,
    UDiv64,
    URem64,
    UDiv128,
    URem128,
    LdZxN,
    Ld32,
    Ld64,
    St8,
    St32,
    St64,
    La2Lin32,
    RdCreg64,
    WrCreg64,
    BtsWrCreg64,
    BtrWrCreg64,
    ReadUram64,
    WriteUram64,
    RdSeg,
    Select,
    SigEvent,
    GenArithFlags,
    MoveMergeFlags32,
    SFence,
    LFence,
    Unk109,
    Unk256,
    Ujmp,
    CmpUjmp,
    BtUjmp,
}

const PLAIN: [(Opcode, &str); 50] = [
    (Opcode::Nop, "NOP"),
    (Opcode::Move, "MOVE64"),
    (Opcode::Add8, "ADD8"),
    (Opcode::Add32, "ADD32"),
    (Opcode::Add64, "ADD64"),
    (Opcode::Sub32, "SUB32"),
    (Opcode::Sub64, "SUB64"),
    (Opcode::And32, "AND32"),
    (Opcode::And64, "AND64"),
    (Opcode::Or32, "OR32"),
    (Opcode::Or64, "OR64"),
    (Opcode::Xor32, "XOR32"),
    (Opcode::Xor64, "XOR64"),
    (Opcode::NotAnd32, "NOTAND32"),
    (Opcode::NotAnd64, "NOTAND64"),
    (Opcode::Rol32, "ROL32"),
    (Opcode::Shl32, "SHL32"),
    (Opcode::Shl64, "SHL64"),
    (Opcode::Shr32, "SHR32"),
    (Opcode::Shr64, "SHR64"),
    (Opcode::ShrDsz64, "SHR_DSZ64"),
    (Opcode::ZeroExt32, "ZEROEXT32"),
    (Opcode::ZeroExt64, "ZEROEXT64"),
    (Opcode::ZeroExtN, "ZEROEXTN"),
    (Opcode::AddSub64, "ADDSUB64"),
    (Opcode::UDiv64, "UDIV64"),
    (Opcode::URem64, "UREM64"),
    (Opcode::UDiv128, "UDIV128"),
    (Opcode::URem128, "UREM128"),
    (Opcode::LdZxN, "LDZXn"),
    (Opcode::Ld32, "LD32"),
    (Opcode::Ld64, "LD64"),
    (Opcode::St8, "ST8"),
    (Opcode::St32, "ST32"),
    (Opcode::St64, "ST64"),
    (Opcode::La2Lin32, "LA2LIN32"),
    (Opcode::RdCreg64, "RDCREG64"),
    (Opcode::WrCreg64, "WRCREG64"),
    (Opcode::BtsWrCreg64, "BTS_WRCREG64"),
    (Opcode::BtrWrCreg64, "BTR_WRCREG64"),
    (Opcode::ReadUram64, "READURAM64"),
    (Opcode::WriteUram64, "WRITEURAM64"),
    (Opcode::RdSeg, "RDSEG"),
    (Opcode::SigEvent, "SIGEVENT"),
    (Opcode::GenArithFlags, "GENARITHFLAGS"),
    (Opcode::MoveMergeFlags32, "MOVE_MERGEFLAGS32"),
    (Opcode::SFence, "SFENCE"),
    (Opcode::LFence, "LFENCE"),
    (Opcode::Unk109, "unk_109"),
    (Opcode::Unk256, "unk_256"),
];

const COND_FAMILIES: [(Opcode, &str); 4] = [
    (Opcode::CmpUjmp, "CMP_UJMP"),
    (Opcode::BtUjmp, "BT_UJMP"),
    (Opcode::Ujmp, "UJMP"),
    (Opcode::Select, "SELECT"),
];

impl Opcode {
    /// Parses a mnemonic into an opcode and optional condition code.
    /// Matching is case-insensitive.
    pub fn parse(mnemonic: &str) -> Option<(Opcode, Option<CondCode>)> {
        if let Some((op, _)) = PLAIN.iter().find(|(_, n)| n.eq_ignore_ascii_case(mnemonic)) {
            return Some((*op, None));
        }
        let upper = mnemonic.to_ascii_uppercase();
        for (op, fam) in COND_FAMILIES {
            if let Some(rest) = upper.strip_prefix(fam) {
                if rest.is_empty() {
                    return (op == Opcode::Ujmp).then_some((op, None));
                }
                if let Some(cc) = CondCode::parse(rest) {
                    return Some((op, Some(cc)));
                }
            }
        }
        None
    }

    pub fn mnemonic(self, cond: Option<CondCode>) -> String {
        if let Some((_, fam)) = COND_FAMILIES.iter().find(|(o, _)| *o == self) {
            return format!("{fam}{}", cond.map(|c| c.suffix()).unwrap_or(""));
        }
        PLAIN.iter().find(|(o, _)| *o == self).map(|(_, n)| n.to_string()).unwrap_or_default()
    }

    pub fn is_branch(self) -> bool {
        matches!(self, Opcode::Ujmp | Opcode::CmpUjmp | Opcode::BtUjmp)
    }

    pub fn is_load(self) -> bool {
        matches!(self, Opcode::LdZxN | Opcode::Ld32 | Opcode::Ld64)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Opcode::St8 | Opcode::St32 | Opcode::St64)
    }

    /// Opcodes that read or write the control-register bus.
    pub fn touches_creg(self) -> bool {
        matches!(
            self,
            Opcode::RdCreg64
                | Opcode::WrCreg64
                | Opcode::BtsWrCreg64
                | Opcode::BtrWrCreg64
                | Opcode::GenArithFlags
                | Opcode::MoveMergeFlags32
                | Opcode::Unk109
        )
    }

    pub fn touches_uram(self) -> bool {
        matches!(self, Opcode::ReadUram64 | Opcode::WriteUram64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    CondDirect,
    CondIndirect,
    UncondDirect,
    UncondIndirect,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MicroOp {
    pub op: Opcode,
    pub cond: Option<CondCode>,
    /// Destination: a register or a macro-op placeholder.
    pub dst: Option<Operand>,
    pub srcs: Vec<Operand>,
    pub target: Option<Target>,
}

impl MicroOp {
    pub fn new(op: Opcode, dst: Option<Operand>, srcs: Vec<Operand>) -> MicroOp {
        MicroOp { op, cond: None, dst, srcs, target: None }
    }

    pub fn nop() -> MicroOp {
        MicroOp::new(Opcode::Nop, None, vec![])
    }

    pub fn branch_kind(&self) -> Option<BranchKind> {
        if !self.op.is_branch() {
            return None;
        }
        let indirect = matches!(self.target, Some(Target::Indirect(_)));
        Some(match (self.cond.is_some(), indirect) {
            (true, false) => BranchKind::CondDirect,
            (true, true) => BranchKind::CondIndirect,
            (false, false) => BranchKind::UncondDirect,
            (false, true) => BranchKind::UncondIndirect,
        })
    }

    pub fn is_cond_branch(&self) -> bool {
        self.op.is_branch() && self.cond.is_some()
    }

    /// Register whose flags a conditional branch or select tests.
    pub fn cond_reg(&self) -> Option<Reg> {
        match self.op {
            Opcode::Ujmp | Opcode::CmpUjmp | Opcode::BtUjmp | Opcode::Select if self.cond.is_some() => {
                self.srcs.first().and_then(Operand::reg)
            }
            _ => None,
        }
    }

    pub fn dst_reg(&self) -> Option<Reg> {
        self.dst.as_ref().and_then(Operand::reg)
    }

    /// Registers written by this uop, including the flag write-back of
    /// compare-and-branch and bit-test-and-branch forms.
    pub fn written_regs(&self) -> Vec<Reg> {
        let mut out: Vec<Reg> = self.dst_reg().into_iter().collect();
        if matches!(self.op, Opcode::CmpUjmp | Opcode::BtUjmp) {
            if let Some(r) = self.srcs.first().and_then(Operand::reg) {
                out.push(r);
            }
        }
        out
    }

    /// Registers read by this uop. Sub-width destinations also read their
    /// container because the untouched bits are merged.
    pub fn read_regs(&self) -> Vec<Reg> {
        let mut out: Vec<Reg> = self.srcs.iter().filter_map(Operand::reg).collect();
        if let Some(Target::Indirect(r)) = &self.target {
            out.push(*r);
        }
        if let Some(d) = self.dst_reg() {
            if matches!(d.width, Width::W8 | Width::W16) {
                out.push(d.container());
            }
        }
        out
    }

    pub fn mnemonic(&self) -> String {
        self.op.mnemonic(self.cond)
    }

    /// Renders the uop, naming direct targets through `label`.
    pub fn render(&self, label: &dyn Fn(UAddr) -> String) -> String {
        let mut args: Vec<String> = self.srcs.iter().map(|s| s.to_string()).collect();
        match &self.target {
            Some(Target::Direct(a)) => args.push(label(*a)),
            Some(Target::Indirect(r)) => args.push(r.to_string()),
            None => {}
        }
        let body = if self.op == Opcode::Move && self.srcs.len() == 1 {
            args.join(", ")
        } else {
            format!("{}({})", self.mnemonic(), args.join(", "))
        };
        match &self.dst {
            Some(d) => format!("{d} = {body}"),
            None => body,
        }
    }
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&|a| format!("U{a:04x}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeqDirective {
    None,
    Uend0,
    Uend2,
    LfnceMark,
    LfnceWait,
    SyncMark,
    SyncWait,
    SyncFull,
    Goto(UAddr),
}

impl SeqDirective {
    pub const NAMED: [(SeqDirective, &'static str); 7] = [
        (SeqDirective::Uend0, "UEND0"),
        (SeqDirective::Uend2, "UEND2"),
        (SeqDirective::LfnceMark, "LFNCEMARK"),
        (SeqDirective::LfnceWait, "LFNCEWAIT"),
        (SeqDirective::SyncMark, "SYNCMARK"),
        (SeqDirective::SyncWait, "SYNCWAIT"),
        (SeqDirective::SyncFull, "SYNCFULL"),
    ];

    pub fn is_end(self) -> bool {
        matches!(self, SeqDirective::Uend0 | SeqDirective::Uend2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Op(MicroOp),
    Pad,
}

impl Slot {
    pub fn op(&self) -> Option<&MicroOp> {
        match self {
            Slot::Op(u) => Some(u),
            Slot::Pad => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triad {
    pub slots: [Slot; 3],
    pub seqw: SeqDirective,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Microprogram {
    pub name: String,
    pub entry: UAddr,
    pub triads: Vec<Triad>,
    /// Labels in definition order; several names may share an address.
    pub labels: Vec<(String, UAddr)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidateError {
    #[error("entrypoint {0:#x} is not held by the program")]
    Entry(UAddr),
    #[error("branch at {addr:#x} has no target")]
    MissingTarget { addr: UAddr },
    #[error("target {target:#x} of uop at {addr:#x} is not held by the program")]
    Target { addr: UAddr, target: UAddr },
    #[error("conditional uop at {addr:#x} has no condition register")]
    CondReg { addr: UAddr },
    #[error("non-branch uop at {addr:#x} carries a target")]
    StrayTarget { addr: UAddr },
}

impl Microprogram {
    pub fn len_addrs(&self) -> UAddr {
        self.triads.len() as UAddr * 3
    }

    pub fn slot(&self, addr: UAddr) -> Option<&Slot> {
        self.triads.get(addr as usize / 3).map(|t| &t.slots[addr as usize % 3])
    }

    pub fn uop(&self, addr: UAddr) -> Option<&MicroOp> {
        self.slot(addr).and_then(Slot::op)
    }

    pub fn seqw_at(&self, addr: UAddr) -> SeqDirective {
        self.triads.get(addr as usize / 3).map(|t| t.seqw).unwrap_or(SeqDirective::None)
    }

    pub fn label_addr(&self, name: &str) -> Option<UAddr> {
        self.labels.iter().find(|(n, _)| n == name).map(|(_, a)| *a)
    }

    /// First label defined at `addr`, if any.
    pub fn label_at(&self, addr: UAddr) -> Option<&str> {
        self.labels.iter().find(|(_, a)| *a == addr).map(|(n, _)| n.as_str())
    }

    pub fn label_or_addr(&self, addr: UAddr) -> String {
        self.label_at(addr).map(str::to_string).unwrap_or_else(|| format!("U{addr:04x}"))
    }

    /// All real uops with their addresses, in address order.
    pub fn uops(&self) -> impl Iterator<Item = (UAddr, &MicroOp)> {
        self.triads.iter().enumerate().flat_map(|(i, t)| {
            t.slots.iter().enumerate().filter_map(move |(j, s)| s.op().map(|u| ((i * 3 + j) as UAddr, u)))
        })
    }

    pub fn uop_count(&self) -> usize {
        self.uops().count()
    }

    pub fn render_uop(&self, u: &MicroOp) -> String {
        u.render(&|a| self.label_or_addr(a))
    }

    pub fn validate(&self) -> Result<(), ValidateError> {
        let held = |a: UAddr| self.uop(a).is_some() || (a.is_multiple_of(3) && (a as usize / 3) < self.triads.len());
        if !held(self.entry) {
            return Err(ValidateError::Entry(self.entry));
        }
        for (addr, u) in self.uops() {
            if u.op.is_branch() {
                match &u.target {
                    None => return Err(ValidateError::MissingTarget { addr }),
                    Some(Target::Direct(t)) if !held(*t) => {
                        return Err(ValidateError::Target { addr, target: *t })
                    }
                    _ => {}
                }
            } else if u.target.is_some() {
                return Err(ValidateError::StrayTarget { addr });
            }
            if u.cond.is_some() && u.cond_reg().is_none() {
                let param_cond = matches!(u.srcs.first(), Some(Operand::Param(_)));
                if !param_cond {
                    return Err(ValidateError::CondReg { addr });
                }
            }
        }
        for (i, t) in self.triads.iter().enumerate() {
            if let SeqDirective::Goto(g) = t.seqw {
                if !held(g) {
                    return Err(ValidateError::Target { addr: i as UAddr * 3, target: g });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triad_positions() {
        assert_eq!(triad_position(0), TriadPosition::First);
        assert_eq!(triad_position(2), TriadPosition::Last);
        assert_eq!(triad_position(7), TriadPosition::Second);
    }

    #[test]
    fn cond_examples() {
        let z = FlagSet { zero: true, ..Default::default() };
        assert!(eval_cond(CondCode::Z, z));
        assert!(!eval_cond(CondCode::NZ, z));
        assert!(eval_cond(CondCode::BE, z));
        assert_eq!(invert_cond(CondCode::Z), CondCode::NZ);
        assert_eq!(invert_cond(CondCode::NC), CondCode::C);
        assert_eq!(invert_cond(CondCode::L), CondCode::GE);
    }

    /// Truth table written out per code from the x86 definitions.
    fn oracle(cc: CondCode, f: FlagSet) -> bool {
        let (z, c, o, s) = (f.zero as u8, f.carry as u8, f.overflow as u8, f.sign as u8);
        match cc {
            CondCode::Z => z == 1,
            CondCode::NZ => z == 0,
            CondCode::C => c == 1,
            CondCode::NC => c == 0,
            CondCode::O => o == 1,
            CondCode::NO => o == 0,
            CondCode::L => (s ^ o) == 1,
            CondCode::GE => (s ^ o) == 0,
            CondCode::G => z == 0 && (s ^ o) == 0,
            CondCode::LE => z == 1 || (s ^ o) == 1,
            CondCode::BE => (c | z) == 1,
            CondCode::A => (c | z) == 0,
        }
    }

    #[test]
    fn eval_matches_truth_table_and_inverse_negates() {
        for cc in CondCode::ALL {
            for f in FlagSet::all() {
                assert_eq!(eval_cond(cc, f), oracle(cc, f), "{cc:?} {f:?}");
                assert_eq!(eval_cond(invert_cond(cc), f), !eval_cond(cc, f));
            }
            assert_eq!(invert_cond(invert_cond(cc)), cc);
        }
    }

    #[test]
    fn register_names_round_trip() {
        for name in ["rax", "eax", "ax", "al", "r15d", "tmp0", "tmp15", "xmm3", "tmm7", "dil"] {
            let r = Reg::parse(name).unwrap();
            assert_eq!(r.to_string(), name);
        }
        assert!(Reg::parse("tmp16").is_none());
        assert!(Reg::parse("tmp01").is_none());
        assert_eq!(Reg::parse("EAX").unwrap().container(), Reg::RAX);
    }

    #[test]
    fn mnemonics_parse() {
        assert_eq!(Opcode::parse("UJMPC"), Some((Opcode::Ujmp, Some(CondCode::C))));
        assert_eq!(Opcode::parse("ujmp"), Some((Opcode::Ujmp, None)));
        assert_eq!(Opcode::parse("CMP_UJMPZ"), Some((Opcode::CmpUjmp, Some(CondCode::Z))));
        assert_eq!(Opcode::parse("BT_UJMPNC"), Some((Opcode::BtUjmp, Some(CondCode::NC))));
        assert_eq!(Opcode::parse("SELECTBE"), Some((Opcode::Select, Some(CondCode::BE))));
        assert_eq!(Opcode::parse("SELECT"), None);
        assert_eq!(Opcode::parse("unk_109"), Some((Opcode::Unk109, None)));
        assert_eq!(Opcode::parse("FROB"), None);
        for (op, name) in PLAIN {
            assert_eq!(Opcode::parse(name), Some((op, None)));
            assert_eq!(op.mnemonic(None), name);
        }
    }
}
