//! Architectural and microarchitectural state plus per-opcode semantics.
//!
//! Every value carries a set of taint labels. Results take the union of
//! operand taints plus the label of any location they were read from.
//! The one exception is a select whose condition is false: its zero result
//! depends only on the condition register.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::uisa::{
    eval_cond, FlagSet, MicroOp, Opcode, Operand, Param, Reg, Sym, Target, UAddr, Width, CREG_CR4,
    CREG_RFLAGS,
};

pub const CR4_PCE: u32 = 8;
pub const CR4_FSGSBASE: u32 = 16;
pub const CR4_OSXSAVE: u32 = 18;
pub const RFLAGS_DF: u32 = 10;
/// Base control-register address of the performance-counter array.
pub const CREG_PMC_BASE: u16 = 0x2260;

/// RFLAGS bit positions for CF, PF, AF, ZF, SF, OF.
const RFLAGS_ARITH: [u32; 6] = [0, 2, 4, 6, 7, 11];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Seg {
    Fs,
    Gs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Creg(u16),
    Seg(Seg),
    Uram(u16),
    Mem { start: u64, len: u64 },
    Arch(Reg),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaintLabel {
    pub origin: Origin,
    pub secret: bool,
}

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.origin {
            Origin::Creg(a) => write!(f, "creg({a:#06x})")?,
            Origin::Seg(Seg::Fs) => write!(f, "seg(fs)")?,
            Origin::Seg(Seg::Gs) => write!(f, "seg(gs)")?,
            Origin::Uram(a) => write!(f, "uram({a:#x})")?,
            Origin::Mem { start, len } => write!(f, "mem({start:#x}+{len})")?,
            Origin::Arch(r) => write!(f, "reg({r})")?,
        }
        f.write_str(if self.secret { "/secret" } else { "/public" })
    }
}

pub type Taint = BTreeSet<TaintLabel>;

pub fn has_secret(t: &Taint) -> bool {
    t.iter().any(|l| l.secret)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaintedValue {
    pub data: u64,
    pub flags: FlagSet,
    pub taint: Taint,
}

impl TaintedValue {
    pub fn public(data: u64) -> TaintedValue {
        TaintedValue { data, flags: FlagSet::default(), taint: Taint::new() }
    }

    pub fn labeled(data: u64, label: TaintLabel) -> TaintedValue {
        TaintedValue { data, flags: logic_flags(data, Width::W64), taint: [label].into() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnmappedPolicy {
    #[default]
    Zero,
    Fault,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("no semantics registered for opcode {0}")]
    UnknownOpcode(String),
    #[error("unmapped memory access at {0:#x}")]
    UnmappedMemory(u64),
    #[error("address {0:#x} is outside the model bounds")]
    OutOfBounds(u64),
    #[error("macro-op parameter `{0}` is not bound")]
    UnboundParam(&'static str),
    #[error("malformed operands for {0}")]
    Operands(String),
}

/// Access to state that is not renamed: the control-register bus, micro-RAM,
/// segment bases and memory reads.
pub trait Env {
    fn read_creg(&mut self, addr: u16) -> TaintedValue;
    fn write_creg(&mut self, addr: u16, v: TaintedValue);
    fn read_uram(&mut self, addr: u16) -> TaintedValue;
    fn write_uram(&mut self, addr: u16, v: TaintedValue);
    fn read_seg(&mut self, seg: Seg) -> TaintedValue;
    /// Little-endian read of `size` bytes; returns data and byte taints.
    fn read_mem(&mut self, addr: u64, size: usize) -> Result<(u64, Taint), ExecError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemByte {
    pub value: u8,
    pub taint: Taint,
}

#[derive(Clone, Debug, Default)]
pub struct MachineState {
    pub regs: BTreeMap<Reg, TaintedValue>,
    pub creg: BTreeMap<u16, TaintedValue>,
    pub uram: BTreeMap<u16, TaintedValue>,
    pub seg: BTreeMap<Seg, TaintedValue>,
    pub mem: HashMap<u64, MemByte>,
    pub pending_event: Option<u64>,
    pub unmapped: UnmappedPolicy,
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> TaintedValue {
        self.regs.get(&r.container()).cloned().unwrap_or_default()
    }

    pub fn set_reg(&mut self, r: Reg, v: TaintedValue) {
        self.regs.insert(r.container(), v);
    }

    pub fn creg_value(&self, addr: u16) -> u64 {
        self.creg.get(&addr).map(|v| v.data).unwrap_or(0)
    }

    pub fn write_mem(&mut self, addr: u64, size: usize, data: u64, taint: &Taint) {
        for i in 0..size {
            let value = (data >> (8 * i)) as u8;
            self.mem.insert(addr.wrapping_add(i as u64), MemByte { value, taint: taint.clone() });
        }
    }

    pub fn mem_byte(&self, addr: u64) -> u8 {
        self.mem.get(&addr).map(|b| b.value).unwrap_or(0)
    }

    /// Architectural view compared against a reference run: registers,
    /// memory bytes and the pending event, without taint.
    pub fn arch_snapshot(&self) -> (BTreeMap<Reg, u64>, BTreeMap<u64, u8>, Option<u64>) {
        let regs = self.regs.iter().filter(|(_, v)| v.data != 0).map(|(r, v)| (*r, v.data)).collect();
        let mem = self.mem.iter().map(|(a, b)| (*a, b.value)).collect();
        (regs, mem, self.pending_event)
    }
}

impl Env for MachineState {
    fn read_creg(&mut self, addr: u16) -> TaintedValue {
        self.creg.get(&addr).cloned().unwrap_or_default()
    }

    fn write_creg(&mut self, addr: u16, v: TaintedValue) {
        self.creg.insert(addr, v);
    }

    fn read_uram(&mut self, addr: u16) -> TaintedValue {
        self.uram.get(&addr).cloned().unwrap_or_default()
    }

    fn write_uram(&mut self, addr: u16, v: TaintedValue) {
        self.uram.insert(addr, v);
    }

    fn read_seg(&mut self, seg: Seg) -> TaintedValue {
        self.seg.get(&seg).cloned().unwrap_or_default()
    }

    fn read_mem(&mut self, addr: u64, size: usize) -> Result<(u64, Taint), ExecError> {
        let mut data = 0u64;
        let mut taint = Taint::new();
        for i in 0..size {
            let a = addr.wrapping_add(i as u64);
            match self.mem.get(&a) {
                Some(b) => {
                    data |= (b.value as u64) << (8 * i);
                    taint.extend(b.taint.iter().copied());
                }
                None if self.unmapped == UnmappedPolicy::Fault => return Err(ExecError::UnmappedMemory(a)),
                None => {}
            }
        }
        Ok((data, taint))
    }
}

// ---------------------------------------------------------------------------
// Flag generation

pub fn parity(res: u64) -> bool {
    (res as u8).count_ones().is_multiple_of(2)
}

fn sign_bit(v: u64, w: Width) -> bool {
    (v >> (w.bits() - 1)) & 1 == 1
}

pub fn logic_flags(res: u64, w: Width) -> FlagSet {
    let r = res & w.mask();
    FlagSet { zero: r == 0, sign: sign_bit(r, w), parity: parity(r), ..FlagSet::default() }
}

pub fn add_flags(a: u64, b: u64, w: Width) -> (u64, FlagSet) {
    let m = w.mask();
    let (a, b) = (a & m, b & m);
    let res = a.wrapping_add(b) & m;
    let carry = if w == Width::W64 { res < a } else { a + b > m };
    let overflow = sign_bit(a, w) == sign_bit(b, w) && sign_bit(res, w) != sign_bit(a, w);
    let aux = (a ^ b ^ res) & 0x10 != 0;
    (res, FlagSet { carry, overflow, aux, ..logic_flags(res, w) })
}

pub fn sub_flags(a: u64, b: u64, w: Width) -> (u64, FlagSet) {
    let m = w.mask();
    let (a, b) = (a & m, b & m);
    let res = a.wrapping_sub(b) & m;
    let carry = a < b;
    let overflow = sign_bit(a, w) != sign_bit(b, w) && sign_bit(res, w) != sign_bit(a, w);
    let aux = (a ^ b ^ res) & 0x10 != 0;
    (res, FlagSet { carry, overflow, aux, ..logic_flags(res, w) })
}

pub fn shl_flags(a: u64, n: u64, w: Width) -> (u64, FlagSet) {
    let a = a & w.mask();
    let n = (n & (w.bits() as u64 - 1)) as u32;
    if n == 0 {
        return (a, logic_flags(a, w));
    }
    let res = (a << n) & w.mask();
    let carry = (a >> (w.bits() - n)) & 1 == 1;
    let overflow = n == 1 && (sign_bit(res, w) != carry);
    (res, FlagSet { carry, overflow, ..logic_flags(res, w) })
}

pub fn shr_flags(a: u64, n: u64, w: Width) -> (u64, FlagSet) {
    let a = a & w.mask();
    let n = (n & (w.bits() as u64 - 1)) as u32;
    if n == 0 {
        return (a, logic_flags(a, w));
    }
    let res = a >> n;
    let carry = (a >> (n - 1)) & 1 == 1;
    let overflow = n == 1 && sign_bit(a, w);
    (res, FlagSet { carry, overflow, ..logic_flags(res, w) })
}

pub fn rol32(a: u64, n: u64) -> (u64, FlagSet) {
    let n = (n & 31) as u32;
    let res = (a as u32).rotate_left(n) as u64;
    let mut f = logic_flags(res, Width::W32);
    if n != 0 {
        f.carry = res & 1 == 1;
        f.overflow = n == 1 && (sign_bit(res, Width::W32) != f.carry);
    }
    (res, f)
}

/// Mixed-width add: 8-bit add of the low bytes, upper byte from the
/// immediate operand.
pub fn add8(a: u64, imm: u64) -> u64 {
    (a.wrapping_add(imm) & 0xFF) | (imm & 0xFF00)
}

/// Reads the six arithmetic flags out of an RFLAGS image.
pub fn flags_from_rflags(rf: u64) -> FlagSet {
    let bit = |i: usize| (rf >> RFLAGS_ARITH[i]) & 1 == 1;
    FlagSet { carry: bit(0), parity: bit(1), aux: bit(2), zero: bit(3), sign: bit(4), overflow: bit(5) }
}

/// Writes the flags selected by `mask` (bit i = i-th of CF, PF, AF, ZF, SF,
/// OF) into an RFLAGS image.
pub fn merge_rflags(rf: u64, f: FlagSet, mask: u64) -> u64 {
    let vals = [f.carry, f.parity, f.aux, f.zero, f.sign, f.overflow];
    let mut out = rf;
    for (i, v) in vals.iter().enumerate() {
        if mask >> i & 1 == 1 {
            let b = 1u64 << RFLAGS_ARITH[i];
            out = if *v { out | b } else { out & !b };
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Store {
    pub addr: u64,
    pub size: usize,
    pub value: TaintedValue,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemAccess {
    pub addr: u64,
    pub size: usize,
    pub addr_taint: Taint,
    pub is_store: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub taken: bool,
    /// Target when taken; `None` for an indirect target outside `UAddr`.
    pub target: Option<UAddr>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    /// Full container values to write, in order.
    pub writes: Vec<(Reg, TaintedValue)>,
    pub store: Option<Store>,
    pub branch: Option<Resolved>,
    pub event: Option<u64>,
    pub access: Option<MemAccess>,
    pub creg_write: Option<u16>,
    pub uram_write: Option<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatencyClass {
    Alu,
    Creg,
    Uram,
    Seg,
    Load,
}

pub fn latency_class(op: Opcode) -> LatencyClass {
    match op {
        Opcode::RdCreg64 | Opcode::MoveMergeFlags32 => LatencyClass::Creg,
        Opcode::ReadUram64 => LatencyClass::Uram,
        Opcode::RdSeg => LatencyClass::Seg,
        o if o.is_load() => LatencyClass::Load,
        _ => LatencyClass::Alu,
    }
}

fn union(a: &Taint, b: &Taint) -> Taint {
    a.union(b).copied().collect()
}

fn sub_width(v: &TaintedValue, w: Width) -> TaintedValue {
    TaintedValue { data: v.data & w.mask(), flags: v.flags, taint: v.taint.clone() }
}

/// Merges a result into its destination container.
pub fn merge_dst(dst: Reg, old: &TaintedValue, new: TaintedValue) -> TaintedValue {
    match dst.width {
        Width::W64 => new,
        Width::W32 => TaintedValue { data: new.data & 0xFFFF_FFFF, ..new },
        w => TaintedValue {
            data: (old.data & !w.mask()) | (new.data & w.mask()),
            flags: new.flags,
            taint: union(&old.taint, &new.taint),
        },
    }
}

pub struct Operands<'a> {
    uop: &'a MicroOp,
    read_reg: &'a dyn Fn(Reg) -> TaintedValue,
}

impl<'a> Operands<'a> {
    fn value(&self, o: &Operand) -> Result<TaintedValue, ExecError> {
        match o {
            Operand::Reg(r) => Ok(sub_width(&(self.read_reg)(r.container()), r.width)),
            Operand::Imm(v) => Ok(TaintedValue::public(*v)),
            Operand::Sym(s) => match s.creg() {
                Some(a) => Ok(TaintedValue::public(a as u64)),
                None => Ok(TaintedValue::public(0)),
            },
            Operand::Param(p) => Err(ExecError::UnboundParam(p.name())),
        }
    }

    fn src(&self, i: usize) -> Result<TaintedValue, ExecError> {
        let o = self.uop.srcs.get(i).ok_or_else(|| ExecError::Operands(self.uop.mnemonic()))?;
        self.value(o)
    }

    fn src_or(&self, i: usize, fallback: usize) -> Result<TaintedValue, ExecError> {
        if i < self.uop.srcs.len() {
            self.src(i)
        } else {
            self.src(fallback)
        }
    }

    /// Address from `[DS,] base [, disp]` or `[DS,] base, idx, scale, disp`
    /// starting at source `from`.
    fn address(&self, from: usize) -> Result<(u64, Taint), ExecError> {
        let mut ops: Vec<&Operand> = self.uop.srcs[from.min(self.uop.srcs.len())..].iter().collect();
        if matches!(ops.first(), Some(Operand::Sym(Sym::Ds))) {
            ops.remove(0);
        }
        let vals = ops.iter().map(|o| self.value(o)).collect::<Result<Vec<_>, _>>()?;
        let mut taint = Taint::new();
        for v in &vals {
            taint.extend(v.taint.iter().copied());
        }
        let d = |i: usize| vals[i].data;
        let addr = match vals.len() {
            1 => d(0),
            2 => d(0).wrapping_add(d(1)),
            4 => d(0).wrapping_add(d(1).wrapping_mul(d(2))).wrapping_add(d(3)),
            _ => return Err(ExecError::Operands(self.uop.mnemonic())),
        };
        Ok((addr, taint))
    }
}

fn creg_addr(v: &TaintedValue) -> u16 {
    v.data as u16
}

fn seg_of(o: Option<&Operand>) -> Result<Seg, ExecError> {
    match o {
        Some(Operand::Sym(Sym::Fs)) => Ok(Seg::Fs),
        Some(Operand::Sym(Sym::Gs)) => Ok(Seg::Gs),
        _ => Err(ExecError::Operands("RDSEG".into())),
    }
}

/// Executes one uop against the current register view and environment.
/// Control-register and micro-RAM writes go straight to `env`; register and
/// memory writes come back in the outcome.
pub fn exec(
    uop: &MicroOp,
    read_reg: &dyn Fn(Reg) -> TaintedValue,
    env: &mut dyn Env,
) -> Result<Outcome, ExecError> {
    let ops = Operands { uop, read_reg };
    let mut out = Outcome::default();
    let alu = |data: u64, flags: FlagSet, taint: Taint| TaintedValue { data, flags, taint };
    let binop = |f: &dyn Fn(u64, u64) -> (u64, FlagSet)| -> Result<TaintedValue, ExecError> {
        let a = ops.src(0)?;
        let b = ops.src_or(1, 0)?;
        let (d, fl) = f(a.data, b.data);
        Ok(alu(d, fl, union(&a.taint, &b.taint)))
    };
    let logic = |w: Width, f: &dyn Fn(u64, u64) -> u64| {
        binop(&|a, b| {
            let r = f(a, b) & w.mask();
            (r, logic_flags(r, w))
        })
    };

    let result: Option<TaintedValue> = match uop.op {
        Opcode::Nop | Opcode::SFence | Opcode::LFence | Opcode::Unk256 => None,
        Opcode::Move => Some(ops.src(0)?),
        Opcode::Add8 => Some(binop(&|a, b| {
            let (_, f) = add_flags(a, b, Width::W8);
            (add8(a, b), f)
        })?),
        Opcode::Add32 => Some(binop(&|a, b| add_flags(a, b, Width::W32))?),
        Opcode::Add64 | Opcode::AddSub64 => Some(binop(&|a, b| add_flags(a, b, Width::W64))?),
        Opcode::Sub32 => Some(binop(&|a, b| sub_flags(a, b, Width::W32))?),
        Opcode::Sub64 => Some(binop(&|a, b| sub_flags(a, b, Width::W64))?),
        Opcode::And32 => Some(logic(Width::W32, &|a, b| a & b)?),
        Opcode::And64 => Some(logic(Width::W64, &|a, b| a & b)?),
        Opcode::Or32 => Some(logic(Width::W32, &|a, b| a | b)?),
        Opcode::Or64 => Some(logic(Width::W64, &|a, b| a | b)?),
        Opcode::Xor32 => Some(logic(Width::W32, &|a, b| a ^ b)?),
        Opcode::Xor64 => Some(logic(Width::W64, &|a, b| a ^ b)?),
        Opcode::NotAnd32 => Some(logic(Width::W32, &|a, b| !a & b)?),
        Opcode::NotAnd64 => Some(logic(Width::W64, &|a, b| !a & b)?),
        Opcode::Rol32 => Some(binop(&rol32)?),
        Opcode::Shl32 => Some(binop(&|a, b| shl_flags(a, b, Width::W32))?),
        Opcode::Shl64 => Some(binop(&|a, b| shl_flags(a, b, Width::W64))?),
        Opcode::Shr32 => Some(binop(&|a, b| shr_flags(a, b, Width::W32))?),
        Opcode::Shr64 | Opcode::ShrDsz64 => Some(binop(&|a, b| shr_flags(a, b, Width::W64))?),
        Opcode::ZeroExt32 => {
            let a = ops.src(0)?;
            let d = a.data & 0xFFFF_FFFF;
            Some(alu(d, logic_flags(d, Width::W32), a.taint))
        }
        Opcode::ZeroExt64 | Opcode::ZeroExtN => {
            let a = ops.src(0)?;
            Some(alu(a.data, logic_flags(a.data, Width::W64), a.taint))
        }
        Opcode::UDiv64 | Opcode::URem64 => Some(binop(&|a, b| {
            let r = match (uop.op, b) {
                (_, 0) => 0,
                (Opcode::UDiv64, _) => a / b,
                _ => a % b,
            };
            (r, logic_flags(r, Width::W64))
        })?),
        Opcode::UDiv128 | Opcode::URem128 => {
            let hi = ops.src(0)?;
            let lo = ops.src(1)?;
            let d = ops.src(2)?;
            let n = ((hi.data as u128) << 64) | lo.data as u128;
            let r = match d.data {
                0 => 0,
                dv if uop.op == Opcode::UDiv128 => (n / dv as u128) as u64,
                dv => (n % dv as u128) as u64,
            };
            Some(alu(r, logic_flags(r, Width::W64), union(&union(&hi.taint, &lo.taint), &d.taint)))
        }
        Opcode::LdZxN | Opcode::Ld32 | Opcode::Ld64 => {
            let size = match uop.op {
                Opcode::LdZxN => 1,
                Opcode::Ld32 => 4,
                _ => 8,
            };
            let (addr, at) = ops.address(0)?;
            let (data, mt) = env.read_mem(addr, size)?;
            out.access = Some(MemAccess { addr, size, addr_taint: at.clone(), is_store: false });
            Some(alu(data, logic_flags(data, Width::W64), union(&at, &mt)))
        }
        Opcode::St8 | Opcode::St32 | Opcode::St64 => {
            let size = match uop.op {
                Opcode::St8 => 1,
                Opcode::St32 => 4,
                _ => 8,
            };
            let v = ops.src(0)?;
            let (addr, at) = ops.address(1)?;
            out.access = Some(MemAccess { addr, size, addr_taint: at.clone(), is_store: true });
            let mask = if size == 8 { u64::MAX } else { (1u64 << (8 * size)) - 1 };
            out.store = Some(Store {
                addr,
                size,
                value: TaintedValue { data: v.data & mask, flags: v.flags, taint: union(&v.taint, &at) },
            });
            None
        }
        Opcode::La2Lin32 => {
            let (addr, at) = ops.address(0)?;
            Some(alu(addr, logic_flags(addr, Width::W64), at))
        }
        Opcode::RdCreg64 => {
            let a = ops.src(0)?;
            let v = env.read_creg(creg_addr(&a));
            let mut t = union(&a.taint, &v.taint);
            t.extend(label_of(&v.taint, Origin::Creg(creg_addr(&a))));
            Some(alu(v.data, logic_flags(v.data, Width::W64), t))
        }
        Opcode::WrCreg64 | Opcode::BtsWrCreg64 | Opcode::BtrWrCreg64 => {
            let v = ops.src(0)?;
            let (data, taint, at) = match uop.op {
                Opcode::WrCreg64 => {
                    let a = ops.src(1)?;
                    (v.data, v.taint.clone(), a)
                }
                op => {
                    let bit = ops.src(1)?;
                    let a = ops.src(2)?;
                    let m = 1u64 << (bit.data & 63);
                    let d = if op == Opcode::BtsWrCreg64 { v.data | m } else { v.data & !m };
                    (d, union(&v.taint, &bit.taint), a)
                }
            };
            let addr = creg_addr(&at);
            env.write_creg(addr, alu(data, logic_flags(data, Width::W64), taint));
            out.creg_write = Some(addr);
            None
        }
        Opcode::ReadUram64 => {
            let a = ops.src(0)?;
            let addr = a.data as u16;
            let v = env.read_uram(addr);
            let mut t = union(&a.taint, &v.taint);
            t.extend(label_of(&v.taint, Origin::Uram(addr)));
            Some(alu(v.data, logic_flags(v.data, Width::W64), t))
        }
        Opcode::WriteUram64 => {
            let v = ops.src(0)?;
            let a = ops.src(1)?;
            env.write_uram(a.data as u16, v);
            out.uram_write = Some(a.data as u16);
            None
        }
        Opcode::RdSeg => {
            let s = seg_of(uop.srcs.first())?;
            let v = env.read_seg(s);
            let mut t = v.taint.clone();
            t.extend(label_of(&v.taint, Origin::Seg(s)));
            Some(alu(v.data, logic_flags(v.data, Width::W64), t))
        }
        Opcode::Select => {
            let c = ops.src(0)?;
            let v = ops.src(1)?;
            let cc = uop.cond.ok_or_else(|| ExecError::Operands(uop.mnemonic()))?;
            if eval_cond(cc, c.flags) {
                Some(alu(v.data, logic_flags(v.data, Width::W64), union(&c.taint, &v.taint)))
            } else {
                Some(alu(0, logic_flags(0, Width::W64), c.taint))
            }
        }
        Opcode::SigEvent => {
            let code = ops.src(0)?.data;
            if code != 0 {
                out.event = Some(code);
            }
            None
        }
        Opcode::GenArithFlags => {
            let mask = ops.src(0)?;
            let r = ops.src(1)?;
            let rf = env.read_creg(CREG_RFLAGS);
            let data = merge_rflags(rf.data, r.flags, mask.data);
            env.write_creg(CREG_RFLAGS, alu(data, FlagSet::default(), union(&rf.taint, &r.taint)));
            out.creg_write = Some(CREG_RFLAGS);
            None
        }
        Opcode::MoveMergeFlags32 => {
            let a = ops.src(0)?;
            let rf = env.read_creg(CREG_RFLAGS);
            let mut t = union(&a.taint, &rf.taint);
            t.extend(label_of(&rf.taint, Origin::Creg(CREG_RFLAGS)));
            Some(alu(a.data & 0xFFFF_FFFF, flags_from_rflags(rf.data), t))
        }
        Opcode::Unk109 => {
            let rf = env.read_creg(CREG_RFLAGS);
            let df = (rf.data >> RFLAGS_DF) & 1 == 1;
            let mut t = rf.taint.clone();
            t.extend(label_of(&rf.taint, Origin::Creg(CREG_RFLAGS)));
            let flags = FlagSet { carry: df, zero: !df, ..FlagSet::default() };
            Some(alu(df as u64, flags, t))
        }
        Opcode::Ujmp | Opcode::CmpUjmp | Opcode::BtUjmp => {
            let target = match &uop.target {
                Some(Target::Direct(a)) => Some(*a),
                Some(Target::Indirect(r)) => UAddr::try_from((read_reg)(r.container()).data).ok(),
                None => return Err(ExecError::Operands(uop.mnemonic())),
            };
            let taken = match uop.cond {
                None => true,
                Some(cc) => {
                    let c = ops.src(0)?;
                    let flags = match uop.op {
                        Opcode::Ujmp => c.flags,
                        Opcode::CmpUjmp => sub_flags(c.data, ops.src(1)?.data, Width::W64).1,
                        _ => {
                            let bit = ops.src(1)?;
                            FlagSet { carry: (c.data >> (bit.data & 63)) & 1 == 1, ..c.flags }
                        }
                    };
                    if uop.op != Opcode::Ujmp {
                        if let Some(Operand::Reg(r)) = uop.srcs.first() {
                            let old = (read_reg)(r.container());
                            let mut nv = old.clone();
                            nv.flags = flags;
                            if uop.op == Opcode::CmpUjmp {
                                nv.taint = union(&old.taint, &ops.src(1)?.taint);
                            }
                            out.writes.push((r.container(), nv));
                        }
                    }
                    eval_cond(cc, flags)
                }
            };
            out.branch = Some(Resolved { taken, target });
            None
        }
    };

    if let (Some(v), Some(d)) = (result, &uop.dst) {
        let Operand::Reg(r) = d else {
            return Err(ExecError::Operands(uop.mnemonic()));
        };
        let old = (read_reg)(r.container());
        out.writes.push((r.container(), merge_dst(*r, &old, v)));
    }
    Ok(out)
}

/// Location label for a read: reuse the planted label when the location
/// already carries one, otherwise a public label for the location.
fn label_of(existing: &Taint, origin: Origin) -> Option<TaintLabel> {
    if existing.iter().any(|l| l.origin == origin) {
        None
    } else {
        Some(TaintLabel { origin, secret: false })
    }
}

// ---------------------------------------------------------------------------
// Macro-op parameter binding

pub type Bindings = BTreeMap<Param, Operand>;

fn bind_operand(o: &Operand, b: &Bindings) -> Result<Operand, ExecError> {
    match o {
        Operand::Param(p) => b.get(p).cloned().ok_or(ExecError::UnboundParam(p.name())),
        other => Ok(other.clone()),
    }
}

/// Substitutes macro-op parameters with their bound operands.
pub fn bind_uop(u: &MicroOp, b: &Bindings) -> Result<MicroOp, ExecError> {
    Ok(MicroOp {
        op: u.op,
        cond: u.cond,
        dst: u.dst.as_ref().map(|d| bind_operand(d, b)).transpose()?,
        srcs: u.srcs.iter().map(|s| bind_operand(s, b)).collect::<Result<_, _>>()?,
        target: u.target.clone(),
    })
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemInit {
    pub addr: u64,
    pub bytes: Vec<u8>,
    pub secret: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scenario {
    pub regs: Vec<(Reg, u64, bool)>,
    pub cr4: u64,
    pub rflags: u64,
    pub creg: Vec<(u16, u64, bool)>,
    pub uram: Vec<(u16, u64, bool)>,
    pub seg: Vec<(Seg, u64, bool)>,
    pub mem: Vec<MemInit>,
    pub flush: Vec<(u64, u64)>,
    pub mode32: bool,
    pub unauthorized: bool,
    pub events: BTreeMap<u64, String>,
    pub unmapped: UnmappedPolicy,
    pub expect: BTreeMap<String, u64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("scenario line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

fn bracketed<'a>(key: &'a str, prefix: &str) -> Option<&'a str> {
    key.strip_prefix(prefix)?.strip_prefix('[')?.strip_suffix(']')
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScenarioError { line, msg };
            let code = raw.split("//").next().unwrap_or("").trim();
            if code.is_empty() {
                continue;
            }
            let (key, val) = code.split_once('=').ok_or_else(|| err(format!("expected key = value: `{code}`")))?;
            let key = key.trim().to_ascii_lowercase();
            let mut words: Vec<&str> = val.split_whitespace().collect();
            let secret = words.last() == Some(&"secret");
            if secret {
                words.pop();
            }
            let num = |w: &[&str]| -> Result<u64, ScenarioError> {
                match w {
                    [one] => parse_u64(one).ok_or_else(|| err(format!("bad number `{one}`"))),
                    _ => Err(err(format!("expected one value for `{key}`"))),
                }
            };
            let addr16 = |s: &str| -> Result<u16, ScenarioError> {
                parse_u64(s).and_then(|v| u16::try_from(v).ok()).ok_or_else(|| err(format!("bad address `{s}`")))
            };
            let flag_bit = |name: &str, table: &[(&str, u32)]| {
                table.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
            };
            if let Some(bit) = key.strip_prefix("cr4.") {
                let b = flag_bit(bit, &[("pce", CR4_PCE), ("fsgsbase", CR4_FSGSBASE), ("osxsave", CR4_OSXSAVE)])
                    .ok_or_else(|| err(format!("unknown CR4 bit `{bit}`")))?;
                sc.cr4 = set_bit(sc.cr4, b, num(&words)? != 0);
            } else if let Some(bit) = key.strip_prefix("rflags.") {
                let table = [("cf", 0), ("pf", 2), ("af", 4), ("zf", 6), ("sf", 7), ("df", RFLAGS_DF), ("of", 11)];
                let b = flag_bit(bit, &table).ok_or_else(|| err(format!("unknown RFLAGS bit `{bit}`")))?;
                sc.rflags = set_bit(sc.rflags, b, num(&words)? != 0);
            } else if let Some(a) = bracketed(&key, "creg") {
                sc.creg.push((addr16(a)?, num(&words)?, secret));
            } else if let Some(a) = bracketed(&key, "uram") {
                sc.uram.push((addr16(a)?, num(&words)?, secret));
            } else if key == "fs.base" || key == "gs.base" {
                let s = if key.starts_with("fs") { Seg::Fs } else { Seg::Gs };
                sc.seg.push((s, num(&words)?, secret));
            } else if let Some(a) = bracketed(&key, "mem64").or_else(|| bracketed(&key, "mem32")) {
                let addr = parse_u64(a).ok_or_else(|| err(format!("bad address `{a}`")))?;
                let n = if key.starts_with("mem64") { 8 } else { 4 };
                let v = num(&words)?;
                sc.mem.push(MemInit { addr, bytes: v.to_le_bytes()[..n].to_vec(), secret });
            } else if let Some(a) = bracketed(&key, "mem8") {
                let addr = parse_u64(a).ok_or_else(|| err(format!("bad address `{a}`")))?;
                let bytes = words
                    .iter()
                    .map(|w| parse_u64(w).and_then(|v| u8::try_from(v).ok()).ok_or_else(|| err(format!("bad byte `{w}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                sc.mem.push(MemInit { addr, bytes, secret });
            } else if let Some(a) = bracketed(&key, "flush") {
                let addr = parse_u64(a).ok_or_else(|| err(format!("bad address `{a}`")))?;
                sc.flush.push((addr, num(&words)?));
            } else if let Some(c) = bracketed(&key, "event") {
                let code = parse_u64(c).ok_or_else(|| err(format!("bad event code `{c}`")))?;
                sc.events.insert(code, words.join(" "));
            } else if let Some(k) = key.strip_prefix("expect.") {
                sc.expect.insert(k.to_string(), num(&words)?);
            } else if key == "mode" {
                sc.mode32 = match num(&words)? {
                    32 => true,
                    64 => false,
                    m => return Err(err(format!("unsupported mode {m}"))),
                };
            } else if key == "unauthorized" {
                sc.unauthorized = matches!(words.as_slice(), ["true"] | ["1"]);
            } else if key == "unmapped" {
                sc.unmapped = match words.as_slice() {
                    ["zero"] => UnmappedPolicy::Zero,
                    ["fault"] => UnmappedPolicy::Fault,
                    _ => return Err(err("unmapped must be zero or fault".into())),
                };
            } else if let Some(r) = Reg::parse(&key) {
                sc.regs.push((r, num(&words)?, secret));
            } else {
                return Err(err(format!("unknown key `{key}`")));
            }
        }
        Ok(sc)
    }

    pub fn set_reg(&mut self, r: Reg, v: u64, secret: bool) {
        self.regs.retain(|(x, _, _)| x.container() != r.container());
        self.regs.push((r, v, secret));
    }

    pub fn set_creg(&mut self, a: u16, v: u64, secret: bool) {
        self.creg.retain(|(x, _, _)| *x != a);
        self.creg.push((a, v, secret));
    }

    pub fn event_name(&self, code: u64) -> String {
        self.events.get(&code).cloned().unwrap_or_else(|| format!("event({code:#x})"))
    }

    /// Initial machine state with every planted value labeled.
    pub fn build_state(&self) -> MachineState {
        let mut st = MachineState { unmapped: self.unmapped, ..MachineState::default() };
        let label = |origin, secret| TaintLabel { origin, secret };
        st.creg.insert(CREG_CR4, TaintedValue::labeled(self.cr4, label(Origin::Creg(CREG_CR4), false)));
        st.creg.insert(CREG_RFLAGS, TaintedValue::labeled(self.rflags, label(Origin::Creg(CREG_RFLAGS), false)));
        for (r, v, s) in &self.regs {
            let c = r.container();
            st.regs.insert(c, TaintedValue::labeled(*v, label(Origin::Arch(c), *s)));
        }
        for (a, v, s) in &self.creg {
            st.creg.insert(*a, TaintedValue::labeled(*v, label(Origin::Creg(*a), *s)));
        }
        for (a, v, s) in &self.uram {
            st.uram.insert(*a, TaintedValue::labeled(*v, label(Origin::Uram(*a), *s)));
        }
        for (g, v, s) in &self.seg {
            st.seg.insert(*g, TaintedValue::labeled(*v, label(Origin::Seg(*g), *s)));
        }
        for m in &self.mem {
            let l = label(Origin::Mem { start: m.addr, len: m.bytes.len() as u64 }, m.secret);
            for (i, b) in m.bytes.iter().enumerate() {
                st.mem.insert(m.addr + i as u64, MemByte { value: *b, taint: [l].into() });
            }
        }
        st
    }
}

fn set_bit(v: u64, bit: u32, on: bool) -> u64 {
    if on {
        v | 1 << bit
    } else {
        v & !(1 << bit)
    }
}
