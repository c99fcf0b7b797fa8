//! Oracles and generators shared by the acceptance and property suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ubranch::corpus::{Fixture, Isa};
use ubranch::machine::{exec, Env, ExecError, MachineState, Scenario, Seg, TaintedValue};
use ubranch::pipeline::{run, run_sequential, Config, EventKind, MacroProgram, PipelineTrace, RunError};
use ubranch::uasm::assemble_text;
use ubranch::uisa::{CondCode, FlagSet, MicroOp, Reg};

// ---------------------------------------------------------------------------
// Reference ALU, written against integer arithmetic rather than the
// simulator's flag helpers.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

pub const ALU_OPS: [(AluOp, u32, &str); 14] = [
    (AluOp::Add, 32, "ADD32"),
    (AluOp::Add, 64, "ADD64"),
    (AluOp::Sub, 32, "SUB32"),
    (AluOp::Sub, 64, "SUB64"),
    (AluOp::And, 32, "AND32"),
    (AluOp::And, 64, "AND64"),
    (AluOp::Or, 32, "OR32"),
    (AluOp::Or, 64, "OR64"),
    (AluOp::Xor, 32, "XOR32"),
    (AluOp::Xor, 64, "XOR64"),
    (AluOp::Shl, 32, "SHL32"),
    (AluOp::Shl, 64, "SHL64"),
    (AluOp::Shr, 32, "SHR32"),
    (AluOp::Shr, 64, "SHR64"),
];

/// Result and flags of `op(a, b)` at `bits` width.
pub fn reference_alu(op: AluOp, bits: u32, a: u64, b: u64) -> (u64, FlagSet) {
    let m: u128 = (1u128 << bits) - 1;
    let (a, b) = (a as u128 & m, b as u128 & m);
    let signed = |v: u128| -> i128 {
        if v >> (bits - 1) & 1 == 1 {
            v as i128 - (1i128 << bits)
        } else {
            v as i128
        }
    };
    let (res, carry, overflow, aux) = match op {
        AluOp::Add => {
            let full = a + b;
            let r = full & m;
            let s = signed(a) + signed(b);
            (r, full > m, s != signed(r), ((a & 0xf) + (b & 0xf)) > 0xf)
        }
        AluOp::Sub => {
            let r = a.wrapping_sub(b) & m;
            let s = signed(a) - signed(b);
            (r, a < b, s != signed(r), (a & 0xf) < (b & 0xf))
        }
        AluOp::And => (a & b, false, false, false),
        AluOp::Or => (a | b, false, false, false),
        AluOp::Xor => (a ^ b, false, false, false),
        AluOp::Shl | AluOp::Shr => {
            let n = (b % bits as u128) as u32;
            if n == 0 {
                (a, false, false, false)
            } else if op == AluOp::Shl {
                let full = a << n;
                let r = full & m;
                let cf = (full >> bits) & 1 == 1;
                (r, cf, n == 1 && ((r >> (bits - 1)) & 1 == 1) != cf, false)
            } else {
                let r = a >> n;
                (r, (a >> (n - 1)) & 1 == 1, n == 1 && (a >> (bits - 1)) & 1 == 1, false)
            }
        }
    };
    let flags = FlagSet {
        zero: res == 0,
        carry,
        overflow,
        sign: (res >> (bits - 1)) & 1 == 1,
        parity: (res as u8).count_ones().is_multiple_of(2),
        aux,
    };
    (res as u64, flags)
}

/// Condition truth table written out per code.
pub fn reference_cond(cc: CondCode, f: FlagSet) -> bool {
    let (z, c, o, s) = (f.zero, f.carry, f.overflow, f.sign);
    match cc {
        CondCode::Z => z,
        CondCode::NZ => !z,
        CondCode::C => c,
        CondCode::NC => !c,
        CondCode::O => o,
        CondCode::NO => !o,
        CondCode::L => s ^ o,
        CondCode::GE => !(s ^ o),
        CondCode::G => !z && !(s ^ o),
        CondCode::LE => z || (s ^ o),
        CondCode::BE => c || z,
        CondCode::A => !(c || z),
    }
}

/// Every combination of the six arithmetic flags.
pub fn all_flag_sets() -> Vec<FlagSet> {
    (0..64u8)
        .map(|b| FlagSet {
            carry: b & 1 != 0,
            parity: b & 2 != 0,
            aux: b & 4 != 0,
            zero: b & 8 != 0,
            sign: b & 16 != 0,
            overflow: b & 32 != 0,
        })
        .collect()
}

/// 8-bit add of the low bytes with the immediate's high byte passed through.
pub fn reference_add8(a: u64, imm: u64) -> u64 {
    let low = ((a & 0xff) + (imm & 0xff)) % 256;
    (imm & 0xff00) | low
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
    fn read_mem(&mut self, _: u64, _: usize) -> Result<(u64, ubranch::machine::Taint), ExecError> {
        Ok((0, Default::default()))
    }
}

/// Executes one register-only uop with the given source values and returns
/// the destination value.
pub fn exec_pure(u: &MicroOp, srcs: &[(Reg, TaintedValue)]) -> TaintedValue {
    let vals = srcs.to_vec();
    let read = move |r: Reg| vals.iter().find(|(x, _)| *x == r).map(|(_, v)| v.clone()).unwrap_or_default();
    let out = exec(u, &read, &mut NoEnv).expect("pure uop executes");
    out.writes.last().map(|(_, v)| v.clone()).unwrap_or_default()
}

pub fn uop(text: &str) -> MicroOp {
    let p = assemble_text("one", &format!("one:\n  {text}\n  SEQW UEND0\n")).expect("uop parses");
    let u = p.uops().next().map(|(_, u)| u.clone()).expect("one uop");
    u
}

// ---------------------------------------------------------------------------
// Random programs over a restricted uop alphabet

pub const DATA: u64 = 0x3000;

#[derive(Clone, Debug)]
pub struct Case {
    pub source: String,
    pub stream: String,
    pub program: MacroProgram,
    pub scenario: Scenario,
    pub config: Config,
}

const DSTS: [&str; 9] = ["tmp0", "tmp1", "tmp2", "tmp3", "tmp4", "tmp5", "rax", "rbx", "rdx"];
const SRCS: [&str; 10] = ["tmp0", "tmp1", "tmp2", "tmp3", "tmp4", "tmp5", "rax", "rbx", "rcx", "rdx"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty")
}

fn random_uop(rng: &mut ChaCha8Rng, targets: &[String]) -> String {
    let d = pick(rng, &DSTS);
    let s = pick(rng, &SRCS);
    let t = pick(rng, &SRCS);
    match rng.gen_range(0..14) {
        0..=3 => {
            let op = pick(rng, &["ADD64", "SUB64", "XOR64", "AND64", "OR64", "ADD32", "SUB32"]);
            if rng.gen_bool(0.5) {
                format!("{d} = {op}({s}, {t})")
            } else {
                format!("{d} = {op}({s}, {:#x})", rng.gen_range(0..0x40u64))
            }
        }
        4 => format!("{d} = {}({s}, {})", pick(rng, &["SHL64", "SHR64"]), rng.gen_range(0..8)),
        5 | 6 => format!("{d} = LD64(rsi, {:#x})", 8 * rng.gen_range(0..16u64)),
        7 => format!("ST64({s}, rsi, {:#x})", 0x80 + 8 * rng.gen_range(0..8u64)),
        8 => format!("WRITEURAM64({s}, {:#x})", 0x40 + rng.gen_range(0..4u64)),
        9 => format!("{d} = READURAM64({:#x})", 0x40 + rng.gen_range(0..4u64)),
        10 => format!("WRCREG64({s}, {:#x})", 0x2300 + rng.gen_range(0..4u64)),
        11 => format!("{d} = RDCREG64({:#x})", 0x2300 + rng.gen_range(0..4u64)),
        _ => match targets.choose(rng) {
            Some(l) if rng.gen_bool(0.5) => {
                format!("{}({s}, {l})", pick(rng, &["UJMPZ", "UJMPNZ", "UJMPC", "UJMPO"]))
            }
            Some(l) => format!("{}({s}, {:#x}, {l})", pick(rng, &["CMP_UJMPZ", "CMP_UJMPNZ", "CMP_UJMPL"]), rng.gen_range(0..4u64)),
            None => format!("{d} = ADD64({s}, 0)"),
        },
    }
}

/// Builds a random microprogram `rnd`, a macro stream invoking it and an
/// initial state. Branches only jump forward, so every program terminates.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = rng.gen_range(1..=4);
    let with_fault = rng.gen_bool(0.3);
    let mut src = String::from("rnd:\n");
    for b in 0..blocks {
        if b > 0 {
            src.push_str(&format!(".b{b}:\n"));
        }
        let mut targets: Vec<String> = (b + 1..blocks).map(|j| format!(".b{j}")).collect();
        if with_fault {
            targets.push(".fault".into());
        }
        for _ in 0..rng.gen_range(1..=6) {
            src.push_str(&format!("  {}\n", random_uop(&mut rng, &targets)));
        }
        if b + 1 < blocks && rng.gen_bool(0.15) {
            src.push_str(&format!("  UJMP(.b{})\n", rng.gen_range(b + 1..blocks)));
        }
    }
    src.push_str("  SEQW UEND0\n");
    if with_fault {
        src.push_str(".fault:\n  SIGEVENT(0x19)\n  SEQW UEND0\n");
    }
    let program = assemble_text("rnd", &src).expect("generated program assembles");

    let mut ops = Vec::new();
    if rng.gen_bool(0.5) {
        ops.push(format!("mov rcx, [{:#x}]", DATA + 8 * rng.gen_range(0..16u64)));
    }
    ops.push("rnd".to_string());
    for _ in 0..rng.gen_range(0..12) {
        ops.push(match rng.gen_range(0..4) {
            0 => format!("mov rax, {}", rng.gen_range(0..100)),
            1 => "add rbx, rax".to_string(),
            2 => format!("mov rdx, [{:#x}]", DATA + 8 * rng.gen_range(0..16u64)),
            _ => "nop".to_string(),
        });
    }
    let stream = ops.join("; ");
    let mut isa = Isa::from_corpus().expect("corpus loads");
    isa.insert("rnd", program, vec![]);
    let prog = isa.assemble(&stream).expect("stream assembles");

    let mut sc = String::new();
    sc.push_str(&format!("rsi = {DATA:#x}\n"));
    for r in ["rax", "rbx", "rcx", "rdx"] {
        sc.push_str(&format!("{r} = {}\n", rng.gen_range(0..4u64)));
    }
    for k in 0..32u64 {
        sc.push_str(&format!("mem64[{:#x}] = {}\n", DATA + 8 * k, rng.gen_range(0..4u64)));
    }
    for k in 0..4u64 {
        if rng.gen_bool(0.5) {
            sc.push_str(&format!("flush[{:#x}] = 64\n", DATA + 64 * k));
        }
    }
    let scenario = Scenario::parse(&sc).expect("generated scenario parses");
    let config = Config {
        rob_size: *[8usize, 16, 32, 64].choose(&mut rng).expect("non-empty"),
        detect_delay: rng.gen_range(0..3),
        trace: true,
        ..Config::default()
    };
    Case { source: src, stream, program: prog, scenario, config }
}

/// Architectural view: non-temporary registers, memory, pending event.
pub fn arch_view(st: &MachineState) -> ArchView {
    let (regs, mem, ev) = st.arch_snapshot();
    (regs.into_iter().filter(|(r, _)| r.is_architectural()).collect(), mem, ev)
}

/// Checks the pipeline properties of one case against its trace.
pub fn check_pipeline(case: &Case) -> Result<PipelineTrace, String> {
    let trace = run(&case.program, &case.scenario, &case.config).map_err(|e| format!("pipeline: {e}"))?;
    check_trace(case, &trace)?;
    Ok(trace)
}

pub fn check_trace(case: &Case, trace: &PipelineTrace) -> Result<(), String> {
    // In-order retirement.
    let retired: Vec<u64> = trace.events.iter().filter(|e| e.kind == EventKind::Retire).map(|e| e.seq).collect();
    if retired.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("retirement out of order: {retired:?}"));
    }
    // Every squash follows, in the same cycle, the retirement of the uop
    // that redirected or faulted, and only younger uops are squashed.
    let mut last_retire: Option<(u64, u64, String)> = None;
    for e in &trace.events {
        match e.kind {
            EventKind::Retire => last_retire = Some((e.cycle, e.seq, e.uop.clone())),
            EventKind::Squash => {
                let Some((c, s, u)) = &last_retire else {
                    return Err(format!("squash of seq {} before any retire", e.seq));
                };
                let is_trigger = u.contains("UJMP") || u.contains("SIGEVENT");
                if *c != e.cycle || *s >= e.seq || !is_trigger {
                    return Err(format!("squash of seq {} at cycle {} not preceded by its trigger ({u} @ {c})", e.seq, e.cycle));
                }
            }
            _ => {}
        }
    }
    // Sequential equivalence.
    let seq = run_sequential(&case.program, case.scenario.build_state(), 100_000).map_err(|e| format!("sequential: {e}"))?;
    if arch_view(&trace.state) != arch_view(&seq.state) || trace.fault != seq.fault {
        return Err(format!(
            "architectural state differs from sequential run\n pipe: {:?} fault {:?}\n seq:  {:?} fault {:?}",
            arch_view(&trace.state),
            trace.fault,
            arch_view(&seq.state),
            seq.fault
        ));
    }
    let side = |pipe: &BTreeMap<u16, TaintedValue>, seq: &BTreeMap<u16, TaintedValue>, transient: &[u16], what: &str| {
        let keys: std::collections::BTreeSet<u16> = pipe.keys().chain(seq.keys()).copied().collect();
        for k in keys {
            let (a, b) = (pipe.get(&k).map(|v| v.data), seq.get(&k).map(|v| v.data));
            if a.unwrap_or(0) != b.unwrap_or(0) && !transient.contains(&k) {
                return Err(format!("{what}[{k:#x}] differs: {a:?} vs {b:?}"));
            }
        }
        Ok(())
    };
    side(&trace.state.creg, &seq.state.creg, &trace.transient_creg_writes, "creg")?;
    side(&trace.state.uram, &seq.state.uram, &trace.transient_uram_writes, "uram")?;
    // Transient window bounded by the ROB.
    if trace.counters.transient_macro_ops > case.config.rob_size as u64 || trace.counters.peak_rob > case.config.rob_size {
        return Err(format!(
            "window exceeds ROB: {} transient macro-ops, peak {} > {}",
            trace.counters.transient_macro_ops, trace.counters.peak_rob, case.config.rob_size
        ));
    }
    Ok(())
}

/// A branch on a load that misses for a very long time, followed by a long
/// run of one-uop macro-ops. Returns (peak ROB, transient macro-ops).
pub fn max_latency_window(rob: usize) -> Result<(usize, u64), RunError> {
    let src = "slow:\n  tmp0 = LD64(rsi, 0)\n  UJMPNZ(tmp0, .out)\n  NOP\n.out:\n  SEQW UEND0\n";
    let mut isa = Isa::from_corpus().expect("corpus loads");
    isa.insert("slow", assemble_text("slow", src).expect("assembles"), vec![]);
    let stream = std::iter::once("slow").chain(std::iter::repeat_n("nop", 4 * rob + 16)).collect::<Vec<_>>().join("; ");
    let prog = isa.assemble(&stream).expect("stream assembles");
    let sc = Scenario::parse(&format!("rsi = {DATA:#x}\nmem64[{DATA:#x}] = 1\nflush[{DATA:#x}] = 8\n")).expect("parses");
    let cfg = Config { rob_size: rob, load_miss: 2_000, ..Config::default() };
    let t = run(&prog, &sc, &cfg)?;
    Ok((t.counters.peak_rob, t.counters.transient_macro_ops))
}

// ---------------------------------------------------------------------------
// Input grids for preservation checks

/// Scenario variants of a fixture: the registers and flags its microprogram
/// reads, swept over small and boundary values. Pointers stay fixed.
pub fn input_grid(fx: &Fixture, n: usize, seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = [0u64, 1, 2, 7, 13, 0x40, 0xff, 0x8000_0000, u64::MAX];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sc = fx.scenario.clone();
        let val = |rng: &mut ChaCha8Rng, small: bool| -> u64 {
            match rng.gen_range(0..3) {
                0 => edges[(i + rng.gen_range(0..edges.len())) % edges.len()],
                1 if small => rng.gen_range(0..32),
                _ => rng.gen(),
            }
        };
        sc.set_reg(Reg::RAX, val(&mut rng, false), false);
        sc.set_reg(Reg::RDX, val(&mut rng, false), false);
        if fx.name == "scasb" {
            sc.set_reg(Reg::RCX, rng.gen_range(0..12), false);
            sc.set_reg(Reg::RAX, *[0x61u64, 0x63, 0x21, 0xff].choose(&mut rng).expect("non-empty"), false);
        } else {
            sc.set_reg(Reg::RCX, val(&mut rng, true), false);
        }
        sc.set_reg(Reg::RBX, val(&mut rng, false), false);
        sc.rflags = (rng.gen::<u64>() & 0xcd5) | 0x2;
        sc.cr4 ^= rng.gen::<u64>() & ((1 << 8) | (1 << 16) | (1 << 18));
        out.push(sc);
    }
    out
}

pub type ArchView = (BTreeMap<Reg, u64>, BTreeMap<u64, u8>, Option<u64>);
pub type SeqOutcome = (ArchView, BTreeMap<u16, u64>, Option<u64>);

/// Sequential outcome of a stream, comparable across microprogram versions.
pub fn seq_outcome(prog: &MacroProgram, sc: &Scenario) -> Result<SeqOutcome, RunError> {
    let r = run_sequential(prog, sc.build_state(), 200_000)?;
    let creg = r.state.creg.iter().map(|(a, v)| (*a, v.data)).collect();
    Ok((arch_view(&r.state), creg, r.fault))
}
