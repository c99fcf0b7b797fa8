//! Microsequencer and out-of-order core model.
//!
//! Each cycle runs retire, execute, issue and fetch in that order. Fetch
//! delivers one triad per cycle from the MSROM, or up to `mite_width`
//! simple macro-ops per cycle from the legacy decoder, into a small queue of
//! fetch groups. Issue moves at most one fetch group per cycle into the ROB,
//! and only groups fetched in an earlier cycle. Micro-op branches are
//! predicted statically at fetch. A misprediction is detected when the
//! branch finishes executing (plus `detect_delay`); from then on nothing new
//! issues. Squash and redirect happen only when the branch retires.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::channel::Cache;
use crate::machine::{
    bind_uop, exec, latency_class, Bindings, Env, ExecError, LatencyClass, MachineState, Outcome, Seg, Taint,
    TaintedValue,
};
use crate::uisa::{
    triad_position, BranchKind, MicroOp, Microprogram, Opcode, Operand, Reg, SeqDirective, Slot, Sym, Target,
    TriadPosition, UAddr,
};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    pub rob_size: usize,
    pub detect_delay: u64,
    pub alu_latency: u64,
    pub creg_latency: u64,
    pub uram_latency: u64,
    pub seg_latency: u64,
    pub load_hit: u64,
    pub load_miss: u64,
    pub cycle_limit: u64,
    pub mite_width: usize,
    pub fetch_queue: usize,
    pub retire_width: usize,
    pub line_size: u64,
    /// Record the per-cycle event log.
    pub trace: bool,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            rob_size: 64,
            detect_delay: 0,
            alu_latency: 1,
            creg_latency: 4,
            uram_latency: 4,
            seg_latency: 1,
            load_hit: 4,
            load_miss: 40,
            cycle_limit: 100_000,
            mite_width: 4,
            fetch_queue: 2,
            retire_width: 4,
            line_size: 64,
            trace: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl Config {
    /// Parses `key = value` lines over the defaults. `//` starts a comment.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let code = raw.split("//").next().unwrap_or("").trim();
            if code.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line, msg };
            let (k, v) = code.split_once('=').ok_or_else(|| err(format!("expected key = value: `{code}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "trace" {
                c.trace = matches!(v, "true" | "1");
                continue;
            }
            let n: u64 = v.parse().map_err(|_| err(format!("bad number `{v}`")))?;
            match k {
                "rob_size" => c.rob_size = n as usize,
                "detect_delay" => c.detect_delay = n,
                "alu_latency" => c.alu_latency = n,
                "creg_latency" => c.creg_latency = n,
                "uram_latency" => c.uram_latency = n,
                "seg_latency" => c.seg_latency = n,
                "load_hit" => c.load_hit = n,
                "load_miss" => c.load_miss = n,
                "cycle_limit" => c.cycle_limit = n,
                "mite_width" => c.mite_width = n as usize,
                "fetch_queue" => c.fetch_queue = n as usize,
                "retire_width" => c.retire_width = n as usize,
                "line_size" => c.line_size = n,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        if c.rob_size == 0 || c.fetch_queue == 0 || c.retire_width == 0 || c.mite_width == 0 || c.line_size == 0 {
            return Err(ConfigError { line: 0, msg: "sizes and widths must be nonzero".into() });
        }
        Ok(c)
    }

    pub fn render(&self) -> String {
        format!(
            "rob_size = {}\ndetect_delay = {}\nalu_latency = {}\ncreg_latency = {}\nuram_latency = {}\n\
             seg_latency = {}\nload_hit = {}\nload_miss = {}\ncycle_limit = {}\nmite_width = {}\n\
             fetch_queue = {}\nretire_width = {}\nline_size = {}\n",
            self.rob_size,
            self.detect_delay,
            self.alu_latency,
            self.creg_latency,
            self.uram_latency,
            self.seg_latency,
            self.load_hit,
            self.load_miss,
            self.cycle_limit,
            self.mite_width,
            self.fetch_queue,
            self.retire_width,
            self.line_size
        )
    }

    fn fixed_latency(&self, c: LatencyClass) -> u64 {
        match c {
            LatencyClass::Alu => self.alu_latency,
            LatencyClass::Creg => self.creg_latency,
            LatencyClass::Uram => self.uram_latency,
            LatencyClass::Seg => self.seg_latency,
            LatencyClass::Load => self.load_hit,
        }
    }
}

// ---------------------------------------------------------------------------
// Prediction

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictKind {
    NotTaken,
    Taken,
    Stall,
}

/// Static prediction per (branch kind, last-in-triad).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionPolicy {
    pub cells: [(BranchKind, PredictKind, PredictKind); 4],
}

impl Default for PredictionPolicy {
    fn default() -> Self {
        use PredictKind::*;
        PredictionPolicy {
            cells: [
                (BranchKind::CondDirect, NotTaken, NotTaken),
                (BranchKind::UncondDirect, NotTaken, Taken),
                (BranchKind::CondIndirect, NotTaken, NotTaken),
                (BranchKind::UncondIndirect, NotTaken, Stall),
            ],
        }
    }
}

impl PredictionPolicy {
    pub fn cell(&self, kind: BranchKind, pos: TriadPosition) -> PredictKind {
        let (_, early, last) = self.cells.iter().find(|(k, _, _)| *k == kind).copied().expect("all kinds present");
        if pos == TriadPosition::Last {
            last
        } else {
            early
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    NotTaken,
    Taken(Target),
    Stall,
}

pub fn predict(branch: &MicroOp, pos: TriadPosition, policy: &PredictionPolicy) -> Option<Prediction> {
    let kind = branch.branch_kind()?;
    Some(match policy.cell(kind, pos) {
        PredictKind::NotTaken => Prediction::NotTaken,
        PredictKind::Taken => Prediction::Taken(branch.target.clone()?),
        PredictKind::Stall => Prediction::Stall,
    })
}

// ---------------------------------------------------------------------------
// Macro-op stream

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MacroBody {
    /// Decoded directly into at most three uops.
    Mite(Vec<MicroOp>),
    /// Microcoded: index into [`MacroProgram::programs`] plus operand bindings.
    Msrom { program: usize, bindings: Bindings },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroOp {
    pub text: String,
    pub body: MacroBody,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MacroError {
    #[error("`{0}` decodes to more than three uops")]
    TooManyUops(String),
}

impl MacroOp {
    pub fn mite(text: &str, uops: Vec<MicroOp>) -> Result<MacroOp, MacroError> {
        if uops.len() > 3 {
            return Err(MacroError::TooManyUops(text.to_string()));
        }
        Ok(MacroOp { text: text.to_string(), body: MacroBody::Mite(uops) })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacroProgram {
    pub programs: Vec<Microprogram>,
    pub ops: Vec<MacroOp>,
}

impl MacroProgram {
    pub fn add_program(&mut self, p: Microprogram) -> usize {
        if let Some(i) = self.programs.iter().position(|q| *q == p) {
            return i;
        }
        self.programs.push(p);
        self.programs.len() - 1
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RunError {
    #[error("cycle limit exceeded after {0} cycles")]
    CycleLimitExceeded(u64),
    #[error("micro-pc {upc:#x} is outside microprogram `{program}`")]
    UpcOutOfProgram { program: String, upc: UAddr },
    #[error("retired uop failed: {0}")]
    Exec(#[from] ExecError),
    #[error("indirect branch target does not fit a micro-address")]
    BadIndirectTarget,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PerfCounters {
    pub uops_issued: u64,
    pub uops_retired: u64,
    pub uops_squashed: u64,
    pub ms_uops: u64,
    pub macro_ops_retired: u64,
    pub transient_macro_ops: u64,
    pub mispredictions: u64,
    pub cycles: u64,
    pub peak_rob: usize,
}

impl PerfCounters {
    pub fn transient_uops(&self) -> u64 {
        self.uops_issued - self.uops_retired
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacroCounters {
    pub issued: u64,
    pub retired: u64,
    pub squashed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Fetch,
    Issue,
    Execute,
    Detect,
    Retire,
    Squash,
    Redirect,
    Fault,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Fetch => "fetch",
            EventKind::Issue => "issue",
            EventKind::Execute => "execute",
            EventKind::Detect => "detect",
            EventKind::Retire => "retire",
            EventKind::Squash => "squash",
            EventKind::Redirect => "redirect",
            EventKind::Fault => "fault",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub kind: EventKind,
    /// ROB sequence number, or the fetch id for fetch events.
    pub seq: u64,
    pub macro_idx: usize,
    pub upc: Option<UAddr>,
    pub uop: String,
}

/// A cache-modulating memory access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Touch {
    pub cycle: u64,
    pub seq: u64,
    pub macro_idx: usize,
    pub uop: String,
    pub addr: u64,
    pub is_store: bool,
    pub addr_taint: Taint,
    /// Predicate taint of older branches this access was control-dependent on.
    pub control_taint: Taint,
    pub transient: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub events: Vec<TraceEvent>,
    pub counters: PerfCounters,
    pub per_macro: Vec<MacroCounters>,
    pub touches: Vec<Touch>,
    pub state: MachineState,
    pub cache: Cache,
    /// Event raised at retirement, if any.
    pub fault: Option<u64>,
    /// Creg and uram addresses written by uops that were later squashed.
    pub transient_creg_writes: Vec<u16>,
    pub transient_uram_writes: Vec<u16>,
}

impl PipelineTrace {
    /// Line-oriented event log: `cycle=N event=K seq=S macro=M upc=U uop="..."`.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let upc = e.upc.map(|u| format!("{u:#06x}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "cycle={} event={} seq={} macro={} upc={} uop=\"{}\"",
                e.cycle,
                e.kind.name(),
                e.seq,
                e.macro_idx,
                upc,
                e.uop
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Simulator internals

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Barrier {
    SyncFull,
    SyncWait,
    LfnceWait,
}

#[derive(Clone, Debug)]
struct Fetched {
    fid: u64,
    uop: MicroOp,
    macro_idx: usize,
    upc: Option<UAddr>,
    msrom: bool,
    /// Predicted direction; `None` for non-branches.
    pred: Option<PredictKind>,
    ends_macro: bool,
}

#[derive(Clone, Debug)]
enum Item {
    Uop(Fetched),
    Mark { sync: bool, lfnce: bool },
    Barrier(Barrier),
}

struct Group {
    cycle: u64,
    items: VecDeque<Item>,
}

struct Entry {
    seq: u64,
    f: Fetched,
    /// Producer sequence number per read register.
    producers: Vec<(Reg, Option<u64>)>,
    start: Option<u64>,
    done: Option<u64>,
    out: Option<Result<Outcome, ExecError>>,
    pred_taint: Taint,
    mispredicted: bool,
    detect: Option<u64>,
}

impl Entry {
    fn is_creg(&self) -> bool {
        self.f.uop.op.touches_creg()
    }
    fn is_uram(&self) -> bool {
        self.f.uop.op.touches_uram()
    }
    fn done_by(&self, t: u64) -> bool {
        self.done.is_some_and(|d| d <= t)
    }
}

struct FetchPc {
    macro_idx: usize,
    upc: Option<UAddr>,
}

struct Sim<'a> {
    prog: &'a MacroProgram,
    cfg: &'a Config,
    policy: PredictionPolicy,
    st: MachineState,
    cache: Cache,
    t: u64,
    fetch: FetchPc,
    fetch_stall: bool,
    next_fid: u64,
    last_fid: Option<u64>,
    queue: VecDeque<Group>,
    rob: VecDeque<Entry>,
    next_seq: u64,
    rename: HashMap<Reg, u64>,
    sync_mark: u64,
    lfnce_mark: u64,
    halted: bool,
    fault: Option<u64>,
    counters: PerfCounters,
    per_macro: Vec<MacroCounters>,
    squashed_macros: std::collections::BTreeSet<usize>,
    events: Vec<TraceEvent>,
    touches: Vec<Touch>,
    squashed_seqs: std::collections::HashSet<u64>,
    transient_creg: Vec<u16>,
    transient_uram: Vec<u16>,
}

impl<'a> Sim<'a> {
    fn log(&mut self, kind: EventKind, seq: u64, f: &Fetched) {
        if self.cfg.trace {
            let uop = f.uop.to_string();
            self.events.push(TraceEvent { cycle: self.t, kind, seq, macro_idx: f.macro_idx, upc: f.upc, uop });
        }
    }

    fn idx(&self, seq: u64) -> Option<usize> {
        let head = self.rob.front()?.seq;
        let i = seq.checked_sub(head)? as usize;
        (i < self.rob.len()).then_some(i)
    }

    fn reg_value(&self, e: &Entry, r: Reg) -> TaintedValue {
        let p = e.producers.iter().find(|(x, _)| *x == r).and_then(|(_, p)| *p);
        if let Some(i) = p.and_then(|p| self.idx(p)) {
            if let Some(Ok(out)) = &self.rob[i].out {
                if let Some((_, v)) = out.writes.iter().rev().find(|(x, _)| *x == r) {
                    return v.clone();
                }
            }
        }
        self.st.reg(r)
    }

    // -- retire -------------------------------------------------------------

    fn retire(&mut self) -> Result<(), RunError> {
        for _ in 0..self.cfg.retire_width {
            let Some(head) = self.rob.front() else { break };
            if !head.done_by(self.t) {
                break;
            }
            if head.mispredicted && head.detect.is_some_and(|d| d > self.t) {
                break;
            }
            let e = self.rob.pop_front().expect("head exists");
            let out = match e.out.clone().expect("done implies executed") {
                Ok(o) => o,
                Err(err) => return Err(RunError::Exec(err)),
            };
            for (r, v) in &out.writes {
                self.st.set_reg(*r, v.clone());
                if self.rename.get(r) == Some(&e.seq) {
                    self.rename.remove(r);
                }
            }
            if let Some(s) = &out.store {
                self.st.write_mem(s.addr, s.size, s.value.data, &s.value.taint);
            }
            self.counters.uops_retired += 1;
            self.per_macro[e.f.macro_idx].retired += 1;
            self.log(EventKind::Retire, e.seq, &e.f);

            if let Some(code) = out.event {
                self.st.pending_event = Some(code);
                self.fault = Some(code);
                self.log(EventKind::Fault, e.seq, &e.f);
                self.squash_all();
                self.halted = true;
                return Ok(());
            }
            if e.f.ends_macro {
                self.counters.macro_ops_retired += 1;
            }
            let stall = e.f.pred == Some(PredictKind::Stall);
            if e.mispredicted || stall {
                let target = out.branch.and_then(|b| b.target).ok_or(RunError::BadIndirectTarget)?;
                self.squash_all();
                self.queue.clear();
                self.fetch = FetchPc { macro_idx: e.f.macro_idx, upc: Some(target) };
                self.fetch_stall = false;
                self.last_fid = None;
                self.log(EventKind::Redirect, e.seq, &e.f);
                break;
            }
        }
        Ok(())
    }

    fn squash_all(&mut self) {
        while let Some(e) = self.rob.pop_back() {
            self.counters.uops_squashed += 1;
            self.per_macro[e.f.macro_idx].squashed += 1;
            self.squashed_macros.insert(e.f.macro_idx);
            self.squashed_seqs.insert(e.seq);
            if let Some(Ok(out)) = &e.out {
                self.transient_creg.extend(out.creg_write);
                self.transient_uram.extend(out.uram_write);
            }
            self.log(EventKind::Squash, e.seq, &e.f);
        }
        self.rename.clear();
        self.queue.clear();
    }

    // -- execute ------------------------------------------------------------

    fn ready(&self, i: usize) -> bool {
        let e = &self.rob[i];
        for (_, p) in &e.producers {
            if let Some(j) = p.and_then(|p| self.idx(p)) {
                if !self.rob[j].done_by(self.t) {
                    return false;
                }
            }
        }
        let op = e.f.uop.op;
        for older in self.rob.iter().take(i) {
            if older.start.is_some() {
                continue;
            }
            if (e.is_creg() && older.is_creg())
                || (e.is_uram() && older.is_uram())
                || (op.is_load() && older.f.uop.op.is_store())
            {
                return false;
            }
        }
        true
    }

    fn execute(&mut self) {
        for i in 0..self.rob.len() {
            if self.rob[i].start.is_some() || !self.ready(i) {
                continue;
            }
            self.start(i);
        }
    }

    fn start(&mut self, i: usize) {
        let t = self.t;
        let e = &self.rob[i];
        let uop = e.f.uop.clone();
        let vals: Vec<(Reg, TaintedValue)> = e
            .producers
            .iter()
            .map(|(r, _)| (*r, self.reg_value(e, *r)))
            .collect();
        let arch = self.st.regs.clone();
        let read = move |r: Reg| {
            vals.iter()
                .find(|(x, _)| *x == r)
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| arch.get(&r).cloned().unwrap_or_default())
        };
        // Older unretired stores that have executed, oldest first.
        let stores: Vec<(u64, usize, u64, Taint)> = self
            .rob
            .iter()
            .take(i)
            .filter_map(|o| match &o.out {
                Some(Ok(out)) => out.store.as_ref().map(|s| (s.addr, s.size, s.value.data, s.value.taint.clone())),
                _ => None,
            })
            .collect();
        let mut env = PipeEnv { st: &mut self.st, stores };
        let res = exec(&uop, &read, &mut env);
        let pred_taint = if uop.is_cond_branch() {
            uop.srcs.iter().filter_map(Operand::reg).flat_map(|r| read(r.container()).taint).collect()
        } else {
            Taint::new()
        };

        let mut latency = self.cfg.fixed_latency(latency_class(uop.op));
        let mut mispredicted = false;
        if let Ok(out) = &res {
            if let Some(acc) = &out.access {
                let lat = self.cache.access(acc.addr, t);
                if uop.op.is_load() {
                    latency = lat;
                }
                let control_taint = self.control_taint(i);
                self.touches.push(Touch {
                    cycle: t,
                    seq: self.rob[i].seq,
                    macro_idx: self.rob[i].f.macro_idx,
                    uop: uop.to_string(),
                    addr: acc.addr,
                    is_store: acc.is_store,
                    addr_taint: acc.addr_taint.clone(),
                    control_taint,
                    transient: false,
                });
            }
            if let (Some(b), Some(p)) = (out.branch, self.rob[i].f.pred) {
                mispredicted = match p {
                    PredictKind::NotTaken => b.taken,
                    PredictKind::Taken => !b.taken,
                    PredictKind::Stall => false,
                };
            }
        }
        let e = &mut self.rob[i];
        e.start = Some(t);
        e.done = Some(t + latency.max(1));
        e.out = Some(res);
        e.pred_taint = pred_taint;
        if mispredicted {
            e.mispredicted = true;
            e.detect = Some(t + latency.max(1) + self.cfg.detect_delay);
            self.counters.mispredictions += 1;
        }
        let (seq, f) = (self.rob[i].seq, self.rob[i].f.clone());
        self.log(EventKind::Execute, seq, &f);
        if mispredicted {
            self.log(EventKind::Detect, seq, &f);
        }
    }

    /// Union of predicate taints of older unresolved or mispredicted
    /// conditional branches.
    fn control_taint(&self, i: usize) -> Taint {
        let mut out = Taint::new();
        let mut memo = HashMap::new();
        for j in 0..i {
            let b = &self.rob[j];
            if !b.f.uop.is_cond_branch() {
                continue;
            }
            if b.start.is_some() {
                if b.mispredicted || !b.done_by(self.t) {
                    out.extend(b.pred_taint.iter().copied());
                }
            } else {
                for r in b.f.uop.srcs.iter().filter_map(Operand::reg) {
                    out.extend(self.pending_reg_taint(b, r.container(), &mut memo));
                }
            }
        }
        out
    }

    fn pending_reg_taint(&self, e: &Entry, r: Reg, memo: &mut HashMap<(u64, Reg), Taint>) -> Taint {
        let p = e.producers.iter().find(|(x, _)| *x == r).and_then(|(_, p)| *p);
        let Some(j) = p.and_then(|p| self.idx(p)) else {
            return self.st.reg(r).taint;
        };
        let pe = &self.rob[j];
        if pe.start.is_some() {
            return self.reg_value(e, r).taint;
        }
        if let Some(t) = memo.get(&(pe.seq, r)) {
            return t.clone();
        }
        let mut t = Taint::new();
        for s in pe.f.uop.srcs.iter().filter_map(Operand::reg) {
            t.extend(self.pending_reg_taint(pe, s.container(), memo));
        }
        let konst = |o: Option<&Operand>| match o {
            Some(Operand::Imm(v)) => Some(*v as u16),
            Some(Operand::Sym(s)) => s.creg(),
            _ => None,
        };
        match pe.f.uop.op {
            Opcode::RdCreg64 => {
                if let Some(a) = konst(pe.f.uop.srcs.first()) {
                    t.extend(self.st.creg.get(&a).map(|v| v.taint.clone()).unwrap_or_default());
                }
            }
            Opcode::ReadUram64 => {
                if let Some(a) = konst(pe.f.uop.srcs.first()) {
                    t.extend(self.st.uram.get(&a).map(|v| v.taint.clone()).unwrap_or_default());
                }
            }
            Opcode::RdSeg => {
                let s = match pe.f.uop.srcs.first() {
                    Some(Operand::Sym(Sym::Gs)) => Seg::Gs,
                    _ => Seg::Fs,
                };
                t.extend(self.st.seg.get(&s).map(|v| v.taint.clone()).unwrap_or_default());
            }
            _ => {}
        }
        memo.insert((pe.seq, r), t.clone());
        t
    }

    // -- issue --------------------------------------------------------------

    fn issue_blocked(&self) -> bool {
        self.rob.iter().any(|e| {
            (e.mispredicted && e.detect.is_some_and(|d| d <= self.t)) || e.f.uop.op == Opcode::LFence
        })
    }

    fn barrier_ok(&self, b: Barrier) -> bool {
        let executed = |e: &Entry| e.done_by(self.t);
        match b {
            Barrier::SyncFull => self.rob.iter().all(executed),
            Barrier::SyncWait => self.rob.iter().filter(|e| e.seq < self.sync_mark).all(executed),
            Barrier::LfnceWait => self
                .rob
                .iter()
                .filter(|e| e.seq < self.lfnce_mark)
                .filter(|e| e.f.uop.op.is_load() || matches!(e.f.uop.op, Opcode::RdCreg64 | Opcode::ReadUram64))
                .all(executed),
        }
    }

    fn issue(&mut self) {
        let Some(g) = self.queue.front() else { return };
        if g.cycle >= self.t {
            return;
        }
        while let Some(item) = self.queue.front().and_then(|g| g.items.front()).cloned() {
            match item {
                Item::Mark { sync, lfnce } => {
                    if sync {
                        self.sync_mark = self.next_seq;
                    }
                    if lfnce {
                        self.lfnce_mark = self.next_seq;
                    }
                }
                Item::Barrier(b) => {
                    if !self.barrier_ok(b) {
                        return;
                    }
                }
                Item::Uop(f) => {
                    if self.issue_blocked() || self.rob.len() >= self.cfg.rob_size {
                        return;
                    }
                    self.allocate(f);
                }
            }
            let g = self.queue.front_mut().expect("front exists");
            g.items.pop_front();
            if g.items.is_empty() {
                self.queue.pop_front();
                return;
            }
        }
    }

    fn allocate(&mut self, f: Fetched) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let mut producers: Vec<(Reg, Option<u64>)> = Vec::new();
        for r in f.uop.read_regs().into_iter().map(Reg::container) {
            if !producers.iter().any(|(x, _)| *x == r) {
                producers.push((r, self.rename.get(&r).copied()));
            }
        }
        for r in f.uop.written_regs() {
            self.rename.insert(r.container(), seq);
        }
        self.counters.uops_issued += 1;
        if f.msrom {
            self.counters.ms_uops += 1;
        }
        self.per_macro[f.macro_idx].issued += 1;
        self.log(EventKind::Issue, seq, &f);
        self.rob.push_back(Entry {
            seq,
            f,
            producers,
            start: None,
            done: None,
            out: None,
            pred_taint: Taint::new(),
            mispredicted: false,
            detect: None,
        });
        self.counters.peak_rob = self.counters.peak_rob.max(self.rob.len());
    }

    // -- fetch --------------------------------------------------------------

    fn fetch_done(&self) -> bool {
        self.fetch.macro_idx >= self.prog.ops.len()
    }

    fn new_fetched(&mut self, uop: MicroOp, upc: Option<UAddr>, msrom: bool, pred: Option<PredictKind>) -> Fetched {
        let fid = self.next_fid;
        self.next_fid += 1;
        self.last_fid = Some(fid);
        Fetched { fid, uop, macro_idx: self.fetch.macro_idx, upc, msrom, pred, ends_macro: false }
    }

    fn mark_macro_end(&mut self, fid: u64) {
        for g in self.queue.iter_mut() {
            for it in g.items.iter_mut() {
                if let Item::Uop(f) = it {
                    if f.fid == fid {
                        f.ends_macro = true;
                        return;
                    }
                }
            }
        }
        for e in self.rob.iter_mut() {
            if e.f.fid == fid {
                e.f.ends_macro = true;
                return;
            }
        }
    }

    fn fetch(&mut self) -> Result<(), RunError> {
        if self.halted || self.fetch_stall || self.fetch_done() || self.queue.len() >= self.cfg.fetch_queue {
            return Ok(());
        }
        let mut items = VecDeque::new();
        match &self.prog.ops[self.fetch.macro_idx].body {
            MacroBody::Mite(_) => {
                let mut n = 0;
                while n < self.cfg.mite_width && !self.fetch_done() {
                    let MacroBody::Mite(uops) = &self.prog.ops[self.fetch.macro_idx].body else { break };
                    let uops = uops.clone();
                    let count = uops.len();
                    for (k, u) in uops.into_iter().enumerate() {
                        let mut f = self.new_fetched(u, None, false, None);
                        f.ends_macro = k + 1 == count;
                        self.log(EventKind::Fetch, f.fid, &f);
                        items.push_back(Item::Uop(f));
                    }
                    self.fetch.macro_idx += 1;
                    self.last_fid = None;
                    n += 1;
                }
            }
            MacroBody::Msrom { program, bindings } => {
                let p = &self.prog.programs[*program];
                let bindings = bindings.clone();
                let upc = match self.fetch.upc {
                    Some(u) => u,
                    None => {
                        items.push_back(Item::Mark { sync: true, lfnce: true });
                        self.last_fid = None;
                        p.entry
                    }
                };
                let ti = upc as usize / 3;
                let triad = p
                    .triads
                    .get(ti)
                    .ok_or_else(|| RunError::UpcOutOfProgram { program: p.name.clone(), upc })?
                    .clone();
                let mut next: Option<UAddr> = None;
                let mut redirected = false;
                for pos in (upc as usize % 3)..3 {
                    let Slot::Op(u) = &triad.slots[pos] else { continue };
                    let addr = (ti * 3 + pos) as UAddr;
                    let u = bind_uop(u, &bindings)?;
                    let pred = predict(&u, triad_position(addr), &self.policy);
                    let kind = pred.as_ref().map(|p| match p {
                        Prediction::NotTaken => PredictKind::NotTaken,
                        Prediction::Taken(_) => PredictKind::Taken,
                        Prediction::Stall => PredictKind::Stall,
                    });
                    let f = self.new_fetched(u, Some(addr), true, kind);
                    self.log(EventKind::Fetch, f.fid, &f);
                    items.push_back(Item::Uop(f));
                    match pred {
                        Some(Prediction::Taken(Target::Direct(a))) => {
                            next = Some(a);
                            redirected = true;
                            break;
                        }
                        Some(Prediction::Stall) | Some(Prediction::Taken(Target::Indirect(_))) => {
                            self.fetch_stall = true;
                            redirected = true;
                            break;
                        }
                        _ => {}
                    }
                }
                let mut ends = false;
                match triad.seqw {
                    SeqDirective::SyncFull => items.push_back(Item::Barrier(Barrier::SyncFull)),
                    SeqDirective::SyncWait => items.push_back(Item::Barrier(Barrier::SyncWait)),
                    SeqDirective::LfnceWait => items.push_back(Item::Barrier(Barrier::LfnceWait)),
                    SeqDirective::SyncMark => items.push_back(Item::Mark { sync: true, lfnce: false }),
                    SeqDirective::LfnceMark => items.push_back(Item::Mark { sync: false, lfnce: true }),
                    SeqDirective::Goto(a) if !redirected => next = Some(a),
                    d if d.is_end() && !redirected => ends = true,
                    _ => {}
                }
                if ends {
                    if let Some(fid) = self.last_fid {
                        let in_group = items.iter_mut().rev().find_map(|it| match it {
                            Item::Uop(f) if f.fid == fid => Some(f),
                            _ => None,
                        });
                        match in_group {
                            Some(f) => f.ends_macro = true,
                            None => self.mark_macro_end(fid),
                        }
                    }
                    self.fetch.macro_idx += 1;
                    self.fetch.upc = None;
                    self.last_fid = None;
                } else if !self.fetch_stall {
                    self.fetch.upc = Some(next.unwrap_or((ti as UAddr + 1) * 3));
                }
            }
        }
        if !items.is_empty() {
            self.queue.push_back(Group { cycle: self.t, items });
        }
        Ok(())
    }
}

struct PipeEnv<'a> {
    st: &'a mut MachineState,
    stores: Vec<(u64, usize, u64, Taint)>,
}

impl Env for PipeEnv<'_> {
    fn read_creg(&mut self, addr: u16) -> TaintedValue {
        self.st.read_creg(addr)
    }
    fn write_creg(&mut self, addr: u16, v: TaintedValue) {
        self.st.write_creg(addr, v)
    }
    fn read_uram(&mut self, addr: u16) -> TaintedValue {
        self.st.read_uram(addr)
    }
    fn write_uram(&mut self, addr: u16, v: TaintedValue) {
        self.st.write_uram(addr, v)
    }
    fn read_seg(&mut self, seg: Seg) -> TaintedValue {
        self.st.read_seg(seg)
    }
    fn read_mem(&mut self, addr: u64, size: usize) -> Result<(u64, Taint), ExecError> {
        let mut data = 0u64;
        let mut taint = Taint::new();
        for i in 0..size {
            let a = addr.wrapping_add(i as u64);
            let fwd = self.stores.iter().rev().find(|(sa, ss, _, _)| a >= *sa && a < sa + *ss as u64);
            match fwd {
                Some((sa, _, d, t)) => {
                    data |= ((d >> (8 * (a - sa))) & 0xFF) << (8 * i);
                    taint.extend(t.iter().copied());
                }
                None => {
                    let (b, t) = self.st.read_mem(a, 1)?;
                    data |= b << (8 * i);
                    taint.extend(t);
                }
            }
        }
        Ok((data, taint))
    }
}

/// Runs a macro-op stream from `state` with the cache `cache`.
pub fn run_with_cache(
    prog: &MacroProgram,
    state: MachineState,
    cache: Cache,
    cfg: &Config,
) -> Result<PipelineTrace, RunError> {
    let mut sim = Sim {
        prog,
        cfg,
        policy: PredictionPolicy::default(),
        st: state,
        cache,
        t: 0,
        fetch: FetchPc { macro_idx: 0, upc: None },
        fetch_stall: false,
        next_fid: 0,
        last_fid: None,
        queue: VecDeque::new(),
        rob: VecDeque::new(),
        next_seq: 0,
        rename: HashMap::new(),
        sync_mark: 0,
        lfnce_mark: 0,
        halted: false,
        fault: None,
        counters: PerfCounters::default(),
        per_macro: vec![MacroCounters::default(); prog.ops.len()],
        squashed_macros: Default::default(),
        events: Vec::new(),
        touches: Vec::new(),
        squashed_seqs: Default::default(),
        transient_creg: Vec::new(),
        transient_uram: Vec::new(),
    };
    loop {
        sim.retire()?;
        if sim.halted {
            break;
        }
        sim.execute();
        sim.issue();
        sim.fetch()?;
        if sim.fetch_done() && sim.queue.is_empty() && sim.rob.is_empty() {
            break;
        }
        sim.t += 1;
        if sim.t > cfg.cycle_limit {
            return Err(RunError::CycleLimitExceeded(sim.t));
        }
    }
    let mut touches = std::mem::take(&mut sim.touches);
    for t in touches.iter_mut() {
        t.transient = sim.squashed_seqs.contains(&t.seq);
    }
    sim.counters.cycles = sim.t;
    sim.counters.transient_macro_ops = sim.squashed_macros.len() as u64;
    Ok(PipelineTrace {
        events: sim.events,
        counters: sim.counters,
        per_macro: sim.per_macro,
        touches,
        state: sim.st,
        cache: sim.cache,
        fault: sim.fault,
        transient_creg_writes: sim.transient_creg,
        transient_uram_writes: sim.transient_uram,
    })
}

/// Initial cache for a state: every mapped line is warm except flushed ranges.
pub fn warm_cache(state: &MachineState, flush: &[(u64, u64)], cfg: &Config) -> Cache {
    let mut c = Cache::new(cfg.line_size, cfg.load_hit, cfg.load_miss);
    for a in state.mem.keys() {
        c.insert(*a);
    }
    for (a, n) in flush {
        c.flush_range(*a, *n);
    }
    c
}

/// Runs a macro-op stream under a scenario's initial state and cache.
pub fn run(prog: &MacroProgram, scenario: &crate::machine::Scenario, cfg: &Config) -> Result<PipelineTrace, RunError> {
    let st = scenario.build_state();
    let cache = warm_cache(&st, &scenario.flush, cfg);
    run_with_cache(prog, st, cache, cfg)
}

// ---------------------------------------------------------------------------
// Sequential reference interpreter

#[derive(Clone, Debug)]
pub struct SeqResult {
    pub state: MachineState,
    pub retired: u64,
    pub per_macro_retired: Vec<u64>,
    pub fault: Option<u64>,
}

fn exec_seq(u: &MicroOp, st: &mut MachineState) -> Result<Outcome, ExecError> {
    let regs: BTreeMap<Reg, TaintedValue> = st.regs.clone();
    let read = move |r: Reg| regs.get(&r).cloned().unwrap_or_default();
    let out = exec(u, &read, st)?;
    for (r, v) in &out.writes {
        st.set_reg(*r, v.clone());
    }
    if let Some(s) = &out.store {
        st.write_mem(s.addr, s.size, s.value.data, &s.value.taint);
    }
    Ok(out)
}

/// Executes the stream one uop at a time with no speculation.
pub fn run_sequential(prog: &MacroProgram, state: MachineState, step_limit: u64) -> Result<SeqResult, RunError> {
    let mut st = state;
    let mut retired = 0u64;
    let mut per = vec![0u64; prog.ops.len()];
    let mut steps = 0u64;
    for (mi, m) in prog.ops.iter().enumerate() {
        match &m.body {
            MacroBody::Mite(uops) => {
                for u in uops {
                    exec_seq(u, &mut st)?;
                    retired += 1;
                    per[mi] += 1;
                }
            }
            MacroBody::Msrom { program, bindings } => {
                let p = &prog.programs[*program];
                let mut upc = p.entry;
                'prog: loop {
                    steps += 1;
                    if steps > step_limit {
                        return Err(RunError::CycleLimitExceeded(steps));
                    }
                    let ti = upc as usize / 3;
                    let triad = p
                        .triads
                        .get(ti)
                        .ok_or_else(|| RunError::UpcOutOfProgram { program: p.name.clone(), upc })?;
                    for pos in (upc as usize % 3)..3 {
                        let Slot::Op(u) = &triad.slots[pos] else { continue };
                        let u = bind_uop(u, bindings)?;
                        let out = exec_seq(&u, &mut st)?;
                        retired += 1;
                        per[mi] += 1;
                        if let Some(code) = out.event {
                            st.pending_event = Some(code);
                            return Ok(SeqResult { state: st, retired, per_macro_retired: per, fault: Some(code) });
                        }
                        if let Some(b) = out.branch {
                            if b.taken {
                                upc = b.target.ok_or(RunError::BadIndirectTarget)?;
                                continue 'prog;
                            }
                        }
                    }
                    match triad.seqw {
                        SeqDirective::Goto(a) => upc = a,
                        d if d.is_end() => break 'prog,
                        _ => upc = (ti as UAddr + 1) * 3,
                    }
                }
            }
        }
    }
    Ok(SeqResult { state: st, retired, per_macro_retired: per, fault: None })
}

/// Steady-state per-iteration counters: run `make(k+1)` and `make(k)` and
/// subtract, the way a nanobenchmark harness isolates one iteration.
pub fn nanobench(
    make: impl Fn(usize) -> MacroProgram,
    scenario: &crate::machine::Scenario,
    cfg: &Config,
    k: usize,
) -> Result<PerfCounters, RunError> {
    let a = run(&make(k + 1), scenario, cfg)?.counters;
    let b = run(&make(k), scenario, cfg)?.counters;
    Ok(PerfCounters {
        uops_issued: a.uops_issued - b.uops_issued,
        uops_retired: a.uops_retired - b.uops_retired,
        uops_squashed: a.uops_squashed - b.uops_squashed,
        ms_uops: a.ms_uops - b.ms_uops,
        macro_ops_retired: a.macro_ops_retired - b.macro_ops_retired,
        transient_macro_ops: a.transient_macro_ops.saturating_sub(b.transient_macro_ops),
        mispredictions: a.mispredictions - b.mispredictions,
        cycles: a.cycles.saturating_sub(b.cycles),
        peak_rob: a.peak_rob,
    })
}
