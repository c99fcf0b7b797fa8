//! Line-oriented run reports shared by the command-line driver and tests.
//!
//! A report is an ordered list of `key: value` lines. Lines whose key starts
//! with `expect.` name another key and the value it must hold; the verdict
//! is recomputed from those pairs alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::channel::ProbeError;
use crate::corpus::{
    build_attack, run_attack, AttackError, AttackOptions, CorpusError, Fixture, Isa, MacroParseError, Pattern,
};
use crate::machine::{MachineState, Scenario};
use crate::pipeline::{nanobench, run, run_sequential, Config, MacroProgram, PerfCounters, PipelineTrace, RunError};
use crate::uisa::Microprogram;
use crate::uslh::{harden, overhead, scan, HardenError, HardenPolicy, Selection};

/// Step budget for the sequential reference interpreter.
pub const SEQ_STEP_LIMIT: u64 = 200_000;

/// Attacks whose exposure the select pass is expected to close.
pub const CLOSABLE: [&str; 6] = ["meb-rdfsbase", "meb-rdgsbase", "meb-xgetbv", "meb-rdpmc", "pcidx", "mvi-div"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunReport {
    entries: Vec<(String, String)>,
}

fn parse_num(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn same_value(a: &str, b: &str) -> bool {
    match (parse_num(a), parse_num(b)) {
        (Some(x), Some(y)) => x == y,
        _ => a.trim() == b.trim(),
    }
}

impl RunReport {
    pub fn new(kind: &str) -> RunReport {
        let mut r = RunReport::default();
        r.push("kind", kind);
        r
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn expect(&mut self, key: &str, value: impl ToString) {
        self.push(format!("expect.{key}"), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Pass iff every `expect.K` line matches the value of `K`. Numbers
    /// compare by value, so `0x41` matches `65`.
    pub fn verdict(&self) -> Verdict {
        let ok = self.entries.iter().filter(|(k, _)| k != "verdict").all(|(k, want)| match k.strip_prefix("expect.") {
            Some(key) => self.get(key).is_some_and(|got| same_value(got, want)),
            None => true,
        });
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Appends the `verdict` line, replacing any earlier one.
    pub fn finish(mut self) -> RunReport {
        self.entries.retain(|(k, _)| k != "verdict");
        let v = self.verdict();
        self.push("verdict", v.name());
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }

    /// Reads back the output of [`RunReport::render`].
    pub fn parse(text: &str) -> RunReport {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once(": "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        RunReport { entries }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Macro(#[from] MacroParseError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Harden(#[from] HardenError),
}

fn push_config(r: &mut RunReport, cfg: &Config) {
    for line in cfg.render().lines() {
        if let Some((k, v)) = line.split_once('=') {
            r.push(format!("config.{}", k.trim()), v.trim());
        }
    }
}

fn push_counters(r: &mut RunReport, c: &PerfCounters) {
    r.push("issued", c.uops_issued);
    r.push("retired", c.uops_retired);
    r.push("transient", c.transient_uops());
    r.push("squashed", c.uops_squashed);
    r.push("ms_uops", c.ms_uops);
    r.push("macro_retired", c.macro_ops_retired);
    r.push("transient_macro_ops", c.transient_macro_ops);
    r.push("mispredictions", c.mispredictions);
    r.push("cycles", c.cycles);
}

fn fault_text(f: Option<u64>) -> String {
    f.map_or_else(|| "none".to_string(), |c| format!("{c:#x}"))
}

fn push_trace(r: &mut RunReport, t: &PipelineTrace, unauthorized: bool) {
    push_counters(r, &t.counters);
    r.push("fault", fault_text(t.fault));
    let leak = crate::channel::taint_oracle(t, unauthorized);
    let labels: Vec<String> = leak.leaked.iter().map(ToString::to_string).collect();
    r.push("leak", if labels.is_empty() { "none".to_string() } else { labels.join(", ") });
    r.push("leak.witnesses", leak.witnesses.len());
}

/// Macro ISA with `fx` bound under its mnemonic, replacing any corpus entry.
pub fn isa_with(fx: &Fixture) -> Result<Isa, ReportError> {
    let mut isa = Isa::from_corpus()?;
    isa.insert(&fx.mnemonic, fx.program.clone(), fx.operands.clone());
    Ok(isa)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Macro-op text to run instead of the fixture's invocation.
    pub invoke: Option<String>,
    /// Report per-iteration deltas of `k+1` versus `k` back-to-back copies.
    pub bench: Option<usize>,
}

/// Runs a fixture's invocation through the pipeline. Returns the trace of
/// the single run (or of the longer benchmark run).
pub fn run_report(
    fx: &Fixture,
    sc: &Scenario,
    cfg: &Config,
    opts: &RunOptions,
) -> Result<(RunReport, PipelineTrace), ReportError> {
    let isa = isa_with(fx)?;
    let text = opts.invoke.clone().unwrap_or_else(|| fx.invoke.clone());
    let mut r = RunReport::new("run");
    r.push("fixture", &fx.name);
    r.push("program", &text);
    push_config(&mut r, cfg);
    let trace;
    if let Some(k) = opts.bench {
        let make = |n: usize| vec![text.as_str(); n].join("; ");
        // Parse once up front so the closure below cannot fail.
        isa.assemble(&make(k + 1))?;
        let per = nanobench(|n| isa.assemble(&make(n)).expect("stream parsed above"), sc, cfg, k)?;
        trace = run(&isa.assemble(&make(k + 1))?, sc, cfg)?;
        r.push("bench.k", k);
        push_counters(&mut r, &per);
        r.push("fault", fault_text(trace.fault));
    } else {
        trace = run(&isa.assemble(&text)?, sc, cfg)?;
        push_trace(&mut r, &trace, sc.unauthorized);
    }
    for (k, v) in &sc.expect {
        r.expect(k, v);
    }
    Ok((r.finish(), trace))
}

fn byte_count(planted: Option<u64>) -> u8 {
    match planted {
        Some(v) if v > 0xff => 8,
        _ => 1,
    }
}

fn probe_text(b: &Result<u8, ProbeError>) -> String {
    match b {
        Ok(v) => format!("{v:#04x}"),
        Err(ProbeError::NoSignal) => "none".into(),
        Err(ProbeError::AmbiguousSignal(_)) => "ambiguous".into(),
    }
}

/// Runs a named attack. Without `opts.byte_sel` set explicitly (`None`),
/// every byte of the planted value is swept with one run per selector.
pub fn attack_report(
    name: &str,
    creg: Option<u16>,
    byte_sel: Option<u8>,
    hardened: bool,
    cfg: &Config,
) -> Result<RunReport, ReportError> {
    let base = AttackOptions { creg, byte_sel: byte_sel.unwrap_or(0), hardened };
    let first = build_attack(name, &base)?;
    let bytes: Vec<u8> = match byte_sel {
        Some(k) => vec![k],
        None => (0..byte_count(first.planted)).collect(),
    };
    let mut r = RunReport::new("attack");
    r.push("attack", name);
    r.push("fixture", &first.fixture);
    r.push("hardened", hardened);
    r.push("pattern", format!("{:?}", first.pattern).to_lowercase());
    if name == "pcidx" {
        r.push("creg", format!("{:#06x}", creg.unwrap_or(0x2290)));
    }
    r.push("driver", first.text.replace('\n', "; "));
    push_config(&mut r, cfg);
    let run0 = run_attack(&first, cfg)?;
    push_trace(&mut r, &run0.trace, first.scenario.unauthorized);
    let closed = hardened && CLOSABLE.contains(&name);
    if first.pattern == Pattern::Mil {
        let secret = run0.leak.leaked.iter().any(|l| l.secret);
        r.push("leak.secret", secret);
        r.expect("leak.secret", !closed);
        return Ok(r.finish());
    }
    let mut value = Some(0u64);
    for &k in &bytes {
        let got = if k == base.byte_sel {
            run0.recovered.clone()
        } else {
            let a = build_attack(name, &AttackOptions { byte_sel: k, ..base.clone() })?;
            run_attack(&a, cfg)?.recovered
        };
        r.push(format!("recovered.{k}"), probe_text(&got));
        value = match (value, got) {
            (Some(v), Ok(b)) => Some(v | (b as u64) << (8 * k as u32)),
            _ => None,
        };
    }
    if let Some(p) = first.planted {
        let mask = bytes.iter().fold(0u64, |m, &k| m | 0xff << (8 * k as u32));
        r.push("planted", format!("{:#x}", p & mask));
    }
    r.push("recovered", value.map_or_else(|| "incomplete".to_string(), |v| format!("{v:#x}")));
    if closed {
        r.expect("recovered", "0x0");
        if first.pattern != Pattern::Mvi {
            r.expect("leak", "none");
        }
    } else if let Some(p) = r.get("planted").map(str::to_string) {
        r.expect("recovered", p);
    }
    Ok(r.finish())
}

fn class_list(mut v: Vec<&'static str>) -> String {
    v.sort_unstable();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

pub fn scan_report(fx: &Fixture) -> RunReport {
    let found = scan(&fx.program, Some(&fx.scenario));
    let mut r = RunReport::new("scan");
    r.push("fixture", &fx.name);
    r.push("findings", found.len());
    for (i, f) in found.iter().enumerate() {
        r.push(format!("finding.{i}"), f);
    }
    r.push("classes", class_list(found.iter().map(|f| f.class.name()).collect()));
    r.expect("classes", class_list(fx.findings.iter().map(|c| c.name()).collect()));
    r.finish()
}

fn arch_view(st: &MachineState) -> impl PartialEq + std::fmt::Debug {
    let (regs, mem, ev) = st.arch_snapshot();
    let regs: BTreeMap<_, _> = regs.into_iter().filter(|(r, _)| r.is_architectural()).collect();
    let creg: BTreeMap<u16, u64> = st.creg.iter().map(|(a, v)| (*a, v.data)).collect();
    (regs, mem, ev, creg)
}

fn seq_run(prog: &MacroProgram, sc: &Scenario) -> Result<(impl PartialEq + std::fmt::Debug, Option<u64>), RunError> {
    let res = run_sequential(prog, sc.build_state(), SEQ_STEP_LIMIT)?;
    Ok((arch_view(&res.state), res.fault))
}

/// True when the sequential outcome of `fx.invoke` under `sc` is the same
/// with the original and the hardened microprogram.
pub fn preserves(fx: &Fixture, hardened: &Microprogram, sc: &Scenario) -> Result<bool, ReportError> {
    let mut isa = isa_with(fx)?;
    let before = seq_run(&isa.assemble(&fx.invoke)?, sc)?;
    isa.insert(&fx.mnemonic, hardened.clone(), fx.operands.clone());
    let after = seq_run(&isa.assemble(&fx.invoke)?, sc)?;
    Ok(before == after)
}

/// Uop lines present in `q` but not in `p`, counted as a multiset.
fn inserted(p: &Microprogram, q: &Microprogram) -> Vec<String> {
    let mut have: BTreeMap<String, usize> = BTreeMap::new();
    for (_, u) in p.uops() {
        *have.entry(p.render_uop(u)).or_default() += 1;
    }
    let mut out = Vec::new();
    for (_, u) in q.uops() {
        let s = q.render_uop(u);
        match have.get_mut(&s) {
            Some(n) if *n > 0 => *n -= 1,
            _ => out.push(s),
        }
    }
    out
}

/// Hardens a fixture and checks the sequential outcome is unchanged.
pub fn harden_report(fx: &Fixture, policy: &HardenPolicy) -> Result<(RunReport, Microprogram), ReportError> {
    let q = harden(&fx.program, policy, Some(&fx.scenario))?;
    let ov = overhead(&fx.program, &q);
    let mut r = RunReport::new("harden");
    r.push("fixture", &fx.name);
    match &policy.selection {
        Selection::TaintGuided => r.push("policy", "taint-guided"),
        Selection::Explicit(m) => {
            let parts: Vec<String> = m
                .iter()
                .map(|(a, locs)| {
                    let l: Vec<String> = locs.iter().map(ToString::to_string).collect();
                    format!("{a:#06x}={}", l.join(","))
                })
                .collect();
            r.push("policy", format!("explicit {}", parts.join(" ")));
        }
    }
    r.push("skip_loops", policy.skip_loops);
    r.push("uops.before", ov.before);
    r.push("uops.after", ov.after);
    r.push("uops.delta", ov.delta());
    for l in &ov.loops {
        r.push(format!("loop.{}", l.header.trim_start_matches('.')), format!("{} -> {}", l.before, l.after));
    }
    for (i, s) in inserted(&fx.program, &q).iter().enumerate() {
        r.push(format!("inserted.{i}"), s);
    }
    let same = preserves(fx, &q, &fx.scenario)?;
    r.push("semantics", if same { "preserved" } else { "changed" });
    r.expect("semantics", "preserved");
    Ok((r.finish(), q))
}
