//! `ubranch`: assemble, run, attack, scan and harden microcode fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ubranch::corpus::{fixture_names, load_fixture, parse_fixture, Fixture, ATTACK_NAMES};
use ubranch::machine::Scenario;
use ubranch::pipeline::Config;
use ubranch::report::{attack_report, harden_report, run_report, scan_report, RunOptions, RunReport, Verdict};
use ubranch::uasm::{assemble_text, disassemble_text};
use ubranch::uisa::UAddr;
use ubranch::uslh::{HardenPolicy, Loc, Selection};

#[derive(Parser)]
#[command(name = "ubranch", version, about = "Micro-op level transient-execution simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Pipeline config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the reorder-buffer size.
    #[arg(long, global = true)]
    rob: Option<usize>,
    /// Extra cycles between a branch executing and its misprediction being detected.
    #[arg(long = "detect-delay", global = true)]
    detect_delay: Option<u64>,
    /// Print the per-cycle event log after the report.
    #[arg(long, global = true)]
    trace: bool,
    /// Print reports as flat JSON objects.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a micro-assembly file and print the canonical listing.
    Asm { input: PathBuf },
    /// Run a fixture's invocation through the pipeline.
    Run {
        /// Corpus fixture name or path to a `.uasm` file.
        fixture: String,
        /// Scenario file replacing the fixture's own.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Extra scenario line, e.g. `rflags.df=0`. Repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
        /// Macro-op text to run instead of the fixture's invocation.
        #[arg(long)]
        invoke: Option<String>,
        /// Report per-iteration deltas between K+1 and K back-to-back copies.
        #[arg(long, value_name = "K")]
        bench: Option<usize>,
    },
    /// Run a named attack and recover the planted secret through the cache.
    Attack {
        name: String,
        /// Control register targeted by `pcidx` (0x2200..0x22ff).
        #[arg(long, value_parser = parse_u16)]
        creg: Option<u16>,
        /// Recover only this byte instead of sweeping all of them.
        #[arg(long = "byte-sel", value_parser = clap::value_parser!(u8).range(0..8))]
        byte_sel: Option<u8>,
        /// Attack the select-hardened microprogram.
        #[arg(long)]
        hardened: bool,
    },
    /// Report conditional microcode branches that form a vulnerability.
    Scan { fixture: String },
    /// Insert guarding selects and write the patched micro-assembly.
    Harden {
        fixture: String,
        /// Guard these locations after the branch at ADDR (`U0007=tmp7` or `0x7=tmp7,rax`). Repeatable.
        #[arg(long = "guard", value_name = "ADDR=LOCS")]
        guard: Vec<String>,
        /// Also harden branches inside loop bodies.
        #[arg(long = "no-skip-loops")]
        no_skip_loops: bool,
        /// Output path; defaults to `<fixture>_hardened.uasm`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Scan and harden every fixture and run every attack, both unhardened and hardened.
    ReportAll,
}

fn parse_u16(s: &str) -> Result<u16, String> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u16::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

fn load(spec: &str) -> Result<Fixture, String> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "uasm") {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{spec}: {e}"))?;
        let scn = std::fs::read_to_string(path.with_extension("scn")).unwrap_or_default();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return parse_fixture(&name, &src, &scn).map_err(|e| e.to_string());
    }
    load_fixture(spec).map_err(|e| e.to_string())
}

fn config(g: &Global) -> Result<Config, String> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Config::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Config::default(),
    };
    if let Some(n) = g.rob {
        cfg.rob_size = n;
    }
    if let Some(d) = g.detect_delay {
        cfg.detect_delay = d;
    }
    cfg.trace = g.trace;
    Ok(cfg)
}

fn parse_guards(items: &[String]) -> Result<BTreeMap<UAddr, Vec<Loc>>, String> {
    let mut m: BTreeMap<UAddr, Vec<Loc>> = BTreeMap::new();
    for it in items {
        let (a, locs) = it.split_once('=').ok_or_else(|| format!("--guard `{it}`: expected ADDR=loc[,loc]"))?;
        let a = a.trim();
        // Accept the scanner's `U0007` spelling as well as plain numbers.
        let addr = match a.strip_prefix('U') {
            Some(h) => u16::from_str_radix(h, 16).map_err(|e| e.to_string()),
            None => parse_u16(a),
        }
        .map_err(|e| format!("--guard `{it}`: {e}"))? as UAddr;
        for l in locs.split(',') {
            let loc = Loc::parse(l.trim()).ok_or_else(|| format!("--guard `{it}`: unknown location `{l}`"))?;
            m.entry(addr).or_default().push(loc);
        }
    }
    Ok(m)
}

fn json(r: &RunReport) -> serde_json::Value {
    let map = r.entries().iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
    serde_json::Value::Object(map)
}

fn emit(reports: &[RunReport], as_json: bool) {
    if as_json {
        let v = match reports {
            [one] => json(one),
            many => serde_json::Value::Array(many.iter().map(json).collect()),
        };
        println!("{}", serde_json::to_string_pretty(&v).expect("string map serializes"));
    } else {
        let texts: Vec<String> = reports.iter().map(RunReport::render).collect();
        print!("{}", texts.join("\n"));
    }
}

fn exit_for(reports: &[RunReport]) -> ExitCode {
    if reports.iter().all(|r| r.verdict() == Verdict::Pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

type Job<'a> = Box<dyn Fn() -> Result<Vec<RunReport>, String> + Send + Sync + 'a>;

fn report_all(cfg: &Config) -> Result<Vec<RunReport>, String> {
    let mut jobs: Vec<Job> = Vec::new();
    for name in fixture_names() {
        jobs.push(Box::new(move || {
            let fx = load_fixture(name).map_err(|e| e.to_string())?;
            let (h, _) = harden_report(&fx, &HardenPolicy::default()).map_err(|e| e.to_string())?;
            Ok(vec![scan_report(&fx), h])
        }));
    }
    for name in ATTACK_NAMES {
        for hardened in [false, true] {
            jobs.push(Box::new(move || {
                attack_report(name, None, None, hardened, cfg).map(|r| vec![r]).map_err(|e| e.to_string())
            }));
        }
    }
    // Simulations share nothing, so each job gets its own thread.
    let results: Vec<Result<Vec<RunReport>, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|j| s.spawn(j)).collect();
        handles.into_iter().map(|h| h.join().expect("report job panicked")).collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    let pass = out.iter().filter(|r| r.verdict() == Verdict::Pass).count();
    let mut summary = RunReport::new("summary");
    summary.push("reports", out.len());
    summary.push("passed", pass);
    summary.expect("passed", out.len());
    out.push(summary.finish());
    Ok(out)
}

fn execute(cli: Cli) -> Result<ExitCode, String> {
    let cfg = config(&cli.global)?;
    let reports = match cli.cmd {
        Cmd::Asm { input } => {
            let text = std::fs::read_to_string(&input).map_err(|e| format!("{}: {e}", input.display()))?;
            let name = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let p = assemble_text(&name, &text).map_err(|e| format!("{}: {e}", input.display()))?;
            print!("{}", disassemble_text(&p));
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Run { fixture, scenario, set, invoke, bench } => {
            let fx = load(&fixture)?;
            let mut text = match scenario {
                Some(p) => std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?,
                None => fx.scenario_text.clone(),
            };
            for s in &set {
                text.push('\n');
                text.push_str(s);
            }
            let sc = Scenario::parse(&text).map_err(|e| format!("scenario: {e}"))?;
            let (r, trace) = run_report(&fx, &sc, &cfg, &RunOptions { invoke, bench }).map_err(|e| e.to_string())?;
            emit(std::slice::from_ref(&r), cli.global.json);
            if cli.global.trace {
                print!("{}", trace.export());
            }
            vec![r]
        }
        Cmd::Attack { name, creg, byte_sel, hardened } => {
            let r = attack_report(&name, creg, byte_sel, hardened, &cfg).map_err(|e| e.to_string())?;
            emit(std::slice::from_ref(&r), cli.global.json);
            vec![r]
        }
        Cmd::Scan { fixture } => {
            let r = scan_report(&load(&fixture)?);
            emit(std::slice::from_ref(&r), cli.global.json);
            vec![r]
        }
        Cmd::Harden { fixture, guard, no_skip_loops, out } => {
            let fx = load(&fixture)?;
            let selection = if guard.is_empty() { Selection::TaintGuided } else { Selection::Explicit(parse_guards(&guard)?) };
            let policy = HardenPolicy { selection, skip_loops: !no_skip_loops };
            let (mut r, q) = harden_report(&fx, &policy).map_err(|e| e.to_string())?;
            let path = out.unwrap_or_else(|| PathBuf::from(format!("{}_hardened.uasm", fx.name)));
            let mut file: String = fx.source.lines().filter(|l| l.starts_with("//@")).map(|l| format!("{l}\n")).collect();
            file.push_str(&disassemble_text(&q));
            std::fs::write(&path, file).map_err(|e| format!("{}: {e}", path.display()))?;
            r.push("output", path.display());
            let r = r.finish();
            emit(std::slice::from_ref(&r), cli.global.json);
            vec![r]
        }
        Cmd::ReportAll => {
            let rs = report_all(&cfg)?;
            emit(&rs, cli.global.json);
            rs
        }
    };
    Ok(exit_for(&reports))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
