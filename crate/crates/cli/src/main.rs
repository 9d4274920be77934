//! `capsule`: parse, run, trace and co-simulate programs of the calculus,
//! and fuzz the simulation over generated corpora.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 capsule check failed,
//! 3 violation, fuel exhaustion or any other stuck state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capsule_core::ast::{well_formed, AnnotPolicy, ClassTable, Expr};
use capsule_core::conventional::{crun, render_config, CHalt, CTrace};
use capsule_core::corpus::{gen_corpus, simulate_corpus, summarize};
use capsule_core::gen::{fuzz_class_table, GenConfig};
use capsule_core::matching::{erase, simulate_run, SimOptions, SimReport, Verdict};
use capsule_core::parse::{parse_program, Program};
use capsule_core::print::{render, render_annotated, render_class_table};
use capsule_core::syntactic::{run, Halt, Stuck, Trace};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const OK: u8 = 0;
const INPUT: u8 = 1;
const CAPSULE: u8 = 2;
const FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "capsule",
    version,
    about = "Syntactic and heap semantics of a small object calculus"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a file and print the class table, the main term and diagnostics.
    Parse {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Annot::Reach)]
        annot: Annot,
    },
    /// Reduce the main term to a value.
    Run(RunArgs),
    /// Like `run`, printing every step.
    Trace(RunArgs),
    /// Co-run both semantics and check that every step is matched.
    Simulate {
        file: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_conv_steps: usize,
        #[arg(long, default_value_t = 500)]
        fuel: usize,
        #[arg(long, value_enum, default_value_t = Annot::Reach)]
        annot: Annot,
        #[arg(long)]
        no_strict_affine: bool,
        /// Write one JSON record per step to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate programs and co-simulate each of them.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        max_depth: usize,
        #[arg(long, default_value_t = 6)]
        max_decls: usize,
        #[arg(long, default_value_t = 500)]
        fuel: usize,
        #[arg(long, default_value_t = 8)]
        max_conv_steps: usize,
        /// Write one JSON record per step of every program to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[arg(long, value_enum, default_value_t = Calculus::Syntactic)]
    calculus: Calculus,
    #[arg(long, default_value_t = 500)]
    fuel: usize,
    #[arg(long, value_enum, default_value_t = Annot::Reach)]
    annot: Annot,
    /// Accept affine variables used more than once.
    #[arg(long)]
    no_strict_affine: bool,
    /// Write one JSON record per step to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Calculus {
    Syntactic,
    Conventional,
}

#[derive(Clone, Copy, ValueEnum)]
enum Annot {
    All,
    Used,
    Reach,
}

impl From<Annot> for AnnotPolicy {
    fn from(a: Annot) -> AnnotPolicy {
        match a {
            Annot::All => AnnotPolicy::All,
            Annot::Used => AnnotPolicy::Used,
            Annot::Reach => AnnotPolicy::Reach,
        }
    }
}

/// Failure before any evaluation, reported with exit code 1.
struct InputError(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { INPUT } else { OK });
        }
    };
    let code = match cli.cmd {
        Cmd::Parse { file, annot } => parse_cmd(&file, annot),
        Cmd::Run(a) => run_cmd(&a, false),
        Cmd::Trace(a) => run_cmd(&a, true),
        Cmd::Simulate {
            file,
            max_conv_steps,
            fuel,
            annot,
            no_strict_affine,
            report,
        } => simulate_cmd(
            &file,
            SimOptions {
                fuel,
                max_conv_steps,
            },
            annot,
            !no_strict_affine,
            report.as_deref(),
        ),
        Cmd::Fuzz {
            seed,
            count,
            max_depth,
            max_decls,
            fuel,
            max_conv_steps,
            report,
        } => fuzz_cmd(
            seed,
            count,
            GenConfig {
                max_depth,
                max_decls,
            },
            SimOptions {
                fuel,
                max_conv_steps,
            },
            report.as_deref(),
        ),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(InputError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(INPUT)
        }
    }
}

fn load(path: &Path, annot: Annot) -> Result<Program, InputError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    parse_program(&src, annot.into()).map_err(|e| InputError(format!("{}:{e}", path.display())))
}

/// Loads a program and rejects it if it is not well formed.
fn load_checked(path: &Path, annot: Annot, strict_affine: bool) -> Result<Program, InputError> {
    let p = load(path, annot)?;
    let diags = well_formed(&p.main, &p.ct, strict_affine);
    if diags.is_empty() {
        Ok(p)
    } else {
        let list: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        Err(InputError(format!(
            "{}: {}",
            path.display(),
            list.join("; ")
        )))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, InputError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn write_records(path: &Path, records: &[serde_json::Value]) -> Result<(), InputError> {
    let mut w = create(path)?;
    for r in records {
        writeln!(w, "{r}").map_err(|e| InputError(e.to_string()))?;
    }
    w.flush().map_err(|e| InputError(e.to_string()))
}

fn parse_cmd(path: &Path, annot: Annot) -> Result<u8, InputError> {
    let p = load(path, annot)?;
    print!("{}", render_class_table(&p.ct));
    println!("main: {}", render_annotated(&p.main));
    let diags = well_formed(&p.main, &p.ct, true);
    if diags.is_empty() {
        println!("diagnostics: none");
        return Ok(OK);
    }
    println!("diagnostics:");
    for d in &diags {
        println!("  {d}");
    }
    Ok(INPUT)
}

fn run_cmd(a: &RunArgs, trace: bool) -> Result<u8, InputError> {
    let p = load_checked(&a.file, a.annot, !a.no_strict_affine)?;
    match a.calculus {
        Calculus::Syntactic => {
            let t = run(&p.main, &p.ct, a.fuel);
            if trace {
                print_trace(&t);
            }
            if let Some(path) = &a.report {
                write_records(path, &trace_records(&t))?;
            }
            Ok(report_halt(&t))
        }
        Calculus::Conventional => {
            let (cfg, _) = erase(&p.main)
                .map_err(|e| InputError(format!("cannot erase the main term: {e}")))?;
            let t = crun(&cfg, &p.ct, a.fuel);
            if trace {
                print_ctrace(&t);
            }
            if let Some(path) = &a.report {
                write_records(path, &ctrace_records(&t))?;
            }
            Ok(report_chalt(&t))
        }
    }
}

fn print_trace(t: &Trace) {
    println!("{:>4}  {:<14} {}", 0, "start", render(&t.start));
    for (i, s) in t.steps.iter().enumerate() {
        println!("{:>4}  {:<14} {}", i + 1, s.rule.as_str(), render(&s.term));
    }
}

fn print_ctrace(t: &CTrace) {
    println!("{:>4}  {:<14} {}", 0, "start", render_config(&t.start));
    for (i, s) in t.steps.iter().enumerate() {
        println!(
            "{:>4}  {:<14} {}",
            i + 1,
            s.rule.as_str(),
            render_config(&s.cfg)
        );
    }
}

fn trace_records(t: &Trace) -> Vec<serde_json::Value> {
    t.steps
        .iter()
        .enumerate()
        .map(|(i, s)| json!({ "index": i + 1, "calculus": "syntactic", "rule": s.rule, "term": render(&s.term) }))
        .collect()
}

fn ctrace_records(t: &CTrace) -> Vec<serde_json::Value> {
    t.steps
        .iter()
        .enumerate()
        .map(|(i, s)| json!({ "index": i + 1, "calculus": "conventional", "rule": s.rule, "config": render_config(&s.cfg) }))
        .collect()
}

fn report_halt(t: &Trace) -> u8 {
    println!("steps: {}", t.steps.len());
    match &t.halt {
        Halt::Value(v) => {
            println!("value: {}", render(v));
            OK
        }
        Halt::Stuck(s @ Stuck::CapsuleCheckFailed { .. }) => {
            println!("stuck: {s}");
            println!("at: {}", render(t.last()));
            CAPSULE
        }
        Halt::Stuck(s) => {
            println!("stuck: {s}");
            println!("at: {}", render(t.last()));
            FAILED
        }
        Halt::FuelExhausted => {
            println!("fuel exhausted at: {}", render(t.last()));
            FAILED
        }
    }
}

fn report_chalt(t: &CTrace) -> u8 {
    println!("steps: {}", t.steps.len());
    match &t.halt {
        CHalt::Value(_) => {
            println!("value: {}", render_config(t.last()));
            OK
        }
        CHalt::Stuck(s) => {
            println!("stuck: {s}");
            println!("at: {}", render_config(t.last()));
            FAILED
        }
        CHalt::FuelExhausted => {
            println!("fuel exhausted at: {}", render_config(t.last()));
            FAILED
        }
    }
}

fn verdict_code(v: &Verdict) -> u8 {
    match v {
        Verdict::Matched { .. } => OK,
        Verdict::CapsuleStuck { .. } => CAPSULE,
        _ => FAILED,
    }
}

fn sim_records(seed: Option<u64>, r: &SimReport) -> Vec<serde_json::Value> {
    let mut out: Vec<serde_json::Value> = r
        .records
        .iter()
        .map(|s| {
            let mut v = json!({
                "kind": "step",
                "index": s.index,
                "calculus": "syntactic",
                "rule": s.rule,
                "conv_steps": s.conv_steps,
                "conv_rules": s.conv_rules,
                "rho_additions": s.rho_additions,
                "term": s.term,
                "config": s.config,
            });
            if let Some(seed) = seed {
                v["seed"] = json!(seed);
            }
            v
        })
        .collect();
    let mut v = json!({ "kind": "verdict", "verdict": r.verdict });
    if let Some(seed) = seed {
        v["seed"] = json!(seed);
    }
    out.push(v);
    out
}

fn print_verdict(v: &Verdict) {
    match v {
        Verdict::Matched { value, config } => {
            println!("verdict: matched, {value} against {config}")
        }
        Verdict::CapsuleStuck {
            message,
            conventional,
        } => {
            println!("verdict: capsule check failed");
            println!("  {message}");
            println!("  conventional side {conventional}");
        }
        Verdict::Stuck { message } => println!("verdict: stuck, {message}"),
        Verdict::FuelExhausted => println!("verdict: fuel exhausted"),
        Verdict::ValueMismatch { value, config } => {
            println!("verdict: value mismatch, {value} against {config}")
        }
        Verdict::Violation {
            index,
            rule,
            term,
            attempts,
        } => {
            println!("verdict: violation at step {index} ({rule})");
            println!("  term: {term}");
            for a in attempts {
                println!(
                    "  after {} conventional steps: {}: {}",
                    a.conv_steps, a.config, a.reason
                );
            }
        }
        Verdict::NotErasable { message } => println!("verdict: not erasable, {message}"),
    }
}

fn simulate_cmd(
    path: &Path,
    opts: SimOptions,
    annot: Annot,
    strict_affine: bool,
    report: Option<&Path>,
) -> Result<u8, InputError> {
    let p = load_checked(path, annot, strict_affine)?;
    let r = simulate_run(&p.main, &p.ct, opts);
    println!("start: {}", r.start);
    println!("erased: {}", r.initial_config);
    println!("rho: {}", r.initial_rho);
    for s in &r.records {
        let rules: Vec<&str> = s.conv_rules.iter().map(|r| r.as_str()).collect();
        println!("{:>4}  {:<14} {}", s.index + 1, s.rule.as_str(), s.term);
        println!(
            "      conventional {} [{}] {}",
            s.conv_steps,
            rules.join(", "),
            s.config
        );
        if !s.rho_additions.is_empty() {
            println!("      rho + {}", s.rho_additions.join(", "));
        }
    }
    let counts: Vec<String> = r.conv_counts().iter().map(|n| n.to_string()).collect();
    println!("conventional steps per step: {}", counts.join(","));
    print_verdict(&r.verdict);
    if let Some(path) = report {
        write_records(path, &sim_records(None, &r))?;
    }
    Ok(verdict_code(&r.verdict))
}

fn fuzz_cmd(
    seed: u64,
    count: usize,
    gen: GenConfig,
    opts: SimOptions,
    report: Option<&Path>,
) -> Result<u8, InputError> {
    let ct: ClassTable = fuzz_class_table();
    let entries = gen_corpus(seed, count, &ct, gen);
    let ill: Vec<&Expr> = entries
        .iter()
        .map(|e| &e.program)
        .filter(|e| !well_formed(e, &ct, true).is_empty())
        .collect();
    let outcomes = simulate_corpus(&entries, &ct, opts);
    let s = summarize(&outcomes);
    println!("programs: {}", s.programs);
    println!("ill-formed: {}", ill.len());
    println!("syntactic steps: {}", s.syntactic_steps);
    println!("conventional steps: {}", s.conventional_steps);
    println!("max conventional steps per step: {}", s.max_conv_steps);
    println!("matched: {}", s.matched);
    println!("capsule check failed: {}", s.capsule_stuck);
    println!("stuck: {}", s.stuck);
    println!("fuel exhausted: {}", s.fuel_exhausted);
    println!("not erasable: {}", s.not_erasable);
    println!("violations: {}", s.violations);
    for o in outcomes.iter().filter(|o| o.report.is_violation()) {
        println!("violation in seed {}: {}", o.seed, o.program);
    }
    if let Some(path) = report {
        let records: Vec<serde_json::Value> = outcomes
            .iter()
            .flat_map(|o| sim_records(Some(o.seed), &o.report))
            .collect();
        write_records(path, &records)?;
    }
    Ok(if s.violations == 0 && ill.is_empty() {
        OK
    } else {
        FAILED
    })
}
