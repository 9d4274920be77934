//! Acceptance suite: ten criteria, one PASS/FAIL line each.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use capsule_core::ast::{well_formed, AnnotPolicy, Expr};
use capsule_core::check::check_trace;
use capsule_core::congruence::congruent;
use capsule_core::conventional::{crun, render_config, CHalt};
use capsule_core::corpus::{gen_corpus, simulate_corpus, simulate_corpus_sequential, summarize};
use capsule_core::gen::{check_call, fuzz_class_table, sample_calls, GenConfig};
use capsule_core::matching::{erase, match_infer, simulate_run, RhoMap, SimOptions, Verdict};
use capsule_core::oracle::{brute_congruent, sample_pairs};
use capsule_core::parse::{parse_expr, parse_program, Program};
use capsule_core::print::render;
use capsule_core::syntactic::{run, Halt, RuleName, Stuck};

fn program_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../programs")
        .join(format!("{name}.cap"))
}

fn load(name: &str) -> Program {
    let src = std::fs::read_to_string(program_path(name)).unwrap();
    parse_program(&src, AnnotPolicy::Reach).unwrap()
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsule"))
        .args(args)
        .output()
        .unwrap()
}

fn cli_file(args: &[&str], name: &str) -> Output {
    let path = program_path(name);
    let mut all = args.to_vec();
    all.push(path.to_str().unwrap());
    cli(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn term(s: &str) -> Expr {
    parse_expr(s).unwrap()
}

/// Returns a short detail string; panics on failure.
type Criterion = fn() -> String;

fn c1_golden_ex1() -> String {
    let p = load("ex1");
    let t0 = Instant::now();
    let t = run(&p.main, &p.ct, 100);
    let Halt::Value(v) = &t.halt else {
        panic!("halted with {:?}", t.halt)
    };
    assert!(
        congruent(v, &term("{D z=new D(z); z}")),
        "final term {}",
        render(v)
    );
    check_trace(&t, &p.ct).unwrap_or_else(|(i, e)| panic!("step {}: {e}", i + 1));
    let took = t0.elapsed();
    assert!(took < Duration::from_secs(1), "took {took:?}");
    format!(
        "{} steps, all rule instances checked, final {}",
        t.steps.len(),
        render(v)
    )
}

fn c2_golden_ex2() -> String {
    let p = load("ex2");
    let t = run(&p.main, &p.ct, 100);
    let Halt::Stuck(Stuck::CapsuleCheckFailed { var, free, .. }) = &t.halt else {
        panic!("halted with {:?}", t.halt)
    };
    let names: Vec<String> = free.iter().map(|x| x.name.to_string()).collect();
    assert_eq!(names, ["y"]);
    let o = cli_file(&["run"], "ex2");
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("free variables: y"), "{}", stdout(&o));
    format!("capsule check on {} fails naming y, exit code 2", var.name)
}

fn c3_assignment() -> String {
    let p = load("assign");
    let t = run(&p.main, &p.ct, 100);
    let rules = t.rules();
    let mb = rules
        .iter()
        .position(|r| *r == RuleName::MoveBody)
        .expect("move-body fires");
    let fa = rules
        .iter()
        .position(|r| *r == RuleName::FieldAssign)
        .expect("field-assign fires");
    assert!(mb < fa, "{rules:?}");
    let target = term("{A a=new A(0); B b=new B(a1); A a1=new A(1); a1}");
    assert!(
        congruent(&t.steps[fa].term, &target),
        "{}",
        render(&t.steps[fa].term)
    );
    check_trace(&t, &p.ct).unwrap_or_else(|(i, e)| panic!("step {}: {e}", i + 1));
    let names: Vec<&str> = rules.iter().map(|r| r.as_str()).collect();
    format!("rules {}", names.join(", "))
}

fn c4_affine_pair() -> String {
    let p = load("affine");
    let t = run(&p.main, &p.ct, 100);
    assert_eq!(t.halt, Halt::Value(Expr::Int(0)));
    let (cfg, _) = erase(&p.main).unwrap();
    let ct = crun(&cfg, &p.ct, 100);
    assert!(matches!(ct.halt, CHalt::Value(_)));
    assert_eq!(render_config(ct.last()), "⟨0 | #0↦C(0)⟩");
    let r = simulate_run(&p.main, &p.ct, SimOptions::default());
    assert!(!r.is_violation());
    let Verdict::Matched { value, config } = &r.verdict else {
        panic!("{:?}", r.verdict)
    };
    assert_eq!((value.as_str(), config.as_str()), ("0", "⟨0 | #0↦C(0)⟩"));
    let counts: Vec<String> = r.conv_counts().iter().map(|n| n.to_string()).collect();
    let o = cli_file(&["simulate"], "affine");
    assert_eq!(o.status.code(), Some(0));
    format!(
        "0 and {config}, conventional steps per step {}",
        counts.join(",")
    )
}

fn c5_duplication() -> String {
    let p = load("duplication");
    assert!(!well_formed(&p.main, &p.ct, true).is_empty());
    assert!(well_formed(&p.main, &p.ct, false).is_empty());
    let t = run(&p.main, &p.ct, 100);
    assert_eq!(t.halt, Halt::Value(Expr::Int(0)));
    let (cfg, rho) = erase(&p.main).unwrap();
    let conv = crun(&cfg, &p.ct, 100);
    assert_eq!(conv.last().expr, Expr::Int(3));
    // the term after affine-elim matches no configuration of the heap run
    let ai = t
        .rules()
        .iter()
        .position(|r| *r == RuleName::AffineElim)
        .expect("affine-elim fires");
    let after = &t.steps[ai].term;
    let mut configs = vec![conv.start.clone()];
    configs.extend(conv.steps.iter().map(|s| s.cfg.clone()));
    for c in &configs {
        assert!(
            match_infer(after, c, &rho).is_err(),
            "matched {}",
            render_config(c)
        );
        assert!(match_infer(after, c, &RhoMap::new()).is_err());
    }
    let r = simulate_run(&p.main, &p.ct, SimOptions::default());
    let Verdict::Violation { rule, .. } = &r.verdict else {
        panic!("{:?}", r.verdict)
    };
    assert_eq!(*rule, RuleName::AffineElim);
    let o = cli_file(&["simulate", "--no-strict-affine"], "duplication");
    assert_eq!(o.status.code(), Some(3));
    format!(
        "0 vs 3, no ρ after affine-elim against any of {} configurations",
        configs.len()
    )
}

fn c6_theorem_property() -> String {
    let ct = fuzz_class_table();
    let t0 = Instant::now();
    let entries = gen_corpus(
        0,
        1000,
        &ct,
        GenConfig {
            max_depth: 5,
            max_decls: 6,
        },
    );
    let opts = SimOptions {
        fuel: 500,
        max_conv_steps: 8,
    };
    let outcomes = simulate_corpus(&entries, &ct, opts);
    let s = summarize(&outcomes);
    let took = t0.elapsed();
    assert_eq!(s.programs, 1000);
    for o in &outcomes {
        assert!(
            !o.report.is_violation(),
            "seed {}: {:?}",
            o.seed,
            o.report.verdict
        );
    }
    assert_eq!(s.violations, 0);
    assert!(s.max_conv_steps <= 8);
    assert!(s.matched > 0);
    assert!(took < Duration::from_secs(120), "took {took:?}");
    format!(
        "{} programs, {} steps matched, {} values matched, {} capsule-stuck, {} stuck, 0 violations, {:.1}s",
        s.programs,
        s.syntactic_steps,
        s.matched,
        s.capsule_stuck,
        s.stuck,
        took.as_secs_f64()
    )
}

fn c7_congruence_oracle() -> String {
    let pairs = sample_pairs(2024, 300);
    let mut positive = 0;
    for (a, b) in &pairs {
        let fast = congruent(a, b);
        assert_eq!(
            fast,
            brute_congruent(a, b, 6),
            "{} vs {}",
            render(a),
            render(b)
        );
        positive += fast as usize;
    }
    format!("{} pairs agree ({} congruent)", pairs.len(), positive)
}

fn c8_non_termination_guard() -> String {
    let p = load("cycle");
    let t = run(&p.main, &p.ct, 100);
    assert!(matches!(t.halt, Halt::Value(_)), "{:?}", t.halt);
    assert!(!t.rules().contains(&RuleName::New));
    let p = load("cycle_affine");
    let t = run(&p.main, &p.ct, 100);
    assert_eq!(t.rules(), vec![RuleName::New]);
    assert!(
        matches!(t.halt, Halt::Stuck(Stuck::CapsuleCheckFailed { .. })),
        "{:?}",
        t.halt
    );
    "plain cycle is a value, affine cycle stops after one new".into()
}

fn c9_invk_equivalence() -> String {
    let ct = fuzz_class_table();
    let calls = sample_calls(9, 150, &ct);
    for c in &calls {
        check_call(c, &ct).unwrap_or_else(|e| panic!("{}.{}: {e}", c.recv, c.method));
    }
    format!("{} calls", calls.len())
}

fn c10_determinism() -> String {
    let dir = std::env::temp_dir().join(format!("capsule-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let report = |i: usize| dir.join(format!("fuzz{i}.jsonl"));
    let runs: Vec<Vec<String>> = vec![
        vec!["parse".into(), program_path("ex1").display().to_string()],
        vec!["run".into(), program_path("ex1").display().to_string()],
        vec!["run".into(), program_path("ex2").display().to_string()],
        vec!["trace".into(), program_path("assign").display().to_string()],
        vec![
            "trace".into(),
            "--calculus".into(),
            "conventional".into(),
            program_path("affine").display().to_string(),
        ],
        vec![
            "simulate".into(),
            program_path("affine").display().to_string(),
        ],
        vec![
            "simulate".into(),
            "--no-strict-affine".into(),
            program_path("duplication").display().to_string(),
        ],
        vec!["run".into(), program_path("cycle").display().to_string()],
        vec![
            "run".into(),
            program_path("cycle_affine").display().to_string(),
        ],
    ];
    for args in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (a, b) = (cli(&args), cli(&args));
        assert_eq!(a.stdout, b.stdout, "{args:?}");
        assert_eq!(a.status.code(), b.status.code(), "{args:?}");
    }
    let fuzz = |i: usize| {
        let r = report(i);
        cli(&[
            "fuzz",
            "--seed",
            "3",
            "--count",
            "150",
            "--max-depth",
            "5",
            "--report",
            r.to_str().unwrap(),
        ])
    };
    let (a, b) = (fuzz(0), fuzz(1));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(
        std::fs::read(report(0)).unwrap(),
        std::fs::read(report(1)).unwrap()
    );
    let ct = fuzz_class_table();
    let entries = gen_corpus(5, 100, &ct, GenConfig::default());
    let par =
        serde_json::to_string(&simulate_corpus(&entries, &ct, SimOptions::default())).unwrap();
    let seq = serde_json::to_string(&simulate_corpus_sequential(
        &entries,
        &ct,
        SimOptions::default(),
    ))
    .unwrap();
    assert_eq!(par, seq);
    std::fs::remove_dir_all(&dir).ok();
    format!(
        "{} commands and fuzz reports byte-identical",
        runs.len() + 1
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, Criterion); 10] = [
        ("golden trace ex1", c1_golden_ex1),
        ("golden stuck ex2", c2_golden_ex2),
        ("assignment example", c3_assignment),
        ("affine paired traces", c4_affine_pair),
        ("duplication counterexample", c5_duplication),
        ("simulation property on 1000 programs", c6_theorem_property),
        ("congruence oracle equivalence", c7_congruence_oracle),
        ("non-termination guard", c8_non_termination_guard),
        ("invk equivalence", c9_invk_equivalence),
        ("determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let line = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => format!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(e) => {
                failed.push(i + 1);
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("criterion {:>2} FAIL  {name}: {msg}", i + 1)
            }
        };
        // written past the harness's capture so the lines always show
        writeln!(out, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
