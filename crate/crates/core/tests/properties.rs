use std::collections::BTreeSet;

use capsule_core::ast::{annotate, binders_unique, free_vars, well_formed, AnnotPolicy, Expr};
use capsule_core::congruence::{alpha_eq, canonicalize, congruent};
use capsule_core::conventional::Config;
use capsule_core::gen::{fuzz_class_table, gen_program, GenConfig};
use capsule_core::matching::{
    erase, match_check, match_context, match_infer, simulate_step, value_matches, RhoMap,
};
use capsule_core::parse::parse_expr;
use capsule_core::print::{render, render_annotated};
use capsule_core::syntactic::{decompose, session_fresh, step_with, StepOutcome};
use proptest::prelude::*;

fn program(seed: u64) -> Expr {
    gen_program(seed, &fuzz_class_table(), GenConfig::default())
}

/// Matched states `(e, cfg, ρ)` of a co-run, at most `fuel` steps long.
fn corun(e: &Expr, fuel: usize) -> Vec<(Expr, Config, RhoMap)> {
    let ct = fuzz_class_table();
    let (cfg, rho) = erase(e).expect("generated programs erase");
    let mut states = vec![(e.clone(), cfg, rho)];
    let mut fresh = session_fresh(e, &ct);
    for _ in 0..fuel {
        let (cur, cfg, rho) = states.last().unwrap().clone();
        let StepOutcome::Step { term, .. } = step_with(&cur, &ct, &mut fresh) else {
            break;
        };
        let s = simulate_step(&term, &cfg, &rho, &ct, 8).expect("step is simulated");
        states.push((term, s.cfg, s.rho));
    }
    states
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_programs_are_well_formed(seed in any::<u64>()) {
        let e = program(seed);
        prop_assert!(free_vars(&e).is_empty());
        prop_assert!(binders_unique(&e));
        prop_assert_eq!(well_formed(&e, &fuzz_class_table(), true), vec![]);
        prop_assert_eq!(program(seed), e);
    }

    #[test]
    fn parse_render_round_trip(seed in any::<u64>()) {
        let e = program(seed);
        let p1 = parse_expr(&render_annotated(&e)).unwrap();
        let p2 = parse_expr(&render_annotated(&p1)).unwrap();
        prop_assert_eq!(&p1, &p2);
        prop_assert!(alpha_eq(&p1, &e));
        let plain = parse_expr(&render(&e)).unwrap();
        prop_assert!(congruent(&plain, &e));
    }

    #[test]
    fn erasure_matches(seed in any::<u64>()) {
        let e = program(seed);
        let (cfg, rho) = erase(&e).unwrap();
        prop_assert!(match_check(&e, &cfg, &rho));
        prop_assert!(rho.is_injective());
        prop_assert!(cfg.mem.is_closed());
    }

    #[test]
    fn inferred_rho_is_least(seed in any::<u64>()) {
        let e = program(seed);
        let (cfg, rho) = erase(&e).unwrap();
        let inferred = match_infer(&e, &cfg, &RhoMap::new()).unwrap();
        prop_assert!(match_check(&e, &cfg, &inferred));
        prop_assert_eq!(inferred.len(), rho.len());
        for (o, _) in inferred.iter() {
            let mut smaller = inferred.clone();
            smaller.remove(o);
            prop_assert!(!match_check(&e, &cfg, &smaller));
        }
    }

    #[test]
    fn corun_invariants(seed in any::<u64>()) {
        let states = corun(&program(seed), 60);
        for w in states.windows(2) {
            let (_, c0, r0) = &w[0];
            let (_, c1, r1) = &w[1];
            prop_assert!(r1.extends(r0));
            prop_assert!(r1.is_injective());
            prop_assert!(c0.mem.objs.keys().all(|o| c1.mem.contains(*o)));
        }
        for (e, cfg, rho) in &states {
            prop_assert!(cfg.mem.is_closed());
            prop_assert!(match_check(e, cfg, rho));
        }
    }

    // e ▷ρ ⟨ê | μ⟩ through a decomposition E[e'] exactly when directly
    #[test]
    fn context_decomposition_agrees(seed in any::<u64>()) {
        let states = corun(&program(seed), 30);
        for (i, (e, _, rho)) in states.iter().enumerate() {
            let d = decompose(e.clone());
            for (j, (_, cfg, _)) in states.iter().enumerate().filter(|(j, _)| j.abs_diff(i) <= 2) {
                let direct = match_check(e, cfg, rho);
                prop_assert_eq!(match_context(&d.path, &d.hole, cfg, rho), direct, "state {} vs config {}", i, j);
                if j == i {
                    prop_assert!(direct);
                }
            }
        }
    }

    #[test]
    fn final_values_match(seed in any::<u64>()) {
        let states = corun(&program(seed), 500);
        let (e, cfg, rho) = states.last().unwrap();
        let ct = fuzz_class_table();
        if matches!(step_with(e, &ct, &mut session_fresh(e, &ct)), StepOutcome::Done(_)) {
            prop_assert!(value_matches(e, &cfg.expr, rho));
        }
    }

    #[test]
    fn congruence_is_stable_under_annotation(seed in any::<u64>()) {
        let e = program(seed);
        let all = annotate(&e, AnnotPolicy::All);
        prop_assert!(congruent(&e, &all));
        prop_assert_eq!(canonicalize(&canonicalize(&e)), canonicalize(&e));
    }
}

#[test]
fn minimality_needs_every_pair() {
    let e = parse_expr("{D x=new D(y); D y=new D(x); x.f}").unwrap();
    let (cfg, rho) = erase(&e).unwrap();
    let ids: BTreeSet<_> = rho.iter().map(|(o, _)| o).collect();
    assert_eq!(ids.len(), 2);
    assert!(!match_check(&e, &cfg, &RhoMap::new()));
}

#[test]
fn decomposition_check_sees_both_answers() {
    let (mut yes, mut no) = (0, 0);
    for seed in 0..40 {
        let states = corun(&program(seed), 30);
        for (i, (e, _, rho)) in states.iter().enumerate() {
            let d = decompose(e.clone());
            for (_, cfg, _) in states.iter().skip(i.saturating_sub(2)).take(5) {
                let direct = match_check(e, cfg, rho);
                assert_eq!(match_context(&d.path, &d.hole, cfg, rho), direct);
                if direct {
                    yes += 1;
                } else {
                    no += 1;
                }
            }
        }
    }
    assert!(yes > 0 && no > 0, "{yes} matched, {no} mismatched");
}
