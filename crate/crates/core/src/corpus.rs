//! Batch co-simulation over a generated corpus. With the `parallel`
//! feature the batch is spread over a rayon pool; results keep corpus
//! order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;

use crate::ast::{ClassTable, Expr};
use crate::gen::{gen_program, GenConfig};
use crate::matching::{simulate_run, SimOptions, SimReport, Verdict};
use crate::print::render;

#[derive(Clone, Debug)]
pub struct Entry {
    pub seed: u64,
    pub program: Expr,
}

/// `count` programs with seeds `seed, seed+1, …`.
pub fn gen_corpus(seed: u64, count: usize, ct: &ClassTable, cfg: GenConfig) -> Vec<Entry> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            Entry {
                seed: s,
                program: gen_program(s, ct, cfg),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub seed: u64,
    pub program: String,
    pub report: SimReport,
}

fn simulate_entry(e: &Entry, ct: &ClassTable, opts: SimOptions) -> Outcome {
    Outcome {
        seed: e.seed,
        program: render(&e.program),
        report: simulate_run(&e.program, ct, opts),
    }
}

pub fn simulate_corpus_sequential(
    entries: &[Entry],
    ct: &ClassTable,
    opts: SimOptions,
) -> Vec<Outcome> {
    entries
        .iter()
        .map(|e| simulate_entry(e, ct, opts))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn simulate_corpus(entries: &[Entry], ct: &ClassTable, opts: SimOptions) -> Vec<Outcome> {
    entries
        .par_iter()
        .map(|e| simulate_entry(e, ct, opts))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn simulate_corpus(entries: &[Entry], ct: &ClassTable, opts: SimOptions) -> Vec<Outcome> {
    simulate_corpus_sequential(entries, ct, opts)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub programs: usize,
    pub syntactic_steps: usize,
    pub conventional_steps: usize,
    pub matched: usize,
    pub capsule_stuck: usize,
    pub stuck: usize,
    pub fuel_exhausted: usize,
    pub not_erasable: usize,
    pub violations: usize,
    pub max_conv_steps: usize,
}

pub fn summarize(outcomes: &[Outcome]) -> Summary {
    let mut s = Summary {
        programs: outcomes.len(),
        ..Summary::default()
    };
    for o in outcomes {
        let r = &o.report;
        s.syntactic_steps += r.records.len();
        s.conventional_steps += r.records.iter().map(|x| x.conv_steps).sum::<usize>();
        s.max_conv_steps = s
            .max_conv_steps
            .max(r.records.iter().map(|x| x.conv_steps).max().unwrap_or(0));
        match r.verdict {
            Verdict::Matched { .. } => s.matched += 1,
            Verdict::CapsuleStuck { .. } => s.capsule_stuck += 1,
            Verdict::Stuck { .. } => s.stuck += 1,
            Verdict::FuelExhausted => s.fuel_exhausted += 1,
            Verdict::NotErasable { .. } => s.not_erasable += 1,
            Verdict::Violation { .. } | Verdict::ValueMismatch { .. } => s.violations += 1,
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::fuzz_class_table;

    #[test]
    fn parallel_and_sequential_agree() {
        let ct = fuzz_class_table();
        let entries = gen_corpus(7, 40, &ct, GenConfig::default());
        let a = simulate_corpus(&entries, &ct, SimOptions::default());
        let b = simulate_corpus_sequential(&entries, &ct, SimOptions::default());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
