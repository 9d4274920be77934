use capsule_core::check::check_trace;
use capsule_core::corpus::gen_corpus;
use capsule_core::gen::{fuzz_class_table, GenConfig};
use capsule_core::syntactic::run;

#[test]
fn fuzz_traces_are_rule_instances() {
    let ct = fuzz_class_table();
    for e in gen_corpus(100, 120, &ct, GenConfig::default()) {
        let t = run(&e.program, &ct, 500);
        if let Err((i, err)) = check_trace(&t, &ct) {
            panic!("seed {}: step {i}: {err}", e.seed);
        }
    }
}
