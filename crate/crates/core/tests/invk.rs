use capsule_core::gen::{check_call, fuzz_class_table, sample_calls};

#[test]
fn invk_then_decs_is_direct_substitution() {
    let ct = fuzz_class_table();
    let calls = sample_calls(5, 200, &ct);
    assert_eq!(calls.len(), 200);
    let mut methods = std::collections::BTreeSet::new();
    for c in &calls {
        check_call(c, &ct).unwrap_or_else(|e| panic!("{}.{}: {e}", c.recv, c.method));
        methods.insert(c.method.clone());
    }
    // every method of the table is exercised
    assert_eq!(methods.len(), 8);
}
