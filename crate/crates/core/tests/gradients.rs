mod common;

#[test]
fn every_op_and_loss_matches_central_differences() {
    let results = common::gradient_suite(20, 0x6772_6164);
    let failing: Vec<_> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= common::TOLERANCE)
        .collect();
    for (name, err) in &results {
        println!("{name:<28} max rel err {err:.3e}");
    }
    assert!(failing.is_empty(), "gradient mismatches: {failing:?}");
}
