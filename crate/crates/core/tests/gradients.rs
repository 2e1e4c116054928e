use maae_core::gradsuite::{run_suite, COMPOSITE_TOL, INSTANCES, TOL};

#[test]
fn every_operation_matches_finite_differences() {
    let entries = run_suite().unwrap();
    assert!(entries.len() >= 30);
    for e in &entries {
        println!("{:<36} {:>3} {:.3e}", e.name, e.instances, e.max_rel_error);
        assert!(e.instances >= INSTANCES);
        assert!(e.passed(), "{} worst {:.3e} > {:.0e}", e.name, e.max_rel_error, e.tol);
    }
    let composites = entries.iter().filter(|e| e.name.starts_with("composite")).count();
    assert_eq!(composites, 5);
    assert!(entries.iter().filter(|e| e.tol == TOL).count() + composites == entries.len());
    assert!(entries.iter().all(|e| e.tol <= COMPOSITE_TOL));
}
