use limm_core::gradsuite::component_cases;

#[test]
fn every_component_passes_gradient_check_over_100_seeds() {
    for case in component_cases() {
        let start = std::time::Instant::now();
        let worst = case.worst_over(0..100, 1e-6).unwrap();
        eprintln!("{}: worst {worst:e} in {:?}", case.name, start.elapsed());
        assert!(worst < 1e-6, "{}: worst relative error {worst:e}", case.name);
    }
}
