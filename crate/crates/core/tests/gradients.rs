mod common;

use common::{gradient_suite, GRAD_TOL};

#[test]
fn every_component_matches_finite_differences() {
    let results = gradient_suite();
    for (name, worst) in &results {
        println!("{name:<14} worst relative error {worst:.2e}");
    }
    for (name, worst) in results {
        assert!(worst <= GRAD_TOL, "{name}: {worst:e}");
    }
}
