mod common;

use common::cases::{build, MODELS, OPS};
use common::check_gradients;

fn worst_over_seeds(name: &str, seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let case = build(name, seed);
        let r = check_gradients(&case.inputs, &case.build, seed, case.max_coords);
        if r.max_rel > worst {
            println!("{name} seed {seed}: {:.3e} ({}), {} checked, {} skipped", r.max_rel, r.worst, r.coords, r.skipped);
        }
        worst = worst.max(r.max_rel);
    }
    worst
}

#[test]
fn matmul_and_dense_match_finite_differences_tightly() {
    for name in ["matmul", "dense"] {
        assert!(worst_over_seeds(name, 0..5) <= 1e-6, "{name}");
    }
}

#[test]
fn layer_ops_match_finite_differences() {
    for name in OPS {
        let w = worst_over_seeds(name, 100..103);
        assert!(w <= 1e-4, "{name}: {w:e}");
    }
}

#[test]
fn composed_models_match_finite_differences() {
    for name in MODELS {
        let w = worst_over_seeds(name, 200..201);
        assert!(w <= 1e-4, "{name}: {w:e}");
    }
}
