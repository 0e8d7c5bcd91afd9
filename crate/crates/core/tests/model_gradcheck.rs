//! Reverse-mode gradients against central finite differences, in f64.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use gradcheck::{config, max_relative_error, weights};

#[test]
fn gradient_check_small_step() {
    let cfg = config();
    assert!(cfg.param_count() <= 10_000);
    let (err, name) = max_relative_error(&weights(&cfg, 10.0), 1e-5);
    assert!(err < 1e-4, "{name}: {err:e}");
}

#[test]
fn gradient_check_every_segment_at_1e3() {
    let cfg = config();
    let (err, name) = max_relative_error(&weights(&cfg, 10.0), 1e-3);
    println!("max relative error {err:e} ({name})");
    assert!(err < 1e-3, "{name}: {err:e}");
}
