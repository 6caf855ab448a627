//! Diagnostic (ignored by default): print FD agreement margins.
mod common;
use common::*;
use mpsp_core::fourier::{BasisMap, FourierWeights};
use mpsp_core::sensitivity::accumulate;

#[test]
#[ignore]
fn print_margins() {
    let fx = two_switch_fixture();
    let base = fx.propagate();
    let bundle = accumulate(&base, &fx.weights, &fx.map, &fx.params).unwrap();
    let bv_fd = fd_b_v(&fx, &base, 1e-6);
    println!("two-switch B_v worst: {:.3e}", max_column_rel_error(&bundle.b_v, &bv_fd));
    for (j, n, e) in column_rel_errors(&bundle.b_v, &bv_fd) {
        println!("  col {j}: |fd| = {n:.3e} rel = {e:.3e}");
    }

    let mut fx = two_switch_fixture();
    fx.x0.lambda_m = 3.0;
    fx.tf = 1.5;
    fx.map = BasisMap { eta0: 0.0, etaf: std::f64::consts::PI, t0: 0.0, tf: 1.5 };
    let base = fx.propagate();
    let bundle = accumulate(&base, &fx.weights, &fx.map, &fx.params).unwrap();
    let bv_fd = fd_b_v(&fx, &base, 1e-5);
    println!("thrust-only B_v worst: {:.3e}", max_column_rel_error(&bundle.b_v, &bv_fd));
    for (j, n, e) in column_rel_errors(&bundle.b_v, &bv_fd) {
        println!("  col {j}: |fd| = {n:.3e} rel = {e:.3e}");
    }
    let _ = FourierWeights::zeros(1);
}
