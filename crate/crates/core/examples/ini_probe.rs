use mpsp_core::continuation::*;
use mpsp_core::fourier::{fit_weights_least_squares, BasisMap};
use mpsp_core::mpsp::*;
use mpsp_core::nominal::{solve_fuel_optimal, NominalOptions};
use mpsp_core::scenario::load_scenario;

fn main() {
    let sc = load_scenario(&std::fs::read_to_string("scenarios/apophis.json").unwrap()).unwrap();
    let nom = solve_fuel_optimal(&sc, &NominalOptions::default()).unwrap();
    let map = BasisMap::standard(sc.t0, sc.tf);
    let eps0 = fit_weights_least_squares(&nom.control_samples(), 15, &map).unwrap();
    let weights = NewtonWeights::identity(eps0.n_weights());
    let spec = ConvergenceSpec::default();
    let ctx = GuidanceContext {
        scenario: &sc, map: &map, newton_weights: &weights, spec: &spec,
        h_max: sc.h_max(0.0005), outer: OuterOptions::default(),
    };
    let d = [1.6712e-2, -1.0659e-2, -4.1460e-2, 1.0876e-2, 2.3763e-2, 4.6091e-2];
    let kappa = -1.0;
    let mut c = BoundaryConditions::reference(&sc);
    for i in 0..3 {
        c.r0[i] += kappa * d[i];
        c.v0[i] += kappa * d[3 + i];
    }
    let sol = outer_loop(&ctx, &c, &nom, &eps0);
    println!("converged={} total={} fuel={}", sol.converged(), sol.total_newton_iterations, sol.fuel_used * 25.0);
    for t in &sol.trace {
        if t.sign == 0 {
            println!("tau={:<8.4} tol={} iters={:<3} FAIL: {}", t.tau, t.n_seg_tol, t.inner_iterations,
                t.failure.as_deref().unwrap_or("?"));
        } else {
            println!("tau={:<8.4} tol={} iters={:<3} ok", t.tau, t.n_seg_tol, t.inner_iterations);
        }
    }
}
