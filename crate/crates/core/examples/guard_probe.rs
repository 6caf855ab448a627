use mpsp_core::continuation::*;
use mpsp_core::dynamics::AugmentedState;
use mpsp_core::fourier::{fit_weights_least_squares, BasisMap, FourierControl};
use mpsp_core::mpsp::*;
use mpsp_core::nominal::{solve_fuel_optimal, NominalOptions};
use mpsp_core::propagate::propagate_segmented;
use mpsp_core::scenario::load_scenario;
use mpsp_core::sensitivity::accumulate;

fn main() {
    let sc = load_scenario(&std::fs::read_to_string("scenarios/apophis.json").unwrap()).unwrap();
    let nom = solve_fuel_optimal(&sc, &NominalOptions::default()).unwrap();
    let map = BasisMap::standard(sc.t0, sc.tf);
    let eps0 = fit_weights_least_squares(&nom.control_samples(), 15, &map).unwrap();
    let weights = NewtonWeights::identity(eps0.n_weights());
    let spec = ConvergenceSpec::default();
    let h_max = sc.h_max(0.0005);
    let d = [1.6712e-2, -1.0659e-2, -4.1460e-2, 1.0876e-2, 2.3763e-2, 4.6091e-2];
    let kappa = -1.0;
    let mut c_per = BoundaryConditions::reference(&sc);
    for i in 0..3 {
        c_per.r0[i] += kappa * d[i];
        c_per.v0[i] += kappa * d[3 + i];
    }
    let c_ref = BoundaryConditions::reference(&sc);

    // walk the tol=0 sweep to tau=0.5 warm start (0.25 -> ... mimic: just run
    // inner at tau=0.4688 then try tau=0.5)
    let mut eps = eps0.clone();
    let mut lam = nom.lambda_m0();
    for tau in [0.25, 0.375, 0.4375, 0.46875] {
        let c_tau = blend_conditions(&c_ref, &c_per, tau).unwrap();
        let ctx = InnerLoopContext {
            scenario: &sc, map: &map, newton_weights: &weights, spec: &spec,
            h_max, n_seg_ref: nom.n_seg(), n_seg_tol: 0,
        };
        let res = inner_loop(&ctx, &c_tau, eps.clone(), lam);
        println!("tau={tau}: sign={} iters={}", res.sign, res.iterations);
        if res.sign == 1 { eps = res.eps.clone(); lam = res.lambda_m0; }
    }
    // now manual Newton at tau=0.5: inspect trial structures
    let tau = 0.5;
    let c_tau = blend_conditions(&c_ref, &c_per, tau).unwrap();
    let params = c_tau.dyn_params(sc.mu);
    let prop = |e: &mpsp_core::fourier::FourierWeights, l: f64| {
        let x0 = AugmentedState { r: c_tau.r0, v: c_tau.v0, m: c_tau.m0, lambda_m: l };
        propagate_segmented(&x0, &FourierControl::new(e, &map), &params, sc.t0, sc.tf, h_max)
    };
    let traj = prop(&eps, lam).unwrap();
    let err = terminal_error(&traj, &c_tau, &sc.units);
    println!("start |dY| = {:.4e}, n_seg = {}", err.canonical_norm, count_segments(&traj));
    let bundle = accumulate(&traj, &eps, &map, &params).unwrap();
    let (de, dl, _) = newton_direction(&bundle.a, &bundle.b_v, &err.delta, &weights).unwrap();
    let mut k = 1.0f64;
    for _ in 0..8 {
        let e2 = eps.add_scaled(&de, -k).unwrap();
        let l2 = lam - k * dl;
        match prop(&e2, l2) {
            Ok(t2) => {
                let durations: Vec<String> = t2.segments.iter()
                    .map(|s| format!("{}:{:.4}", s.u, s.duration())).collect();
                println!("kappa={k:<9.5}: n_seg={} [{}]", count_segments(&t2), durations.join(" "));
            }
            Err(e) => println!("kappa={k:<8.5}: prop failed {e}"),
        }
        k /= 2.0;
    }
}
