use mpsp_core::continuation::BoundaryConditions;
use mpsp_core::dynamics::FullCostate;
use mpsp_core::nominal::*;
use mpsp_core::scenario::load_scenario;
use nalgebra::Vector3;

fn main() {
    let sc = load_scenario(&std::fs::read_to_string("scenarios/apophis.json").unwrap()).unwrap();
    let opts = NominalOptions::default();
    let nom = solve_fuel_optimal(&sc, &opts).unwrap();
    let mut cond = BoundaryConditions::reference(&sc);
    cond.rf += Vector3::new(-0.02, -0.02, -0.02);

    // residual at the nominal costate under perturbed conditions
    let lam_ref = nom.lambda0_costate();
    for rho in [0.0, 1e-3] {
        let mut c2 = sc.clone();
        c2.rf = cond.rf;
        let r = shooting_residual(&lam_ref, rho, &c2, sc.h_max(0.0005)).unwrap();
        println!("rho={rho}: residual from nominal lambda0 = {:.4e}", r.norm());
    }
    let t0 = std::time::Instant::now();
    match reoptimize(&sc, &cond, &nom, None, &opts) {
        Ok(r) => println!(
            "reoptimize OK in {:.1?}: exact={} mf = {:.4} kg, n_seg = {}, residual {:.2e}",
            t0.elapsed(), r.exact, r.solution.final_mass * 25.0, r.solution.n_seg(), r.solution.residual_norm
        ),
        Err(e) => println!("reoptimize FAILED in {:.1?}: {e}", t0.elapsed()),
    }
    // what does lambda look like vs nominal?
    let _ = FullCostate {
        lambda_r: Vector3::zeros(),
        lambda_v: Vector3::zeros(),
        lambda_m: 0.0,
    };
}
