use mpsp_core::nominal::{solve_fuel_optimal, NominalOptions};
use mpsp_core::scenario::load_scenario;

const TABLE_JSON: &str = r#"{
    "mu_km3_s2": 1.327124e11,
    "g0_m_s2": 9.80655,
    "LU_km": 1.495979e8,
    "TU_s": 5.022643e6,
    "MU_kg": 25.0,
    "m0_kg": 25.0,
    "Tmax_N": 1.5e-3,
    "Isp_s": 3000.0,
    "depart_epoch": "2020-10-01",
    "arrive_epoch": "2023-12-01",
    "r0_LU": [1.001367, 0.140622, -6.594513e-6],
    "v0_VU": [-0.155386, 0.986258, -4.827818e-5],
    "rf_LU": [-1.044138, -0.122918, -0.018183],
    "vf_VU": [0.222668, -0.875235, 0.051944]
}"#;

fn main() {
    let sc = load_scenario(TABLE_JSON).unwrap();
    let opts = NominalOptions::default();
    let t0 = std::time::Instant::now();
    match solve_fuel_optimal(&sc, &opts) {
        Ok(sol) => {
            println!(
                "CONVERGED in {:.1?}: mf = {:.6} MU = {:.4} kg, {} thrust + {} coast, residual {:.3e}",
                t0.elapsed(),
                sol.final_mass,
                sol.final_mass * 25.0,
                sol.n_thrust_segments,
                sol.n_coast_segments,
                sol.residual_norm
            );
            println!("lambda0 = {:?}", sol.lambda0);
            println!("switch times: {:?}", sol.switch_times);
        }
        Err(e) => println!("FAILED after {:.1?}: {e}", t0.elapsed()),
    }
}
