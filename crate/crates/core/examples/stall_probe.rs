use mpsp_core::dynamics::FullCostate;
use mpsp_core::nominal::*;
use mpsp_core::scenario::load_scenario;
use nalgebra::{SVector, Vector3};

fn main() {
    let sc = load_scenario(&std::fs::read_to_string("scenarios/apophis.json").unwrap()).unwrap();
    let mut sc_per = sc.clone();
    sc_per.rf += Vector3::new(-0.02, -0.02, -0.02);
    let h = sc.h_max(0.0005);
    // stall point from the previous manual Newton trace
    let x = SVector::<f64, 7>::from_column_slice(&[
        1.6823535123775637, -0.08291931713610629, -0.47197269894275784,
        -0.44788677458278864, 1.1630925813585404, 0.7578178854204701,
        0.31230115994476476,
    ]);
    let f = |lam: &SVector<f64, 7>| {
        shooting_residual(&FullCostate::from_vector(lam), 0.0, &sc_per, h).unwrap()
    };
    let r0 = f(&x);
    println!("|r| at stall = {:.6e}", r0.norm());
    // residual along each coordinate, strongly magnified
    for j in 0..7 {
        print!("dir {j}: ");
        for scale in [-1e-6, -1e-7, -1e-8, 1e-8, 1e-7, 1e-6] {
            let mut xp = x;
            xp[j] += scale;
            print!("{:+.3e} ", f(&xp).norm() - r0.norm());
        }
        println!();
    }
}
