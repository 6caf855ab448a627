//! Shared fixtures and the finite-difference oracle for the sensitivity
//! integration tests.

use mpsp_core::dynamics::{AugmentedState, DynParams};
use mpsp_core::fourier::{BasisMap, FourierControl, FourierWeights};
use mpsp_core::propagate::{propagate_segmented, SegmentedTrajectory};
use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};

pub struct Fixture {
    pub params: DynParams,
    pub map: BasisMap,
    pub weights: FourierWeights,
    pub x0: AugmentedState,
    pub t0: f64,
    pub tf: f64,
    pub h_max: f64,
}

impl Fixture {
    pub fn propagate(&self) -> SegmentedTrajectory {
        self.propagate_with(&self.x0, &self.weights)
    }

    pub fn propagate_with(
        &self,
        x0: &AugmentedState,
        w: &FourierWeights,
    ) -> SegmentedTrajectory {
        let ctrl = FourierControl::new(w, &self.map);
        propagate_segmented(x0, &ctrl, &self.params, self.t0, self.tf, self.h_max)
            .expect("fixture propagation")
    }
}

/// Thrust-coast-thrust trajectory with two transversal switches.
pub fn two_switch_fixture() -> Fixture {
    let order = 2;
    let mut eps = DVector::zeros(15);
    eps[0] = 0.8;
    eps[3] = 0.5; // channel 1: 0.8 + 0.5 cos 2eta
    eps[5] = 0.1;
    eps[6] = 0.15;
    eps[9] = 0.1;
    eps[10] = 0.05;
    eps[12] = 0.1;
    Fixture {
        params: DynParams {
            mu: 1.0,
            thrust_max: 0.05,
            exhaust_velocity: 1.0,
        },
        map: BasisMap { eta0: 0.0, etaf: std::f64::consts::PI, t0: 0.0, tf: 3.0 },
        weights: FourierWeights::new(order, eps).unwrap(),
        x0: AugmentedState {
            r: Vector3::new(1.0, 0.0, 0.0),
            v: Vector3::new(0.0, 1.0, 0.05),
            m: 1.0,
            lambda_m: 0.0,
        },
        t0: 0.0,
        tf: 3.0,
        h_max: 0.01,
    }
}

/// Per-segment step counts plus the switch count: the discretization profile
/// that must not change across a finite-difference pair.
pub fn grid_profile(traj: &SegmentedTrajectory) -> Vec<usize> {
    let mut p: Vec<usize> = traj.segments.iter().map(|s| s.n_steps()).collect();
    p.push(traj.switch_times.len());
    p
}

fn output_of(traj: &SegmentedTrajectory) -> SVector<f64, 7> {
    traj.terminal_output
}

/// Central finite differences of the event-re-detecting propagation map with
/// respect to the basis weights. The step shrinks (up to `max_shrink` times)
/// whenever a probe lands on a different grid profile than the base
/// trajectory: the even-grid step count is integer-quantized, and
/// differentiating across a requantization would measure an O(h^4)
/// discretization artifact instead of the flow derivative.
pub fn fd_b_v(fx: &Fixture, base: &SegmentedTrajectory, delta_scale: f64) -> DMatrix<f64> {
    let profile = grid_profile(base);
    let n = fx.weights.n_weights();
    let mut out = DMatrix::zeros(7, n);
    for j in 0..n {
        let mut delta = delta_scale * fx.weights.as_vector()[j].abs().max(1.0);
        let mut col = None;
        for _ in 0..8 {
            let mut ep = fx.weights.as_vector().clone();
            let mut em = ep.clone();
            ep[j] += delta;
            em[j] -= delta;
            let wp = FourierWeights::new(fx.weights.order(), ep).unwrap();
            let wm = FourierWeights::new(fx.weights.order(), em).unwrap();
            let tp = fx.propagate_with(&fx.x0, &wp);
            let tm = fx.propagate_with(&fx.x0, &wm);
            if grid_profile(&tp) == profile && grid_profile(&tm) == profile {
                col = Some((output_of(&tp) - output_of(&tm)) / (2.0 * delta));
                break;
            }
            delta *= 0.25;
        }
        let col = col.expect("no grid-stable FD step found");
        out.set_column(j, &col);
    }
    out
}

/// Central finite differences with respect to the initial augmented state.
pub fn fd_a(fx: &Fixture, base: &SegmentedTrajectory, delta_scale: f64) -> SMatrix<f64, 7, 8> {
    let profile = grid_profile(base);
    let mut out = SMatrix::<f64, 7, 8>::zeros();
    let y0 = fx.x0.to_vector();
    for j in 0..8 {
        let mut delta = delta_scale * y0[j].abs().max(1.0);
        let mut col = None;
        for _ in 0..8 {
            let mut yp = y0;
            let mut ym = y0;
            yp[j] += delta;
            ym[j] -= delta;
            let tp = fx.propagate_with(&AugmentedState::from_vector(&yp), &fx.weights);
            let tm = fx.propagate_with(&AugmentedState::from_vector(&ym), &fx.weights);
            if grid_profile(&tp) == profile && grid_profile(&tm) == profile {
                col = Some((output_of(&tp) - output_of(&tm)) / (2.0 * delta));
                break;
            }
            delta *= 0.25;
        }
        let col = col.expect("no grid-stable FD step found");
        out.set_column(j, &col);
    }
    out
}

/// Worst column-wise relative error between an analytic and an FD matrix.
/// Columns are compared in the 2-norm with a floor tied to the matrix scale.
pub fn max_column_rel_error(an: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    assert_eq!(an.shape(), fd.shape());
    let scale = (0..fd.ncols())
        .map(|j| fd.column(j).norm())
        .fold(0.0f64, f64::max);
    let floor = 1e-6 * scale.max(1e-12);
    (0..fd.ncols())
        .map(|j| (an.column(j) - fd.column(j)).norm() / fd.column(j).norm().max(floor))
        .fold(0.0f64, f64::max)
}

/// Column-wise report for tolerance diagnostics.
pub fn column_rel_errors(an: &DMatrix<f64>, fd: &DMatrix<f64>) -> Vec<(usize, f64, f64)> {
    let scale = (0..fd.ncols())
        .map(|j| fd.column(j).norm())
        .fold(0.0f64, f64::max);
    let floor = 1e-6 * scale.max(1e-12);
    (0..fd.ncols())
        .map(|j| {
            (
                j,
                fd.column(j).norm(),
                (an.column(j) - fd.column(j)).norm() / fd.column(j).norm().max(floor),
            )
        })
        .collect()
}
