//! Terminal-output sensitivities of a segmented propagation.
//!
//! `A = dY/dX0` (7x8) and `B_v = dY/deps` (7 x 3(2K+1)) are accumulated by a
//! backward sweep over the stored trajectory: per step the analytic RK4
//! Jacobians chain through the stages, and at every switching time the sweep
//! multiplies in the jump maps
//!
//! ```text
//! dX+/dX- = I + (Xdot+ - Xdot-)·S_X / Sdot
//! dX+/dU  =     (Xdot+ - Xdot-)·S_U / Sdot
//! ```
//!
//! which account for the perturbation-induced shift of the switching time.
//! Omitting them leaves O(1) errors in the columns of `B_v` whenever the
//! throttle structure reacts to the perturbation (see the ablation test).
//!
//! Per-step control sensitivity defaults to stage-exact basis evaluation:
//! `dF/deps` chains `(dF/dU)|stage · P(eta_stage)` through the RK4 stages.
//! A node-held variant (the basis frozen at the step's start node) is kept
//! behind [`ControlSensitivity::NodeHeld`]; the two agree to O(h).

use crate::dynamics::{
    augmented_rhs, gravity_gradient, switch_rate, AugmentedState, DynParams, DynamicsError,
    EPS_PRIMER,
};
use crate::fourier::{basis_vector, BasisMap, FourierControl, FourierWeights};
use crate::propagate::{PropagationError, SegmentedTrajectory};
use nalgebra::{DMatrix, DVector, Matrix3, RowSVector, SMatrix, SVector, Vector3};
use thiserror::Error;

/// Below this |dS/dt| a switching crossing is too shallow to linearize.
pub const EPS_GRAZE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error("grazing switch at t = {t}: |dS/dt| = {sdot_abs:.3e} <= {EPS_GRAZE:.0e}")]
    GrazingSwitch { t: f64, sdot_abs: f64 },
    #[error("trajectory does not match the control it was propagated with: {0}")]
    GridMismatch(String),
}

/// Jacobians of one RK4 step map.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// d(step)/d(state at step start), 8x8
    pub df_dx: SMatrix<f64, 8, 8>,
    /// d(step)/d(basis weights), 8 x 3(2K+1)
    pub df_deps: DMatrix<f64>,
}

/// Jacobians of the instantaneous switch map.
#[derive(Debug, Clone)]
pub struct JumpJacobians {
    pub dxplus_dxminus: SMatrix<f64, 8, 8>,
    pub dxplus_du: SMatrix<f64, 8, 3>,
}

/// Terminal-output Jacobians of a whole trajectory.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    /// dY/dX0, 7x8; Y = [r(tf), v(tf), lambda_m(tf)]
    pub a: SMatrix<f64, 7, 8>,
    /// dY/deps, 7 x 3(2K+1)
    pub b_v: DMatrix<f64>,
}

/// How dF/deps attributes control perturbations within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControlSensitivity {
    #[default]
    StageExact,
    NodeHeld,
}

#[derive(Debug, Clone, Copy)]
pub struct AccumulateOptions {
    pub jump_compensation: bool,
    pub control_sensitivity: ControlSensitivity,
}

impl Default for AccumulateOptions {
    fn default() -> Self {
        Self {
            jump_compensation: true,
            control_sensitivity: ControlSensitivity::StageExact,
        }
    }
}

/// Continuous-time Jacobians of the augmented dynamics: (dF/dX, dF/dU).
pub fn rhs_jacobians(
    x: &AugmentedState,
    primer: &Vector3<f64>,
    u: u8,
    p: &DynParams,
) -> Result<(SMatrix<f64, 8, 8>, SMatrix<f64, 8, 3>), DynamicsError> {
    if !(x.m > 0.0) {
        return Err(DynamicsError::MassNonPositive { m: x.m });
    }
    let mut fx = SMatrix::<f64, 8, 8>::zeros();
    let mut fu = SMatrix::<f64, 8, 3>::zeros();
    // dr/dt = v
    fx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    // gravity gradient
    fx.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&gravity_gradient(&x.r, p.mu));
    if u == 1 {
        let un = primer.norm();
        if un < EPS_PRIMER {
            return Err(DynamicsError::DegeneratePrimer { norm: un });
        }
        let m = x.m;
        let t_over = p.thrust_max;
        // dvdot/dm = +T U/(m²|U|)
        let dv_dm = (t_over / (m * m * un)) * primer;
        fx.fixed_view_mut::<3, 1>(3, 6).copy_from(&dv_dm);
        // dlamdot_m/dm = +2T|U|/m³
        fx[(7, 6)] = 2.0 * t_over * un / (m * m * m);
        // dvdot/dU = -(T/m)(I/|U| - UUᵀ/|U|³)
        let proj = Matrix3::identity() / un - primer * primer.transpose() / (un * un * un);
        fu.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(t_over / m) * proj));
        // dlamdot_m/dU = -(T/m²) Uᵀ/|U|
        let dl_du = (-(t_over / (m * m)) / un) * primer.transpose();
        fu.fixed_view_mut::<1, 3>(7, 0).copy_from(&dl_du);
    }
    Ok((fx, fu))
}

fn stage_rhs(
    x: &SVector<f64, 8>,
    primer: &Vector3<f64>,
    u: u8,
    p: &DynParams,
) -> Result<SVector<f64, 8>, DynamicsError> {
    augmented_rhs(&AugmentedState::from_vector(x), primer, u, p)
}

/// out[:, ch*(2K+1)+j] += scale·basis[j]·fu[:, ch]
fn add_fu_times_p(out: &mut DMatrix<f64>, fu: &SMatrix<f64, 8, 3>, basis: &DVector<f64>, scale: f64) {
    let nb = basis.len();
    for ch in 0..3 {
        let col_fu = fu.column(ch);
        for j in 0..nb {
            let w = scale * basis[j];
            if w == 0.0 {
                continue;
            }
            let mut col = out.column_mut(ch * nb + j);
            for r in 0..8 {
                col[r] += w * col_fu[r];
            }
        }
    }
}

/// Analytic Jacobians of one RK4 step with stage-exact control.
///
/// The stage chain mirrors [`crate::propagate::rk4_step`] exactly: control at
/// `t`, `t+h/2`, `t+h/2`, `t+h`, throttle fixed.
pub fn step_jacobians(
    t: f64,
    x: &AugmentedState,
    u: u8,
    w: &FourierWeights,
    map: &BasisMap,
    h: f64,
    p: &DynParams,
    mode: ControlSensitivity,
) -> Result<StepJacobians, SensitivityError> {
    let n_eps = w.n_weights();
    let ctrl = FourierControl::new(w, map);
    let y0 = x.to_vector();

    let stage_times = [t, t + 0.5 * h, t + 0.5 * h, t + h];
    let stage_scales = [0.0, 0.5 * h, 0.5 * h, h];

    let mut ks: [SVector<f64, 8>; 4] = [SVector::zeros(); 4];
    let mut dks: [SMatrix<f64, 8, 8>; 4] = [SMatrix::zeros(); 4];
    // stage-exact dK_i/deps
    let mut eks: Vec<DMatrix<f64>> = Vec::with_capacity(4);
    // node-held dK_i/dU
    let mut nks: [SMatrix<f64, 8, 3>; 4] = [SMatrix::zeros(); 4];

    for i in 0..4 {
        let ti = stage_times[i];
        let yi = if i == 0 {
            y0
        } else {
            y0 + ks[i - 1] * stage_scales[i]
        };
        let xi = AugmentedState::from_vector(&yi);
        let ui = crate::control::ControlProfile::control(&ctrl, ti);
        ks[i] = stage_rhs(&yi, &ui, u, p).map_err(SensitivityError::Dynamics)?;
        let (fx, fu) = rhs_jacobians(&xi, &ui, u, p)?;
        // dx_stage/dX = I + scale·dK_{i-1}/dX
        let dstage: SMatrix<f64, 8, 8> = if i == 0 {
            SMatrix::identity()
        } else {
            SMatrix::identity() + dks[i - 1] * stage_scales[i]
        };
        dks[i] = fx * dstage;
        match mode {
            ControlSensitivity::StageExact => {
                let mut e = DMatrix::zeros(8, n_eps);
                if i > 0 {
                    e.gemm(stage_scales[i], &fx, &eks[i - 1], 0.0);
                }
                if u == 1 {
                    let eta = map.eta(ti.clamp(map.t0, map.tf));
                    add_fu_times_p(&mut e, &fu, &basis_vector(eta, w.order()), 1.0);
                }
                eks.push(e);
            }
            ControlSensitivity::NodeHeld => {
                let prev = if i == 0 {
                    SMatrix::<f64, 8, 3>::zeros()
                } else {
                    nks[i - 1] * stage_scales[i]
                };
                nks[i] = fx * prev + fu;
            }
        }
    }

    let df_dx = SMatrix::<f64, 8, 8>::identity()
        + (dks[0] + dks[1] * 2.0 + dks[2] * 2.0 + dks[3]) * (h / 6.0);

    let df_deps = match mode {
        ControlSensitivity::StageExact => {
            let mut d = DMatrix::zeros(8, n_eps);
            d += &eks[0] * (h / 6.0);
            d += &eks[1] * (2.0 * h / 6.0);
            d += &eks[2] * (2.0 * h / 6.0);
            d += &eks[3] * (h / 6.0);
            d
        }
        ControlSensitivity::NodeHeld => {
            let df_du = (nks[0] + nks[1] * 2.0 + nks[2] * 2.0 + nks[3]) * (h / 6.0);
            let mut d = DMatrix::zeros(8, n_eps);
            if u == 1 {
                let eta = map.eta(t.clamp(map.t0, map.tf));
                add_fu_times_p(&mut d, &df_du, &basis_vector(eta, w.order()), 1.0);
            }
            d
        }
    };

    Ok(StepJacobians { df_dx, df_deps })
}

/// Jump maps of an instantaneous throttle switch from the raw ingredients
/// (vector fields on both sides, partials of S, and dS/dt at the crossing).
pub fn switch_jump_jacobians(
    xdot_minus: &SVector<f64, 8>,
    xdot_plus: &SVector<f64, 8>,
    s_x: &RowSVector<f64, 8>,
    s_u: &RowSVector<f64, 3>,
    sdot: f64,
) -> Result<JumpJacobians, SensitivityError> {
    if sdot.abs() <= EPS_GRAZE {
        return Err(SensitivityError::GrazingSwitch {
            t: f64::NAN,
            sdot_abs: sdot.abs(),
        });
    }
    let jump = (xdot_plus - xdot_minus) / sdot;
    Ok(JumpJacobians {
        dxplus_dxminus: SMatrix::identity() + jump * s_x,
        dxplus_du: jump * s_u,
    })
}

/// Assemble the jump maps at a switch state: S partials from Eq-level
/// analysis of `S = -|U|c/m - lambda_m + 1`:
/// `S_X = [0 0 0 0 0 0, +|U|c/m², -1]`, `S_U = -(c/m)·Uᵀ/|U|`.
pub fn jump_at_switch(
    x_sw: &AugmentedState,
    primer: &Vector3<f64>,
    primer_rate: &Vector3<f64>,
    u_minus: u8,
    u_plus: u8,
    p: &DynParams,
) -> Result<JumpJacobians, SensitivityError> {
    let c = p.exhaust_velocity;
    let un = primer.norm();
    if un < EPS_PRIMER {
        return Err(SensitivityError::Dynamics(DynamicsError::DegeneratePrimer {
            norm: un,
        }));
    }
    let sdot = switch_rate(x_sw.m, primer, primer_rate, c)?;
    if sdot.abs() <= EPS_GRAZE {
        return Err(SensitivityError::GrazingSwitch {
            t: f64::NAN,
            sdot_abs: sdot.abs(),
        });
    }
    let xdot_minus = augmented_rhs(x_sw, primer, u_minus, p)?;
    let xdot_plus = augmented_rhs(x_sw, primer, u_plus, p)?;
    let mut s_x = RowSVector::<f64, 8>::zeros();
    s_x[6] = un * c / (x_sw.m * x_sw.m);
    s_x[7] = -1.0;
    let s_u: RowSVector<f64, 3> = (-(c / x_sw.m) / un) * primer.transpose();
    switch_jump_jacobians(&xdot_minus, &xdot_plus, &s_x, &s_u, sdot)
}

/// Selector dY/dX picking [r, v, lambda_m] out of the augmented state.
pub fn output_selector() -> SMatrix<f64, 7, 8> {
    let mut o = SMatrix::<f64, 7, 8>::zeros();
    for i in 0..6 {
        o[(i, i)] = 1.0;
    }
    o[(6, 7)] = 1.0;
    o
}

fn check_grid_consistency(
    traj: &SegmentedTrajectory,
    w: &FourierWeights,
    map: &BasisMap,
) -> Result<(), SensitivityError> {
    for seg in &traj.segments {
        for idx in [0, seg.node_times.len() - 1] {
            let t = seg.node_times[idx];
            let eta = map.eta(t.clamp(map.t0, map.tf));
            let mut expect = Vector3::zeros();
            let h = basis_vector(eta, w.order());
            for ch in 0..3 {
                expect[ch] = w
                    .channel(ch)
                    .iter()
                    .zip(h.iter())
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let got = seg.node_controls[idx];
            if (expect - got).norm() > 1e-9 * (1.0 + got.norm()) {
                return Err(SensitivityError::GridMismatch(format!(
                    "stored control at t = {t} differs from the supplied weights"
                )));
            }
        }
    }
    Ok(())
}

/// Backward sweep with an arbitrary terminal selector (R output rows).
fn accumulate_with_selector<const R: usize>(
    traj: &SegmentedTrajectory,
    w: &FourierWeights,
    map: &BasisMap,
    p: &DynParams,
    selector: &SMatrix<f64, R, 8>,
    opts: AccumulateOptions,
) -> Result<(SMatrix<f64, R, 8>, DMatrix<f64>), SensitivityError> {
    check_grid_consistency(traj, w, map)?;
    let n_eps = w.n_weights();
    let mut wmat: SMatrix<f64, R, 8> = *selector;
    let mut b_v = DMatrix::<f64>::zeros(R, n_eps);
    let ctrl = FourierControl::new(w, map);
    for (k, seg) in traj.segments.iter().enumerate().rev() {
        for i in (0..seg.n_steps()).rev() {
            let t = seg.node_times[i];
            let h = seg.node_times[i + 1] - t;
            let sj = step_jacobians(
                t,
                &seg.node_states[i],
                seg.u,
                w,
                map,
                h,
                p,
                opts.control_sensitivity,
            )?;
            b_v.gemm(1.0, &wmat, &sj.df_deps, 1.0);
            wmat *= sj.df_dx;
        }
        if k > 0 && opts.jump_compensation {
            let t_sw = seg.t_start;
            let x_sw = &seg.node_states[0];
            let primer = seg.node_controls[0];
            let primer_rate = crate::control::ControlProfile::control_rate(&ctrl, t_sw);
            let jump = jump_at_switch(
                x_sw,
                &primer,
                &primer_rate,
                traj.segments[k - 1].u,
                seg.u,
                p,
            )
            .map_err(|e| match e {
                SensitivityError::GrazingSwitch { sdot_abs, .. } => {
                    SensitivityError::GrazingSwitch { t: t_sw, sdot_abs }
                }
                other => other,
            })?;
            let wju: SMatrix<f64, R, 3> = wmat * jump.dxplus_du;
            let eta = map.eta(t_sw.clamp(map.t0, map.tf));
            let basis = basis_vector(eta, w.order());
            let nb = basis.len();
            for ch in 0..3 {
                for j in 0..nb {
                    if basis[j] == 0.0 {
                        continue;
                    }
                    let mut col = b_v.column_mut(ch * nb + j);
                    for r in 0..R {
                        col[r] += basis[j] * wju[(r, ch)];
                    }
                }
            }
            wmat *= jump.dxplus_dxminus;
        }
    }
    Ok((wmat, b_v))
}

/// Terminal-output sensitivities `A = dY/dX0`, `B_v = dY/deps` with default
/// options (jump compensation on, stage-exact control sensitivity).
pub fn accumulate(
    traj: &SegmentedTrajectory,
    w: &FourierWeights,
    map: &BasisMap,
    p: &DynParams,
) -> Result<SensitivityBundle, SensitivityError> {
    accumulate_with(traj, w, map, p, AccumulateOptions::default())
}

pub fn accumulate_with(
    traj: &SegmentedTrajectory,
    w: &FourierWeights,
    map: &BasisMap,
    p: &DynParams,
    opts: AccumulateOptions,
) -> Result<SensitivityBundle, SensitivityError> {
    let (a, b_v) = accumulate_with_selector(traj, w, map, p, &output_selector(), opts)?;
    Ok(SensitivityBundle { a, b_v })
}

/// Full-state flow Jacobians `dX(tf)/dX0` (8x8) and `dX(tf)/deps`, used by
/// the across-switch validation tests.
pub fn flow_jacobians(
    traj: &SegmentedTrajectory,
    w: &FourierWeights,
    map: &BasisMap,
    p: &DynParams,
    opts: AccumulateOptions,
) -> Result<(SMatrix<f64, 8, 8>, DMatrix<f64>), SensitivityError> {
    accumulate_with_selector(traj, w, map, p, &SMatrix::<f64, 8, 8>::identity(), opts)
}
