//! Outer-loop boundary-condition continuation.
//!
//! A perturbed case is first attempted directly with the nominal thrust
//! sequence enforced (`n_seg_tol = 0`). On failure the boundary conditions
//! are blended from the reference to the perturbed set,
//! `C_tau = (1-tau)·C_ref + tau·C_per`, sweeping tau with doubling steps on
//! success and halving on failure; an abandoned sweep (step below 0.01 short
//! of tau = 1) escalates the segment-count tolerance by 2 and restarts the
//! sweep clean from the fitted weights.

use crate::dynamics::DynParams;
use crate::fourier::{BasisMap, FourierWeights};
use crate::mpsp::{
    inner_loop, ConvergenceSpec, InnerLoopContext, NewtonWeights, TerminalError,
};
use crate::nominal::NominalSolution;
use crate::propagate::SegmentedTrajectory;
use crate::scenario::Scenario;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContinuationError {
    #[error("continuation parameter tau = {0} outside [0, 1]")]
    TauOutOfRange(f64),
}

/// Everything a guidance case may blend: boundary states plus thruster
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    pub r0: Vector3<f64>,
    pub v0: Vector3<f64>,
    pub m0: f64,
    pub rf: Vector3<f64>,
    pub vf: Vector3<f64>,
    pub thrust_max: f64,
    pub exhaust_velocity: f64,
}

impl BoundaryConditions {
    pub fn reference(sc: &Scenario) -> Self {
        Self {
            r0: sc.r0,
            v0: sc.v0,
            m0: sc.m0,
            rf: sc.rf,
            vf: sc.vf,
            thrust_max: sc.thrust_max,
            exhaust_velocity: sc.exhaust_velocity,
        }
    }

    pub fn dyn_params(&self, mu: f64) -> DynParams {
        DynParams {
            mu,
            thrust_max: self.thrust_max,
            exhaust_velocity: self.exhaust_velocity,
        }
    }
}

/// C_tau = (1-tau)·C_ref + tau·C_per, componentwise over all blended fields.
pub fn blend_conditions(
    c_ref: &BoundaryConditions,
    c_per: &BoundaryConditions,
    tau: f64,
) -> Result<BoundaryConditions, ContinuationError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ContinuationError::TauOutOfRange(tau));
    }
    let s = 1.0 - tau;
    Ok(BoundaryConditions {
        r0: s * c_ref.r0 + tau * c_per.r0,
        v0: s * c_ref.v0 + tau * c_per.v0,
        m0: s * c_ref.m0 + tau * c_per.m0,
        rf: s * c_ref.rf + tau * c_per.rf,
        vf: s * c_ref.vf + tau * c_per.vf,
        thrust_max: s * c_ref.thrust_max + tau * c_per.thrust_max,
        exhaust_velocity: s * c_ref.exhaust_velocity + tau * c_per.exhaust_velocity,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct OuterOptions {
    pub dtau_init: f64,
    pub dtau_min: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            dtau_init: 0.5,
            dtau_min: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceStatus {
    Converged,
    Failed,
}

/// One inner-loop invocation inside the continuation.
#[derive(Debug, Clone)]
pub struct ContinuationStep {
    pub tau: f64,
    pub dtau: f64,
    pub inner_iterations: usize,
    pub sign: u8,
    pub n_seg_tol: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GuidanceSolution {
    pub eps: FourierWeights,
    pub lambda_m0: f64,
    pub trajectory: Option<SegmentedTrajectory>,
    pub terminal: Option<TerminalError>,
    pub total_newton_iterations: usize,
    /// successful tau steps (0 when the direct attempt suffices)
    pub continuation_steps: usize,
    pub fuel_used: f64,
    pub status: GuidanceStatus,
    pub failure_reason: Option<String>,
    /// true when the direct attempt at the perturbed conditions converged
    pub direct: bool,
    pub final_n_seg_tol: usize,
    pub trace: Vec<ContinuationStep>,
}

impl GuidanceSolution {
    pub fn converged(&self) -> bool {
        self.status == GuidanceStatus::Converged
    }
}

/// Shared read-only inputs of a guidance run.
#[derive(Clone, Copy)]
pub struct GuidanceContext<'a> {
    pub scenario: &'a Scenario,
    pub map: &'a BasisMap,
    pub newton_weights: &'a NewtonWeights,
    pub spec: &'a ConvergenceSpec,
    pub h_max: f64,
    pub outer: OuterOptions,
}

impl<'a> GuidanceContext<'a> {
    fn inner(&self, n_seg_ref: usize, n_seg_tol: usize) -> InnerLoopContext<'a> {
        InnerLoopContext {
            scenario: self.scenario,
            map: self.map,
            newton_weights: self.newton_weights,
            spec: self.spec,
            h_max: self.h_max,
            n_seg_ref,
            n_seg_tol,
        }
    }
}

/// Re-target the stored solution to perturbed conditions.
pub fn outer_loop(
    ctx: &GuidanceContext,
    c_per: &BoundaryConditions,
    nominal: &NominalSolution,
    eps0: &FourierWeights,
) -> GuidanceSolution {
    let c_ref = BoundaryConditions::reference(ctx.scenario);
    let n_seg_ref = nominal.n_seg();
    let lam_ref = nominal.lambda_m0();
    let mut trace = Vec::new();
    let mut total_iters = 0usize;

    // direct attempt with the nominal thrust sequence enforced
    let direct = inner_loop(&ctx.inner(n_seg_ref, 0), c_per, eps0.clone(), lam_ref);
    total_iters += direct.iterations;
    trace.push(ContinuationStep {
        tau: 1.0,
        dtau: 0.0,
        inner_iterations: direct.iterations,
        sign: direct.sign,
        n_seg_tol: 0,
        failure: direct.failure.clone(),
    });
    if direct.converged() {
        return GuidanceSolution {
            eps: direct.eps,
            lambda_m0: direct.lambda_m0,
            trajectory: direct.trajectory,
            terminal: direct.terminal,
            total_newton_iterations: total_iters,
            continuation_steps: 0,
            fuel_used: direct.fuel_used,
            status: GuidanceStatus::Converged,
            failure_reason: None,
            direct: true,
            final_n_seg_tol: 0,
            trace,
        };
    }

    let mut n_seg_tol = 0usize;
    loop {
        // clean sweep restart: original weights, full initial step
        let mut eps = eps0.clone();
        let mut lam = lam_ref;
        let mut tau_old = 0.0f64;
        let mut dtau = ctx.outer.dtau_init;
        let mut tau = dtau;
        let mut steps_this_sweep = 0usize;
        loop {
            let c_tau = blend_conditions(&c_ref, c_per, tau).expect("tau stays within [0, 1]");
            let res = inner_loop(&ctx.inner(n_seg_ref, n_seg_tol), &c_tau, eps.clone(), lam);
            total_iters += res.iterations;
            trace.push(ContinuationStep {
                tau,
                dtau,
                inner_iterations: res.iterations,
                sign: res.sign,
                n_seg_tol,
                failure: res.failure.clone(),
            });
            if res.converged() {
                eps = res.eps.clone();
                lam = res.lambda_m0;
                steps_this_sweep += 1;
                if tau >= 1.0 {
                    return GuidanceSolution {
                        eps,
                        lambda_m0: lam,
                        trajectory: res.trajectory,
                        terminal: res.terminal,
                        total_newton_iterations: total_iters,
                        continuation_steps: steps_this_sweep,
                        fuel_used: res.fuel_used,
                        status: GuidanceStatus::Converged,
                        failure_reason: None,
                        direct: false,
                        final_n_seg_tol: n_seg_tol,
                        trace,
                    };
                }
                tau_old = tau;
                dtau = (1.0 - tau).min(2.0 * dtau);
            } else {
                dtau *= 0.5;
            }
            tau = tau_old + dtau;
            if dtau <= ctx.outer.dtau_min && tau_old != 1.0 {
                break; // abandon this sweep
            }
        }
        n_seg_tol += 2;
        if n_seg_ref < n_seg_tol {
            return GuidanceSolution {
                eps: eps0.clone(),
                lambda_m0: lam_ref,
                trajectory: None,
                terminal: None,
                total_newton_iterations: total_iters,
                continuation_steps: 0,
                fuel_used: 0.0,
                status: GuidanceStatus::Failed,
                failure_reason: Some(format!(
                    "segment tolerance exhausted (n_seg_tol = {n_seg_tol} > n_seg_ref = {n_seg_ref})"
                )),
                direct: false,
                final_n_seg_tol: n_seg_tol,
                trace,
            };
        }
    }
}
