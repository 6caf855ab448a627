//! Inner-loop MPSP Newton iteration on (eps, lambda_m0).
//!
//! Each iteration propagates the augmented dynamics under the current
//! weights, forms the terminal error `dY = [r-rf, v-vf, lambda_mf]`, builds
//! the sensitivity bundle, and solves the static update
//!
//! ```text
//! (a R0⁻¹ aᵀ + B_v R_eps⁻¹ B_vᵀ) p = dY,   d_eps = R_eps⁻¹ B_vᵀ p,
//! d_lambda_m0 = R0⁻¹ aᵀ p
//! ```
//!
//! where `a` is the lambda_m0 column of `A` (initial position, velocity and
//! mass are fixed). The step length starts at 1 and halves while the trial
//! trajectory's thrust-segment count leaves the allowed band around the
//! reference count; five halvings without acceptance fail the loop.

use crate::continuation::BoundaryConditions;
use crate::dynamics::AugmentedState;
use crate::fourier::{BasisMap, FourierControl, FourierWeights};
use crate::propagate::{propagate_segmented, SegmentedTrajectory};
use crate::scenario::{Scenario, Unit, UnitSystem};
use crate::sensitivity::accumulate;
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use thiserror::Error;

/// Segments shorter than this (TU) merge away when counting the thrust
/// sequence; near-impulse slivers from bisection noise must not trip the
/// guard.
pub const MIN_SEGMENT_DURATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpspError {
    #[error("Newton weight matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("R0 must be positive (got {0})")]
    BadR0(f64),
    #[error("static system ill-conditioned (cond = {cond:.3e}): insufficient control authority")]
    IllConditioned { cond: f64 },
    #[error("weight dimension mismatch: R_eps is {r_eps} x {r_eps}, B_v has {n_eps} columns")]
    DimensionMismatch { r_eps: usize, n_eps: usize },
}

/// Quadratic weights of the static program.
#[derive(Debug, Clone)]
pub struct NewtonWeights {
    r_eps: DMatrix<f64>,
    r0: f64,
}

impl NewtonWeights {
    /// Positive definiteness of `r_eps` is checked by factorization.
    pub fn new(r_eps: DMatrix<f64>, r0: f64) -> Result<Self, MpspError> {
        if !(r0 > 0.0) {
            return Err(MpspError::BadR0(r0));
        }
        if nalgebra::Cholesky::new(r_eps.clone()).is_none() {
            return Err(MpspError::NotPositiveDefinite);
        }
        Ok(Self { r_eps, r0 })
    }

    /// The neutral choice: canonical units make the weight magnitudes
    /// commensurate, so identity weights and R0 = 1.
    pub fn identity(n_eps: usize) -> Self {
        Self {
            r_eps: DMatrix::identity(n_eps, n_eps),
            r0: 1.0,
        }
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn r_eps(&self) -> &DMatrix<f64> {
        &self.r_eps
    }
}

/// Convergence thresholds and loop guards.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceSpec {
    pub pos_tol_km: f64,
    pub vel_tol_km_s: f64,
    pub lam_tol: f64,
    /// canonical 2-norm cap on the terminal error; beyond it the iteration
    /// reports failure immediately
    pub delta_max: f64,
    pub kappa_min: f64,
    pub max_newton_iters: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            pos_tol_km: 500.0,
            vel_tol_km_s: 0.1,
            lam_tol: 1e-6,
            delta_max: 1.0,
            kappa_min: 1.0 / 32.0,
            max_newton_iters: 200,
        }
    }
}

/// Terminal miss in canonical and dimensional form.
#[derive(Debug, Clone, Copy)]
pub struct TerminalError {
    /// dY = [r - rf, v - vf, lambda_mf]
    pub delta: SVector<f64, 7>,
    pub canonical_norm: f64,
    pub pos_km: f64,
    pub vel_km_s: f64,
    pub lam_abs: f64,
}

impl TerminalError {
    pub fn within(&self, spec: &ConvergenceSpec) -> bool {
        self.pos_km <= spec.pos_tol_km
            && self.vel_km_s <= spec.vel_tol_km_s
            && self.lam_abs <= spec.lam_tol
    }
}

pub fn terminal_error(
    traj: &SegmentedTrajectory,
    target: &BoundaryConditions,
    units: &UnitSystem,
) -> TerminalError {
    let y = &traj.terminal_output;
    let mut delta = SVector::<f64, 7>::zeros();
    for i in 0..3 {
        delta[i] = y[i] - target.rf[i];
        delta[3 + i] = y[3 + i] - target.vf[i];
    }
    delta[6] = y[6];
    let pos = delta.fixed_rows::<3>(0).norm();
    let vel = delta.fixed_rows::<3>(3).norm();
    TerminalError {
        delta,
        canonical_norm: delta.norm(),
        pos_km: units.from_canonical(pos, Unit::Length),
        vel_km_s: units.from_canonical(vel, Unit::Velocity),
        lam_abs: delta[6].abs(),
    }
}

/// Thrust-sequence length with sliver merging.
pub fn count_segments(traj: &SegmentedTrajectory) -> usize {
    let kept: Vec<u8> = traj
        .segments
        .iter()
        .filter(|s| s.duration() > MIN_SEGMENT_DURATION)
        .map(|s| s.u)
        .collect();
    if kept.is_empty() {
        return usize::from(!traj.segments.is_empty());
    }
    1 + kept.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Newton direction of the static program. Returns `(d_eps, d_lambda_m0, p)`.
pub fn newton_direction(
    a: &SMatrix<f64, 7, 8>,
    b_v: &DMatrix<f64>,
    dy: &SVector<f64, 7>,
    w: &NewtonWeights,
) -> Result<(DVector<f64>, f64, SVector<f64, 7>), MpspError> {
    let n_eps = b_v.ncols();
    if w.r_eps.nrows() != n_eps {
        return Err(MpspError::DimensionMismatch {
            r_eps: w.r_eps.nrows(),
            n_eps,
        });
    }
    // only the lambda_m0 column of A participates: r0, v0, m0 are fixed
    let a_col: SVector<f64, 7> = a.column(7).into();

    let chol_eps =
        nalgebra::Cholesky::new(w.r_eps.clone()).ok_or(MpspError::NotPositiveDefinite)?;
    // X = R_eps⁻¹ B_vᵀ  (n_eps x 7)
    let x = chol_eps.solve(&b_v.transpose());

    let mut m7 = SMatrix::<f64, 7, 7>::zeros();
    let bx = b_v * &x; // 7x7
    for i in 0..7 {
        for j in 0..7 {
            m7[(i, j)] = bx[(i, j)] + a_col[i] * a_col[j] / w.r0;
        }
    }

    let svd = m7.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(MpspError::IllConditioned { cond });
    }
    let p = nalgebra::Cholesky::new(m7)
        .ok_or(MpspError::IllConditioned { cond })?
        .solve(dy);

    let d_eps = &x * p;
    let d_lambda = a_col.dot(&p) / w.r0;
    Ok((d_eps, d_lambda, p))
}

/// One line of the iteration log.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub kappa: f64,
    pub error_norm: f64,
    pub pos_km: f64,
    pub vel_km_s: f64,
    pub lam_abs: f64,
    pub n_seg: usize,
}

#[derive(Debug, Clone)]
pub struct InnerLoopResult {
    pub eps: FourierWeights,
    pub lambda_m0: f64,
    /// 1 = converged, 0 = failed
    pub sign: u8,
    pub iterations: usize,
    pub terminal: Option<TerminalError>,
    pub trajectory: Option<SegmentedTrajectory>,
    pub fuel_used: f64,
    pub log: Vec<IterationRecord>,
    pub failure: Option<String>,
}

impl InnerLoopResult {
    pub fn converged(&self) -> bool {
        self.sign == 1
    }
}

/// Shared read-only inputs of the inner loop.
#[derive(Clone, Copy)]
pub struct InnerLoopContext<'a> {
    pub scenario: &'a Scenario,
    pub map: &'a BasisMap,
    pub newton_weights: &'a NewtonWeights,
    pub spec: &'a ConvergenceSpec,
    pub h_max: f64,
    pub n_seg_ref: usize,
    pub n_seg_tol: usize,
}

pub fn inner_loop(
    ctx: &InnerLoopContext,
    target: &BoundaryConditions,
    eps0: FourierWeights,
    lambda_m0: f64,
) -> InnerLoopResult {
    let params = target.dyn_params(ctx.scenario.mu);
    let (t0, tf) = (ctx.scenario.t0, ctx.scenario.tf);
    let units = &ctx.scenario.units;

    let propagate = |eps: &FourierWeights, lam: f64| {
        let x0 = AugmentedState {
            r: target.r0,
            v: target.v0,
            m: target.m0,
            lambda_m: lam,
        };
        let ctrl = FourierControl::new(eps, ctx.map);
        propagate_segmented(&x0, &ctrl, &params, t0, tf, ctx.h_max)
    };

    let mut eps = eps0;
    let mut lam = lambda_m0;
    let mut log = Vec::new();
    let fail = |eps: FourierWeights,
                lam: f64,
                iterations: usize,
                terminal: Option<TerminalError>,
                trajectory: Option<SegmentedTrajectory>,
                log: Vec<IterationRecord>,
                reason: String| {
        let fuel = trajectory.as_ref().map_or(0.0, |t| t.fuel_used);
        InnerLoopResult {
            eps,
            lambda_m0: lam,
            sign: 0,
            iterations,
            terminal,
            trajectory,
            fuel_used: fuel,
            log,
            failure: Some(reason),
        }
    };

    let mut traj = match propagate(&eps, lam) {
        Ok(t) => t,
        Err(e) => {
            return fail(eps, lam, 0, None, None, log, format!("initial propagation failed: {e}"))
        }
    };
    let mut iterations = 0usize;
    log.push(IterationRecord {
        iteration: 0,
        kappa: 0.0,
        error_norm: terminal_error(&traj, target, units).canonical_norm,
        pos_km: terminal_error(&traj, target, units).pos_km,
        vel_km_s: terminal_error(&traj, target, units).vel_km_s,
        lam_abs: terminal_error(&traj, target, units).lam_abs,
        n_seg: count_segments(&traj),
    });

    loop {
        let err = terminal_error(&traj, target, units);
        if err.within(ctx.spec) {
            return InnerLoopResult {
                eps,
                lambda_m0: lam,
                sign: 1,
                iterations,
                terminal: Some(err),
                fuel_used: traj.fuel_used,
                trajectory: Some(traj),
                log,
                failure: None,
            };
        }
        if err.canonical_norm >= ctx.spec.delta_max {
            return fail(
                eps,
                lam,
                iterations,
                Some(err),
                Some(traj),
                log,
                format!(
                    "terminal error norm {:.3e} >= delta_max {:.3e}",
                    err.canonical_norm, ctx.spec.delta_max
                ),
            );
        }
        if iterations >= ctx.spec.max_newton_iters {
            return fail(
                eps,
                lam,
                iterations,
                Some(err),
                Some(traj),
                log,
                format!("no convergence in {} Newton iterations", iterations),
            );
        }

        let bundle = match accumulate(&traj, &eps, ctx.map, &params) {
            Ok(b) => b,
            Err(e) => {
                return fail(
                    eps,
                    lam,
                    iterations,
                    Some(err),
                    Some(traj),
                    log,
                    format!("sensitivity accumulation failed: {e}"),
                )
            }
        };
        let (d_eps, d_lam, p) =
            match newton_direction(&bundle.a, &bundle.b_v, &err.delta, ctx.newton_weights) {
                Ok(d) => d,
                Err(e) => {
                    return fail(
                        eps,
                        lam,
                        iterations,
                        Some(err),
                        Some(traj),
                        log,
                        format!("Newton direction failed: {e}"),
                    )
                }
            };
        // linearized-constraint identity: a·d_lam + B_v·d_eps = dY
        {
            let a_col: SVector<f64, 7> = bundle.a.column(7).into();
            let lin = a_col * d_lam + &bundle.b_v * &d_eps;
            let rel = (lin - err.delta).norm() / err.delta.norm().max(1e-300);
            assert!(
                rel <= 1e-6,
                "linearized-constraint identity violated (rel = {rel:.3e})"
            );
        }
        let _ = p;

        let mut kappa = 1.0f64;
        loop {
            let trial = match eps.add_scaled(&d_eps, -kappa) {
                Ok(e) => e,
                Err(e) => {
                    return fail(
                        eps,
                        lam,
                        iterations,
                        Some(err),
                        Some(traj),
                        log,
                        format!("weight update produced invalid weights: {e}"),
                    )
                }
            };
            let lam_trial = lam - kappa * d_lam;
            let accept = match propagate(&trial, lam_trial) {
                Ok(t2) => {
                    let n2 = count_segments(&t2);
                    if n2.abs_diff(ctx.n_seg_ref) <= ctx.n_seg_tol {
                        Some((t2, n2))
                    } else {
                        None
                    }
                }
                // a trial that cannot be propagated is treated like a
                // segment-guard rejection: shorten the step
                Err(_) => None,
            };
            if let Some((t2, n2)) = accept {
                debug_assert!(n2.abs_diff(ctx.n_seg_ref) <= ctx.n_seg_tol);
                eps = trial;
                lam = lam_trial;
                traj = t2;
                iterations += 1;
                let e2 = terminal_error(&traj, target, units);
                log.push(IterationRecord {
                    iteration: iterations,
                    kappa,
                    error_norm: e2.canonical_norm,
                    pos_km: e2.pos_km,
                    vel_km_s: e2.vel_km_s,
                    lam_abs: e2.lam_abs,
                    n_seg: n2,
                });
                break;
            }
            kappa *= 0.5;
            if kappa <= ctx.spec.kappa_min {
                return fail(
                    eps,
                    lam,
                    iterations,
                    Some(err),
                    Some(traj),
                    log,
                    format!(
                        "step length exhausted (kappa <= 1/{})",
                        (1.0 / ctx.spec.kappa_min) as u64
                    ),
                );
            }
        }
    }
}
