//! Pointwise flight dynamics, switching function and control law.
//!
//! Conventions used across the crate:
//!
//! * canonical units, with the gravitational parameter mu (normally 1);
//! * the primer vector `U = lambda_v` acts as the control of the augmented
//!   system `X = [r, v, m, lambda_m]`; optimal thrust points along `-U/|U|`;
//! * the switching function `S = -|U|·c/m - lambda_m + 1` selects the
//!   throttle: `u = 0` for `S > 0`, `u = 1` for `S < 0`;
//! * augmented state layout: `r[0..3], v[3..6], m[6], lambda_m[7]`;
//! * full state/costate layout (indirect solver):
//!   `r[0..3], v[3..6], m[6], lambda_r[7..10], lambda_v[10..13], lambda_m[13]`.

use nalgebra::{Matrix3, SVector, Vector3};
use thiserror::Error;

/// Below this primer-vector norm the thrust direction is numerically
/// meaningless.
pub const EPS_PRIMER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("degenerate primer vector (|U| = {norm:.3e} with thrust on)")]
    DegeneratePrimer { norm: f64 },
    #[error("non-positive spacecraft mass ({m:.6e})")]
    MassNonPositive { m: f64 },
    #[error("in-plane angle undefined (U1 = U2 = 0)")]
    InPlaneAngleUndefined,
}

/// Gravity and engine constants of one propagation, canonical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynParams {
    pub mu: f64,
    pub thrust_max: f64,
    /// exhaust velocity c = Isp·g0
    pub exhaust_velocity: f64,
}

/// The 8-state propagated in guidance mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub m: f64,
    pub lambda_m: f64,
}

impl AugmentedState {
    pub fn to_vector(&self) -> SVector<f64, 8> {
        let mut y = SVector::<f64, 8>::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(&self.r);
        y.fixed_rows_mut::<3>(3).copy_from(&self.v);
        y[6] = self.m;
        y[7] = self.lambda_m;
        y
    }

    pub fn from_vector(y: &SVector<f64, 8>) -> Self {
        Self {
            r: y.fixed_rows::<3>(0).into(),
            v: y.fixed_rows::<3>(3).into(),
            m: y[6],
            lambda_m: y[7],
        }
    }
}

/// Costate of the full indirect formulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullCostate {
    pub lambda_r: Vector3<f64>,
    pub lambda_v: Vector3<f64>,
    pub lambda_m: f64,
}

impl FullCostate {
    pub fn to_vector(&self) -> SVector<f64, 7> {
        let mut y = SVector::<f64, 7>::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(&self.lambda_r);
        y.fixed_rows_mut::<3>(3).copy_from(&self.lambda_v);
        y[6] = self.lambda_m;
        y
    }

    pub fn from_vector(y: &SVector<f64, 7>) -> Self {
        Self {
            lambda_r: y.fixed_rows::<3>(0).into(),
            lambda_v: y.fixed_rows::<3>(3).into(),
            lambda_m: y[6],
        }
    }
}

/// Control state at one instant: primer vector, throttle, switching value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlValue {
    pub primer: Vector3<f64>,
    pub throttle: u8,
    pub switching: f64,
}

/// g(r) = -mu r / |r|³
pub fn gravity(r: &Vector3<f64>, mu: f64) -> Vector3<f64> {
    let rn = r.norm();
    -(mu / (rn * rn * rn)) * r
}

/// G = dg/dr = mu (3 r rᵀ/|r|⁵ - I/|r|³)
pub fn gravity_gradient(r: &Vector3<f64>, mu: f64) -> Matrix3<f64> {
    let rn = r.norm();
    let r3 = rn * rn * rn;
    let r5 = r3 * rn * rn;
    mu * (3.0 / r5 * r * r.transpose() - Matrix3::identity() / r3)
}

/// S = -|U|·c/m - lambda_m + 1
pub fn switching_function(m: f64, primer: &Vector3<f64>, lambda_m: f64, c: f64) -> f64 {
    -primer.norm() * c / m - lambda_m + 1.0
}

/// Bang-off-bang throttle. An exact zero keeps the previous throttle
/// (measure-zero event; continuity of the simulation is preferred).
pub fn throttle_from_switch(s: f64, previous: u8) -> u8 {
    if s > 0.0 {
        0
    } else if s < 0.0 {
        1
    } else {
        previous
    }
}

/// Right-hand side of the augmented guidance dynamics.
pub fn augmented_rhs(
    x: &AugmentedState,
    primer: &Vector3<f64>,
    u: u8,
    p: &DynParams,
) -> Result<SVector<f64, 8>, DynamicsError> {
    if !(x.m > 0.0) {
        return Err(DynamicsError::MassNonPositive { m: x.m });
    }
    let mut out = SVector::<f64, 8>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&x.v);
    let mut vdot = gravity(&x.r, p.mu);
    if u == 1 {
        let un = primer.norm();
        if un < EPS_PRIMER {
            return Err(DynamicsError::DegeneratePrimer { norm: un });
        }
        vdot -= (p.thrust_max / (x.m * un)) * primer;
        out[6] = -p.thrust_max / p.exhaust_velocity;
        out[7] = -p.thrust_max * un / (x.m * x.m);
    }
    out.fixed_rows_mut::<3>(3).copy_from(&vdot);
    Ok(out)
}

/// Full state + costate rates under the bang-off-bang control law.
///
/// The throttle is resolved internally from the switching function, with
/// `previous_u` breaking an exact tie. Returns `(xdot, lambda_dot)`.
pub fn full_rhs(
    x: &SVector<f64, 7>,
    lam: &FullCostate,
    previous_u: u8,
    p: &DynParams,
) -> Result<(SVector<f64, 7>, SVector<f64, 7>), DynamicsError> {
    let m = x[6];
    if !(m > 0.0) {
        return Err(DynamicsError::MassNonPositive { m });
    }
    let r: Vector3<f64> = x.fixed_rows::<3>(0).into();
    let v: Vector3<f64> = x.fixed_rows::<3>(3).into();
    let s = switching_function(m, &lam.lambda_v, lam.lambda_m, p.exhaust_velocity);
    let u = throttle_from_switch(s, previous_u);

    let mut xdot = SVector::<f64, 7>::zeros();
    let mut ldot = SVector::<f64, 7>::zeros();
    xdot.fixed_rows_mut::<3>(0).copy_from(&v);
    let mut vdot = gravity(&r, p.mu);
    if u == 1 {
        let ln = lam.lambda_v.norm();
        if ln < EPS_PRIMER {
            return Err(DynamicsError::DegeneratePrimer { norm: ln });
        }
        // alpha* = -lambda_v / |lambda_v|
        vdot -= (p.thrust_max / (m * ln)) * lam.lambda_v;
        xdot[6] = -p.thrust_max / p.exhaust_velocity;
        ldot[6] = -p.thrust_max * ln / (m * m);
    }
    xdot.fixed_rows_mut::<3>(3).copy_from(&vdot);

    let big_g = gravity_gradient(&r, p.mu);
    let lr_dot = -big_g.transpose() * lam.lambda_v;
    ldot.fixed_rows_mut::<3>(0).copy_from(&lr_dot);
    let lv_dot = -lam.lambda_r;
    ldot.fixed_rows_mut::<3>(3).copy_from(&lv_dot);
    Ok((xdot, ldot))
}

/// Time rate of the switching function.
///
/// Only the d|U|/dt term survives: the mass and mass-costate contributions
/// of the full derivative cancel analytically (their rates are equal and
/// opposite for every throttle value).
pub fn switch_rate(
    m: f64,
    primer: &Vector3<f64>,
    primer_rate: &Vector3<f64>,
    c: f64,
) -> Result<f64, DynamicsError> {
    let un = primer.norm();
    if un < EPS_PRIMER {
        return Err(DynamicsError::DegeneratePrimer { norm: un });
    }
    Ok(-(primer.dot(primer_rate) / un) * c / m)
}

/// In-plane angle in [0, 360) deg and out-of-plane angle in [-90, 90] deg
/// of the primer vector.
pub fn thrust_angles(primer: &Vector3<f64>) -> Result<(f64, f64), DynamicsError> {
    let un = primer.norm();
    if un < EPS_PRIMER {
        return Err(DynamicsError::DegeneratePrimer { norm: un });
    }
    if primer.x == 0.0 && primer.y == 0.0 {
        return Err(DynamicsError::InPlaneAngleUndefined);
    }
    let mut alpha = primer.y.atan2(primer.x).to_degrees();
    if alpha < 0.0 {
        alpha += 360.0;
    }
    if alpha >= 360.0 {
        alpha -= 360.0;
    }
    let beta = (primer.z / un).clamp(-1.0, 1.0).asin().to_degrees();
    Ok((alpha, beta))
}

/// H = lambda_rᵀv + lambda_vᵀg(r) + (u·Tmax/c)·S. Diagnostic only.
pub fn hamiltonian(x: &SVector<f64, 7>, lam: &FullCostate, u: f64, p: &DynParams) -> f64 {
    let r: Vector3<f64> = x.fixed_rows::<3>(0).into();
    let v: Vector3<f64> = x.fixed_rows::<3>(3).into();
    let s = switching_function(x[6], &lam.lambda_v, lam.lambda_m, p.exhaust_velocity);
    lam.lambda_r.dot(&v) + lam.lambda_v.dot(&gravity(&r, p.mu)) + u * p.thrust_max / p.exhaust_velocity * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn params() -> DynParams {
        DynParams {
            mu: 1.0,
            thrust_max: 1.0118e-2,
            exhaust_velocity: 0.98775,
        }
    }

    #[test]
    fn switching_function_values() {
        assert_eq!(switching_function(1.0, &Vector3::zeros(), 0.0, 0.98775), 1.0);
        let c = 0.98775;
        let m = 0.7;
        let u = Vector3::new(m / c, 0.0, 0.0);
        assert_relative_eq!(switching_function(m, &u, 0.0, c), 0.0, epsilon = 1e-15);
        let s = switching_function(0.9, &Vector3::new(0.0, 1.0, 0.0), 0.1, 0.98775);
        assert_relative_eq!(s, 1.0 - 0.1 - 0.98775 / 0.9, epsilon = 1e-15);
        assert_relative_eq!(s, -0.19750, epsilon = 1e-5);
    }

    #[test]
    fn throttle_law() {
        assert_eq!(throttle_from_switch(0.5, 1), 0);
        assert_eq!(throttle_from_switch(-0.5, 0), 1);
        assert_eq!(throttle_from_switch(0.0, 1), 1);
        assert_eq!(throttle_from_switch(0.0, 0), 0);
    }

    #[test]
    fn coast_rhs_is_kepler() {
        let x = AugmentedState {
            r: Vector3::new(1.0, 0.0, 0.0),
            v: Vector3::new(0.0, 1.0, 0.0),
            m: 1.0,
            lambda_m: 0.0,
        };
        let dx = augmented_rhs(&x, &Vector3::zeros(), 0, &params()).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in dx.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn thrust_rhs_componentwise() {
        let p = params();
        let x = AugmentedState {
            r: Vector3::new(1.0, 0.0, 0.0),
            v: Vector3::new(0.0, 1.0, 0.0),
            m: 1.0,
            lambda_m: 0.0,
        };
        let dx = augmented_rhs(&x, &Vector3::new(0.0, 0.0, 1.0), 1, &p).unwrap();
        assert_relative_eq!(dx[3], -1.0, epsilon = 1e-15);
        assert_relative_eq!(dx[4], 0.0, epsilon = 1e-15);
        assert_relative_eq!(dx[5], -1.0118e-2, epsilon = 1e-15);
        assert_relative_eq!(dx[6], -1.0118e-2 / 0.98775, epsilon = 1e-15);
        assert_relative_eq!(dx[6], -1.0243e-2, max_relative = 1e-4);
        assert_relative_eq!(dx[7], -1.0118e-2, epsilon = 1e-15);
    }

    #[test]
    fn thrust_with_zero_primer_is_an_error() {
        let x = AugmentedState {
            r: Vector3::new(1.0, 0.0, 0.0),
            v: Vector3::zeros(),
            m: 1.0,
            lambda_m: 0.0,
        };
        let err = augmented_rhs(&x, &Vector3::zeros(), 1, &params()).unwrap_err();
        assert!(matches!(err, DynamicsError::DegeneratePrimer { .. }));
    }

    #[test]
    fn coast_costates_are_linear() {
        let p = params();
        let mut x = SVector::<f64, 7>::zeros();
        x[0] = 1.2;
        x[4] = 0.9;
        x[6] = 1.0;
        let lam = FullCostate {
            lambda_r: Vector3::new(0.3, -0.2, 0.1),
            lambda_v: Vector3::zeros(),
            lambda_m: 0.0,
        };
        // S = 1 > 0 so u = 0
        let (_, ldot) = full_rhs(&x, &lam, 0, &p).unwrap();
        for i in 0..3 {
            assert_relative_eq!(ldot[i], 0.0, epsilon = 1e-15); // -Gᵀ·0
            assert_relative_eq!(ldot[3 + i], -lam.lambda_r[i], epsilon = 1e-15);
        }
        assert_eq!(ldot[6], 0.0);
    }

    #[test]
    fn gravity_gradient_at_unit_radius() {
        let g = gravity_gradient(&Vector3::new(1.0, 0.0, 0.0), 1.0);
        let expect = Matrix3::from_diagonal(&Vector3::new(2.0, -1.0, -1.0));
        assert_relative_eq!((g - expect).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gravity_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = Vector3::new(
                rng.random_range(-1.5..1.5f64),
                rng.random_range(-1.5..1.5f64),
                rng.random_range(-1.5..1.5f64),
            );
            if r.norm() < 0.3 {
                continue;
            }
            let g = gravity_gradient(&r, 1.0);
            let h = 1e-6;
            for j in 0..3 {
                let mut rp = r;
                let mut rm = r;
                rp[j] += h;
                rm[j] -= h;
                let col = (gravity(&rp, 1.0) - gravity(&rm, 1.0)) / (2.0 * h);
                for i in 0..3 {
                    assert_relative_eq!(g[(i, j)], col[i], max_relative = 1e-7, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_rhs_matches_augmented_rhs() {
        let p = params();
        let mut x = SVector::<f64, 7>::zeros();
        x.fixed_rows_mut::<3>(0)
            .copy_from(&Vector3::new(1.0, 0.2, -0.1));
        x.fixed_rows_mut::<3>(3)
            .copy_from(&Vector3::new(0.1, 0.95, 0.0));
        x[6] = 0.9;
        let lam = FullCostate {
            lambda_r: Vector3::new(0.2, 0.1, -0.3),
            lambda_v: Vector3::new(1.4, -0.3, 0.2),
            lambda_m: 0.05,
        };
        let s = switching_function(x[6], &lam.lambda_v, lam.lambda_m, p.exhaust_velocity);
        let u = throttle_from_switch(s, 0);
        assert_eq!(u, 1, "fixture should be on a thrust arc");
        let (xdot, ldot) = full_rhs(&x, &lam, 0, &p).unwrap();

        let aug = AugmentedState {
            r: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            m: x[6],
            lambda_m: lam.lambda_m,
        };
        let adot = augmented_rhs(&aug, &lam.lambda_v, u, &p).unwrap();
        for i in 0..7 {
            assert_relative_eq!(adot[i], xdot[i], epsilon = 1e-15);
        }
        assert_relative_eq!(adot[7], ldot[6], epsilon = 1e-15);
    }

    #[test]
    fn switch_rate_values() {
        let c = 0.98775;
        // magnitude stationary when U ⟂ U̇
        let s = switch_rate(
            1.0,
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(0.0, 2.0, 0.0),
            c,
        )
        .unwrap();
        assert_relative_eq!(s, 0.0, epsilon = 1e-15);
        let s = switch_rate(
            1.0,
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
            c,
        )
        .unwrap();
        assert_relative_eq!(s, -0.98775, epsilon = 1e-15);
        assert!(switch_rate(1.0, &Vector3::zeros(), &Vector3::x(), c).is_err());
    }

    /// The full three-term time derivative of S reduces to the |U|-rate term
    /// for both throttle values: the mdot and lambda_m-dot contributions are
    /// equal and opposite.
    #[test]
    fn switch_rate_cancellation_identity() {
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(0.4..1.0f64);
            let u_vec = Vector3::new(
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            );
            if u_vec.norm() < 0.1 {
                continue;
            }
            let udot = Vector3::new(
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            );
            for u in [0u8, 1u8] {
                let c = p.exhaust_velocity;
                let un = u_vec.norm();
                let mdot = -(u as f64) * p.thrust_max / c;
                let lmdot = -(u as f64) * p.thrust_max * un / (m * m);
                // d/dt of Eq. (11) written out in all three terms
                let full = -(u_vec.dot(&udot) / un) * c / m + un * c * mdot / (m * m) - lmdot;
                let reduced = switch_rate(m, &u_vec, &udot, c).unwrap();
                assert_relative_eq!(full, reduced, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn angles() {
        let (a, b) = thrust_angles(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(a, 0.0, epsilon = 1e-12);
        assert_relative_eq!(b, 0.0, epsilon = 1e-12);
        let (a, b) = thrust_angles(&Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(a, 90.0, epsilon = 1e-12);
        assert_relative_eq!(b, 0.0, epsilon = 1e-12);
        let (a, b) = thrust_angles(&Vector3::new(1.0, 1.0, std::f64::consts::SQRT_2)).unwrap();
        assert_relative_eq!(a, 45.0, epsilon = 1e-12);
        assert_relative_eq!(b, 45.0, epsilon = 1e-12);
        // third quadrant maps into [0, 360)
        let (a, _) = thrust_angles(&Vector3::new(-1.0, -1.0, 0.0)).unwrap();
        assert_relative_eq!(a, 225.0, epsilon = 1e-12);
        assert!(matches!(
            thrust_angles(&Vector3::new(0.0, 0.0, 1.0)),
            Err(DynamicsError::InPlaneAngleUndefined)
        ));
    }

    #[test]
    fn hamiltonian_reductions() {
        let p = params();
        let mut x = SVector::<f64, 7>::zeros();
        x[0] = 1.0;
        x[4] = 1.0;
        x[6] = 1.0;
        let zero = FullCostate {
            lambda_r: Vector3::zeros(),
            lambda_v: Vector3::zeros(),
            lambda_m: 0.0,
        };
        assert_eq!(hamiltonian(&x, &zero, 0.0, &p), 0.0);

        let lam = FullCostate {
            lambda_r: Vector3::new(0.1, 0.2, 0.3),
            lambda_v: Vector3::new(-0.2, 0.4, 0.0),
            lambda_m: 0.0,
        };
        let h0 = hamiltonian(&x, &lam, 0.0, &p);
        let r: Vector3<f64> = x.fixed_rows::<3>(0).into();
        let v: Vector3<f64> = x.fixed_rows::<3>(3).into();
        let expect = lam.lambda_r.dot(&v) + lam.lambda_v.dot(&gravity(&r, p.mu));
        assert_relative_eq!(h0, expect, epsilon = 1e-15);
    }
}
