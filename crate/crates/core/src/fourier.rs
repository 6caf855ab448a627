//! Fourier-basis control parameterization.
//!
//! The control is `U_i(t) = h(eta)ᵀ eps_i` per channel, with basis
//! `h(eta) = [1, cos eta, sin eta, cos 2eta, sin 2eta, ..., cos K eta,
//! sin K eta]` and `eta` a linear reprojection of time onto `[eta0, etaf]`.
//!
//! The default domain is `[0, 3pi/2]`. Both endpoints of the "natural"
//! choices fail: a full period forces U(t0) = U(tf), a spurious periodicity
//! the transfer does not have, while on a half period the combined
//! cosine/sine family is so far from orthogonal that its design matrix is
//! numerically rank-deficient in f64 beyond order ~10 (the fitted weights
//! then carry cancellation noise large enough to defeat the 1e-12 switching
//! tolerance). Three quarters of a period keeps the family well conditioned
//! (cond ~ 1e5 at K = 15) with no endpoint constraint.
//!
//! The weight vector is channel-major: all `2K+1` weights of U1, then U2,
//! then U3.

use crate::control::ControlProfile;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Condition-number ceiling for the least-squares normal matrix.
pub const FIT_COND_MAX: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FourierError {
    #[error("weight vector has length {got}, expected 3(2K+1) = {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
    #[error("time {t} outside control window [{t0}, {tf}]")]
    OutsideWindow { t: f64, t0: f64, tf: f64 },
    #[error("underdetermined fit: {got} samples for {needed} basis functions")]
    Underdetermined { needed: usize, got: usize },
    #[error("normal matrix ill-conditioned (cond = {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("sample times must be distinct")]
    DuplicateSampleTimes,
}

/// Weights of the Fourier control representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierWeights {
    order: usize,
    eps: DVector<f64>,
}

impl FourierWeights {
    pub fn new(order: usize, eps: DVector<f64>) -> Result<Self, FourierError> {
        let expected = 3 * (2 * order + 1);
        if eps.len() != expected {
            return Err(FourierError::LengthMismatch {
                got: eps.len(),
                expected,
            });
        }
        if let Some(i) = eps.iter().position(|x| !x.is_finite()) {
            return Err(FourierError::NonFinite(i));
        }
        Ok(Self { order, eps })
    }

    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            eps: DVector::zeros(3 * (2 * order + 1)),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Basis functions per channel, 2K+1.
    pub fn n_basis(&self) -> usize {
        2 * self.order + 1
    }

    /// Total weight count, 3(2K+1).
    pub fn n_weights(&self) -> usize {
        self.eps.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.eps
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let nb = self.n_basis();
        &self.eps.as_slice()[i * nb..(i + 1) * nb]
    }

    /// eps <- eps + scale * delta (Newton update helper).
    pub fn add_scaled(&self, delta: &DVector<f64>, scale: f64) -> Result<Self, FourierError> {
        Self::new(self.order, &self.eps + scale * delta)
    }
}

/// Linear time-to-basis-domain projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisMap {
    pub eta0: f64,
    pub etaf: f64,
    pub t0: f64,
    pub tf: f64,
}

impl BasisMap {
    /// The default domain [0, 3pi/2] (see the module notes on conditioning).
    pub fn standard(t0: f64, tf: f64) -> Self {
        Self {
            eta0: 0.0,
            etaf: 1.5 * std::f64::consts::PI,
            t0,
            tf,
        }
    }

    pub fn deta_dt(&self) -> f64 {
        (self.etaf - self.eta0) / (self.tf - self.t0)
    }

    /// Unchecked projection (callers inside the propagation loop stay within
    /// the window up to floating-point rounding).
    pub fn eta(&self, t: f64) -> f64 {
        self.deta_dt() * (t - self.t0) + self.eta0
    }

    fn contains(&self, t: f64) -> bool {
        let slack = 1e-9 * (self.tf - self.t0).abs();
        t >= self.t0 - slack && t <= self.tf + slack
    }
}

/// h(eta) = [1, cos eta, sin eta, ..., cos K eta, sin K eta]
pub fn basis_vector(eta: f64, order: usize) -> DVector<f64> {
    let mut h = DVector::zeros(2 * order + 1);
    h[0] = 1.0;
    for k in 1..=order {
        let (s, c) = (k as f64 * eta).sin_cos();
        h[2 * k - 1] = c;
        h[2 * k] = s;
    }
    h
}

/// dh/deta = [0, -sin eta, cos eta, ..., -K sin K eta, K cos K eta]
pub fn basis_vector_rate(eta: f64, order: usize) -> DVector<f64> {
    let mut h = DVector::zeros(2 * order + 1);
    for k in 1..=order {
        let kf = k as f64;
        let (s, c) = (kf * eta).sin_cos();
        h[2 * k - 1] = -kf * s;
        h[2 * k] = kf * c;
    }
    h
}

/// Checked time-to-eta projection.
pub fn eta_of_t(t: f64, map: &BasisMap) -> Result<f64, FourierError> {
    if !map.contains(t) {
        return Err(FourierError::OutsideWindow {
            t,
            t0: map.t0,
            tf: map.tf,
        });
    }
    Ok(map.eta(t))
}

fn eval_channels(h: &DVector<f64>, w: &FourierWeights) -> Vector3<f64> {
    let nb = w.n_basis();
    let mut out = Vector3::zeros();
    for ch in 0..3 {
        let weights = w.channel(ch);
        let mut acc = 0.0;
        for j in 0..nb {
            acc += h[j] * weights[j];
        }
        out[ch] = acc;
    }
    out
}

/// U(t), checked against the window.
pub fn control_at(t: f64, w: &FourierWeights, map: &BasisMap) -> Result<Vector3<f64>, FourierError> {
    let eta = eta_of_t(t, map)?;
    Ok(eval_channels(&basis_vector(eta, w.order), w))
}

/// dU/dt, checked against the window.
pub fn control_rate_at(
    t: f64,
    w: &FourierWeights,
    map: &BasisMap,
) -> Result<Vector3<f64>, FourierError> {
    let eta = eta_of_t(t, map)?;
    Ok(map.deta_dt() * eval_channels(&basis_vector_rate(eta, w.order), w))
}

/// Weights-plus-map bundle implementing [`ControlProfile`].
#[derive(Debug, Clone, Copy)]
pub struct FourierControl<'a> {
    pub weights: &'a FourierWeights,
    pub map: &'a BasisMap,
}

impl<'a> FourierControl<'a> {
    pub fn new(weights: &'a FourierWeights, map: &'a BasisMap) -> Self {
        Self { weights, map }
    }
}

impl ControlProfile for FourierControl<'_> {
    fn control(&self, t: f64) -> Vector3<f64> {
        let eta = self.map.eta(t.clamp(self.map.t0, self.map.tf));
        eval_channels(&basis_vector(eta, self.weights.order), self.weights)
    }

    fn control_rate(&self, t: f64) -> Vector3<f64> {
        let eta = self.map.eta(t.clamp(self.map.t0, self.map.tf));
        self.map.deta_dt() * eval_channels(&basis_vector_rate(eta, self.weights.order), self.weights)
    }
}

/// On-disk weight format: order, basis domain, channel-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub order: usize,
    pub eta0: f64,
    pub etaf: f64,
    /// eps[channel][basis index], 3 x (2K+1)
    pub eps: [Vec<f64>; 3],
}

impl WeightsFile {
    pub fn new(w: &FourierWeights, map: &BasisMap) -> Self {
        Self {
            order: w.order,
            eta0: map.eta0,
            etaf: map.etaf,
            eps: [
                w.channel(0).to_vec(),
                w.channel(1).to_vec(),
                w.channel(2).to_vec(),
            ],
        }
    }

    /// Rebuild the weights; the basis domain pairs with the caller's time
    /// window.
    pub fn to_weights(&self) -> Result<FourierWeights, FourierError> {
        let nb = 2 * self.order + 1;
        let mut eps = DVector::zeros(3 * nb);
        for (ch, channel) in self.eps.iter().enumerate() {
            if channel.len() != nb {
                return Err(FourierError::LengthMismatch {
                    got: channel.len(),
                    expected: nb,
                });
            }
            for (j, &v) in channel.iter().enumerate() {
                eps[ch * nb + j] = v;
            }
        }
        FourierWeights::new(self.order, eps)
    }

    pub fn basis_map(&self, t0: f64, tf: f64) -> BasisMap {
        BasisMap {
            eta0: self.eta0,
            etaf: self.etaf,
            t0,
            tf,
        }
    }
}

/// Least-squares initialization of the weights from a sampled reference
/// control, channel by channel through the normal equations.
pub fn fit_weights_least_squares(
    samples: &[(f64, Vector3<f64>)],
    order: usize,
    map: &BasisMap,
) -> Result<FourierWeights, FourierError> {
    let nb = 2 * order + 1;
    if samples.len() < nb {
        return Err(FourierError::Underdetermined {
            needed: nb,
            got: samples.len(),
        });
    }
    let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    if times.windows(2).any(|w| w[1] - w[0] == 0.0) {
        return Err(FourierError::DuplicateSampleTimes);
    }

    let n = samples.len();
    let mut design = DMatrix::zeros(n, nb);
    for (row, (t, _)) in samples.iter().enumerate() {
        let eta = eta_of_t(*t, map)?;
        design.row_mut(row).copy_from(&basis_vector(eta, order).transpose());
    }
    // Rank-revealing solve on the design matrix itself. The mixed
    // cosine/sine family on a sub-period interval is heavily non-orthogonal
    // at higher orders, so forming the normal matrix squares an already
    // large condition number into numerical singularity; the SVD route with
    // a truncation cutoff returns the minimal-norm least-squares solution
    // instead.
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > FIT_COND_MAX {
        return Err(FourierError::IllConditioned { cond });
    }
    let cutoff = 1e-12 * smax;

    let mut eps = DVector::zeros(3 * nb);
    for ch in 0..3 {
        let b = DVector::from_iterator(n, samples.iter().map(|s| s.1[ch]));
        let sol = svd
            .solve(&b, cutoff)
            .map_err(|_| FourierError::IllConditioned { cond })?;
        eps.rows_mut(ch * nb, nb).copy_from(&sol);
    }
    FourierWeights::new(order, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn map01() -> BasisMap {
        // tests pin the half-period domain where the expected values are
        // hand-computable; the low orders used here stay well conditioned
        BasisMap {
            eta0: 0.0,
            etaf: PI,
            t0: 0.0,
            tf: 2.0,
        }
    }

    #[test]
    fn basis_values() {
        assert_eq!(basis_vector(0.7, 0).as_slice(), &[1.0]);
        let h = basis_vector(0.0, 1);
        assert_eq!(h.as_slice(), &[1.0, 1.0, 0.0]);
        let h = basis_vector(PI / 2.0, 1);
        assert_relative_eq!(h[0], 1.0);
        assert_relative_eq!(h[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(h[2], 1.0);
    }

    #[test]
    fn eta_projection() {
        let map = map01();
        assert_relative_eq!(eta_of_t(0.0, &map).unwrap(), 0.0);
        assert_relative_eq!(eta_of_t(2.0, &map).unwrap(), PI);
        assert_relative_eq!(eta_of_t(1.0, &map).unwrap(), PI / 2.0);
        assert!(matches!(
            eta_of_t(2.5, &map),
            Err(FourierError::OutsideWindow { .. })
        ));
    }

    #[test]
    fn constant_terms_only() {
        let order = 3;
        let nb = 2 * order + 1;
        let mut eps = DVector::zeros(3 * nb);
        eps[0] = 0.4;
        eps[nb] = -0.7;
        eps[2 * nb] = 1.1;
        let w = FourierWeights::new(order, eps).unwrap();
        let map = map01();
        for t in [0.0, 0.3, 1.7, 2.0] {
            let u = control_at(t, &w, &map).unwrap();
            assert_relative_eq!(u.x, 0.4);
            assert_relative_eq!(u.y, -0.7);
            assert_relative_eq!(u.z, 1.1);
            let du = control_rate_at(t, &w, &map).unwrap();
            assert_relative_eq!(du.norm(), 0.0, epsilon = 1e-15);
        }
        let zero = FourierWeights::zeros(order);
        assert_relative_eq!(control_at(1.0, &zero, &map).unwrap().norm(), 0.0);
    }

    #[test]
    fn single_harmonic() {
        let order = 1;
        let mut eps = DVector::zeros(9);
        eps[1] = 1.0; // cos eta on channel 1
        let w = FourierWeights::new(order, eps).unwrap();
        let map = map01();
        let u = control_at(2.0, &w, &map).unwrap(); // eta = pi
        assert_relative_eq!(u.x, -1.0, epsilon = 1e-15);

        let mut eps = DVector::zeros(9);
        eps[2] = 1.0; // sin eta on channel 1
        let w = FourierWeights::new(order, eps).unwrap();
        let du = control_rate_at(0.0, &w, &map).unwrap(); // d/dt sin eta = deta_dt at 0
        assert_relative_eq!(du.x, map.deta_dt(), epsilon = 1e-15);
    }

    #[test]
    fn rate_matches_finite_differences() {
        let order = 4;
        let map = map01();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let eps = DVector::from_fn(3 * (2 * order + 1), |_, _| rng.random_range(-0.3..0.3));
            let w = FourierWeights::new(order, eps).unwrap();
            let t = rng.random_range(0.01..1.99);
            let dt = 1e-6;
            let (tp, tm) = (t + dt, t - dt);
            // divide by the actually-representable spacing
            let fd = (control_at(tp, &w, &map).unwrap() - control_at(tm, &w, &map).unwrap())
                / (tp - tm);
            let an = control_rate_at(t, &w, &map).unwrap();
            assert_relative_eq!((an - fd).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_recovers_exact_weights() {
        let order = 5;
        let nb = 2 * order + 1;
        let map = map01();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let eps = DVector::from_fn(3 * nb, |_, _| rng.random_range(-1.0..1.0));
        let truth = FourierWeights::new(order, eps).unwrap();
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let t = 2.0 * i as f64 / 39.0;
                (t, control_at(t, &truth, &map).unwrap())
            })
            .collect();
        let fitted = fit_weights_least_squares(&samples, order, &map).unwrap();
        for (a, b) in fitted.as_vector().iter().zip(truth.as_vector().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_residual_is_orthogonal_to_design() {
        // samples NOT representable exactly (order 2 data, order 1 fit)
        let map = map01();
        let f = |t: f64| {
            let eta = map.eta(t);
            Vector3::new((2.0 * eta).cos() + 0.3, eta.sin() - (2.0 * eta).sin(), 0.1 * eta.cos())
        };
        let samples: Vec<_> = (0..25).map(|i| (2.0 * i as f64 / 24.0, f(2.0 * i as f64 / 24.0))).collect();
        let order = 1;
        let w = fit_weights_least_squares(&samples, order, &map).unwrap();
        let nb = 2 * order + 1;
        for ch in 0..3 {
            let mut dot = vec![0.0; nb];
            for (t, val) in &samples {
                let h = basis_vector(map.eta(*t), order);
                let fit = control_at(*t, &w, &map).unwrap();
                let res = val[ch] - fit[ch];
                for j in 0..nb {
                    dot[j] += h[j] * res;
                }
            }
            for d in dot {
                assert_relative_eq!(d, 0.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn fit_underdetermined_is_rejected() {
        let map = map01();
        let order = 2;
        let samples: Vec<_> = (0..(2 * order))
            .map(|i| (i as f64 * 0.1, Vector3::zeros()))
            .collect();
        assert!(matches!(
            fit_weights_least_squares(&samples, order, &map),
            Err(FourierError::Underdetermined { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn fit_duplicate_times_rejected() {
        let map = map01();
        let samples = vec![
            (0.0, Vector3::zeros()),
            (0.5, Vector3::zeros()),
            (0.5, Vector3::zeros()),
            (1.0, Vector3::zeros()),
        ];
        assert!(matches!(
            fit_weights_least_squares(&samples, 0, &map),
            Err(FourierError::DuplicateSampleTimes)
        ));
    }

    proptest! {
        #[test]
        fn control_is_linear_in_weights(seed in 0u64..1000, t in 0.0f64..2.0) {
            let order = 3;
            let n = 3 * (2 * order + 1);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let e1 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
            let e2 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
            let map = map01();
            let w1 = FourierWeights::new(order, e1.clone()).unwrap();
            let w2 = FourierWeights::new(order, e2.clone()).unwrap();
            let w12 = FourierWeights::new(order, e1 + e2).unwrap();
            let lhs = control_at(t, &w12, &map).unwrap();
            let rhs = control_at(t, &w1, &map).unwrap() + control_at(t, &w2, &map).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
