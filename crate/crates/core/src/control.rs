//! Continuous control profiles U(t) for the augmented dynamics.
//!
//! A profile supplies the primer vector and its time derivative at any time
//! of the flight window; the derivative feeds the analytic switching-function
//! rate used by event refinement and jump compensation.

use nalgebra::Vector3;

pub trait ControlProfile {
    fn control(&self, t: f64) -> Vector3<f64>;
    fn control_rate(&self, t: f64) -> Vector3<f64>;
}

/// Cubic Hermite interpolant of a sampled control with known rates.
///
/// Used to hand the converged indirect solution (lambda_v sampled at the
/// trajectory nodes, with exact rate -lambda_r) to the segmented propagator.
#[derive(Debug, Clone)]
pub struct SampledControl {
    ts: Vec<f64>,
    values: Vec<Vector3<f64>>,
    rates: Vec<Vector3<f64>>,
}

impl SampledControl {
    /// Build from (time, value, rate) samples. Samples are sorted by time and
    /// exact duplicates (segment-boundary nodes) collapse to one entry.
    pub fn new(mut samples: Vec<(f64, Vector3<f64>, Vector3<f64>)>) -> Self {
        assert!(samples.len() >= 2, "need at least two samples");
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ts = Vec::with_capacity(samples.len());
        let mut values = Vec::with_capacity(samples.len());
        let mut rates = Vec::with_capacity(samples.len());
        for (t, v, d) in samples {
            if ts.last().is_some_and(|last: &f64| t - last < 1e-14) {
                continue;
            }
            ts.push(t);
            values.push(v);
            rates.push(d);
        }
        Self { ts, values, rates }
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.ts.len();
        // index of the interval [ts[i], ts[i+1]] containing t, clamped
        let i = self.ts.partition_point(|&x| x <= t);
        i.clamp(1, n - 1) - 1
    }
}

impl ControlProfile for SampledControl {
    fn control(&self, t: f64) -> Vector3<f64> {
        let i = self.locate(t);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.values[i]
            + h10 * h * self.rates[i]
            + h01 * self.values[i + 1]
            + h11 * h * self.rates[i + 1]
    }

    fn control_rate(&self, t: f64) -> Vector3<f64> {
        let i = self.locate(t);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        (d00 / h) * self.values[i]
            + d10 * self.rates[i]
            + (d01 / h) * self.values[i + 1]
            + d11 * self.rates[i + 1]
    }
}

impl<T: ControlProfile + ?Sized> ControlProfile for &T {
    fn control(&self, t: f64) -> Vector3<f64> {
        (**self).control(t)
    }
    fn control_rate(&self, t: f64) -> Vector3<f64> {
        (**self).control_rate(t)
    }
}
