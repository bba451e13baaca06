//! Local polynomial least-squares estimates of a signal and its first
//! derivative (a Savitzky-Golay style differentiator).

use nalgebra::DMatrix;

use super::ReconstructionError;
use crate::dynamics::wrap_angle;

/// Unwraps a sequence of angles so consecutive samples differ by less than pi.
pub fn unwrap_angles(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for (k, &v) in values.iter().enumerate() {
        if k == 0 {
            out.push(v);
        } else {
            let prev = out[k - 1];
            out.push(prev + wrap_angle(v - values[k - 1]));
        }
    }
    out
}

/// Rows of the fit's pseudo-inverse that map samples to the value and the
/// first derivative at the evaluation time.
fn fit_weights(
    times: &[f64],
    at: f64,
    degree: usize,
) -> Result<(Vec<f64>, Vec<f64>), ReconstructionError> {
    let n = times.len();
    if n < degree + 1 {
        return Err(ReconstructionError::TooFewSamples {
            needed: degree + 1,
            got: n,
        });
    }
    let scale = times
        .iter()
        .map(|t| (t - at).abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let vander = DMatrix::from_fn(n, degree + 1, |j, c| ((times[j] - at) / scale).powi(c as i32));
    let pinv = vander
        .svd(true, true)
        .pseudo_inverse(1e-13)
        .map_err(|_| ReconstructionError::TooFewSamples {
            needed: degree + 1,
            got: n,
        })?;
    let value = pinv.row(0).iter().copied().collect();
    let slope = if degree >= 1 {
        pinv.row(1).iter().map(|w| w / scale).collect()
    } else {
        vec![0.0; n]
    };
    Ok((value, slope))
}

/// Fits a degree-`degree` polynomial to `(time, value)` samples and returns
/// its value and slope at `at`. Angular signals are unwrapped before the
/// fit and the value is re-wrapped.
pub fn estimate_signal_and_derivative(
    samples: &[(f64, f64)],
    at: f64,
    degree: usize,
    angular: bool,
) -> Result<(f64, f64), ReconstructionError> {
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mut values: Vec<f64> = samples.iter().map(|s| s.1).collect();
    if angular {
        values = unwrap_angles(&values);
    }
    let (wv, ws) = fit_weights(&times, at, degree)?;
    let value: f64 = wv.iter().zip(&values).map(|(w, y)| w * y).sum();
    let slope: f64 = ws.iter().zip(&values).map(|(w, y)| w * y).sum();
    Ok((if angular { wrap_angle(value) } else { value }, slope))
}

/// Precomputed weights for uniformly spaced windows of fixed length,
/// evaluated at one sample index.
#[derive(Debug, Clone)]
pub struct DerivativeStencil {
    value: Vec<f64>,
    slope: Vec<f64>,
}

impl DerivativeStencil {
    pub fn new(
        len: usize,
        spacing: f64,
        degree: usize,
        at_index: usize,
    ) -> Result<Self, ReconstructionError> {
        let times: Vec<f64> = (0..len).map(|j| j as f64 * spacing).collect();
        let (value, slope) = fit_weights(&times, at_index as f64 * spacing, degree)?;
        Ok(Self { value, slope })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// `(value, slope)` of the fitted polynomial.
    pub fn apply(&self, values: &[f64]) -> (f64, f64) {
        debug_assert_eq!(values.len(), self.value.len());
        let v = self.value.iter().zip(values).map(|(w, y)| w * y).sum();
        let s = self.slope.iter().zip(values).map(|(w, y)| w * y).sum();
        (v, s)
    }

    pub fn apply_angular(&self, values: &[f64]) -> (f64, f64) {
        let (v, s) = self.apply(&unwrap_angles(values));
        (wrap_angle(v), s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sampled(f: impl Fn(f64) -> f64, t0: f64, n: usize, dt: f64) -> Vec<(f64, f64)> {
        (0..n).map(|j| t0 + j as f64 * dt).map(|t| (t, f(t))).collect()
    }

    #[test]
    fn constant_signal() {
        let s = sampled(|_| 4.5, 0.0, 10, 0.01);
        let (v, d) = estimate_signal_and_derivative(&s, 0.03, 3, false).unwrap();
        assert_abs_diff_eq!(v, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn linear_signal_is_reproduced() {
        let s = sampled(|t| 2.0 * t, 1.0, 26, 0.01);
        for at in [1.0, 1.1, 1.25] {
            let (v, d) = estimate_signal_and_derivative(&s, at, 3, false).unwrap();
            assert_abs_diff_eq!(v, 2.0 * at, epsilon = 1e-9);
            assert_abs_diff_eq!(d, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sine_derivative_matches_cosine() {
        // The analytic derivative is the oracle. Window of 26 samples, T = 0.01,
        // evaluated at the centre of the window.
        let s = sampled(f64::sin, 0.3, 26, 0.01);
        let at = 0.3 + 0.125;
        let (v, d) = estimate_signal_and_derivative(&s, at, 3, false).unwrap();
        assert_abs_diff_eq!(v, at.sin(), epsilon = 1e-6);
        assert_abs_diff_eq!(d, at.cos(), epsilon = 1e-5);
    }

    #[test]
    fn too_few_samples() {
        let s = sampled(f64::sin, 0.0, 3, 0.01);
        assert_eq!(
            estimate_signal_and_derivative(&s, 0.0, 3, false),
            Err(ReconstructionError::TooFewSamples { needed: 4, got: 3 })
        );
    }

    #[test]
    fn angular_signal_across_the_wrap() {
        let s: Vec<(f64, f64)> = (0..26)
            .map(|j| {
                let t = j as f64 * 0.01;
                (t, wrap_angle(PI - 0.1 + 0.8 * t))
            })
            .collect();
        let (v, d) = estimate_signal_and_derivative(&s, 0.25, 3, true).unwrap();
        assert_abs_diff_eq!(v, wrap_angle(PI - 0.1 + 0.2), epsilon = 1e-9);
        assert_abs_diff_eq!(d, 0.8, epsilon = 1e-8);
    }

    #[test]
    fn stencil_agrees_with_direct_fit() {
        let s = sampled(|t| (3.0 * t).cos() + t * t, 0.0, 26, 0.01);
        let values: Vec<f64> = s.iter().map(|p| p.1).collect();
        let stencil = DerivativeStencil::new(26, 0.01, 3, 0).unwrap();
        let (v, d) = stencil.apply(&values);
        let (v2, d2) = estimate_signal_and_derivative(&s, 0.0, 3, false).unwrap();
        assert_abs_diff_eq!(v, v2, epsilon = 1e-12);
        assert_abs_diff_eq!(d, d2, epsilon = 1e-9);
    }
}
