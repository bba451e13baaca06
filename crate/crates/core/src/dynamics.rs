//! Unicycle kinematics, the closed-form constant-input flow and the RK4
//! one-step transition map used as the model `F(x, u)`.
//!
//! The closed form is the plant; the RK4 step is the (approximate) model
//! the estimator and the safety filter reason with. The gap between the two
//! is the per-step disturbance bounded by `wbar`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("empty region: {0}")]
    EmptyRegion(&'static str),
    #[error("degenerate region: {0}")]
    DegenerateRegion(&'static str),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sampling period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Unicycle pose. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p1: f64,
    pub p2: f64,
    pub theta: f64,
}

impl State {
    pub fn new(p1: f64, p2: f64, theta: f64) -> Self {
        Self {
            p1,
            p2,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.p1, self.p2, self.theta]
    }

    /// Euclidean distance with the heading difference taken on the circle.
    pub fn distance(&self, other: &State) -> f64 {
        let d1 = self.p1 - other.p1;
        let d2 = self.p2 - other.p2;
        let d3 = wrap_angle(self.theta - other.theta);
        (d1 * d1 + d2 * d2 + d3 * d3).sqrt()
    }

    pub fn position_distance(&self, other: &State) -> f64 {
        (self.p1 - other.p1).hypot(self.p2 - other.p2)
    }
}

/// Held input: linear velocity `v` (m/s) and angular velocity `mu` (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSample {
    pub v: f64,
    pub mu: f64,
}

impl InputSample {
    pub const ZERO: InputSample = InputSample { v: 0.0, mu: 0.0 };

    pub fn new(v: f64, mu: f64) -> Self {
        Self { v, mu }
    }

    pub fn distance(&self, other: &InputSample) -> f64 {
        (self.v - other.v).hypot(self.mu - other.mu)
    }
}

/// Sampling period, window order and the per-step model-error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Sampling period `T` in seconds.
    pub period: f64,
    /// Window order `l`; a window holds `l + 1` outputs and `l` inputs.
    pub window_order: usize,
    /// Upper bound on `|phi(T; x, u) - F(x, u)|` over the operating region.
    pub wbar: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(format!("period must be positive, got {}", self.period));
        }
        if self.window_order < 1 {
            return Err("window_order must be at least 1".into());
        }
        if !(self.wbar >= 0.0) {
            return Err(format!("wbar must be non-negative, got {}", self.wbar));
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.width() > 0.0 {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Axis-aligned box of states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub p1: Interval,
    pub p2: Interval,
    pub theta: Interval,
}

impl StateBox {
    /// `[-12, 12]^2` with every heading.
    pub fn operating_region() -> Self {
        Self {
            p1: Interval::new(-12.0, 12.0),
            p2: Interval::new(-12.0, 12.0),
            theta: Interval::new(-PI, PI),
        }
    }

    pub fn point(x: State) -> Self {
        Self {
            p1: Interval::new(x.p1, x.p1),
            p2: Interval::new(x.p2, x.p2),
            theta: Interval::new(x.theta, x.theta),
        }
    }

    pub fn check(&self) -> Result<(), DynamicsError> {
        if self.p1.is_empty() || self.p2.is_empty() || self.theta.is_empty() {
            return Err(DynamicsError::EmptyRegion("state box"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        State::new(self.p1.sample(rng), self.p2.sample(rng), self.theta.sample(rng))
    }

    pub fn max_abs_p2(&self) -> f64 {
        self.p2.lo.abs().max(self.p2.hi.abs())
    }
}

/// Box of admissible inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub v: Interval,
    pub mu: Interval,
}

impl InputBox {
    /// `[-5, 5] x [-2, 2]`.
    pub fn unicycle() -> Self {
        Self {
            v: Interval::new(-5.0, 5.0),
            mu: Interval::new(-2.0, 2.0),
        }
    }

    pub fn fixed(u: InputSample) -> Self {
        Self {
            v: Interval::new(u.v, u.v),
            mu: Interval::new(u.mu, u.mu),
        }
    }

    pub fn check(&self) -> Result<(), DynamicsError> {
        if self.v.is_empty() || self.mu.is_empty() {
            return Err(DynamicsError::EmptyRegion("input box"));
        }
        Ok(())
    }

    pub fn clamp(&self, u: InputSample) -> InputSample {
        InputSample::new(self.v.clamp(u.v), self.mu.clamp(u.mu))
    }

    pub fn contains(&self, u: &InputSample) -> bool {
        self.v.contains(u.v) && self.mu.contains(u.mu)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> InputSample {
        InputSample::new(self.v.sample(rng), self.mu.sample(rng))
    }
}

/// `(v cos theta, v sin theta, mu)`.
pub fn vector_field(x: &State, u: &InputSample) -> [f64; 3] {
    field(x.theta, u)
}

fn field(theta: f64, u: &InputSample) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    [u.v * c, u.v * s, u.mu]
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Constant-input flow `phi(T; x, u)` in closed form.
///
/// Written with the half-angle chord so that `mu -> 0` degrades smoothly to
/// straight-line motion.
pub fn exact_flow(x: &State, u: &InputSample, duration: f64) -> State {
    let turn = u.mu * duration;
    let chord = u.v * duration * sinc(0.5 * turn);
    let mid = x.theta + 0.5 * turn;
    let (s, c) = mid.sin_cos();
    State::new(x.p1 + chord * c, x.p2 + chord * s, x.theta + turn)
}

/// One classical fourth-order Runge-Kutta step. This is the model `F(x, u)`.
pub fn rk4_step(x: &State, u: &InputSample, duration: f64) -> State {
    let h = duration;
    let k1 = field(x.theta, u);
    let k2 = field(x.theta + 0.5 * h * k1[2], u);
    let k3 = field(x.theta + 0.5 * h * k2[2], u);
    let k4 = field(x.theta + h * k3[2], u);
    let inc = |i: usize| h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    State::new(x.p1 + inc(0), x.p2 + inc(1), x.theta + inc(2))
}

fn check_period(duration: f64) -> Result<(), DynamicsError> {
    if duration > 0.0 && duration.is_finite() {
        Ok(())
    } else {
        Err(DynamicsError::InvalidPeriod(duration))
    }
}

/// Largest observed one-step gap between [`rk4_step`] and [`exact_flow`]
/// over random samples of the region and input box. No safety factor is
/// applied here.
pub fn estimate_transition_error<R: Rng + ?Sized>(
    region: &StateBox,
    inputs: &InputBox,
    duration: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, DynamicsError> {
    region.check()?;
    inputs.check()?;
    check_period(duration)?;
    if n_samples < 1 {
        return Err(DynamicsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut worst = 0.0_f64;
    for _ in 0..n_samples {
        let x = region.sample(rng);
        let u = inputs.sample(rng);
        let err = rk4_step(&x, &u, duration).distance(&exact_flow(&x, &u, duration));
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Empirical Lipschitz constant of `F(., u)` over the region, multiplied by
/// `safety_factor`.
///
/// Pairs are drawn as a random base point plus a perturbation whose size is
/// log-uniform in `[1e-4, 1]`, clamped back into the region, so both the
/// local Jacobian norm and larger secants are probed.
pub fn estimate_lipschitz_f<R: Rng + ?Sized>(
    region: &StateBox,
    inputs: &InputBox,
    duration: f64,
    n_samples: usize,
    safety_factor: f64,
    rng: &mut R,
) -> Result<f64, DynamicsError> {
    region.check()?;
    inputs.check()?;
    check_period(duration)?;
    if n_samples < 2 {
        return Err(DynamicsError::TooFewSamples {
            needed: 2,
            got: n_samples,
        });
    }
    if region.p1.width() <= 0.0 && region.p2.width() <= 0.0 && region.theta.width() <= 0.0 {
        return Err(DynamicsError::DegenerateRegion("state box has zero volume"));
    }
    let mut worst = 0.0_f64;
    for _ in 0..n_samples {
        let x = region.sample(rng);
        let u = inputs.sample(rng);
        let scale = 10f64.powf(rng.random_range(-4.0..=0.0));
        let dir = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        let y = State {
            p1: region.p1.clamp(x.p1 + scale * dir[0]),
            p2: region.p2.clamp(x.p2 + scale * dir[1]),
            theta: wrap_angle(region.theta.clamp(x.theta + scale * dir[2])),
        };
        let dx = x.distance(&y);
        if dx < 1e-12 {
            continue;
        }
        let df = rk4_step(&x, &u, duration).distance(&rk4_step(&y, &u, duration));
        worst = worst.max(df / dx);
    }
    Ok(worst * safety_factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &State, b: &State, tol: f64) {
        assert!(a.distance(b) <= tol, "{a:?} vs {b:?}");
    }

    /// Fine fixed-step midpoint integration, independent of both routes.
    fn brute_flow(x: &State, u: &InputSample, duration: f64, steps: usize) -> State {
        let h = duration / steps as f64;
        let (mut p1, mut p2, mut th) = (x.p1, x.p2, x.theta);
        for _ in 0..steps {
            let mid = th + 0.5 * h * u.mu;
            p1 += h * u.v * mid.cos();
            p2 += h * u.v * mid.sin();
            th += h * u.mu;
        }
        State::new(p1, p2, th)
    }

    #[test]
    fn vector_field_examples() {
        assert_eq!(vector_field(&State::new(0.0, 0.0, 0.0), &InputSample::ZERO), [0.0, 0.0, 0.0]);
        assert_eq!(
            vector_field(&State::new(1.0, 2.0, 0.0), &InputSample::new(1.0, 0.0)),
            [1.0, 0.0, 0.0]
        );
        let f = vector_field(&State::new(0.0, 0.0, PI / 2.0), &InputSample::new(2.0, 1.0));
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 2.0, epsilon = 1e-15);
        assert_eq!(f[2], 1.0);
    }

    #[test]
    fn exact_flow_examples() {
        let o = State::new(0.0, 0.0, 0.0);
        assert_eq!(exact_flow(&o, &InputSample::ZERO, 1.0), o);
        close(&exact_flow(&o, &InputSample::new(1.0, 0.0), 0.5), &State::new(0.5, 0.0, 0.0), 1e-15);
        let half = exact_flow(&o, &InputSample::new(1.0, PI), 1.0);
        assert_abs_diff_eq!(half.p1, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(half.p2, 2.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(half.theta, PI, epsilon = 1e-15);
        let brute = brute_flow(&o, &InputSample::new(1.0, PI), 1.0, 200_000);
        close(&half, &brute, 1e-9);
    }

    #[test]
    fn exact_flow_matches_fine_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = StateBox::operating_region().sample(&mut rng);
            let u = InputBox::unicycle().sample(&mut rng);
            close(&exact_flow(&x, &u, 0.3), &brute_flow(&x, &u, 0.3, 20_000), 1e-8);
        }
    }

    #[test]
    fn rk4_examples() {
        let x = State::new(1.0, 1.0, 0.3);
        assert_eq!(rk4_step(&x, &InputSample::ZERO, 0.01), x);
        let o = State::new(0.0, 0.0, 0.0);
        close(&rk4_step(&o, &InputSample::new(1.0, 0.0), 0.01), &State::new(0.01, 0.0, 0.0), 1e-16);
        let u = InputSample::new(1.0, 1.0);
        close(&rk4_step(&o, &u, 0.01), &exact_flow(&o, &u, 0.01), 1e-10);
    }

    #[test]
    fn transition_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pt = StateBox::point(State::new(2.0, -1.0, 0.4));
        let e = estimate_transition_error(&pt, &InputBox::fixed(InputSample::ZERO), 0.01, 10, &mut rng).unwrap();
        assert_eq!(e, 0.0);

        let region = StateBox::operating_region();
        let e = estimate_transition_error(&region, &InputBox::unicycle(), 0.01, 5000, &mut rng).unwrap();
        assert!(e < 1e-9, "wbar estimate {e}");

        let smooth = InputBox {
            v: Interval::new(2.0, 2.0),
            mu: Interval::new(1.5, 1.5),
        };
        let a = estimate_transition_error(&region, &smooth, 0.2, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = estimate_transition_error(&region, &smooth, 0.1, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ratio = a / b;
        assert!((16.0..=64.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn transition_error_rejects_empty_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut region = StateBox::operating_region();
        region.p1 = Interval::new(1.0, -1.0);
        assert!(matches!(
            estimate_transition_error(&region, &InputBox::unicycle(), 0.01, 10, &mut rng),
            Err(DynamicsError::EmptyRegion(_))
        ));
    }

    #[test]
    fn lipschitz_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let region = StateBox::operating_region();
        let l = estimate_lipschitz_f(&region, &InputBox::fixed(InputSample::ZERO), 0.01, 500, 1.0, &mut rng).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-9);

        let straight = InputBox::fixed(InputSample::new(5.0, 0.0));
        let l = estimate_lipschitz_f(&region, &straight, 0.01, 2000, 1.0, &mut rng).unwrap();
        assert!(l > 1.0 && l <= 1.0 + 5.0 * 0.01, "L = {l}");
        let l2 = estimate_lipschitz_f(&region, &straight, 0.01, 2000, 2.0, &mut rng).unwrap();
        assert!(l2 <= 2.0 * (1.0 + 5.0 * 0.01));

        let pt = StateBox::point(State::new(0.0, 0.0, 0.0));
        assert!(matches!(
            estimate_lipschitz_f(&pt, &InputBox::unicycle(), 0.01, 10, 1.0, &mut rng),
            Err(DynamicsError::DegenerateRegion(_))
        ));
    }

    #[test]
    fn wbar_bound_holds_on_fresh_samples() {
        let region = StateBox::operating_region();
        let inputs = InputBox::unicycle();
        let bound = estimate_transition_error(&region, &inputs, 0.01, 2000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let x = region.sample(&mut rng);
            let u = inputs.sample(&mut rng);
            let err = rk4_step(&x, &u, 0.01).distance(&exact_flow(&x, &u, 0.01));
            assert!(err <= 2.0 * bound, "{err} > 2 * {bound}");
        }
    }

    proptest! {
        #[test]
        fn wrap_lands_in_half_open_interval(theta in -1e3f64..1e3, k in -20i32..20) {
            let w = wrap_angle(theta + 2.0 * PI * k as f64);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!((w - wrap_angle(theta)).abs() < 1e-9 || (w - wrap_angle(theta)).abs() > 2.0 * PI - 1e-9);
        }

        #[test]
        fn flow_is_a_semigroup(
            p1 in -10.0f64..10.0, p2 in -10.0f64..10.0, th in -3.0f64..3.0,
            v in -5.0f64..5.0, mu in -2.0f64..2.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let x = State::new(p1, p2, th);
            let u = InputSample::new(v, mu);
            let direct = exact_flow(&x, &u, t1 + t2);
            let composed = exact_flow(&exact_flow(&x, &u, t1), &u, t2);
            prop_assert!(direct.distance(&composed) < 1e-12);
        }

        #[test]
        fn rk4_local_error_is_fifth_order(
            p1 in -10.0f64..10.0, p2 in -10.0f64..10.0, th in -3.0f64..3.0,
            v in 1.0f64..5.0, mu in 0.5f64..2.0,
        ) {
            let x = State::new(p1, p2, th);
            let u = InputSample::new(v, mu);
            let t = 0.1;
            let truth = exact_flow(&x, &u, t);
            let one = rk4_step(&x, &u, t).distance(&truth);
            let two = rk4_step(&rk4_step(&x, &u, t / 2.0), &u, t / 2.0).distance(&truth);
            prop_assert!(one / two >= 16.0, "ratio {}", one / two);
        }
    }
}
