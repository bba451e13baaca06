//! Zero-order control barrier functions and the secure safety filter.
//!
//! The filter picks the input closest to the nominal one such that the
//! one-step barrier condition
//!
//!   h(F(x, u)) - h(x) >= -lambda h(x) + eps (+ eps1)
//!
//! holds at every enforced plausible state. The search is a deterministic
//! grid sweep followed by bisection toward the nominal input and a short
//! linearized polish.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{exact_flow, rk4_step, InputBox, InputSample, State, StateBox};
use crate::reconstruction::{Mode, PlausibleSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("lambda must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("eps must be positive, got {0}")]
    InvalidEps(f64),
    #[error("eps1 must be non-negative, got {0}")]
    InvalidEps1(f64),
    #[error("band half-width must be positive, got {0}")]
    InvalidBand(f64),
    #[error("filter grid needs at least 2 points per axis")]
    GridTooSmall,
    #[error("nothing to enforce: empty plausible set")]
    EmptyPlausibleSet,
}

/// Horizontal band `|p2| <= half_width`, with `h = half_width^2 - p2^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub half_width: f64,
}

impl Default for Band {
    fn default() -> Self {
        Self { half_width: 3.0 }
    }
}

impl Band {
    pub fn h(&self, x: &State) -> f64 {
        self.half_width * self.half_width - x.p2 * x.p2
    }

    /// Lipschitz constant of `h` over a state box.
    pub fn lipschitz(&self, region: &StateBox) -> f64 {
        2.0 * region.max_abs_p2()
    }
}

/// `9 - p2^2`.
pub fn h_band(x: &State) -> f64 {
    Band::default().h(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfSpec {
    pub band: Band,
    /// Slope of the linear class-K function `gamma(s) = lambda s`.
    pub lambda: f64,
    pub eps: f64,
    /// Robustness margin added in relaxed mode.
    pub eps1: f64,
    /// Lipschitz constant of `h` on the operating region.
    pub l1: f64,
}

impl CbfSpec {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(SafetyError::InvalidLambda(self.lambda));
        }
        if !(self.eps > 0.0) {
            return Err(SafetyError::InvalidEps(self.eps));
        }
        if !(self.eps1 >= 0.0) {
            return Err(SafetyError::InvalidEps1(self.eps1));
        }
        if !(self.band.half_width > 0.0) {
            return Err(SafetyError::InvalidBand(self.band.half_width));
        }
        Ok(())
    }

    pub fn gamma(&self, s: f64) -> f64 {
        self.lambda * s
    }

    pub fn h(&self, x: &State) -> f64 {
        self.band.h(x)
    }

    /// The margins enforced in `mode`: exact mode drops `eps1`.
    pub fn for_mode(&self, mode: Mode) -> Self {
        match mode {
            Mode::Exact => Self { eps1: 0.0, ..*self },
            Mode::Relaxed => *self,
        }
    }
}

/// Smallest `eps1` that covers a state error of `delta_prime` at the
/// current step and a model gap `wbar`:
/// `L1 (L delta' + wbar) + (1 - lambda) L1 delta'`.
pub fn robust_margin(l1: f64, lipschitz: f64, delta_prime: f64, wbar: f64, lambda: f64) -> f64 {
    l1 * (lipschitz * delta_prime + wbar) + (1.0 - lambda) * l1 * delta_prime
}

/// Constraint slack `h(F(x,u)) - h(x) + gamma(h(x)) - eps - eps1`; the
/// constraint holds iff the slack is non-negative.
pub fn cbf_constraint(x: &State, u: &InputSample, spec: &CbfSpec, period: f64) -> f64 {
    let hx = spec.h(x);
    spec.h(&rk4_step(x, u, period)) - hx + spec.gamma(hx) - spec.eps - spec.eps1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    pub grid_v: usize,
    pub grid_mu: usize,
    pub bisection_iterations: usize,
    /// Feasible grid points (closest first) that get refined.
    pub candidates: usize,
    /// Linearize-and-project passes after bisection.
    pub polish_iterations: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            grid_v: 51,
            grid_mu: 21,
            bisection_iterations: 20,
            candidates: 3,
            polish_iterations: 8,
        }
    }
}

impl FilterSettings {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if self.grid_v < 2 || self.grid_mu < 2 {
            return Err(SafetyError::GridTooSmall);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u_safe: InputSample,
    pub feasible: bool,
    /// The nominal input was modified.
    pub active: bool,
    pub correction_norm: f64,
    pub n_constraints: usize,
    /// Smallest slack over the enforced states at `u_safe`.
    pub min_slack: f64,
}

struct Problem<'a> {
    states: &'a [State],
    spec: &'a CbfSpec,
    period: f64,
    input_box: &'a InputBox,
    target: InputSample,
}

impl Problem<'_> {
    fn slack(&self, u: &InputSample) -> f64 {
        self.states
            .iter()
            .map(|x| cbf_constraint(x, u, self.spec, self.period))
            .fold(f64::INFINITY, f64::min)
    }

    fn feasible(&self, u: &InputSample) -> bool {
        self.slack(u) >= 0.0
    }

    fn dist(&self, u: &InputSample) -> f64 {
        u.distance(&self.target)
    }

    /// Moves from a feasible `from` toward `to` as far as feasibility allows.
    fn bisect(&self, from: InputSample, to: InputSample, iterations: usize) -> InputSample {
        if self.feasible(&to) {
            return to;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..iterations {
            let mid = 0.5 * (lo + hi);
            if self.feasible(&lerp(&from, &to, mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lerp(&from, &to, lo)
    }

    /// Closest point to the target under the constraints linearized at `a`
    /// plus the input box.
    fn linearized_projection(&self, a: &InputSample) -> Option<InputSample> {
        let h = 1e-6;
        // half-planes n . u >= c
        let mut planes: Vec<([f64; 2], f64)> = Vec::new();
        for x in self.states {
            let g0 = cbf_constraint(x, a, self.spec, self.period);
            let gv = (cbf_constraint(x, &InputSample::new(a.v + h, a.mu), self.spec, self.period) - g0) / h;
            let gm = (cbf_constraint(x, &InputSample::new(a.v, a.mu + h), self.spec, self.period) - g0) / h;
            if gv == 0.0 && gm == 0.0 {
                continue;
            }
            planes.push(([gv, gm], gv * a.v + gm * a.mu - g0));
        }
        let b = self.input_box;
        planes.push(([1.0, 0.0], b.v.lo));
        planes.push(([-1.0, 0.0], -b.v.hi));
        planes.push(([0.0, 1.0], b.mu.lo));
        planes.push(([0.0, -1.0], -b.mu.hi));

        let t = [self.target.v, self.target.mu];
        let ok = |p: [f64; 2]| {
            planes
                .iter()
                .all(|(n, c)| n[0] * p[0] + n[1] * p[1] >= c - 1e-12 * (1.0 + c.abs()))
        };
        let mut best: Option<([f64; 2], f64)> = None;
        let mut consider = |p: [f64; 2]| {
            if p[0].is_finite() && p[1].is_finite() && ok(p) {
                let d = (p[0] - t[0]).hypot(p[1] - t[1]);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((p, d));
                }
            }
        };
        consider(t);
        for (n, c) in &planes {
            let nn = n[0] * n[0] + n[1] * n[1];
            let s = (c - (n[0] * t[0] + n[1] * t[1])) / nn;
            consider([t[0] + s * n[0], t[1] + s * n[1]]);
        }
        for i in 0..planes.len() {
            for j in i + 1..planes.len() {
                let (n1, c1) = planes[i];
                let (n2, c2) = planes[j];
                let det = n1[0] * n2[1] - n1[1] * n2[0];
                if det.abs() < 1e-14 {
                    continue;
                }
                consider([(c1 * n2[1] - c2 * n1[1]) / det, (n1[0] * c2 - n2[0] * c1) / det]);
            }
        }
        best.map(|(p, _)| InputSample::new(p[0], p[1]))
    }

    fn refine(&self, start: InputSample, settings: &FilterSettings) -> InputSample {
        let mut a = self.bisect(start, self.target, settings.bisection_iterations);
        // coordinate moves toward the target
        for _ in 0..2 {
            let toward_v = InputSample::new(self.target.v, a.mu);
            a = self.bisect(a, toward_v, settings.bisection_iterations);
            let toward_mu = InputSample::new(a.v, self.target.mu);
            a = self.bisect(a, toward_mu, settings.bisection_iterations);
        }
        for _ in 0..settings.polish_iterations {
            let Some(c) = self.linearized_projection(&a) else {
                break;
            };
            if self.dist(&c) >= self.dist(&a) {
                break;
            }
            let next = self.bisect(a, self.input_box.clamp(c), 40);
            if self.dist(&next) >= self.dist(&a) - 1e-15 {
                break;
            }
            a = next;
        }
        a
    }
}

fn lerp(a: &InputSample, b: &InputSample, t: f64) -> InputSample {
    InputSample::new(a.v + t * (b.v - a.v), a.mu + t * (b.mu - a.mu))
}

fn grid_axis(lo: f64, hi: f64, n: usize, k: usize) -> f64 {
    lo + (hi - lo) * k as f64 / (n - 1) as f64
}

/// Min-norm correction of `u_nom` enforcing the barrier condition at every
/// state in `states`, with the margins in `spec` as given.
pub fn filter_states(
    u_nom: &InputSample,
    states: &[State],
    spec: &CbfSpec,
    period: f64,
    input_box: &InputBox,
    settings: &FilterSettings,
) -> Result<FilterResult, SafetyError> {
    if states.is_empty() {
        return Err(SafetyError::EmptyPlausibleSet);
    }
    settings.validate()?;
    let target = input_box.clamp(*u_nom);
    let problem = Problem {
        states,
        spec,
        period,
        input_box,
        target,
    };
    let result = |u: InputSample, feasible: bool| {
        let min_slack = problem.slack(&u);
        FilterResult {
            u_safe: u,
            feasible,
            active: u != *u_nom,
            correction_norm: u.distance(u_nom),
            n_constraints: states.len(),
            min_slack,
        }
    };
    if problem.feasible(&target) {
        return Ok(result(target, true));
    }

    let mut grid: Vec<(InputSample, f64)> = Vec::with_capacity(settings.grid_v * settings.grid_mu);
    for i in 0..settings.grid_v {
        for j in 0..settings.grid_mu {
            let u = InputSample::new(
                grid_axis(input_box.v.lo, input_box.v.hi, settings.grid_v, i),
                grid_axis(input_box.mu.lo, input_box.mu.hi, settings.grid_mu, j),
            );
            grid.push((u, problem.slack(&u)));
        }
    }
    let mut feasible: Vec<InputSample> = grid.iter().filter(|g| g.1 >= 0.0).map(|g| g.0).collect();
    if feasible.is_empty() {
        let best = grid
            .iter()
            .fold(grid[0], |b, g| if g.1 > b.1 { *g } else { b });
        return Ok(result(best.0, false));
    }
    feasible.sort_by(|a, b| problem.dist(a).total_cmp(&problem.dist(b)));
    let mut best: Option<InputSample> = None;
    for start in feasible.iter().take(settings.candidates.max(1)) {
        let u = problem.refine(*start, settings);
        if best.is_none_or(|b| problem.dist(&u) < problem.dist(&b)) {
            best = Some(u);
        }
    }
    Ok(result(best.expect("at least one candidate"), true))
}

/// The secure safety filter: every consistent center is enforced, with
/// `eps1` in relaxed mode and without it in exact mode.
pub fn secure_filter(
    u_nom: &InputSample,
    plausible: &PlausibleSet<State>,
    spec: &CbfSpec,
    period: f64,
    input_box: &InputBox,
    settings: &FilterSettings,
) -> Result<FilterResult, SafetyError> {
    let states: Vec<State> = plausible.centers().copied().collect();
    filter_states(u_nom, &states, &spec.for_mode(plausible.mode), period, input_box, settings)
}

/// Sampled bound on the intra-sample drop of `h`: the largest
/// `h(phi(T)) - h(phi(t))`, `t in [0, T)`, over random states and inputs,
/// clipped below at 0.
pub fn verify_zocbf_margin<R: Rng + ?Sized>(
    band: &Band,
    period: f64,
    region: &StateBox,
    input_box: &InputBox,
    samples: usize,
    substeps: usize,
    rng: &mut R,
) -> f64 {
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let x = region.sample(rng);
        let u = input_box.sample(rng);
        let end = band.h(&exact_flow(&x, &u, period));
        for j in 0..substeps.max(1) {
            let t = period * j as f64 / substeps.max(1) as f64;
            worst = worst.max(end - band.h(&exact_flow(&x, &u, t)));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec(lambda: f64, eps: f64) -> CbfSpec {
        CbfSpec {
            band: Band::default(),
            lambda,
            eps,
            eps1: 0.0,
            l1: 24.0,
        }
    }

    #[test]
    fn band_values() {
        assert_eq!(h_band(&State::new(0.0, 0.0, 0.0)), 9.0);
        assert_eq!(h_band(&State::new(5.0, 3.0, 1.0)), 0.0);
        assert_eq!(h_band(&State::new(0.0, -4.0, 0.0)), -7.0);
        assert_eq!(Band::default().lipschitz(&StateBox::operating_region()), 24.0);
    }

    #[test]
    fn standing_still_slack_is_gamma_h() {
        let s = CbfSpec { eps: 1e-300, ..spec(0.5, 1.0) };
        let slack = cbf_constraint(&State::new(0.0, 0.0, 0.0), &InputSample::ZERO, &s, 0.01);
        assert_abs_diff_eq!(slack, 4.5, epsilon = 1e-12);
    }

    #[test]
    fn upward_step_near_edge() {
        let x = State::new(0.0, 2.9, PI / 2.0);
        let u = InputSample::new(5.0, 0.0);
        let s = spec(0.1, 0.3);
        // Straight-line motion is integrated exactly by RK4.
        let p2 = 2.9 + 5.0 * 0.01;
        let want = (9.0 - p2 * p2) - (9.0 - 2.9 * 2.9) + 0.1 * (9.0 - 2.9 * 2.9) - 0.3;
        assert_abs_diff_eq!(cbf_constraint(&x, &u, &s, 0.01), want, epsilon = 1e-12);
        let on_edge = State::new(0.0, 3.0, PI / 2.0);
        assert!(cbf_constraint(&on_edge, &u, &spec(0.1, 1e-9), 0.01) < 0.0);
    }

    #[test]
    fn margins_by_mode() {
        let s = CbfSpec { eps1: 0.2, ..spec(0.1, 0.3) };
        assert_eq!(s.for_mode(Mode::Exact).eps1, 0.0);
        assert_eq!(s.for_mode(Mode::Relaxed).eps1, 0.2);
        assert!(spec(0.0, 0.3).validate().is_err());
        assert!(spec(1.5, 0.3).validate().is_err());
        assert!(spec(1.0, 0.3).validate().is_ok());
        assert!(robust_margin(24.0, 1.02, 1e-7, 1e-12, 0.1) >= 24.0 * (1.02 * 1e-7 + 1e-12));
    }

    #[test]
    fn feasible_nominal_is_returned_exactly() {
        let s = spec(0.1, 0.3);
        let u = InputSample::new(1.234567, -0.3);
        let r = filter_states(&u, &[State::new(0.0, 0.5, 0.4)], &s, 0.01, &InputBox::unicycle(), &FilterSettings::default()).unwrap();
        assert_eq!(r.u_safe, u);
        assert!(r.feasible && !r.active);
        assert_eq!(r.correction_norm, 0.0);
    }

    #[test]
    fn interior_state_accepts_every_input() {
        // grid sweep oracle: positive slack over the whole box
        let s = spec(0.1, 0.3);
        let x = State::new(2.0, 0.2, 1.0);
        for i in 0..=40 {
            for j in 0..=20 {
                let u = InputSample::new(-5.0 + 0.25 * i as f64, -2.0 + 0.2 * j as f64);
                assert!(cbf_constraint(&x, &u, &s, 0.01) > 0.0);
                let r = filter_states(&u, &[x], &s, 0.01, &InputBox::unicycle(), &FilterSettings::default()).unwrap();
                assert_eq!(r.u_safe, u);
            }
        }
    }

    #[test]
    fn correction_near_the_edge() {
        let s = spec(0.1, 0.3);
        let x = State::new(0.0, 2.3, PI / 2.0);
        let u_nom = InputSample::new(5.0, 0.0);
        let r = filter_states(&u_nom, &[x], &s, 0.01, &InputBox::unicycle(), &FilterSettings::default()).unwrap();
        assert!(r.feasible && r.active);
        assert!(r.min_slack >= -1e-9);
        assert!(r.u_safe.v < 5.0);
        // the boundary is nearly vertical in (v, mu): most of the correction
        // is in v, and the result sits close to the constraint
        assert!(r.min_slack < 1e-6, "{r:?}");
    }

    #[test]
    fn infeasible_falls_back_to_max_min() {
        // heading along the band edge outside it; no single step can recover
        let s = spec(0.1, 0.3);
        let x = State::new(0.0, 3.5, 0.0);
        let r = filter_states(&InputSample::new(1.0, 0.0), &[x], &s, 0.01, &InputBox::unicycle(), &FilterSettings::default()).unwrap();
        assert!(!r.feasible);
        assert!(r.min_slack < 0.0);
    }

    #[test]
    fn zocbf_margin_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slab = StateBox {
            p2: crate::dynamics::Interval::new(-3.05, 3.05),
            ..StateBox::operating_region()
        };
        let eps = verify_zocbf_margin(&Band::default(), 0.01, &slab, &InputBox::unicycle(), 4000, 20, &mut rng);
        // analytic rate bound 2 |p2| |v| T
        assert!(eps > 0.0 && eps <= 2.0 * 3.05 * 5.0 * 0.01 + 1e-3, "{eps}");
        let tiny = verify_zocbf_margin(&Band::default(), 1e-6, &slab, &InputBox::unicycle(), 2000, 20, &mut rng);
        assert!(tiny < 1e-4);
        let frozen = InputBox {
            v: crate::dynamics::Interval::new(0.0, 0.0),
            mu: crate::dynamics::Interval::new(-2.0, 2.0),
        };
        assert_eq!(verify_zocbf_margin(&Band::default(), 0.01, &slab, &frozen, 500, 20, &mut rng), 0.0);
    }

    proptest! {
        #[test]
        fn discrete_recursion_keeps_h_above_floor(
            h0 in 0.0..20.0f64,
            lambda in 0.01..1.0f64,
            eps in 0.0..2.0f64,
            slack in proptest::collection::vec(0.0..3.0f64, 1..200),
        ) {
            let floor = h0.min(eps / lambda);
            let mut h = h0;
            for s in slack {
                h = (1.0 - lambda) * h + eps + s;
                prop_assert!(h >= floor - 1e-9 * (1.0 + floor.abs()));
            }
        }

        #[test]
        fn enlarging_the_enforced_set_never_reduces_correction(
            p2 in -2.8..2.8f64,
            th in -PI..PI,
            extra in proptest::collection::vec((-2.8..2.8f64, -PI..PI), 1..4),
            v in -5.0..5.0f64,
            mu in -2.0..2.0f64,
        ) {
            let s = spec(0.1, 0.3);
            let base = vec![State::new(0.0, p2, th)];
            let mut larger = base.clone();
            larger.extend(extra.iter().map(|&(q, t)| State::new(1.0, q, t)));
            let u = InputSample::new(v, mu);
            let settings = FilterSettings::default();
            let small = filter_states(&u, &base, &s, 0.01, &InputBox::unicycle(), &settings).unwrap();
            let big = filter_states(&u, &larger, &s, 0.01, &InputBox::unicycle(), &settings).unwrap();
            if small.feasible && big.feasible {
                prop_assert!(big.correction_norm >= small.correction_norm - 1e-6,
                    "{} < {}", big.correction_norm, small.correction_norm);
            }
            for r in [small, big] {
                if r.feasible {
                    prop_assert!(r.min_slack >= -1e-9);
                }
            }
        }
    }
}
