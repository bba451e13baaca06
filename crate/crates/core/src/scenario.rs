//! Closed-loop experiment: a unicycle follows a sine path under a remote
//! controller that only sees the (spoofed) position sensors, while an
//! onboard secure safety filter with all five sensors keeps it inside the
//! band.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::dynamics::{exact_flow, rk4_step, wrap_angle, InputBox, InputSample, SamplingConfig, State};
use crate::reconstruction::{
    enumerate_subsets, evaluate_subsets, grow_radius, propagate_plausible_set, IoWindow, Mode, ObserverSettings,
    PlausibleMember, PlausibleSet, UnicycleObserver,
};
use crate::safety::{secure_filter, Band, CbfSpec, FilterResult, FilterSettings};
use crate::sensing::{corrupt, measure, AttackMode, AttackPlan, Attacker, MeasurementVector, SensorSubset, UNICYCLE_ANGULAR};

/// Reference path `(a0 t + a1, a2 sin(a3 t + a4) + a5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub a: [f64; 6],
}

impl PathParams {
    pub fn sine_path() -> Self {
        Self {
            a: [1.0, -10.0, 1.8, PI / 5.0, 0.0, 1.0],
        }
    }

    pub fn reference(&self, t: f64) -> (f64, f64) {
        let a = &self.a;
        (a[0] * t + a[1], a[2] * (a[3] * t + a[4]).sin() + a[5])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerGains {
    pub k_v: f64,
    pub k_mu: f64,
    /// Look-ahead time along the reference (s).
    pub lookahead: f64,
}

impl Default for TrackerGains {
    fn default() -> Self {
        Self {
            k_v: 1.0,
            k_mu: 2.0,
            lookahead: 0.5,
        }
    }
}

/// Pure-pursuit tracking of the point `lookahead` seconds ahead on the path.
pub fn nominal_controller(
    pose: &State,
    t: f64,
    path: &PathParams,
    gains: &TrackerGains,
    input_box: &InputBox,
) -> InputSample {
    let (r1, r2) = path.reference(t + gains.lookahead);
    let (d1, d2) = (r1 - pose.p1, r2 - pose.p2);
    let err = wrap_angle(d2.atan2(d1) - pose.theta);
    let dist = d1.hypot(d2);
    input_box.clamp(InputSample::new(
        gains.k_v * dist / gains.lookahead * err.cos(),
        gains.k_mu * err,
    ))
}

/// The remote controller. It reads sensors 1 and 2 only and infers its
/// heading from the direction of successive positions.
#[derive(Debug, Clone)]
pub struct RemoteTracker {
    path: PathParams,
    gains: TrackerGains,
    input_box: InputBox,
    heading: f64,
    last: Option<(f64, f64)>,
    last_u: InputSample,
}

impl RemoteTracker {
    pub fn new(path: PathParams, gains: TrackerGains, input_box: InputBox, initial_heading: f64) -> Self {
        Self {
            path,
            gains,
            input_box,
            heading: initial_heading,
            last: None,
            last_u: InputSample::ZERO,
        }
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn update(&mut self, p1: f64, p2: f64, t: f64, period: f64) -> InputSample {
        if let Some((q1, q2)) = self.last {
            let (d1, d2) = (p1 - q1, p2 - q2);
            let turn = self.last_u.mu * period;
            if d1.hypot(d2) > 1e-9 {
                // the chord points along the mid-step heading
                let mut chord = d2.atan2(d1);
                if self.last_u.v < 0.0 {
                    chord += PI;
                }
                self.heading = wrap_angle(chord + 0.5 * turn);
            } else {
                self.heading = wrap_angle(self.heading + turn);
            }
        }
        self.last = Some((p1, p2));
        let u = nominal_controller(&State::new(p1, p2, self.heading), t, &self.path, &self.gains, &self.input_box);
        self.last_u = u;
        u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub x0: State,
    pub attack: AttackPlan,
    pub path: PathParams,
    pub tracker: TrackerGains,
    pub period: f64,
    pub window_order: usize,
    /// Simulated time (s).
    pub horizon: f64,
    pub max_attacked: usize,
    pub input_box: InputBox,
    pub band: Band,
    pub lambda: f64,
    pub filter: FilterSettings,
    pub observer: ObserverSettings,
    pub calibration: Calibration,
    pub mode: Mode,
    pub filter_enabled: bool,
    pub seed: u64,
}

impl ScenarioSpec {
    /// The sine-path experiment with sensors 1 and 2 spoofed.
    pub fn sine_path(calibration: Calibration) -> Self {
        Self {
            x0: State::new(-10.0, 0.0, -0.1),
            attack: AttackPlan::fake_trajectory(vec![1, 2], State::new(-10.0, 0.0, 0.1)),
            path: PathParams::sine_path(),
            tracker: TrackerGains::default(),
            period: 0.01,
            window_order: 25,
            horizon: 22.0,
            max_attacked: 2,
            input_box: InputBox::unicycle(),
            band: Band::default(),
            lambda: 0.1,
            filter: FilterSettings::default(),
            observer: ObserverSettings::default(),
            calibration,
            mode: Mode::Relaxed,
            filter_enabled: true,
            seed: 7,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            period: self.period,
            window_order: self.window_order,
            wbar: self.calibration.wbar,
        }
    }

    pub fn cbf(&self) -> CbfSpec {
        CbfSpec {
            band: self.band,
            lambda: self.lambda,
            eps: self.calibration.eps,
            eps1: self.calibration.eps1,
            l1: self.calibration.l1,
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.period).round() as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sampling().validate()?;
        self.input_box.check().map_err(|e| e.to_string())?;
        self.cbf().validate().map_err(|e| e.to_string())?;
        self.filter.validate().map_err(|e| e.to_string())?;
        self.attack.validate(self.max_attacked).map_err(|e| e.to_string())?;
        if self.horizon <= (self.window_order + 1) as f64 * self.period {
            return Err(format!(
                "horizon {} s does not exceed the warm-up of {} steps",
                self.horizon,
                self.window_order + 1
            ));
        }
        if self.max_attacked + 3 > crate::sensing::UNICYCLE_SENSORS {
            return Err(format!(
                "max_attacked = {} leaves fewer than 3 sensors per subset",
                self.max_attacked
            ));
        }
        if self.tracker.lookahead <= 0.0 {
            return Err("tracker lookahead must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetStatus {
    pub consistent: bool,
    pub singular: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub x: State,
    pub fake: Option<State>,
    pub y: Vec<f64>,
    pub u_nom: InputSample,
    pub u_safe: InputSample,
    pub h: f64,
    /// Filter and reconstruction are active (past the warm-up).
    pub engaged: bool,
    /// Per-subset outcome, in [`ClosedLoopRun::subsets`] order; empty
    /// during warm-up.
    pub subsets: Vec<SubsetStatus>,
    /// Consistent subsets at this step.
    pub consistent: Vec<SensorSubset>,
    /// Plausible current states that were enforced.
    pub centers: Vec<State>,
    pub delta_prime: f64,
    pub reconstruction_ok: bool,
    pub feasible: bool,
    pub certified: bool,
    pub correction_norm: f64,
    /// `delta' - min distance(x, center)`; non-negative means contained.
    pub containment_slack: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub spec: ScenarioSpec,
    pub subsets: Vec<SensorSubset>,
    pub records: Vec<StepRecord>,
    pub events: Vec<String>,
    pub elapsed: Duration,
}

fn initial_heading_belief(spec: &ScenarioSpec) -> f64 {
    match (&spec.attack.mode, spec.attack.fake_initial) {
        (AttackMode::FakeTrajectory, Some(f)) if spec.attack.attacked.iter().any(|&i| i <= 2) => f.theta,
        _ => spec.x0.theta,
    }
}

pub fn run_closed_loop(spec: &ScenarioSpec) -> Result<ClosedLoopRun, String> {
    spec.validate()?;
    let started = Instant::now();
    let l = spec.window_order;
    let period = spec.period;
    let cal = &spec.calibration;
    let cbf = spec.cbf();
    let observer = UnicycleObserver::new(period, l, spec.observer);
    let subsets = enumerate_subsets(crate::sensing::UNICYCLE_SENSORS, spec.max_attacked).map_err(|e| e.to_string())?;
    let mut attacker = Attacker::new(spec.attack.clone()).map_err(|e| e.to_string())?;
    let mut tracker = RemoteTracker::new(spec.path, spec.tracker, spec.input_box, initial_heading_belief(spec));
    let delta_prime = match spec.mode {
        Mode::Exact => 0.0,
        Mode::Relaxed => grow_radius(cal.delta, cal.lipschitz, cal.wbar, l),
    };

    let mut x = spec.x0;
    let mut outputs: Vec<MeasurementVector> = Vec::new();
    let mut applied: Vec<InputSample> = Vec::new();
    let mut records = Vec::with_capacity(spec.steps() + 1);
    let mut events = Vec::new();
    let mut previous: Option<PlausibleSet<State>> = None;

    for k in 0..=spec.steps() {
        let t = k as f64 * period;
        let e = attacker.attacker_step(&x, applied.last(), period);
        let y = corrupt(&measure(&x), &e, &UNICYCLE_ANGULAR);
        outputs.push(y.clone());
        let u_nom = tracker.update(y.get(1), y.get(2), t, period);

        let mut rec = StepRecord {
            k,
            t,
            x,
            fake: attacker.fake_state(),
            y: y.values.clone(),
            u_nom,
            u_safe: u_nom,
            h: cbf.h(&x),
            engaged: false,
            subsets: Vec::new(),
            consistent: Vec::new(),
            centers: Vec::new(),
            delta_prime,
            reconstruction_ok: true,
            feasible: true,
            certified: true,
            correction_norm: 0.0,
            containment_slack: None,
        };

        if k > l {
            rec.engaged = true;
            let window = IoWindow::new(applied[k - l..k].to_vec(), outputs[k - l..=k].to_vec(), k - l)
                .map_err(|e| e.to_string())?;
            let estimates = evaluate_subsets(&observer, &window, spec.max_attacked, cal.tau, cal.delta)
                .map_err(|e| e.to_string())?;
            rec.subsets = estimates
                .iter()
                .map(|s| SubsetStatus {
                    consistent: s.consistent,
                    singular: s.singular,
                    residual: s.residual,
                })
                .collect();
            let current = match PlausibleSet::from_estimates(spec.mode, &estimates, cal.delta) {
                Ok(initial) => {
                    rec.consistent = initial.members.iter().map(|m| m.gamma.clone()).collect();
                    propagate_plausible_set(&observer, &initial, &window.inputs, cal.lipschitz, cal.wbar)
                }
                Err(err) => {
                    rec.reconstruction_ok = false;
                    rec.certified = false;
                    events.push(format!("k={k} t={t:.2}: {err}; reusing the previous plausible set"));
                    let u_prev = applied.last().copied().unwrap_or(InputSample::ZERO);
                    match &previous {
                        Some(p) => PlausibleSet {
                            mode: p.mode,
                            members: p
                                .members
                                .iter()
                                .map(|m| PlausibleMember {
                                    gamma: m.gamma.clone(),
                                    center: rk4_step(&m.center, &u_prev, period),
                                })
                                .collect(),
                            radius: grow_radius(p.radius, cal.lipschitz, cal.wbar, 1),
                        },
                        None => PlausibleSet {
                            mode: spec.mode,
                            members: Vec::new(),
                            radius: 0.0,
                        },
                    }
                }
            };
            rec.centers = current.centers().copied().collect();
            rec.delta_prime = current.radius;
            if !rec.centers.is_empty() {
                let nearest = rec.centers.iter().map(|c| c.distance(&x)).fold(f64::INFINITY, f64::min);
                rec.containment_slack = Some(current.radius - nearest);
            }

            if spec.filter_enabled {
                let result = if current.is_empty() {
                    None
                } else {
                    Some(
                        secure_filter(&u_nom, &current, &cbf, period, &spec.input_box, &spec.filter)
                            .map_err(|e| e.to_string())?,
                    )
                };
                match result {
                    Some(FilterResult {
                        u_safe,
                        feasible,
                        correction_norm,
                        min_slack,
                        ..
                    }) => {
                        rec.u_safe = u_safe;
                        rec.feasible = feasible;
                        rec.correction_norm = correction_norm;
                        if !feasible {
                            rec.certified = false;
                            events.push(format!(
                                "k={k} t={t:.2}: filter infeasible, max-min fallback with slack {min_slack:.3e}"
                            ));
                        }
                    }
                    None => {
                        rec.u_safe = InputSample::ZERO;
                        rec.feasible = false;
                        rec.certified = false;
                        rec.correction_norm = u_nom.distance(&InputSample::ZERO);
                        events.push(format!("k={k} t={t:.2}: nothing to enforce, holding still"));
                    }
                }
            }
            previous = Some(current);
        }

        applied.push(rec.u_safe);
        x = exact_flow(&x, &rec.u_safe, period);
        records.push(rec);
    }

    Ok(ClosedLoopRun {
        spec: spec.clone(),
        subsets,
        records,
        events,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_starts_at_path_origin() {
        assert_eq!(PathParams::sine_path().reference(0.0), (-10.0, 1.0));
    }

    #[test]
    fn on_a_straight_path_the_tracker_holds_course() {
        let path = PathParams {
            a: [1.0, -10.0, 0.0, PI / 5.0, 0.0, 1.0],
        };
        let gains = TrackerGains::default();
        for t in [0.0, 3.3, 17.0] {
            let (p1, p2) = path.reference(t);
            let u = nominal_controller(&State::new(p1, p2, 0.0), t, &path, &gains, &InputBox::unicycle());
            assert!(u.mu.abs() < 1e-6);
            assert_abs_diff_eq!(u.v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn heading_error_saturates_turn_rate() {
        let path = PathParams {
            a: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let gains = TrackerGains::default();
        // target straight ahead along +p1, vehicle facing -p2
        let u = nominal_controller(&State::new(-0.5, 0.0, -PI / 2.0), 0.0, &path, &gains, &InputBox::unicycle());
        assert_abs_diff_eq!(u.mu, 2.0, epsilon = 1e-12);
        let wide = InputBox {
            mu: crate::dynamics::Interval::new(-10.0, 10.0),
            ..InputBox::unicycle()
        };
        let u = nominal_controller(&State::new(-0.5, 0.0, -PI / 2.0), 0.0, &path, &gains, &wide);
        assert_abs_diff_eq!(u.mu, 2.0 * PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn remote_heading_follows_the_vehicle() {
        let mut tr = RemoteTracker::new(PathParams::sine_path(), TrackerGains::default(), InputBox::unicycle(), 0.3);
        let mut x = State::new(-10.0, 0.0, 0.3);
        for k in 0..200 {
            let u = tr.update(x.p1, x.p2, k as f64 * 0.01, 0.01);
            assert!((wrap_angle(tr.heading() - x.theta)).abs() < 1e-9, "step {k}");
            x = exact_flow(&x, &u, 0.01);
        }
    }
}
