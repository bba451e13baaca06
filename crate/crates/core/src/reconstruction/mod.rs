//! Secure state reconstruction from a rolling input-output window.
//!
//! Every sensor subset of size `p - s` gets its own state estimate from an
//! observability map. A subset whose estimate, pushed through the model,
//! reproduces that subset's readings within a threshold is *consistent*.
//! With at most `s` attacked sensors at least one attack-free subset is
//! always consistent, so the true window-start state is among (or within
//! `delta` of) the consistent estimates. Propagating those estimates to the
//! current step with the model gives the set the safety filter enforces.

pub mod derivative;
pub mod linear;
pub mod unicycle;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::{MeasurementVector, SensorSubset};

pub use derivative::{estimate_signal_and_derivative, DerivativeStencil};
pub use unicycle::{observability_map_unicycle, ObserverSettings, UnicycleObserver};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("cannot drop {r} of {p} sensors")]
    InvalidSparsity { p: usize, r: usize },
    #[error("no observability map for subset {0} (needs at least 3 sensors)")]
    UnsupportedSubset(SensorSubset),
    #[error("window has {inputs} inputs and {outputs} outputs; expected {expected_inputs} and {expected_outputs}")]
    WindowShape {
        inputs: usize,
        outputs: usize,
        expected_inputs: usize,
        expected_outputs: usize,
    },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no consistent sensor subset among {evaluated} evaluated")]
    NoConsistentSubset { evaluated: usize },
}

/// Plausible sets are either finite point sets (exact model) or unions of
/// balls of a shared radius around consistent estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Relaxed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Exact => "exact",
            Mode::Relaxed => "relaxed",
        })
    }
}

/// Inputs `u_{k-l} .. u_{k-1}` and outputs `y_{k-l} .. y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IoWindow<U> {
    pub inputs: Vec<U>,
    pub outputs: Vec<MeasurementVector>,
    /// Discrete index `k - l` of the first output.
    pub start_index: usize,
}

impl<U> IoWindow<U> {
    pub fn new(
        inputs: Vec<U>,
        outputs: Vec<MeasurementVector>,
        start_index: usize,
    ) -> Result<Self, ReconstructionError> {
        if inputs.is_empty() || outputs.len() != inputs.len() + 1 {
            return Err(ReconstructionError::WindowShape {
                inputs: inputs.len(),
                outputs: outputs.len(),
                expected_inputs: inputs.len().max(1),
                expected_outputs: inputs.len().max(1) + 1,
            });
        }
        Ok(Self {
            inputs,
            outputs,
            start_index,
        })
    }

    /// Window order `l`.
    pub fn order(&self) -> usize {
        self.inputs.len()
    }
}

/// Result of an observability map: a point estimate of the window-start
/// state, or an abstention when the map's rule degenerates.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<X> {
    pub estimate: X,
    pub singular: bool,
}

/// A sampled-data system with `p` sensors and a per-subset observability map.
pub trait ObservedSystem {
    type State: Clone + fmt::Debug;
    type Input: Clone + fmt::Debug;

    fn sensor_count(&self) -> usize;

    /// Whether sensor `i` (1-based) reports an angle.
    fn is_angular(&self, i: usize) -> bool;

    /// One-step model `F(x, u)`.
    fn transition(&self, x: &Self::State, u: &Self::Input) -> Self::State;

    /// Honest measurement `c(x)`.
    fn output(&self, x: &Self::State) -> MeasurementVector;

    fn distance(&self, a: &Self::State, b: &Self::State) -> f64;

    /// Observability map for the data restricted to `gamma`.
    fn observe(
        &self,
        window: &IoWindow<Self::Input>,
        gamma: &SensorSubset,
    ) -> Result<Observation<Self::State>, ReconstructionError>;
}

/// Per-subset outcome of reconstruction and the consistency test.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetEstimate<X> {
    pub gamma: SensorSubset,
    /// Estimate of the state at the window start.
    pub xhat_initial: X,
    pub delta: f64,
    pub consistent: bool,
    pub residual: f64,
    pub singular: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlausibleMember<X> {
    pub gamma: SensorSubset,
    pub center: X,
}

/// Consistent estimates, either at the window start or propagated to the
/// current step. `radius` is 0 in exact mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlausibleSet<X> {
    pub mode: Mode,
    pub members: Vec<PlausibleMember<X>>,
    pub radius: f64,
}

impl<X: Clone> PlausibleSet<X> {
    /// Keeps the consistent, non-singular estimates in the given order.
    pub fn from_estimates(
        mode: Mode,
        estimates: &[SubsetEstimate<X>],
        delta: f64,
    ) -> Result<Self, ReconstructionError> {
        let members: Vec<_> = estimates
            .iter()
            .filter(|e| e.consistent)
            .map(|e| PlausibleMember {
                gamma: e.gamma.clone(),
                center: e.xhat_initial.clone(),
            })
            .collect();
        if members.is_empty() {
            return Err(ReconstructionError::NoConsistentSubset {
                evaluated: estimates.len(),
            });
        }
        Ok(Self {
            mode,
            members,
            radius: match mode {
                Mode::Exact => 0.0,
                Mode::Relaxed => delta,
            },
        })
    }

    pub fn centers(&self) -> impl Iterator<Item = &X> {
        self.members.iter().map(|m| &m.center)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// All `(p - r)`-element subsets of `1..=p` in lexicographic order.
pub fn enumerate_subsets(p: usize, r: usize) -> Result<Vec<SensorSubset>, ReconstructionError> {
    if r >= p {
        return Err(ReconstructionError::InvalidSparsity { p, r });
    }
    let k = p - r;
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (1..=k).collect();
    loop {
        out.push(SensorSubset::new(idx.clone(), p).expect("combinations are valid subsets"));
        // advance to the next combination
        let mut i = k;
        while i > 0 && idx[i - 1] == p - k + i {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Largest absolute gap between the readings in `gamma` and the readings
/// predicted by propagating `x0` through the model across the window.
/// Angular channels are compared modulo `2 pi`; degenerate entries on
/// either side are skipped.
pub fn window_residual<S: ObservedSystem>(
    system: &S,
    window: &IoWindow<S::Input>,
    gamma: &SensorSubset,
    x0: &S::State,
) -> f64 {
    let mut z = x0.clone();
    let mut worst = 0.0_f64;
    for (j, y) in window.outputs.iter().enumerate() {
        if j > 0 {
            z = system.transition(&z, &window.inputs[j - 1]);
        }
        let predicted = system.output(&z);
        for i in gamma.iter() {
            if !y.usable(i) || !predicted.usable(i) {
                continue;
            }
            let mut d = y.get(i) - predicted.get(i);
            if system.is_angular(i) {
                d = crate::dynamics::wrap_angle(d);
            }
            if !d.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Propagate-and-threshold consistency test. Returns `(consistent, residual)`.
pub fn consistency_check<S: ObservedSystem>(
    system: &S,
    window: &IoWindow<S::Input>,
    gamma: &SensorSubset,
    xhat: &S::State,
    tau: f64,
) -> (bool, f64) {
    let residual = window_residual(system, window, gamma, xhat);
    (residual <= tau, residual)
}

/// Observability map plus consistency test for one subset.
pub fn evaluate_subset<S: ObservedSystem>(
    system: &S,
    window: &IoWindow<S::Input>,
    gamma: &SensorSubset,
    tau: f64,
    delta: f64,
) -> Result<SubsetEstimate<S::State>, ReconstructionError> {
    let obs = system.observe(window, gamma)?;
    let (passes, residual) = consistency_check(system, window, gamma, &obs.estimate, tau);
    Ok(SubsetEstimate {
        gamma: gamma.clone(),
        xhat_initial: obs.estimate,
        delta,
        consistent: passes && !obs.singular,
        residual,
        singular: obs.singular,
    })
}

/// Evaluates every subset in `C_p^{p-s}`, in lexicographic order.
pub fn evaluate_subsets<S: ObservedSystem>(
    system: &S,
    window: &IoWindow<S::Input>,
    max_attacked: usize,
    tau: f64,
    delta: f64,
) -> Result<Vec<SubsetEstimate<S::State>>, ReconstructionError> {
    enumerate_subsets(system.sensor_count(), max_attacked)?
        .iter()
        .map(|gamma| evaluate_subset(system, window, gamma, tau, delta))
        .collect()
}

/// Plausible window-start states: the consistent estimates over `C_p^{p-s}`
/// (points in exact mode, `delta`-balls in relaxed mode).
pub fn plausible_initial_set<S: ObservedSystem>(
    system: &S,
    window: &IoWindow<S::Input>,
    max_attacked: usize,
    mode: Mode,
    tau: f64,
    delta: f64,
) -> Result<PlausibleSet<S::State>, ReconstructionError> {
    let estimates = evaluate_subsets(system, window, max_attacked, tau, delta)?;
    PlausibleSet::from_estimates(mode, &estimates, delta)
}

/// `g^steps(delta)` with `g(s) = L s + wbar`.
pub fn grow_radius(delta: f64, lipschitz: f64, wbar: f64, steps: usize) -> f64 {
    (0..steps).fold(delta, |r, _| lipschitz * r + wbar)
}

/// Pushes every center through the model across `inputs` and grows the
/// radius accordingly (relaxed mode only).
pub fn propagate_plausible_set<S: ObservedSystem>(
    system: &S,
    set: &PlausibleSet<S::State>,
    inputs: &[S::Input],
    lipschitz: f64,
    wbar: f64,
) -> PlausibleSet<S::State> {
    let members = set
        .members
        .iter()
        .map(|m| PlausibleMember {
            gamma: m.gamma.clone(),
            center: inputs
                .iter()
                .fold(m.center.clone(), |z, u| system.transition(&z, u)),
        })
        .collect();
    let radius = match set.mode {
        Mode::Exact => 0.0,
        Mode::Relaxed => grow_radius(set.radius, lipschitz, wbar, inputs.len()),
    };
    PlausibleSet {
        mode: set.mode,
        members,
        radius,
    }
}

/// Tolerance used for point equality in exact mode.
pub const EXACT_AGREEMENT_TOL: f64 = 1e-9;

/// Whether all centers agree the way they must when the system has twice
/// the needed redundancy: pairwise within `4 delta` (relaxed) or equal to
/// [`EXACT_AGREEMENT_TOL`] (exact).
pub fn check_2s_agreement<S: ObservedSystem>(
    system: &S,
    set: &PlausibleSet<S::State>,
    delta: f64,
) -> bool {
    let tol = match set.mode {
        Mode::Exact => EXACT_AGREEMENT_TOL,
        Mode::Relaxed => 4.0 * delta,
    };
    let c: Vec<_> = set.centers().collect();
    for a in 0..c.len() {
        for b in a + 1..c.len() {
            if system.distance(c[a], c[b]) > tol {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{InputSample, State};
    use crate::reconstruction::unicycle::UnicycleObserver;

    fn names(v: &[SensorSubset]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn enumerate_examples() {
        let all = enumerate_subsets(5, 2).unwrap();
        assert_eq!(all.len(), 10);
        assert!(all.iter().all(|s| s.len() == 3));
        assert_eq!(all[0].indices(), &[1, 2, 3]);
        assert_eq!(all[9].indices(), &[3, 4, 5]);
        assert_eq!(names(&enumerate_subsets(5, 0).unwrap()), vec!["{1,2,3,4,5}"]);
        assert_eq!(names(&enumerate_subsets(3, 1).unwrap()), vec!["{1,2}", "{1,3}", "{2,3}"]);
        assert_eq!(
            enumerate_subsets(5, 5),
            Err(ReconstructionError::InvalidSparsity { p: 5, r: 5 })
        );
    }

    #[test]
    fn window_shape_is_checked() {
        let y = crate::sensing::measure(&State::new(1.0, 1.0, 0.0));
        assert!(IoWindow::new(vec![InputSample::ZERO; 2], vec![y.clone(); 2], 0).is_err());
        assert!(IoWindow::new(vec![InputSample::ZERO; 2], vec![y; 3], 0).is_ok());
    }

    #[test]
    fn radius_growth() {
        assert_eq!(grow_radius(0.01, 1.0, 0.0, 25), 0.01);
        let direct = {
            let mut r = 0.01;
            for _ in 0..25 {
                r = 1.05 * r + 1e-9;
            }
            r
        };
        assert_eq!(grow_radius(0.01, 1.05, 1e-9, 25), direct);
        let closed = 0.01 * 1.05f64.powi(25) + 1e-9 * (1.05f64.powi(25) - 1.0) / 0.05;
        assert!((direct - closed).abs() < 1e-12);
    }

    fn set_of(mode: Mode, centers: &[State], radius: f64) -> PlausibleSet<State> {
        PlausibleSet {
            mode,
            members: centers
                .iter()
                .enumerate()
                .map(|(k, c)| PlausibleMember {
                    gamma: SensorSubset::new(vec![k + 1], 5).unwrap(),
                    center: *c,
                })
                .collect(),
            radius,
        }
    }

    #[test]
    fn propagation_examples() {
        let obs = UnicycleObserver::new(0.01, 25, ObserverSettings::default());
        let c = State::new(1.0, -2.0, 0.3);
        let set = set_of(Mode::Relaxed, &[c], 0.02);
        let still = propagate_plausible_set(&obs, &set, &vec![InputSample::ZERO; 25], 1.0, 0.0);
        assert_eq!(still.members[0].center, c);
        assert_eq!(still.radius, 0.02);

        let exact = set_of(Mode::Exact, &[c], 0.0);
        let u = vec![InputSample::new(1.0, 0.5); 25];
        let moved = propagate_plausible_set(&obs, &exact, &u, 1.05, 1e-9);
        assert_eq!(moved.radius, 0.0);
        let want = u.iter().fold(c, |z, u| crate::dynamics::rk4_step(&z, u, 0.01));
        assert_eq!(moved.members[0].center, want);
    }

    #[test]
    fn agreement_examples() {
        let obs = UnicycleObserver::new(0.01, 25, ObserverSettings::default());
        let a = State::new(0.0, 0.0, 0.0);
        assert!(check_2s_agreement(&obs, &set_of(Mode::Relaxed, &[a], 0.01), 0.01));
        let b = State::new(0.1, 0.0, 0.0);
        assert!(!check_2s_agreement(&obs, &set_of(Mode::Relaxed, &[a, b], 0.01), 0.01));
        assert!(check_2s_agreement(&obs, &set_of(Mode::Relaxed, &[a, State::new(0.03, 0.0, 0.0)], 0.01), 0.01));
        assert!(!check_2s_agreement(&obs, &set_of(Mode::Exact, &[a, State::new(1e-6, 0.0, 0.0)], 0.0), 0.0));
    }

    #[test]
    fn empty_plausible_set_is_an_error() {
        let est = SubsetEstimate {
            gamma: SensorSubset::all(5),
            xhat_initial: State::new(0.0, 0.0, 0.0),
            delta: 0.1,
            consistent: false,
            residual: 3.0,
            singular: false,
        };
        assert_eq!(
            PlausibleSet::from_estimates(Mode::Relaxed, &[est], 0.1),
            Err(ReconstructionError::NoConsistentSubset { evaluated: 1 })
        );
    }
}
