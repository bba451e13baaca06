//! Sampling-based calibration of the constants the filter and the
//! reconstruction rely on: model gap, Lipschitz constants, reconstruction
//! radius, consistency threshold and barrier margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    estimate_lipschitz_f, estimate_transition_error, exact_flow, DynamicsError, InputBox, InputSample, Interval,
    StateBox,
};
use crate::reconstruction::{
    enumerate_subsets, grow_radius, window_residual, IoWindow, ObservedSystem, ReconstructionError, UnicycleObserver,
};
use crate::safety::{robust_margin, verify_zocbf_margin, Band};
use crate::sensing::measure;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error("no non-singular reconstruction in {0} windows")]
    NoUsableWindows(usize),
    #[error("invalid calibration setting: {0}")]
    Invalid(String),
}

/// Frozen constants. Serialized into the `[calibration]` block of a config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Bound on the per-step gap between model and plant.
    pub wbar: f64,
    /// Lipschitz constant of the one-step model.
    pub lipschitz: f64,
    /// Lipschitz constant of `h`.
    pub l1: f64,
    /// Reconstruction error bound at the window start.
    pub delta: f64,
    /// Radius after propagation to the current step.
    pub delta_prime: f64,
    pub eps: f64,
    pub eps1: f64,
    /// Consistency threshold.
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub seed: u64,
    pub transition_samples: usize,
    pub wbar_factor: f64,
    pub lipschitz_samples: usize,
    pub lipschitz_factor: f64,
    pub windows: usize,
    pub delta_factor: f64,
    pub eps_samples: usize,
    pub eps_substeps: usize,
    pub eps_factor: f64,
    pub tau_factor: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            seed: 7,
            transition_samples: 20_000,
            wbar_factor: 2.0,
            lipschitz_samples: 20_000,
            lipschitz_factor: 1.02,
            windows: 300,
            delta_factor: 2.0,
            eps_samples: 20_000,
            eps_substeps: 20,
            eps_factor: 1.1,
            tau_factor: 3.0,
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let factors = [
            ("wbar_factor", self.wbar_factor),
            ("lipschitz_factor", self.lipschitz_factor),
            ("delta_factor", self.delta_factor),
            ("eps_factor", self.eps_factor),
            ("tau_factor", self.tau_factor),
        ];
        for (name, f) in factors {
            if !(f >= 1.0) {
                return Err(CalibrationError::Invalid(format!("{name} must be >= 1, got {f}")));
            }
        }
        if self.windows == 0 || self.eps_samples == 0 || self.eps_substeps == 0 {
            return Err(CalibrationError::Invalid("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// What the calibration needs to know about the problem.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub region: StateBox,
    pub input_box: InputBox,
    pub observer: UnicycleObserver,
    pub max_attacked: usize,
    pub band: Band,
    pub lambda: f64,
}

/// Empirical reconstruction statistics on attack-free windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub max_error: f64,
    pub max_residual: f64,
    pub usable: usize,
    pub singular: usize,
}

/// Random attack-free window: a state in `region` and a bounded random
/// walk of inputs, with exact-flow outputs.
pub fn random_window<R: Rng + ?Sized>(
    region: &StateBox,
    input_box: &InputBox,
    period: f64,
    order: usize,
    rng: &mut R,
) -> (crate::dynamics::State, IoWindow<InputSample>) {
    let x0 = region.sample(rng);
    let mut u = input_box.sample(rng);
    let (dv, dmu) = (0.05 * input_box.v.width(), 0.05 * input_box.mu.width());
    let mut inputs = Vec::with_capacity(order);
    for _ in 0..order {
        inputs.push(u);
        u = input_box.clamp(InputSample::new(
            u.v + rng.random_range(-dv..=dv),
            u.mu + rng.random_range(-dmu..=dmu),
        ));
    }
    let mut x = x0;
    let mut outputs = vec![measure(&x)];
    for u in &inputs {
        x = exact_flow(&x, u, period);
        outputs.push(measure(&x));
    }
    let window = IoWindow::new(inputs, outputs, 0).expect("shape is consistent by construction");
    (x0, window)
}

pub fn reconstruction_stats<R: Rng + ?Sized>(
    problem: &CalibrationProblem,
    windows: usize,
    rng: &mut R,
) -> Result<WindowStats, CalibrationError> {
    let obs = &problem.observer;
    let subsets = enumerate_subsets(obs.sensor_count(), problem.max_attacked)?;
    let mut stats = WindowStats {
        max_error: 0.0,
        max_residual: 0.0,
        usable: 0,
        singular: 0,
    };
    for _ in 0..windows {
        let (x0, w) = random_window(&problem.region, &problem.input_box, obs.period, obs.window_order, rng);
        for gamma in &subsets {
            let o = obs.observe(&w, gamma)?;
            if o.singular {
                stats.singular += 1;
                continue;
            }
            stats.usable += 1;
            stats.max_error = stats.max_error.max(o.estimate.distance(&x0));
            stats.max_residual = stats.max_residual.max(window_residual(obs, &w, gamma, &o.estimate));
        }
    }
    if stats.usable == 0 {
        return Err(CalibrationError::NoUsableWindows(windows));
    }
    Ok(stats)
}

/// Largest sensitivity of any measurement channel to the state on the
/// region outside the range floor.
pub fn measurement_lipschitz(min_range: f64) -> f64 {
    (1.0 / min_range).max(1.0)
}

pub fn calibrate(problem: &CalibrationProblem, settings: &CalibrationSettings) -> Result<Calibration, CalibrationError> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let period = problem.observer.period;
    let wbar = settings.wbar_factor
        * estimate_transition_error(
            &problem.region,
            &problem.input_box,
            period,
            settings.transition_samples,
            &mut rng,
        )?;
    let lipschitz = estimate_lipschitz_f(
        &problem.region,
        &problem.input_box,
        period,
        settings.lipschitz_samples,
        settings.lipschitz_factor,
        &mut rng,
    )?;
    let l1 = problem.band.lipschitz(&problem.region);
    let stats = reconstruction_stats(problem, settings.windows, &mut rng)?;
    let delta = settings.delta_factor * stats.max_error.max(f64::EPSILON);
    let delta_prime = grow_radius(delta, lipschitz, wbar, problem.observer.window_order);

    // Only states near the band edge can dip below it within one period.
    let reach = problem.band.half_width + problem.input_box.v.lo.abs().max(problem.input_box.v.hi.abs()) * period;
    let slab = StateBox {
        p2: Interval::new(-reach, reach),
        ..problem.region
    };
    let eps = settings.eps_factor
        * verify_zocbf_margin(
            &problem.band,
            period,
            &slab,
            &problem.input_box,
            settings.eps_samples,
            settings.eps_substeps,
            &mut rng,
        );
    let eps1 = robust_margin(l1, lipschitz, delta_prime, wbar, problem.lambda);
    let tau = settings.tau_factor
        * (measurement_lipschitz(problem.observer.settings.min_range) * delta_prime).max(stats.max_residual);
    Ok(Calibration {
        wbar,
        lipschitz,
        l1,
        delta,
        delta_prime,
        eps,
        eps1,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstruction::ObserverSettings;

    fn problem() -> CalibrationProblem {
        CalibrationProblem {
            region: StateBox::operating_region(),
            input_box: InputBox::unicycle(),
            observer: UnicycleObserver::new(0.01, 25, ObserverSettings::default()),
            max_attacked: 2,
            band: Band::default(),
            lambda: 0.1,
        }
    }

    fn small() -> CalibrationSettings {
        CalibrationSettings {
            transition_samples: 2000,
            lipschitz_samples: 2000,
            windows: 20,
            eps_samples: 2000,
            ..CalibrationSettings::default()
        }
    }

    #[test]
    fn calibration_is_deterministic_and_sane() {
        let a = calibrate(&problem(), &small()).unwrap();
        let b = calibrate(&problem(), &small()).unwrap();
        assert_eq!(a, b);
        assert!(a.wbar < 1e-9);
        assert!(a.lipschitz > 1.0 && a.lipschitz < 1.2, "{}", a.lipschitz);
        assert_eq!(a.l1, 24.0);
        assert!(a.delta_prime >= a.delta);
        assert!(a.eps > 0.0 && a.eps < 0.4, "{}", a.eps);
        assert!(a.eps1 >= a.l1 * (a.lipschitz * a.delta_prime + a.wbar));
        assert!(a.tau > 0.0);
    }

    #[test]
    fn rejects_shrinking_factors() {
        let s = CalibrationSettings {
            lipschitz_factor: 0.5,
            ..small()
        };
        assert!(calibrate(&problem(), &s).is_err());
    }

    #[test]
    fn random_windows_are_attack_free_and_in_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = problem();
        for _ in 0..20 {
            let (x0, w) = random_window(&p.region, &p.input_box, 0.01, 25, &mut rng);
            assert_eq!(w.outputs[0], measure(&x0));
            assert!(w.inputs.iter().all(|u| p.input_box.contains(u)));
        }
    }
}
