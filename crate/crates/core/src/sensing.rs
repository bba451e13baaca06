//! Measurement model, sensor subsets, and the spoofing attacker.
//!
//! Sensor indices are 1-based throughout, matching how sensors are named in
//! configuration files and logs: 1 = p1, 2 = p2, 3 = range, 4 = bearing,
//! 5 = heading.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{exact_flow, wrap_angle, InputSample, State};

pub const UNICYCLE_SENSORS: usize = 5;

/// Which unicycle channels are angles and must be compared modulo `2 pi`.
pub const UNICYCLE_ANGULAR: [bool; UNICYCLE_SENSORS] = [false, false, false, true, true];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("sensor subset is empty")]
    EmptySubset,
    #[error("sensor index {index} outside 1..={count}")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("sensor indices must be strictly increasing: {0:?}")]
    NotIncreasing(Vec<usize>),
    #[error("attack plan targets {attacked} sensors but at most {max} may be attacked")]
    TooManyAttacked { attacked: usize, max: usize },
    #[error("fake-trajectory attack requires a fake initial state")]
    MissingFakeInitial,
}

/// One reading of every sensor. `degenerate[i]` marks entries that carry no
/// information at this instant (the bearing at the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            degenerate: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reading of sensor `i` (1-based).
    pub fn get(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    pub fn usable(&self, i: usize) -> bool {
        !self.degenerate[i - 1]
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Index set of sensors, nonempty and strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SensorSubset(Vec<usize>);

impl SensorSubset {
    /// Validates against `1..=sensor_count`.
    pub fn new(indices: Vec<usize>, sensor_count: usize) -> Result<Self, SensingError> {
        let s = Self::try_from(indices)?;
        if let Some(&bad) = s.0.iter().find(|&&i| i > sensor_count) {
            return Err(SensingError::IndexOutOfRange {
                index: bad,
                count: sensor_count,
            });
        }
        Ok(s)
    }

    pub fn all(sensor_count: usize) -> Self {
        Self((1..=sensor_count).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn is_subset_of(&self, other: &SensorSubset) -> bool {
        self.0.iter().all(|&i| other.contains(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl TryFrom<Vec<usize>> for SensorSubset {
    type Error = SensingError;

    fn try_from(indices: Vec<usize>) -> Result<Self, Self::Error> {
        if indices.is_empty() {
            return Err(SensingError::EmptySubset);
        }
        if indices.contains(&0) {
            return Err(SensingError::IndexOutOfRange {
                index: 0,
                count: usize::MAX,
            });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SensingError::NotIncreasing(indices));
        }
        Ok(Self(indices))
    }
}

impl From<SensorSubset> for Vec<usize> {
    fn from(s: SensorSubset) -> Self {
        s.0
    }
}

impl fmt::Display for SensorSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        f.write_str("}")
    }
}

/// Honest unicycle measurement `(p1, p2, |p|, atan2(p2, p1), theta)`.
/// At the origin the bearing is reported as 0 and flagged degenerate.
pub fn measure(x: &State) -> MeasurementVector {
    let range = x.p1.hypot(x.p2);
    let at_origin = x.p1 == 0.0 && x.p2 == 0.0;
    let bearing = if at_origin { 0.0 } else { x.p2.atan2(x.p1) };
    let mut y = MeasurementVector::new(vec![x.p1, x.p2, range, wrap_angle(bearing), x.theta]);
    y.degenerate[3] = at_origin;
    y
}

/// Single honest channel `c_i(x)`, 1-based.
pub fn measure_channel(x: &State, i: usize) -> f64 {
    match i {
        1 => x.p1,
        2 => x.p2,
        3 => x.p1.hypot(x.p2),
        4 => wrap_angle(x.p2.atan2(x.p1)),
        5 => x.theta,
        _ => panic!("unicycle has no sensor {i}"),
    }
}

/// Entries of `values` at the indices of `gamma`, in index order.
pub fn project<T: Clone>(values: &[T], gamma: &SensorSubset) -> Vec<T> {
    gamma.iter().map(|i| values[i - 1].clone()).collect()
}

/// Projects both readings and degeneracy flags.
pub fn project_measurement(y: &MeasurementVector, gamma: &SensorSubset) -> MeasurementVector {
    MeasurementVector {
        values: project(&y.values, gamma),
        degenerate: project(&y.degenerate, gamma),
    }
}

/// `y + e`, with angular entries re-wrapped.
pub fn corrupt(y: &MeasurementVector, e: &[f64], angular: &[bool]) -> MeasurementVector {
    assert_eq!(y.len(), e.len(), "attack signal length mismatch");
    let values = y
        .values
        .iter()
        .zip(e)
        .zip(angular)
        .map(|((&yi, &ei), &ang)| if ang { wrap_angle(yi + ei) } else { yi + ei })
        .collect();
    MeasurementVector {
        values,
        degenerate: y.degenerate.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackMode {
    /// Attacked channels report the readings of a simulated fake trajectory.
    FakeTrajectory,
    /// Attacked channels carry a constant additive offset.
    FixedOffset { offset: f64 },
    None,
}

/// Which sensors are spoofed and how. The attacked set never changes during
/// a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub attacked: Vec<usize>,
    pub fake_initial: Option<State>,
    pub mode: AttackMode,
}

impl AttackPlan {
    pub fn none() -> Self {
        Self {
            attacked: Vec::new(),
            fake_initial: None,
            mode: AttackMode::None,
        }
    }

    pub fn fake_trajectory(attacked: Vec<usize>, fake_initial: State) -> Self {
        Self {
            attacked,
            fake_initial: Some(fake_initial),
            mode: AttackMode::FakeTrajectory,
        }
    }

    pub fn validate(&self, max_attacked: usize) -> Result<(), SensingError> {
        if self.mode == AttackMode::None {
            return Ok(());
        }
        if !self.attacked.is_empty() {
            SensorSubset::new(self.attacked.clone(), UNICYCLE_SENSORS)?;
        }
        if self.attacked.len() > max_attacked {
            return Err(SensingError::TooManyAttacked {
                attacked: self.attacked.len(),
                max: max_attacked,
            });
        }
        if self.mode == AttackMode::FakeTrajectory && self.fake_initial.is_none() {
            return Err(SensingError::MissingFakeInitial);
        }
        Ok(())
    }
}

/// Omniscient attacker. It knows the true state and the input actually
/// applied, and propagates its fake state with the true plant flow.
#[derive(Debug, Clone)]
pub struct Attacker {
    plan: AttackPlan,
    fake: Option<State>,
}

impl Attacker {
    pub fn new(plan: AttackPlan) -> Result<Self, SensingError> {
        plan.validate(UNICYCLE_SENSORS)?;
        let fake = match plan.mode {
            AttackMode::FakeTrajectory => plan.fake_initial,
            _ => None,
        };
        Ok(Self { plan, fake })
    }

    pub fn plan(&self) -> &AttackPlan {
        &self.plan
    }

    pub fn fake_state(&self) -> Option<State> {
        self.fake
    }

    /// Advances the fake state by the input applied over the last period
    /// (if any), then returns the attack signal for the current instant.
    pub fn attacker_step(
        &mut self,
        true_x: &State,
        applied: Option<&InputSample>,
        period: f64,
    ) -> Vec<f64> {
        if let (Some(fake), Some(u)) = (self.fake.as_mut(), applied) {
            *fake = exact_flow(fake, u, period);
        }
        self.signal(true_x)
    }

    /// Attack signal `e` for the current instant without advancing.
    pub fn signal(&self, true_x: &State) -> Vec<f64> {
        let mut e = vec![0.0; UNICYCLE_SENSORS];
        match self.plan.mode {
            AttackMode::None => {}
            AttackMode::FixedOffset { offset } => {
                for &i in &self.plan.attacked {
                    e[i - 1] = offset;
                }
            }
            AttackMode::FakeTrajectory => {
                let fake = self.fake.expect("validated at construction");
                for &i in &self.plan.attacked {
                    let d = measure_channel(&fake, i) - measure_channel(true_x, i);
                    e[i - 1] = if UNICYCLE_ANGULAR[i - 1] { wrap_angle(d) } else { d };
                }
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn subset(v: &[usize]) -> SensorSubset {
        SensorSubset::new(v.to_vec(), 5).unwrap()
    }

    #[test]
    fn measure_examples() {
        assert_eq!(measure(&State::new(1.0, 0.0, 0.0)).values, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        let y = measure(&State::new(3.0, 4.0, PI / 2.0));
        assert_eq!(&y.values[..3], &[3.0, 4.0, 5.0]);
        assert_abs_diff_eq!(y.values[3], 0.927_295_218_001_612_2, epsilon = 1e-15);
        assert_abs_diff_eq!(y.values[4], PI / 2.0);
        assert!(!y.any_degenerate());

        let y = measure(&State::new(0.0, 0.0, 0.2));
        assert_eq!(y.values, vec![0.0, 0.0, 0.0, 0.0, 0.2]);
        assert!(!y.usable(4));
        assert!(y.usable(5));
    }

    #[test]
    fn project_examples() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(project(&y, &subset(&[1, 3, 5])), vec![1.0, 3.0, 5.0]);
        assert_eq!(project(&y, &SensorSubset::all(5)), y.to_vec());
        assert_eq!(project(&y, &subset(&[2])), vec![2.0]);
    }

    #[test]
    fn subset_validation() {
        assert_eq!(SensorSubset::new(vec![], 5), Err(SensingError::EmptySubset));
        assert!(matches!(SensorSubset::new(vec![2, 1], 5), Err(SensingError::NotIncreasing(_))));
        assert!(matches!(SensorSubset::new(vec![1, 1], 5), Err(SensingError::NotIncreasing(_))));
        assert!(matches!(
            SensorSubset::new(vec![1, 6], 5),
            Err(SensingError::IndexOutOfRange { index: 6, .. })
        ));
        assert!(matches!(SensorSubset::new(vec![0, 1], 5), Err(SensingError::IndexOutOfRange { .. })));
        assert_eq!(subset(&[1, 3, 4]).to_string(), "{1,3,4}");
        assert!(subset(&[1, 3]).is_subset_of(&subset(&[1, 2, 3])));
        assert!(!subset(&[1, 4]).is_subset_of(&subset(&[1, 2, 3])));
    }

    #[test]
    fn corrupt_examples() {
        let y = MeasurementVector::new(vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(corrupt(&y, &[0.0; 5], &UNICYCLE_ANGULAR), y);
        assert_eq!(
            corrupt(&y, &[0.5, 0.0, 0.0, 0.0, 0.0], &UNICYCLE_ANGULAR).values,
            vec![1.5, 0.0, 1.0, 0.0, 0.0]
        );
        let y = MeasurementVector::new(vec![0.0, 0.0, 0.0, 0.0, PI - 0.1]);
        let c = corrupt(&y, &[0.0, 0.0, 0.0, 0.0, 0.2], &UNICYCLE_ANGULAR);
        assert_abs_diff_eq!(c.values[4], -PI + 0.1, epsilon = 1e-12);
    }

    #[test]
    fn attacker_examples() {
        let x = State::new(-10.0, 0.0, -0.1);
        let mut none = Attacker::new(AttackPlan::none()).unwrap();
        assert_eq!(none.attacker_step(&x, None, 0.01), vec![0.0; 5]);

        let mut same = Attacker::new(AttackPlan::fake_trajectory(vec![1, 2], x)).unwrap();
        assert_eq!(same.attacker_step(&x, None, 0.01), vec![0.0; 5]);

        let fake0 = State::new(-10.0, 0.0, 0.1);
        let mut atk = Attacker::new(AttackPlan::fake_trajectory(vec![1, 2], fake0)).unwrap();
        assert_eq!(atk.attacker_step(&x, None, 0.01), vec![0.0; 5]);
        let u = InputSample::new(2.0, 0.5);
        let x1 = exact_flow(&x, &u, 0.01);
        let e = atk.attacker_step(&x1, Some(&u), 0.01);
        assert!(e[0].abs() > 0.0 && e[1].abs() > 0.0);
        assert_eq!(&e[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn attack_plan_validation() {
        let fake = State::new(0.0, 0.0, 0.0);
        assert!(AttackPlan::fake_trajectory(vec![1, 2, 3], fake).validate(2).is_err());
        let missing = AttackPlan {
            attacked: vec![1],
            fake_initial: None,
            mode: AttackMode::FakeTrajectory,
        };
        assert_eq!(missing.validate(2), Err(SensingError::MissingFakeInitial));
        let offset = AttackPlan {
            attacked: vec![4],
            fake_initial: None,
            mode: AttackMode::FixedOffset { offset: 0.3 },
        };
        let mut atk = Attacker::new(offset).unwrap();
        assert_eq!(atk.attacker_step(&fake, None, 0.01), vec![0.0, 0.0, 0.0, 0.3, 0.0]);
    }

    #[test]
    fn fake_readings_match_fake_trajectory() {
        let mut x = State::new(-10.0, 0.0, -0.1);
        let fake0 = State::new(-10.0, 0.0, 0.1);
        let mut atk = Attacker::new(AttackPlan::fake_trajectory(vec![1, 2, 4], fake0)).unwrap();
        let mut fake = fake0;
        let mut prev: Option<InputSample> = None;
        for k in 0..500 {
            let e = atk.attacker_step(&x, prev.as_ref(), 0.01);
            let y = corrupt(&measure(&x), &e, &UNICYCLE_ANGULAR);
            for i in [1, 2, 4] {
                let want = measure_channel(&fake, i);
                let diff = if UNICYCLE_ANGULAR[i - 1] { wrap_angle(y.get(i) - want) } else { y.get(i) - want };
                assert!(diff.abs() < 1e-12, "k={k} sensor {i}: {diff}");
            }
            let u = InputSample::new(1.0 + (k as f64 * 0.01).sin(), 0.8 * (k as f64 * 0.03).cos());
            x = exact_flow(&x, &u, 0.01);
            fake = exact_flow(&fake, &u, 0.01);
            prev = Some(u);
        }
    }

    proptest! {
        #[test]
        fn projection_commutes_with_corruption(
            y in proptest::collection::vec(-4.0f64..4.0, 5),
            e in proptest::collection::vec(-4.0f64..4.0, 5),
            mask in 1u8..32,
        ) {
            let gamma = SensorSubset::new((1..=5).filter(|i| mask & (1 << (i - 1)) != 0).collect(), 5).unwrap();
            let y = MeasurementVector::new(y);
            let lhs = project_measurement(&corrupt(&y, &e, &UNICYCLE_ANGULAR), &gamma);
            let rhs = corrupt(
                &project_measurement(&y, &gamma),
                &project(&e, &gamma),
                &project(&UNICYCLE_ANGULAR, &gamma),
            );
            prop_assert_eq!(lhs, rhs);
        }
    }
}
