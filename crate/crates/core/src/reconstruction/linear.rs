//! Linear discrete-time reference systems `x+ = A x + B u`, `y = C x`.
//!
//! The observability map is the least-squares solution of the stacked
//! window equations; a rank-deficient stack makes the subset abstain. These
//! systems exercise the exact-mode reconstruction against closed-form
//! answers.

use nalgebra::{DMatrix, DVector};

use super::{IoWindow, Observation, ObservedSystem, ReconstructionError};
use crate::sensing::{MeasurementVector, SensorSubset};

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub rank_tol: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(b.nrows(), a.nrows());
        assert_eq!(c.ncols(), a.nrows());
        Self {
            a,
            b,
            c,
            rank_tol: 1e-9,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Two decoupled modes, each seen by two sensors. Any three sensors
    /// observe the state; the two sensors of one mode do not.
    pub fn paired_modes() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 1.1]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
        )
    }

    /// A damped rotation seen by four generic sensors; any single sensor
    /// observes the state over a window of length at least two.
    pub fn rotating() -> Self {
        let (s, c) = 0.3f64.sin_cos();
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.98 * c, -0.98 * s, 0.98 * s, 0.98 * c]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -2.0]),
        )
    }

    /// Outputs of the free response `y_j - C sum A^{j-1-m} B u_m` and the
    /// matching stacked observability rows for sensors in `gamma`.
    pub fn stacked_equations(
        &self,
        window: &IoWindow<DVector<f64>>,
        gamma: &SensorSubset,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.state_dim();
        let rows = window.outputs.len() * gamma.len();
        let mut obs = DMatrix::zeros(rows, n);
        let mut rhs = DVector::zeros(rows);
        let mut forced = DVector::zeros(n);
        let mut power = DMatrix::identity(n, n);
        let mut r = 0;
        for (j, y) in window.outputs.iter().enumerate() {
            if j > 0 {
                forced = &self.a * forced + &self.b * &window.inputs[j - 1];
                power = &self.a * power;
            }
            for i in gamma.iter() {
                let ci = self.c.row(i - 1);
                obs.row_mut(r).copy_from(&(ci * &power));
                rhs[r] = y.get(i) - (ci * &forced)[0];
                r += 1;
            }
        }
        (obs, rhs)
    }
}

impl ObservedSystem for LinearSystem {
    type State = DVector<f64>;
    type Input = DVector<f64>;

    fn sensor_count(&self) -> usize {
        self.c.nrows()
    }

    fn is_angular(&self, _i: usize) -> bool {
        false
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn output(&self, x: &DVector<f64>) -> MeasurementVector {
        MeasurementVector::new((&self.c * x).iter().copied().collect())
    }

    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm()
    }

    fn observe(
        &self,
        window: &IoWindow<DVector<f64>>,
        gamma: &SensorSubset,
    ) -> Result<Observation<DVector<f64>>, ReconstructionError> {
        if gamma.iter().any(|i| i > self.sensor_count()) {
            return Err(ReconstructionError::UnsupportedSubset(gamma.clone()));
        }
        let (obs, rhs) = self.stacked_equations(window, gamma);
        let svd = obs.svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > self.rank_tol * smax.max(1.0))
            .count();
        let estimate = svd
            .solve(&rhs, self.rank_tol * smax.max(1.0))
            .unwrap_or_else(|_| DVector::zeros(self.state_dim()));
        Ok(Observation {
            estimate,
            singular: rank < self.state_dim(),
        })
    }
}
