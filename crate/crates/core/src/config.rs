//! TOML scenario configuration with a frozen `[calibration]` block.
//!
//! Errors carry the 1-based line of the offending key when it can be
//! located in the source text.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, CalibrationProblem, CalibrationSettings};
use crate::dynamics::{InputBox, Interval, State, StateBox};
use crate::reconstruction::{Mode, ObserverSettings, UnicycleObserver};
use crate::safety::{Band, FilterSettings};
use crate::scenario::{PathParams, ScenarioSpec, TrackerGains};
use crate::sensing::{AttackMode, AttackPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub horizon: f64,
    pub seed: u64,
    pub mode: Mode,
    pub filter_enabled: bool,
    pub x0: [f64; 3],
    pub max_attacked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub period: f64,
    pub window_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub attacked: Vec<usize>,
    #[serde(default)]
    pub fake_x0: Option<[f64; 3]>,
    pub kind: AttackKind,
    /// Constant corruption for `kind = "fixed-offset"`.
    #[serde(default)]
    pub offset: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    FakeTrajectory,
    FixedOffset,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfSection {
    pub band_half_width: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub theta: [f64; 2],
}

impl Default for RegionSection {
    fn default() -> Self {
        Self {
            p1: [-12.0, 12.0],
            p2: [-12.0, 12.0],
            theta: [-PI, PI],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub v: [f64; 2],
    pub mu: [f64; 2],
}

impl Default for InputSection {
    fn default() -> Self {
        Self {
            v: [-5.0, 5.0],
            mu: [-2.0, 2.0],
        }
    }
}

/// The on-disk configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: ScenarioSection,
    pub sampling: SamplingSection,
    pub attack: AttackSection,
    pub path: PathParams,
    #[serde(default)]
    pub tracker: TrackerGains,
    pub cbf: CbfSection,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub observer: ObserverSettings,
    #[serde(default)]
    pub region: RegionSection,
    #[serde(default)]
    pub inputs: InputSection,
    #[serde(default)]
    pub calibration_settings: CalibrationSettings,
    #[serde(default)]
    pub calibration: Option<Calibration>,
}

/// Line of `key` inside `[section]`, or of the section header when the key
/// is absent.
pub fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let header = format!("[{section}]");
    let mut in_section = false;
    let mut header_line = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            in_section = line == header;
            if in_section {
                header_line = Some(n + 1);
            }
            continue;
        }
        if let (true, Some(k)) = (in_section, key) {
            let name = line.split('=').next().unwrap_or("").trim();
            if name == k {
                return Some(n + 1);
            }
        }
    }
    header_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn interval(v: [f64; 2]) -> Interval {
    Interval::new(v[0], v[1])
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            ConfigError::at(line, e.message().trim().to_string())
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(None, format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let err = |section: &str, key: &str, msg: String| ConfigError::at(locate(text, section, Some(key)), msg);
        if !(self.cbf.lambda > 0.0 && self.cbf.lambda <= 1.0) {
            return Err(err(
                "cbf",
                "lambda",
                format!("lambda = {} is not in (0, 1]; gamma must be class-K with |gamma(s)| <= |s|", self.cbf.lambda),
            ));
        }
        if !(self.cbf.band_half_width > 0.0) {
            return Err(err("cbf", "band_half_width", "band_half_width must be positive".into()));
        }
        if !(self.sampling.period > 0.0) {
            return Err(err("sampling", "period", "period must be positive".into()));
        }
        if self.sampling.window_order <= self.observer.derivative_degree {
            return Err(err(
                "sampling",
                "window_order",
                format!(
                    "window_order must exceed the derivative degree {}",
                    self.observer.derivative_degree
                ),
            ));
        }
        if self.scenario.max_attacked > 2 {
            return Err(err(
                "scenario",
                "max_attacked",
                format!(
                    "max_attacked = {} exceeds the sensor redundancy (at most 2 of 5)",
                    self.scenario.max_attacked
                ),
            ));
        }
        if self.scenario.horizon <= (self.sampling.window_order + 1) as f64 * self.sampling.period {
            return Err(err("scenario", "horizon", "horizon must exceed the warm-up window".into()));
        }
        if let Err(e) = self.attack_plan().validate(self.scenario.max_attacked) {
            return Err(err("attack", "attacked", e.to_string()));
        }
        for (key, v) in [("v", self.inputs.v), ("mu", self.inputs.mu)] {
            if v[0] > v[1] {
                return Err(err("inputs", key, format!("empty interval [{}, {}]", v[0], v[1])));
            }
        }
        for (key, v) in [("p1", self.region.p1), ("p2", self.region.p2), ("theta", self.region.theta)] {
            if v[0] > v[1] {
                return Err(err("region", key, format!("empty interval [{}, {}]", v[0], v[1])));
            }
        }
        if let Err(e) = self.filter.validate() {
            return Err(ConfigError::at(locate(text, "filter", None), e.to_string()));
        }
        if let Err(e) = self.calibration_settings.validate() {
            return Err(ConfigError::at(locate(text, "calibration_settings", None), e.to_string()));
        }
        if let Some(c) = &self.calibration {
            let fields = [
                ("wbar", c.wbar),
                ("lipschitz", c.lipschitz),
                ("l1", c.l1),
                ("delta", c.delta),
                ("delta_prime", c.delta_prime),
                ("eps", c.eps),
                ("eps1", c.eps1),
                ("tau", c.tau),
            ];
            for (key, v) in fields {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(err("calibration", key, format!("{key} must be finite and non-negative")));
                }
            }
            if !(c.eps > 0.0) {
                return Err(err("calibration", "eps", "eps must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn attack_plan(&self) -> AttackPlan {
        AttackPlan {
            attacked: self.attack.attacked.clone(),
            fake_initial: self.attack.fake_x0.map(State::from_array),
            mode: match self.attack.kind {
                AttackKind::FakeTrajectory => AttackMode::FakeTrajectory,
                AttackKind::FixedOffset => AttackMode::FixedOffset {
                    offset: self.attack.offset.unwrap_or(0.0),
                },
                AttackKind::None => AttackMode::None,
            },
        }
    }

    pub fn region(&self) -> StateBox {
        StateBox {
            p1: interval(self.region.p1),
            p2: interval(self.region.p2),
            theta: interval(self.region.theta),
        }
    }

    pub fn input_box(&self) -> InputBox {
        InputBox {
            v: interval(self.inputs.v),
            mu: interval(self.inputs.mu),
        }
    }

    pub fn band(&self) -> Band {
        Band {
            half_width: self.cbf.band_half_width,
        }
    }

    pub fn calibration_problem(&self) -> CalibrationProblem {
        CalibrationProblem {
            region: self.region(),
            input_box: self.input_box(),
            observer: UnicycleObserver::new(self.sampling.period, self.sampling.window_order, self.observer),
            max_attacked: self.scenario.max_attacked,
            band: self.band(),
            lambda: self.cbf.lambda,
        }
    }

    /// The scenario with the frozen calibration.
    pub fn scenario(&self) -> Result<ScenarioSpec, ConfigError> {
        let calibration = self
            .calibration
            .ok_or_else(|| ConfigError::at(None, "no [calibration] block; run `calibrate` first"))?;
        Ok(ScenarioSpec {
            x0: State::from_array(self.scenario.x0),
            attack: self.attack_plan(),
            path: self.path,
            tracker: self.tracker,
            period: self.sampling.period,
            window_order: self.sampling.window_order,
            horizon: self.scenario.horizon,
            max_attacked: self.scenario.max_attacked,
            input_box: self.input_box(),
            band: self.band(),
            lambda: self.cbf.lambda,
            filter: self.filter,
            observer: self.observer,
            calibration,
            mode: self.scenario.mode,
            filter_enabled: self.scenario.filter_enabled,
            seed: self.scenario.seed,
        })
    }
}

/// Replaces (or appends) the `[calibration]` block of `text`, leaving the
/// rest of the file untouched.
pub fn write_calibration_block(text: &str, calibration: &Calibration) -> String {
    let mut kept: Vec<&str> = Vec::new();
    let mut skipping = false;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') {
            skipping = t == "[calibration]";
        }
        if !skipping {
            kept.push(line);
        }
    }
    while kept.last().is_some_and(|l| l.trim().is_empty()) {
        kept.pop();
    }
    let body = toml::to_string(calibration).expect("calibration serializes");
    let mut out = kept.join("\n");
    out.push_str("\n\n[calibration]\n");
    out.push_str(&body);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"[scenario]
horizon = 22.0
seed = 7
mode = "relaxed"
filter_enabled = true
x0 = [-10.0, 0.0, -0.1]
max_attacked = 2

[sampling]
period = 0.01
window_order = 25

[attack]
attacked = [1, 2]
fake_x0 = [-10.0, 0.0, 0.1]
kind = "fake-trajectory"

[path]
a = [1.0, -10.0, 1.8, 0.6283185307179586, 0.0, 1.0]

[cbf]
band_half_width = 3.0
lambda = 0.1
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ConfigFile::parse(MINIMAL).unwrap();
        assert_eq!(cfg.attack_plan(), AttackPlan::fake_trajectory(vec![1, 2], State::new(-10.0, 0.0, 0.1)));
        assert_eq!(cfg.tracker, TrackerGains::default());
        assert!(cfg.calibration.is_none());
        assert!(cfg.scenario().is_err());
    }

    #[test]
    fn zero_lambda_is_rejected_with_its_line() {
        let text = MINIMAL.replace("lambda = 0.1", "lambda = 0.0");
        let e = ConfigFile::parse(&text).unwrap_err();
        assert_eq!(e.line, Some(23));
        assert!(e.message.contains("class-K"));
    }

    #[test]
    fn syntax_errors_are_anchored() {
        let text = MINIMAL.replace("period = 0.01", "period = = 0.01");
        let e = ConfigFile::parse(&text).unwrap_err();
        assert_eq!(e.line, Some(10), "{e}");
        let text = MINIMAL.replace("seed = 7", "seed = 7\nsede = 3");
        let e = ConfigFile::parse(&text).unwrap_err();
        assert!(e.line.is_some(), "{e}");
    }

    #[test]
    fn too_many_attacked_sensors() {
        let text = MINIMAL.replace("attacked = [1, 2]", "attacked = [1, 2, 3]");
        let e = ConfigFile::parse(&text).unwrap_err();
        assert_eq!(e.line, Some(14));
    }

    #[test]
    fn calibration_block_round_trips() {
        let cal = Calibration {
            wbar: 1e-11,
            lipschitz: 1.04,
            l1: 24.0,
            delta: 3e-10,
            delta_prime: 1e-9,
            eps: 0.31,
            eps1: 6e-8,
            tau: 4e-8,
        };
        let once = write_calibration_block(MINIMAL, &cal);
        let twice = write_calibration_block(&once, &cal);
        assert_eq!(once, twice);
        let cfg = ConfigFile::parse(&once).unwrap();
        assert_eq!(cfg.calibration, Some(cal));
        assert_eq!(cfg.scenario().unwrap().calibration, cal);
    }
}
