//! Per-step CSV, run summary and figure data.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::reconstruction::Mode;
use crate::scenario::{ClosedLoopRun, StepRecord};

/// Version tag of the per-step CSV layout.
pub const STEP_SCHEMA: &str = "ssf-steps/1";

pub const STEP_COLUMNS: [&str; 22] = [
    "k",
    "t",
    "p1",
    "p2",
    "theta",
    "fake_p1",
    "fake_p2",
    "fake_theta",
    "y1",
    "y2",
    "y3",
    "y4",
    "y5",
    "v_nom",
    "mu_nom",
    "v_safe",
    "mu_safe",
    "h",
    "n_consistent",
    "feasible",
    "delta_prime",
    "certified",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub steps: usize,
    pub mode: Mode,
    pub filter_enabled: bool,
    pub h_min: f64,
    pub t_h_min: f64,
    pub safety_violated: bool,
    pub n_infeasible_steps: usize,
    pub n_reconstruction_failures: usize,
    pub n_noncertified_steps: usize,
    /// Largest `distance(x, nearest center) - delta'` after warm-up; at most
    /// zero when the true state is always contained.
    pub max_containment_error: f64,
    pub max_correction_norm: f64,
    pub wall_clock_s: f64,
}

pub fn summarize(run: &ClosedLoopRun) -> RunSummary {
    let (h_min, t_h_min) = run
        .records
        .iter()
        .fold((f64::INFINITY, 0.0), |(h, t), r| if r.h < h { (r.h, r.t) } else { (h, t) });
    let engaged = || run.records.iter().filter(|r| r.engaged);
    RunSummary {
        schema: STEP_SCHEMA.to_string(),
        steps: run.records.len(),
        mode: run.spec.mode,
        filter_enabled: run.spec.filter_enabled,
        h_min,
        t_h_min,
        safety_violated: h_min < 0.0,
        n_infeasible_steps: engaged().filter(|r| !r.feasible).count(),
        n_reconstruction_failures: engaged().filter(|r| !r.reconstruction_ok).count(),
        n_noncertified_steps: engaged().filter(|r| !r.certified).count(),
        max_containment_error: engaged()
            .filter_map(|r| r.containment_slack.map(|s| -s))
            .fold(f64::NEG_INFINITY, f64::max),
        max_correction_norm: engaged().map(|r| r.correction_norm).fold(0.0, f64::max),
        wall_clock_s: run.elapsed.as_secs_f64(),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn step_row(out: &mut String, r: &StepRecord) {
    let (f1, f2, f3) = match r.fake {
        Some(f) => (f.p1.to_string(), f.p2.to_string(), f.theta.to_string()),
        None => (String::new(), String::new(), String::new()),
    };
    let _ = write!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.k, r.t, r.x.p1, r.x.p2, r.x.theta, f1, f2, f3
    );
    for y in &r.y {
        let _ = write!(out, ",{y}");
    }
    let _ = writeln!(
        out,
        ",{},{},{},{},{},{},{},{},{}",
        r.u_nom.v,
        r.u_nom.mu,
        r.u_safe.v,
        r.u_safe.mu,
        r.h,
        r.consistent.len(),
        flag(r.feasible),
        r.delta_prime,
        flag(r.certified)
    );
}

/// Per-step CSV: a `# schema:` line, the header row, one row per instant.
pub fn steps_csv(run: &ClosedLoopRun) -> String {
    let mut out = String::with_capacity(run.records.len() * 256);
    let _ = writeln!(out, "# schema: {STEP_SCHEMA}");
    out.push_str(&STEP_COLUMNS.join(","));
    out.push('\n');
    for r in &run.records {
        step_row(&mut out, r);
    }
    out
}

/// True, fake and reference positions over time.
pub fn trajectory_csv(run: &ClosedLoopRun) -> String {
    let mut out = String::from("t,p1,p2,fake_p1,fake_p2,ref_p1,ref_p2\n");
    for r in &run.records {
        let (ref1, ref2) = run.spec.path.reference(r.t);
        let (f1, f2) = r.fake.map_or((String::new(), String::new()), |f| (f.p1.to_string(), f.p2.to_string()));
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.t, r.x.p1, r.x.p2, f1, f2, ref1, ref2);
    }
    out
}

pub fn cbf_csv(run: &ClosedLoopRun) -> String {
    let mut out = String::from("t,h\n");
    for r in &run.records {
        let _ = writeln!(out, "{},{}", r.t, r.h);
    }
    out
}

pub fn inputs_csv(run: &ClosedLoopRun) -> String {
    let mut out = String::from("t,v_nom,mu_nom,v_safe,mu_safe\n");
    for r in &run.records {
        let _ = writeln!(out, "{},{},{},{},{}", r.t, r.u_nom.v, r.u_nom.mu, r.u_safe.v, r.u_safe.mu);
    }
    out
}

/// Writes `steps.csv`, `summary.json`, the three figure files and
/// `events.log` into `dir`.
pub fn write_run(run: &ClosedLoopRun, dir: &Path) -> io::Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("steps.csv"), steps_csv(run))?;
    fs::write(dir.join("fig_trajectory.csv"), trajectory_csv(run))?;
    fs::write(dir.join("fig_cbf.csv"), cbf_csv(run))?;
    fs::write(dir.join("fig_inputs.csv"), inputs_csv(run))?;
    let mut events = run.events.join("\n");
    if !events.is_empty() {
        events.push('\n');
    }
    fs::write(dir.join("events.log"), events)?;
    let summary = summarize(run);
    let json = serde_json::to_string_pretty(&summary).map_err(io::Error::other)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}
