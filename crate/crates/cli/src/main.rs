use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ssf_core::calibration::calibrate;
use ssf_core::config::{write_calibration_block, ConfigFile};
use ssf_core::output::write_run;
use ssf_core::reconstruction::Mode;
use ssf_core::scenario::run_closed_loop;
use ssf_core::selftest::{run_selftest, SelftestOptions};
use ssf_core::sensing::AttackPlan;

const EXIT_SAFE: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_VIOLATED: u8 = 2;

#[derive(Parser)]
#[command(name = "ssf", version, about = "Secure safety filter simulator for a spoofed unicycle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackChoice {
    /// The attack configured in the file.
    Paper,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Exact,
    Relaxed,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop and write CSV, summary and figure data.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        filter: Option<Switch>,
        #[arg(long, value_enum)]
        attack: Option<AttackChoice>,
        #[arg(long, value_enum)]
        mode: Option<ModeChoice>,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated time in seconds.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Estimate the frozen constants and write them into the config.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the updated config (defaults to in place).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in property checks.
    Selftest {
        /// Config supplying the calibrated constants; calibrates afresh if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Override the reconstruction radius.
        #[arg(long)]
        delta: Option<f64>,
        /// Override the number of attacked sensors tolerated.
        #[arg(long)]
        max_attacked: Option<usize>,
    },
}

fn load(path: &Path) -> Result<(ConfigFile, String), String> {
    ConfigFile::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: &Path,
    out: &Path,
    filter: Option<Switch>,
    attack: Option<AttackChoice>,
    mode: Option<ModeChoice>,
    seed: Option<u64>,
    horizon: Option<f64>,
) -> Result<u8, String> {
    let (cfg, _) = load(config)?;
    let mut spec = cfg.scenario().map_err(|e| format!("{}: {e}", config.display()))?;
    if let Some(f) = filter {
        spec.filter_enabled = matches!(f, Switch::On);
    }
    if let Some(AttackChoice::None) = attack {
        spec.attack = AttackPlan::none();
    }
    if let Some(m) = mode {
        spec.mode = match m {
            ModeChoice::Exact => Mode::Exact,
            ModeChoice::Relaxed => Mode::Relaxed,
        };
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(h) = horizon {
        spec.horizon = h;
    }
    let run = run_closed_loop(&spec)?;
    for e in run.events.iter().take(5) {
        eprintln!("warning: {e}");
    }
    if run.events.len() > 5 {
        eprintln!("warning: {} more events in events.log", run.events.len() - 5);
    }
    let summary = write_run(&run, out).map_err(|e| format!("writing {}: {e}", out.display()))?;
    println!(
        "h_min = {:.6} at t = {:.2} s, {} non-certified steps, {} infeasible, {} reconstruction failures ({:.2} s)",
        summary.h_min,
        summary.t_h_min,
        summary.n_noncertified_steps,
        summary.n_infeasible_steps,
        summary.n_reconstruction_failures,
        summary.wall_clock_s
    );
    if summary.safety_violated {
        println!("result: safety violated");
        Ok(EXIT_VIOLATED)
    } else {
        println!("result: safe");
        Ok(EXIT_SAFE)
    }
}

fn calibrate_cmd(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<u8, String> {
    let (mut cfg, text) = load(config)?;
    if let Some(s) = seed {
        cfg.calibration_settings.seed = s;
    }
    let cal = calibrate(&cfg.calibration_problem(), &cfg.calibration_settings).map_err(|e| e.to_string())?;
    let updated = write_calibration_block(&text, &cal);
    let target = out.unwrap_or(config);
    std::fs::write(target, updated).map_err(|e| format!("writing {}: {e}", target.display()))?;
    println!(
        "wbar = {:e}, L = {}, L1 = {}, delta = {:e}, delta' = {:e}, eps = {}, eps1 = {:e}, tau = {:e}",
        cal.wbar, cal.lipschitz, cal.l1, cal.delta, cal.delta_prime, cal.eps, cal.eps1, cal.tau
    );
    println!("calibration written to {}", target.display());
    Ok(EXIT_SAFE)
}

fn selftest_cmd(
    config: Option<&Path>,
    seed: u64,
    trials: usize,
    delta: Option<f64>,
    max_attacked: Option<usize>,
) -> Result<u8, String> {
    let cfg = match config {
        Some(p) => load(p)?.0,
        None => ConfigFile::parse(include_str!("../../../configs/sine_path.toml")).map_err(|e| e.to_string())?,
    };
    let mut calibration = match cfg.calibration {
        Some(c) if config.is_some() => c,
        _ => calibrate(&cfg.calibration_problem(), &cfg.calibration_settings).map_err(|e| e.to_string())?,
    };
    if let Some(d) = delta {
        calibration.delta = d;
    }
    let opts = SelftestOptions {
        seed,
        calibration,
        period: cfg.sampling.period,
        window_order: cfg.sampling.window_order,
        observer: cfg.observer,
        max_attacked: max_attacked.unwrap_or(cfg.scenario.max_attacked),
        trials,
    };
    let results = run_selftest(&opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let mark = if r.passed { "pass" } else { "FAIL" };
        println!("{mark}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { EXIT_SAFE } else { EXIT_ERROR })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate {
            config,
            out,
            filter,
            attack,
            mode,
            seed,
            horizon,
        } => simulate(&config, &out, filter, attack, mode, seed, horizon),
        Command::Calibrate { config, out, seed } => calibrate_cmd(&config, out.as_deref(), seed),
        Command::Selftest {
            config,
            seed,
            trials,
            delta,
            max_attacked,
        } => selftest_cmd(config.as_deref(), seed, trials, delta, max_attacked),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
