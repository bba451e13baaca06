//! Built-in property suite: exact-mode reconstruction against brute force
//! on linear systems, nested-subset consistency on the unicycle, RK4 order
//! and reconstruction containment.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::{random_window, Calibration};
use crate::dynamics::{exact_flow, rk4_step, InputBox, InputSample, State, StateBox};
use crate::reconstruction::linear::LinearSystem;
use crate::reconstruction::{
    consistency_check, enumerate_subsets, evaluate_subsets, grow_radius, plausible_initial_set,
    propagate_plausible_set, IoWindow, Mode, ObservedSystem, ObserverSettings, PlausibleSet, UnicycleObserver,
};
use crate::sensing::SensorSubset;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    pub calibration: Calibration,
    pub period: f64,
    pub window_order: usize,
    pub observer: ObserverSettings,
    pub max_attacked: usize,
    pub trials: usize,
}

fn check(name: &'static str, outcome: Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

/// Attack realization for a linear system: either random garbage or a
/// replay of a fake initial state on the attacked sensors.
pub fn linear_attacked_window<R: Rng + ?Sized>(
    sys: &LinearSystem,
    order: usize,
    max_attacked: usize,
    rng: &mut R,
) -> (DVector<f64>, IoWindow<DVector<f64>>) {
    let n = sys.state_dim();
    let p = sys.sensor_count();
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let fake0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let inputs: Vec<DVector<f64>> = (0..order)
        .map(|_| DVector::from_fn(sys.input_dim(), |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let n_attacked = rng.random_range(0..=max_attacked);
    let mut attacked: Vec<usize> = Vec::new();
    while attacked.len() < n_attacked {
        let i = rng.random_range(1..=p);
        if !attacked.contains(&i) {
            attacked.push(i);
        }
    }
    let replay = rng.random_bool(0.5);
    let (mut x, mut f) = (x0.clone(), fake0);
    let mut outputs = Vec::with_capacity(order + 1);
    for j in 0..=order {
        let mut y = sys.output(&x);
        let fy = sys.output(&f);
        for &i in &attacked {
            y.values[i - 1] = if replay { fy.values[i - 1] } else { rng.random_range(-5.0..5.0) };
        }
        outputs.push(y);
        if j < order {
            x = sys.transition(&x, &inputs[j]);
            f = sys.transition(&f, &inputs[j]);
        }
    }
    (x0, IoWindow::new(inputs, outputs, 0).expect("consistent shape"))
}

/// Plausible initial states by enumerating attack supports and solving the
/// remaining equations exactly (normal equations, explicit inverse).
pub fn brute_force_plausible(
    sys: &LinearSystem,
    window: &IoWindow<DVector<f64>>,
    max_attacked: usize,
    tol: f64,
) -> Vec<DVector<f64>> {
    let p = sys.sensor_count();
    let n = sys.state_dim();
    let mut found: Vec<DVector<f64>> = Vec::new();
    for mask in 0u32..(1 << p) {
        if mask.count_ones() as usize != max_attacked {
            continue;
        }
        let honest: Vec<usize> = (1..=p).filter(|i| mask & (1 << (i - 1)) == 0).collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut forced = DVector::<f64>::zeros(n);
        for (j, y) in window.outputs.iter().enumerate() {
            if j > 0 {
                power = &sys.a * &power;
                forced = &sys.a * &forced + &sys.b * &window.inputs[j - 1];
            }
            for &i in &honest {
                let ci = sys.c.row(i - 1).clone_owned();
                rows.push((ci.clone() * &power).iter().copied().collect());
                rhs.push(y.values[i - 1] - (ci * &forced)[0]);
            }
        }
        let o = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        let b = DVector::from_vec(rhs);
        let Some(inv) = (o.transpose() * &o).try_inverse() else {
            continue;
        };
        let z = inv * o.transpose() * &b;
        let res = (&o * &z - &b).amax();
        if res <= tol && !found.iter().any(|f| (f - &z).amax() <= tol) {
            found.push(z);
        }
    }
    found
}

/// Two point sets agree up to `tol` in both directions.
pub fn same_point_set(a: &[DVector<f64>], b: &[DVector<f64>], tol: f64) -> bool {
    let covered = |x: &[DVector<f64>], y: &[DVector<f64>]| x.iter().all(|p| y.iter().any(|q| (p - q).amax() <= tol));
    covered(a, b) && covered(b, a)
}

pub fn check_exact_mode_oracle(trials: usize, seed: u64) -> Result<String, String> {
    let sys = LinearSystem::paired_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut multi = 0;
    for trial in 0..trials {
        let (_, w) = linear_attacked_window(&sys, 3, 1, &mut rng);
        let ours: Vec<DVector<f64>> = match plausible_initial_set(&sys, &w, 1, Mode::Exact, 1e-9, 0.0) {
            Ok(set) => set.centers().cloned().collect(),
            Err(e) => return Err(format!("trial {trial}: {e}")),
        };
        let oracle = brute_force_plausible(&sys, &w, 1, 1e-9);
        if !same_point_set(&ours, &oracle, 1e-9) {
            return Err(format!("trial {trial}: {} vs {} plausible states", ours.len(), oracle.len()));
        }
        let mut distinct: Vec<DVector<f64>> = Vec::new();
        for p in ours {
            if !distinct.iter().any(|q| (q - &p).amax() <= 1e-9) {
                distinct.push(p);
            }
        }
        if distinct.len() > 1 {
            multi += 1;
        }
    }
    Ok(format!("{trials} windows, {multi} with an ambiguous plausible set"))
}

pub fn check_2s_sparse(trials: usize, seed: u64) -> Result<String, String> {
    let sys = LinearSystem::rotating();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let (x0, w) = linear_attacked_window(&sys, 3, 1, &mut rng);
        let est = evaluate_subsets(&sys, &w, 1, 1e-9, 0.0).map_err(|e| e.to_string())?;
        for e in est.iter().filter(|e| e.consistent) {
            let err = (&e.xhat_initial - &x0).amax();
            if err > 1e-9 {
                return Err(format!("trial {trial}: {} off by {err:.3e}", e.gamma));
            }
        }
    }
    Ok(format!("{trials} windows"))
}

/// Nested-subset property on attack-free windows: if the larger subset is
/// consistent, the smaller one is too and their estimates lie within
/// `2 delta`.
pub fn check_nested_subsets(opts: &SelftestOptions, trials: usize) -> Result<String, String> {
    let obs = UnicycleObserver::new(opts.period, opts.window_order, opts.observer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (tau, delta) = (opts.calibration.tau, opts.calibration.delta);
    let mut checked = 0;
    for trial in 0..trials {
        let (_, w) = random_window(&StateBox::operating_region(), &InputBox::unicycle(), opts.period, opts.window_order, &mut rng);
        let size2 = rng.random_range(4..=5);
        let mut big: Vec<usize> = (1..=5).collect();
        while big.len() > size2 {
            big.remove(rng.random_range(0..big.len()));
        }
        let mut small = big.clone();
        while small.len() > 3 {
            small.remove(rng.random_range(0..small.len()));
        }
        let g2 = SensorSubset::new(big, 5).map_err(|e| e.to_string())?;
        let g1 = SensorSubset::new(small, 5).map_err(|e| e.to_string())?;
        let o2 = obs.observe(&w, &g2).map_err(|e| e.to_string())?;
        let o1 = obs.observe(&w, &g1).map_err(|e| e.to_string())?;
        if o1.singular || o2.singular {
            continue;
        }
        let (c2, _) = consistency_check(&obs, &w, &g2, &o2.estimate, tau);
        if !c2 {
            continue;
        }
        checked += 1;
        let (c1, r1) = consistency_check(&obs, &w, &g1, &o1.estimate, tau);
        if !c1 {
            return Err(format!("trial {trial}: {g2} consistent but {g1} residual {r1:.3e}"));
        }
        let d = o1.estimate.distance(&o2.estimate);
        if d > 2.0 * delta {
            return Err(format!("trial {trial}: {g1} and {g2} estimates {d:.3e} apart"));
        }
    }
    Ok(format!("{checked} consistent nested pairs out of {trials} windows"))
}

/// One-step error ratio under halving of T, for a random smooth sample.
pub fn rk4_halving_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let x = StateBox::operating_region().sample(rng);
    let u = InputSample::new(rng.random_range(1.0..5.0), rng.random_range(1.0..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let err = |t: f64| rk4_step(&x, &u, t).distance(&exact_flow(&x, &u, t));
    err(0.2) / err(0.1)
}

pub fn check_integrator_order(trials: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for _ in 0..trials {
        let r = rk4_halving_ratio(&mut rng);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if lo >= 16.0 && hi <= 64.0 {
        Ok(format!("ratios in [{lo:.2}, {hi:.2}]"))
    } else {
        Err(format!("ratios in [{lo:.2}, {hi:.2}], expected within [16, 64]"))
    }
}

/// On attack-free windows every consistent estimate is within `delta` of
/// the window-start state and, propagated, within `delta'` of the current
/// state.
pub fn check_containment(opts: &SelftestOptions, trials: usize) -> Result<String, String> {
    let obs = UnicycleObserver::new(opts.period, opts.window_order, opts.observer);
    let cal = &opts.calibration;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0de);
    let mut worst = 0.0_f64;
    for trial in 0..trials {
        let (x0, w) = random_window(&StateBox::operating_region(), &InputBox::unicycle(), opts.period, opts.window_order, &mut rng);
        let est = evaluate_subsets(&obs, &w, opts.max_attacked, cal.tau, cal.delta).map_err(|e| e.to_string())?;
        let xk = w.inputs.iter().fold(x0, |x, u| exact_flow(&x, u, opts.period));
        let Ok(set) = PlausibleSet::<State>::from_estimates(Mode::Relaxed, &est, cal.delta) else {
            continue;
        };
        for m in &set.members {
            let d = m.center.distance(&x0);
            worst = worst.max(d / cal.delta.max(f64::MIN_POSITIVE));
            if d > cal.delta {
                return Err(format!("trial {trial}: {} start error {d:.3e} > delta {:.3e}", m.gamma, cal.delta));
            }
        }
        let now = propagate_plausible_set(&obs, &set, &w.inputs, cal.lipschitz, cal.wbar);
        let radius = grow_radius(cal.delta, cal.lipschitz, cal.wbar, opts.window_order);
        for m in &now.members {
            let d = m.center.distance(&xk);
            if d > radius {
                return Err(format!("trial {trial}: {} current error {d:.3e} > delta' {radius:.3e}", m.gamma));
            }
        }
    }
    Ok(format!("{trials} windows, worst start error {worst:.2} delta"))
}

/// Enumerates and reconstructs once at the configured attack budget, so an
/// unsupported budget surfaces as an error instead of a panic.
pub fn check_budget(opts: &SelftestOptions) -> Result<String, String> {
    let subsets = enumerate_subsets(5, opts.max_attacked).map_err(|e| format!("enumeration: {e}"))?;
    let obs = UnicycleObserver::new(opts.period, opts.window_order, opts.observer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (_, w) = random_window(&StateBox::operating_region(), &InputBox::unicycle(), opts.period, opts.window_order, &mut rng);
    for g in &subsets {
        obs.observe(&w, g).map_err(|e| format!("observability map: {e}"))?;
    }
    Ok(format!("{} subsets of size {}", subsets.len(), 5 - opts.max_attacked))
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    let n = opts.trials;
    vec![
        check("attack budget", check_budget(opts)),
        check("exact-mode plausible set vs brute force", check_exact_mode_oracle(n, opts.seed)),
        check("2s-sparse consistent subsets recover the state", check_2s_sparse(n, opts.seed + 1)),
        check("nested subsets stay consistent and close", check_nested_subsets(opts, n)),
        check("rk4 error ratio under halving", check_integrator_order(n, opts.seed + 2)),
        check("reconstruction containment", check_containment(opts, n)),
    ]
}
