//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use underact::controller::{lqr_design, solve_dare, DareOptions, Mode};
use underact::dynamics::{forward_dynamics, rk4_step, total_energy, RobotParams, State};
use underact::gp::{GpModel, GpStack, Hyperparams, InputScaling};
use underact::learnloop::{Ablation, AccelSource, IterationResult, Report};
use underact::pfl::{pfl_torque, residual_active, residual_passive};
use underact::planner::{rollout, solve_ocp, PredictionModel};
use underact_cli::commands::{execute, write_outcome, RunOutcome};
use underact_cli::config::{parse_config, ScenarioConfig};

type Check = Result<String, String>;

fn shipped(name: &str) -> ScenarioConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    parse_config(&p).expect("shipped config parses")
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runs {
    s1: RunOutcome,
    s1_secs: f64,
    s2: RunOutcome,
}

fn first_converged(r: &Report) -> Option<usize> {
    r.iterations.iter().position(|s| s.converged)
}

fn balanced_and_held(res: &IterationResult) -> bool {
    res.summary.converged && res.log.iter().any(|rec| rec.mode == Mode::Balancing)
}

fn scenario_one(runs: &Runs) -> Check {
    let r = &runs.s1.report;
    let last = runs.s1.results.last().ok_or("no iterations")?;
    ensure(
        r.converged && r.iterations_used <= 5 && balanced_and_held(last) && runs.s1_secs <= 600.0,
        format!(
            "converged={} after {} iterations (limit 5), switch at {:?} s, {:.1} s wall clock",
            r.converged, r.iterations_used, last.summary.switch_time, runs.s1_secs
        ),
    )
}

fn scenario_two(runs: &Runs) -> Check {
    let r = &runs.s2.report;
    let last = runs.s2.results.last().ok_or("no iterations")?;
    ensure(
        r.converged && r.iterations_used <= 4 && balanced_and_held(last),
        format!("converged={} after {} iterations (limit 4)", r.converged, r.iterations_used),
    )
}

fn ablations() -> Check {
    let mut details = Vec::new();
    let mut ok = true;
    for mode in [Ablation::NominalPlanTrueControl, Ablation::TruePlanNominalControl] {
        let mut cfg = shipped("scenario1_swingup.cfg");
        cfg.run.ablation = mode;
        let out = execute(&cfg).map_err(|e| e.to_string())?;
        let worst_inside = out
            .report
            .iterations
            .iter()
            .map(|s| s.terminal_box_ratio)
            .fold(f64::INFINITY, f64::min);
        ok &= !out.report.converged && worst_inside >= 2.0;
        details.push(format!("{mode:?}: converged={}, closest box ratio {worst_inside:.2}", out.report.converged));
    }
    ensure(ok, details.join("; "))
}

fn rmse_signature(runs: &Runs) -> Check {
    let its = &runs.s1.report.iterations;
    let k = first_converged(&runs.s1.report).ok_or("scenario 1 never converged")?;
    if k == 0 {
        return Err("converged on the first iteration; no unconverged iteration to compare".into());
    }
    let q1: Vec<f64> = its[..=k].iter().map(|s| s.rmse[0]).collect();
    let spread = q1.iter().cloned().fold(0.0, f64::max) / q1.iter().cloned().fold(f64::INFINITY, f64::min);
    let drop = its[k - 1].rmse[1] / its[k].rmse[1];
    ensure(
        spread < 2.0 && drop >= 5.0,
        format!("q1 RMSE spread {spread:.2}x (< 2), q2 RMSE drop {drop:.1}x (>= 5) at iteration {}", k + 1),
    )
}

/// Posterior mean from an explicitly inverted Gram matrix.
fn dense_mean(x: &[DVector<f64>], y: &[f64], h: &Hyperparams, q: &DVector<f64>) -> f64 {
    let k = |a: &DVector<f64>, b: &DVector<f64>| {
        h.amplitude.powi(2) * (-(a - b).norm_squared() / (2.0 * h.length_scale.powi(2))).exp()
    };
    let n = x.len();
    let gram = DMatrix::from_fn(n, n, |i, j| k(&x[i], &x[j]) + if i == j { h.noise_var } else { 0.0 });
    let inv = gram.try_inverse().expect("invertible Gram matrix");
    let kv = DVector::from_fn(n, |i, _| k(&x[i], q));
    (kv.transpose() * inv * DVector::from_column_slice(y))[0]
}

fn gp_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=5);
        let h = Hyperparams::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(1e-2..1e-1));
        let x: Vec<DVector<f64>> = (0..30).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0))).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = GpModel::fit_with_scaling(dim, &x, &y, h, InputScaling::identity(dim)).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let q = DVector::from_fn(dim, |_, _| rng.random_range(-2.5..2.5));
            worst = worst.max((m.predict(&q).0 - dense_mean(&x, &y, &h, &q)).abs());
        }
    }
    let (a, s2, y) = (1.7, 0.05, 0.8);
    let x = vec![DVector::from_vec(vec![0.3, -0.4])];
    let one = GpModel::fit(&x, &[y], Hyperparams::new(a, 1.0, s2)).map_err(|e| e.to_string())?;
    let closed = a * a * y / (a * a + s2);
    let err1 = (one.predict(&x[0]).0 - closed).abs();
    ensure(
        worst <= 1e-8 && err1 <= 1e-12,
        format!("max deviation from dense oracle {worst:.1e} (<= 1e-8), single point {err1:.1e} (<= 1e-12)"),
    )
}

fn riccati() -> Check {
    let one = DMatrix::from_element(1, 1, 1.0);
    let sol = solve_dare(&one, &one, &one, &one, &DareOptions::default()).map_err(|e| e.to_string())?;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let err = (sol.p[(0, 0)] - golden).abs();
    let cfg = shipped("scenario1_swingup.cfg").session_config().map_err(|e| e.to_string())?;
    let mut radius: f64 = 0.0;
    for params in [&cfg.truth, &cfg.nominal] {
        let ctl = lqr_design(params, &cfg.spec.goal, &cfg.lqr_q, &cfg.lqr_r, cfg.spec.ts, cfg.spec.terminal_box)
            .map_err(|e| e.to_string())?;
        radius = radius.max(ctl.closed_loop_spectral_radius());
    }
    ensure(
        err <= 1e-10 && radius < 1.0,
        format!("golden ratio error {err:.1e} (<= 1e-10), up-up spectral radius {radius:.4} (< 1)"),
    )
}

fn random_state(rng: &mut ChaCha8Rng, speed: f64) -> State {
    State::new(
        &[rng.random_range(-PI..PI), rng.random_range(-PI..PI)],
        &[rng.random_range(-speed..speed), rng.random_range(-speed..speed)],
    )
}

fn dynamics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let free = RobotParams::pendubot_default().without_friction();
    let zero = DVector::zeros(1);
    let mut drift: f64 = 0.0;
    for _ in 0..20 {
        let mut x = random_state(&mut rng, 3.0);
        let e0 = total_energy(&free, &x);
        for _ in 0..1000 {
            x = rk4_step(&free, &x, &zero, 1e-3).map_err(|e| e.to_string())?;
            drift = drift.max((total_energy(&free, &x) - e0).abs());
        }
    }
    let mut pfl_err: f64 = 0.0;
    for _ in 0..200 {
        let x = random_state(&mut rng, 10.0);
        let u = DVector::from_element(1, rng.random_range(-40.0..40.0));
        let tau = pfl_torque(&free, &x, &u).map_err(|e| e.to_string())?;
        let acc = forward_dynamics(&free, &x, &tau).map_err(|e| e.to_string())?;
        pfl_err = pfl_err.max((acc[0] - u[0]).abs());
    }
    ensure(
        drift <= 1e-6 && pfl_err <= 1e-6,
        format!("energy drift {drift:.1e} over 1 s (<= 1e-6), PFL error {pfl_err:.1e} (<= 1e-6)"),
    )
}

fn planner(runs: &Runs) -> Check {
    let mut reroll: f64 = 0.0;
    let mut speed_excess: f64 = 0.0;
    let mut solved = 0;
    for name in ["scenario1_swingup.cfg", "scenario2.cfg"] {
        let cfg = shipped(name).session_config().map_err(|e| e.to_string())?;
        let eps_p = GpStack::empty(5, &[cfg.learning.passive_hyper]);
        let model = PredictionModel::new(&cfg.nominal, &eps_p).with_integrator(cfg.integrator);
        let mut spec = cfg.spec.clone();
        spec.terminal_box = spec.terminal_box.scaled(cfg.planning_margin);
        let sol = solve_ocp(&spec, &model, None, &cfg.solver).map_err(|e| e.to_string())?;
        let again = rollout(&spec, &model, &sol.u).map_err(|e| e.to_string())?;
        if again.states.len() != sol.q.len() {
            return Err(format!("{name}: re-rollout diverged"));
        }
        for (k, x) in again.states.iter().enumerate() {
            reroll = reroll.max((&x.q - &sol.q[k]).amax()).max((&x.qdot - &sol.qdot[k]).amax());
        }
        solved += usize::from(sol.converged);
    }
    let mut refs = 0;
    for res in runs.s1.results.iter().chain(&runs.s2.results) {
        if !res.reference.converged {
            continue;
        }
        refs += 1;
        for qd in &res.reference.qdot {
            speed_excess = speed_excess.max(qd[0].abs() - 8.0).max(qd[1].abs() - 15.0);
        }
    }
    ensure(
        reroll <= 1e-10 && speed_excess <= 1e-3 && refs > 0,
        format!(
            "re-rollout deviation {reroll:.1e} (<= 1e-10), speed limit excess {:.1e} over {refs} converged plans ({solved} of 2 nominal solves converged)",
            speed_excess.max(0.0)
        ),
    )
}

fn residuals() -> Check {
    let cfg = shipped("scenario1_swingup.cfg").session_config().map_err(|e| e.to_string())?;
    let (truth, nominal) = (&cfg.truth, &cfg.nominal);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let x = random_state(&mut rng, 10.0);
        let u = rng.random_range(-40.0..40.0);
        let uv = DVector::from_element(1, u);
        let tau = pfl_torque(nominal, &x, &uv).map_err(|e| e.to_string())?;
        let acc = forward_dynamics(truth, &x, &tau).map_err(|e| e.to_string())?;
        let qa = DVector::from_element(1, acc[0]);
        let ya = residual_active(&uv, &qa).map_err(|e| e.to_string())?[0];
        let yp = residual_passive(nominal, &x, &qa, &DVector::from_element(1, acc[1])).map_err(|e| e.to_string())?[0];

        let (m, n) = (truth.mass_matrix(&x.q), truth.bias(&x.q, &x.qdot));
        let (mh, nh) = (nominal.mass_matrix(&x.q), nominal.bias(&x.q, &x.qdot));
        let schur = |m: &DMatrix<f64>| m[(0, 0)] - m[(0, 1)] * m[(1, 0)] / m[(1, 1)];
        let eta = |m: &DMatrix<f64>, n: &DVector<f64>| n[0] - m[(0, 1)] * n[1] / m[(1, 1)];
        let delta_a = ((schur(&mh) - schur(&m)) * u + eta(&mh, &nh) - eta(&m, &n)) / schur(&m);
        let qdd_a = u + delta_a;
        let delta_p = (nh[1] + mh[(1, 0)] * qdd_a) / mh[(1, 1)] - (n[1] + m[(1, 0)] * qdd_a) / m[(1, 1)];
        worst = worst
            .max((ya - delta_a).abs() / delta_a.abs().max(1.0))
            .max((yp - delta_p).abs() / delta_p.abs().max(1.0));
    }
    ensure(worst <= 1e-9, format!("max deviation from the two-model oracle {worst:.1e} (<= 1e-9)"))
}

fn budget_and_determinism(runs: &Runs) -> Check {
    let budget = 180;
    let largest = runs
        .s1
        .report
        .iterations
        .iter()
        .chain(&runs.s2.report.iterations)
        .map(|s| s.eps_a_size)
        .max()
        .unwrap_or(0);
    let offered: usize = runs.s1.report.iterations.iter().map(|s| s.datasets.active_offered).sum();

    let once = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut cfg = shipped("scenario1_swingup.cfg");
        cfg.run.max_iters = 2;
        cfg.run.sensor_noise = 5e-4;
        cfg.run.seed = 42;
        cfg.learning.accel_source = AccelSource::Filtered;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = execute(&cfg).map_err(|e| e.to_string())?;
        write_outcome(dir.path(), &cfg, &out).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .map_err(|e| e.to_string())?
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        Ok(files)
    };
    let (a, b) = (once()?, once()?);
    let identical = a == b;
    ensure(
        largest <= budget && offered > budget && identical,
        format!(
            "largest active dataset {largest} (<= {budget}) after {offered} offered points; repeated noisy run identical across {} files: {identical}",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let s1 = execute(&shipped("scenario1_swingup.cfg")).expect("scenario 1 runs");
    let s1_secs = t0.elapsed().as_secs_f64();
    let s2 = execute(&shipped("scenario2.cfg")).expect("scenario 2 runs");
    let runs = Runs { s1, s1_secs, s2 };

    let criteria: Vec<(&str, Check)> = vec![
        ("scenario-1 convergence", scenario_one(&runs)),
        ("scenario-2 convergence", scenario_two(&runs)),
        ("ablations fail without learning", ablations()),
        ("RMSE signature", rmse_signature(&runs)),
        ("GP oracle equivalence", gp_oracle()),
        ("Riccati correctness", riccati()),
        ("dynamics correctness", dynamics()),
        ("planner consistency", planner(&runs)),
        ("residual identities", residuals()),
        ("budget and determinism", budget_and_determinism(&runs)),
    ];
    let mut failed = 0;
    for (i, (name, res)) in criteria.iter().enumerate() {
        match res {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
