//! Plan → execute → learn iterations on a simulated plant.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::{active_regressor_input, lqr_design, BalanceController, Mode, Supervisor, TrackingGains};
use crate::dynamics::{forward_dynamics, rk4_step, select_rows, RobotParams, State};
use crate::error::{Error, Result};
use crate::estimation::{smooth_offline, SignalWindow};
use crate::gp::{GpStack, HyperOptOptions, Hyperparams, InputScaling, InsertOutcome};
use crate::pfl::{nominal_passive_acceleration, residual_active, residual_passive};
use crate::planner::{
    passive_regressor_input, solve_ocp, Integrator, OcpSpec, PredictionModel, ReferenceTrajectory, SolverOptions, WarmStart,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// The full scheme.
    #[default]
    Learning,
    /// Plan on the nominal model, control with exact PFL of the true plant.
    NominalPlanTrueControl,
    /// Plan on the true model, control with nominal PFL.
    TruePlanNominalControl,
    /// Both regressors stay empty.
    FrozenRegressors,
}

impl Ablation {
    pub fn learns(&self) -> bool {
        matches!(self, Ablation::Learning)
    }
}

/// Where the learner's acceleration samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccelSource {
    /// Plant acceleration at the sampling instant (simulation only).
    #[default]
    Exact,
    /// Mean acceleration over the control period that starts at the
    /// sample, `(q̇_{k+1} − q̇_k)/T` (simulation only).
    Interval,
    /// Savitzky-Golay differentiation of the sampled positions.
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningOptions {
    /// Reduced-set budget of the active regressor.
    pub budget: usize,
    pub active_hyper: Hyperparams,
    pub passive_hyper: Hyperparams,
    pub hyperopt: HyperOptOptions,
    /// Samples with a larger reconstructed acceleration are discarded.
    pub accel_limit: f64,
    pub accel_source: AccelSource,
    pub causal_window: usize,
    pub offline_window: usize,
    pub offline_order: usize,
}

impl Default for LearningOptions {
    fn default() -> Self {
        LearningOptions {
            budget: 180,
            active_hyper: Hyperparams::new(5.0, 1.0, 1e-3),
            passive_hyper: Hyperparams::new(5.0, 1.0, 1e-3),
            hyperopt: HyperOptOptions::default(),
            accel_limit: 500.0,
            accel_source: AccelSource::Exact,
            causal_window: 9,
            offline_window: 21,
            offline_order: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    /// Plant integration steps per control period.
    pub substeps: usize,
    /// Standard deviation of additive position noise (rad).
    pub sensor_noise: f64,
    /// Runs are truncated once any joint speed exceeds this (rad/s).
    pub divergence_speed: f64,
    /// Time the state must stay near the goal after switching (s).
    pub hold_time: f64,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            substeps: 10,
            sensor_noise: 0.0,
            divergence_speed: 100.0,
            hold_time: 1.0,
            seed: 0,
        }
    }
}

/// Everything needed to start a session.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub truth: RobotParams,
    pub nominal: RobotParams,
    pub spec: OcpSpec,
    pub solver: SolverOptions,
    pub gains: TrackingGains,
    pub lqr_q: DMatrix<f64>,
    pub lqr_r: DMatrix<f64>,
    pub learning: LearningOptions,
    pub sim: SimOptions,
    pub ablation: Ablation,
    pub integrator: Integrator,
    /// The planner's terminal constraint uses the switching box scaled by
    /// this factor, so that small tracking errors still end inside it.
    pub planning_margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    /// Plant state at the sampling instant.
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// Measured position and the velocity the controller used.
    pub q_meas: DVector<f64>,
    pub qdot_meas: DVector<f64>,
    /// Plant acceleration right after the torque of this step is applied.
    pub qddot: Option<DVector<f64>>,
    /// Mean plant acceleration over the following control period.
    pub qddot_interval: Option<DVector<f64>>,
    pub u: Option<DVector<f64>>,
    pub tau: Option<DVector<f64>>,
    pub eps_a: Option<DVector<f64>>,
    pub mode: Mode,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub active_offered: usize,
    pub active_swapped: usize,
    pub active_rejected: usize,
    pub active_discarded: usize,
    pub passive_added: usize,
    pub passive_discarded: usize,
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub index: usize,
    pub reference: ReferenceTrajectory,
    pub log: Vec<StepRecord>,
    pub summary: IterationSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub converged: bool,
    pub switch_time: Option<f64>,
    /// Per-joint tracking RMSE over the tracking phase (rad).
    pub rmse: Vec<f64>,
    pub planner_converged: bool,
    pub planner_cost: f64,
    pub planner_outer_iterations: usize,
    pub planner_inner_iterations: usize,
    pub truncated: bool,
    /// Largest joint error at the end of the planned horizon, in units of
    /// the terminal box.
    pub terminal_box_ratio: f64,
    pub final_state: State,
    pub eps_a_size: usize,
    pub eps_p_size: usize,
    pub datasets: DatasetCounts,
    /// Mean one-step passive acceleration error over this iteration's
    /// states: with the regressor the plan used, after the update, and with
    /// an empty regressor.
    pub one_step_error_prior: Option<f64>,
    pub eps_a_hypers: Vec<Hyperparams>,
    pub eps_p_hypers: Vec<Hyperparams>,
    pub one_step_error_learned: Option<f64>,
    pub one_step_error_empty: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub ablation: Ablation,
    pub converged: bool,
    pub iterations_used: usize,
    pub iterations: Vec<IterationSummary>,
}

/// Per-joint root-mean-square difference over the overlapping prefix.
pub fn tracking_rmse(reference: &[DVector<f64>], executed: &[DVector<f64>]) -> Result<Vec<f64>> {
    let len = reference.len().min(executed.len());
    if len == 0 {
        return Err(Error::EmptyOverlap);
    }
    let n = reference[0].len();
    let mut acc = vec![0.0; n];
    for (r, e) in reference.iter().zip(executed).take(len) {
        if r.len() != n || e.len() != n {
            return Err(Error::Dimension("joint counts differ".into()));
        }
        for j in 0..n {
            acc[j] += (r[j] - e[j]).powi(2);
        }
    }
    Ok(acc.into_iter().map(|s| (s / len as f64).sqrt()).collect())
}

/// Integrates the plant over one control period with the torque held.
pub fn simulate_interval(truth: &RobotParams, x: &State, tau: &DVector<f64>, ts: f64, substeps: usize) -> Result<State> {
    let dt = ts / substeps as f64;
    let mut s = x.clone();
    for _ in 0..substeps {
        s = rk4_step(truth, &s, tau, dt)?;
    }
    Ok(s)
}

/// The balancing phase holds the goal when joint positions stay within twice
/// the position tolerance throughout and the final state is back inside
/// twice the full box. Velocity transients of the balancing controller may
/// leave the box in between.
fn holds_goal(window: &[StepRecord], spec: &OcpSpec) -> bool {
    let wide = spec.terminal_box.scaled(2.0);
    let goal = &spec.goal;
    let positions_ok = window.iter().all(|r| {
        r.q.iter()
            .zip(goal.q.iter())
            .all(|(q, g)| (q - g).abs() <= wide.position)
    });
    let last = window.last().expect("non-empty window");
    positions_ok && crate::planner::check_terminal_box(&State::new(last.q.as_slice(), last.qdot.as_slice()), goal, &wide)
}

fn box_ratio(x: &State, goal: &State, spec: &OcpSpec) -> f64 {
    let bx = &spec.terminal_box;
    let mut r: f64 = 0.0;
    for j in 0..x.dofs() {
        r = r.max((x.q[j] - goal.q[j]).abs() / bx.position);
        r = r.max((x.qdot[j] - goal.qdot[j]).abs() / bx.velocity);
    }
    r
}

pub struct Session {
    cfg: SessionConfig,
    planner_params: RobotParams,
    control_params: RobotParams,
    balance: BalanceController,
    eps_a: GpStack,
    eps_p: GpStack,
    empty_p: GpStack,
    warm: Option<WarmStart>,
    iteration: usize,
    rng: ChaCha8Rng,
    history: Vec<IterationSummary>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        cfg.truth.validate()?;
        cfg.nominal.validate()?;
        cfg.spec.validate()?;
        cfg.gains.validate()?;
        cfg.learning.active_hyper.validate()?;
        cfg.learning.passive_hyper.validate()?;
        if cfg.learning.budget == 0 {
            return Err(Error::InvalidParams("active budget must be >= 1".into()));
        }
        if cfg.sim.substeps == 0 || !(cfg.sim.sensor_noise >= 0.0) {
            return Err(Error::InvalidParams("substeps must be >= 1 and noise >= 0".into()));
        }
        if !(cfg.planning_margin > 0.0 && cfg.planning_margin <= 1.0) {
            return Err(Error::InvalidParams("planning margin must lie in (0, 1]".into()));
        }
        if cfg.truth.actuated != cfg.nominal.actuated {
            return Err(Error::InvalidParams("true and nominal actuation differ".into()));
        }
        let (planner_params, control_params) = match cfg.ablation {
            Ablation::NominalPlanTrueControl => (cfg.nominal.clone(), cfg.truth.clone()),
            Ablation::TruePlanNominalControl => (cfg.truth.clone(), cfg.nominal.clone()),
            _ => (cfg.nominal.clone(), cfg.nominal.clone()),
        };
        let balance = lqr_design(
            &control_params,
            &cfg.spec.goal,
            &cfg.lqr_q,
            &cfg.lqr_r,
            cfg.spec.ts,
            cfg.spec.terminal_box,
        )?;
        let n = cfg.truth.dofs();
        let m = cfg.truth.n_actuated();
        let eps_a = GpStack::empty(2 * n + m, &vec![cfg.learning.active_hyper; m]);
        let eps_p = GpStack::empty(2 * n + m, &vec![cfg.learning.passive_hyper; n - m]);
        let rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
        Ok(Session {
            planner_params,
            control_params,
            balance,
            empty_p: eps_p.clone(),
            eps_a,
            eps_p,
            warm: None,
            iteration: 0,
            rng,
            history: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn eps_a(&self) -> &GpStack {
        &self.eps_a
    }

    pub fn eps_p(&self) -> &GpStack {
        &self.eps_p
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationSummary] {
        &self.history
    }

    pub fn balance(&self) -> &BalanceController {
        &self.balance
    }

    /// Plans on the current passive regressor without running anything.
    pub fn plan(&self) -> Result<ReferenceTrajectory> {
        let model = PredictionModel::new(&self.planner_params, &self.eps_p).with_integrator(self.cfg.integrator);
        let mut spec = self.cfg.spec.clone();
        spec.terminal_box = spec.terminal_box.scaled(self.cfg.planning_margin);
        solve_ocp(&spec, &model, self.warm.as_ref(), &self.cfg.solver)
    }

    pub fn run_iteration(&mut self) -> Result<IterationResult> {
        let reference = self.plan()?;
        self.iteration += 1;
        let learns = self.cfg.ablation.learns();
        if learns && self.eps_a.is_empty() {
            let pts: Vec<DVector<f64>> = (0..reference.horizon())
                .map(|k| active_regressor_input(&reference.state(k), &reference.u[k]))
                .collect();
            self.eps_a.set_scaling(InputScaling::from_data(pts[0].len(), &pts))?;
        }

        let mut counts = DatasetCounts::default();
        let (log, switch_step, truncated) = self.execute(&reference, learns, &mut counts)?;

        let spec = &self.cfg.spec.clone();
        let nh = spec.horizon;
        let hold = (self.cfg.sim.hold_time / spec.ts).round() as usize;
        let converged = match switch_step {
            Some(s) if !truncated && log.len() > s + hold => holds_goal(&log[s..=s + hold], spec),
            _ => false,
        };

        let tracked: Vec<&StepRecord> = log
            .iter()
            .filter(|r| r.mode == Mode::Tracking && r.k <= nh && r.u.is_some())
            .collect();
        let rmse = if tracked.is_empty() {
            vec![f64::NAN; spec.dofs()]
        } else {
            let refs: Vec<DVector<f64>> = tracked.iter().map(|r| reference.q[r.k].clone()).collect();
            let exec: Vec<DVector<f64>> = tracked.iter().map(|r| r.q.clone()).collect();
            tracking_rmse(&refs, &exec)?
        };
        let terminal = log.get(nh).unwrap_or_else(|| log.last().expect("non-empty log"));
        let terminal_state = State::new(terminal.q.as_slice(), terminal.qdot.as_slice());
        let last = log.last().expect("non-empty log");

        let (one_prior, one_learned, one_empty) = if learns {
            let (prior, _) = self.one_step_errors(&log)?;
            self.learn_passive(&log, &mut counts)?;
            self.eps_a.optimize(&self.cfg.learning.hyperopt)?;
            let (learned, empty) = self.one_step_errors(&log)?;
            (prior, learned, empty)
        } else {
            (None, None, None)
        };

        self.warm = Some(reference.warm_start.clone());
        let summary = IterationSummary {
            iteration: self.iteration,
            converged,
            switch_time: switch_step.map(|s| s as f64 * spec.ts),
            rmse,
            planner_converged: reference.converged,
            planner_cost: reference.cost,
            planner_outer_iterations: reference.outer_iterations,
            planner_inner_iterations: reference.inner_iterations,
            truncated,
            terminal_box_ratio: box_ratio(&terminal_state, &spec.goal, spec),
            final_state: State::new(last.q.as_slice(), last.qdot.as_slice()),
            eps_a_size: self.eps_a.len(),
            eps_p_size: self.eps_p.len(),
            datasets: counts,
            one_step_error_prior: one_prior,
            eps_a_hypers: self.eps_a.hypers(),
            eps_p_hypers: self.eps_p.hypers(),
            one_step_error_learned: one_learned,
            one_step_error_empty: one_empty,
        };
        self.history.push(summary.clone());
        Ok(IterationResult {
            index: self.iteration,
            reference,
            log,
            summary,
        })
    }

    fn measure(&mut self, x: &State) -> DVector<f64> {
        let sigma = self.cfg.sim.sensor_noise;
        if sigma == 0.0 {
            return x.q.clone();
        }
        let normal = Normal::new(0.0, sigma).expect("finite noise level");
        x.q.map(|v| v + normal.sample(&mut self.rng))
    }

    /// Runs the control loop on the true plant. Returns the step log, the
    /// switch step and whether the run diverged.
    fn execute(
        &mut self,
        reference: &ReferenceTrajectory,
        learns: bool,
        counts: &mut DatasetCounts,
    ) -> Result<(Vec<StepRecord>, Option<usize>, bool)> {
        let spec = self.cfg.spec.clone();
        let ts = spec.ts;
        let n = spec.dofs();
        let m = spec.inputs();
        let hold = (self.cfg.sim.hold_time / ts).round() as usize;
        let mut end = spec.horizon + hold;
        let opts = self.cfg.learning.clone();
        let noisy = self.cfg.sim.sensor_noise > 0.0;

        let mut sup = Supervisor::new(m);
        let mut window = SignalWindow::new(opts.causal_window, ts)?;
        let mut log: Vec<StepRecord> = Vec::with_capacity(end + 1);
        let mut x = spec.start.clone();
        let mut truncated = false;
        let mut k = 0;
        loop {
            let t = k as f64 * ts;
            let q_meas = self.measure(&x);
            window.push(t, q_meas.clone())?;
            let qdot_seen = if noisy && window.is_full() {
                window.causal_derivative(1)?
            } else {
                x.qdot.clone()
            };
            let seen = State {
                q: q_meas.clone(),
                qdot: qdot_seen.clone(),
            };
            let mut rec = StepRecord {
                k,
                t,
                q: x.q.clone(),
                qdot: x.qdot.clone(),
                q_meas,
                qdot_meas: qdot_seen,
                qddot: None,
                qddot_interval: None,
                u: None,
                tau: None,
                eps_a: None,
                mode: sup.mode(),
            };
            if k >= end {
                log.push(rec);
                break;
            }
            let eps_a = if learns { Some(&self.eps_a) } else { None };
            let action = sup.step(
                k,
                &seen,
                reference,
                eps_a,
                &self.control_params,
                &self.cfg.gains,
                &self.balance,
            )?;
            if action.mode == Mode::Balancing && sup.switch_step() == Some(k) {
                end = end.max(k + hold);
            }
            let qddot = forward_dynamics(&self.cfg.truth, &x, &action.tau)?;
            rec.mode = action.mode;
            rec.qddot = Some(qddot);
            rec.u = action.u;
            rec.tau = Some(action.tau.clone());
            rec.eps_a = action.eps_a;
            log.push(rec);

            let next = simulate_interval(&self.cfg.truth, &x, &action.tau, ts, self.cfg.sim.substeps)?;
            if let Some(last) = log.last_mut() {
                last.qddot_interval = Some((&next.qdot - &x.qdot) / ts);
            }
            if learns {
                self.learn_active(&log, &window, counts)?;
            }
            x = next;
            k += 1;
            if !x.is_finite() || x.qdot.amax() > self.cfg.sim.divergence_speed {
                truncated = true;
                if x.is_finite() {
                    log.push(StepRecord {
                        k,
                        t: k as f64 * ts,
                        q: x.q.clone(),
                        qdot: x.qdot.clone(),
                        q_meas: x.q.clone(),
                        qdot_meas: x.qdot.clone(),
                        qddot: None,
                        qddot_interval: None,
                        u: None,
                        tau: None,
                        eps_a: None,
                        mode: sup.mode(),
                    });
                }
                break;
            }
        }
        debug_assert!(n > 0);
        Ok((log, sup.switch_step(), truncated))
    }

    /// Offers the newest available active sample to the reduced set.
    fn learn_active(&mut self, log: &[StepRecord], window: &SignalWindow, counts: &mut DatasetCounts) -> Result<()> {
        let opts = &self.cfg.learning;
        let act = &self.cfg.truth.actuated;
        let (rec, qddot_a) = match opts.accel_source {
            AccelSource::Exact | AccelSource::Interval => {
                let rec = log.last().expect("non-empty log");
                let acc = if opts.accel_source == AccelSource::Exact {
                    &rec.qddot
                } else {
                    &rec.qddot_interval
                };
                let Some(acc) = acc else { return Ok(()) };
                (rec, select_rows(acc, act))
            }
            AccelSource::Filtered => {
                if !window.is_full() {
                    return Ok(());
                }
                let est = window.lagged_derivative(2)?;
                // the window's newest sample is the last logged step
                let idx = log.len() - 1 - est.lag;
                (&log[idx], select_rows(&est.value, act))
            }
        };
        let Some(u) = &rec.u else { return Ok(()) };
        if rec.mode != Mode::Tracking {
            return Ok(());
        }
        counts.active_offered += 1;
        if qddot_a.amax() > opts.accel_limit {
            counts.active_discarded += 1;
            return Ok(());
        }
        let state = State::new(rec.q_meas.as_slice(), rec.qdot_meas.as_slice());
        let y = residual_active(u, &qddot_a)?;
        match self
            .eps_a
            .reduced_insert(active_regressor_input(&state, u), &y, opts.budget)?
        {
            InsertOutcome::Swapped { .. } => counts.active_swapped += 1,
            InsertOutcome::Rejected => counts.active_rejected += 1,
            InsertOutcome::Appended => {}
        }
        Ok(())
    }

    /// Accelerations used for the passive dataset, one per logged step.
    fn passive_accelerations(&self, log: &[StepRecord]) -> Result<Vec<Option<DVector<f64>>>> {
        let opts = &self.cfg.learning;
        match opts.accel_source {
            AccelSource::Exact => Ok(log.iter().map(|r| r.qddot.clone()).collect()),
            AccelSource::Interval => Ok(log.iter().map(|r| r.qddot_interval.clone()).collect()),
            AccelSource::Filtered => {
                if log.len() < opts.offline_window {
                    return Ok(vec![None; log.len()]);
                }
                let n = self.cfg.truth.dofs();
                let mut per_joint = Vec::with_capacity(n);
                for j in 0..n {
                    let sig: Vec<f64> = log.iter().map(|r| r.q_meas[j]).collect();
                    per_joint.push(smooth_offline(
                        &sig,
                        self.cfg.spec.ts,
                        opts.offline_window,
                        opts.offline_order,
                        2,
                    )?);
                }
                Ok((0..log.len())
                    .map(|i| Some(DVector::from_fn(n, |j, _| per_joint[j][i])))
                    .collect())
            }
        }
    }

    /// Appends this iteration's passive samples and refits.
    fn learn_passive(&mut self, log: &[StepRecord], counts: &mut DatasetCounts) -> Result<()> {
        let nh = self.cfg.spec.horizon;
        let accs = self.passive_accelerations(log)?;
        let act = &self.cfg.truth.actuated;
        let pas = self.cfg.truth.passive();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (rec, acc) in log.iter().zip(&accs).take(nh) {
            let Some(acc) = acc else { continue };
            if rec.tau.is_none() {
                continue;
            }
            if acc.amax() > self.cfg.learning.accel_limit {
                counts.passive_discarded += 1;
                continue;
            }
            let state = State::new(rec.q_meas.as_slice(), rec.qdot_meas.as_slice());
            let qa = select_rows(acc, act);
            let y = residual_passive(&self.cfg.nominal, &state, &qa, &select_rows(acc, &pas))?;
            xs.push(passive_regressor_input(&state, &qa));
            ys.push(y);
        }
        counts.passive_added = xs.len();
        if !xs.is_empty() {
            self.eps_p.extend(&xs, &ys)?;
            self.eps_p.optimize(&self.cfg.learning.hyperopt)?;
        }
        Ok(())
    }

    fn one_step_errors(&self, log: &[StepRecord]) -> Result<(Option<f64>, Option<f64>)> {
        let act = &self.cfg.truth.actuated;
        let pas = self.cfg.truth.passive();
        let accs = self.passive_accelerations(log)?;
        let (mut learned, mut empty, mut count) = (0.0, 0.0, 0usize);
        for (rec, acc) in log.iter().zip(&accs).take(self.cfg.spec.horizon) {
            let Some(acc) = acc else { continue };
            if rec.tau.is_none() {
                continue;
            }
            let state = State::new(rec.q_meas.as_slice(), rec.qdot_meas.as_slice());
            let qa = select_rows(acc, act);
            let truth = select_rows(acc, &pas);
            let phi = nominal_passive_acceleration(&self.cfg.nominal, &state, &qa)?;
            let corr = self.eps_p.predict_mean(&passive_regressor_input(&state, &qa));
            let corr0 = self.empty_p.predict_mean(&passive_regressor_input(&state, &qa));
            learned += (&phi + corr - &truth).abs().sum();
            empty += (&phi + corr0 - &truth).abs().sum();
            count += pas.len();
        }
        if count == 0 {
            return Ok((None, None));
        }
        Ok((Some(learned / count as f64), Some(empty / count as f64)))
    }

    /// Iterates until an iteration converges or `max_iters` are spent.
    pub fn run_until_converged(&mut self, max_iters: usize) -> Result<(Report, Vec<IterationResult>)> {
        if max_iters == 0 {
            return Err(Error::InvalidParams("max_iters must be >= 1".into()));
        }
        let mut results = Vec::new();
        let mut converged = false;
        for _ in 0..max_iters {
            let r = self.run_iteration()?;
            converged = r.summary.converged;
            results.push(r);
            if converged {
                break;
            }
        }
        Ok((
            Report {
                schema_version: REPORT_SCHEMA_VERSION,
                ablation: self.cfg.ablation,
                converged,
                iterations_used: results.len(),
                iterations: results.iter().map(|r| r.summary.clone()).collect(),
            },
            results,
        ))
    }
}
