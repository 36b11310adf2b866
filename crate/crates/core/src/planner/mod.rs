//! Equilibrium-to-equilibrium transfer planning by single shooting on the
//! learned-corrected prediction model.
//!
//! The model integrates `q̈_a = u` and `q̈_p = φ̂(q, q̇, u) + ε_p(q, q̇, u)`
//! with explicit Euler, where `φ̂` is the nominal passive acceleration. The
//! path and terminal constraints are handled by an augmented Lagrangian
//! whose subproblems are solved by L-BFGS with adjoint gradients.

pub mod lbfgs;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{RobotParams, State};
use crate::error::{Error, Result};
use crate::gp::GpStack;
use crate::pfl::nominal_passive_acceleration_jacobian;

pub use lbfgs::{LbfgsOptions, LbfgsStatus};

/// Terminal region around the goal; doubles as the balancing basin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalBox {
    pub position: f64,
    pub velocity: f64,
}

impl Default for TerminalBox {
    fn default() -> Self {
        TerminalBox {
            position: 0.2,
            velocity: 0.5,
        }
    }
}

impl TerminalBox {
    pub fn scaled(&self, factor: f64) -> TerminalBox {
        TerminalBox {
            position: self.position * factor,
            velocity: self.velocity * factor,
        }
    }
}

/// True iff every joint is within the box (non-strict).
pub fn check_terminal_box(x: &State, goal: &State, bx: &TerminalBox) -> bool {
    x.q.iter().zip(goal.q.iter()).all(|(q, g)| (q - g).abs() <= bx.position)
        && x.qdot.iter().zip(goal.qdot.iter()).all(|(v, g)| (v - g).abs() <= bx.velocity)
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub horizon: usize,
    pub ts: f64,
    pub start: State,
    pub goal: State,
    /// Stage weight on `x_g − x`, `2n × 2n`.
    pub q_weight: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
    /// Input weight, `m × m`.
    pub r_weight: DMatrix<f64>,
    /// Per-joint speed limits (rad/s).
    pub velocity_bounds: Vec<f64>,
    /// Per-input magnitude limits (rad/s²).
    pub input_bounds: Vec<f64>,
    pub terminal_box: TerminalBox,
}

impl OcpSpec {
    /// Default weights and bounds for an `n`-dof robot with `m` inputs.
    pub fn with_defaults(n: usize, m: usize, horizon: usize, ts: f64, start: State, goal: State) -> Self {
        let mut q = DMatrix::identity(2 * n, 2 * n);
        for i in n..2 * n {
            q[(i, i)] = 0.1;
        }
        let mut velocity_bounds = vec![15.0; n];
        if n == 2 {
            velocity_bounds = vec![8.0, 15.0];
        }
        OcpSpec {
            horizon,
            ts,
            start,
            goal,
            q_weight: q,
            terminal_weight: DMatrix::identity(2 * n, 2 * n) * 100.0,
            r_weight: DMatrix::identity(m, m) * 0.01,
            velocity_bounds,
            input_bounds: vec![40.0; m],
            terminal_box: TerminalBox::default(),
        }
    }

    pub fn dofs(&self) -> usize {
        self.start.dofs()
    }

    pub fn inputs(&self) -> usize {
        self.r_weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dofs();
        let m = self.inputs();
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.horizon < 2 {
            return bad(format!("horizon {} < 2", self.horizon));
        }
        if !(self.ts > 0.0) {
            return bad(format!("sampling interval {} must be positive", self.ts));
        }
        if self.goal.dofs() != n || self.start.qdot.len() != n || self.goal.qdot.len() != n {
            return Err(Error::Dimension("start and goal dimensions differ".into()));
        }
        for (name, w, dim) in [
            ("Q", &self.q_weight, 2 * n),
            ("Q_N", &self.terminal_weight, 2 * n),
            ("R", &self.r_weight, m),
        ] {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(Error::Dimension(format!("{name} must be {dim}x{dim}")));
            }
            if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
                return bad(format!("{name} is not symmetric"));
            }
            if w.clone().cholesky().is_none() {
                return bad(format!("{name} is not positive definite"));
            }
        }
        if self.velocity_bounds.len() != n || self.velocity_bounds.iter().any(|v| !(*v > 0.0)) {
            return bad("velocity bounds must be positive, one per joint".into());
        }
        if self.input_bounds.len() != m || self.input_bounds.iter().any(|v| !(*v > 0.0)) {
            return bad("input bounds must be positive, one per input".into());
        }
        if !(self.terminal_box.position > 0.0 && self.terminal_box.velocity > 0.0) {
            return bad("terminal box tolerances must be positive".into());
        }
        Ok(())
    }

    fn constraint_count(&self) -> usize {
        let n = self.dofs();
        2 * (self.horizon * (n + self.inputs()) + 2 * n)
    }
}

/// Discretization of the prediction model over one sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// `q⁺ = q + T q̇`, `q̇⁺ = q̇ + T q̈`.
    #[default]
    Euler,
    /// Euler velocity update with the position update of a held
    /// acceleration, `q⁺ = q + T q̇ + T²/2 q̈`.
    HeldAcceleration,
}

/// Nominal model plus the frozen passive correction.
#[derive(Debug, Clone, Copy)]
pub struct PredictionModel<'a> {
    pub nominal: &'a RobotParams,
    pub eps_p: &'a GpStack,
    pub integrator: Integrator,
}

/// Regressor input `(q, q̇, q̈_a)` shared by planner and learner.
pub fn passive_regressor_input(state: &State, qddot_a: &DVector<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(2 * state.dofs() + qddot_a.len());
    v.extend(state.q.iter());
    v.extend(state.qdot.iter());
    v.extend(qddot_a.iter());
    DVector::from_vec(v)
}

impl<'a> PredictionModel<'a> {
    pub fn new(nominal: &'a RobotParams, eps_p: &'a GpStack) -> Self {
        PredictionModel {
            nominal,
            eps_p,
            integrator: Integrator::Euler,
        }
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    fn position_gain(&self, ts: f64) -> f64 {
        match self.integrator {
            Integrator::Euler => 0.0,
            Integrator::HeldAcceleration => 0.5 * ts * ts,
        }
    }

    fn check(&self, x: &State, u: &DVector<f64>) -> Result<()> {
        let n = self.nominal.dofs();
        if x.dofs() != n || x.qdot.len() != n || u.len() != self.nominal.n_actuated() {
            return Err(Error::Dimension(format!(
                "state ({}, {}) / input {} for a {}-dof model with {} inputs",
                x.q.len(),
                x.qdot.len(),
                u.len(),
                n,
                self.nominal.n_actuated()
            )));
        }
        if !self.eps_p.is_empty() && self.eps_p.dim() != 2 * n + u.len() {
            return Err(Error::Dimension("passive regressor input dimension".into()));
        }
        Ok(())
    }

    /// Predicted full acceleration at `x` under input `u`.
    pub fn acceleration(&self, x: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, u)?;
        let phi = crate::pfl::nominal_passive_acceleration(self.nominal, x, u)?;
        let eps = self.correction(x, u);
        let mut acc = DVector::zeros(x.dofs());
        for (k, &i) in self.nominal.actuated.iter().enumerate() {
            acc[i] = u[k];
        }
        for (k, i) in self.nominal.passive().into_iter().enumerate() {
            acc[i] = phi[k] + eps[k];
        }
        Ok(acc)
    }

    fn correction(&self, x: &State, u: &DVector<f64>) -> DVector<f64> {
        if self.eps_p.is_empty() {
            DVector::zeros(self.nominal.n_passive())
        } else {
            self.eps_p.predict_mean(&passive_regressor_input(x, u))
        }
    }

    /// One step of length `ts`.
    pub fn step(&self, x: &State, u: &DVector<f64>, ts: f64) -> Result<State> {
        let acc = self.acceleration(x, u)?;
        Ok(State {
            q: &x.q + &x.qdot * ts + &acc * self.position_gain(ts),
            qdot: &x.qdot + acc * ts,
        })
    }

    /// Step with its Jacobians `A = ∂x⁺/∂x` (`2n × 2n`) and
    /// `B = ∂x⁺/∂u` (`2n × m`).
    pub fn step_with_jacobian(&self, x: &State, u: &DVector<f64>, ts: f64) -> Result<(State, DMatrix<f64>, DMatrix<f64>)> {
        self.check(x, u)?;
        let n = x.dofs();
        let m = u.len();
        let jac = nominal_passive_acceleration_jacobian(self.nominal, x, u)?;
        let (eps, eps_jac) = if self.eps_p.is_empty() {
            (
                DVector::zeros(self.nominal.n_passive()),
                DMatrix::zeros(self.nominal.n_passive(), 2 * n + m),
            )
        } else {
            self.eps_p.predict_mean_jacobian(&passive_regressor_input(x, u))
        };

        let mut acc = DVector::zeros(n);
        // rows of ∂q̈/∂(q, q̇) and ∂q̈/∂u
        let mut da_dx = DMatrix::zeros(n, 2 * n);
        let mut da_du = DMatrix::zeros(n, m);
        for (k, &i) in self.nominal.actuated.iter().enumerate() {
            acc[i] = u[k];
            da_du[(i, k)] = 1.0;
        }
        for (k, i) in self.nominal.passive().into_iter().enumerate() {
            acc[i] = jac.value[k] + eps[k];
            for j in 0..n {
                da_dx[(i, j)] = jac.d_q[(k, j)] + eps_jac[(k, j)];
                da_dx[(i, n + j)] = jac.d_qdot[(k, j)] + eps_jac[(k, n + j)];
            }
            for j in 0..m {
                da_du[(i, j)] = jac.d_active[(k, j)] + eps_jac[(k, 2 * n + j)];
            }
        }

        let mut a = DMatrix::identity(2 * n, 2 * n);
        for j in 0..n {
            a[(j, n + j)] = ts;
        }
        let h = self.position_gain(ts);
        let mut lower = a.view_mut((n, 0), (n, 2 * n));
        lower += &da_dx * ts;
        let mut b = DMatrix::zeros(2 * n, m);
        b.view_mut((n, 0), (n, m)).copy_from(&(&da_du * ts));
        if h != 0.0 {
            let mut upper = a.view_mut((0, 0), (n, 2 * n));
            upper += &da_dx * h;
            b.view_mut((0, 0), (n, m)).copy_from(&(da_du * h));
        }

        let next = State {
            q: &x.q + &x.qdot * ts + &acc * h,
            qdot: &x.qdot + acc * ts,
        };
        Ok((next, a, b))
    }
}

/// Explicit Euler step of the prediction model.
pub fn predict_step(nominal: &RobotParams, eps_p: &GpStack, x: &State, u: &DVector<f64>, ts: f64) -> Result<State> {
    PredictionModel::new(nominal, eps_p).step(x, u, ts)
}

/// Largest violation of each constraint family; zero when satisfied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    pub velocity: f64,
    pub input: f64,
    pub terminal_position: f64,
    pub terminal_velocity: f64,
}

impl Violations {
    pub fn max(&self) -> f64 {
        self.velocity
            .max(self.input)
            .max(self.terminal_position)
            .max(self.terminal_velocity)
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// States `x_0 … x_N`; shorter if the rollout diverged.
    pub states: Vec<State>,
    /// `+∞` when the rollout diverged.
    pub cost: f64,
    pub input_cost: f64,
    pub violations: Violations,
    pub diverged: bool,
}

fn quad(w: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(w * v))
}

/// Simulates `inputs` from the spec's start state and evaluates the cost
/// and constraint violations.
pub fn rollout(spec: &OcpSpec, model: &PredictionModel, inputs: &[DVector<f64>]) -> Result<Rollout> {
    if inputs.len() != spec.horizon {
        return Err(Error::Dimension(format!(
            "{} inputs for horizon {}",
            inputs.len(),
            spec.horizon
        )));
    }
    let xg = spec.goal.to_vector();
    let mut states = Vec::with_capacity(spec.horizon + 1);
    states.push(spec.start.clone());
    let (mut state_cost, mut input_cost) = (0.0, 0.0);
    let mut viol = Violations::default();
    for (i, u) in inputs.iter().enumerate() {
        let x = &states[i];
        state_cost += quad(&spec.q_weight, &(&xg - x.to_vector()));
        input_cost += quad(&spec.r_weight, u);
        for (k, b) in spec.input_bounds.iter().enumerate() {
            viol.input = viol.input.max(u[k].abs() - b);
        }
        let next = model.step(x, u, spec.ts)?;
        if !next.is_finite() {
            return Ok(Rollout {
                states,
                cost: f64::INFINITY,
                input_cost,
                violations: Violations {
                    velocity: f64::INFINITY,
                    ..viol
                },
                diverged: true,
            });
        }
        for (j, b) in spec.velocity_bounds.iter().enumerate() {
            viol.velocity = viol.velocity.max(next.qdot[j].abs() - b);
        }
        states.push(next);
    }
    let last = states.last().expect("non-empty");
    state_cost += quad(&spec.terminal_weight, &(&xg - last.to_vector()));
    for j in 0..spec.dofs() {
        viol.terminal_position = viol
            .terminal_position
            .max((last.q[j] - spec.goal.q[j]).abs() - spec.terminal_box.position);
        viol.terminal_velocity = viol
            .terminal_velocity
            .max((last.qdot[j] - spec.goal.qdot[j]).abs() - spec.terminal_box.velocity);
    }
    viol.velocity = viol.velocity.max(0.0);
    viol.input = viol.input.max(0.0);
    viol.terminal_position = viol.terminal_position.max(0.0);
    viol.terminal_velocity = viol.terminal_velocity.max(0.0);
    Ok(Rollout {
        states,
        cost: state_cost + input_cost,
        input_cost,
        violations: viol,
        diverged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub inner: LbfgsOptions,
    /// Constraint tolerance for declaring the solve converged.
    pub feasibility_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Weight on the summed violation in the merit used to accept outer
    /// iterates.
    pub merit_weight: f64,
    /// Amplitude of the sinusoidal cold-start excitation (rad/s²).
    pub cold_start_amplitude: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer: 30,
            inner: LbfgsOptions::default(),
            feasibility_tol: 1e-4,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            merit_weight: 1e3,
            cold_start_amplitude: 1.0,
        }
    }
}

/// Solver state carried to the next solve of a similar problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub inputs: Vec<DVector<f64>>,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
}

impl WarmStart {
    pub fn from_inputs(inputs: Vec<DVector<f64>>) -> Self {
        WarmStart {
            inputs,
            multipliers: Vec::new(),
            penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub ts: f64,
    /// Positions at steps `0 … N`; index 0 is the start state.
    pub q: Vec<DVector<f64>>,
    pub qdot: Vec<DVector<f64>>,
    /// Inputs for steps `0 … N−1`.
    pub u: Vec<DVector<f64>>,
    pub converged: bool,
    pub cost: f64,
    pub violations: Violations,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Merit of each accepted outer iterate, in order.
    pub merit_history: Vec<f64>,
    pub warm_start: WarmStart,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    pub fn state(&self, k: usize) -> State {
        State {
            q: self.q[k].clone(),
            qdot: self.qdot[k].clone(),
        }
    }

    pub fn final_state(&self) -> State {
        self.state(self.q.len() - 1)
    }
}

/// Evaluates the augmented Lagrangian and its gradient.
struct Lagrangian<'a> {
    spec: &'a OcpSpec,
    model: &'a PredictionModel<'a>,
    multipliers: &'a [f64],
    penalty: f64,
}

impl Lagrangian<'_> {
    fn split(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.spec.inputs();
        (0..self.spec.horizon)
            .map(|i| z.rows(i * m, m).into_owned())
            .collect()
    }

    /// PHR term for one `c ≤ 0` constraint: value and derivative in `c`.
    fn phr(&self, idx: usize, c: f64) -> (f64, f64) {
        let lam = self.multipliers[idx];
        let s = (lam + self.penalty * c).max(0.0);
        ((s * s - lam * lam) / (2.0 * self.penalty), s)
    }

    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let spec = self.spec;
        let n = spec.dofs();
        let m = spec.inputs();
        let nh = spec.horizon;
        let inputs = self.split(z);
        let xg = spec.goal.to_vector();
        let nan = || (f64::INFINITY, DVector::zeros(z.len()));

        let mut states = Vec::with_capacity(nh + 1);
        let mut jacs = Vec::with_capacity(nh);
        states.push(spec.start.clone());
        for u in &inputs {
            match self.model.step_with_jacobian(states.last().expect("non-empty"), u, spec.ts) {
                Ok((next, a, b)) if next.is_finite() => {
                    states.push(next);
                    jacs.push((a, b));
                }
                _ => return nan(),
            }
        }

        let mut value = 0.0;
        let mut ci = 0;
        // ∂L/∂x_i and ∂L/∂u_i from terms that touch them directly
        let mut lx: Vec<DVector<f64>> = Vec::with_capacity(nh + 1);
        let mut lu: Vec<DVector<f64>> = Vec::with_capacity(nh);
        for i in 0..=nh {
            let x = states[i].to_vector();
            let e = &x - &xg;
            let w = if i == nh { &spec.terminal_weight } else { &spec.q_weight };
            let we = w * &e;
            value += e.dot(&we);
            let mut gx = we * 2.0;
            if i > 0 {
                for j in 0..n {
                    let v = x[n + j];
                    let b = spec.velocity_bounds[j];
                    let (p1, d1) = self.phr(ci, v - b);
                    let (p2, d2) = self.phr(ci + 1, -v - b);
                    value += p1 + p2;
                    gx[n + j] += d1 - d2;
                    ci += 2;
                }
            }
            if i < nh {
                let u = &inputs[i];
                let ru = &spec.r_weight * u;
                value += u.dot(&ru);
                let mut gu = ru * 2.0;
                for k in 0..m {
                    let b = spec.input_bounds[k];
                    let (p1, d1) = self.phr(ci, u[k] - b);
                    let (p2, d2) = self.phr(ci + 1, -u[k] - b);
                    value += p1 + p2;
                    gu[k] += d1 - d2;
                    ci += 2;
                }
                lu.push(gu);
            }
            lx.push(gx);
        }
        let last = &states[nh];
        for j in 0..n {
            let dq = last.q[j] - spec.goal.q[j];
            let dv = last.qdot[j] - spec.goal.qdot[j];
            let (p1, d1) = self.phr(ci, dq - spec.terminal_box.position);
            let (p2, d2) = self.phr(ci + 1, -dq - spec.terminal_box.position);
            let (p3, d3) = self.phr(ci + 2, dv - spec.terminal_box.velocity);
            let (p4, d4) = self.phr(ci + 3, -dv - spec.terminal_box.velocity);
            value += p1 + p2 + p3 + p4;
            lx[nh][j] += d1 - d2;
            lx[nh][n + j] += d3 - d4;
            ci += 4;
        }
        debug_assert_eq!(ci, self.multipliers.len());

        // adjoint sweep
        let mut grad = DVector::zeros(z.len());
        let mut lambda = lx[nh].clone();
        for i in (0..nh).rev() {
            let (a, b) = &jacs[i];
            let gu = &lu[i] + b.tr_mul(&lambda);
            grad.rows_mut(i * m, m).copy_from(&gu);
            lambda = &lx[i] + a.tr_mul(&lambda);
        }
        (value, grad)
    }

    /// Constraint values in the multiplier layout.
    fn constraints(&self, inputs: &[DVector<f64>], states: &[State]) -> Vec<f64> {
        let spec = self.spec;
        let n = spec.dofs();
        let mut c = Vec::with_capacity(self.multipliers.len());
        for i in 0..=spec.horizon {
            if i > 0 {
                for j in 0..n {
                    let v = states[i].qdot[j];
                    c.push(v - spec.velocity_bounds[j]);
                    c.push(-v - spec.velocity_bounds[j]);
                }
            }
            if i < spec.horizon {
                for (k, b) in spec.input_bounds.iter().enumerate() {
                    c.push(inputs[i][k] - b);
                    c.push(-inputs[i][k] - b);
                }
            }
        }
        let last = &states[spec.horizon];
        for j in 0..n {
            let dq = last.q[j] - spec.goal.q[j];
            let dv = last.qdot[j] - spec.goal.qdot[j];
            c.push(dq - spec.terminal_box.position);
            c.push(-dq - spec.terminal_box.position);
            c.push(dv - spec.terminal_box.velocity);
            c.push(-dv - spec.terminal_box.velocity);
        }
        c
    }
}

fn flatten(inputs: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        inputs.iter().map(|u| u.len()).sum(),
        inputs.iter().flat_map(|u| u.iter().copied()),
    )
}

/// Deterministic cold start: zero inputs plus a small sinusoid that breaks
/// the symmetry of swing-up problems.
pub fn cold_start(spec: &OcpSpec, amplitude: f64) -> Vec<DVector<f64>> {
    let nh = spec.horizon as f64;
    (0..spec.horizon)
        .map(|i| {
            let s = amplitude * (2.0 * std::f64::consts::PI * i as f64 / nh).sin();
            DVector::from_element(spec.inputs(), s)
        })
        .collect()
}

/// Gradient of the augmented Lagrangian with zero multipliers and the given
/// penalty; exposed for derivative checks.
pub fn penalized_objective(
    spec: &OcpSpec,
    model: &PredictionModel,
    inputs: &[DVector<f64>],
    multipliers: Option<&[f64]>,
    penalty: f64,
) -> (f64, DVector<f64>) {
    let zeros = vec![0.0; spec.constraint_count()];
    let lag = Lagrangian {
        spec,
        model,
        multipliers: multipliers.unwrap_or(&zeros),
        penalty,
    };
    lag.evaluate(&flatten(inputs))
}

/// Solves the transfer problem. Never fails on non-convergence: the best
/// accepted iterate is returned with `converged = false`.
pub fn solve_ocp(
    spec: &OcpSpec,
    model: &PredictionModel,
    warm_start: Option<&WarmStart>,
    opts: &SolverOptions,
) -> Result<ReferenceTrajectory> {
    spec.validate()?;
    let n_con = spec.constraint_count();
    let mut inputs = match warm_start {
        Some(w) if w.inputs.len() == spec.horizon && w.inputs.iter().all(|u| u.len() == spec.inputs()) => {
            w.inputs.clone()
        }
        _ => cold_start(spec, opts.cold_start_amplitude),
    };
    let (mut multipliers, mut penalty) = match warm_start {
        Some(w) if w.multipliers.len() == n_con && w.penalty > 0.0 => (w.multipliers.clone(), w.penalty),
        _ => (vec![0.0; n_con], opts.penalty_init),
    };

    let merit = |r: &Rollout| {
        if r.diverged {
            f64::INFINITY
        } else {
            let v = r.violations;
            r.cost + opts.merit_weight * (v.velocity + v.input + v.terminal_position + v.terminal_velocity)
        }
    };

    let mut best_inputs = inputs.clone();
    let mut best = rollout(spec, model, &inputs)?;
    let mut best_merit = merit(&best);
    let mut best_multipliers = multipliers.clone();
    let mut best_penalty = penalty;
    let mut merit_history = vec![best_merit];
    let mut inner_total = 0;
    let mut outer = 0;
    let mut prev_violation = best.violations.max();

    while outer < opts.max_outer {
        outer += 1;
        let lag = Lagrangian {
            spec,
            model,
            multipliers: &multipliers,
            penalty,
        };
        let result = lbfgs::minimize(|z| lag.evaluate(z), flatten(&inputs), &opts.inner);
        inner_total += result.iterations;
        inputs = lag.split(&result.x);
        let r = rollout(spec, model, &inputs)?;
        if r.diverged {
            break;
        }
        let c = lag.constraints(&inputs, &r.states);
        let violation = r.violations.max();
        let stationary = matches!(result.status, LbfgsStatus::GradientTolerance | LbfgsStatus::SmallDecrease);

        let m = merit(&r);
        let accepted = m <= best_merit;
        if accepted {
            best_merit = m;
            best_inputs = inputs.clone();
            best = r;
            merit_history.push(m);
        }
        if violation <= opts.feasibility_tol && stationary {
            if accepted {
                best_multipliers = multipliers.clone();
                best_penalty = penalty;
            }
            break;
        }
        for (l, ci) in multipliers.iter_mut().zip(&c) {
            *l = (*l + penalty * ci).max(0.0);
        }
        if violation > 0.25 * prev_violation && violation > opts.feasibility_tol {
            penalty = (penalty * opts.penalty_growth).min(opts.penalty_max);
        }
        prev_violation = violation;
        if accepted {
            best_multipliers = multipliers.clone();
            best_penalty = penalty;
        }
    }

    let feasible = best.violations.max() <= 1e-3;
    let mut q = Vec::with_capacity(best.states.len());
    let mut qdot = Vec::with_capacity(best.states.len());
    for s in &best.states {
        q.push(s.q.clone());
        qdot.push(s.qdot.clone());
    }
    Ok(ReferenceTrajectory {
        ts: spec.ts,
        q,
        qdot,
        converged: feasible && !best.diverged,
        cost: best.cost,
        violations: best.violations,
        outer_iterations: outer,
        inner_iterations: inner_total,
        merit_history,
        warm_start: WarmStart {
            inputs: best_inputs.clone(),
            multipliers: best_multipliers,
            penalty: best_penalty,
        },
        u: best_inputs,
    })
}
