//! Reference tracking through collocated PFL, LQR balancing about the goal
//! and the one-way switch between them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_dynamics, select_rows, RobotParams, State};
use crate::error::{Error, Result};
use crate::gp::GpStack;
use crate::pfl::pfl_torque;
use crate::planner::{check_terminal_box, ReferenceTrajectory, TerminalBox};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingGains {
    pub kp: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    pub ts: f64,
}

impl TrackingGains {
    pub fn diagonal(m: usize, kp: f64, kd: f64, ts: f64) -> Self {
        TrackingGains {
            kp: DMatrix::identity(m, m) * kp,
            kd: DMatrix::identity(m, m) * kd,
            ts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("K_P", &self.kp), ("K_D", &self.kd)] {
            if !g.is_square() || g.clone().cholesky().is_none() {
                return Err(Error::InvalidParams(format!("{name} must be positive definite")));
            }
        }
        if !(self.ts > 0.0) {
            return Err(Error::InvalidParams("control period must be positive".into()));
        }
        Ok(())
    }
}

/// `u = u_ref + K_P(q_ref − q) + K_D(q̇_ref − q̇) − ε_a`, all on the
/// active coordinates.
pub fn tracking_accel(
    u_ref: &DVector<f64>,
    q_ref_a: &DVector<f64>,
    qdot_ref_a: &DVector<f64>,
    q_a: &DVector<f64>,
    qdot_a: &DVector<f64>,
    eps_a: &DVector<f64>,
    gains: &TrackingGains,
) -> DVector<f64> {
    u_ref + &gains.kp * (q_ref_a - q_a) + &gains.kd * (qdot_ref_a - qdot_a) - eps_a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        DareOptions {
            tol: 1e-10,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// `K = (R + BᵀPB)⁻¹ BᵀPA`.
    pub k: DMatrix<f64>,
    /// Largest entry of `P − Ric(P)`, relative to `max(1, max|P|)`.
    pub residual: f64,
    pub iterations: usize,
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let pa = p * a;
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let k = s.cholesky()?.solve(&(&bt_p * a));
    let mut next = q + a.transpose() * &pa - (a.transpose() * p * b) * &k;
    // keep the iterate exactly symmetric
    next = (&next + next.transpose()) * 0.5;
    Some((next, k))
}

/// Discrete algebraic Riccati equation by fixed-point (value) iteration
/// from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &DareOptions,
) -> Result<DareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("inconsistent DARE matrices".into()));
    }
    let mut p = q.clone();
    for it in 1..=opts.max_iters {
        let Some((next, _)) = riccati_map(a, b, q, r, &p) else {
            return Err(Error::Singular("R + BᵀPB"));
        };
        let scale = next.amax().max(1.0);
        let delta = (&next - &p).amax() / scale;
        if !delta.is_finite() || scale > 1e15 {
            return Err(Error::RiccatiDivergence {
                iterations: it,
                residual: delta,
            });
        }
        p = next;
        if delta <= opts.tol {
            let (check, k) = riccati_map(a, b, q, r, &p).ok_or(Error::Singular("R + BᵀPB"))?;
            let residual = (&check - &p).amax() / p.amax().max(1.0);
            return Ok(DareSolution {
                p,
                k,
                residual,
                iterations: it,
            });
        }
    }
    let residual = riccati_map(a, b, q, r, &p)
        .map(|(c, _)| (&c - &p).amax() / p.amax().max(1.0))
        .unwrap_or(f64::INFINITY);
    Err(Error::RiccatiDivergence {
        iterations: opts.max_iters,
        residual,
    })
}

/// Continuous-time Jacobians of `ẋ = (q̇, M⁻¹(τ − n))` by central
/// differences; `τ` acts on the actuated joints.
pub fn linearize(params: &RobotParams, x: &State, tau: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = params.dofs();
    let m = params.n_actuated();
    let f = |xv: &DVector<f64>, t: &DVector<f64>| -> Result<DVector<f64>> {
        let s = State::from_vector(xv);
        let acc = forward_dynamics(params, &s, t)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&s.qdot);
        out.rows_mut(n, n).copy_from(&acc);
        Ok(out)
    };
    let x0 = x.to_vector();
    let h = 1e-6;
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        a.set_column(j, &((f(&xp, tau)? - f(&xm, tau)?) / (2.0 * h)));
    }
    let mut b = DMatrix::zeros(2 * n, m);
    for j in 0..m {
        let mut tp = tau.clone();
        let mut tm = tau.clone();
        tp[j] += h;
        tm[j] -= h;
        b.set_column(j, &((f(&x0, &tp)? - f(&x0, &tm)?) / (2.0 * h)));
    }
    Ok((a, b))
}

#[derive(Debug, Clone)]
pub struct BalanceController {
    pub k: DMatrix<f64>,
    pub goal: State,
    pub u_eq: DVector<f64>,
    pub terminal_box: TerminalBox,
    /// Euler-discretized nominal linearization, kept for diagnostics.
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
}

impl BalanceController {
    pub fn torque(&self, x: &State) -> DVector<f64> {
        &self.u_eq - &self.k * (x.to_vector() - self.goal.to_vector())
    }

    /// Spectral radius of `A_d − B_d K`.
    pub fn closed_loop_spectral_radius(&self) -> f64 {
        let cl = &self.a_d - &self.b_d * &self.k;
        cl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Designs the balancing LQR on the Euler-discretized nominal
/// linearization about `goal`.
pub fn lqr_design(
    nominal: &RobotParams,
    goal: &State,
    q_b: &DMatrix<f64>,
    r_b: &DMatrix<f64>,
    ts: f64,
    terminal_box: TerminalBox,
) -> Result<BalanceController> {
    nominal.validate()?;
    if goal.qdot.iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidParams("balancing goal must be at rest".into()));
    }
    let g = nominal.gravity_torque(&goal.q);
    let passive_load = select_rows(&g, &nominal.passive());
    if passive_load.amax() > 1e-9 * g.amax().max(1.0) {
        return Err(Error::InvalidParams(format!(
            "goal is not an equilibrium: passive gravity load {}",
            passive_load.amax()
        )));
    }
    let u_eq = select_rows(&g, &nominal.actuated);
    let (ac, bc) = linearize(nominal, goal, &u_eq)?;
    let dim = ac.nrows();
    let a_d = DMatrix::identity(dim, dim) + ac * ts;
    let b_d = bc * ts;
    let sol = solve_dare(&a_d, &b_d, q_b, r_b, &DareOptions::default())?;
    Ok(BalanceController {
        k: sol.k,
        goal: goal.clone(),
        u_eq,
        terminal_box,
        a_d,
        b_d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Tracking,
    Balancing,
}

/// Output of one supervisor step.
#[derive(Debug, Clone)]
pub struct ControlAction {
    pub mode: Mode,
    pub tau: DVector<f64>,
    /// Commanded active acceleration; `None` while balancing.
    pub u: Option<DVector<f64>>,
    pub eps_a: Option<DVector<f64>>,
}

/// Regressor input `(q, q̇, u)` of the active correction.
pub fn active_regressor_input(state: &State, u: &DVector<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(2 * state.dofs() + u.len());
    v.extend(state.q.iter());
    v.extend(state.qdot.iter());
    v.extend(u.iter());
    DVector::from_vec(v)
}

/// Latched tracking → balancing switch.
#[derive(Debug, Clone)]
pub struct Supervisor {
    mode: Mode,
    prev_u: DVector<f64>,
    switch_step: Option<usize>,
}

impl Supervisor {
    pub fn new(m: usize) -> Self {
        Supervisor {
            mode: Mode::Tracking,
            prev_u: DVector::zeros(m),
            switch_step: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn switch_step(&self) -> Option<usize> {
        self.switch_step
    }

    /// Computes the torque for control step `k`. In tracking the active
    /// correction is evaluated at the previous step's command.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        k: usize,
        state: &State,
        reference: &ReferenceTrajectory,
        eps_a: Option<&GpStack>,
        nominal: &RobotParams,
        gains: &TrackingGains,
        balance: &BalanceController,
    ) -> Result<ControlAction> {
        if self.mode == Mode::Tracking && check_terminal_box(state, &balance.goal, &balance.terminal_box) {
            self.mode = Mode::Balancing;
            self.switch_step = Some(k);
        }
        if self.mode == Mode::Balancing {
            return Ok(ControlAction {
                mode: Mode::Balancing,
                tau: balance.torque(state),
                u: None,
                eps_a: None,
            });
        }
        let act = &nominal.actuated;
        let ks = k.min(reference.q.len() - 1);
        let ku = k.min(reference.u.len() - 1);
        let eps = match eps_a {
            Some(gp) if !gp.is_empty() => gp.predict_mean(&active_regressor_input(state, &self.prev_u)),
            _ => DVector::zeros(act.len()),
        };
        let u_ref = if k < reference.u.len() {
            reference.u[ku].clone()
        } else {
            DVector::zeros(act.len())
        };
        let u = tracking_accel(
            &u_ref,
            &select_rows(&reference.q[ks], act),
            &select_rows(&reference.qdot[ks], act),
            &select_rows(&state.q, act),
            &select_rows(&state.qdot, act),
            &eps,
            gains,
        );
        let tau = pfl_torque(nominal, state, &u)?;
        self.prev_u = u.clone();
        Ok(ControlAction {
            mode: Mode::Tracking,
            tau,
            u: Some(u),
            eps_a: Some(eps),
        })
    }
}
