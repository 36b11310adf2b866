//! Rigid-body dynamics of a planar two-link chain moving in the vertical
//! plane, partitioned into actuated and passive coordinates.
//!
//! Joint angles are relative (the second joint is measured from the first
//! link) and `q = (0, 0)` is the hanging configuration. Angles are kept as
//! unwrapped reals. The nonlinear vector `n` collects Coriolis/centrifugal,
//! gravity and viscous friction terms, so that `M(q) q̈ + n(q, q̇) = S τ`
//! with `S` selecting the actuated rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// Distance of the center of mass from the joint axis, m.
    pub com: f64,
    /// Barycentral inertia, kg m^2.
    pub inertia: f64,
    /// Viscous friction coefficient at the joint, N m s / rad.
    #[serde(default)]
    pub friction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    pub links: Vec<LinkParams>,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Indices of the actuated joints. `[0]` is the Pendubot, `[1]` the Acrobot.
    pub actuated: Vec<usize>,
}

fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}

impl RobotParams {
    /// Shipped default plant (Pendubot, shoulder actuated).
    pub fn pendubot_default() -> Self {
        RobotParams {
            links: vec![
                LinkParams {
                    mass: 0.8,
                    length: 0.3,
                    com: 0.15,
                    inertia: 0.006,
                    friction: 0.02,
                },
                LinkParams {
                    mass: 0.3,
                    length: 0.45,
                    com: 0.18,
                    inertia: 0.005,
                    friction: 0.002,
                },
            ],
            gravity: DEFAULT_GRAVITY,
            actuated: vec![0],
        }
    }

    pub fn dofs(&self) -> usize {
        self.links.len()
    }

    pub fn n_actuated(&self) -> usize {
        self.actuated.len()
    }

    pub fn n_passive(&self) -> usize {
        self.dofs() - self.n_actuated()
    }

    pub fn passive(&self) -> Vec<usize> {
        (0..self.dofs()).filter(|i| !self.actuated.contains(i)).collect()
    }

    pub fn without_friction(&self) -> Self {
        let mut p = self.clone();
        for link in &mut p.links {
            link.friction = 0.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.len() != 2 {
            return Err(Error::InvalidParams(format!(
                "only planar 2R chains are modeled, got {} links",
                self.links.len()
            )));
        }
        let n = self.dofs();
        let m = self.n_actuated();
        if m == 0 || m >= n {
            return Err(Error::InvalidParams(format!(
                "need 0 < actuated ({m}) < dofs ({n})"
            )));
        }
        let mut seen = vec![false; n];
        for &i in &self.actuated {
            if i >= n || seen[i] {
                return Err(Error::InvalidParams(format!(
                    "bad actuated index set {:?}",
                    self.actuated
                )));
            }
            seen[i] = true;
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::InvalidParams("gravity must be finite and >= 0".into()));
        }
        for (i, l) in self.links.iter().enumerate() {
            let ok = l.mass > 0.0
                && l.length > 0.0
                && l.com >= 0.0
                && l.com <= l.length
                && l.inertia >= 0.0
                && l.friction >= 0.0
                && [l.mass, l.length, l.com, l.inertia, l.friction]
                    .iter()
                    .all(|v| v.is_finite());
            if !ok {
                return Err(Error::InvalidParams(format!("link {} violates {:?}", i + 1, l)));
            }
        }
        Ok(())
    }

    /// Inertia matrix `M(q)`.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let [l1, l2] = self.two_links();
        let c2 = q[1].cos();
        let h = l2.mass * l1.length * l2.com;
        let m22 = l2.mass * l2.com * l2.com + l2.inertia;
        let m12 = m22 + h * c2;
        let m11 = l1.mass * l1.com * l1.com
            + l1.inertia
            + l2.mass * (l1.length * l1.length + l2.com * l2.com)
            + l2.inertia
            + 2.0 * h * c2;
        DMatrix::from_row_slice(2, 2, &[m11, m12, m12, m22])
    }

    /// Nonlinear terms `n(q, q̇)`: Coriolis/centrifugal, gravity, friction.
    pub fn bias(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
        let [l1, l2] = self.two_links();
        let g = self.gravity;
        let h = l2.mass * l1.length * l2.com;
        let s2 = q[1].sin();
        let s1 = q[0].sin();
        let s12 = (q[0] + q[1]).sin();
        let (w1, w2) = (qdot[0], qdot[1]);
        let g12 = g * l2.mass * l2.com * s12;
        let n1 = -h * s2 * (2.0 * w1 * w2 + w2 * w2)
            + g * (l1.mass * l1.com + l2.mass * l1.length) * s1
            + g12
            + l1.friction * w1;
        let n2 = h * s2 * w1 * w1 + g12 + l2.friction * w2;
        DVector::from_vec(vec![n1, n2])
    }

    /// Gravity torques only (`n` at zero velocity without friction).
    pub fn gravity_torque(&self, q: &DVector<f64>) -> DVector<f64> {
        self.bias(q, &DVector::zeros(2))
    }

    /// Partial derivatives of `M` and `n` with respect to the state.
    pub fn partials(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DynamicsPartials {
        let [l1, l2] = self.two_links();
        let g = self.gravity;
        let h = l2.mass * l1.length * l2.com;
        let (s2, c2) = q[1].sin_cos();
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        let (w1, w2) = (qdot[0], qdot[1]);
        let g12 = g * l2.mass * l2.com * c12;

        let dm_dq1 = DMatrix::zeros(2, 2);
        let dm_dq2 = DMatrix::from_row_slice(2, 2, &[-2.0 * h * s2, -h * s2, -h * s2, 0.0]);

        let dn_dq = DMatrix::from_row_slice(
            2,
            2,
            &[
                g * (l1.mass * l1.com + l2.mass * l1.length) * c1 + g12,
                -h * c2 * (2.0 * w1 * w2 + w2 * w2) + g12,
                g12,
                h * c2 * w1 * w1 + g12,
            ],
        );
        let dn_dqdot = DMatrix::from_row_slice(
            2,
            2,
            &[
                -2.0 * h * s2 * w2 + l1.friction,
                -2.0 * h * s2 * (w1 + w2),
                2.0 * h * s2 * w1,
                l2.friction,
            ],
        );
        DynamicsPartials {
            dm_dq: vec![dm_dq1, dm_dq2],
            dn_dq,
            dn_dqdot,
        }
    }

    fn two_links(&self) -> [LinkParams; 2] {
        [self.links[0], self.links[1]]
    }
}

/// `dm_dq[j]` is `∂M/∂q_j`; `dn_dq[(i, j)]` is `∂n_i/∂q_j`.
#[derive(Debug, Clone)]
pub struct DynamicsPartials {
    pub dm_dq: Vec<DMatrix<f64>>,
    pub dn_dq: DMatrix<f64>,
    pub dn_dqdot: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl State {
    pub fn new(q: &[f64], qdot: &[f64]) -> Self {
        State {
            q: DVector::from_column_slice(q),
            qdot: DVector::from_column_slice(qdot),
        }
    }

    pub fn at_rest(q: &[f64]) -> Self {
        State {
            q: DVector::from_column_slice(q),
            qdot: DVector::zeros(q.len()),
        }
    }

    pub fn dofs(&self) -> usize {
        self.q.len()
    }

    /// Stacked `(q, q̇)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.q.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qdot[i - n] })
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        State {
            q: x.rows(0, n).into_owned(),
            qdot: x.rows(n, n).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    fn check(&self, params: &RobotParams) -> Result<()> {
        let n = params.dofs();
        if self.q.len() != n || self.qdot.len() != n {
            return Err(Error::Dimension(format!(
                "state has ({}, {}) entries, robot has {n} dofs",
                self.q.len(),
                self.qdot.len()
            )));
        }
        Ok(())
    }
}

/// Inertia matrix and nonlinear terms split by actuation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDynamics {
    pub m_aa: DMatrix<f64>,
    pub m_ap: DMatrix<f64>,
    pub m_pa: DMatrix<f64>,
    pub m_pp: DMatrix<f64>,
    pub n_a: DVector<f64>,
    pub n_p: DVector<f64>,
}

impl PartitionedDynamics {
    /// Solves `M_pp x = b`.
    pub fn solve_pp(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.m_pp
            .clone()
            .lu()
            .solve(b)
            .ok_or(Error::Singular("passive inertia block M_pp"))
    }

    pub fn solve_pp_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.m_pp
            .clone()
            .lu()
            .solve(b)
            .ok_or(Error::Singular("passive inertia block M_pp"))
    }
}

pub(crate) fn select_rows(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Evaluates the partitioned dynamics at `state`.
pub fn evaluate(params: &RobotParams, state: &State) -> Result<PartitionedDynamics> {
    state.check(params)?;
    let m = params.mass_matrix(&state.q);
    let n = params.bias(&state.q, &state.qdot);
    let act = &params.actuated;
    let pas = params.passive();
    let out = PartitionedDynamics {
        m_aa: select_block(&m, act, act),
        m_ap: select_block(&m, act, &pas),
        m_pa: select_block(&m, &pas, act),
        m_pp: select_block(&m, &pas, &pas),
        n_a: select_rows(&n, act),
        n_p: select_rows(&n, &pas),
    };
    if out.m_pp.clone().lu().determinant().abs() <= f64::EPSILON * out.m_pp.norm().max(1e-300) {
        return Err(Error::Singular("passive inertia block M_pp"));
    }
    Ok(out)
}

/// Generalized accelerations of the plant under actuated torques `tau`.
pub fn forward_dynamics(params: &RobotParams, state: &State, tau: &DVector<f64>) -> Result<DVector<f64>> {
    state.check(params)?;
    if tau.len() != params.n_actuated() {
        return Err(Error::Dimension(format!(
            "tau has {} entries, robot has {} actuators",
            tau.len(),
            params.n_actuated()
        )));
    }
    let m = params.mass_matrix(&state.q);
    let mut rhs = -params.bias(&state.q, &state.qdot);
    for (k, &i) in params.actuated.iter().enumerate() {
        rhs[i] += tau[k];
    }
    m.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(Error::Singular("inertia matrix M"))
}

/// Kinetic plus gravitational potential energy, zero at the hanging rest state.
pub fn total_energy(params: &RobotParams, state: &State) -> f64 {
    let m = params.mass_matrix(&state.q);
    let kinetic = 0.5 * state.qdot.dot(&(&m * &state.qdot));
    let [l1, l2] = params.two_links();
    let g = params.gravity;
    let potential = g * (l1.mass * l1.com + l2.mass * l1.length) * (1.0 - state.q[0].cos())
        + g * l2.mass * l2.com * (1.0 - (state.q[0] + state.q[1]).cos());
    kinetic + potential
}

/// One classical Runge-Kutta step of the plant with torque held constant.
pub fn rk4_step(params: &RobotParams, state: &State, tau: &DVector<f64>, dt: f64) -> Result<State> {
    let deriv = |s: &State| -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((s.qdot.clone(), forward_dynamics(params, s, tau)?))
    };
    let shifted = |k: &(DVector<f64>, DVector<f64>), h: f64| State {
        q: &state.q + &k.0 * h,
        qdot: &state.qdot + &k.1 * h,
    };
    let k1 = deriv(state)?;
    let k2 = deriv(&shifted(&k1, 0.5 * dt))?;
    let k3 = deriv(&shifted(&k2, 0.5 * dt))?;
    let k4 = deriv(&shifted(&k3, dt))?;
    Ok(State {
        q: &state.q + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * (dt / 6.0),
        qdot: &state.qdot + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * (dt / 6.0),
    })
}

/// How barycentral inertias follow a change of COM distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InertiaRule {
    /// `I' = I (a'/a)^2`.
    #[default]
    ComRatioSquared,
    Unchanged,
}

/// Multiplicative factors applied per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub mass_factor: Vec<f64>,
    pub com_factor: Vec<f64>,
    pub friction_factor: Vec<f64>,
    #[serde(default)]
    pub inertia_rule: InertiaRule,
}

impl PerturbationSpec {
    pub fn identity(links: usize) -> Self {
        PerturbationSpec {
            mass_factor: vec![1.0; links],
            com_factor: vec![1.0; links],
            friction_factor: vec![1.0; links],
            inertia_rule: InertiaRule::ComRatioSquared,
        }
    }

    /// +30% masses, -30% COM distances, friction dropped from the model.
    pub fn severe_nominal(links: usize) -> Self {
        PerturbationSpec {
            mass_factor: vec![1.3; links],
            com_factor: vec![0.7; links],
            friction_factor: vec![0.0; links],
            inertia_rule: InertiaRule::ComRatioSquared,
        }
    }
}

pub fn perturb(nominal: &RobotParams, spec: &PerturbationSpec) -> Result<RobotParams> {
    let n = nominal.dofs();
    if spec.mass_factor.len() != n || spec.com_factor.len() != n || spec.friction_factor.len() != n {
        return Err(Error::Dimension(format!("perturbation factors must have {n} entries")));
    }
    let mut out = nominal.clone();
    for (i, link) in out.links.iter_mut().enumerate() {
        let (fm, fa, fb) = (spec.mass_factor[i], spec.com_factor[i], spec.friction_factor[i]);
        if !(fm > 0.0 && fa > 0.0 && fb >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "link {} factors (mass {fm}, com {fa}, friction {fb}) give non-positive parameters",
                i + 1
            )));
        }
        link.mass *= fm;
        link.com *= fa;
        link.friction *= fb;
        if spec.inertia_rule == InertiaRule::ComRatioSquared {
            link.inertia *= fa * fa;
        }
    }
    out.validate()?;
    Ok(out)
}
