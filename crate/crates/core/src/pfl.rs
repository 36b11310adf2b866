//! Collocated partial feedback linearization on the nominal model and the
//! residuals that expose what the nominal model gets wrong.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{evaluate, select_block, select_rows, RobotParams, State};
use crate::error::{Error, Result};

/// `τ = B̂ u + η̂` linearizes the nominal actuated subsystem to `q̈_a = u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PflTerms {
    /// Schur complement `M̂_aa − M̂_ap M̂_pp⁻¹ M̂_pa`.
    pub b_hat: DMatrix<f64>,
    /// `n̂_a − M̂_ap M̂_pp⁻¹ n̂_p`.
    pub eta_hat: DVector<f64>,
}

pub fn pfl_terms(nominal: &RobotParams, state: &State) -> Result<PflTerms> {
    let d = evaluate(nominal, state)?;
    let pp_inv_pa = d.solve_pp_matrix(&d.m_pa)?;
    let pp_inv_np = d.solve_pp(&d.n_p)?;
    Ok(PflTerms {
        b_hat: &d.m_aa - &d.m_ap * pp_inv_pa,
        eta_hat: &d.n_a - &d.m_ap * pp_inv_np,
    })
}

pub fn pfl_torque(nominal: &RobotParams, state: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != nominal.n_actuated() {
        return Err(Error::Dimension(format!(
            "u has {} entries, robot has {} actuators",
            u.len(),
            nominal.n_actuated()
        )));
    }
    let t = pfl_terms(nominal, state)?;
    Ok(&t.b_hat * u + t.eta_hat)
}

/// Realized active perturbation sample `q̈_a − u`.
pub fn residual_active(u: &DVector<f64>, qddot_a: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != qddot_a.len() {
        return Err(Error::Dimension(format!(
            "u has {} entries, q̈_a has {}",
            u.len(),
            qddot_a.len()
        )));
    }
    Ok(qddot_a - u)
}

/// Passive acceleration predicted by the nominal model, `−M̂_pp⁻¹(n̂_p + M̂_pa q̈_a)`.
pub fn nominal_passive_acceleration(
    nominal: &RobotParams,
    state: &State,
    qddot_a: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = evaluate(nominal, state)?;
    d.solve_pp(&(&d.n_p + &d.m_pa * qddot_a)).map(|v| -v)
}

/// Realized passive perturbation sample `q̈_p + M̂_pp⁻¹(n̂_p + M̂_pa q̈_a)`.
pub fn residual_passive(
    nominal: &RobotParams,
    state: &State,
    qddot_a: &DVector<f64>,
    qddot_p: &DVector<f64>,
) -> Result<DVector<f64>> {
    if qddot_a.len() != nominal.n_actuated() || qddot_p.len() != nominal.n_passive() {
        return Err(Error::Dimension(format!(
            "accelerations ({}, {}) do not match partition ({}, {})",
            qddot_a.len(),
            qddot_p.len(),
            nominal.n_actuated(),
            nominal.n_passive()
        )));
    }
    Ok(qddot_p - nominal_passive_acceleration(nominal, state, qddot_a)?)
}

/// Nominal passive acceleration and its Jacobians with respect to `q`, `q̇`
/// and the active acceleration.
#[derive(Debug, Clone)]
pub struct PassiveAccelJacobian {
    pub value: DVector<f64>,
    pub d_q: DMatrix<f64>,
    pub d_qdot: DMatrix<f64>,
    pub d_active: DMatrix<f64>,
}

pub fn nominal_passive_acceleration_jacobian(
    nominal: &RobotParams,
    state: &State,
    qddot_a: &DVector<f64>,
) -> Result<PassiveAccelJacobian> {
    let d = evaluate(nominal, state)?;
    let act = &nominal.actuated;
    let pas = nominal.passive();
    let n = nominal.dofs();
    let value = -d.solve_pp(&(&d.n_p + &d.m_pa * qddot_a))?;
    let partials = nominal.partials(&state.q, &state.qdot);

    let np = pas.len();
    // M_pp ∂φ/∂z = −(∂r/∂z + ∂M_pp/∂z φ), r = n_p + M_pa q̈_a
    let mut rhs_q = DMatrix::zeros(np, n);
    for j in 0..n {
        let dm = &partials.dm_dq[j];
        let col = select_rows(&partials.dn_dq.column(j).into_owned(), &pas)
            + select_block(dm, &pas, act) * qddot_a
            + select_block(dm, &pas, &pas) * &value;
        rhs_q.set_column(j, &col);
    }
    let rhs_qdot = select_block(&partials.dn_dqdot, &pas, &(0..n).collect::<Vec<_>>());
    Ok(PassiveAccelJacobian {
        value,
        d_q: -d.solve_pp_matrix(&rhs_q)?,
        d_qdot: -d.solve_pp_matrix(&rhs_qdot)?,
        d_active: -d.solve_pp_matrix(&d.m_pa)?,
    })
}
