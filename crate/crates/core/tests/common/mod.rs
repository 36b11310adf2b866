#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use underact::controller::TrackingGains;
use underact::dynamics::{perturb, PerturbationSpec, RobotParams, State};
use underact::learnloop::{AccelSource, Ablation, LearningOptions, SessionConfig, SimOptions};
use underact::planner::{Integrator, OcpSpec, SolverOptions};

pub fn swing_up_spec() -> OcpSpec {
    OcpSpec::with_defaults(2, 1, 160, 0.01, State::at_rest(&[0.0, 0.0]), State::at_rest(&[PI, 0.0]))
}

/// The swing-up scenario with the severe nominal model and shipped
/// defaults.
pub fn swing_up_config() -> SessionConfig {
    let truth = RobotParams::pendubot_default();
    let nominal = perturb(&truth, &PerturbationSpec::severe_nominal(2)).unwrap();
    let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
    SessionConfig {
        truth,
        nominal,
        spec: swing_up_spec(),
        solver: SolverOptions::default(),
        gains: TrackingGains::diagonal(1, 50.0, 20.0, 0.01),
        lqr_q: diag(&[10.0, 10.0, 1.0, 1.0]),
        lqr_r: diag(&[1.0]),
        learning: LearningOptions {
            accel_source: AccelSource::Interval,
            ..LearningOptions::default()
        },
        sim: SimOptions::default(),
        ablation: Ablation::Learning,
        integrator: Integrator::HeldAcceleration,
        planning_margin: 0.8,
    }
}
