//! Scenario files: TOML with one table per block.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use underact::controller::TrackingGains;
use underact::dynamics::{perturb, PerturbationSpec, RobotParams, State};
use underact::learnloop::{Ablation, LearningOptions, SessionConfig, SimOptions};
use underact::planner::{Integrator, OcpSpec, SolverOptions, TerminalBox};

use crate::error::{CliError, Result};

/// Blocks that must appear in every scenario file.
pub const REQUIRED_BLOCKS: [&str; 4] = ["robot", "ocp", "controller", "run"];

/// Name of the effective-config echo written next to the outputs.
pub const ECHO_FILE: &str = "effective_config.toml";

const TIMING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// The simulated plant.
    pub robot: RobotParams,
    /// Model used by planner and controller. Mutually exclusive with
    /// `perturbation`; when both are absent the model is exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<RobotParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    pub ocp: OcpConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub learning: LearningOptions,
    pub run: RunConfig,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    /// Horizon length `T` in seconds.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Number of steps `N`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Sampling interval `Ts` in seconds.
    #[serde(default)]
    pub ts: Option<f64>,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    /// Diagonals of the weight matrices.
    #[serde(default)]
    pub q_weight: Option<Vec<f64>>,
    #[serde(default)]
    pub terminal_weight: Option<Vec<f64>>,
    #[serde(default)]
    pub r_weight: Option<Vec<f64>>,
    #[serde(default)]
    pub velocity_bounds: Option<Vec<f64>>,
    #[serde(default)]
    pub input_bounds: Option<Vec<f64>>,
    #[serde(default)]
    pub terminal_box: Option<TerminalBox>,
    #[serde(default)]
    pub planning_margin: Option<f64>,
    #[serde(default)]
    pub integrator: Option<Integrator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Diagonal PD gains on the active joints.
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    /// Diagonals of the LQR weights.
    pub lqr_q: Vec<f64>,
    pub lqr_r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sensor_noise: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_divergence")]
    pub divergence_speed: f64,
    #[serde(default = "default_hold")]
    pub hold_time: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_max_iters() -> usize {
    5
}

fn default_substeps() -> usize {
    SimOptions::default().substeps
}

fn default_divergence() -> f64 {
    SimOptions::default().divergence_speed
}

fn default_hold() -> f64 {
    SimOptions::default().hold_time
}

/// Reads, validates and normalizes a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let missing: Vec<&str> = REQUIRED_BLOCKS
        .iter()
        .copied()
        .filter(|b| !table.contains_key(*b))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "missing required blocks: {} (required: {})",
            missing.join(", "),
            REQUIRED_BLOCKS.join(", ")
        )));
    }
    let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.normalize()?;
    cfg.session_config()?;
    Ok(cfg)
}

impl ScenarioConfig {
    /// Fills every optional field with its effective value and checks the
    /// timing triple.
    pub fn normalize(&mut self) -> Result<()> {
        let n = self.robot.dofs();
        let m = self.robot.n_actuated();
        let o = &mut self.ocp;
        let (t, steps, ts) = resolve_timing(o.horizon, o.steps, o.ts)?;
        o.horizon = Some(t);
        o.steps = Some(steps);
        o.ts = Some(ts);
        if o.start.len() != n || o.goal.len() != n {
            return Err(CliError::Config(format!(
                "ocp.start and ocp.goal need {n} joint angles, got {} and {}",
                o.start.len(),
                o.goal.len()
            )));
        }
        let d = OcpSpec::with_defaults(n, m, steps, ts, State::at_rest(&o.start), State::at_rest(&o.goal));
        let diag = |w: &DMatrix<f64>| w.diagonal().iter().copied().collect::<Vec<_>>();
        o.q_weight.get_or_insert_with(|| diag(&d.q_weight));
        o.terminal_weight.get_or_insert_with(|| diag(&d.terminal_weight));
        o.r_weight.get_or_insert_with(|| diag(&d.r_weight));
        o.velocity_bounds.get_or_insert_with(|| d.velocity_bounds.clone());
        o.input_bounds.get_or_insert_with(|| d.input_bounds.clone());
        o.terminal_box.get_or_insert(d.terminal_box);
        o.planning_margin.get_or_insert(1.0);
        o.integrator.get_or_insert(Integrator::default());
        if self.nominal.is_some() && self.perturbation.is_some() {
            return Err(CliError::Config(
                "give either a nominal block or a perturbation block, not both".into(),
            ));
        }
        Ok(())
    }

    pub fn nominal_params(&self) -> Result<RobotParams> {
        Ok(match (&self.nominal, &self.perturbation) {
            (Some(p), _) => p.clone(),
            (None, Some(spec)) => perturb(&self.robot, spec)?,
            (None, None) => self.robot.clone(),
        })
    }

    pub fn ocp_spec(&self) -> Result<OcpSpec> {
        let o = &self.ocp;
        let need = |v: &Option<Vec<f64>>, name: &str| {
            v.clone()
                .ok_or_else(|| CliError::Config(format!("ocp.{name} unresolved; call normalize first")))
        };
        let (Some(steps), Some(ts)) = (o.steps, o.ts) else {
            return Err(CliError::Config("ocp timing unresolved; call normalize first".into()));
        };
        let diag = |v: Vec<f64>, name: &str, dim: usize| -> Result<DMatrix<f64>> {
            if v.len() != dim {
                return Err(CliError::Config(format!("ocp.{name} needs {dim} entries, got {}", v.len())));
            }
            Ok(DMatrix::from_diagonal(&DVector::from_vec(v)))
        };
        let n = self.robot.dofs();
        let m = self.robot.n_actuated();
        let spec = OcpSpec {
            horizon: steps,
            ts,
            start: State::at_rest(&o.start),
            goal: State::at_rest(&o.goal),
            q_weight: diag(need(&o.q_weight, "q_weight")?, "q_weight", 2 * n)?,
            terminal_weight: diag(need(&o.terminal_weight, "terminal_weight")?, "terminal_weight", 2 * n)?,
            r_weight: diag(need(&o.r_weight, "r_weight")?, "r_weight", m)?,
            velocity_bounds: need(&o.velocity_bounds, "velocity_bounds")?,
            input_bounds: need(&o.input_bounds, "input_bounds")?,
            terminal_box: o.terminal_box.unwrap_or_default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds the library-side configuration.
    pub fn session_config(&self) -> Result<SessionConfig> {
        self.robot.validate()?;
        let nominal = self.nominal_params()?;
        let spec = self.ocp_spec()?;
        let m = self.robot.n_actuated();
        let c = &self.controller;
        for (name, v, dim) in [
            ("kp", &c.kp, m),
            ("kd", &c.kd, m),
            ("lqr_q", &c.lqr_q, 2 * self.robot.dofs()),
            ("lqr_r", &c.lqr_r, m),
        ] {
            if v.len() != dim {
                return Err(CliError::Config(format!("controller.{name} needs {dim} entries, got {}", v.len())));
            }
        }
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let gains = TrackingGains {
            kp: d(&c.kp),
            kd: d(&c.kd),
            ts: spec.ts,
        };
        gains.validate()?;
        let r = &self.run;
        Ok(SessionConfig {
            truth: self.robot.clone(),
            nominal,
            spec,
            solver: self.solver.clone(),
            gains,
            lqr_q: d(&c.lqr_q),
            lqr_r: d(&c.lqr_r),
            learning: self.learning.clone(),
            sim: SimOptions {
                substeps: r.substeps,
                sensor_noise: r.sensor_noise,
                divergence_speed: r.divergence_speed,
                hold_time: r.hold_time,
                seed: r.seed,
            },
            ablation: r.ablation,
            integrator: self.ocp.integrator.unwrap_or_default(),
            planning_margin: self.ocp.planning_margin.unwrap_or(1.0),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Completes `(T, N, Ts)` from any two of them; all three must agree.
fn resolve_timing(t: Option<f64>, steps: Option<usize>, ts: Option<f64>) -> Result<(f64, usize, f64)> {
    let bad = |msg: String| Err(CliError::Config(msg));
    let (t, steps, ts) = match (t, steps, ts) {
        (Some(t), Some(n), Some(ts)) => {
            if (t - n as f64 * ts).abs() > TIMING_TOL {
                return bad(format!("ocp.horizon = {t} but ocp.steps * ocp.ts = {}", n as f64 * ts));
            }
            (t, n, ts)
        }
        (Some(t), Some(n), None) => (t, n, t / n as f64),
        (t, None, ts) => {
            let ts = ts.unwrap_or(0.01);
            let Some(t) = t else {
                return bad("ocp needs two of horizon, steps, ts".into());
            };
            let n = (t / ts).round();
            if (t - n * ts).abs() > TIMING_TOL {
                return bad(format!("ocp.horizon = {t} is not a multiple of ocp.ts = {ts}"));
            }
            (t, n as usize, ts)
        }
        (None, Some(n), ts) => {
            let ts = ts.unwrap_or(0.01);
            (n as f64 * ts, n, ts)
        }
    };
    if !(ts > 0.0 && t > 0.0) || steps < 2 {
        return bad(format!("ocp timing T = {t}, N = {steps}, Ts = {ts} is invalid"));
    }
    Ok((t, steps, ts))
}
