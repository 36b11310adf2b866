use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use underact::learnloop::{Ablation, IterationResult, Report, Session};

use crate::config::{ScenarioConfig, ECHO_FILE};
use crate::error::{CliError, Result};
use crate::output::{dataset_table, figure_table, reference_table, trajectory_table, write_atomic, write_json};

/// Command-line values that take precedence over the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<Ablation>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(k) = self.max_iters {
            cfg.run.max_iters = k;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.run.ablation = m;
        }
    }
}

pub struct RunOutcome {
    pub report: Report,
    pub results: Vec<IterationResult>,
    pub session: Session,
}

/// Runs a session to convergence or budget without writing anything.
pub fn execute(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    let mut session = Session::new(cfg.session_config()?)?;
    let (report, results) = session.run_until_converged(cfg.run.max_iters)?;
    Ok(RunOutcome {
        report,
        results,
        session,
    })
}

pub fn write_outcome(dir: &Path, cfg: &ScenarioConfig, out: &RunOutcome) -> Result<()> {
    write_atomic(&dir.join(ECHO_FILE), cfg.to_toml()?.as_bytes())?;
    write_json(&dir.join("report.json"), &out.report)?;
    for r in &out.results {
        trajectory_table(r).write(&dir.join(format!("iter{}_trajectory.csv", r.index)))?;
        reference_table(r).write(&dir.join(format!("iter{}_reference.csv", r.index)))?;
    }
    dataset_table(out.session.eps_a()).write(&dir.join("datasets_a.csv"))?;
    dataset_table(out.session.eps_p()).write(&dir.join("datasets_p.csv"))?;
    Ok(())
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    let out = execute(cfg)?;
    write_outcome(&cfg.output_dir, cfg, &out)?;
    Ok(out)
}

/// The two no-learning modes and the frozen-regressor mode.
pub const ABLATIONS: [Ablation; 3] = [
    Ablation::NominalPlanTrueControl,
    Ablation::TruePlanNominalControl,
    Ablation::FrozenRegressors,
];

pub fn mode_slug(m: Ablation) -> &'static str {
    match m {
        Ablation::Learning => "learning",
        Ablation::NominalPlanTrueControl => "nominal-plan-true-control",
        Ablation::TruePlanNominalControl => "true-plan-nominal-control",
        Ablation::FrozenRegressors => "frozen-regressors",
    }
}

/// Runs each mode into its own subdirectory of the output directory.
pub fn ablate(cfg: &ScenarioConfig, modes: &[Ablation]) -> Result<Vec<(Ablation, RunOutcome)>> {
    let mut all = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut c = cfg.clone();
        c.run.ablation = mode;
        c.output_dir = cfg.output_dir.join(mode_slug(mode));
        let out = run(&c)?;
        all.push((mode, out));
    }
    Ok(all)
}

/// Tracking RMSE per joint: a run without learning, then each learning
/// iteration.
#[derive(Debug, Clone)]
pub struct RmseColumns {
    pub scenario: String,
    pub without_learning: Vec<f64>,
    pub iterations: Vec<Vec<f64>>,
}

pub fn rmse_columns(cfg: &ScenarioConfig) -> Result<RmseColumns> {
    let mut base = cfg.clone();
    base.run.ablation = Ablation::FrozenRegressors;
    base.run.max_iters = 1;
    let frozen = execute(&base)?;
    let mut learn = cfg.clone();
    learn.run.ablation = Ablation::Learning;
    let learned = execute(&learn)?;
    Ok(RmseColumns {
        scenario: cfg.name.clone(),
        without_learning: frozen.report.iterations[0].rmse.clone(),
        iterations: learned.report.iterations.iter().map(|s| s.rmse.clone()).collect(),
    })
}

/// Plain-text table with one row per iteration and one column per joint
/// and scenario.
pub fn format_rmse_table(cols: &[RmseColumns]) -> String {
    let rows = 1 + cols.iter().map(|c| c.iterations.len()).max().unwrap_or(0);
    let mut header = vec!["".to_string()];
    for c in cols {
        for j in 0..c.without_learning.len() {
            header.push(format!("{} q{}", c.scenario, j + 1));
        }
    }
    let mut lines = vec![header];
    for r in 0..rows {
        let mut line = vec![if r == 0 {
            "without learning".to_string()
        } else {
            format!("iteration {r}")
        }];
        for c in cols {
            let vals = if r == 0 {
                Some(&c.without_learning)
            } else {
                c.iterations.get(r - 1)
            };
            for j in 0..c.without_learning.len() {
                line.push(match vals {
                    Some(v) => format!("{:.3}", v[j]),
                    None => "-".into(),
                });
            }
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// Writes the plotting tables: the two no-learning runs side by side, and
/// the learning iterations preceded by a run without learning
/// (iteration 0).
pub fn export_plots(cfg: &ScenarioConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let single = |mode: Ablation| -> Result<RunOutcome> {
        let mut c = cfg.clone();
        c.run.ablation = mode;
        c.run.max_iters = 1;
        execute(&c)
    };
    let npt = single(Ablation::NominalPlanTrueControl)?;
    let tpn = single(Ablation::TruePlanNominalControl)?;
    let frozen = single(Ablation::FrozenRegressors)?;
    let mut learn_cfg = cfg.clone();
    learn_cfg.run.ablation = Ablation::Learning;
    let learned = execute(&learn_cfg)?;

    let first = |o: &RunOutcome| -> Result<IterationResult> {
        o.results
            .first()
            .cloned()
            .ok_or_else(|| CliError::Config("run produced no iterations".into()))
    };
    let (a, b) = (first(&npt)?, first(&tpn)?);
    let ablation = figure_table(
        "run",
        &[
            (mode_slug(Ablation::NominalPlanTrueControl).into(), &a),
            (mode_slug(Ablation::TruePlanNominalControl).into(), &b),
        ],
    );
    let f0 = first(&frozen)?;
    let mut runs: Vec<(String, &IterationResult)> = vec![("0".into(), &f0)];
    runs.extend(learned.results.iter().map(|r| (r.index.to_string(), r)));
    let iterations = figure_table("iteration", &runs);

    let pa = dir.join("fig_ablation.csv");
    let pi = dir.join("fig_iterations.csv");
    ablation.write(&pa)?;
    iterations.write(&pi)?;
    let cols = RmseColumns {
        scenario: cfg.name.clone(),
        without_learning: f0.summary.rmse.clone(),
        iterations: learned.report.iterations.iter().map(|s| s.rmse.clone()).collect(),
    };
    let pt = dir.join("rmse_table.txt");
    write_atomic(&pt, format_rmse_table(&[cols]).as_bytes())?;
    Ok(vec![pa, pi, pt])
}
