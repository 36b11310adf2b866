use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use underact::learnloop::Ablation;
use underact_cli::commands::{self, mode_slug, Overrides, ABLATIONS};
use underact_cli::config::{parse_config, ScenarioConfig};
use underact_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "underact", version, about = "Iterative planning, control and learning for underactuated robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterate plan, execute and learn until the goal is held.
    Run(Common),
    /// Run the modes without learning (all three unless --mode is given).
    Ablate(Common),
    /// Print tracking RMSE per iteration, with a run without learning first.
    RmseTable {
        /// One or more scenario files; each adds a column group.
        configs: Vec<PathBuf>,
        #[arg(long = "config")]
        config_flag: Vec<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write plotting tables for the ablation and the learning iterations.
    ExportPlots(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (same as --config).
    config: Option<PathBuf>,
    #[arg(long = "config")]
    config_flag: Option<PathBuf>,
    /// Output directory, overriding the scenario file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// learning, nominal-plan-true-control, true-plan-nominal-control or
    /// frozen-regressors.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Ablation>,
}

fn parse_mode(s: &str) -> std::result::Result<Ablation, String> {
    [Ablation::Learning]
        .into_iter()
        .chain(ABLATIONS)
        .find(|m| mode_slug(*m) == s)
        .ok_or_else(|| format!("unknown mode `{s}`"))
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let path = self
            .config_flag
            .as_ref()
            .or(self.config.as_ref())
            .ok_or_else(|| CliError::Config("no scenario file given".into()))?;
        let mut cfg = parse_config(path)?;
        Overrides {
            out: self.out.clone(),
            max_iters: self.max_iters,
            seed: self.seed,
            mode: self.mode,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

fn summary_line(label: &str, report: &underact::learnloop::Report) -> String {
    let last = report.iterations.last();
    format!(
        "{label}: converged={} iterations={} switch_time={} terminal_box_ratio={}",
        report.converged,
        report.iterations_used,
        last.and_then(|s| s.switch_time)
            .map(|t| format!("{t:.2}"))
            .unwrap_or_else(|| "-".into()),
        last.map(|s| format!("{:.2}", s.terminal_box_ratio)).unwrap_or_else(|| "-".into())
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = commands::run(&cfg)?;
            println!("{}", summary_line(&cfg.name, &out.report));
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let modes: Vec<Ablation> = match c.mode {
                Some(m) => vec![m],
                None => ABLATIONS.to_vec(),
            };
            for (mode, out) in commands::ablate(&cfg, &modes)? {
                println!("{}", summary_line(mode_slug(mode), &out.report));
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::RmseTable {
            configs,
            config_flag,
            max_iters,
            seed,
        } => {
            let paths: Vec<PathBuf> = configs.into_iter().chain(config_flag).collect();
            if paths.is_empty() {
                return Err(CliError::Config("no scenario file given".into()));
            }
            let mut cols = Vec::new();
            for p in &paths {
                let mut cfg = parse_config(p)?;
                Overrides {
                    max_iters,
                    seed,
                    ..Default::default()
                }
                .apply(&mut cfg);
                cols.push(commands::rmse_columns(&cfg)?);
            }
            print!("{}", commands::format_rmse_table(&cols));
        }
        Command::ExportPlots(c) => {
            let cfg = c.load()?;
            for p in commands::export_plots(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
