use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hhcable::analysis::AnalysisOptions;
use hhcable::SchemeKind;
use hhcable_cli::commands::{cmd_analyze, cmd_order, cmd_run, cmd_stability, cmd_sweep, Outputs, Overrides};
use hhcable_cli::{CliError, Experiment};

#[derive(Parser, Debug)]
#[command(name = "hhcable", version, about = "Compartmental Hodgkin-Huxley cable simulations")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    scheme: Option<SchemeKind>,
    /// Step size in seconds.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Simulated time in seconds.
    #[arg(long, global = true)]
    duration: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and ladders.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Compute everything twice on different worker counts and fail unless
    /// the outputs agree byte for byte.
    #[arg(long, global = true)]
    seedless: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// One simulation at one step size.
    Run,
    /// Every configured scheme at every configured step size.
    Sweep,
    /// Predicted step-size limits from an HCN reference cycle.
    Stability,
    /// Convergence slopes on a spike-free variant of the model.
    Order,
    /// Re-analyze saved traces.
    Analyze {
        traces: Vec<PathBuf>,
        /// Fine-step trace of the same scheme for the accuracy measure.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn other_jobs(jobs: Option<usize>) -> Option<usize> {
    Some(if jobs == Some(1) { 2 } else { 1 })
}

fn execute(cli: &Cli) -> Result<Outputs, CliError> {
    let experiment = || -> Result<Experiment, CliError> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("--config is required".into()))?;
        let mut exp = Experiment::load(path)?;
        exp.apply(&Overrides {
            scheme: cli.scheme,
            dt: cli.dt,
            duration: cli.duration,
            out: cli.out.clone(),
        })?;
        Ok(exp)
    };
    let twice = |f: &dyn Fn(Option<usize>) -> Result<Outputs, CliError>| {
        let first = f(cli.jobs)?;
        if cli.seedless {
            let second = f(other_jobs(cli.jobs))?;
            if let Some((name, _)) = first
                .files
                .iter()
                .find(|(name, bytes)| second.files.get(*name) != Some(bytes))
            {
                return Err(CliError::Nondeterministic(name.display().to_string()));
            }
            if first.files.len() != second.files.len() {
                return Err(CliError::Nondeterministic("file sets differ".into()));
            }
        }
        Ok(first)
    };
    match &cli.verb {
        Verb::Run => {
            let exp = experiment()?;
            let out = twice(&|_| cmd_run(&exp))?;
            out.write_to(&exp.out)?;
            Ok(out)
        }
        Verb::Sweep => {
            let exp = experiment()?;
            let traces = exp.analysis.traces.then(|| exp.out.join("traces"));
            let first_pass = std::cell::Cell::new(true);
            let out = twice(&|jobs| {
                let dir = if first_pass.replace(false) { traces.as_deref() } else { None };
                cmd_sweep(&exp, jobs, dir)
            })?;
            out.write_to(&exp.out)?;
            Ok(out)
        }
        Verb::Stability => {
            let exp = experiment()?;
            let out = twice(&|_| cmd_stability(&exp))?;
            out.write_to(&exp.out)?;
            Ok(out)
        }
        Verb::Order => {
            let exp = experiment()?;
            let out = twice(&|jobs| cmd_order(&exp, jobs))?;
            out.write_to(&exp.out)?;
            Ok(out)
        }
        Verb::Analyze { traces, reference } => {
            let (options, dir) = match &cli.config {
                Some(_) => {
                    let exp = experiment()?;
                    let o = AnalysisOptions {
                        skip: exp.analysis.skip,
                        cycle_index: exp.analysis.cycle_index,
                        psd: exp.analysis.psd,
                    };
                    (o, exp.out)
                }
                None => (
                    AnalysisOptions::default(),
                    cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
                ),
            };
            let out = twice(&|_| cmd_analyze(traces, reference.as_deref(), &options))?;
            out.write_to(&dir)?;
            Ok(out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            print!("{}", out.log);
            for u in &out.unmet {
                eprintln!("unmet: {u}");
            }
            let code = match (&cli.verb, out.unstable, out.unmet.is_empty()) {
                (Verb::Run, true, _) => 3,
                (Verb::Analyze { .. }, _, false) => 4,
                _ => 0,
            };
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
