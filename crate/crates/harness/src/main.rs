//! `mpsp`: fuel-optimal low-thrust transfers and MPSP re-targeting.

use clap::{Parser, Subcommand};
use mpsp_harness::cases::CaseSpec;
use mpsp_harness::runner::Pipeline;
use mpsp_harness::{HarnessError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mpsp", version, about = "bang-off-bang low-thrust guidance")]
struct Cli {
    /// Scenario JSON file
    #[arg(long, global = true, default_value = "scenarios/apophis.json")]
    scenario: PathBuf,
    /// Artifact output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Fourier basis order K
    #[arg(long, global = true, default_value_t = 15)]
    order: usize,
    /// Marching step bound as a fraction of the flight time
    #[arg(long = "hmax-frac", global = true, default_value_t = 0.0005)]
    hmax_frac: f64,
    /// Re-solve the fuel-optimal problem per case and report the fuel
    /// increase against it (slower)
    #[arg(long, global = true)]
    reoptimize: bool,
    /// Exit non-zero when any case of a sweep fails
    #[arg(long, global = true)]
    strict: bool,
    /// RNG seed of the nominal solver restarts
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fuel-optimal reference trajectory and cache it
    Nominal,
    /// Re-target one perturbed case (initial:<kappa> | terminal:<+--> |
    /// thruster:<eta%>)
    Guide {
        #[arg(long = "case")]
        case: String,
    },
    /// Run a whole perturbation suite
    Sweep {
        #[arg(long, value_parser = ["table3", "table4", "table5"])]
        suite: String,
    },
    /// Export the cached nominal solution
    Export {
        #[arg(long, value_parser = ["traj", "angles", "throttle"])]
        what: String,
    },
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    let cfg = RunConfig {
        scenario_path: cli.scenario,
        out_dir: cli.out,
        order: cli.order,
        h_max_frac: cli.hmax_frac,
        reoptimize: cli.reoptimize,
        strict: cli.strict,
        seed: cli.seed,
    };
    let strict = cfg.strict;
    let pipe = Pipeline::new(cfg)?;

    match cli.command {
        Command::Nominal => {
            let sc = &pipe.loaded.scenario;
            let nom = &pipe.nominal;
            let mf_kg = sc
                .units
                .from_canonical(nom.final_mass, mpsp_core::scenario::Unit::Mass);
            println!(
                "nominal: final mass {:.4} kg, {} thrust + {} coast segments, residual {:.3e}",
                mf_kg, nom.n_thrust_segments, nom.n_coast_segments, nom.residual_norm
            );
            println!("switch times (TU): {:?}", nom.switch_times);
            pipe.write_weights()?;
            let p = pipe.export("traj")?;
            println!("trajectory written to {}", p.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Guide { case } => {
            let spec = CaseSpec::parse(&case)?;
            let report = pipe.run_case(&spec)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.status == "converged" || !strict {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Sweep { suite } => {
            let reports = pipe.run_sweep(&suite)?;
            let failed = reports.iter().filter(|r| r.status != "converged").count();
            println!(
                "{suite}: {}/{} converged (summary in {})",
                reports.len() - failed,
                reports.len(),
                pipe.cfg
                    .out_dir
                    .join(format!("sweep_{suite}_summary.csv"))
                    .display()
            );
            if failed > 0 && strict {
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Export { what } => {
            let p = pipe.export(&what)?;
            println!("written {}", p.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
