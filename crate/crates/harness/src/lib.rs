//! Case suites, artifact writing and the run pipeline behind the `mpsp` CLI.
//!
//! A run loads a scenario, solves (or loads) the nominal fuel-optimal
//! solution, fits the Fourier weights from its sampled control, and then
//! drives individual guidance cases or whole perturbation sweeps. Every
//! artifact carries a header recording the scenario hash, basis order, step
//! bound, Newton weights and build id.

pub mod cases;
pub mod runner;

use mpsp_core::scenario::{Scenario, ScenarioError};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Solve(#[from] mpsp_core::nominal::SolveError),
    #[error(transparent)]
    Fourier(#[from] mpsp_core::fourier::FourierError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad case spec {0:?}: expected initial:<kappa> | terminal:<+-><+-><+-> | thruster:<eta%>")]
    BadCaseSpec(String),
    #[error("unknown sweep suite {0:?}: expected table3 | table4 | table5")]
    BadSuite(String),
    #[error("cached nominal at {path} was built for a different scenario (hash {found} != {expected})")]
    StaleNominal {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("nominal solution missing; run the `nominal` subcommand first (looked at {0})")]
    MissingNominal(PathBuf),
}

/// Run-wide configuration shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub out_dir: PathBuf,
    /// Fourier basis order K
    pub order: usize,
    /// marching step bound as a fraction of the flight time
    pub h_max_frac: f64,
    pub reoptimize: bool,
    pub strict: bool,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(scenario_path: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            scenario_path,
            out_dir,
            order: 15,
            h_max_frac: 0.0005,
            reoptimize: false,
            strict: false,
            seed: 7,
        }
    }
}

/// Scenario plus its content hash (for artifact headers and cache checks).
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub hash: String,
}

pub fn load_scenario_hashed<P: AsRef<Path>>(path: P) -> Result<LoadedScenario, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let scenario = mpsp_core::scenario::load_scenario(&text)?;
    let hash = hex::encode(&Sha256::digest(text.as_bytes())[..8]);
    Ok(LoadedScenario { scenario, hash })
}

pub fn build_id() -> String {
    option_env!("MPSP_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")))
}

/// Header block prepended (as `# ` comments) to every CSV artifact and
/// embedded as `meta` in JSON reports.
pub fn artifact_header(loaded: &LoadedScenario, cfg: &RunConfig) -> Vec<String> {
    vec![
        format!("build: {}", build_id()),
        format!("scenario_sha256_8: {}", loaded.hash),
        format!("fourier_order_K: {}", cfg.order),
        format!(
            "h_max: {:.6e} TU ({} x flight time)",
            loaded.scenario.h_max(cfg.h_max_frac),
            cfg.h_max_frac
        ),
        "newton_weights: R_eps = I, R0 = 1".to_string(),
        format!("seed: {}", cfg.seed),
    ]
}
