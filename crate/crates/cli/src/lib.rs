//! Library surface of the command-line driver. Each subcommand is a plain
//! function from a resolved config to a serializable report, so the
//! integration suite can drive them in-process.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::Path;

use smp_core::problem::{ControlDomain, ControlPolicy, ControlProblem};
use smp_core::stats;

use config::{PolicySpec, ResolvedConfig};

#[derive(Debug)]
pub enum CliError {
    /// Usage / configuration problem (exit code 2).
    Config(String),
    /// Numerical or runtime failure with diagnostics (exit code 1).
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Run(msg) => write!(f, "run error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<smp_core::CoreError> for CliError {
    fn from(e: smp_core::CoreError) -> Self {
        match e {
            smp_core::CoreError::InvalidArgument(msg) => CliError::Config(msg),
            other => CliError::Run(other.to_string()),
        }
    }
}

/// Exit code mapping: 0 success, 1 check failure or runtime error, 2 usage
/// or config error. No other codes.
pub fn exit_code(outcome: &Result<bool, CliError>) -> i32 {
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(CliError::Run(_)) => 1,
        Err(CliError::Config(_)) => 2,
    }
}

/// Builds the configured problem (named builtin plus parameter overrides).
pub fn build_problem(cfg: &ResolvedConfig) -> Result<ControlProblem, CliError> {
    match cfg.problem.as_str() {
        "example_e" => {
            if cfg.initial_state.len() != 1 {
                return Err(CliError::Config(
                    "example_e is a scalar problem; x0 must have one component".into(),
                ));
            }
            let domain =
                ControlDomain::box_domain(cfg.control_lower.clone(), cfg.control_upper.clone())?;
            Ok(ControlProblem::builder(
                1,
                1,
                cfg.horizon,
                cfg.initial_state.clone(),
                domain,
            )
            .drift(|_t, _x, u| vec![u[0]])
            .diffusion(|_t, _x| vec![1.0])
            .running_cost(|_t, _x, u| 0.5 * (u[0] + 1.0) * (u[0] + 1.0))
            .terminal_cost(|_x| 0.0)
            .terminal_grad(|_x| vec![0.0])
            .meanfield_cost(|m| -0.5 * (-m[0] * m[0]).exp())
            .meanfield_grad(|m| vec![m[0] * (-m[0] * m[0]).exp()])
            .build()?)
        }
        other => Err(CliError::Config(format!(
            "unknown problem `{other}` (builtins: example_e)"
        ))),
    }
}

/// Materializes the configured policy; an empty constant means "use the
/// problem's solved optimal control" and is resolved by the caller.
pub fn build_policy(spec: &PolicySpec) -> Option<ControlPolicy> {
    match spec {
        PolicySpec::Constant { values } if values.is_empty() => None,
        PolicySpec::Constant { values } => Some(ControlPolicy::Constant(values.clone())),
    }
}

pub fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Run(format!("serialization: {e}")))?;
    std::fs::write(path, &text)
        .map_err(|e| CliError::Run(format!("writing {}: {e}", path.display())))?;
    Ok(text)
}

/// Runs a command under the configured worker cap. All parallel sections
/// produce worker-count-independent results; the cap only limits
/// concurrency.
pub fn with_workers<T: Send>(
    cfg: &ResolvedConfig,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    stats::install_workers(cfg.workers, f)
}
