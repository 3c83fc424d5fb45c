//! Flat key-value configuration (`key = value` lines, `#` comments) merged
//! with command-line overrides into one resolved, serializable config.
//!
//! The resolved config is embedded verbatim in every report so a run can be
//! reproduced from its own output. Execution resources (worker cap, output
//! directory) are deliberately not part of the embedded config: they do not
//! affect any computed number.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use crate::CliError;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    Ok(map)
}

fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{key}: `{v}` is not a number"))),
    }
}

fn get_usize(map: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{key}: `{v}` is not a non-negative integer"))),
    }
}

fn get_u64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<u64>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{key}: `{v}` is not an unsigned integer"))),
    }
}

fn get_bool(map: &BTreeMap<String, String>, key: &str) -> Result<Option<bool>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => match v.as_str() {
            "true" | "1" | "yes" => Ok(Some(true)),
            "false" | "0" | "no" => Ok(Some(false)),
            _ => Err(CliError::Config(format!("{key}: `{v}` is not a boolean"))),
        },
    }
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{key}: `{s}` is not a number")))
        })
        .collect()
}

fn get_f64_list(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f64>>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => parse_f64_list(key, v).map(Some),
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Constant { values: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridSettings {
    pub builtin: String,
    pub l_bound: Option<f64>,
    pub n_xy: Option<usize>,
    pub n_t: Option<usize>,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub resid_bound: Option<f64>,
    pub refine_levels: usize,
    pub mf_horizon: f64,
    pub mc_paths: usize,
    pub mc_steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FkSettings {
    pub field: String,
    pub t: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
    pub gradient: bool,
}

/// Fully resolved run configuration (defaults < config file < flags).
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig {
    pub problem: String,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub field_paths: usize,
    pub field_steps: usize,
    pub fd_step: f64,
    pub n_time: usize,
    pub n_control: usize,
    pub tolerance: f64,
    pub precision_j: f64,
    pub precision_m: f64,
    pub policy: PolicySpec,
    /// (tau, epsilon, spike value) triples for the difference-identity check.
    pub spikes: Vec<(f64, f64, f64)>,
    pub grid: GridSettings,
    pub fk: FkSettings,
    pub format: ReportFormat,
    #[serde(skip)]
    pub workers: Option<usize>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

/// Command-line overrides (all optional; flags win over the file).
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub workers: Option<usize>,
    pub format: Option<String>,
}

impl ResolvedConfig {
    pub fn resolve(overrides: &Overrides) -> Result<ResolvedConfig, CliError> {
        let file_map = match &overrides.config_path {
            None => BTreeMap::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_kv(&text)?
            }
        };
        let m = &file_map;

        let problem = m
            .get("problem")
            .cloned()
            .unwrap_or_else(|| "example_e".to_string());
        let horizon = get_f64(m, "horizon")?.unwrap_or(1.0);
        let initial_state = get_f64_list(m, "x0")?.unwrap_or_else(|| vec![0.0]);
        let control_lower = get_f64_list(m, "control_lower")?.unwrap_or_else(|| vec![-2.0]);
        let control_upper = get_f64_list(m, "control_upper")?.unwrap_or_else(|| vec![2.0]);
        let paths = overrides
            .paths
            .or(get_usize(m, "paths")?)
            .unwrap_or(100_000);
        let steps = overrides.steps.or(get_usize(m, "steps")?).unwrap_or(100);
        let seed = overrides.seed.or(get_u64(m, "seed")?).unwrap_or(42);
        let field_paths = get_usize(m, "field_paths")?.unwrap_or(20_000);
        let field_steps = get_usize(m, "field_steps")?.unwrap_or(50);
        let fd_step = get_f64(m, "fd_step")?.unwrap_or(1e-3);
        let n_time = get_usize(m, "n_time")?.unwrap_or(21);
        let n_control = get_usize(m, "n_control")?.unwrap_or(41);
        let tolerance = get_f64(m, "tolerance")?.unwrap_or(5e-3);
        let precision_j = get_f64(m, "precision_j")?.unwrap_or(5e-3);
        let precision_m = get_f64(m, "precision_m")?.unwrap_or(2e-2);

        let policy = match m.get("policy").map(String::as_str) {
            None => PolicySpec::Constant { values: vec![] },
            Some(spec) => parse_policy_spec(spec)?,
        };

        let spike_taus = get_f64_list(m, "spike_taus")?.unwrap_or_else(|| vec![0.2, 0.5]);
        let spike_eps = get_f64_list(m, "spike_eps")?.unwrap_or_else(|| vec![0.1]);
        let spike_values = get_f64_list(m, "spike_values")?.unwrap_or_else(|| vec![1.0]);
        let mut spikes = Vec::new();
        for &tau in &spike_taus {
            for &eps in &spike_eps {
                for &v in &spike_values {
                    spikes.push((tau, eps, v));
                }
            }
        }

        let grid = GridSettings {
            builtin: m
                .get("fbspde")
                .cloned()
                .unwrap_or_else(|| "example_e_frozen".to_string()),
            l_bound: get_f64(m, "l_bound")?,
            n_xy: get_usize(m, "n_xy")?,
            n_t: get_usize(m, "n_t")?,
            picard_tol: get_f64(m, "picard_tol")?.unwrap_or(1e-9),
            picard_max: get_usize(m, "picard_max")?.unwrap_or(30),
            resid_bound: get_f64(m, "resid_bound")?,
            refine_levels: get_usize(m, "refine_levels")?.unwrap_or(1),
            mf_horizon: get_f64(m, "mf_horizon")?.unwrap_or(0.2),
            mc_paths: get_usize(m, "fbspde_paths")?.unwrap_or(16),
            mc_steps: get_usize(m, "fbspde_steps")?.unwrap_or(50),
        };

        let fk = FkSettings {
            field: m.get("field").cloned().unwrap_or_else(|| "theta".to_string()),
            t: get_f64(m, "fk_t")?.unwrap_or(0.5),
            x_min: get_f64(m, "fk_x_min")?.unwrap_or(-2.0),
            x_max: get_f64(m, "fk_x_max")?.unwrap_or(2.0),
            points: get_usize(m, "fk_points")?.unwrap_or(9),
            gradient: get_bool(m, "fk_gradient")?.unwrap_or(false),
        };

        let format_str = overrides
            .format
            .clone()
            .or_else(|| m.get("format").cloned())
            .unwrap_or_else(|| "json".to_string());
        let format = match format_str.as_str() {
            "json" => ReportFormat::Json,
            "csv" => ReportFormat::Csv,
            "table" => ReportFormat::Table,
            other => {
                return Err(CliError::Config(format!(
                    "format must be json, csv or table (got `{other}`)"
                )))
            }
        };

        let out_dir = overrides
            .out_dir
            .clone()
            .or_else(|| m.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let workers = overrides.workers.or(get_usize(m, "workers")?);

        let cfg = ResolvedConfig {
            problem,
            horizon,
            initial_state,
            control_lower,
            control_upper,
            paths,
            steps,
            seed,
            field_paths,
            field_steps,
            fd_step,
            n_time,
            n_control,
            tolerance,
            precision_j,
            precision_m,
            policy,
            spikes,
            grid,
            fk,
            format,
            workers,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CliError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.paths == 0 || self.steps == 0 || self.field_paths == 0 || self.field_steps == 0 {
            return Err(CliError::Config(
                "paths, steps, field_paths and field_steps must be positive".into(),
            ));
        }
        if self.control_lower.len() != self.control_upper.len()
            || self
                .control_lower
                .iter()
                .zip(&self.control_upper)
                .any(|(a, b)| a > b)
        {
            return Err(CliError::Config(
                "control bounds must have equal length with lower <= upper".into(),
            ));
        }
        if self.n_time < 2 || self.n_control < 2 {
            return Err(CliError::Config(
                "n_time and n_control must be at least 2".into(),
            ));
        }
        if !(self.tolerance > 0.0) || !(self.precision_j > 0.0) || !(self.precision_m > 0.0) {
            return Err(CliError::Config(
                "tolerance and precision gates must be positive".into(),
            ));
        }
        if self.grid.refine_levels == 0 || self.grid.picard_max == 0 {
            return Err(CliError::Config(
                "refine_levels and picard_max must be positive".into(),
            ));
        }
        if self.fk.points == 0 || !(self.fk.x_min <= self.fk.x_max) {
            return Err(CliError::Config("fk grid is empty or reversed".into()));
        }
        Ok(())
    }
}

pub fn parse_policy_spec(spec: &str) -> Result<PolicySpec, CliError> {
    if let Some(rest) = spec.strip_prefix("constant:") {
        return Ok(PolicySpec::Constant {
            values: parse_f64_list("policy", rest)?,
        });
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read policy file {path}: {e}")))?;
        let map = parse_kv(&text)?;
        let Some(values) = map.get("constant") else {
            return Err(CliError::Config(format!(
                "policy file {path} must define `constant = v1,v2,...`"
            )));
        };
        return Ok(PolicySpec::Constant {
            values: parse_f64_list("constant", values)?,
        });
    }
    Err(CliError::Config(format!(
        "policy must be `constant:v1,v2,...` or `file:PATH` (got `{spec}`)"
    )))
}
