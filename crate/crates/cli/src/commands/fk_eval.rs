//! Grid evaluation of a backward field (value and optional gradient) with
//! CSV output for plotting.

use serde::Serialize;

use smp_core::feynman_kac::{fk_field_on_grid, write_field_csv, FieldEstimate, LinearBspdeSpec};
use smp_core::problem::ControlPolicy;
use smp_core::sde::McConfig;
use smp_core::stats;

use crate::config::ResolvedConfig;
use crate::{build_policy, build_problem, ensure_out_dir, with_workers, write_json, CliError};

#[derive(Debug, Serialize)]
pub struct FkEvalReport {
    pub config: ResolvedConfig,
    pub field: String,
    pub t: f64,
    pub points: Vec<f64>,
    pub estimates: Vec<FieldEstimate>,
    pub pass: bool,
}

pub fn run(cfg: &ResolvedConfig) -> Result<FkEvalReport, CliError> {
    with_workers(cfg, || run_inner(cfg))
}

fn run_inner(cfg: &ResolvedConfig) -> Result<FkEvalReport, CliError> {
    let problem = build_problem(cfg)?;
    let policy = match build_policy(&cfg.policy) {
        Some(p) => p,
        None => {
            let fp = smp_core::meanfield::solve_fixed_point(
                &problem,
                smp_core::meanfield::FixedPointSpec::Bracket { lo: -1.0, hi: 0.0 },
                &smp_core::meanfield::ResidualMode::AnalyticExampleE,
                1e-12,
                200,
            )?;
            ControlPolicy::Constant(vec![
                smp_core::meanfield::example_e_closed_forms(fp.m_star[0]).u_bar,
            ])
        }
    };
    let spec = match cfg.fk.field.as_str() {
        "theta" => LinearBspdeSpec::theta_spec(&problem, &policy),
        "g" | "g0" => LinearBspdeSpec::g_spec(&problem, &policy, 0),
        other => {
            return Err(CliError::Config(format!(
                "field must be `theta` or `g` (got `{other}`)"
            )))
        }
    };
    if !(0.0..=problem.horizon()).contains(&cfg.fk.t) {
        return Err(CliError::Config(format!(
            "fk_t = {} outside [0, {}]",
            cfg.fk.t,
            problem.horizon()
        )));
    }
    let xs: Vec<Vec<f64>> = if cfg.fk.points == 1 {
        vec![vec![cfg.fk.x_min]]
    } else {
        stats::linspace(cfg.fk.x_min, cfg.fk.x_max, cfg.fk.points)
            .into_iter()
            .map(|x| vec![x])
            .collect()
    };
    let mc = McConfig::new(cfg.field_paths, cfg.field_steps, cfg.seed);
    let fd = cfg.fk.gradient.then_some(cfg.fd_step);
    let estimates = fk_field_on_grid(&spec, cfg.fk.t, &xs, &mc, fd)?;

    ensure_out_dir(&cfg.out_dir)?;
    let mut csv = Vec::new();
    write_field_csv(&mut csv, cfg.fk.t, &xs, &estimates)
        .map_err(|e| CliError::Run(format!("csv: {e}")))?;
    std::fs::write(cfg.out_dir.join("fk_field.csv"), &csv)
        .map_err(|e| CliError::Run(format!("writing fk_field.csv: {e}")))?;

    let report = FkEvalReport {
        config: cfg.clone(),
        field: cfg.fk.field.clone(),
        t: cfg.fk.t,
        points: xs.iter().map(|p| p[0]).collect(),
        estimates,
        pass: true,
    };
    write_json(&cfg.out_dir.join("fk_field.json"), &report)?;
    Ok(report)
}
