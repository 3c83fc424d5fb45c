//! Optimality certificate for a configured problem and candidate policy,
//! with costates estimated probabilistically and spike-difference checks.

use serde::Serialize;

use smp_core::problem::ControlPolicy;
use smp_core::sde::McConfig;
use smp_core::smp::{
    run_smp_check, CostateSource, SmpOptions, SmpReport, SpikeCheckOptions, SpikePerturbation,
};

use crate::config::ResolvedConfig;
use crate::{build_policy, build_problem, ensure_out_dir, with_workers, write_json, CliError};

#[derive(Debug, Serialize)]
pub struct SmpCheckReportFile {
    pub config: ResolvedConfig,
    pub policy_values: Vec<f64>,
    pub report: SmpReport,
    pub pass: bool,
}

pub fn run(cfg: &ResolvedConfig) -> Result<SmpCheckReportFile, CliError> {
    with_workers(cfg, || run_inner(cfg))
}

fn run_inner(cfg: &ResolvedConfig) -> Result<SmpCheckReportFile, CliError> {
    let problem = build_problem(cfg)?;
    let policy = match build_policy(&cfg.policy) {
        Some(p) => p,
        None => {
            // Default candidate: the solved optimal constant control.
            let fp = smp_core::meanfield::solve_fixed_point(
                &problem,
                smp_core::meanfield::FixedPointSpec::Bracket { lo: -1.0, hi: 0.0 },
                &smp_core::meanfield::ResidualMode::AnalyticExampleE,
                1e-12,
                200,
            )?;
            let forms = smp_core::meanfield::example_e_closed_forms(fp.m_star[0]);
            ControlPolicy::Constant(vec![forms.u_bar])
        }
    };
    let policy_values = match &policy {
        ControlPolicy::Constant(v) => v.clone(),
        _ => vec![],
    };
    policy.check_in_domain(
        problem.control_domain(),
        problem.horizon(),
        &[problem.initial_state().to_vec()],
        8,
    )?;

    let mut spikes = Vec::new();
    for &(tau, eps, v) in &cfg.spikes {
        spikes.push(SpikePerturbation::new(&problem, tau, eps, vec![v])?);
    }
    let mut opts = SmpOptions::new(
        McConfig::new(cfg.paths, cfg.steps, cfg.seed),
        McConfig::new(cfg.field_paths, cfg.field_steps, cfg.seed ^ 0x11),
        CostateSource::FeynmanKac,
    );
    opts.n_time = cfg.n_time;
    opts.n_control = cfg.n_control;
    opts.tolerance = cfg.tolerance;
    opts.fd_step = cfg.fd_step;
    opts.spikes = spikes;
    opts.spike_opts = Some(SpikeCheckOptions {
        mc: McConfig::new(cfg.paths.min(100_000), cfg.steps, cfg.seed ^ 0x22),
        field_mc: McConfig::new((cfg.field_paths / 4).max(1_000), 25, cfg.seed ^ 0x33),
        fd_step: cfg.fd_step,
        n_probes: 3,
    });

    let report = run_smp_check(&problem, &policy, &opts)?;
    let pass = report.verdict;
    let file = SmpCheckReportFile {
        config: cfg.clone(),
        policy_values,
        report,
        pass,
    };
    ensure_out_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("smp_report.json"), &file)?;
    Ok(file)
}
