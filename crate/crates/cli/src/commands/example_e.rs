//! End-to-end pipeline for the built-in worked example: fixed point, closed
//! forms, field cross-checks, optimality grid and Monte Carlo consistency,
//! with statistical precision gates.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use smp_core::feynman_kac::{fk_value, LinearBspdeSpec};
use smp_core::meanfield::{
    example_e_closed_forms, solve_fixed_point, FixedPointSpec, ResidualMode,
};
use smp_core::problem::{evaluate_cost_mc, ControlPolicy, CostEstimate};
use smp_core::rng::CounterRng;
use smp_core::sde::McConfig;
use smp_core::smp::{run_smp_check, CostateSource, SmpOptions, SmpReport};

use crate::commands::{CheckEntry, PaperValues};
use crate::config::ResolvedConfig;
use crate::{build_problem, ensure_out_dir, with_workers, write_json, CliError};

const STAT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct FkCheck {
    pub field: String,
    pub t: f64,
    pub x: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct ExampleEReport {
    pub config: ResolvedConfig,
    pub m_star: f64,
    pub fixed_point_iterations: usize,
    /// Wall-clock telemetry; excluded from the serialized report so that
    /// identical configs yield byte-identical files.
    #[serde(skip)]
    pub fixed_point_runtime_us: u128,
    pub u_bar: f64,
    pub j_formula: f64,
    pub j_mc: CostEstimate,
    pub terminal_mean_mc: f64,
    pub fk_checks: Vec<FkCheck>,
    pub smp: SmpReport,
    pub paper_values: PaperValues,
    pub discrepancy_notes: Vec<String>,
    pub checks: Vec<CheckEntry>,
    pub pass: bool,
}

pub fn run(cfg: &ResolvedConfig) -> Result<ExampleEReport, CliError> {
    with_workers(cfg, || run_inner(cfg))
}

fn run_inner(cfg: &ResolvedConfig) -> Result<ExampleEReport, CliError> {
    let problem = build_problem(cfg)?;
    let mut checks: Vec<CheckEntry> = Vec::new();

    // Terminal-mean fixed point by bisection on the closed-form residual.
    let start = Instant::now();
    let fp = solve_fixed_point(
        &problem,
        FixedPointSpec::Bracket { lo: -1.0, hi: 0.0 },
        &ResidualMode::AnalyticExampleE,
        1e-12,
        200,
    )?;
    let fp_runtime = start.elapsed().as_micros();
    let m_star = fp.m_star[0];
    checks.push(CheckEntry::new(
        "fixed_point",
        fp.converged && (m_star - smp_core::meanfield::PAPER_X_STAR).abs() <= 1e-5,
        format!(
            "m* = {m_star:.10} after {} halvings (target {} +- 1e-5)",
            fp.iterations,
            smp_core::meanfield::PAPER_X_STAR
        ),
    ));

    let forms = example_e_closed_forms(m_star);
    checks.push(CheckEntry::new(
        "self_consistency",
        (forms.u_bar - m_star).abs() <= 1e-9,
        format!("u_bar = {:.10} vs m* = {m_star:.10}", forms.u_bar),
    ));
    checks.push(CheckEntry::new(
        "closed_form_objective",
        (forms.j_value - (-0.26898)).abs() <= 1e-5,
        format!("J_formula = {:.8} (formula-derived target -0.26898)", forms.j_value),
    ));

    // Monte Carlo cost under the optimal constant policy.
    let policy = ControlPolicy::Constant(vec![forms.u_bar]);
    let mc_cfg = McConfig::new(cfg.paths, cfg.steps, cfg.seed);
    let j_mc = evaluate_cost_mc(&problem, &policy, &mc_cfg)?;
    let total_se = j_mc.total_se();
    checks.push(CheckEntry::new(
        "mc_objective_consistency",
        (j_mc.mean - forms.j_value).abs() <= 3.0 * total_se + STAT_FLOOR,
        format!(
            "J_mc = {:.6} vs J_formula = {:.6} (3 se = {:.2e})",
            j_mc.mean,
            forms.j_value,
            3.0 * total_se
        ),
    ));
    let m_hat = j_mc.mean_terminal_state[0];
    let se_m = j_mc.terminal_state_se[0];
    checks.push(CheckEntry::new(
        "terminal_mean_consistency",
        (m_hat - m_star).abs() <= 3.0 * se_m + STAT_FLOOR,
        format!("mean X(T) = {m_hat:.6} vs m* = {m_star:.6} (3 se = {:.2e})", 3.0 * se_m),
    ));
    // Precision gates: an under-powered run cannot certify anything.
    let precise = 3.0 * total_se <= cfg.precision_j && 3.0 * se_m <= cfg.precision_m;
    checks.push(CheckEntry::new(
        "mc_precision",
        precise,
        if precise {
            format!(
                "statistical tolerance met: 3 se(J) = {:.2e} <= {:.2e}, 3 se(m) = {:.2e} <= {:.2e}",
                3.0 * total_se,
                cfg.precision_j,
                3.0 * se_m,
                cfg.precision_m
            )
        } else {
            format!(
                "statistical tolerance not met: 3 se(J) = {:.2e} vs gate {:.2e}, 3 se(m) = {:.2e} vs gate {:.2e}",
                3.0 * total_se,
                cfg.precision_j,
                3.0 * se_m,
                cfg.precision_m
            )
        },
    ));

    // Field cross-checks at deterministic pseudo-random (t, x) points.
    let theta_spec = LinearBspdeSpec::theta_spec(&problem, &policy);
    let g_spec = LinearBspdeSpec::g_spec(&problem, &policy, 0);
    let probe_rng = CounterRng::new(cfg.seed ^ 0xfeed);
    let mut fk_checks = Vec::new();
    for q in 0..5u64 {
        let t = cfg.horizon * probe_rng.uniform(q, 0, 0);
        let x = -2.0 + 4.0 * probe_rng.uniform(q, 1, 0);
        let fcfg = McConfig::new(cfg.field_paths, cfg.field_steps, cfg.seed ^ (q + 1));
        let th = fk_value(&theta_spec, t, &[x], &fcfg)?;
        let expected = forms.theta(t, x);
        fk_checks.push(FkCheck {
            field: "theta".into(),
            t,
            x,
            estimate: th.value,
            std_error: th.std_error,
            expected,
            pass: (th.value - expected).abs() <= 3.0 * th.std_error + STAT_FLOOR,
        });
        let gv = fk_value(&g_spec, t, &[x], &fcfg)?;
        let expected = forms.g(t, x);
        fk_checks.push(FkCheck {
            field: "g".into(),
            t,
            x,
            estimate: gv.value,
            std_error: gv.std_error,
            expected,
            pass: (gv.value - expected).abs() <= 3.0 * gv.std_error + STAT_FLOOR,
        });
    }
    checks.push(CheckEntry::new(
        "fk_closed_form_agreement",
        fk_checks.iter().all(|c| c.pass),
        format!(
            "{} of {} field probes within 3 se of the closed forms",
            fk_checks.iter().filter(|c| c.pass).count(),
            fk_checks.len()
        ),
    ));

    // Optimality certificate with closed-form costates.
    let costate = forms.costate();
    let mut smp_opts = SmpOptions::new(
        McConfig::new(cfg.paths.min(100_000), cfg.steps, cfg.seed ^ 0xa5),
        McConfig::new(cfg.field_paths, cfg.field_steps, cfg.seed ^ 0x5a),
        CostateSource::Analytic(Arc::new(move |_t, _x| costate.clone())),
    );
    smp_opts.n_time = cfg.n_time;
    smp_opts.n_control = cfg.n_control;
    smp_opts.tolerance = 1e-10;
    smp_opts.fd_step = cfg.fd_step;
    let smp_report = run_smp_check(&problem, &policy, &smp_opts)?;
    checks.push(CheckEntry::new(
        "variational_inequality",
        smp_report.min_residual >= -1e-10
            && smp_report.min_gaps.iter().all(|g| *g <= 1e-10),
        format!(
            "min residual {:.3e}, max gap {:.3e} on a {}x{} grid",
            smp_report.min_residual,
            smp_report.min_gaps.iter().cloned().fold(0.0, f64::max),
            cfg.n_time,
            cfg.n_control
        ),
    ));
    checks.push(CheckEntry::new(
        "smp_verdict",
        smp_report.verdict,
        format!(
            "objective via fields {:.6} vs MC {:.6} (consistent: {})",
            smp_report.objective_via_formula,
            smp_report.objective_via_mc.mean,
            smp_report.objective_consistent
        ),
    ));

    let discrepancy_notes = vec![
        format!(
            "stated u_bar ~ {:+.5} has the opposite sign of the formula value {:+.5} = m*; the formulas are authoritative here",
            smp_core::meanfield::PAPER_U_BAR,
            forms.u_bar
        ),
        format!(
            "stated objective ~ {:.2} differs from the formula value {:.5}; reports bind to the formula value",
            smp_core::meanfield::PAPER_J,
            forms.j_value
        ),
    ];

    let pass = checks.iter().all(|c| c.pass);
    let report = ExampleEReport {
        config: cfg.clone(),
        m_star,
        fixed_point_iterations: fp.iterations,
        fixed_point_runtime_us: fp_runtime,
        u_bar: forms.u_bar,
        j_formula: forms.j_value,
        j_mc,
        terminal_mean_mc: m_hat,
        fk_checks,
        smp: smp_report,
        paper_values: PaperValues::stated(),
        discrepancy_notes,
        checks,
        pass,
    };

    ensure_out_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("example_e_report.json"), &report)?;
    Ok(report)
}

pub fn render_table(report: &ExampleEReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "m* = {:.8}   u_bar = {:.8}   J_formula = {:.8}\n",
        report.m_star, report.u_bar, report.j_formula
    ));
    out.push_str(&format!(
        "J_mc = {:.8} (3 se = {:.2e})   mean X(T) = {:.6}\n",
        report.j_mc.mean,
        3.0 * report.j_mc.total_se(),
        report.terminal_mean_mc
    ));
    out.push_str(&format!(
        "stated values: X* ~ {:.5}, u_bar ~ {:+.5}, J ~ {:.2}\n",
        report.paper_values.x_star, report.paper_values.u_bar, report.paper_values.objective
    ));
    for c in &report.checks {
        out.push_str(&format!(
            "[{}] {:<28} {}\n",
            if c.pass { "pass" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    out.push_str(&format!("overall: {}\n", if report.pass { "pass" } else { "FAIL" }));
    out
}
