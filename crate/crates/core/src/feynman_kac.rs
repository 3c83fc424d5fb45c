//! Probabilistic evaluation of backward random fields.
//!
//! A linear backward field with drift b(t,x), diffusion sigma(t,x), source
//! l(t,x) and terminal value h(x) is evaluated at (t, x) as the expectation
//! of the running source integral plus the terminal value along the frozen
//! diffusion started at (t, x). Spatial derivatives use central finite
//! differences with common random numbers: the bumped evaluations consume
//! identical increments, so the pathwise difference carries the sensitivity
//! and not two independent noises.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::problem::{ControlPolicy, ControlProblem};
use crate::rng::CounterRng;
use crate::sde::McConfig;
use crate::stats;

pub type FieldVecFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type FieldScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Linear backward-field specification with the control already frozen into
/// the coefficients. Only the value field and its spatial gradient are
/// estimated; the martingale-integrand field has no pointwise representation
/// here.
#[derive(Clone)]
pub struct LinearBspdeSpec {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub drift: FieldVecFn,
    pub diffusion: FieldVecFn,
    pub source: FieldScalarFn,
    pub terminal: TerminalFn,
}

impl LinearBspdeSpec {
    pub fn new(
        state_dim: usize,
        noise_dim: usize,
        horizon: f64,
        drift: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        source: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            noise_dim,
            horizon,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            source: Arc::new(source),
            terminal: Arc::new(terminal),
        }
    }

    /// Value-field spec for a problem under a fixed policy: source is the
    /// running cost, terminal is the terminal cost.
    pub fn theta_spec(problem: &ControlProblem, policy: &ControlPolicy) -> Self {
        let p1 = problem.clone();
        let p2 = problem.clone();
        let p3 = problem.clone();
        let pol1 = policy.clone();
        let pol2 = policy.clone();
        Self {
            state_dim: problem.state_dim(),
            noise_dim: problem.noise_dim(),
            horizon: problem.horizon(),
            drift: Arc::new(move |t, x| {
                let u = pol1.control_at(t, x);
                p1.drift(t, x, &u)
            }),
            diffusion: Arc::new(move |t, x| p2.diffusion(t, x)),
            source: Arc::new(move |t, x| {
                let u = pol2.control_at(t, x);
                p3.running_cost(t, x, &u)
            }),
            terminal: problem.terminal_cost_fn(),
        }
    }

    /// Component-i terminal-mean spec under a fixed policy: zero source,
    /// terminal value x_i.
    pub fn g_spec(problem: &ControlProblem, policy: &ControlPolicy, component: usize) -> Self {
        assert!(component < problem.state_dim());
        let p1 = problem.clone();
        let p2 = problem.clone();
        let pol = policy.clone();
        Self {
            state_dim: problem.state_dim(),
            noise_dim: problem.noise_dim(),
            horizon: problem.horizon(),
            drift: Arc::new(move |t, x| {
                let u = pol.control_at(t, x);
                p1.drift(t, x, &u)
            }),
            diffusion: Arc::new(move |t, x| p2.diffusion(t, x)),
            source: Arc::new(|_t, _x| 0.0),
            terminal: Arc::new(move |x: &[f64]| x[component]),
        }
    }
}

/// Monte Carlo estimate of a field value, optionally with its gradient.
#[derive(Clone, Debug, Serialize)]
pub struct FieldEstimate {
    pub value: f64,
    pub std_error: f64,
    pub gradient: Option<Vec<f64>>,
    pub gradient_std_error: Option<Vec<f64>>,
    pub n_paths_used: usize,
}

/// Default bump size for gradient estimation: 1e-3 * max(1, |x|).
pub fn default_fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-3 * norm.max(1.0)
}

fn check_eval_point(spec: &LinearBspdeSpec, t: f64, x: &[f64]) -> Result<()> {
    if !(0.0..=spec.horizon + 1e-12).contains(&t) {
        return Err(CoreError::InvalidArgument(format!(
            "evaluation time {t} outside [0, {}]",
            spec.horizon
        )));
    }
    if x.len() != spec.state_dim {
        return Err(CoreError::InvalidArgument(format!(
            "evaluation point has dimension {}, expected {}",
            x.len(),
            spec.state_dim
        )));
    }
    Ok(())
}

/// Runs `starts.len()` coupled walkers per path, all sharing the same
/// increments, and returns for each path the accumulated
/// `int l dt + h(X(T))` of every walker (row-major [path][walker]).
fn walk_functionals(
    spec: &LinearBspdeSpec,
    t: f64,
    starts: &[Vec<f64>],
    cfg: &McConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = spec.state_dim;
    let d = spec.noise_dim;
    let m = starts.len();
    let steps = cfg.n_steps;
    let dt = (spec.horizon - t) / steps as f64;
    let sqrt_dt = dt.sqrt();
    let rng = CounterRng::new(cfg.seed);
    stats::try_par_map_indexed(cfg.n_paths, |p| -> Result<Vec<f64>> {
        let mut xs: Vec<Vec<f64>> = starts.to_vec();
        let mut acc = vec![0.0; m];
        let mut dw = vec![0.0; d];
        for k in 0..steps {
            let tk = t + dt * k as f64;
            for j in 0..d {
                dw[j] = rng.standard_normal(p as u64, k as u64, j as u64) * sqrt_dt;
            }
            for (w, x) in xs.iter_mut().enumerate() {
                acc[w] += (spec.source)(tk, x) * dt;
                let b = (spec.drift)(tk, x);
                let sig = (spec.diffusion)(tk, x);
                for i in 0..n {
                    let mut diff = 0.0;
                    for j in 0..d {
                        diff += sig[i * d + j] * dw[j];
                    }
                    x[i] += b[i] * dt + diff;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFiniteState { path: p, step: k + 1 });
                }
            }
        }
        for (w, x) in xs.iter().enumerate() {
            acc[w] += (spec.terminal)(x);
        }
        Ok(acc)
    })
}

/// Field value at (t, x). At t = T this is the terminal value exactly, with
/// zero error and no simulation.
pub fn fk_value(spec: &LinearBspdeSpec, t: f64, x: &[f64], cfg: &McConfig) -> Result<FieldEstimate> {
    check_eval_point(spec, t, x)?;
    if spec.horizon - t <= 1e-14 {
        return Ok(FieldEstimate {
            value: (spec.terminal)(x),
            std_error: 0.0,
            gradient: None,
            gradient_std_error: None,
            n_paths_used: 0,
        });
    }
    cfg.validate()?;
    let rows = walk_functionals(spec, t, &[x.to_vec()], cfg)?;
    let samples: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let s = stats::mean_and_se(&samples);
    Ok(FieldEstimate {
        value: s.mean,
        std_error: s.std_error,
        gradient: None,
        gradient_std_error: None,
        n_paths_used: cfg.n_paths,
    })
}

/// Field value and spatial gradient at (t, x) by central differences under
/// common random numbers. All bumped walkers reuse the identical increment
/// stream, so the differenced samples carry path sensitivity only.
pub fn fk_gradient(
    spec: &LinearBspdeSpec,
    t: f64,
    x: &[f64],
    cfg: &McConfig,
    fd_step: f64,
) -> Result<FieldEstimate> {
    check_eval_point(spec, t, x)?;
    if !(fd_step > 0.0) {
        return Err(CoreError::InvalidArgument(
            "fd_step must be strictly positive".into(),
        ));
    }
    let n = spec.state_dim;
    if spec.horizon - t <= 1e-14 {
        // Terminal shortcut: differentiate the terminal function directly.
        let mut grad = vec![0.0; n];
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..n {
            xp[i] = x[i] + fd_step;
            xm[i] = x[i] - fd_step;
            grad[i] = ((spec.terminal)(&xp) - (spec.terminal)(&xm)) / (2.0 * fd_step);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        return Ok(FieldEstimate {
            value: (spec.terminal)(x),
            std_error: 0.0,
            gradient: Some(grad),
            gradient_std_error: Some(vec![0.0; n]),
            n_paths_used: 0,
        });
    }
    cfg.validate()?;
    let mut starts = Vec::with_capacity(2 * n + 1);
    starts.push(x.to_vec());
    for i in 0..n {
        let mut xp = x.to_vec();
        xp[i] += fd_step;
        starts.push(xp);
        let mut xm = x.to_vec();
        xm[i] -= fd_step;
        starts.push(xm);
    }
    let rows = walk_functionals(spec, t, &starts, cfg)?;
    let base: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let s = stats::mean_and_se(&base);
    let mut grad = vec![0.0; n];
    let mut grad_se = vec![0.0; n];
    for i in 0..n {
        let diffs: Vec<f64> = rows
            .iter()
            .map(|r| (r[1 + 2 * i] - r[2 + 2 * i]) / (2.0 * fd_step))
            .collect();
        let ds = stats::mean_and_se(&diffs);
        grad[i] = ds.mean;
        grad_se[i] = ds.std_error;
    }
    Ok(FieldEstimate {
        value: s.mean,
        std_error: s.std_error,
        gradient: Some(grad),
        gradient_std_error: Some(grad_se),
        n_paths_used: cfg.n_paths,
    })
}

/// Elementwise evaluation over a grid of points with per-point derived seeds
/// (base seed xor grid index). `fd_step = Some(h)` also estimates gradients.
pub fn fk_field_on_grid(
    spec: &LinearBspdeSpec,
    t: f64,
    points: &[Vec<f64>],
    cfg: &McConfig,
    fd_step: Option<f64>,
) -> Result<Vec<FieldEstimate>> {
    let mut out = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let derived = McConfig {
            seed: CounterRng::new(cfg.seed).derive(i as u64).seed(),
            ..*cfg
        };
        let est = match fd_step {
            Some(h) => fk_gradient(spec, t, x, &derived, h)?,
            None => fk_value(spec, t, x, &derived)?,
        };
        out.push(est);
    }
    Ok(out)
}

/// CSV dump of grid estimates: t, coordinates, value, std_error and, when
/// present, gradient components with their standard errors.
pub fn write_field_csv<W: Write>(
    out: &mut W,
    t: f64,
    points: &[Vec<f64>],
    estimates: &[FieldEstimate],
) -> std::io::Result<()> {
    let n = points.first().map(|p| p.len()).unwrap_or(0);
    let with_grad = estimates.iter().any(|e| e.gradient.is_some());
    write!(out, "t")?;
    for i in 0..n {
        write!(out, ",x{i}")?;
    }
    write!(out, ",value,std_error")?;
    if with_grad {
        for i in 0..n {
            write!(out, ",grad{i},grad{i}_se")?;
        }
    }
    writeln!(out)?;
    for (x, e) in points.iter().zip(estimates) {
        write!(out, "{t}")?;
        for v in x {
            write!(out, ",{v}")?;
        }
        write!(out, ",{},{}", e.value, e.std_error)?;
        if with_grad {
            match (&e.gradient, &e.gradient_std_error) {
                (Some(g), Some(se)) => {
                    for i in 0..n {
                        write!(out, ",{},{}", g[i], se[i])?;
                    }
                }
                _ => {
                    for _ in 0..n {
                        write!(out, ",,")?;
                    }
                }
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield;
    use crate::problem::build_example_e;

    const STAT_FLOOR: f64 = 1e-12;

    fn example_e_specs() -> (LinearBspdeSpec, LinearBspdeSpec, f64) {
        let root = meanfield::example_e_root();
        let forms = meanfield::example_e_closed_forms(root);
        let problem = build_example_e();
        let policy = ControlPolicy::Constant(vec![forms.u_bar]);
        (
            LinearBspdeSpec::theta_spec(&problem, &policy),
            LinearBspdeSpec::g_spec(&problem, &policy, 0),
            root,
        )
    }

    #[test]
    fn constant_terminal_is_a_martingale() {
        let spec = LinearBspdeSpec::new(
            1,
            1,
            1.0,
            |_t, _x| vec![0.3],
            |_t, _x| vec![1.0],
            |_t, _x| 0.0,
            |_x| 4.25,
        );
        let est = fk_value(&spec, 0.25, &[0.7], &McConfig::new(500, 20, 3)).unwrap();
        assert!((est.value - 4.25).abs() <= 1e-12);
        assert!(est.std_error <= 1e-12);
    }

    #[test]
    fn terminal_consistency_is_exact() {
        let (theta, g, _) = example_e_specs();
        let est = fk_value(&theta, 1.0, &[0.37], &McConfig::new(10, 5, 1)).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
        let est = fk_value(&g, 1.0, &[0.37], &McConfig::new(10, 5, 1)).unwrap();
        assert_eq!(est.value, 0.37);
    }

    #[test]
    fn example_e_value_fields_match_closed_forms() {
        let (theta, g, root) = example_e_specs();
        let forms = meanfield::example_e_closed_forms(root);
        let cfg = McConfig::new(100_000, 100, 7);

        let est = fk_value(&theta, 0.0, &[0.0], &cfg).unwrap();
        assert!(
            (est.value - forms.m_of_t(0.0)).abs() <= 3.0 * est.std_error + STAT_FLOOR,
            "theta(0,0) = {} vs closed form {}",
            est.value,
            forms.m_of_t(0.0)
        );
        assert!((forms.m_of_t(0.0) - 0.08627).abs() < 1e-5);

        let est = fk_value(&g, 0.5, &[0.2], &cfg).unwrap();
        let expected = forms.g(0.5, 0.2);
        assert!(
            (est.value - expected).abs() <= 3.0 * est.std_error + STAT_FLOOR,
            "g(0.5, 0.2) = {} vs {}",
            est.value,
            expected
        );
        assert!((expected - (0.2 + forms.u_bar * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn example_e_gradients_are_exact_under_crn() {
        let (theta, g, _) = example_e_specs();
        let cfg = McConfig::new(4_000, 50, 11);
        let est = fk_gradient(&g, 0.3, &[0.4], &cfg, 1e-3).unwrap();
        let grad = est.gradient.unwrap();
        let se = est.gradient_std_error.unwrap();
        assert!((grad[0] - 1.0).abs() <= 3.0 * se[0] + 1e-10, "grad {}", grad[0]);
        assert!(se[0] < 1e-10, "CRN gradient SE should vanish, got {}", se[0]);

        let est = fk_gradient(&theta, 0.3, &[0.4], &cfg, 1e-3).unwrap();
        let grad = est.gradient.unwrap();
        assert!(grad[0].abs() <= 1e-10, "theta_x = {}", grad[0]);
    }

    #[test]
    fn quadratic_terminal_gradient_matches_heat_solution() {
        // b = 0, sigma = 1, l = 0, h(x) = x^2: value is x^2 + (T - t), so
        // grad at x = 1 is 2. Oracle: closed-form heat solution.
        let spec = LinearBspdeSpec::new(
            1,
            1,
            1.0,
            |_t, _x| vec![0.0],
            |_t, _x| vec![1.0],
            |_t, _x| 0.0,
            |x| x[0] * x[0],
        );
        let h = default_fd_step(&[1.0]);
        assert!((h - 1e-3).abs() < 1e-15);
        let cfg = McConfig::new(50_000, 50, 13);
        let est = fk_gradient(&spec, 0.0, &[1.0], &cfg, h).unwrap();
        let grad = est.gradient.unwrap();
        let se = est.gradient_std_error.unwrap();
        let tol = (3.0 * se[0]).max(10.0 * h * h);
        assert!((grad[0] - 2.0).abs() <= tol, "grad {} (tol {tol})", grad[0]);
        // value x^2 + (T-t)
        assert!(
            (est.value - 2.0).abs() <= 3.0 * est.std_error + STAT_FLOOR,
            "value {}",
            est.value
        );
    }

    #[test]
    fn tower_property_holds_within_noise() {
        // l = 0 so the field is a martingale of the diffusion: the direct
        // estimate at (t, x) agrees with the two-stage estimate through an
        // intermediate time.
        let spec = LinearBspdeSpec::new(
            1,
            1,
            1.0,
            |_t, x| vec![-0.5 * x[0]],
            |_t, _x| vec![1.0],
            |_t, _x| 0.0,
            |x| (x[0]).tanh(),
        );
        let (t, s, x) = (0.2, 0.6, 0.3);
        let direct = fk_value(&spec, t, &[x], &McConfig::new(60_000, 60, 5)).unwrap();

        let outer = crate::sde::simulate_fields(
            |_tt, xx, out| out[0] = -0.5 * xx[0],
            |_tt, _xx, out| out[0] = 1.0,
            1,
            1,
            t,
            &[x],
            s,
            &McConfig::new(64, 30, 6),
        )
        .unwrap();
        let mut inner_means = Vec::new();
        let mut inner_se_sq = 0.0;
        for p in 0..outer.n_paths() {
            let xs = outer.state(p, outer.n_steps())[0];
            let inner = fk_value(
                &spec,
                s,
                &[xs],
                &McConfig::new(2_000, 40, 7 ^ (p as u64 + 1)),
            )
            .unwrap();
            inner_means.push(inner.value);
            inner_se_sq += inner.std_error * inner.std_error;
        }
        let nested = stats::mean_and_se(&inner_means);
        let combined = (direct.std_error.powi(2)
            + nested.std_error.powi(2)
            + inner_se_sq / (inner_means.len() as f64).powi(2))
        .sqrt();
        assert!(
            (direct.value - nested.mean).abs() <= 3.0 * combined + STAT_FLOOR,
            "direct {} vs nested {} (band {})",
            direct.value,
            nested.mean,
            3.0 * combined
        );
    }

    #[test]
    fn translation_identity_for_g_spec() {
        // g_i(t,x) - x_i solves the same equation with terminal 0 and source
        // b_i(t, x).
        let (_, g, root) = example_e_specs();
        let u_bar = meanfield::example_e_closed_forms(root).u_bar;
        let shifted = LinearBspdeSpec::new(
            1,
            1,
            1.0,
            move |_t, _x| vec![u_bar],
            |_t, _x| vec![1.0],
            move |_t, _x| u_bar,
            |_x| 0.0,
        );
        let cfg = McConfig::new(30_000, 50, 17);
        let (t, x) = (0.25, -0.6);
        let lhs = fk_value(&g, t, &[x], &cfg).unwrap();
        let rhs = fk_value(&shifted, t, &[x], &cfg).unwrap();
        let combined = (lhs.std_error.powi(2) + rhs.std_error.powi(2)).sqrt();
        assert!(
            ((lhs.value - x) - rhs.value).abs() <= 3.0 * combined + STAT_FLOOR,
            "{} vs {}",
            lhs.value - x,
            rhs.value
        );
    }

    #[test]
    fn crn_gradient_beats_independent_seeds() {
        let (_, g, _) = example_e_specs();
        let h = 1e-3;
        let cfg = McConfig::new(4_000, 40, 23);
        let crn = fk_gradient(&g, 0.1, &[0.0], &cfg, h).unwrap();
        let plus = fk_value(&g, 0.1, &[h], &McConfig::new(4_000, 40, 24)).unwrap();
        let minus = fk_value(&g, 0.1, &[-h], &McConfig::new(4_000, 40, 25)).unwrap();
        let indep_se =
            (plus.std_error.powi(2) + minus.std_error.powi(2)).sqrt() / (2.0 * h);
        let indep_grad = (plus.value - minus.value) / (2.0 * h);
        let crn_se = crn.gradient_std_error.as_ref().unwrap()[0];
        assert!(
            crn_se < indep_se,
            "CRN SE {crn_se} not smaller than independent {indep_se}"
        );
        // Both estimators target the same value (1.0); the independent one is
        // just far noisier.
        assert!((crn.gradient.unwrap()[0] - 1.0).abs() <= 1e-9);
        assert!((indep_grad - 1.0).abs() <= 3.0 * indep_se + STAT_FLOOR);
    }

    #[test]
    fn grid_point_zero_matches_plain_value_bitwise() {
        let (theta, _, _) = example_e_specs();
        let cfg = McConfig::new(2_000, 30, 31);
        let grid = fk_field_on_grid(&theta, 0.4, &[vec![0.5]], &cfg, None).unwrap();
        let single = fk_value(&theta, 0.4, &[0.5], &cfg).unwrap();
        assert_eq!(grid[0].value.to_bits(), single.value.to_bits());
        assert_eq!(grid[0].std_error.to_bits(), single.std_error.to_bits());
    }

    #[test]
    fn g_spec_terminal_row_on_grid() {
        let (_, g, _) = example_e_specs();
        let pts = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let out = fk_field_on_grid(&g, 1.0, &pts, &McConfig::new(10, 5, 1), None).unwrap();
        assert_eq!(out[0].value, -1.0);
        assert_eq!(out[1].value, 0.0);
        assert_eq!(out[2].value, 1.0);
    }

    #[test]
    fn theta_is_x_independent_on_a_grid() {
        let (theta, _, root) = example_e_specs();
        let forms = meanfield::example_e_closed_forms(root);
        let pts: Vec<Vec<f64>> = vec![-2.0, -1.0, 0.0, 1.0, 2.0]
            .into_iter()
            .map(|v| vec![v])
            .collect();
        let out = fk_field_on_grid(&theta, 0.0, &pts, &McConfig::new(20_000, 50, 41), None).unwrap();
        for e in &out {
            assert!(
                (e.value - forms.m_of_t(0.0)).abs() <= 3.0 * e.std_error + STAT_FLOOR,
                "value {} vs {}",
                e.value,
                forms.m_of_t(0.0)
            );
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (theta, _, _) = example_e_specs();
        assert!(fk_value(&theta, 1.5, &[0.0], &McConfig::new(10, 5, 1)).is_err());
        assert!(fk_gradient(&theta, 0.5, &[0.0], &McConfig::new(10, 5, 1), 0.0).is_err());
        assert!(fk_value(&theta, 0.5, &[0.0, 1.0], &McConfig::new(10, 5, 1)).is_err());
    }
}
