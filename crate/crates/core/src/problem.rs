//! Controlled system, cost functional and control domain.
//!
//! A problem is the tuple (b, sigma, f, h, G, U, T, x0): drift b(t,x,u),
//! control-free diffusion sigma(t,x), running cost f(t,x,u), terminal cost
//! h(x), a cost G applied to the mean terminal state, a control domain U, a
//! horizon T and an initial state. Coefficients are deterministic functions
//! of (t, x, u); every computed quantity downstream assumes that.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::sde::{McConfig, PathBatch};
use crate::stats;

pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type ScalarFieldFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Central finite-difference gradient with per-component step
/// `h * max(1, |x_i|)`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        xm[i] = x[i] - step;
        grad[i] = (f(&xp) - f(&xm)) / (2.0 * step);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    grad
}

/// Admissible control set.
#[derive(Clone)]
pub enum ControlDomain {
    /// Finite list of control vectors. Scans are exhaustive, ties break on
    /// the lowest index.
    FiniteSet(Vec<Vec<f64>>),
    /// Componentwise box `[lower, upper]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ControlDomain {
    pub fn finite_set(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::InvalidArgument(
                "finite control set must be non-empty".into(),
            ));
        }
        let l = points[0].len();
        if l == 0 || points.iter().any(|p| p.len() != l) {
            return Err(CoreError::InvalidArgument(
                "finite control set entries must share a positive dimension".into(),
            ));
        }
        Ok(ControlDomain::FiniteSet(points))
    }

    pub fn box_domain(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(CoreError::InvalidArgument(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u || !l.is_finite() || !u.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "box bounds must be finite with lower <= upper componentwise".into(),
            ));
        }
        Ok(ControlDomain::Box { lower, upper })
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ControlDomain::FiniteSet(points) => points[0].len(),
            ControlDomain::Box { lower, .. } => lower.len(),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        if u.len() != self.control_dim() {
            return false;
        }
        match self {
            ControlDomain::FiniteSet(points) => points
                .iter()
                .any(|p| p.iter().zip(u).all(|(a, b)| (a - b).abs() <= tol)),
            ControlDomain::Box { lower, upper } => u
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= lower[i] - tol && *v <= upper[i] + tol),
        }
    }

    /// Nearest admissible point (Euclidean for boxes, scan for finite sets).
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlDomain::FiniteSet(points) => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let d: f64 = p.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                points[best].clone()
            }
            ControlDomain::Box { lower, upper } => u
                .iter()
                .enumerate()
                .map(|(i, v)| v.clamp(lower[i], upper[i]))
                .collect(),
        }
    }
}

/// Control process representations.
#[derive(Clone)]
pub enum ControlPolicy {
    Constant(Vec<f64>),
    /// `values[i]` applies on `[breakpoints[i], breakpoints[i+1])`; the last
    /// value extends to the horizon. Breakpoints are strictly increasing.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Markov feedback u(t, x).
    Feedback(FeedbackFn),
}

impl ControlPolicy {
    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(CoreError::InvalidArgument(
                "piecewise policy needs equally many breakpoints and values".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::InvalidArgument(
                "piecewise breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(ControlPolicy::PiecewiseConstant {
            breakpoints,
            values,
        })
    }

    pub fn control_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            ControlPolicy::Constant(u) => u.clone(),
            ControlPolicy::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                let mut idx = 0usize;
                for (i, b) in breakpoints.iter().enumerate() {
                    if t >= *b {
                        idx = i;
                    } else {
                        break;
                    }
                }
                values[idx].clone()
            }
            ControlPolicy::Feedback(f) => f(t, x),
        }
    }

    pub fn as_constant(&self) -> Option<&[f64]> {
        match self {
            ControlPolicy::Constant(u) => Some(u),
            _ => None,
        }
    }

    /// Projection test: every emitted control lies in `domain` at the given
    /// sample points.
    pub fn check_in_domain(
        &self,
        domain: &ControlDomain,
        horizon: f64,
        sample_states: &[Vec<f64>],
        n_times: usize,
    ) -> Result<()> {
        for i in 0..n_times.max(2) {
            let t = horizon * i as f64 / n_times.max(2) as f64;
            for x in sample_states {
                let u = self.control_at(t, x);
                if !domain.contains(&u, 1e-9) {
                    return Err(CoreError::InvalidArgument(format!(
                        "policy emits control {u:?} outside the control domain at t = {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The controlled problem tuple.
#[derive(Clone)]
pub struct ControlProblem {
    state_dim: usize,
    noise_dim: usize,
    horizon: f64,
    initial_state: Vec<f64>,
    drift: DriftFn,
    diffusion: DiffusionFn,
    running_cost: RunningCostFn,
    terminal_cost: ScalarFieldFn,
    terminal_grad: GradientFn,
    meanfield_cost: ScalarFieldFn,
    meanfield_grad: GradientFn,
    control_domain: ControlDomain,
}

pub struct ControlProblemBuilder {
    state_dim: usize,
    noise_dim: usize,
    horizon: f64,
    initial_state: Vec<f64>,
    control_domain: ControlDomain,
    drift: Option<DriftFn>,
    diffusion: Option<DiffusionFn>,
    running_cost: Option<RunningCostFn>,
    terminal_cost: Option<ScalarFieldFn>,
    terminal_grad: Option<GradientFn>,
    meanfield_cost: Option<ScalarFieldFn>,
    meanfield_grad: Option<GradientFn>,
}

impl ControlProblem {
    pub fn builder(
        state_dim: usize,
        noise_dim: usize,
        horizon: f64,
        initial_state: Vec<f64>,
        control_domain: ControlDomain,
    ) -> ControlProblemBuilder {
        ControlProblemBuilder {
            state_dim,
            noise_dim,
            horizon,
            initial_state,
            control_domain,
            drift: None,
            diffusion: None,
            running_cost: None,
            terminal_cost: None,
            terminal_grad: None,
            meanfield_cost: None,
            meanfield_grad: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn control_domain(&self) -> &ControlDomain {
        &self.control_domain
    }

    pub fn drift(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.drift)(t, x, u)
    }

    /// Row-major `state_dim x noise_dim` diffusion matrix.
    pub fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.diffusion)(t, x)
    }

    pub fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.running_cost)(t, x, u)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    pub fn terminal_grad(&self, x: &[f64]) -> Vec<f64> {
        (self.terminal_grad)(x)
    }

    pub fn meanfield_cost(&self, mean: &[f64]) -> f64 {
        (self.meanfield_cost)(mean)
    }

    pub fn meanfield_grad(&self, mean: &[f64]) -> Vec<f64> {
        (self.meanfield_grad)(mean)
    }

    pub fn drift_fn(&self) -> DriftFn {
        Arc::clone(&self.drift)
    }

    pub fn diffusion_fn(&self) -> DiffusionFn {
        Arc::clone(&self.diffusion)
    }

    pub fn running_cost_fn(&self) -> RunningCostFn {
        Arc::clone(&self.running_cost)
    }

    pub fn terminal_cost_fn(&self) -> ScalarFieldFn {
        Arc::clone(&self.terminal_cost)
    }

    /// Verifies the supplied mean-field gradient against central finite
    /// differences at the given points (relative error <= 1e-5).
    pub fn check_meanfield_gradient(&self, points: &[Vec<f64>]) -> Result<()> {
        for m in points {
            let supplied = self.meanfield_grad(m);
            let numeric = fd_gradient(&|y: &[f64]| self.meanfield_cost(y), m, 1e-5);
            for i in 0..self.state_dim {
                let scale = numeric[i].abs().max(1.0);
                if (supplied[i] - numeric[i]).abs() / scale > 1e-5 {
                    return Err(CoreError::InvalidArgument(format!(
                        "mean-field gradient component {i} at {m:?} disagrees with finite \
                         differences: supplied {} vs numeric {}",
                        supplied[i], numeric[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ControlProblemBuilder {
    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn running_cost(
        mut self,
        f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Some(Arc::new(f));
        self
    }

    pub fn terminal_cost(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Some(Arc::new(f));
        self
    }

    pub fn terminal_grad(mut self, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.terminal_grad = Some(Arc::new(f));
        self
    }

    pub fn meanfield_cost(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.meanfield_cost = Some(Arc::new(f));
        self
    }

    pub fn meanfield_grad(mut self, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.meanfield_grad = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let n = self.state_dim;
        let d = self.noise_dim;
        if n == 0 || d == 0 {
            return Err(CoreError::InvalidArgument(
                "state and noise dimensions must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CoreError::InvalidArgument(
                "horizon must be positive and finite".into(),
            ));
        }
        if self.initial_state.len() != n {
            return Err(CoreError::InvalidArgument(format!(
                "initial state has length {}, expected {n}",
                self.initial_state.len()
            )));
        }
        let drift = self
            .drift
            .unwrap_or_else(|| Arc::new(move |_t: f64, _x: &[f64], _u: &[f64]| vec![0.0; n]));
        let diffusion = self.diffusion.unwrap_or_else(|| {
            let len = n * d;
            Arc::new(move |_t: f64, _x: &[f64]| vec![0.0; len])
        });
        let running_cost = self
            .running_cost
            .unwrap_or_else(|| Arc::new(|_t: f64, _x: &[f64], _u: &[f64]| 0.0));
        let terminal_cost: ScalarFieldFn = self
            .terminal_cost
            .unwrap_or_else(|| Arc::new(|_x: &[f64]| 0.0));
        let terminal_grad = self.terminal_grad.unwrap_or_else(|| {
            let h = Arc::clone(&terminal_cost);
            Arc::new(move |x: &[f64]| fd_gradient(&|y: &[f64]| h(y), x, 1e-6))
        });
        let meanfield_cost: ScalarFieldFn = self
            .meanfield_cost
            .unwrap_or_else(|| Arc::new(|_x: &[f64]| 0.0));
        let meanfield_grad = self.meanfield_grad.unwrap_or_else(|| {
            let g = Arc::clone(&meanfield_cost);
            Arc::new(move |x: &[f64]| fd_gradient(&|y: &[f64]| g(y), x, 1e-6))
        });
        Ok(ControlProblem {
            state_dim: n,
            noise_dim: d,
            horizon: self.horizon,
            initial_state: self.initial_state,
            drift,
            diffusion,
            running_cost,
            terminal_cost,
            terminal_grad,
            meanfield_cost,
            meanfield_grad,
            control_domain: self.control_domain,
        })
    }
}

/// The built-in worked example: scalar state dX = u dt + dW on [0, 1],
/// x0 = 0, running cost (u+1)^2/2, no terminal cost, mean-field cost
/// -exp(-m^2)/2 over U = [-2, 2].
pub fn build_example_e() -> ControlProblem {
    ControlProblem::builder(
        1,
        1,
        1.0,
        vec![0.0],
        ControlDomain::box_domain(vec![-2.0], vec![2.0]).expect("valid box"),
    )
    .drift(|_t, _x, u| vec![u[0]])
    .diffusion(|_t, _x| vec![1.0])
    .running_cost(|_t, _x, u| 0.5 * (u[0] + 1.0) * (u[0] + 1.0))
    .terminal_cost(|_x| 0.0)
    .terminal_grad(|_x| vec![0.0])
    .meanfield_cost(|m| -0.5 * (-m[0] * m[0]).exp())
    .meanfield_grad(|m| vec![m[0] * (-m[0] * m[0]).exp()])
    .build()
    .expect("builtin problem is valid")
}

/// Monte Carlo cost estimate.
///
/// `mean` is the full objective estimate; `std_error` covers the pathwise
/// running + terminal part only. The G term is a plug-in value at the sample
/// mean of the terminal state, with a separate delta-method standard error.
#[derive(Clone, Debug, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub pathwise_mean: f64,
    pub meanfield_value: f64,
    pub meanfield_delta_se: f64,
    pub mean_terminal_state: Vec<f64>,
    pub terminal_state_se: Vec<f64>,
    pub n_paths: usize,
}

impl CostEstimate {
    /// Pathwise SE and mean-field delta SE combined in quadrature.
    pub fn total_se(&self) -> f64 {
        (self.std_error * self.std_error + self.meanfield_delta_se * self.meanfield_delta_se)
            .sqrt()
    }

    fn from_samples(problem: &ControlProblem, fh: &[f64], terminals: &[f64]) -> Self {
        let n = problem.state_dim();
        let n_paths = fh.len();
        let fh_stats = stats::mean_and_se(fh);
        let mut mean_t = vec![0.0; n];
        let mut se_t = vec![0.0; n];
        for i in 0..n {
            let comp: Vec<f64> = (0..n_paths).map(|p| terminals[p * n + i]).collect();
            let s = stats::mean_and_se(&comp);
            mean_t[i] = s.mean;
            se_t[i] = s.std_error;
        }
        let g_value = problem.meanfield_cost(&mean_t);
        let g_grad = problem.meanfield_grad(&mean_t);
        // Delta method: Var G(mean) ~ Var(grad . X_T) / n_paths.
        let projections: Vec<f64> = (0..n_paths)
            .map(|p| {
                (0..n)
                    .map(|i| g_grad[i] * terminals[p * n + i])
                    .sum::<f64>()
            })
            .collect();
        let delta_se = stats::mean_and_se(&projections).std_error;
        CostEstimate {
            mean: fh_stats.mean + g_value,
            std_error: fh_stats.std_error,
            pathwise_mean: fh_stats.mean,
            meanfield_value: g_value,
            meanfield_delta_se: delta_se,
            mean_terminal_state: mean_t,
            terminal_state_se: se_t,
            n_paths,
        }
    }
}

fn check_policy_grid(policy: &ControlPolicy, times: &[f64]) -> Result<()> {
    if let ControlPolicy::PiecewiseConstant { breakpoints, .. } = policy {
        for b in breakpoints {
            let aligned = times.iter().any(|t| (t - b).abs() <= 1e-9);
            if !aligned {
                return Err(CoreError::GridMismatch(format!(
                    "policy breakpoint {b} does not lie on the simulation grid"
                )));
            }
        }
    }
    Ok(())
}

/// Cost of a stored path ensemble: left-endpoint rule for the running cost,
/// terminal cost at the final state, G at the sample mean of the terminal
/// state.
pub fn evaluate_cost(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    paths: &PathBatch,
) -> Result<CostEstimate> {
    let n = problem.state_dim();
    if paths.state_dim() != n {
        return Err(CoreError::GridMismatch(format!(
            "path batch state dimension {} does not match problem dimension {n}",
            paths.state_dim()
        )));
    }
    check_policy_grid(policy, paths.times())?;
    let n_paths = paths.n_paths();
    let n_steps = paths.n_steps();
    let dt = paths.dt();
    let constant_u = policy.as_constant().map(|u| u.to_vec());

    let per_path: Vec<(f64, Vec<f64>)> = stats::par_map_indexed(n_paths, |p| {
        let mut acc = 0.0;
        for k in 0..n_steps {
            let t = paths.times()[k];
            let x = paths.state(p, k);
            let cost = match &constant_u {
                Some(u) => problem.running_cost(t, x, u),
                None => {
                    let u = policy.control_at(t, x);
                    problem.running_cost(t, x, &u)
                }
            };
            acc += cost * dt;
        }
        let xt = paths.state(p, n_steps);
        (acc + problem.terminal_cost(xt), xt.to_vec())
    });

    let fh: Vec<f64> = per_path.iter().map(|(c, _)| *c).collect();
    let mut terminals = vec![0.0; n_paths * n];
    for (p, (_, xt)) in per_path.iter().enumerate() {
        terminals[p * n..(p + 1) * n].copy_from_slice(xt);
    }
    Ok(CostEstimate::from_samples(problem, &fh, &terminals))
}

/// Streaming variant: simulates under (problem, policy) from the problem's
/// initial state over [0, T] and accumulates the cost without retaining the
/// paths. Chunk boundaries are fixed, so results are identical for any
/// worker count.
pub fn evaluate_cost_mc(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    cfg: &McConfig,
) -> Result<CostEstimate> {
    cfg.validate()?;
    let n = problem.state_dim();
    let d = problem.noise_dim();
    let n_steps = cfg.n_steps;
    let t_span = problem.horizon();
    let dt = t_span / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let times: Vec<f64> = (0..=n_steps).map(|k| dt * k as f64).collect();
    check_policy_grid(policy, &times)?;
    let rng = CounterRng::new(cfg.seed);
    let constant_u = policy.as_constant().map(|u| u.to_vec());

    const CHUNK: usize = 1 << 16;
    let mut fh = Vec::with_capacity(cfg.n_paths);
    let mut terminals = vec![0.0; cfg.n_paths * n];

    let mut start = 0usize;
    while start < cfg.n_paths {
        let len = CHUNK.min(cfg.n_paths - start);
        let chunk: Vec<Result<(f64, Vec<f64>)>> = stats::par_map_indexed(len, |local| {
            let p = start + local;
            let mut x = problem.initial_state().to_vec();
            let mut dw = vec![0.0; d];
            let mut acc = 0.0;
            for k in 0..n_steps {
                let t = times[k];
                let (b, cost) = match &constant_u {
                    Some(u) => (problem.drift(t, &x, u), problem.running_cost(t, &x, u)),
                    None => {
                        let u = policy.control_at(t, &x);
                        (problem.drift(t, &x, &u), problem.running_cost(t, &x, &u))
                    }
                };
                acc += cost * dt;
                let sig = problem.diffusion(t, &x);
                for j in 0..d {
                    dw[j] = rng.standard_normal(p as u64, k as u64, j as u64) * sqrt_dt;
                }
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
            Ok((acc + problem.terminal_cost(&x), x))
        });
        for (local, item) in chunk.into_iter().enumerate() {
            let (cost, xt) = item?;
            fh.push(cost);
            let p = start + local;
            terminals[p * n..(p + 1) * n].copy_from_slice(&xt);
        }
        start += len;
    }
    Ok(CostEstimate::from_samples(problem, &fh, &terminals))
}
