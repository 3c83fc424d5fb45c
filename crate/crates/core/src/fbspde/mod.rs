//! Forward-backward stochastic-PDE solving by decoupling field.
//!
//! The coupled system (a forward diffusion whose drift reads the backward
//! field's spatial gradient at the forward state) is reduced in three steps:
//! solve a nonlinear parabolic system for the decoupling field theta(t,x,y),
//! run the decoupled forward diffusion, then assemble the backward fields
//! p(t,x) = theta(t,x,X(t)) and q(t,x) = sigma^T theta_y(t,x,X(t)).
//!
//! Internally the two spatial slots are stacked into X = (x, y) with the
//! block second-order coefficient
//! a = [[s(x)^2, s(x)s(y)], [s(x)s(y), s(y)^2]] / 2, which is rank-one by
//! construction: the grid solver handles the degeneracy natively, while the
//! kernel solver regularizes a by eps * I.
//!
//! Desk scale: scalar state and noise. Larger dimensions are rejected at the
//! interface.

mod kernel;
mod pde;

pub use kernel::{
    gamma0_kernel, picard_kernel_step, solve_by_kernel, KernelConfig, KernelField, KernelSolve,
};
pub use pde::solve_decoupling_pde;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::sde::{simulate_fields, McConfig, PathBatch};

pub type DriftPFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type SigmaFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type SourcePFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type StackedSourceFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type StackedTerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Coupled forward-backward specification: drift b(t, x, p) reading the
/// backward gradient, control-free diffusion s(t, x), source f(t, x, p) and
/// terminal value F(x).
///
/// The stacked-form hooks let test problems supply a source or terminal that
/// depends on the second stacked slot directly; ordinary specs never need
/// them.
#[derive(Clone)]
pub struct FbspdeSpec {
    pub horizon: f64,
    pub initial_state: f64,
    drift: DriftPFn,
    sigma: SigmaFn,
    source: SourcePFn,
    terminal: TerminalFn,
    stacked_source: Option<StackedSourceFn>,
    stacked_terminal: Option<StackedTerminalFn>,
}

impl FbspdeSpec {
    pub fn new(
        horizon: f64,
        initial_state: f64,
        drift: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        source: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FbspdeSpec {
            horizon,
            initial_state,
            drift: Arc::new(drift),
            sigma: Arc::new(sigma),
            source: Arc::new(source),
            terminal: Arc::new(terminal),
            stacked_source: None,
            stacked_terminal: None,
        }
    }

    pub fn with_stacked_source(
        mut self,
        f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.stacked_source = Some(Arc::new(f));
        self
    }

    pub fn with_stacked_terminal(
        mut self,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.stacked_terminal = Some(Arc::new(f));
        self
    }

    pub fn drift(&self, t: f64, pos: f64, p: f64) -> f64 {
        (self.drift)(t, pos, p)
    }

    pub fn sigma(&self, t: f64, pos: f64) -> f64 {
        (self.sigma)(t, pos)
    }

    /// Source in the stacked form (defaults to f(t, x, p), ignoring y).
    pub fn source_xy(&self, t: f64, x: f64, y: f64, p: f64) -> f64 {
        match &self.stacked_source {
            Some(f) => f(t, x, y, p),
            None => (self.source)(t, x, p),
        }
    }

    /// Terminal in the stacked form (defaults to F(x), ignoring y).
    pub fn terminal_xy(&self, x: f64, y: f64) -> f64 {
        match &self.stacked_terminal {
            Some(f) => f(x, y),
            None => (self.terminal)(x),
        }
    }

    pub fn terminal(&self, x: f64) -> f64 {
        (self.terminal)(x)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CoreError::InvalidArgument(
                "horizon must be positive and finite".into(),
            ));
        }
        if !self.initial_state.is_finite() {
            return Err(CoreError::InvalidArgument(
                "initial state must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Grid configuration for the decoupling-field solver. `n_t = None` picks
/// the time step from the explicit stability bound automatically.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridConfig {
    pub l_bound: f64,
    /// Points per spatial axis (including both endpoints).
    pub n_xy: usize,
    pub n_t: Option<usize>,
    pub picard_tol: f64,
    pub picard_max: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_bound > 0.0) {
            return Err(CoreError::InvalidArgument("l_bound must be positive".into()));
        }
        if self.n_xy < 5 {
            return Err(CoreError::InvalidArgument(
                "need at least 5 grid points per axis".into(),
            ));
        }
        if let Some(nt) = self.n_t {
            if nt == 0 {
                return Err(CoreError::InvalidArgument("n_t must be positive".into()));
            }
        }
        if !(self.picard_tol > 0.0) || self.picard_max == 0 {
            return Err(CoreError::InvalidArgument(
                "picard_tol must be positive and picard_max nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Grid solution of the decoupling field with stored first and second
/// partials (central differences of the stored values).
#[derive(Clone, Debug)]
pub struct PdeSolution {
    pub t_grid: Vec<f64>,
    pub xy_grid: Vec<f64>,
    pub l_bound: f64,
    pub dx: f64,
    pub dt: f64,
    pub nx: usize,
    /// time steps (levels are 0..=n_t)
    pub n_t: usize,
    pub theta: Vec<f64>,
    pub theta_x: Vec<f64>,
    pub theta_y: Vec<f64>,
    pub theta_xx: Vec<f64>,
    pub theta_yy: Vec<f64>,
    pub theta_xy: Vec<f64>,
    pub picard_sweeps: usize,
    pub update_history: Vec<f64>,
    pub final_update: f64,
}

/// Value of a grid level with linear extrapolation outside the box.
pub(crate) fn ghost(level: &[f64], nx: usize, i: isize, j: isize) -> f64 {
    let n = nx as isize;
    let along_x = |i: isize, j: usize| -> f64 {
        if i < 0 {
            let v0 = level[j];
            let v1 = level[nx + j];
            v0 + (-i) as f64 * (v0 - v1)
        } else if i >= n {
            let v0 = level[(nx - 1) * nx + j];
            let v1 = level[(nx - 2) * nx + j];
            v0 + (i - (n - 1)) as f64 * (v0 - v1)
        } else {
            level[i as usize * nx + j]
        }
    };
    if j < 0 {
        let v0 = along_x(i, 0);
        let v1 = along_x(i, 1);
        v0 + (-j) as f64 * (v0 - v1)
    } else if j >= n {
        let v0 = along_x(i, nx - 1);
        let v1 = along_x(i, nx - 2);
        v0 + (j - (n - 1)) as f64 * (v0 - v1)
    } else {
        along_x(i, j as usize)
    }
}

impl PdeSolution {
    #[inline]
    pub(crate) fn lidx(&self, k: usize) -> usize {
        k * self.nx * self.nx
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.theta[self.lidx(k)..self.lidx(k + 1)]
    }

    pub fn theta_at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.theta[self.lidx(k) + i * self.nx + j]
    }

    /// Trilinear interpolation of a stored field; the flag reports clamping
    /// to the box or the time range.
    pub fn interp(&self, field: &[f64], t: f64, x: f64, y: f64) -> (f64, bool) {
        let nx = self.nx;
        let mut clamped = false;
        let l = self.l_bound;
        let cx = if x < -l || x > l {
            clamped = true;
            x.clamp(-l, l)
        } else {
            x
        };
        let cy = if y < -l || y > l {
            clamped = true;
            y.clamp(-l, l)
        } else {
            y
        };
        let t_end = *self.t_grid.last().unwrap();
        let ct = if t < 0.0 || t > t_end {
            clamped = true;
            t.clamp(0.0, t_end)
        } else {
            t
        };
        let pos_t = ct / self.dt;
        let k0 = (pos_t.floor() as usize).min(self.n_t);
        let k1 = (k0 + 1).min(self.n_t);
        let wt = (pos_t - k0 as f64).clamp(0.0, 1.0);
        let pos_x = (cx + l) / self.dx;
        let i0 = (pos_x.floor() as usize).min(nx - 1);
        let i1 = (i0 + 1).min(nx - 1);
        let wx = (pos_x - i0 as f64).clamp(0.0, 1.0);
        let pos_y = (cy + l) / self.dx;
        let j0 = (pos_y.floor() as usize).min(nx - 1);
        let j1 = (j0 + 1).min(nx - 1);
        let wy = (pos_y - j0 as f64).clamp(0.0, 1.0);
        let at = |k: usize, i: usize, j: usize| field[k * nx * nx + i * nx + j];
        let plane = |k: usize| {
            at(k, i0, j0) * (1.0 - wx) * (1.0 - wy)
                + at(k, i1, j0) * wx * (1.0 - wy)
                + at(k, i0, j1) * (1.0 - wx) * wy
                + at(k, i1, j1) * wx * wy
        };
        (plane(k0) * (1.0 - wt) + plane(k1) * wt, clamped)
    }

    pub fn value(&self, t: f64, x: f64, y: f64) -> (f64, bool) {
        self.interp(&self.theta, t, x, y)
    }

    /// Binary export: magic, dims, box size and spacings, then the field
    /// values in row-major (t, x, y) order, little-endian f64.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(b"THG1")?;
        out.write_all(&(self.n_t as u32 + 1).to_le_bytes())?;
        out.write_all(&(self.nx as u32).to_le_bytes())?;
        out.write_all(&self.l_bound.to_le_bytes())?;
        out.write_all(&self.dt.to_le_bytes())?;
        out.write_all(&self.dx.to_le_bytes())?;
        for v in &self.theta {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// CSV slice of the field at time level `k` (columns x, y, theta).
    pub fn write_csv_slice<W: Write>(&self, out: &mut W, k: usize) -> std::io::Result<()> {
        writeln!(out, "x,y,theta")?;
        for i in 0..self.nx {
            for j in 0..self.nx {
                writeln!(
                    out,
                    "{},{},{}",
                    self.xy_grid[i],
                    self.xy_grid[j],
                    self.theta_at(k, i, j)
                )?;
            }
        }
        Ok(())
    }

    /// Samples an explicit function onto a grid solution (exact fields are
    /// injected this way for residual measurements).
    pub fn from_function(
        f: impl Fn(f64, f64, f64) -> f64,
        horizon: f64,
        l_bound: f64,
        n_xy: usize,
        n_t: usize,
    ) -> PdeSolution {
        let nx = n_xy;
        let dx = 2.0 * l_bound / (nx - 1) as f64;
        let dt = horizon / n_t as f64;
        let xy_grid: Vec<f64> = (0..nx).map(|i| -l_bound + dx * i as f64).collect();
        let t_grid: Vec<f64> = (0..=n_t).map(|k| dt * k as f64).collect();
        let mut theta = vec![0.0; (n_t + 1) * nx * nx];
        for (k, &t) in t_grid.iter().enumerate() {
            for i in 0..nx {
                for j in 0..nx {
                    theta[(k * nx + i) * nx + j] = f(t, xy_grid[i], xy_grid[j]);
                }
            }
        }
        let mut sol = PdeSolution {
            t_grid,
            xy_grid,
            l_bound,
            dx,
            dt,
            nx,
            n_t,
            theta,
            theta_x: Vec::new(),
            theta_y: Vec::new(),
            theta_xx: Vec::new(),
            theta_yy: Vec::new(),
            theta_xy: Vec::new(),
            picard_sweeps: 0,
            update_history: Vec::new(),
            final_update: 0.0,
        };
        sol.rebuild_derivatives();
        sol
    }

    /// Recomputes the stored derivative fields from the stored values by
    /// central differences with linear-extrapolation ghosts.
    pub(crate) fn rebuild_derivatives(&mut self) {
        let nx = self.nx;
        let total = (self.n_t + 1) * nx * nx;
        self.theta_x = vec![0.0; total];
        self.theta_y = vec![0.0; total];
        self.theta_xx = vec![0.0; total];
        self.theta_yy = vec![0.0; total];
        self.theta_xy = vec![0.0; total];
        for k in 0..=self.n_t {
            let base = self.lidx(k);
            let level: Vec<f64> = self.theta[base..base + nx * nx].to_vec();
            for i in 0..nx {
                for j in 0..nx {
                    let ii = i as isize;
                    let jj = j as isize;
                    let g = |di: isize, dj: isize| ghost(&level, nx, ii + di, jj + dj);
                    let idx = base + i * nx + j;
                    self.theta_x[idx] = (g(1, 0) - g(-1, 0)) / (2.0 * self.dx);
                    self.theta_y[idx] = (g(0, 1) - g(0, -1)) / (2.0 * self.dx);
                    self.theta_xx[idx] = (g(1, 0) - 2.0 * g(0, 0) + g(-1, 0)) / (self.dx * self.dx);
                    self.theta_yy[idx] = (g(0, 1) - 2.0 * g(0, 0) + g(0, -1)) / (self.dx * self.dx);
                    self.theta_xy[idx] =
                        (g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1)) / (4.0 * self.dx * self.dx);
                }
            }
        }
    }
}

/// Drift of the decoupled forward equation: b(t, y, theta_x(t, y, y)), with
/// the gradient bilinearly interpolated on the diagonal. The flag reports
/// clamped (out-of-box) evaluations.
pub fn decoupled_drift(pde: &PdeSolution, spec: &FbspdeSpec, t: f64, y: f64) -> (f64, bool) {
    let (p, clamped) = pde.interp(&pde.theta_x, t, y, y);
    (spec.drift(t, y, p), clamped)
}

/// Assembled forward-backward solution: the forward ensemble plus the
/// backward fields p(t, x) = theta(t, x, X(t)) and
/// q(t, x) = sigma(t, X(t)) theta_y(t, x, X(t)) per (time node, path,
/// grid x).
#[derive(Debug)]
pub struct FbspdeSolution {
    pub paths: PathBatch,
    pub xy_grid: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub n_paths: usize,
    pub nx: usize,
    pub clamp_events: usize,
    pub seed: u64,
}

impl FbspdeSolution {
    #[inline]
    fn idx(&self, k: usize, path: usize, i: usize) -> usize {
        (k * self.n_paths + path) * self.nx + i
    }

    pub fn p_at(&self, k: usize, path: usize, i: usize) -> f64 {
        self.p[self.idx(k, path, i)]
    }

    pub fn q_at(&self, k: usize, path: usize, i: usize) -> f64 {
        self.q[self.idx(k, path, i)]
    }
}

/// Steps 1-3: solve the decoupling field, run the decoupled forward
/// diffusion with the sde module, and assemble the backward fields on the
/// stored grid per path.
pub fn run_three_step(
    spec: &FbspdeSpec,
    grid: &GridConfig,
    mc: &McConfig,
) -> Result<FbspdeSolution> {
    let pde = solve_decoupling_pde(spec, grid)?;
    run_three_step_with(spec, &pde, mc)
}

/// Steps 2-3 against an already-solved decoupling field.
pub fn run_three_step_with(
    spec: &FbspdeSpec,
    pde: &PdeSolution,
    mc: &McConfig,
) -> Result<FbspdeSolution> {
    let clamps = AtomicUsize::new(0);
    let batch = simulate_fields(
        |t, x, out| {
            let (b, clamped) = decoupled_drift(pde, spec, t, x[0]);
            if clamped {
                clamps.fetch_add(1, Ordering::Relaxed);
            }
            out[0] = b;
        },
        |t, x, out| out[0] = spec.sigma(t, x[0]),
        1,
        1,
        0.0,
        &[spec.initial_state],
        spec.horizon,
        mc,
    )?;
    let nx = pde.nx;
    let n_paths = batch.n_paths();
    let steps = batch.n_steps();
    let mut p = vec![0.0; (steps + 1) * n_paths * nx];
    let mut q = vec![0.0; (steps + 1) * n_paths * nx];
    for k in 0..=steps {
        let t = batch.times()[k];
        for path in 0..n_paths {
            let xt = batch.state(path, k)[0];
            let sig = spec.sigma(t, xt);
            for i in 0..nx {
                let xg = pde.xy_grid[i];
                let (val, _) = pde.interp(&pde.theta, t, xg, xt);
                let (dy, _) = pde.interp(&pde.theta_y, t, xg, xt);
                let idx = (k * n_paths + path) * nx + i;
                p[idx] = val;
                q[idx] = sig * dy;
            }
        }
    }
    Ok(FbspdeSolution {
        paths: batch,
        xy_grid: pde.xy_grid.clone(),
        p,
        q,
        n_paths,
        nx,
        clamp_events: clamps.load(Ordering::Relaxed),
        seed: mc.seed,
    })
}

/// Maximum absolute residual of the stacked equation over the interior grid
/// (the inner half-box, away from the extrapolation boundary the truncated
/// domain imposes), with all derivatives taken by central differences of the
/// stored values (forward difference in time, spatial terms at the later
/// level).
pub fn pde_residual(pde: &PdeSolution, spec: &FbspdeSpec) -> f64 {
    let nx = pde.nx;
    let dx = pde.dx;
    let half = 0.5 * pde.l_bound + 1e-12;
    let inner: Vec<usize> = (1..nx - 1)
        .filter(|&i| pde.xy_grid[i].abs() <= half)
        .collect();
    let mut max_res: f64 = 0.0;
    for k in 0..pde.n_t {
        let t_next = pde.t_grid[k + 1];
        let level_next = pde.level(k + 1);
        let level_k = pde.level(k);
        // diagonal gradient of the later level
        let p_diag: Vec<f64> = (0..nx)
            .map(|j| {
                let jj = j as isize;
                (ghost(level_next, nx, jj + 1, jj) - ghost(level_next, nx, jj - 1, jj))
                    / (2.0 * dx)
            })
            .collect();
        for &i in &inner {
            for &j in &inner {
                let ii = i as isize;
                let jj = j as isize;
                let g = |di: isize, dj: isize| ghost(level_next, nx, ii + di, jj + dj);
                let sx = spec.sigma(t_next, pde.xy_grid[i]);
                let sy = spec.sigma(t_next, pde.xy_grid[j]);
                let cx = spec.drift(t_next, pde.xy_grid[i], p_diag[j]);
                let cy = spec.drift(t_next, pde.xy_grid[j], p_diag[j]);
                let theta_t =
                    (level_next[i * nx + j] - level_k[i * nx + j]) / pde.dt;
                let dxc = (g(1, 0) - g(-1, 0)) / (2.0 * dx);
                let dyc = (g(0, 1) - g(0, -1)) / (2.0 * dx);
                let dxx = (g(1, 0) - 2.0 * g(0, 0) + g(-1, 0)) / (dx * dx);
                let dyy = (g(0, 1) - 2.0 * g(0, 0) + g(0, -1)) / (dx * dx);
                let dxy = (g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1)) / (4.0 * dx * dx);
                let res = theta_t
                    + cx * dxc
                    + cy * dyc
                    + 0.5 * sx * sx * dxx
                    + 0.5 * sy * sy * dyy
                    + sx * sy * dxy
                    + spec.source_xy(t_next, pde.xy_grid[i], pde.xy_grid[j], p_diag[j]);
                max_res = max_res.max(res.abs());
            }
        }
    }
    max_res
}

/// Worked example with the optimal control frozen: constant drift, unit
/// diffusion, constant source, zero terminal. The decoupling field is
/// (u+1)^2 (1-t)/2, independent of both spatial slots.
pub fn example_e_frozen_spec(u_bar: f64) -> FbspdeSpec {
    let run = 0.5 * (u_bar + 1.0) * (u_bar + 1.0);
    FbspdeSpec::new(
        1.0,
        0.0,
        move |_t, _x, _p| u_bar,
        |_t, _x| 1.0,
        move |_t, _x, _p| run,
        |_x| 0.0,
    )
}

/// Test problem with the known closed-form field
/// exp(-t) sin(x) cos(y): drift b(t,x,p) = p, unit diffusion, and the source
/// obtained by substituting the field into the stacked equation. The source
/// and terminal need the stacked hooks because the second slot enters them
/// beyond the gradient argument.
pub fn manufactured_spec(horizon: f64) -> FbspdeSpec {
    FbspdeSpec::new(
        horizon,
        0.0,
        |_t, _x, p| p,
        |_t, _x| 1.0,
        |_t, _x, _p| 0.0,
        |x: f64| x.sin(),
    )
    .with_stacked_terminal(move |x: f64, y: f64| (-horizon).exp() * x.sin() * y.cos())
    .with_stacked_source(|t, x, y, p| {
        let e = (-t).exp();
        let theta = e * x.sin() * y.cos();
        let tx = e * x.cos() * y.cos();
        let ty = -e * x.sin() * y.sin();
        let txy = -e * x.cos() * y.sin();
        2.0 * theta - p * (tx + ty) - txy
    })
}

/// Closed-form field of the manufactured problem.
pub fn manufactured_exact(t: f64, x: f64, y: f64) -> f64 {
    (-t).exp() * x.sin() * y.cos()
}

/// x-derivative of the manufactured field.
pub fn manufactured_exact_x(t: f64, x: f64, y: f64) -> f64 {
    (-t).exp() * x.cos() * y.cos()
}
