//! Gaussian fundamental-solution kernel and the Picard integral solver.
//!
//! The frozen-coefficient second-order operator has the explicit Gaussian
//! kernel (negative exponent; stated with a positive sign in some
//! write-ups, which is not integrable). The stacked block coefficient is
//! rank-one, so the kernel path regularizes a -> a + eps*I before inverting.
//!
//! Quadrature: tensor-product trapezoid in space, left-endpoint in time,
//! with the s = t node taken in its delta limit. Each kernel row is
//! normalized by its quadrature mass on the box, which preserves constants
//! exactly and removes boundary-leakage bias; lags whose narrowest standard
//! deviation falls under ~0.7 grid spacings cannot be resolved by the grid
//! and are also evaluated in the delta limit.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::stats;

use super::{ghost, FbspdeSpec};

/// Cholesky factor of a small symmetric positive-definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    for (i, row) in a.iter().enumerate() {
        if row.len() != n {
            return Err(CoreError::NotPositiveDefinite);
        }
        for j in 0..n {
            if (a[i][j] - a[j][i]).abs() > 1e-9 * scale {
                return Err(CoreError::NotPositiveDefinite);
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(CoreError::NotPositiveDefinite);
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Fundamental-solution density of the frozen constant-coefficient operator
/// in even dimension 2n:
/// (4 pi (s-t))^{-n} det(a)^{-1/2} exp(-<a^{-1}(X-Z), X-Z> / (4 (s-t))).
pub fn gamma0_kernel(t: f64, x: &[f64], s: f64, z: &[f64], a: &[Vec<f64>]) -> Result<f64> {
    let dim = x.len();
    if z.len() != dim || a.len() != dim || dim == 0 {
        return Err(CoreError::InvalidArgument(
            "kernel arguments must share a positive dimension".into(),
        ));
    }
    if !(s > t) {
        return Err(CoreError::InvalidArgument(format!(
            "kernel requires s > t (got t = {t}, s = {s})"
        )));
    }
    let l = cholesky(a)?;
    let det: f64 = (0..dim).map(|i| l[i][i] * l[i][i]).product();
    let diff: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
    let w = chol_solve(&l, &diff);
    let quad: f64 = diff.iter().zip(&w).map(|(d, w)| d * w).sum();
    let lag = s - t;
    let norm = (4.0 * std::f64::consts::PI * lag).powf(-(dim as f64) / 2.0) / det.sqrt();
    Ok(norm * (-quad / (4.0 * lag)).exp())
}

/// Grid field used by the kernel solver (same layout as the grid solution).
#[derive(Clone, Debug)]
pub struct KernelField {
    pub t_grid: Vec<f64>,
    pub xy_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl KernelField {
    pub fn nx(&self) -> usize {
        self.xy_grid.len()
    }

    pub fn n_t(&self) -> usize {
        self.t_grid.len() - 1
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let sz = self.nx() * self.nx();
        &self.values[k * sz..(k + 1) * sz]
    }

    pub fn value_at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[(k * self.nx() + i) * self.nx() + j]
    }

    pub fn from_function(
        f: impl Fn(f64, f64, f64) -> f64,
        horizon: f64,
        l_bound: f64,
        n_xy: usize,
        n_t: usize,
    ) -> KernelField {
        let xs = stats::linspace(-l_bound, l_bound, n_xy);
        let ts: Vec<f64> = (0..=n_t).map(|k| horizon * k as f64 / n_t as f64).collect();
        let mut values = vec![0.0; (n_t + 1) * n_xy * n_xy];
        for (k, &t) in ts.iter().enumerate() {
            for i in 0..n_xy {
                for j in 0..n_xy {
                    values[(k * n_xy + i) * n_xy + j] = f(t, xs[i], xs[j]);
                }
            }
        }
        KernelField {
            t_grid: ts,
            xy_grid: xs,
            values,
        }
    }

    /// Terminal condition extended constantly backward (the usual Picard
    /// starting iterate).
    pub fn terminal_iterate(spec: &FbspdeSpec, l_bound: f64, n_xy: usize, n_t: usize) -> KernelField {
        KernelField::from_function(
            |_t, x, y| spec.terminal_xy(x, y),
            spec.horizon,
            l_bound,
            n_xy,
            n_t,
        )
    }

    pub fn sup_distance(&self, other: &KernelField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KernelConfig {
    /// Regularization added to the block coefficient: eps = factor * trace(a).
    pub eps_reg_factor: f64,
    /// Required kernel quadrature mass on the box (checked at the widest
    /// resolvable lag, at the box centre).
    pub min_mass: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            eps_reg_factor: 1e-3,
            min_mass: 1.0 - 1e-3,
        }
    }
}

/// Regularized 2x2 block coefficient (a00, a01, a11) at (t, Z).
fn reg_a(spec: &FbspdeSpec, cfg: &KernelConfig, t: f64, zx: f64, zy: f64) -> (f64, f64, f64) {
    let sx = spec.sigma(t, zx);
    let sy = spec.sigma(t, zy);
    let a00 = 0.5 * sx * sx;
    let a11 = 0.5 * sy * sy;
    let a01 = 0.5 * sx * sy;
    let eps = cfg.eps_reg_factor * (a00 + a11).max(1e-12);
    (a00 + eps, a01, a11 + eps)
}

/// Closed-form dimension-2 kernel value for offsets (dx, dy).
fn gamma2(a00: f64, a01: f64, a11: f64, lag: f64, dx: f64, dy: f64) -> f64 {
    let det = a00 * a11 - a01 * a01;
    let quad = (a11 * dx * dx - 2.0 * a01 * dx * dy + a00 * dy * dy) / det;
    (4.0 * std::f64::consts::PI * lag).recip() / det.sqrt() * (-quad / (4.0 * lag)).exp()
}

fn min_eigen_2x2(a00: f64, a01: f64, a11: f64) -> f64 {
    let tr = a00 + a11;
    let disc = ((a00 - a11) * (a00 - a11) + 4.0 * a01 * a01).sqrt();
    0.5 * (tr - disc)
}

/// Gradient fields and diagonal gradient of one level.
fn level_gradients(level: &[f64], nx: usize, dz: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut vx = vec![0.0; nx * nx];
    let mut vy = vec![0.0; nx * nx];
    for i in 0..nx {
        for j in 0..nx {
            let ii = i as isize;
            let jj = j as isize;
            vx[i * nx + j] =
                (ghost(level, nx, ii + 1, jj) - ghost(level, nx, ii - 1, jj)) / (2.0 * dz);
            vy[i * nx + j] =
                (ghost(level, nx, ii, jj + 1) - ghost(level, nx, ii, jj - 1)) / (2.0 * dz);
        }
    }
    let p_diag: Vec<f64> = (0..nx).map(|j| vx[j * nx + j]).collect();
    (vx, vy, p_diag)
}

/// One Picard update of the integral map:
/// theta(t, X) = int Gamma(t,X;T,Z) F(Z) dZ
///             + int_t^T int Gamma(t,X;s,Z) [ <b(s,Z,p_v), grad v(s,Z)> + f(s,Z,p_v) ] dZ ds,
/// with p_v the diagonal gradient of the iterate v.
pub fn picard_kernel_step(
    v: &KernelField,
    spec: &FbspdeSpec,
    cfg: &KernelConfig,
) -> Result<KernelField> {
    if !(cfg.eps_reg_factor > 0.0) {
        return Err(CoreError::InvalidArgument(
            "eps_reg_factor must be positive".into(),
        ));
    }
    let nx = v.nx();
    let n_t = v.n_t();
    let xs = v.xy_grid.clone();
    let dz = xs[1] - xs[0];
    let dt = v.t_grid[1] - v.t_grid[0];
    let sz = nx * nx;

    // trapezoid weights per axis
    let mut w = vec![dz; nx];
    w[0] = 0.5 * dz;
    w[nx - 1] = 0.5 * dz;

    // The coefficient is frozen per (t, Z); a constant diffusion lets every
    // lag share one offset table. Probe for constancy.
    let s_probe = spec.sigma(0.0, xs[0]);
    let sigma_const = {
        let mut constant = true;
        for f in [0.0, 0.37, 1.0] {
            for &x in [xs[0], 0.0, xs[nx - 1]].iter() {
                if (spec.sigma(f * spec.horizon, x) - s_probe).abs() > 1e-13 {
                    constant = false;
                }
            }
        }
        constant
    };
    if !sigma_const {
        return picard_kernel_step_direct(v, spec, cfg);
    }
    let (a00, a01, a11) = reg_a(spec, cfg, 0.0, 0.0, 0.0);
    let lam_min = min_eigen_2x2(a00, a01, a11);
    let resolvable = |lag: f64| (2.0 * lam_min * lag).sqrt() >= 0.7 * dz;

    // Integrand fields per source level.
    let mut g_fields: Vec<Vec<f64>> = Vec::with_capacity(n_t + 1);
    for l in 0..=n_t {
        let s = v.t_grid[l];
        let level = v.level(l);
        let (vx, vy, p_diag) = level_gradients(level, nx, dz);
        let mut g = vec![0.0; sz];
        for i in 0..nx {
            for j in 0..nx {
                let p = p_diag[j];
                g[i * nx + j] = spec.drift(s, xs[i], p) * vx[i * nx + j]
                    + spec.drift(s, xs[j], p) * vy[i * nx + j]
                    + spec.source_xy(s, xs[i], xs[j], p);
            }
        }
        g_fields.push(g);
    }
    let mut terminal = vec![0.0; sz];
    for i in 0..nx {
        for j in 0..nx {
            terminal[i * nx + j] = spec.terminal_xy(xs[i], xs[j]);
        }
    }

    // Offset tables and mass fields per lag index.
    let offs = 2 * nx - 1;
    let mut tables: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n_t + 1];
    for (ell, slot) in tables.iter_mut().enumerate().skip(1) {
        let lag = ell as f64 * dt;
        if !resolvable(lag) {
            continue;
        }
        let mut k_tab = vec![0.0; offs * offs];
        for di in 0..offs {
            for dj in 0..offs {
                let ddx = (di as isize - (nx as isize - 1)) as f64 * dz;
                let ddy = (dj as isize - (nx as isize - 1)) as f64 * dz;
                k_tab[di * offs + dj] = gamma2(a00, a01, a11, lag, ddx, ddy);
            }
        }
        // mass field: convolution of the table with the constant-1 field
        let mass: Vec<f64> = (0..sz)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / nx, idx % nx);
                let mut m = 0.0;
                for ip in 0..nx {
                    let di = (i as isize - ip as isize + nx as isize - 1) as usize;
                    for jp in 0..nx {
                        let dj = (j as isize - jp as isize + nx as isize - 1) as usize;
                        m += k_tab[di * offs + dj] * w[ip] * w[jp];
                    }
                }
                m
            })
            .collect();
        *slot = Some((k_tab, mass));
    }

    // Box-coverage check at the widest resolvable lag, box centre.
    let widest = (1..=n_t).rev().find(|&ell| tables[ell].is_some());
    if let Some(ell) = widest {
        let centre = (nx / 2) * nx + nx / 2;
        let mass = tables[ell].as_ref().unwrap().1[centre];
        if mass < cfg.min_mass {
            return Err(CoreError::QuadratureBoxTooSmall {
                mass,
                required: cfg.min_mass,
            });
        }
    }

    let convolve = |ell: usize, field: &[f64], out: &mut [f64]| {
        let (k_tab, mass) = tables[ell].as_ref().expect("resolvable lag");
        out.par_iter_mut().enumerate().for_each(|(idx, o)| {
            let (i, j) = (idx / nx, idx % nx);
            let mut acc = 0.0;
            for ip in 0..nx {
                let di = (i as isize - ip as isize + nx as isize - 1) as usize;
                let row = &k_tab[di * offs..(di + 1) * offs];
                let base = ip * nx;
                for jp in 0..nx {
                    let dj = (j as isize - jp as isize + nx as isize - 1) as usize;
                    acc += row[dj] * w[ip] * w[jp] * field[base + jp];
                }
            }
            *o = acc / mass[idx];
        });
    };

    let mut values = vec![0.0; (n_t + 1) * sz];
    values[n_t * sz..].copy_from_slice(&terminal);
    let mut out_level = vec![0.0; sz];
    let mut scratch = vec![0.0; sz];
    for k in 0..n_t {
        // terminal transport
        let ell_term = n_t - k;
        if tables[ell_term].is_some() {
            convolve(ell_term, &terminal, &mut out_level);
        } else {
            out_level.copy_from_slice(&terminal);
        }
        // time integral, left-endpoint: s_l = t_l for l = k..n_t-1
        for l in k..n_t {
            let ell = l - k;
            if ell == 0 || tables[ell].is_none() {
                for (o, gv) in out_level.iter_mut().zip(&g_fields[l]) {
                    *o += dt * gv;
                }
            } else {
                convolve(ell, &g_fields[l], &mut scratch);
                for (o, sv) in out_level.iter_mut().zip(&scratch) {
                    *o += dt * sv;
                }
            }
        }
        values[k * sz..(k + 1) * sz].copy_from_slice(&out_level);
    }
    Ok(KernelField {
        t_grid: v.t_grid.clone(),
        xy_grid: xs,
        values,
    })
}

/// Direct-evaluation fallback for position-dependent diffusion: the kernel
/// coefficient is frozen at (t, Z) per the parametrix construction. Meant
/// for small grids.
fn picard_kernel_step_direct(
    v: &KernelField,
    spec: &FbspdeSpec,
    cfg: &KernelConfig,
) -> Result<KernelField> {
    let nx = v.nx();
    let n_t = v.n_t();
    let xs = v.xy_grid.clone();
    let dz = xs[1] - xs[0];
    let dt = v.t_grid[1] - v.t_grid[0];
    let sz = nx * nx;
    let mut w = vec![dz; nx];
    w[0] = 0.5 * dz;
    w[nx - 1] = 0.5 * dz;

    let mut g_fields: Vec<Vec<f64>> = Vec::with_capacity(n_t + 1);
    for l in 0..=n_t {
        let s = v.t_grid[l];
        let level = v.level(l);
        let (vx, vy, p_diag) = level_gradients(level, nx, dz);
        let mut g = vec![0.0; sz];
        for i in 0..nx {
            for j in 0..nx {
                let p = p_diag[j];
                g[i * nx + j] = spec.drift(s, xs[i], p) * vx[i * nx + j]
                    + spec.drift(s, xs[j], p) * vy[i * nx + j]
                    + spec.source_xy(s, xs[i], xs[j], p);
            }
        }
        g_fields.push(g);
    }
    let mut terminal = vec![0.0; sz];
    for i in 0..nx {
        for j in 0..nx {
            terminal[i * nx + j] = spec.terminal_xy(xs[i], xs[j]);
        }
    }

    let mut values = vec![0.0; (n_t + 1) * sz];
    values[n_t * sz..].copy_from_slice(&terminal);
    let lam_min_at = |t: f64, zx: f64, zy: f64| {
        let (a00, a01, a11) = reg_a(spec, cfg, t, zx, zy);
        min_eigen_2x2(a00, a01, a11)
    };
    let results: Vec<Vec<f64>> = (0..n_t)
        .into_par_iter()
        .map(|k| {
            let t = v.t_grid[k];
            let mut out = vec![0.0; sz];
            let contrib = |field: &[f64], lag: f64, weight: f64, out: &mut [f64]| {
                for i in 0..nx {
                    for j in 0..nx {
                        let mut acc = 0.0;
                        let mut mass = 0.0;
                        for ip in 0..nx {
                            for jp in 0..nx {
                                let (a00, a01, a11) = reg_a(spec, cfg, t, xs[ip], xs[jp]);
                                let kv = gamma2(
                                    a00,
                                    a01,
                                    a11,
                                    lag,
                                    xs[i] - xs[ip],
                                    xs[j] - xs[jp],
                                ) * w[ip]
                                    * w[jp];
                                acc += kv * field[ip * nx + jp];
                                mass += kv;
                            }
                        }
                        out[i * nx + j] += weight * acc / mass.max(1e-300);
                    }
                }
            };
            let term_lag = (n_t - k) as f64 * dt;
            if (2.0 * lam_min_at(t, 0.0, 0.0) * term_lag).sqrt() >= 0.7 * dz {
                contrib(&terminal, term_lag, 1.0, &mut out);
            } else {
                out.copy_from_slice(&terminal);
            }
            for l in k..n_t {
                let lag = (l - k) as f64 * dt;
                if l == k || (2.0 * lam_min_at(t, 0.0, 0.0) * lag).sqrt() < 0.7 * dz {
                    for (o, gv) in out.iter_mut().zip(&g_fields[l]) {
                        *o += dt * gv;
                    }
                } else {
                    contrib(&g_fields[l], lag, dt, &mut out);
                }
            }
            out
        })
        .collect();
    for (k, level) in results.into_iter().enumerate() {
        values[k * sz..(k + 1) * sz].copy_from_slice(&level);
    }
    Ok(KernelField {
        t_grid: v.t_grid.clone(),
        xy_grid: xs,
        values,
    })
}

#[derive(Debug)]
pub struct KernelSolve {
    pub field: KernelField,
    pub update_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Iterates the kernel map to a fixed point from the terminal iterate.
/// Intended for short horizons, where the map contracts.
pub fn solve_by_kernel(
    spec: &FbspdeSpec,
    l_bound: f64,
    n_xy: usize,
    n_t: usize,
    cfg: &KernelConfig,
    tol: f64,
    max_iter: usize,
) -> Result<KernelSolve> {
    let mut v = KernelField::terminal_iterate(spec, l_bound, n_xy, n_t);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    for it in 1..=max_iter {
        let next = picard_kernel_step(&v, spec, cfg)?;
        let update = v.sup_distance(&next);
        history.push(update);
        v = next;
        iterations = it;
        if update <= tol {
            converged = true;
            break;
        }
    }
    Ok(KernelSolve {
        field: v,
        update_history: history,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(dim: usize) -> Vec<Vec<f64>> {
        (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn kernel_peak_value_is_the_normalization() {
        let a = eye(2);
        let v = gamma0_kernel(0.0, &[0.3, -0.2], 1.0, &[0.3, -0.2], &a).unwrap();
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn kernel_is_symmetric_for_constant_coefficient() {
        let a = vec![vec![1.2, 0.3], vec![0.3, 0.9]];
        let x = [0.4, -1.1];
        let z = [-0.7, 0.2];
        let v1 = gamma0_kernel(0.1, &x, 0.9, &z, &a).unwrap();
        let v2 = gamma0_kernel(0.1, &z, 0.9, &x, &a).unwrap();
        assert!((v1 - v2).abs() <= 1e-15 * v1.abs().max(1.0));
    }

    #[test]
    fn kernel_normalizes_under_quadrature() {
        // dimension 2, a = I, lag 1; trapezoid over [-12, 12]^2
        let a = eye(2);
        let n = 121usize;
        let dz = 24.0 / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let zx = -12.0 + dz * i as f64;
                let zy = -12.0 + dz * j as f64;
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                mass += wi * wj * dz * dz * gamma0_kernel(0.0, &[0.0, 0.0], 1.0, &[zx, zy], &a).unwrap();
            }
        }
        assert!((mass - 1.0).abs() <= 1e-6, "mass {mass}");
    }

    #[test]
    fn kernel_rejects_bad_inputs() {
        let asym = vec![vec![1.0, 0.5], vec![0.1, 1.0]];
        assert!(matches!(
            gamma0_kernel(0.0, &[0.0, 0.0], 1.0, &[0.0, 0.0], &asym),
            Err(CoreError::NotPositiveDefinite)
        ));
        let indef = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            gamma0_kernel(0.0, &[0.0, 0.0], 1.0, &[0.0, 0.0], &indef),
            Err(CoreError::NotPositiveDefinite)
        ));
        let a = eye(2);
        assert!(gamma0_kernel(1.0, &[0.0, 0.0], 1.0, &[0.0, 0.0], &a).is_err());
    }

    #[test]
    fn constant_terminal_passes_through_one_step() {
        let spec = FbspdeSpec::new(
            0.05,
            0.0,
            |_t, _x, _p| 0.0,
            |_t, _x| 1.0,
            |_t, _x, _p| 0.0,
            |_x| 4.5,
        );
        let cfg = KernelConfig {
            eps_reg_factor: 0.05,
            ..KernelConfig::default()
        };
        let v = KernelField::terminal_iterate(&spec, 2.0, 41, 8);
        let next = picard_kernel_step(&v, &spec, &cfg).unwrap();
        for val in &next.values {
            assert!((val - 4.5).abs() <= 1e-9, "value {val}");
        }
    }

    #[test]
    fn gaussian_mean_identity_one_step_from_zero() {
        // b = 0, f = 0, terminal F(x) = x: the kernel mean identity makes a
        // single step from the zero field return x.
        let spec = FbspdeSpec::new(
            0.02,
            0.0,
            |_t, _x, _p| 0.0,
            |_t, _x| 1.0,
            |_t, _x, _p| 0.0,
            |x: f64| x,
        );
        let cfg = KernelConfig {
            eps_reg_factor: 0.05,
            ..KernelConfig::default()
        };
        let zero = KernelField::from_function(|_t, _x, _y| 0.0, 0.02, 2.0, 41, 8);
        let next = picard_kernel_step(&zero, &spec, &cfg).unwrap();
        let nx = next.nx();
        for (i, &x) in next.xy_grid.iter().enumerate() {
            for (j, &y) in next.xy_grid.iter().enumerate() {
                if x.abs() <= 1.0 && y.abs() <= 1.0 {
                    let v = next.value_at(0, i, j);
                    assert!(
                        (v - x).abs() <= 1e-3,
                        "theta(0, {x}, {y}) = {v}, expected {x}"
                    );
                }
            }
        }
        let _ = nx;
    }

    #[test]
    fn undersized_box_is_rejected() {
        let spec = FbspdeSpec::new(
            1.0,
            0.0,
            |_t, _x, _p| 0.0,
            |_t, _x| 1.0,
            |_t, _x, _p| 0.0,
            |_x| 1.0,
        );
        let cfg = KernelConfig::default();
        let v = KernelField::terminal_iterate(&spec, 0.3, 21, 4);
        let err = picard_kernel_step(&v, &spec, &cfg).unwrap_err();
        assert!(matches!(err, CoreError::QuadratureBoxTooSmall { .. }), "{err}");
    }

    #[test]
    fn chapman_kolmogorov_convolution() {
        // int Gamma(t,X;s,Z) Gamma(s,Z;r,Y) dZ = Gamma(t,X;r,Y) for constant a
        let a = eye(2);
        let (t, s, r) = (0.0, 0.4, 1.0);
        let x = [0.2, -0.1];
        let y = [-0.3, 0.5];
        let n = 161usize;
        let half = 10.0;
        let dz = 2.0 * half / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let z = [-half + dz * i as f64, -half + dz * j as f64];
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                acc += wi
                    * wj
                    * dz
                    * dz
                    * gamma0_kernel(t, &x, s, &z, &a).unwrap()
                    * gamma0_kernel(s, &z, r, &y, &a).unwrap();
            }
        }
        let direct = gamma0_kernel(t, &x, r, &y, &a).unwrap();
        assert!(
            (acc - direct).abs() <= 1e-4,
            "convolved {acc} vs direct {direct}"
        );
    }
}
