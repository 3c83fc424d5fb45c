//! Seeded Brownian increments and batched Euler-Maruyama simulation.
//!
//! Increments are counter-generated per (seed, path, step, component), so a
//! batch is a pure function of its arguments: one worker or many, chunked or
//! not, the bits agree. Paths are embarrassingly parallel and simulated with
//! no shared mutable state.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::problem::{ControlPolicy, ControlProblem};
use crate::rng::CounterRng;

/// Monte Carlo ensemble configuration.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(CoreError::InvalidArgument(
                "n_paths and n_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A seeded ensemble of Euler-Maruyama trajectories with their increments.
///
/// Storage is flat: `states[(p * (n_steps+1) + k) * n + i]`,
/// `increments[(p * n_steps + k) * d + j]`.
#[derive(Clone, Debug)]
pub struct PathBatch {
    times: Vec<f64>,
    states: Vec<f64>,
    increments: Vec<f64>,
    n_paths: usize,
    state_dim: usize,
    noise_dim: usize,
    pub seed: u64,
    pub t_start: f64,
    pub t_end: f64,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps() as f64
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.state_dim;
        let idx = (path * (self.n_steps() + 1) + step) * n;
        &self.states[idx..idx + n]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.noise_dim;
        let idx = (path * self.n_steps() + step) * d;
        &self.increments[idx..idx + d]
    }

    /// Mean state at a step index.
    pub fn mean_state(&self, step: usize) -> Vec<f64> {
        let n = self.state_dim;
        let mut mean = vec![0.0; n];
        for p in 0..self.n_paths {
            let x = self.state(p, step);
            for i in 0..n {
                mean[i] += x[i];
            }
        }
        for m in &mut mean {
            *m /= self.n_paths as f64;
        }
        mean
    }

    /// New batch with paths reordered by `index_map` (new position p takes
    /// old path `index_map[p]`).
    pub fn reindexed(&self, index_map: &[usize]) -> PathBatch {
        assert_eq!(index_map.len(), self.n_paths);
        let n = self.state_dim;
        let d = self.noise_dim;
        let steps = self.n_steps();
        let mut states = Vec::with_capacity(self.states.len());
        let mut increments = Vec::with_capacity(self.increments.len());
        for &src in index_map {
            let s0 = src * (steps + 1) * n;
            states.extend_from_slice(&self.states[s0..s0 + (steps + 1) * n]);
            let i0 = src * steps * d;
            increments.extend_from_slice(&self.increments[i0..i0 + steps * d]);
        }
        PathBatch {
            times: self.times.clone(),
            states,
            increments,
            ..*self
        }
    }

    /// Debug CSV: one row per (path, step); increments are blank on the final
    /// step. Not a stability-guaranteed format.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "path,step,t")?;
        for i in 0..self.state_dim {
            write!(out, ",x{i}")?;
        }
        for j in 0..self.noise_dim {
            write!(out, ",dw{j}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for k in 0..=self.n_steps() {
                write!(out, "{p},{k},{}", self.times[k])?;
                for v in self.state(p, k) {
                    write!(out, ",{v}")?;
                }
                if k < self.n_steps() {
                    for v in self.increment(p, k) {
                        write!(out, ",{v}")?;
                    }
                } else {
                    for _ in 0..self.noise_dim {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// i.i.d. N(0, dt) increment array of shape [n_paths x n_steps x d], fully
/// determined by (seed, path, step, component).
pub fn brownian_increments(cfg: &McConfig, d: usize, dt: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(dt > 0.0) {
        return Err(CoreError::InvalidArgument("dt must be positive".into()));
    }
    let rng = CounterRng::new(cfg.seed);
    let sqrt_dt = dt.sqrt();
    let steps = cfg.n_steps;
    let mut out = vec![0.0; cfg.n_paths * steps * d];
    out.par_chunks_mut(steps * d)
        .enumerate()
        .for_each(|(p, row)| {
            for k in 0..steps {
                for j in 0..d {
                    row[k * d + j] = rng.standard_normal(p as u64, k as u64, j as u64) * sqrt_dt;
                }
            }
        });
    Ok(out)
}

/// Euler-Maruyama for the controlled equation:
/// X_{k+1} = X_k + b(t_k, X_k, u_k) dt + sigma(t_k, X_k) dW_k with
/// u_k = policy(t_k, X_k).
pub fn simulate(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    t_start: f64,
    init: &[f64],
    t_end: f64,
    cfg: &McConfig,
) -> Result<PathBatch> {
    let policy = policy.clone();
    let constant_u = policy.as_constant().map(|u| u.to_vec());
    simulate_fields(
        |t, x, out| match &constant_u {
            Some(u) => out.copy_from_slice(&problem.drift(t, x, u)),
            None => {
                let u = policy.control_at(t, x);
                out.copy_from_slice(&problem.drift(t, x, &u));
            }
        },
        |t, x, out| out.copy_from_slice(&problem.diffusion(t, x)),
        problem.state_dim(),
        problem.noise_dim(),
        t_start,
        init,
        t_end,
        cfg,
    )
}

/// Euler-Maruyama for a frozen-coefficient equation
/// dX = b(t, X) dt + sigma(t, X) dW. This is the form the field evaluators
/// and the decoupled forward equation use.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fields<B, S>(
    drift: B,
    diffusion: S,
    n: usize,
    d: usize,
    t_start: f64,
    init: &[f64],
    t_end: f64,
    cfg: &McConfig,
) -> Result<PathBatch>
where
    B: Fn(f64, &[f64], &mut [f64]) + Sync,
    S: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    cfg.validate()?;
    if !(t_start < t_end) {
        return Err(CoreError::InvalidArgument(format!(
            "t_start = {t_start} must be strictly below t_end = {t_end}"
        )));
    }
    if init.len() != n {
        return Err(CoreError::InvalidArgument(format!(
            "initial state has length {}, expected {n}",
            init.len()
        )));
    }
    let steps = cfg.n_steps;
    let dt = (t_end - t_start) / steps as f64;
    let sqrt_dt = dt.sqrt();
    let times: Vec<f64> = (0..=steps).map(|k| t_start + dt * k as f64).collect();
    let rng = CounterRng::new(cfg.seed);

    let mut states = vec![0.0; cfg.n_paths * (steps + 1) * n];
    let mut increments = vec![0.0; cfg.n_paths * steps * d];

    let status: Result<()> = states
        .par_chunks_mut((steps + 1) * n)
        .zip(increments.par_chunks_mut(steps * d))
        .enumerate()
        .map(|(p, (srow, irow))| -> Result<()> {
            srow[0..n].copy_from_slice(init);
            let mut x = init.to_vec();
            let mut b = vec![0.0; n];
            let mut sig = vec![0.0; n * d];
            for k in 0..steps {
                let t = times[k];
                drift(t, &x, &mut b);
                diffusion(t, &x, &mut sig);
                for j in 0..d {
                    irow[k * d + j] = rng.standard_normal(p as u64, k as u64, j as u64) * sqrt_dt;
                }
                for i in 0..n {
                    let mut diff = 0.0;
                    for j in 0..d {
                        diff += sig[i * d + j] * irow[k * d + j];
                    }
                    x[i] += b[i] * dt + diff;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFiniteState { path: p, step: k + 1 });
                }
                srow[(k + 1) * n..(k + 2) * n].copy_from_slice(&x);
            }
            Ok(())
        })
        .reduce(|| Ok(()), |a, b| a.and(b));
    status?;

    Ok(PathBatch {
        times,
        states,
        increments,
        n_paths: cfg.n_paths,
        state_dim: n,
        noise_dim: d,
        seed: cfg.seed,
        t_start,
        t_end,
    })
}
