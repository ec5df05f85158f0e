//! Explicit finite-volume integrator for `∂ρ/∂t = ΔP(ρ) + div(ρ ∇Φ)` with
//! no-flux boundaries.
//!
//! Face fluxes are `J = −(P(ρ_R) − P(ρ_L))/h + ρ_up u`, where
//! `u = −∇Φ = T(x) − x` is the drift toward the owning atom and `ρ_up` the
//! upwind cell value. Boundary faces carry no flux, so the cell update
//! telescopes and total mass is conserved up to rounding.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Density, DiffusionLaw, Grid};
use crate::sdot::{AtomSet, PowerDiagram, SdotError, Tessellation};

#[derive(Debug, Error, PartialEq)]
pub enum PdeError {
    #[error("negative density {value:.3e} at cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("nonfinite state")]
    NonFinite,
    #[error("horizon must be positive and finite")]
    InvalidHorizon,
    #[error(transparent)]
    Sdot(#[from] SdotError),
}

/// Drift velocity normal to each face, frozen over a macro step.
///
/// `u` lives on vertical faces, `(nx + 1) × ny`, index `j * (nx + 1) + i` for
/// the face at `x_min + i·hx`. `v` lives on horizontal faces, `nx × (ny + 1)`,
/// index `j * nx + i` for the face at `y_min + j·hy`. Boundary entries are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocity {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FaceVelocity {
    pub fn zero(grid: Grid) -> Self {
        Self { grid, u: vec![0.0; (grid.nx + 1) * grid.ny], v: vec![0.0; grid.nx * (grid.ny + 1)] }
    }

    /// Samples `field` at interior face midpoints; boundary faces stay 0.
    pub fn from_fn(grid: Grid, field: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut vel = Self::zero(grid);
        let d = grid.domain;
        for j in 0..grid.ny {
            for i in 1..grid.nx {
                let p = [d.x_min + i as f64 * grid.hx, grid.center_y(j)];
                vel.u[j * (grid.nx + 1) + i] = field(p)[0];
            }
        }
        for j in 1..grid.ny {
            for i in 0..grid.nx {
                let p = [grid.center_x(i), d.y_min + j as f64 * grid.hy];
                vel.v[j * grid.nx + i] = field(p)[1];
            }
        }
        vel
    }

    /// Largest total outflow speed of a cell, `Σ_faces max(0, u·n)`.
    pub fn max_outflow(&self) -> f64 {
        let g = self.grid;
        let mut worst: f64 = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let left = self.u[j * (g.nx + 1) + i];
                let right = self.u[j * (g.nx + 1) + i + 1];
                let down = self.v[j * g.nx + i];
                let up = self.v[(j + 1) * g.nx + i];
                let out = (-left).max(0.0) + right.max(0.0) + (-down).max(0.0) + up.max(0.0);
                worst = worst.max(out);
            }
        }
        worst
    }
}

/// Drift `x_l − p` at each interior face midpoint `p`, with `l` the Laguerre
/// label of `p` itself.
pub fn face_velocities(grid: &Grid, atoms: &AtomSet, tess: &Tessellation) -> Result<FaceVelocity, PdeError> {
    let diagram = PowerDiagram::new(atoms, &tess.potentials)?;
    Ok(FaceVelocity::from_fn(*grid, |p| {
        let (l, _) = diagram.argmin(p);
        let x = atoms.positions[l];
        [x[0] - p[0], x[1] - p[1]]
    }))
}

/// `safety · min(h² / (4 max P'(ρ)), h / max_outflow)` with `h = min(hx, hy)`.
/// Infinite when neither diffusion nor drift constrains the step.
pub fn cfl_timestep(grid: &Grid, density: &Density, law: DiffusionLaw, vel: &FaceVelocity, safety: f64) -> f64 {
    cfl_from_parts(grid, law.pressure_derivative(density.max_value()), vel.max_outflow(), safety)
}

fn cfl_from_parts(grid: &Grid, max_dp: f64, max_out: f64, safety: f64) -> f64 {
    let h = grid.h();
    let diffusive = if max_dp > 0.0 { h * h / (4.0 * max_dp) } else { f64::INFINITY };
    let advective = if max_out > 0.0 { h / max_out } else { f64::INFINITY };
    safety * diffusive.min(advective)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub substeps: usize,
    pub min_density: f64,
    pub max_density: f64,
}

/// Advances `density` over `horizon` with the velocity frozen, sub-stepping
/// at the CFL bound (last sub-step truncated).
pub fn step_density(
    density: &Density,
    law: DiffusionLaw,
    vel: &FaceVelocity,
    horizon: f64,
    safety: f64,
) -> Result<(Density, StepStats), PdeError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(PdeError::InvalidHorizon);
    }
    let grid = density.grid;
    let max_out = vel.max_outflow();
    let mut cur = density.values.clone();
    let mut next = vec![0.0; cur.len()];
    let mut pressure = vec![0.0; cur.len()];
    let mut stats = StepStats {
        substeps: 0,
        min_density: density.min_value(),
        max_density: density.max_value(),
    };
    let mut elapsed = 0.0;
    while elapsed < horizon {
        let dt_cfl = cfl_from_parts(&grid, law.pressure_derivative(stats.max_density), max_out, safety);
        let remaining = horizon - elapsed;
        let dt = if dt_cfl >= remaining { remaining } else { dt_cfl };
        if law != DiffusionLaw::Linear {
            pressure.par_iter_mut().zip(cur.par_iter()).for_each(|(p, r)| *p = law.pressure(*r));
        }
        let p: &[f64] = if law == DiffusionLaw::Linear { &cur } else { &pressure };
        let (lo, hi) = substep(&grid, &cur, p, vel, dt, &mut next);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(PdeError::NonFinite);
        }
        if lo < -1e-12 {
            let cell = next.iter().position(|v| *v == lo).unwrap_or(0);
            return Err(PdeError::NegativeDensity { cell, value: lo });
        }
        if lo < 0.0 {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        std::mem::swap(&mut cur, &mut next);
        stats.substeps += 1;
        stats.min_density = lo.max(0.0);
        stats.max_density = hi;
        elapsed = if dt == remaining { horizon } else { elapsed + dt };
    }
    Ok((Density { grid, values: cur }, stats))
}

/// One explicit update into `out`; returns (min, max) of the new values.
fn substep(grid: &Grid, rho: &[f64], p: &[f64], vel: &FaceVelocity, dt: f64, out: &mut [f64]) -> (f64, f64) {
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.hx, grid.hy);
    let rows_per_task = (8192 / nx).max(1);
    // flux through the vertical face left of cell (i, j); zero on the boundary
    let flux_x = |i: usize, j: usize| -> f64 {
        if i == 0 || i == nx {
            return 0.0;
        }
        let l = j * nx + i - 1;
        let r = l + 1;
        let u = vel.u[j * (nx + 1) + i];
        let up = if u >= 0.0 { rho[l] } else { rho[r] };
        -(p[r] - p[l]) / hx + up * u
    };
    let flux_y = |i: usize, j: usize| -> f64 {
        if j == 0 || j == ny {
            return 0.0;
        }
        let b = (j - 1) * nx + i;
        let t = b + nx;
        let v = vel.v[j * nx + i];
        let up = if v >= 0.0 { rho[b] } else { rho[t] };
        -(p[t] - p[b]) / hy + up * v
    };
    out.par_chunks_mut(nx * rows_per_task)
        .enumerate()
        .map(|(k, chunk)| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (r, row) in chunk.chunks_mut(nx).enumerate() {
                let j = k * rows_per_task + r;
                for (i, cell) in row.iter_mut().enumerate() {
                    let c = j * nx + i;
                    let v = rho[c] + dt / hx * (flux_x(i, j) - flux_x(i + 1, j))
                        + dt / hy * (flux_y(i, j) - flux_y(i, j + 1));
                    *cell = v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            (lo, hi)
        })
        .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)))
}
