//! Semi-discrete optimal transport between a grid density and an atomic
//! measure: Laguerre assignment, dual potential solve, masses, barycenters,
//! transport cost and gradients with respect to the atoms.
//!
//! Potentials follow the convention `cost_i(x) = ½|x − x_i|² − ψ_i`; a larger
//! `ψ_i` enlarges the cell of atom `i`. Every per-atom vector in this module
//! has one entry per atom (dead atoms included) and labels hold atom ids.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Density, Grid};
use crate::reduce;

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum SdotError {
    #[error("empty atomic measure")]
    EmptyMeasure,
    #[error("solver stalled: residual {residual:.3e} after {iterations} iterations")]
    Stalled { residual: f64, iterations: usize },
    #[error("atom set is inconsistent: {0}")]
    InvalidAtoms(String),
    #[error("expected {expected} potentials, got {got}")]
    PotentialCount { expected: usize, got: usize },
}

/// Atomic measure `Σ a_i δ_{x_i}` with alive flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSet {
    pub positions: Vec<Point>,
    pub weights: Vec<f64>,
    pub alive: Vec<bool>,
}

impl AtomSet {
    /// All atoms alive, weights taken as given.
    pub fn new(positions: Vec<Point>, weights: Vec<f64>) -> Result<Self, SdotError> {
        let alive = vec![true; positions.len()];
        let atoms = Self { positions, weights, alive };
        atoms.validate()?;
        Ok(atoms)
    }

    /// All atoms alive with weight `1/N`.
    pub fn uniform(positions: Vec<Point>) -> Self {
        let n = positions.len();
        Self { weights: vec![1.0 / n as f64; n], alive: vec![true; n], positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn alive_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.alive.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i)
    }

    /// Checks the simplex and liveness invariants.
    pub fn validate(&self) -> Result<(), SdotError> {
        let n = self.positions.len();
        if self.weights.len() != n || self.alive.len() != n {
            return Err(SdotError::InvalidAtoms("length mismatch".into()));
        }
        if self.alive_count() == 0 {
            return Err(SdotError::EmptyMeasure);
        }
        for i in 0..n {
            let w = self.weights[i];
            if !w.is_finite() || w < 0.0 {
                return Err(SdotError::InvalidAtoms(format!("weight {i} is {w}")));
            }
            if !self.alive[i] && w != 0.0 {
                return Err(SdotError::InvalidAtoms(format!("dead atom {i} has weight {w}")));
            }
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(SdotError::InvalidAtoms(format!("atom {i} position not finite")));
            }
        }
        let total: f64 = self.alive_ids().map(|i| self.weights[i]).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SdotError::InvalidAtoms(format!("alive weights sum to {total}")));
        }
        Ok(())
    }

    /// Smallest distance between two alive atoms (`+∞` with fewer than two).
    pub fn min_pairwise_distance(&self) -> f64 {
        let ids: Vec<usize> = self.alive_ids().collect();
        min_pairwise(ids.iter().map(|&i| self.positions[i]))
    }
}

pub(crate) fn min_pairwise(points: impl Iterator<Item = Point>) -> f64 {
    let pts: Vec<Point> = points.collect();
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.min(dist(pts[i], pts[j]));
        }
    }
    best
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Compact view of the alive atoms and their potentials, for argmin queries.
#[derive(Debug, Clone)]
pub struct PowerDiagram {
    ids: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    psi: Vec<f64>,
}

impl PowerDiagram {
    /// `potentials` has one entry per atom; dead entries are ignored.
    pub fn new(atoms: &AtomSet, potentials: &[f64]) -> Result<Self, SdotError> {
        if potentials.len() != atoms.len() {
            return Err(SdotError::PotentialCount { expected: atoms.len(), got: potentials.len() });
        }
        let ids: Vec<usize> = atoms.alive_ids().collect();
        if ids.is_empty() {
            return Err(SdotError::EmptyMeasure);
        }
        Ok(Self {
            xs: ids.iter().map(|&i| atoms.positions[i][0]).collect(),
            ys: ids.iter().map(|&i| atoms.positions[i][1]).collect(),
            psi: ids.iter().map(|&i| potentials[i]).collect(),
            ids,
        })
    }

    /// Atom id minimizing `½|p − x_i|² − ψ_i` (lowest id on ties) and the
    /// minimal value.
    #[inline]
    pub fn argmin(&self, p: Point) -> (usize, f64) {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for k in 0..self.xs.len() {
            let dx = p[0] - self.xs[k];
            let dy = p[1] - self.ys[k];
            let c = 0.5 * (dx * dx + dy * dy) - self.psi[k];
            if c < best {
                best = c;
                arg = k;
            }
        }
        (self.ids[arg], best)
    }

    /// As [`argmin`](Self::argmin) over the compact indices in `cand`,
    /// which must be increasing.
    #[inline]
    fn argmin_among(&self, p: Point, cand: &[usize]) -> (usize, f64) {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for &k in cand {
            let dx = p[0] - self.xs[k];
            let dy = p[1] - self.ys[k];
            let c = 0.5 * (dx * dx + dy * dy) - self.psi[k];
            if c < best {
                best = c;
                arg = k;
            }
        }
        (self.ids[arg], best)
    }
}

/// Labels every cell with the atom id owning its center.
pub fn assign_cells(grid: &Grid, atoms: &AtomSet, potentials: &[f64]) -> Result<Vec<u32>, SdotError> {
    let diagram = PowerDiagram::new(atoms, potentials)?;
    Ok(assign_with_costs(grid, &diagram).0)
}

fn assign_with_costs(grid: &Grid, diagram: &PowerDiagram) -> (Vec<u32>, Vec<f64>) {
    // Cells are scanned in TILE×TILE blocks against the atoms whose lower
    // bound on the block does not exceed the best upper bound; this is exact.
    const TILE: usize = 8;
    let n = grid.len();
    let nx = grid.nx;
    let mut labels = vec![0u32; n];
    let mut costs = vec![0.0; n];
    let psi_scale = diagram.psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let slack = 1e-12 * (1.0 + psi_scale + grid.domain.diameter().powi(2));
    labels
        .par_chunks_mut(nx * TILE)
        .zip(costs.par_chunks_mut(nx * TILE))
        .enumerate()
        .for_each(|(tj, (lrows, crows))| {
            let j0 = tj * TILE;
            let rows = lrows.len() / nx;
            let (y0, y1) = (grid.center_y(j0), grid.center_y(j0 + rows - 1));
            let mut cand = Vec::with_capacity(diagram.xs.len());
            for i0 in (0..nx).step_by(TILE) {
                let i1 = (i0 + TILE).min(nx);
                let (x0, x1) = (grid.center_x(i0), grid.center_x(i1 - 1));
                let mut ub = f64::INFINITY;
                for k in 0..diagram.xs.len() {
                    let dx = (diagram.xs[k] - x0).abs().max((diagram.xs[k] - x1).abs());
                    let dy = (diagram.ys[k] - y0).abs().max((diagram.ys[k] - y1).abs());
                    ub = ub.min(0.5 * (dx * dx + dy * dy) - diagram.psi[k]);
                }
                cand.clear();
                for k in 0..diagram.xs.len() {
                    let dx = (x0 - diagram.xs[k]).max(diagram.xs[k] - x1).max(0.0);
                    let dy = (y0 - diagram.ys[k]).max(diagram.ys[k] - y1).max(0.0);
                    if 0.5 * (dx * dx + dy * dy) - diagram.psi[k] <= ub + slack {
                        cand.push(k);
                    }
                }
                for r in 0..rows {
                    let y = grid.center_y(j0 + r);
                    for i in i0..i1 {
                        let (id, c) = diagram.argmin_among([grid.center_x(i), y], &cand);
                        lrows[r * nx + i] = id as u32;
                        crows[r * nx + i] = c;
                    }
                }
            }
        });
    (labels, costs)
}

/// Per-atom mass, first moment, chunked for reproducibility.
fn accumulate(density: &Density, labels: &[u32], n_atoms: usize) -> (Vec<f64>, Vec<Point>) {
    let grid = density.grid;
    let area = grid.cell_area();
    let n = grid.len();
    let partials: Vec<(Vec<f64>, Vec<Point>)> = (0..n.div_ceil(reduce::CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut m = vec![0.0; n_atoms];
            let mut mom = vec![[0.0; 2]; n_atoms];
            let lo = chunk * reduce::CHUNK;
            for c in lo..(lo + reduce::CHUNK).min(n) {
                let w = density.values[c] * area;
                let l = labels[c] as usize;
                let p = grid.center(c);
                m[l] += w;
                mom[l][0] += w * p[0];
                mom[l][1] += w * p[1];
            }
            (m, mom)
        })
        .collect();
    let mut masses = vec![0.0; n_atoms];
    let mut moments = vec![[0.0; 2]; n_atoms];
    for (m, mom) in partials {
        for i in 0..n_atoms {
            masses[i] += m[i];
            moments[i][0] += mom[i][0];
            moments[i][1] += mom[i][1];
        }
    }
    (masses, moments)
}

/// `ϱ(Lag_i)` for every atom id `< n_atoms`.
pub fn cell_masses(density: &Density, labels: &[u32], n_atoms: usize) -> Vec<f64> {
    accumulate(density, labels, n_atoms).0
}

/// Density-weighted centroids of the cells. Atoms owning no mass get their
/// own position as a sentinel and are flagged `true` in the second vector.
pub fn barycenters(density: &Density, labels: &[u32], atoms: &AtomSet) -> (Vec<Point>, Vec<bool>) {
    let (masses, moments) = accumulate(density, labels, atoms.len());
    finish_barycenters(&masses, &moments, atoms)
}

fn finish_barycenters(masses: &[f64], moments: &[Point], atoms: &AtomSet) -> (Vec<Point>, Vec<bool>) {
    let mut empty = vec![false; atoms.len()];
    let bary = (0..atoms.len())
        .map(|i| {
            if masses[i] > 0.0 {
                [moments[i][0] / masses[i], moments[i][1] / masses[i]]
            } else {
                empty[i] = atoms.alive[i];
                atoms.positions[i]
            }
        })
        .collect();
    (bary, empty)
}

/// Direction rule for the dual ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentDirection {
    /// Plain gradient `a − m`.
    Gradient,
    /// Gradient preconditioned by the grid estimate of the interface
    /// Laplacian `∂m/∂ψ`.
    Preconditioned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target for `max_i |m_i − a_i|`; `None` selects [`default_tolerance`].
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub direction: AscentDirection,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: None, max_iter: 200, direction: AscentDirection::Preconditioned }
    }
}

/// `max(1e-7, ½ · largest cell mass)`: masses cannot be resolved below one
/// cell's content.
pub fn default_tolerance(density: &Density) -> f64 {
    (0.5 * density.grid.cell_area() * density.max_value()).max(1e-7)
}

/// Result of a dual solve. Vectors are indexed by atom id.
#[derive(Debug, Clone, PartialEq)]
pub struct Tessellation {
    pub labels: Vec<u32>,
    /// Mean-zero over alive atoms; 0 for dead atoms.
    pub potentials: Vec<f64>,
    pub masses: Vec<f64>,
    pub barycenters: Vec<Point>,
    /// Alive atoms whose cell holds no mass (barycenter is a sentinel).
    pub empty: Vec<bool>,
    pub converged: bool,
    /// `max_i |m_i − a_i|` over alive atoms.
    pub residual: f64,
    pub iterations: usize,
    /// Dual objective at `potentials`, for the (floored) solve density.
    pub dual_value: f64,
}

struct Eval {
    labels: Vec<u32>,
    dual: f64,
    masses: Vec<f64>,
    moments: Vec<Point>,
}

fn evaluate(density: &Density, atoms: &AtomSet, psi: &[f64]) -> Eval {
    let diagram = PowerDiagram::new(atoms, psi).expect("validated by caller");
    let (labels, costs) = assign_with_costs(&density.grid, &diagram);
    let area = density.grid.cell_area();
    let primal = reduce::sum_by(costs.len(), |c| density.values[c] * costs[c]) * area;
    let linear: f64 = atoms.alive_ids().map(|i| atoms.weights[i] * psi[i]).sum();
    let (masses, moments) = accumulate(density, &labels, atoms.len());
    Eval { labels, dual: primal + linear, masses, moments }
}

fn gauge(psi: &mut [f64], atoms: &AtomSet) {
    let n = atoms.alive_count() as f64;
    let mean: f64 = atoms.alive_ids().map(|i| psi[i]).sum::<f64>() / n;
    for i in 0..psi.len() {
        psi[i] = if atoms.alive[i] { psi[i] - mean } else { 0.0 };
    }
}

fn residual(atoms: &AtomSet, masses: &[f64]) -> f64 {
    atoms.alive_ids().map(|i| (masses[i] - atoms.weights[i]).abs()).fold(0.0, f64::max)
}

/// Sparse symmetric estimate of `∂m/∂ψ`: a weighted graph Laplacian whose
/// edge weights are `∫_{Σ_ij} ρ dσ / |x_i − x_j|`, with interface length
/// read off the grid faces separating differently labeled cells.
struct InterfaceLaplacian {
    diag: Vec<f64>,
    edges: Vec<(usize, usize, f64)>,
}

impl InterfaceLaplacian {
    fn build(density: &Density, atoms: &AtomSet, labels: &[u32]) -> Self {
        let g = density.grid;
        let mut acc = std::collections::BTreeMap::<(usize, usize), f64>::new();
        let mut add = |a: u32, b: u32, rho: f64, face: f64, vertical: bool| {
            if a == b {
                return;
            }
            let (a, b) = (a.min(b) as usize, a.max(b) as usize);
            let xa = atoms.positions[a];
            let xb = atoms.positions[b];
            let d = dist(xa, xb);
            if d <= 0.0 {
                return;
            }
            let n = if vertical { (xb[0] - xa[0]).abs() / d } else { (xb[1] - xa[1]).abs() / d };
            *acc.entry((a, b)).or_insert(0.0) += rho * face * n / d;
        };
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.index(i, j);
                if i + 1 < g.nx {
                    let r = c + 1;
                    add(labels[c], labels[r], 0.5 * (density.values[c] + density.values[r]), g.hy, true);
                }
                if j + 1 < g.ny {
                    let u = c + g.nx;
                    add(labels[c], labels[u], 0.5 * (density.values[c] + density.values[u]), g.hx, false);
                }
            }
        }
        let mut diag = vec![0.0; atoms.len()];
        let edges: Vec<(usize, usize, f64)> = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
        for &(a, b, w) in &edges {
            diag[a] += w;
            diag[b] += w;
        }
        Self { diag, edges }
    }

    /// Solves `(L + D_reg) d = g` on alive atoms by conjugate gradients.
    fn solve(&self, atoms: &AtomSet, g: &[f64]) -> Vec<f64> {
        let alive: Vec<usize> = atoms.alive_ids().collect();
        let pos_diag: Vec<f64> = alive.iter().map(|&i| self.diag[i]).filter(|d| *d > 0.0).collect();
        let mean_diag = if pos_diag.is_empty() {
            1.0
        } else {
            pos_diag.iter().sum::<f64>() / pos_diag.len() as f64
        };
        // isolated atoms get a typical diagonal so their step has Newton scale
        let diag: Vec<f64> = (0..atoms.len())
            .map(|i| {
                if self.diag[i] > 0.0 {
                    self.diag[i] + 1e-6 * mean_diag
                } else {
                    mean_diag
                }
            })
            .collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            for &i in &alive {
                y[i] = diag[i] * x[i];
            }
            for &(a, b, w) in &self.edges {
                y[a] -= w * x[b];
                y[b] -= w * x[a];
            }
        };
        let n = atoms.len();
        let mut x = vec![0.0; n];
        let mut r = g.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let dot = |u: &[f64], v: &[f64]| alive.iter().map(|&i| u[i] * v[i]).sum::<f64>();
        let mut rr = dot(&r, &r);
        let stop = rr * 1e-20;
        for _ in 0..(4 * alive.len()).max(50) {
            if rr <= stop {
                break;
            }
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for &i in &alive {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for &i in &alive {
                p[i] = r[i] + beta * p[i];
            }
        }
        x
    }
}

/// Maximizes the concave dual
/// `D(ψ) = Σ_c ρ_c |c| min_i(½|x_c − x_i|² − ψ_i) + Σ_i a_i ψ_i`
/// by monotone ascent with Armijo backtracking. The density is floored at a
/// cell mass of `1e-12` and renormalized first.
///
/// On a grid the dual is piecewise linear, so its maximum can sit on a kink
/// where whole lines of cells tie. If the line search stalls there with a
/// residual no larger than the mass of one grid line, the iterate is the
/// discrete optimum and is returned as converged; a stall above that bound is
/// reported as [`SdotError::Stalled`].
/// Iterations without a new best residual after which a residual within a
/// few cells' mass is accepted.
const PLATEAU_ITERS: usize = 5;

pub fn solve_potentials(
    density: &Density,
    atoms: &AtomSet,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<Tessellation, SdotError> {
    if atoms.alive_count() == 0 {
        return Err(SdotError::EmptyMeasure);
    }
    let grid = density.grid;
    let floored = density.floored(1e-12 / grid.cell_area());
    let tol = opts.tol.unwrap_or_else(|| default_tolerance(&floored));
    let line_mass = grid.nx.max(grid.ny) as f64 * grid.cell_area() * floored.max_value();
    let stall_tol = tol.max(line_mass);
    let plateau_tol = tol.max(4.0 * grid.cell_area() * floored.max_value());

    let mut psi = match warm_start {
        Some(w) if w.len() == atoms.len() && w.iter().all(|v| v.is_finite()) => w.to_vec(),
        Some(w) if w.len() != atoms.len() => {
            return Err(SdotError::PotentialCount { expected: atoms.len(), got: w.len() })
        }
        _ => vec![0.0; atoms.len()],
    };
    gauge(&mut psi, atoms);
    let mut eval = evaluate(&floored, atoms, &psi);
    let mut step_scale = 1.0;
    let mut iterations = 0;
    let mut status = None;
    let mut best = (f64::INFINITY, psi.clone());
    let mut since_best = 0;

    while iterations < opts.max_iter {
        let g: Vec<f64> = (0..atoms.len())
            .map(|i| if atoms.alive[i] { atoms.weights[i] - eval.masses[i] } else { 0.0 })
            .collect();
        let res = residual(atoms, &eval.masses);
        if res < best.0 {
            best = (res, psi.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if res <= tol || (best.0 <= plateau_tol && since_best >= PLATEAU_ITERS) {
            status = Some(true);
            break;
        }
        iterations += 1;

        let mut directions = Vec::with_capacity(2);
        if opts.direction == AscentDirection::Preconditioned {
            let lap = InterfaceLaplacian::build(&floored, atoms, &eval.labels);
            let mut d = lap.solve(atoms, &g);
            gauge(&mut d, atoms);
            directions.push((d, 1.0));
        }
        directions.push((g.clone(), step_scale));

        let mut accepted = None;
        for (d, s0) in directions {
            let slope: f64 = atoms.alive_ids().map(|i| g[i] * d[i]).sum();
            if slope <= 0.0 {
                continue;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let psi_max = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut s = s0;
            while s * dmax > 1e-15 * (1.0 + psi_max) {
                let mut trial: Vec<f64> = (0..psi.len()).map(|i| psi[i] + s * d[i]).collect();
                gauge(&mut trial, atoms);
                let e = evaluate(&floored, atoms, &trial);
                if e.dual >= eval.dual + 1e-4 * s * slope {
                    accepted = Some((trial, e, s, s0));
                    break;
                }
                s *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        match accepted {
            Some((trial, e, s, s0)) => {
                debug_assert!(e.dual >= eval.dual, "dual ascent step decreased the objective");
                if s0 == step_scale {
                    // plain gradient steps adapt their length across iterations
                    step_scale = if s == s0 { 2.0 * s } else { s };
                }
                psi = trial;
                eval = e;
            }
            None => {
                let res = residual(atoms, &eval.masses);
                if res <= stall_tol {
                    status = Some(true);
                    break;
                }
                return Err(SdotError::Stalled { residual: res, iterations });
            }
        }
    }

    if best.0 < residual(atoms, &eval.masses) {
        psi = best.1;
        eval = evaluate(&floored, atoms, &psi);
    }
    let res = residual(atoms, &eval.masses);
    let converged = status.unwrap_or(res <= tol);
    let (barycenters, empty) = finish_barycenters(&eval.masses, &eval.moments, atoms);
    Ok(Tessellation {
        labels: eval.labels,
        potentials: psi,
        masses: eval.masses,
        barycenters,
        empty,
        converged,
        residual: res,
        iterations,
        dual_value: eval.dual,
    })
}

/// `½W₂²(ϱ, μ)` through the dual objective at the tessellation's potentials,
/// evaluated on `density` itself (not the floored copy).
pub fn transport_cost(density: &Density, atoms: &AtomSet, tess: &Tessellation) -> f64 {
    evaluate(density, atoms, &tess.potentials).dual
}

/// Primal cost `Σ_i ∫_{Lag_i} ½|x − x_i|² dϱ` of the labeled assignment.
pub fn primal_cost(density: &Density, atoms: &AtomSet, labels: &[u32]) -> f64 {
    let g = density.grid;
    reduce::sum_by(g.len(), |c| {
        let p = g.center(c);
        let x = atoms.positions[labels[c] as usize];
        let dx = p[0] - x[0];
        let dy = p[1] - x[1];
        density.values[c] * 0.5 * (dx * dx + dy * dy)
    }) * g.cell_area()
}

/// `∇_{x_i} ½W₂² = m_i (x_i − b_i)`; zero for dead atoms.
pub fn atom_gradient(atoms: &AtomSet, tess: &Tessellation) -> Vec<Point> {
    (0..atoms.len())
        .map(|i| {
            if !atoms.alive[i] {
                return [0.0; 2];
            }
            let x = atoms.positions[i];
            let b = tess.barycenters[i];
            [tess.masses[i] * (x[0] - b[0]), tess.masses[i] * (x[1] - b[1])]
        })
        .collect()
}

/// Per-cell Kantorovich potential `Φ(x_c) = ½|x_c − x_l|² − ψ_l` and its
/// gradient `x_c − x_l`, with `l` the cell label.
pub fn potential_field(grid: &Grid, atoms: &AtomSet, tess: &Tessellation) -> (Vec<f64>, Vec<Point>) {
    (0..grid.len())
        .map(|c| {
            let p = grid.center(c);
            let l = tess.labels[c] as usize;
            let x = atoms.positions[l];
            let v = [p[0] - x[0], p[1] - x[1]];
            (0.5 * (v[0] * v[0] + v[1] * v[1]) - tess.potentials[l], v)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn tiled_assignment_matches_brute_force(
            pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, -0.05..0.05f64), 1..40),
            nx in 1usize..40,
            ny in 1usize..40,
        ) {
            let g = Grid::new(crate::grid::Domain::unit_square(), nx, ny).unwrap();
            let atoms = AtomSet::uniform(pts.iter().map(|p| [p.0, p.1]).collect());
            let psi: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let diagram = PowerDiagram::new(&atoms, &psi).unwrap();
            let (labels, costs) = assign_with_costs(&g, &diagram);
            for c in 0..g.len() {
                let (id, cost) = diagram.argmin(g.center(c));
                prop_assert_eq!(labels[c] as usize, id);
                prop_assert_eq!(costs[c], cost);
            }
        }
    }

    fn two_atoms(a0: f64) -> AtomSet {
        AtomSet::new(vec![[0.25, 0.5], [0.75, 0.5]], vec![a0, 1.0 - a0]).unwrap()
    }

    /// First column index owned by atom 1 on row 0.
    fn boundary_column(grid: &Grid, labels: &[u32]) -> usize {
        (0..grid.nx).find(|&i| labels[i] == 1).unwrap_or(grid.nx)
    }

    #[test]
    fn single_atom_owns_everything() {
        let g = Grid::unit(16);
        let atoms = AtomSet::uniform(vec![[0.9, 0.1]]);
        let labels = assign_cells(&g, &atoms, &[0.0]).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        let d = Density::uniform(g);
        assert!((cell_masses(&d, &labels, 1)[0] - 1.0).abs() < 1e-12);
        let (b, empty) = barycenters(&d, &labels, &atoms);
        assert!((b[0][0] - 0.5).abs() < 1e-12 && (b[0][1] - 0.5).abs() < 1e-12);
        assert!(!empty[0]);
    }

    #[test]
    fn symmetric_bisector() {
        let g = Grid::unit(64);
        let atoms = two_atoms(0.5);
        let labels = assign_cells(&g, &atoms, &[0.0, 0.0]).unwrap();
        assert_eq!(boundary_column(&g, &labels), 32);
        let d = Density::uniform(g);
        let m = cell_masses(&d, &labels, 2);
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
        let (b, _) = barycenters(&d, &labels, &atoms);
        assert!((b[0][0] - 0.25).abs() < 1e-12 && (b[1][0] - 0.75).abs() < 1e-12);
        assert!((b[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shifted_bisector() {
        // ψ₁ − ψ₂ = (u − ½)/2 puts the boundary at u = 0.62
        let n = 100;
        let g = Grid::unit(n);
        let atoms = two_atoms(0.62);
        let labels = assign_cells(&g, &atoms, &[0.03, -0.03]).unwrap();
        let col = boundary_column(&g, &labels);
        assert!((col as f64 / n as f64 - 0.62).abs() <= 1.0 / n as f64);
        let d = Density::uniform(g);
        let m = cell_masses(&d, &labels, 2);
        assert!((m[0] - 0.62).abs() <= 1.0 / n as f64);
        let (b, _) = barycenters(&d, &labels, &atoms);
        assert!((b[0][0] - 0.31).abs() <= 1.0 / n as f64);
    }

    #[test]
    fn dead_atoms_never_own_cells() {
        let g = Grid::unit(16);
        let mut atoms = AtomSet::uniform(vec![[0.2, 0.2], [0.8, 0.8], [0.5, 0.5]]);
        atoms.alive[2] = false;
        atoms.weights = vec![0.5, 0.5, 0.0];
        let labels = assign_cells(&g, &atoms, &[0.0, 0.0, 100.0]).unwrap();
        assert!(labels.iter().all(|&l| l != 2));
    }

    #[test]
    fn no_alive_atoms_is_an_error() {
        let g = Grid::unit(4);
        let atoms = AtomSet { positions: vec![[0.5, 0.5]], weights: vec![0.0], alive: vec![false] };
        assert_eq!(assign_cells(&g, &atoms, &[0.0]).unwrap_err(), SdotError::EmptyMeasure);
        let d = Density::uniform(g);
        let err = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap_err();
        assert_eq!(err.to_string(), "empty atomic measure");
    }

    #[test]
    fn solve_symmetric_pair() {
        let d = Density::uniform(Grid::unit(64));
        let tess = solve_potentials(&d, &two_atoms(0.5), &SolverOptions::default(), None).unwrap();
        assert!(tess.converged);
        assert!(tess.potentials.iter().all(|p| p.abs() < 1e-12));
        assert!((tess.masses[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn solve_asymmetric_pair() {
        let n = 128;
        let d = Density::uniform(Grid::unit(n));
        for dir in [AscentDirection::Preconditioned, AscentDirection::Gradient] {
            let opts = SolverOptions { direction: dir, ..Default::default() };
            let tess = solve_potentials(&d, &two_atoms(0.62), &opts, None).unwrap();
            assert!(tess.converged, "{dir:?}");
            let delta = tess.potentials[0] - tess.potentials[1];
            let u = 0.5 + 2.0 * delta;
            assert!((u - 0.62).abs() <= 2.0 / n as f64, "{dir:?}: boundary at {u}");
            assert!((tess.potentials[0] + tess.potentials[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_atom_solve() {
        let g = Grid::unit(16);
        let d = Density::from_fn(g, |p| 1.0 + p[0]).unwrap();
        let atoms = AtomSet::uniform(vec![[0.3, 0.6]]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        assert_eq!(tess.potentials, vec![0.0]);
        assert!((tess.masses[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centered_atom_cost_is_one_twelfth() {
        let d = Density::uniform(Grid::unit(256));
        let atoms = AtomSet::uniform(vec![[0.5, 0.5]]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let cost = transport_cost(&d, &atoms, &tess);
        assert!((cost - 1.0 / 12.0).abs() < 1e-4);
    }

    #[test]
    fn collocated_mass_costs_nothing() {
        let g = Grid::unit(32);
        let mut values = vec![0.0; g.len()];
        let c = g.index(7, 20);
        values[c] = 1.0 / g.cell_area();
        let d = Density::new(g, values).unwrap();
        let atoms = AtomSet::uniform(vec![g.center(c)]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let cost = transport_cost(&d, &atoms, &tess);
        assert!(cost.abs() <= g.hx * g.hx);
    }

    #[test]
    fn symmetric_pair_cost_matches_pixel_sum() {
        let n = 64;
        let g = Grid::unit(n);
        let d = Density::uniform(g);
        let atoms = two_atoms(0.5);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        // brute force: every pixel goes to the nearer atom
        let mut oracle = 0.0;
        for c in 0..g.len() {
            let p = g.center(c);
            let x = if p[0] < 0.5 { [0.25, 0.5] } else { [0.75, 0.5] };
            oracle += 0.5 * ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2)) * g.cell_area();
        }
        assert!((transport_cost(&d, &atoms, &tess) - oracle).abs() < 1e-12);
        // continuum value ½(1/48 + 1/12)
        assert!((oracle - 0.5 * (1.0 / 48.0 + 1.0 / 12.0)).abs() < 1e-3);
    }

    #[test]
    fn gradient_examples() {
        let g = Grid::unit(64);
        let d = Density::uniform(g);
        let atoms = AtomSet::uniform(vec![[0.6, 0.5]]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let grad = atom_gradient(&atoms, &tess);
        assert!((grad[0][0] - 0.1).abs() < 1e-12 && grad[0][1].abs() < 1e-12);

        let centroidal = two_atoms(0.5);
        let tess = solve_potentials(&d, &centroidal, &SolverOptions::default(), None).unwrap();
        for v in atom_gradient(&centroidal, &tess) {
            assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn potential_field_examples() {
        let g = Grid::unit(8);
        let d = Density::uniform(g);
        let atoms = AtomSet::uniform(vec![[0.5, 0.5]]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let (phi, vel) = potential_field(&g, &atoms, &tess);
        for c in 0..g.len() {
            let p = g.center(c);
            let v = [p[0] - 0.5, p[1] - 0.5];
            assert!((vel[c][0] - v[0]).abs() < 1e-15 && (vel[c][1] - v[1]).abs() < 1e-15);
            assert!((phi[c] - 0.5 * (v[0] * v[0] + v[1] * v[1])).abs() < 1e-15);
        }
        // atom on a cell center: zero velocity there
        let atoms = AtomSet::uniform(vec![g.center(g.index(2, 5))]);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let (_, vel) = potential_field(&g, &atoms, &tess);
        assert_eq!(vel[g.index(2, 5)], [0.0, 0.0]);

        // symmetric pair, cell centered at (0.1, 0.5)
        let g = Grid::new(crate::grid::Domain::unit_square(), 5, 1).unwrap();
        let d = Density::uniform(g);
        let atoms = two_atoms(0.5);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let (_, vel) = potential_field(&g, &atoms, &tess);
        assert!((vel[0][0].hypot(vel[0][1]) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn gauge_shift_leaves_everything_unchanged() {
        let g = Grid::unit(48);
        let d = Density::from_fn(g, |p| 1.0 + 0.5 * (5.0 * p[0]).sin() * p[1]).unwrap();
        let atoms = AtomSet::new(
            vec![[0.2, 0.3], [0.7, 0.2], [0.5, 0.8], [0.85, 0.7]],
            vec![0.1, 0.3, 0.4, 0.2],
        )
        .unwrap();
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let shifted: Vec<f64> = tess.potentials.iter().map(|p| p + 0.37).collect();
        let labels = assign_cells(&g, &atoms, &shifted).unwrap();
        assert_eq!(labels, tess.labels);
        let mut t2 = tess.clone();
        t2.potentials = shifted;
        assert!((transport_cost(&d, &atoms, &t2) - transport_cost(&d, &atoms, &tess)).abs() < 1e-12);
        assert_eq!(cell_masses(&d, &labels, 4), cell_masses(&d, &tess.labels, 4));
    }

    #[test]
    fn dual_agrees_with_primal_when_masses_match() {
        let g = Grid::unit(64);
        let d = Density::uniform(g);
        let atoms = two_atoms(0.5);
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let primal = primal_cost(&d, &atoms, &tess.labels);
        assert!((primal - transport_cost(&d, &atoms, &tess)).abs() < 1e-12);
    }

    #[test]
    fn two_atom_solve_matches_brute_force_scan() {
        // scan δ = ψ₁ − ψ₂ for the mass-balancing value
        let g = Grid::unit(64);
        let d = Density::from_fn(g, |p| 1.0 + p[0] * p[1]).unwrap();
        let atoms = AtomSet::new(vec![[0.3, 0.4], [0.6, 0.7]], vec![0.35, 0.65]).unwrap();
        let diam2 = 2.0;
        let mut best = (f64::INFINITY, 0.0);
        let mut k = 0;
        loop {
            let delta = -diam2 / 2.0 + k as f64 * 1e-4;
            if delta > diam2 / 2.0 {
                break;
            }
            let labels = assign_cells(&g, &atoms, &[delta / 2.0, -delta / 2.0]).unwrap();
            let m = cell_masses(&d, &labels, 2);
            let r = (m[0] - 0.35).abs();
            if r < best.0 {
                best = (r, delta);
            }
            k += 1;
        }
        let tess = solve_potentials(&d, &atoms, &SolverOptions::default(), None).unwrap();
        let delta = tess.potentials[0] - tess.potentials[1];
        let labels_scan = assign_cells(&g, &atoms, &[best.1 / 2.0, -best.1 / 2.0]).unwrap();
        let m_scan = cell_masses(&d, &labels_scan, 2);
        // both land on the same discrete mass level
        assert!((tess.masses[0] - m_scan[0]).abs() <= 2.0 * default_tolerance(&d) + 1e-12);
        // and within the mass-equivalent flat range of δ
        let labels_solver = assign_cells(&g, &atoms, &[delta / 2.0, -delta / 2.0]).unwrap();
        let m_solver = cell_masses(&d, &labels_solver, 2);
        assert!((m_solver[0] - 0.35).abs() <= best.0 + 2.0 * default_tolerance(&d));
        assert!((delta - best.1).abs() < 2e-4 || (m_solver[0] - m_scan[0]).abs() < 1e-12);
    }
}
