//! One-dimensional minimizing movement scheme on `[0, 1]`, used as an
//! independent oracle for the splitting integrator. Transport distances are
//! exact for piecewise-constant densities via quantile functions.

use thiserror::Error;

use crate::grid::DiffusionLaw;

#[derive(Debug, Error, PartialEq)]
pub enum Jko1dError {
    #[error("unsorted atoms")]
    UnsortedAtoms,
    #[error("inner stall")]
    InnerStall,
    #[error("inner iteration limit of {0} reached")]
    InnerLimit(usize),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid atoms: {0}")]
    InvalidAtoms(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Piecewise-constant probability density on `n` uniform cells of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Density1D {
    pub values: Vec<f64>,
}

impl Density1D {
    pub fn new(values: Vec<f64>) -> Result<Self, Jko1dError> {
        if values.is_empty() {
            return Err(Jko1dError::InvalidDensity("no cells".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Jko1dError::InvalidDensity(format!("cell {k} is negative or nonfinite")));
        }
        let d = Self { values };
        let mass = d.mass();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Jko1dError::InvalidDensity(format!("mass {mass} is not 1")));
        }
        Ok(d)
    }

    /// Scales nonnegative `values` to unit mass.
    pub fn normalized(values: Vec<f64>) -> Result<Self, Jko1dError> {
        let h = 1.0 / values.len().max(1) as f64;
        let total: f64 = values.iter().sum::<f64>() * h;
        if !(total > 0.0 && total.is_finite()) {
            return Err(Jko1dError::InvalidDensity("zero or nonfinite total mass".into()));
        }
        Self::new(values.into_iter().map(|v| v / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { values: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.h()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.h()
    }

    /// `∫ F(p)`.
    pub fn internal_energy(&self, law: DiffusionLaw) -> f64 {
        self.values.iter().map(|&v| law.energy_density(v)).sum::<f64>() * self.h()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.values.iter().copied().fold(0.0, f64::max);
        }
        (self.values.iter().map(|v| v.powf(p)).sum::<f64>() * self.h()).powf(1.0 / p)
    }

    /// Generalized inverse CDF, `s ∈ [0, 1]`.
    pub fn quantile(&self, s: f64) -> f64 {
        let h = self.h();
        let mut acc = 0.0;
        let mut last = 0.0;
        for (k, &v) in self.values.iter().enumerate() {
            let m = v * h;
            if m <= 0.0 {
                continue;
            }
            last = (k + 1) as f64 * h;
            if acc + m >= s {
                return (k as f64 * h + h * ((s - acc) / m).clamp(0.0, 1.0)).min(1.0);
            }
            acc += m;
        }
        last
    }

    /// One line of comma-separated values.
    pub fn to_csv_line(&self) -> String {
        self.values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
    }

    pub fn from_csv_line(line: &str) -> Result<Self, Jko1dError> {
        let values = line
            .trim()
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Jko1dError::InvalidDensity(e.to_string()))?;
        Self::new(values)
    }
}

/// Sorted atom positions in `(0, 1)` with simplex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms1D {
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Atoms1D {
    pub fn new(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self, Jko1dError> {
        let atoms = Self { positions, weights };
        atoms.validate()?;
        Ok(atoms)
    }

    /// Equal weights `1/N`.
    pub fn uniform(positions: Vec<f64>) -> Result<Self, Jko1dError> {
        let n = positions.len();
        Self::new(positions, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), Jko1dError> {
        if self.positions.len() != self.weights.len() {
            return Err(Jko1dError::InvalidAtoms("positions and weights differ in length".into()));
        }
        if self.positions.iter().any(|x| !(x.is_finite() && *x > 0.0 && *x < 1.0)) {
            return Err(Jko1dError::InvalidAtoms("positions must lie in (0, 1)".into()));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Jko1dError::UnsortedAtoms);
        }
        if !self.is_empty() {
            let total: f64 = self.weights.iter().sum();
            if self.weights.iter().any(|a| !(*a > 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Jko1dError::InvalidAtoms("weights must be positive and sum to 1".into()));
            }
        }
        Ok(())
    }
}

/// A piece of the monotone coupling on which both quantile functions are
/// linear in the mass coordinate `s`.
#[derive(Debug, Clone, Copy)]
struct Segment {
    s0: f64,
    s1: f64,
    /// Quantiles of the first density at `s0`, `s1`.
    x0: f64,
    x1: f64,
    /// Quantiles of the second density at `s0`, `s1`.
    y0: f64,
    y1: f64,
    /// Cell of the first density containing the piece.
    cell: usize,
}

/// Merges the CDF breakpoints of `p` and `q`.
fn segments(p: &Density1D, q: &Density1D) -> Vec<Segment> {
    let (hp, hq) = (p.h(), q.h());
    let inv = |d: &Density1D, h: f64, k: usize, start: f64, s: f64| {
        let m = d.values[k] * h;
        k as f64 * h + h * ((s - start) / m).clamp(0.0, 1.0)
    };
    let next = |d: &Density1D, mut k: usize| {
        while k < d.len() && d.values[k] <= 0.0 {
            k += 1;
        }
        k
    };
    let mut out = Vec::with_capacity(p.len() + q.len());
    let (mut i, mut j) = (next(p, 0), next(q, 0));
    let (mut cp, mut cq) = (0.0, 0.0);
    let mut s = 0.0;
    while i < p.len() && j < q.len() {
        let ep = cp + p.values[i] * hp;
        let eq = cq + q.values[j] * hq;
        let s1 = ep.min(eq);
        if s1 > s {
            out.push(Segment {
                s0: s,
                s1,
                x0: inv(p, hp, i, cp, s),
                x1: inv(p, hp, i, cp, s1),
                y0: inv(q, hq, j, cq, s),
                y1: inv(q, hq, j, cq, s1),
                cell: i,
            });
        }
        s = s1;
        if ep <= s1 {
            cp = ep;
            i = next(p, i + 1);
        }
        if eq <= s1 {
            cq = eq;
            j = next(q, j + 1);
        }
    }
    out
}

/// `W₂²(p, q) = ∫₀¹ |F_p⁻¹(s) − F_q⁻¹(s)|² ds`, exact for piecewise-constant
/// densities.
pub fn w2_1d(p: &Density1D, q: &Density1D) -> f64 {
    segments(p, q)
        .iter()
        .map(|g| {
            let (d0, d1) = (g.x0 - g.y0, g.x1 - g.y1);
            (g.s1 - g.s0) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0
        })
        .sum()
}

/// Cell averages of the Kantorovich potential `φ` of `½W₂²(p, q)`, the
/// primitive of `x − T(x)` with `T` the monotone map from `p` to `q`,
/// shifted to zero mean.
fn kantorovich_cell_averages(p: &Density1D, q: &Density1D) -> Vec<f64> {
    let h = p.h();
    let mut integral = vec![0.0; p.len()];
    let mut covered = vec![0.0; p.len()];
    let mut phi = 0.0;
    for g in segments(p, q) {
        let len = g.x1 - g.x0;
        if len <= 0.0 {
            continue;
        }
        // on [x0, x1]: x − T(x) = g0 + (1 − r)(x − x0)
        let r = (g.y1 - g.y0) / len;
        let g0 = g.x0 - g.y0;
        integral[g.cell] += phi * len + g0 * len * len / 2.0 + (1.0 - r) * len.powi(3) / 6.0;
        covered[g.cell] += len;
        phi += g0 * len + (1.0 - r) * len * len / 2.0;
    }
    let mut avg: Vec<f64> = integral.iter().zip(&covered).map(|(i, c)| if *c > 0.0 { i / c } else { f64::NAN }).collect();
    // vacuum cells inherit the nearest value on the left (or right)
    let mut last = avg.iter().copied().find(|v| v.is_finite()).unwrap_or(0.0);
    for v in avg.iter_mut() {
        if v.is_finite() {
            last = *v;
        } else {
            *v = last;
        }
    }
    let mean = avg.iter().sum::<f64>() * h;
    avg.iter_mut().for_each(|v| *v -= mean);
    avg
}

/// Optimal semi-discrete coupling between a 1D density and sorted atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDiscrete1D {
    /// `½W₂²(p, μ)`.
    pub cost: f64,
    /// `z_i = F_p⁻¹(a_1 + … + a_i)` for `i < N`.
    pub breakpoints: Vec<f64>,
    pub barycenters: Vec<f64>,
    /// Mean-zero potentials with `½(z_i − x_i)² − ψ_i = ½(z_i − x_{i+1})² − ψ_{i+1}`.
    pub potentials: Vec<f64>,
}

pub fn semidiscrete_1d(p: &Density1D, atoms: &Atoms1D) -> Result<SemiDiscrete1D, Jko1dError> {
    if atoms.positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Jko1dError::UnsortedAtoms);
    }
    let n = atoms.len();
    if n == 0 {
        return Ok(SemiDiscrete1D { cost: 0.0, breakpoints: vec![], barycenters: vec![], potentials: vec![] });
    }
    let mut breakpoints = Vec::with_capacity(n - 1);
    let mut acc = 0.0;
    for a in &atoms.weights[..n - 1] {
        acc += a;
        breakpoints.push(p.quantile(acc));
    }
    let h = p.h();
    let mut cost = 0.0;
    let mut barycenters = Vec::with_capacity(n);
    let mut lo = 0.0;
    for (i, &x) in atoms.positions.iter().enumerate() {
        let hi = if i + 1 < n { breakpoints[i] } else { 1.0 };
        let (mut mass, mut moment) = (0.0, 0.0);
        let first = ((lo / h).floor() as usize).min(p.len() - 1);
        for k in first..p.len() {
            let (u, w) = ((k as f64 * h).max(lo), ((k + 1) as f64 * h).min(hi));
            if u >= hi {
                break;
            }
            if w <= u {
                continue;
            }
            let v = p.values[k];
            cost += v * ((w - x).powi(3) - (u - x).powi(3)) / 6.0;
            mass += v * (w - u);
            moment += v * (w * w - u * u) / 2.0;
        }
        barycenters.push(if mass > 0.0 { moment / mass } else { x });
        lo = hi;
    }
    let mut potentials = vec![0.0; n];
    for i in 0..n - 1 {
        let z = breakpoints[i];
        let (xi, xj) = (atoms.positions[i], atoms.positions[i + 1]);
        potentials[i + 1] = potentials[i] + 0.5 * (z - xj).powi(2) - 0.5 * (z - xi).powi(2);
    }
    let mean = potentials.iter().sum::<f64>() / n as f64;
    potentials.iter_mut().for_each(|v| *v -= mean);
    Ok(SemiDiscrete1D { cost, breakpoints, barycenters, potentials })
}

/// Cell averages of `min_i(½|x − x_i|² − ψ_i)`, evaluated on the quantile
/// intervals of the coupling.
fn semidiscrete_cell_averages(p: &Density1D, atoms: &Atoms1D, sd: &SemiDiscrete1D) -> Vec<f64> {
    let h = p.h();
    let n = atoms.len();
    let mut out = vec![0.0; p.len()];
    if n == 0 {
        return out;
    }
    let mut i = 0;
    for (k, o) in out.iter_mut().enumerate() {
        let (mut u, e) = (k as f64 * h, (k + 1) as f64 * h);
        let mut total = 0.0;
        while u < e {
            while i + 1 < n && sd.breakpoints[i] <= u {
                i += 1;
            }
            let w = if i + 1 < n { sd.breakpoints[i].min(e) } else { e };
            let x = atoms.positions[i];
            total += ((w - x).powi(3) - (u - x).powi(3)) / 6.0 - sd.potentials[i] * (w - u);
            u = w;
        }
        *o = total / h;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JkoOptions {
    pub tau: f64,
    pub law: DiffusionLaw,
    /// Stop once one alternating sweep lowers the objective by less.
    pub inner_tol: f64,
    pub max_inner: usize,
}

impl Default for JkoOptions {
    fn default() -> Self {
        Self { tau: 1e-3, law: DiffusionLaw::Linear, inner_tol: 1e-14, max_inner: 200_000 }
    }
}

/// `∫F(p) + ½W₂²(p, μ_x)`.
pub fn energy(p: &Density1D, atoms: &Atoms1D, law: DiffusionLaw) -> Result<f64, Jko1dError> {
    Ok(p.internal_energy(law) + semidiscrete_1d(p, atoms)?.cost)
}

/// Squared product distance `W₂²(p, q) + |x − y|²`.
pub fn distance_sq(p: &Density1D, x: &Atoms1D, q: &Density1D, y: &Atoms1D) -> f64 {
    let dx: f64 = x.positions.iter().zip(&y.positions).map(|(a, b)| (a - b).powi(2)).sum();
    w2_1d(p, q) + dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct JkoStep {
    pub density: Density1D,
    pub atoms: Atoms1D,
    pub inner_iterations: usize,
    /// Proximal objective at the returned iterate.
    pub objective: f64,
}

/// One step of the scheme: minimizes
/// `∫F(p) + ½W₂²(p, μ_x) + (W₂²(p_k, p) + |x_k − x|²) / 2τ` over `(p, x)`
/// with weights frozen, by alternating an exact position update with one
/// mirror-descent step on `p`.
pub fn jko_step(p_k: &Density1D, x_k: &Atoms1D, opts: &JkoOptions) -> Result<JkoStep, Jko1dError> {
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(Jko1dError::InvalidParameter("tau must be positive".into()));
    }
    x_k.validate()?;
    let tau = opts.tau;
    let h = p_k.h();
    let objective = |p: &Density1D, x: &Atoms1D| -> Result<(f64, SemiDiscrete1D), Jko1dError> {
        let sd = semidiscrete_1d(p, x)?;
        let dx: f64 = x.positions.iter().zip(&x_k.positions).map(|(a, b)| (a - b).powi(2)).sum();
        let j = p.internal_energy(opts.law) + sd.cost + (w2_1d(p_k, p) + dx) / (2.0 * tau);
        Ok((j, sd))
    };
    // positions minimizing the objective for fixed p (cells do not depend on x in 1D)
    let update_x = |p: &Density1D| -> Result<Atoms1D, Jko1dError> {
        let sd = semidiscrete_1d(p, x_k)?;
        let positions = x_k
            .positions
            .iter()
            .zip(&x_k.weights)
            .zip(&sd.barycenters)
            .map(|((x, a), b)| (x + tau * a * b) / (1.0 + tau * a))
            .collect();
        Ok(Atoms1D { positions, weights: x_k.weights.clone() })
    };

    let floor = 1e-300;
    let mut p = Density1D { values: p_k.values.iter().map(|v| v.max(floor)).collect() };
    renormalize(&mut p);
    let mut x = update_x(&p)?;
    let (mut j, mut sd) = objective(&p, &x)?;
    let mut eta = 1e-3 * tau;
    for it in 1..=opts.max_inner {
        let phi_semi = semidiscrete_cell_averages(&p, &x, &sd);
        let phi_prev = kantorovich_cell_averages(&p, p_k);
        let grad: Vec<f64> = (0..p.len())
            .map(|k| opts.law.first_variation(p.values[k]) + phi_semi[k] + phi_prev[k] / tau)
            .collect();
        let mean: f64 = grad.iter().zip(&p.values).map(|(g, v)| g * v * h).sum();
        let centered: Vec<f64> = grad.iter().map(|g| g - mean).collect();
        let predicted: f64 = centered.iter().zip(&p.values).map(|(g, v)| g * g * v * h).sum();

        let mut accepted = None;
        eta *= 2.0;
        while eta * predicted > 1e-18 * (1.0 + j.abs()) {
            let mut trial = Density1D {
                values: p.values.iter().zip(&centered).map(|(v, g)| (v * (-eta * g).exp()).max(floor)).collect(),
            };
            renormalize(&mut trial);
            let tx = update_x(&trial)?;
            let (tj, tsd) = objective(&trial, &tx)?;
            if tj <= j - 1e-4 * eta * predicted {
                accepted = Some((trial, tx, tj, tsd));
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some((tp, tx, tj, tsd)) => {
                let decrease = j - tj;
                p = tp;
                x = tx;
                j = tj;
                sd = tsd;
                if decrease < opts.inner_tol {
                    return Ok(JkoStep { density: p, atoms: x, inner_iterations: it, objective: j });
                }
            }
            None => {
                if predicted > opts.inner_tol.sqrt() {
                    return Err(Jko1dError::InnerStall);
                }
                return Ok(JkoStep { density: p, atoms: x, inner_iterations: it, objective: j });
            }
        }
    }
    Err(Jko1dError::InnerLimit(opts.max_inner))
}

fn renormalize(p: &mut Density1D) {
    let m = p.mass();
    p.values.iter_mut().for_each(|v| *v /= m);
}

/// Staircase trajectory of the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct JkoTrajectory {
    pub tau: f64,
    pub densities: Vec<Density1D>,
    pub atoms: Vec<Atoms1D>,
    /// `∫F(p_k) + ½W₂²(p_k, μ_k)`.
    pub energies: Vec<f64>,
    /// `d²(z_k, z_{k+1})` per step.
    pub step_dist_sq: Vec<f64>,
    /// `‖p_{k+1}‖_q / ((1 − τ(q − 1))^{−1/q} ‖p_k‖_q)` for `q = 2, 4`.
    pub lp_ratios: Vec<[f64; 2]>,
    pub inner_iterations: Vec<usize>,
}

impl JkoTrajectory {
    /// Piecewise-constant interpolation: the iterate `k = ⌊t/τ⌋`, capped at
    /// the last one.
    pub fn at(&self, t: f64) -> (&Density1D, &Atoms1D) {
        let k = ((t / self.tau + 1e-9).floor().max(0.0) as usize).min(self.densities.len() - 1);
        (&self.densities[k], &self.atoms[k])
    }

    pub fn total_dist_sq(&self) -> f64 {
        self.step_dist_sq.iter().sum()
    }
}

pub fn jko_run(p0: Density1D, x0: Atoms1D, opts: &JkoOptions, steps: usize) -> Result<JkoTrajectory, Jko1dError> {
    x0.validate()?;
    let mut traj = JkoTrajectory {
        tau: opts.tau,
        energies: vec![energy(&p0, &x0, opts.law)?],
        densities: vec![p0],
        atoms: vec![x0],
        step_dist_sq: Vec::with_capacity(steps),
        lp_ratios: Vec::with_capacity(steps),
        inner_iterations: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let (p, x) = (traj.densities.last().unwrap(), traj.atoms.last().unwrap());
        let next = jko_step(p, x, opts)?;
        traj.step_dist_sq.push(distance_sq(&next.density, &next.atoms, p, x));
        let ratio = |q: f64| {
            let bound = (1.0 - opts.tau * (q - 1.0)).powf(-1.0 / q) * p.lp_norm(q);
            next.density.lp_norm(q) / bound
        };
        traj.lp_ratios.push([ratio(2.0), ratio(4.0)]);
        traj.inner_iterations.push(next.inner_iterations);
        traj.energies.push(energy(&next.density, &next.atoms, opts.law)?);
        traj.densities.push(next.density);
        traj.atoms.push(next.atoms);
    }
    Ok(traj)
}
