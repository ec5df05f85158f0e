//! Run orchestration behind the command-line tool: initialization, the
//! simulate and jko1d drivers, snapshot emission and the self-test.

pub mod config;
pub mod metrics;
pub mod render;
pub mod snapshot;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{run, DiagnosticsRow, DynamicsError, SimState};
use crate::grid::{Density, Domain, Grid, GridError};
use crate::jko1d::{self, Atoms1D, Density1D, Jko1dError, JkoOptions, JkoTrajectory};
use crate::sdot::{AtomSet, Point};

use config::{Config, ConfigError, InitAtoms, InitDensity};
use metrics::crystallization_metrics;
use snapshot::{real, write_atoms_csv, write_text, SeriesWriter};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initialization: {0}")]
    Init(String),
    #[error("{0}")]
    Format(String),
    #[error("no snapshot for frame {0}")]
    MissingFrame(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Jko(#[from] Jko1dError),
}

impl AppError {
    /// 2 for numerical failures, 1 for everything caused by the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Dynamics(_) => 2,
            AppError::Jko(Jko1dError::InnerStall | Jko1dError::InnerLimit(_)) => 2,
            _ => 1,
        }
    }
}

/// Uniform samples in the domain shrunk by `margin`, rejected until all
/// pairwise distances are at least `0.5·sqrt(area/N)`.
pub fn random_atoms(domain: &Domain, n: usize, seed: u64, margin: f64) -> Result<Vec<Point>, AppError> {
    let (x0, x1) = (domain.x_min + margin, domain.x_max - margin);
    let (y0, y1) = (domain.y_min + margin, domain.y_max - margin);
    if !(x0 < x1 && y0 < y1) {
        return Err(AppError::Init("domain too thin for the sampling margin".into()));
    }
    let dmin = 0.5 * (domain.area() / n.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pts.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(AppError::Init(format!("could not place {n} atoms {dmin:.3e} apart")));
        }
        let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
        if pts.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= dmin) {
            pts.push(p);
        }
    }
    Ok(pts)
}

pub fn initial_density(config: &Config) -> Result<Density, AppError> {
    let grid = config.grid();
    let d = match &config.init_density {
        InitDensity::Uniform => Density::uniform(grid),
        InitDensity::Gaussian { cx, cy, sigma } => {
            let s2 = 2.0 * sigma * sigma;
            Density::from_fn(grid, |p| (-((p[0] - cx).powi(2) + (p[1] - cy).powi(2)) / s2).exp())?
        }
        InitDensity::File(path) => {
            let raw = Density::read_csv(grid, path)?;
            Density::normalized(grid, raw.values)?
        }
    };
    Ok(d)
}

/// Atoms from the config, checked to keep `2·max(hx, hy)` from the boundary.
pub fn initial_atoms(config: &Config) -> Result<AtomSet, AppError> {
    let grid = config.grid();
    let atoms = match &config.init_atoms {
        InitAtoms::Random => {
            let margin = (0.05 * grid.domain.diameter()).max(2.0 * grid.hx.max(grid.hy));
            AtomSet::uniform(random_atoms(&grid.domain, config.n_atoms, config.seed, margin)?)
        }
        InitAtoms::File(path) => snapshot::atoms_from_records(&snapshot::read_atoms_csv(path)?)?,
    };
    let margin = 2.0 * grid.hx.max(grid.hy);
    let d = grid.domain;
    for i in atoms.alive_ids() {
        let p = atoms.positions[i];
        let gap = (p[0] - d.x_min).min(d.x_max - p[0]).min(p[1] - d.y_min).min(d.y_max - p[1]);
        if gap < margin {
            return Err(AppError::Init(format!("atom {i} lies within two cells of the boundary")));
        }
    }
    Ok(atoms)
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_state: SimState,
    pub series: Vec<DiagnosticsRow>,
}

fn is_snapshot_step(step: usize, every: usize, last: usize) -> bool {
    step == 0 || step == last || (every > 0 && step % every == 0)
}

/// Runs the splitting scheme described by `config`, writing `config.txt`,
/// `series.csv`, `crystallization.csv` and `snapshots/` under its `out_dir`.
pub fn simulate(config: &Config) -> Result<RunSummary, AppError> {
    let out = config.out_dir.clone();
    fs::create_dir_all(out.join("snapshots"))?;
    write_text(&out.join("config.txt"), &config.to_text())?;
    let cfg = config.step_config();
    let state = SimState::new(initial_density(config)?, initial_atoms(config)?, &cfg)?;
    let mut series_writer = SeriesWriter::create(&out.join("series.csv"))?;
    let mut crystal = csv::Writer::from_path(out.join("crystallization.csv"))?;
    crystal.write_record(["step", "nn_mean", "nn_cv", "hex_order"])?;
    let last = config.steps;
    let (final_state, series) = run(state, &cfg, config.steps, |s: &SimState, row: &DiagnosticsRow| {
        series_writer.write(row)?;
        if is_snapshot_step(s.step, config.snapshot_every, last) {
            s.density.write_csv(&snapshot::density_path(&out, s.step))?;
            write_atoms_csv(&snapshot::atoms_path(&out, s.step), &s.atoms, Some(&s.tess))?;
            let m = crystallization_metrics(&s.atoms);
            let f = |v: Option<f64>| v.map(real).unwrap_or_default();
            crystal.write_record([
                s.step.to_string(),
                f(m.map(|m| m.nn_mean)),
                f(m.map(|m| m.nn_cv)),
                f(m.map(|m| m.hex_order)),
            ])?;
            crystal.flush()?;
        }
        Ok::<_, AppError>(())
    })?;
    Ok(RunSummary { out_dir: out, final_state, series })
}

pub fn initial_density_1d(config: &Config) -> Result<Density1D, AppError> {
    let n = config.nx;
    Ok(match &config.init_density {
        InitDensity::Uniform => Density1D::uniform(n),
        InitDensity::Gaussian { cx, sigma, .. } => Density1D::normalized(
            (0..n).map(|k| (-((k as f64 + 0.5) / n as f64 - cx).powi(2) / (2.0 * sigma * sigma)).exp()).collect(),
        )?,
        InitDensity::File(path) => {
            let text = fs::read_to_string(path)?;
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            let raw = Density1D::from_csv_line(line).or_else(|_| {
                let values: Vec<f64> = line.split(',').filter_map(|t| t.trim().parse().ok()).collect();
                Density1D::normalized(values)
            })?;
            if raw.len() != n {
                return Err(AppError::Init(format!("density file has {} cells, nx is {n}", raw.len())));
            }
            raw
        }
    })
}

pub fn initial_atoms_1d(config: &Config) -> Result<Atoms1D, AppError> {
    match &config.init_atoms {
        InitAtoms::Random => {
            let n = config.n_atoms;
            let dmin = 0.5 / n.max(1) as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut xs: Vec<f64> = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while xs.len() < n {
                attempts += 1;
                if attempts > 10_000 * n {
                    return Err(AppError::Init(format!("could not place {n} atoms {dmin:.3e} apart")));
                }
                let x = rng.gen_range(0.05..0.95);
                if xs.iter().all(|y| (x - y).abs() >= dmin) {
                    xs.push(x);
                }
            }
            xs.sort_by(f64::total_cmp);
            Ok(Atoms1D::uniform(xs)?)
        }
        InitAtoms::File(path) => {
            let recs = snapshot::read_atoms_csv(path)?;
            Ok(Atoms1D::uniform(recs.iter().filter(|r| r.alive).map(|r| r.position[0]).collect())?)
        }
    }
}

/// Runs the 1D scheme and writes `config.txt`, `jko_series.csv`,
/// `atoms1d.csv` and `jko1d/density_KKKKK.csv` under `out_dir`.
pub fn run_jko1d(config: &Config) -> Result<JkoTrajectory, AppError> {
    let out = config.out_dir.clone();
    fs::create_dir_all(out.join("jko1d"))?;
    write_text(&out.join("config.txt"), &config.to_text())?;
    let opts = JkoOptions { tau: config.tau, law: config.diffusion, ..Default::default() };
    let traj = jko1d::jko_run(initial_density_1d(config)?, initial_atoms_1d(config)?, &opts, config.steps)?;

    let mut w = csv::Writer::from_path(out.join("jko_series.csv"))?;
    w.write_record([
        "step",
        "time",
        "energy_total",
        "energy_internal",
        "energy_transport",
        "dist_sq",
        "lp2_ratio",
        "lp4_ratio",
        "mass_error",
        "linf_density",
        "inner_iterations",
    ])?;
    let mut atoms_w = csv::Writer::from_path(out.join("atoms1d.csv"))?;
    atoms_w.write_record(["step", "id", "x", "a"])?;
    for (k, (p, x)) in traj.densities.iter().zip(&traj.atoms).enumerate() {
        let internal = p.internal_energy(config.diffusion);
        let (d2, ratios, inner) = if k == 0 {
            (String::new(), [String::new(), String::new()], String::new())
        } else {
            let r = traj.lp_ratios[k - 1];
            (real(traj.step_dist_sq[k - 1]), [real(r[0]), real(r[1])], traj.inner_iterations[k - 1].to_string())
        };
        let [r2, r4] = ratios;
        w.write_record([
            k.to_string(),
            real(k as f64 * config.tau),
            real(traj.energies[k]),
            real(internal),
            real(traj.energies[k] - internal),
            d2,
            r2,
            r4,
            real((p.mass() - 1.0).abs()),
            real(p.lp_norm(f64::INFINITY)),
            inner,
        ])?;
        for (i, (xi, ai)) in x.positions.iter().zip(&x.weights).enumerate() {
            atoms_w.write_record([k.to_string(), i.to_string(), real(*xi), real(*ai)])?;
        }
        if is_snapshot_step(k, config.snapshot_every, config.steps) {
            write_text(&out.join("jko1d").join(format!("density_{k:05}.csv")), &(p.to_csv_line() + "\n"))?;
        }
    }
    w.flush()?;
    atoms_w.flush()?;
    Ok(traj)
}

/// Outcome of one self-test check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick oracle checks small enough to run from the command line.
pub fn selftest() -> Vec<Check> {
    use crate::pde::{step_density, FaceVelocity};
    use crate::sdot::{solve_potentials, transport_cost, SolverOptions};

    let mut out = Vec::new();
    let mut check = |name, passed, detail: String| out.push(Check { name, passed, detail });

    let n = 64;
    let left = Density1D::normalized((0..n).map(|k| if k < n / 2 { 1.0 } else { 0.0 }).collect()).unwrap();
    let right = Density1D::normalized((0..n).map(|k| if k >= n / 2 { 1.0 } else { 0.0 }).collect()).unwrap();
    let w = jko1d::w2_1d(&left, &right);
    check("w2_1d shift by one half", (w - 0.25).abs() < 1e-12, format!("W2^2 = {w}"));

    let g = Grid::unit(128);
    let d = Density::uniform(g);
    let one = AtomSet::uniform(vec![[0.5, 0.5]]);
    let cost = solve_potentials(&d, &one, &SolverOptions::default(), None)
        .map(|t| transport_cost(&d, &one, &t))
        .unwrap_or(f64::NAN);
    check("centered atom cost 1/12", (cost - 1.0 / 12.0).abs() < 1e-4, format!("cost = {cost}"));

    let pair = AtomSet::new(vec![[0.25, 0.5], [0.75, 0.5]], vec![0.62, 0.38]).unwrap();
    let split = solve_potentials(&d, &pair, &SolverOptions::default(), None)
        .map(|t| {
            (0..g.nx).filter(|&i| t.labels[g.index(i, g.ny / 2)] == 0).count() as f64 / g.nx as f64
        })
        .unwrap_or(f64::NAN);
    check("weighted pair boundary at 0.62", (split - 0.62).abs() <= 2.0 / 128.0, format!("boundary = {split}"));

    let g = Grid::unit(32);
    let d = Density::from_fn(g, |p| 1.0 + 0.1 * (std::f64::consts::PI * p[0]).cos()).unwrap();
    let amp = |d: &Density| {
        let row = &d.values[..g.nx];
        (row[0] - row[g.nx - 1]) / 2.0
    };
    let ratio = step_density(&d, crate::grid::DiffusionLaw::Linear, &FaceVelocity::zero(g), 0.02, 0.4)
        .map(|(e, _)| amp(&e) / amp(&d))
        .unwrap_or(f64::NAN);
    let want = (-std::f64::consts::PI.powi(2) * 0.02).exp();
    check("heat eigenmode decay", (ratio / want - 1.0).abs() < 0.02, format!("ratio = {ratio}, expected {want}"));

    let mut hex = vec![[0.5, 0.5]];
    for k in 0..6 {
        let t = k as f64 * std::f64::consts::PI / 3.0;
        hex.push([0.5 + 0.1 * t.cos(), 0.5 + 0.1 * t.sin()]);
    }
    let m = crystallization_metrics(&AtomSet::uniform(hex)).map(|m| m.hex_order).unwrap_or(0.0);
    check("hexagon order", m >= 0.999, format!("hex_order = {m}"));

    let c = Config::parse("n_atoms = 50\nalpha = sqrtN", Path::new("."));
    let a = c.map(|c| c.alpha).unwrap_or(f64::NAN);
    check("config sqrtN", (a - 50f64.sqrt()).abs() < 1e-12, format!("alpha = {a}"));
    out
}
