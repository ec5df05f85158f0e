//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dynamics::{MassCostLaw, Mode, PsiSign, StepConfig};
use crate::grid::{DiffusionLaw, Domain, Grid};
use crate::sdot::SolverOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Range(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    Quantization,
    Lloyd,
    Jko1d,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitDensity {
    Uniform,
    Gaussian { cx: f64, cy: f64, sigma: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitAtoms {
    Random,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mode: RunMode,
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
    pub n_atoms: usize,
    pub seed: u64,
    pub tau: f64,
    /// Resolved; `sqrtN` becomes `√n_atoms`.
    pub alpha: f64,
    pub steps: usize,
    pub snapshot_every: usize,
    pub diffusion: DiffusionLaw,
    pub g_kappa: f64,
    pub g_beta: f64,
    pub a_min: f64,
    pub psi_sign: PsiSign,
    /// `None` selects the grid-resolution default.
    pub ot_tol: Option<f64>,
    pub ot_max_iter: usize,
    pub cfl_safety: f64,
    pub init_density: InitDensity,
    pub init_atoms: InitAtoms,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            mode: RunMode::Quantization,
            nx: 128,
            ny: 128,
            domain: Domain::unit_square(),
            n_atoms: 50,
            seed: 0,
            tau: 0.01,
            alpha: 50f64.sqrt(),
            steps: 200,
            snapshot_every: 10,
            diffusion: DiffusionLaw::Linear,
            g_kappa: 1.0,
            g_beta: 0.5,
            a_min: 1e-6,
            psi_sign: PsiSign::El,
            ot_tol: None,
            ot_max_iter: 200,
            cfl_safety: 0.4,
            init_density: InitDensity::Uniform,
            init_atoms: InitAtoms::Random,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Text shown by `--help`.
pub const CONFIG_HELP: &str = "\
Config file: one `key = value` per line, `#` starts a comment.
  mode            full | quantization | lloyd | jko1d     (quantization)
  nx, ny          grid cells per axis; jko1d uses nx       (128, 128)
  domain          x_min x_max y_min y_max                  (0 1 0 1)
  n_atoms         number of atoms                          (50)
  seed            u64 seed for random atoms                (0)
  tau             time step                                (0.01)
  alpha           atom speed, a number or sqrtN            (sqrtN)
  steps           macro steps                              (200)
  snapshot_every  snapshot period in steps, 0 = none       (10)
  diffusion       linear | pme                             (linear)
  m               porous-medium exponent, > 1              (2)
  g_kappa         mass cost scale, > 0                     (1)
  g_beta          mass cost exponent, in (0,1)             (0.5)
  a_min           death threshold for weights              (1e-6)
  psi_sign        el | intro                               (el)
  ot_tol          dual solver tolerance or auto            (auto)
  ot_max_iter     dual solver iteration cap                (200)
  cfl_safety      CFL factor in (0,1]                      (0.4)
  init_density    uniform | gaussian(cx,cy,sigma) | file(path)
  init_atoms      random | file(path)
  out_dir         output directory                         (out)
Relative file paths are resolved against the config file's directory.";

fn parse_real(key: &str, v: &str, line: usize) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ConfigError::Parse { line, msg: format!("{key}: expected a number, got `{v}`") })
}

fn parse_int(key: &str, v: &str, line: usize) -> Result<usize, ConfigError> {
    v.parse::<usize>()
        .map_err(|_| ConfigError::Parse { line, msg: format!("{key}: expected a nonnegative integer, got `{v}`") })
}

/// Splits `name(args)` into the name and the raw argument text.
fn call(v: &str) -> Option<(&str, &str)> {
    let open = v.find('(')?;
    let inner = v[open + 1..].strip_suffix(')')?;
    Some((v[..open].trim(), inner.trim()))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl Config {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        let mut alpha_sqrt_n = true;
        let mut m = 2.0;
        let mut pme = false;
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| ConfigError::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Parse { line, msg: format!("duplicate key `{key}`") });
            }
            let bad = |msg: String| ConfigError::Parse { line, msg };
            match key {
                "mode" => {
                    c.mode = match value {
                        "full" => RunMode::Full,
                        "quantization" => RunMode::Quantization,
                        "lloyd" => RunMode::Lloyd,
                        "jko1d" => RunMode::Jko1d,
                        _ => return Err(bad(format!("mode: unknown mode `{value}`"))),
                    }
                }
                "nx" => c.nx = parse_int(key, value, line)?,
                "ny" => c.ny = parse_int(key, value, line)?,
                "domain" => {
                    let parts: Vec<&str> =
                        value.split(|ch: char| ch == ',' || ch.is_whitespace()).filter(|s| !s.is_empty()).collect();
                    if parts.len() != 4 {
                        return Err(bad("domain: expected four numbers x_min x_max y_min y_max".into()));
                    }
                    let v = parts.iter().map(|p| parse_real(key, p, line)).collect::<Result<Vec<_>, _>>()?;
                    c.domain = Domain::new(v[0], v[1], v[2], v[3])
                        .map_err(|_| ConfigError::Range("domain must have x_min < x_max and y_min < y_max".into()))?;
                }
                "n_atoms" => c.n_atoms = parse_int(key, value, line)?,
                "seed" => {
                    c.seed = value.parse().map_err(|_| bad(format!("seed: expected a u64, got `{value}`")))?
                }
                "tau" => c.tau = parse_real(key, value, line)?,
                "alpha" => {
                    if value == "sqrtN" {
                        alpha_sqrt_n = true;
                    } else {
                        alpha_sqrt_n = false;
                        c.alpha = parse_real(key, value, line)?;
                    }
                }
                "steps" => c.steps = parse_int(key, value, line)?,
                "snapshot_every" => c.snapshot_every = parse_int(key, value, line)?,
                "diffusion" => {
                    pme = match value {
                        "linear" => false,
                        "pme" => true,
                        _ => return Err(bad(format!("diffusion: expected linear or pme, got `{value}`"))),
                    }
                }
                "m" => m = parse_real(key, value, line)?,
                "g_kappa" => c.g_kappa = parse_real(key, value, line)?,
                "g_beta" => c.g_beta = parse_real(key, value, line)?,
                "a_min" => c.a_min = parse_real(key, value, line)?,
                "psi_sign" => {
                    c.psi_sign = match value {
                        "el" => PsiSign::El,
                        "intro" => PsiSign::Intro,
                        _ => return Err(bad(format!("psi_sign: expected el or intro, got `{value}`"))),
                    }
                }
                "ot_tol" => {
                    c.ot_tol = if value == "auto" { None } else { Some(parse_real(key, value, line)?) }
                }
                "ot_max_iter" => c.ot_max_iter = parse_int(key, value, line)?,
                "cfl_safety" => c.cfl_safety = parse_real(key, value, line)?,
                "init_density" => {
                    c.init_density = match value {
                        "uniform" => InitDensity::Uniform,
                        _ => match call(value) {
                            Some(("gaussian", args)) => {
                                let v = args
                                    .split(',')
                                    .map(|a| parse_real(key, a.trim(), line))
                                    .collect::<Result<Vec<_>, _>>()?;
                                if v.len() != 3 {
                                    return Err(bad("init_density: gaussian takes (cx,cy,sigma)".into()));
                                }
                                InitDensity::Gaussian { cx: v[0], cy: v[1], sigma: v[2] }
                            }
                            Some(("file", path)) if !path.is_empty() => InitDensity::File(resolve(base, path)),
                            _ => return Err(bad(format!("init_density: cannot parse `{value}`"))),
                        },
                    }
                }
                "init_atoms" => {
                    c.init_atoms = match value {
                        "random" => InitAtoms::Random,
                        _ => match call(value) {
                            Some(("file", path)) if !path.is_empty() => InitAtoms::File(resolve(base, path)),
                            _ => return Err(bad(format!("init_atoms: cannot parse `{value}`"))),
                        },
                    }
                }
                "out_dir" => c.out_dir = PathBuf::from(value),
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        c.diffusion = if pme {
            DiffusionLaw::porous_medium(m).ok_or_else(|| ConfigError::Range("m must be greater than 1".into()))?
        } else {
            DiffusionLaw::Linear
        };
        if alpha_sqrt_n {
            c.alpha = (c.n_atoms as f64).sqrt();
        }
        c.out_dir = resolve(base, &c.out_dir.to_string_lossy());
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Range(m.to_string()));
        if self.nx == 0 || self.ny == 0 {
            return fail("nx and ny must be positive");
        }
        if self.n_atoms == 0 && self.mode != RunMode::Jko1d {
            return fail("n_atoms must be positive");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive");
        }
        if !(self.alpha > 0.0) {
            return fail("alpha must be positive");
        }
        if !(self.g_kappa > 0.0) {
            return fail("g_kappa must be positive");
        }
        if !(self.g_beta > 0.0 && self.g_beta < 1.0) {
            return fail("g_beta must lie in (0,1)");
        }
        if !(self.a_min > 0.0 && self.a_min < 1.0) {
            return fail("a_min must lie in (0,1)");
        }
        if matches!(self.ot_tol, Some(t) if !(t > 0.0)) {
            return fail("ot_tol must be positive");
        }
        if self.ot_max_iter == 0 {
            return fail("ot_max_iter must be positive");
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return fail("cfl_safety must lie in (0,1]");
        }
        if let InitDensity::Gaussian { sigma, .. } = self.init_density {
            if !(sigma > 0.0) {
                return fail("gaussian sigma must be positive");
            }
        }
        if self.mode == RunMode::Jko1d && self.domain != Domain::unit_square() {
            return fail("jko1d runs on the unit interval; leave domain at 0 1 0 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.domain, self.nx, self.ny).expect("validated")
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            mode: match self.mode {
                RunMode::Full => Mode::Full,
                RunMode::Lloyd => Mode::Lloyd,
                RunMode::Quantization | RunMode::Jko1d => Mode::Quantization,
            },
            tau: self.tau,
            alpha: self.alpha,
            diffusion: self.diffusion,
            mass_cost: MassCostLaw::new(self.g_kappa, self.g_beta).expect("validated"),
            a_min: self.a_min,
            psi_sign: self.psi_sign,
            solver: SolverOptions { tol: self.ot_tol, max_iter: self.ot_max_iter, ..Default::default() },
            cfl_safety: self.cfl_safety,
        }
    }

    /// Fully resolved config text, parseable by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            RunMode::Full => "full",
            RunMode::Quantization => "quantization",
            RunMode::Lloyd => "lloyd",
            RunMode::Jko1d => "jko1d",
        };
        let d = self.domain;
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "nx = {}\nny = {}", self.nx, self.ny);
        let _ = writeln!(s, "domain = {:e} {:e} {:e} {:e}", d.x_min, d.x_max, d.y_min, d.y_max);
        let _ = writeln!(s, "n_atoms = {}\nseed = {}", self.n_atoms, self.seed);
        let _ = writeln!(s, "tau = {:e}\nalpha = {:e}", self.tau, self.alpha);
        let _ = writeln!(s, "steps = {}\nsnapshot_every = {}", self.steps, self.snapshot_every);
        match self.diffusion {
            DiffusionLaw::Linear => s.push_str("diffusion = linear\n"),
            DiffusionLaw::PorousMedium { m } => {
                let _ = writeln!(s, "diffusion = pme\nm = {m:e}");
            }
        }
        let _ = writeln!(s, "g_kappa = {:e}\ng_beta = {:e}\na_min = {:e}", self.g_kappa, self.g_beta, self.a_min);
        let sign = match self.psi_sign {
            PsiSign::El => "el",
            PsiSign::Intro => "intro",
        };
        let _ = writeln!(s, "psi_sign = {sign}");
        match self.ot_tol {
            Some(t) => {
                let _ = writeln!(s, "ot_tol = {t:e}");
            }
            None => s.push_str("ot_tol = auto\n"),
        }
        let _ = writeln!(s, "ot_max_iter = {}\ncfl_safety = {:e}", self.ot_max_iter, self.cfl_safety);
        match &self.init_density {
            InitDensity::Uniform => s.push_str("init_density = uniform\n"),
            InitDensity::Gaussian { cx, cy, sigma } => {
                let _ = writeln!(s, "init_density = gaussian({cx:e},{cy:e},{sigma:e})");
            }
            InitDensity::File(p) => {
                let _ = writeln!(s, "init_density = file({})", p.display());
            }
        }
        match &self.init_atoms {
            InitAtoms::Random => s.push_str("init_atoms = random\n"),
            InitAtoms::File(p) => {
                let _ = writeln!(s, "init_atoms = file({})", p.display());
            }
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Config::parse(&text, &base)
}
