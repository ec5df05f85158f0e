//! Rectangular domain, cell-centered grid, piecewise-constant densities and
//! the internal-energy functionals built on them.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::reduce;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid domain: need x_min < x_max and y_min < y_max")]
    InvalidDomain,
    #[error("grid needs at least one cell per axis")]
    EmptyGrid,
    #[error("density has {got} values, grid has {expected} cells")]
    SizeMismatch { expected: usize, got: usize },
    #[error("density value at cell {0} is negative or not finite")]
    InvalidValue(usize),
    #[error("density has zero total mass")]
    ZeroMass,
    #[error("density csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Domain {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, GridError> {
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite())
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(GridError::InvalidDomain);
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    pub fn unit_square() -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Projects `p` onto the closed rectangle; returns whether it moved.
    pub fn clamp(&self, p: &mut [f64; 2]) -> bool {
        let q = [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)];
        let moved = q != *p;
        *p = q;
        moved
    }
}

/// Uniform `nx × ny` cell grid on a [`Domain`]. Cells are stored row-major,
/// `index = j * nx + i`, with `j` the y-index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub domain: Domain,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl Grid {
    pub fn new(domain: Domain, nx: usize, ny: usize) -> Result<Self, GridError> {
        if nx == 0 || ny == 0 {
            return Err(GridError::EmptyGrid);
        }
        Ok(Self {
            domain,
            nx,
            ny,
            hx: domain.width() / nx as f64,
            hy: domain.height() / ny as f64,
        })
    }

    pub fn unit(n: usize) -> Self {
        Self::new(Domain::unit_square(), n, n).expect("n > 0")
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    /// Smallest cell width.
    pub fn h(&self) -> f64 {
        self.hx.min(self.hy)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center_x(&self, i: usize) -> f64 {
        self.domain.x_min + (i as f64 + 0.5) * self.hx
    }

    pub fn center_y(&self, j: usize) -> f64 {
        self.domain.y_min + (j as f64 + 0.5) * self.hy
    }

    pub fn center(&self, c: usize) -> [f64; 2] {
        [self.center_x(c % self.nx), self.center_y(c / self.nx)]
    }
}

/// The two admissible internal energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiffusionLaw {
    /// `F(ρ) = ρ log ρ`, pressure `P(ρ) = ρ`.
    Linear,
    /// `F(ρ) = ρ^m / (m - 1)`, pressure `P(ρ) = ρ^m`, with `m > 1`.
    PorousMedium { m: f64 },
}

impl DiffusionLaw {
    pub fn porous_medium(m: f64) -> Option<Self> {
        (m.is_finite() && m > 1.0).then_some(Self::PorousMedium { m })
    }

    /// Energy density `F(ρ)`; `0 log 0 = 0`.
    pub fn energy_density(&self, rho: f64) -> f64 {
        match *self {
            Self::Linear => {
                if rho > 0.0 {
                    rho * rho.ln()
                } else {
                    0.0
                }
            }
            Self::PorousMedium { m } => rho.max(0.0).powf(m) / (m - 1.0),
        }
    }

    /// First variation `F'(ρ)`. Diverges at 0 for the linear law.
    pub fn first_variation(&self, rho: f64) -> f64 {
        match *self {
            Self::Linear => rho.ln() + 1.0,
            Self::PorousMedium { m } => m / (m - 1.0) * rho.max(0.0).powf(m - 1.0),
        }
    }

    pub fn pressure(&self, rho: f64) -> f64 {
        match *self {
            Self::Linear => rho,
            Self::PorousMedium { m } => rho.max(0.0).powf(m),
        }
    }

    /// `P'(ρ)`, nondecreasing in ρ for both laws.
    pub fn pressure_derivative(&self, rho: f64) -> f64 {
        match *self {
            Self::Linear => 1.0,
            Self::PorousMedium { m } => m * rho.max(0.0).powf(m - 1.0),
        }
    }
}

/// Piecewise-constant density on a [`Grid`], one value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Density {
    /// Wraps `values` after checking size, sign and finiteness. Does not
    /// normalize; see [`Density::normalized`].
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::SizeMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(c) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::InvalidValue(c));
        }
        Ok(Self { grid, values })
    }

    /// Builds a probability density by rescaling `values` to unit mass.
    pub fn normalized(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        let mut d = Self::new(grid, values)?;
        let mass = total_mass(&d);
        if mass <= 0.0 {
            return Err(GridError::ZeroMass);
        }
        d.values.iter_mut().for_each(|v| *v /= mass);
        Ok(d)
    }

    pub fn uniform(grid: Grid) -> Self {
        let v = 1.0 / grid.domain.area();
        Self { grid, values: vec![v; grid.len()] }
    }

    /// Samples `f` at cell centers and normalizes.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Result<Self, GridError> {
        let values = (0..grid.len()).map(|c| f(grid.center(c))).collect();
        Self::normalized(grid, values)
    }

    pub fn max_value(&self) -> f64 {
        reduce::max(&self.values)
    }

    pub fn min_value(&self) -> f64 {
        reduce::min(&self.values)
    }

    /// Copy with every value raised to at least `floor`, renormalized.
    pub fn floored(&self, floor: f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|v| v.max(floor)).collect();
        let mass = reduce::sum(&values) * self.grid.cell_area();
        Self { grid: self.grid, values: values.into_iter().map(|v| v / mass).collect() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.values.chunks(self.grid.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a density CSV written for `grid`. Values are taken as-is.
    pub fn read_csv(grid: Grid, path: &Path) -> Result<Self, GridError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut values = Vec::with_capacity(grid.len());
        let mut rows = 0;
        for (k, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = values.len();
            for tok in line.split(',') {
                let v: f64 = tok.trim().parse().map_err(|_| GridError::Parse {
                    line: k + 1,
                    msg: format!("not a number: {tok:?}"),
                })?;
                values.push(v);
            }
            if values.len() - before != grid.nx {
                return Err(GridError::Parse {
                    line: k + 1,
                    msg: format!("expected {} values, found {}", grid.nx, values.len() - before),
                });
            }
            rows += 1;
        }
        if rows != grid.ny {
            return Err(GridError::Parse { line: rows, msg: format!("expected {} rows", grid.ny) });
        }
        Self::new(grid, values)
    }
}

pub fn total_mass(d: &Density) -> f64 {
    reduce::sum(&d.values) * d.grid.cell_area()
}

/// `∫ F(ρ) dx` as a midpoint sum.
pub fn internal_energy(d: &Density, law: DiffusionLaw) -> f64 {
    reduce::sum_by(d.values.len(), |c| law.energy_density(d.values[c])) * d.grid.cell_area()
}

/// `‖ρ‖_p`; pass `f64::INFINITY` for the max norm.
pub fn lp_norm(d: &Density, p: f64) -> f64 {
    assert!(p >= 1.0, "lp_norm needs p >= 1");
    if p.is_infinite() {
        return d.values.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let s = reduce::sum_by(d.values.len(), |c| d.values[c].abs().powf(p));
    (s * d.grid.cell_area()).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_square(n: usize) -> Density {
        // density 2 on the left half of the unit square, 0 elsewhere
        let g = Grid::unit(n);
        let values = (0..g.len()).map(|c| if c % n < n / 2 { 2.0 } else { 0.0 }).collect();
        Density::new(g, values).unwrap()
    }

    #[test]
    fn mass_of_uniform_density() {
        let d = Density::uniform(Grid::unit(64));
        assert!((total_mass(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mass_of_single_cell_spike() {
        let g = Grid::unit(64);
        let mut values = vec![0.0; g.len()];
        values[g.index(10, 40)] = 1.0 / g.cell_area();
        let d = Density::new(g, values).unwrap();
        assert!((total_mass(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mass_of_two_half_squares() {
        let g = Grid::unit(32);
        let values = (0..g.len()).map(|c| if c % 32 < 16 { 0.5 } else { 1.5 }).collect();
        let d = Density::new(g, values).unwrap();
        assert!((total_mass(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let d = Density::uniform(Grid::unit(16));
        assert!(internal_energy(&d, DiffusionLaw::Linear).abs() < 1e-14);
        let h = half_square(16);
        assert!((internal_energy(&h, DiffusionLaw::Linear) - 2f64.ln()).abs() < 1e-12);
        let pme = DiffusionLaw::porous_medium(2.0).unwrap();
        assert!((internal_energy(&d, pme) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_examples() {
        let d = Density::uniform(Grid::unit(16));
        for p in [1.0, 2.0, 3.5, f64::INFINITY] {
            assert!((lp_norm(&d, p) - 1.0).abs() < 1e-12);
        }
        let h = half_square(16);
        assert_eq!(lp_norm(&h, f64::INFINITY), 2.0);
        assert!((lp_norm(&h, 2.0) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Domain::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(Grid::new(Domain::unit_square(), 0, 3).is_err());
        let g = Grid::unit(2);
        assert!(matches!(Density::new(g, vec![1.0; 3]), Err(GridError::SizeMismatch { .. })));
        assert!(matches!(Density::new(g, vec![1.0, -1.0, 1.0, 1.0]), Err(GridError::InvalidValue(1))));
        assert!(DiffusionLaw::porous_medium(1.0).is_none());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = Grid::new(Domain::new(0.0, 2.0, -1.0, 1.0).unwrap(), 5, 3).unwrap();
        let d = Density::from_fn(g, |p| 1.0 + (3.0 * p[0]).sin() * 0.3 + p[1] * p[1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        let back = Density::read_csv(g, &path).unwrap();
        assert_eq!(d.values, back.values);
    }

    fn random_density(n: usize) -> impl Strategy<Value = Density> {
        proptest::collection::vec(0.0f64..10.0, n * n).prop_filter_map("zero mass", move |v| {
            Density::normalized(Grid::unit(n), v).ok()
        })
    }

    proptest! {
        #[test]
        fn mass_is_permutation_invariant(d in random_density(8), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = d.clone();
            shuffled.values.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((total_mass(&d) - total_mass(&shuffled)).abs() < 1e-13);
        }

        #[test]
        fn entropy_bounded_below_by_log_area(d in random_density(8)) {
            let bound = -d.grid.domain.area().ln();
            prop_assert!(internal_energy(&d, DiffusionLaw::Linear) >= bound - 1e-12);
        }

        #[test]
        fn lp_norms_monotone_in_p(d in random_density(8)) {
            let ps = [1.0, 1.5, 2.0, 4.0, 8.0, f64::INFINITY];
            for w in ps.windows(2) {
                prop_assert!(lp_norm(&d, w[0]) <= lp_norm(&d, w[1]) * (1.0 + 1e-12));
            }
        }
    }
}
