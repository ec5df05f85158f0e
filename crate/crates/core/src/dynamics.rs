//! The coupled splitting integrator: dual solve, atom and weight updates,
//! frozen-drift density advance, and the energy bookkeeping around them.

use thiserror::Error;

use crate::grid::{internal_energy, lp_norm, total_mass, Density, DiffusionLaw, Grid, GridError};
use crate::pde::{face_velocities, step_density, PdeError};
use crate::reduce;
use crate::sdot::{self, solve_potentials, AtomSet, SdotError, SolverOptions, Tessellation};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("all atoms dead")]
    AllAtomsDead,
    #[error(transparent)]
    Sdot(#[from] SdotError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("mass drifted by {0:.3e}")]
    MassDrift(f64),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("weight integration did not finish within {0} sub-steps")]
    WeightSubsteps(usize),
}

/// Cusp cost `g(a) = κ a^β` with `κ > 0`, `0 < β < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassCostLaw {
    pub kappa: f64,
    pub beta: f64,
}

impl MassCostLaw {
    pub fn new(kappa: f64, beta: f64) -> Option<Self> {
        (kappa > 0.0 && kappa.is_finite() && beta > 0.0 && beta < 1.0).then_some(Self { kappa, beta })
    }

    pub fn value(&self, a: f64) -> f64 {
        if a <= 0.0 {
            0.0
        } else {
            self.kappa * a.powf(self.beta)
        }
    }

    pub fn derivative(&self, a: f64) -> f64 {
        self.kappa * self.beta * a.powf(self.beta - 1.0)
    }
}

impl Default for MassCostLaw {
    fn default() -> Self {
        Self { kappa: 1.0, beta: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Density, positions and weights all evolve.
    Full,
    /// Weights frozen at `1/N`.
    Quantization,
    /// Weights and density frozen; atoms follow continuous-time Lloyd.
    Lloyd,
}

/// Sign of the potential in the weight equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiSign {
    /// `ȧ_i = −(g'(a_i) + ψ_i) + c`, the descent direction of the energy.
    El,
    /// `ȧ_i = −g'(a_i) + ψ_i + c`.
    Intro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub mode: Mode,
    pub tau: f64,
    pub alpha: f64,
    pub diffusion: DiffusionLaw,
    pub mass_cost: MassCostLaw,
    pub a_min: f64,
    pub psi_sign: PsiSign,
    pub solver: SolverOptions,
    pub cfl_safety: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Quantization,
            tau: 0.01,
            alpha: 1.0,
            diffusion: DiffusionLaw::Linear,
            mass_cost: MassCostLaw::default(),
            a_min: 1e-6,
            psi_sign: PsiSign::El,
            solver: SolverOptions::default(),
            cfl_safety: 0.4,
        }
    }
}

/// `(ϱ, x, a)` at one time level, with the tessellation solved for it.
#[derive(Debug, Clone)]
pub struct SimState {
    pub time: f64,
    pub step: usize,
    pub density: Density,
    pub atoms: AtomSet,
    pub tess: Tessellation,
    pub clamp_events: usize,
    /// Total PDE sub-steps taken so far.
    pub substeps: usize,
}

impl SimState {
    /// Validates the inputs and performs the first dual solve. In
    /// quantization and lloyd modes weights are reset to `1/N`.
    pub fn new(density: Density, mut atoms: AtomSet, cfg: &StepConfig) -> Result<Self, DynamicsError> {
        if atoms.alive_count() == 0 {
            return Err(DynamicsError::AllAtomsDead);
        }
        if cfg.mode != Mode::Full {
            let n = atoms.len() as f64;
            atoms.alive.iter_mut().for_each(|a| *a = true);
            atoms.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        }
        atoms.validate()?;
        let domain = density.grid.domain;
        if let Some(i) = atoms.alive_ids().find(|&i| !domain.contains(atoms.positions[i])) {
            return Err(DynamicsError::InvalidState(format!("atom {i} outside the domain")));
        }
        if atoms.alive_count() > 1 && atoms.min_pairwise_distance() <= 0.0 {
            return Err(DynamicsError::InvalidState("alive atoms must be distinct".into()));
        }
        let mass_error = (total_mass(&density) - 1.0).abs();
        if mass_error > 1e-12 {
            return Err(DynamicsError::MassDrift(mass_error));
        }
        let tess = solve_potentials(&density, &atoms, &cfg.solver, None)?;
        Ok(Self { time: 0.0, step: 0, density, atoms, tess, clamp_events: 0, substeps: 0 })
    }
}

/// Explicit Euler on the weights over `tau`, sub-stepped so no weight loses
/// more than half its value per sub-step. Weights at or below `a_min` die.
fn update_weights(atoms: &mut AtomSet, psi: &[f64], cfg: &StepConfig) -> Result<(), DynamicsError> {
    const MAX_SUBSTEPS: usize = 100_000;
    let sign = match cfg.psi_sign {
        PsiSign::El => 1.0,
        PsiSign::Intro => -1.0,
    };
    let mut remaining = cfg.tau;
    let mut k = 0;
    while remaining > 0.0 {
        k += 1;
        if k > MAX_SUBSTEPS {
            return Err(DynamicsError::WeightSubsteps(MAX_SUBSTEPS));
        }
        let ids: Vec<usize> = atoms.alive_ids().collect();
        if ids.len() <= 1 {
            break;
        }
        let drive: Vec<f64> =
            ids.iter().map(|&i| cfg.mass_cost.derivative(atoms.weights[i]) + sign * psi[i]).collect();
        let mean = drive.iter().sum::<f64>() / ids.len() as f64;
        let rate: Vec<f64> = drive.iter().map(|d| mean - d).collect();
        let mut dt = remaining;
        for (k, &i) in ids.iter().enumerate() {
            if rate[k] < 0.0 {
                dt = dt.min(0.5 * atoms.weights[i] / -rate[k]);
            }
        }
        for (k, &i) in ids.iter().enumerate() {
            atoms.weights[i] += dt * rate[k];
        }
        for &i in &ids {
            if atoms.weights[i] <= cfg.a_min {
                atoms.weights[i] = 0.0;
                atoms.alive[i] = false;
            }
        }
        let total: f64 = atoms.alive_ids().map(|i| atoms.weights[i]).sum();
        if total <= 0.0 {
            return Err(DynamicsError::AllAtomsDead);
        }
        let alive: Vec<usize> = atoms.alive_ids().collect();
        for i in alive {
            atoms.weights[i] /= total;
        }
        remaining -= dt;
    }
    Ok(())
}

/// One macro step of the splitting scheme.
///
/// 1. The stored tessellation of `(ϱ_n, x_n, a_n)` gives `b_n`, `ψ_n`.
/// 2. Atoms move by explicit Euler: `ẋ_i = α (b_i − x_i)` in quantization and
///    lloyd modes, `ẋ_i = α m_i (b_i − x_i)` in full mode; then clamped.
/// 3. Full mode only: weights follow `ȧ_i = −(g'(a_i) + ψ_i) + c`.
/// 4. Unless in lloyd mode, the tessellation is re-solved for the new atoms
///    and the density advanced over `τ` with that drift frozen.
/// 5. The tessellation of the new state is solved.
pub fn splitting_step(state: &SimState, cfg: &StepConfig) -> Result<SimState, DynamicsError> {
    let grid = state.density.grid;
    let domain = grid.domain;
    let tess = &state.tess;
    let mut atoms = state.atoms.clone();
    let mut clamps = state.clamp_events;

    for i in atoms.alive_ids().collect::<Vec<_>>() {
        let x = atoms.positions[i];
        let b = tess.barycenters[i];
        let speed = match cfg.mode {
            Mode::Full => cfg.alpha * tess.masses[i],
            Mode::Quantization | Mode::Lloyd => cfg.alpha,
        };
        let mut next = [x[0] + cfg.tau * speed * (b[0] - x[0]), x[1] + cfg.tau * speed * (b[1] - x[1])];
        if domain.clamp(&mut next) {
            clamps += 1;
        }
        atoms.positions[i] = next;
    }

    if cfg.mode == Mode::Full {
        update_weights(&mut atoms, &tess.potentials, cfg)?;
        if atoms.alive_count() == 0 {
            return Err(DynamicsError::AllAtomsDead);
        }
    }

    let mut warm = tess.potentials.clone();
    for i in 0..atoms.len() {
        if !atoms.alive[i] {
            warm[i] = 0.0;
        }
    }

    let mut density = state.density.clone();
    let mut substeps = state.substeps;
    if cfg.mode != Mode::Lloyd {
        let moved = solve_potentials(&density, &atoms, &cfg.solver, Some(&warm))?;
        let vel = face_velocities(&grid, &atoms, &moved)?;
        let (next, stats) = step_density(&density, cfg.diffusion, &vel, cfg.tau, cfg.cfl_safety)?;
        let drift = (total_mass(&next) - 1.0).abs();
        if drift > 1e-12 {
            return Err(DynamicsError::MassDrift(drift));
        }
        density = next;
        substeps += stats.substeps;
        warm = moved.potentials;
    }

    let tess = solve_potentials(&density, &atoms, &cfg.solver, Some(&warm))?;
    Ok(SimState {
        time: state.time + cfg.tau,
        step: state.step + 1,
        density,
        atoms,
        tess,
        clamp_events: clamps,
        substeps,
    })
}

/// Energy components and the monitored diagnostics of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub internal: f64,
    pub mass_cost: f64,
    /// `½W₂²(ϱ, μ)`.
    pub transport: f64,
    pub total: f64,
    pub max_dist_to_barycenter: f64,
    pub min_pairwise_atom_dist: f64,
    pub min_pairwise_barycenter_dist: f64,
    pub mass_error: f64,
    pub linf_density: f64,
    pub gibbs_l1_distance: f64,
}

pub fn energy(state: &SimState, cfg: &StepConfig) -> EnergyBreakdown {
    let atoms = &state.atoms;
    let tess = &state.tess;
    let internal = internal_energy(&state.density, cfg.diffusion);
    let mass_cost: f64 = atoms.alive_ids().map(|i| cfg.mass_cost.value(atoms.weights[i])).sum();
    let transport = sdot::transport_cost(&state.density, atoms, tess);
    let max_dist_to_barycenter = atoms
        .alive_ids()
        .map(|i| sdot::dist(atoms.positions[i], tess.barycenters[i]))
        .fold(0.0, f64::max);
    let gibbs = gibbs_profile(&state.density.grid, atoms, tess);
    let area = state.density.grid.cell_area();
    let gibbs_l1_distance =
        reduce::sum_by(gibbs.values.len(), |c| (state.density.values[c] - gibbs.values[c]).abs()) * area;
    EnergyBreakdown {
        internal,
        mass_cost,
        transport,
        total: internal + mass_cost + transport,
        max_dist_to_barycenter,
        min_pairwise_atom_dist: atoms.min_pairwise_distance(),
        min_pairwise_barycenter_dist: sdot::min_pairwise(atoms.alive_ids().map(|i| tess.barycenters[i])),
        mass_error: (total_mass(&state.density) - 1.0).abs(),
        linf_density: lp_norm(&state.density, f64::INFINITY),
        gibbs_l1_distance,
    }
}

/// Normalized `ρ ∝ exp(−(½|x − x_l|² − ψ_l))` on each Laguerre cell.
pub fn gibbs_profile(grid: &Grid, atoms: &AtomSet, tess: &Tessellation) -> Density {
    let (phi, _) = sdot::potential_field(grid, atoms, tess);
    let shift = reduce::min(&phi);
    let values = phi.iter().map(|p| (-(p - shift)).exp()).collect();
    Density::normalized(*grid, values).expect("Gibbs weights are positive")
}

/// One line of the diagnostics series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRow {
    pub step: usize,
    pub time: f64,
    pub energy: EnergyBreakdown,
    pub alive_count: usize,
    pub clamp_events: usize,
}

impl DiagnosticsRow {
    pub fn of(state: &SimState, cfg: &StepConfig) -> Self {
        Self {
            step: state.step,
            time: state.time,
            energy: energy(state, cfg),
            alive_count: state.atoms.alive_count(),
            clamp_events: state.clamp_events,
        }
    }
}

/// Runs `steps` splitting steps from `initial`, calling `observe` on the
/// initial state and after every step. Returns the final state and one
/// diagnostics row per state (step 0 included).
pub fn run<F, E>(
    initial: SimState,
    cfg: &StepConfig,
    steps: usize,
    mut observe: F,
) -> Result<(SimState, Vec<DiagnosticsRow>), E>
where
    F: FnMut(&SimState, &DiagnosticsRow) -> Result<(), E>,
    E: From<DynamicsError>,
{
    let mut state = initial;
    let mut series = Vec::with_capacity(steps + 1);
    let row = DiagnosticsRow::of(&state, cfg);
    observe(&state, &row)?;
    series.push(row);
    for _ in 0..steps {
        let next = splitting_step(&state, cfg)?;
        check_invariants(&state, &next)?;
        state = next;
        let row = DiagnosticsRow::of(&state, cfg);
        observe(&state, &row)?;
        series.push(row);
    }
    Ok((state, series))
}

fn check_invariants(prev: &SimState, next: &SimState) -> Result<(), DynamicsError> {
    let atoms = &next.atoms;
    if prev.atoms.alive.iter().zip(&atoms.alive).any(|(was, is)| !was && *is) {
        return Err(DynamicsError::InvalidState("a dead atom revived".into()));
    }
    let total: f64 = atoms.alive_ids().map(|i| atoms.weights[i]).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(DynamicsError::InvalidState(format!("alive weights sum to {total}")));
    }
    let domain = next.density.grid.domain;
    if atoms.alive_ids().any(|i| !domain.contains(atoms.positions[i])) {
        return Err(DynamicsError::InvalidState("atom left the domain".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode) -> StepConfig {
        StepConfig { mode, alpha: 1.0, ..Default::default() }
    }

    #[test]
    fn cusp_cost_law() {
        let g = MassCostLaw::new(2.0, 0.5).unwrap();
        assert_eq!(g.value(0.0), 0.0);
        assert!((g.value(0.25) - 1.0).abs() < 1e-15);
        assert!((g.derivative(0.25) - 2.0).abs() < 1e-15);
        assert!(MassCostLaw::new(1.0, 1.0).is_none());
        assert!(MassCostLaw::new(0.0, 0.5).is_none());
    }

    #[test]
    fn lloyd_fixed_point_is_unchanged() {
        let g = Grid::unit(32);
        let atoms = AtomSet::uniform(vec![[0.5, 0.5]]);
        let c = cfg(Mode::Lloyd);
        let s0 = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let s1 = splitting_step(&s0, &c).unwrap();
        assert_eq!(s1.atoms, s0.atoms);
        assert_eq!(s1.density, s0.density);
        assert_eq!(s1.step, 1);
    }

    #[test]
    fn quantization_pair_moves_outward_to_centroids() {
        let g = Grid::unit(64);
        let atoms = AtomSet::uniform(vec![[0.3, 0.5], [0.7, 0.5]]);
        let c = StepConfig { mode: Mode::Quantization, alpha: 10.0, tau: 0.01, ..Default::default() };
        let mut s = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let s1 = splitting_step(&s, &c).unwrap();
        assert!(s1.atoms.positions[0][0] < 0.3 && s1.atoms.positions[1][0] > 0.7);
        for _ in 0..150 {
            s = splitting_step(&s, &c).unwrap();
        }
        let e = energy(&s, &c);
        assert!(e.max_dist_to_barycenter <= 1e-3, "{}", e.max_dist_to_barycenter);
        assert!((s.atoms.positions[0][0] - 0.25).abs() < 5e-3);
    }

    #[test]
    fn symmetric_full_mode_keeps_weights() {
        let g = Grid::unit(32);
        let atoms = AtomSet::new(vec![[0.25, 0.5], [0.75, 0.5]], vec![0.5, 0.5]).unwrap();
        let c = cfg(Mode::Full);
        let s0 = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let s1 = splitting_step(&s0, &c).unwrap();
        assert!((s1.atoms.weights[0] - 0.5).abs() < 1e-14);
        assert!((s1.atoms.weights[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn small_atom_dies_and_stays_dead() {
        let g = Grid::unit(32);
        let atoms = AtomSet::new(
            vec![[0.25, 0.25], [0.75, 0.25], [0.5, 0.75]],
            vec![0.01, 0.495, 0.495],
        )
        .unwrap();
        let c = StepConfig { mode: Mode::Full, mass_cost: MassCostLaw::new(1.0, 0.5).unwrap(), ..cfg(Mode::Full) };
        let s0 = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let (last, series) = run(s0, &c, 20, |_, _| Ok::<_, DynamicsError>(())).unwrap();
        assert!(!last.atoms.alive[0]);
        assert_eq!(last.atoms.weights[0], 0.0);
        assert!(series.last().unwrap().alive_count == 2);
        let total: f64 = last.atoms.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_single_centered_atom() {
        let g = Grid::unit(128);
        let atoms = AtomSet::uniform(vec![[0.5, 0.5]]);
        let c = StepConfig { mass_cost: MassCostLaw::new(0.7, 0.3).unwrap(), ..cfg(Mode::Full) };
        let s = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let e = energy(&s, &c);
        assert!(e.internal.abs() < 1e-12);
        assert!((e.mass_cost - 0.7).abs() < 1e-15);
        assert!((e.transport - 1.0 / 12.0).abs() < 1e-4);
        assert!((e.total - (e.internal + e.mass_cost + e.transport)).abs() < 1e-12);
    }

    #[test]
    fn energy_mass_cost_of_symmetric_pair() {
        let g = Grid::unit(16);
        let atoms = AtomSet::new(vec![[0.25, 0.5], [0.75, 0.5]], vec![0.5, 0.5]).unwrap();
        let c = cfg(Mode::Full);
        let s = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        assert!((energy(&s, &c).mass_cost - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gibbs_profile_examples() {
        let g = Grid::unit(32);
        let d = Density::uniform(g);
        let c = cfg(Mode::Lloyd);
        let one = SimState::new(d.clone(), AtomSet::uniform(vec![[0.5, 0.5]]), &c).unwrap();
        let gp = gibbs_profile(&g, &one.atoms, &one.tess);
        assert!((total_mass(&gp) - 1.0).abs() < 1e-12);
        // truncated Gaussian: ratio between two cells is exp of the potential gap
        let (a, b) = (g.index(16, 16), g.index(0, 0));
        let (pa, pb) = (g.center(a), g.center(b));
        let phi = |p: [f64; 2]| 0.5 * ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2));
        assert!((gp.values[a] / gp.values[b] - (phi(pb) - phi(pa)).exp()).abs() < 1e-12);

        let two = SimState::new(d, AtomSet::uniform(vec![[0.25, 0.4], [0.75, 0.4]]), &c).unwrap();
        let gp = gibbs_profile(&g, &two.atoms, &two.tess);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let m = g.index(g.nx - 1 - i, j);
                assert!((gp.values[g.index(i, j)] - gp.values[m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn run_with_zero_steps_echoes_initial_state() {
        let g = Grid::unit(16);
        let c = cfg(Mode::Quantization);
        let s0 = SimState::new(Density::uniform(g), AtomSet::uniform(vec![[0.3, 0.3], [0.6, 0.7]]), &c).unwrap();
        let mut seen = 0;
        let (last, series) = run(s0.clone(), &c, 0, |_, _| {
            seen += 1;
            Ok::<_, DynamicsError>(())
        })
        .unwrap();
        assert_eq!(seen, 1);
        assert_eq!(series.len(), 1);
        assert_eq!(last.atoms, s0.atoms);
        assert_eq!(last.density, s0.density);
    }

    #[test]
    fn lloyd_energy_is_transport_only_and_decreasing() {
        let g = Grid::unit(48);
        let c = StepConfig { mode: Mode::Lloyd, alpha: 5.0, ..Default::default() };
        let atoms = AtomSet::uniform(vec![[0.2, 0.3], [0.4, 0.35], [0.7, 0.8], [0.55, 0.6], [0.8, 0.2]]);
        let s0 = SimState::new(Density::uniform(g), atoms, &c).unwrap();
        let (_, series) = run(s0, &c, 30, |_, _| Ok::<_, DynamicsError>(())).unwrap();
        for w in series.windows(2) {
            assert_eq!(w[0].energy.internal, w[1].energy.internal);
            assert_eq!(w[0].energy.mass_cost, w[1].energy.mass_cost);
            assert!(w[1].energy.transport <= w[0].energy.transport + 1e-12);
        }
    }

    #[test]
    fn rejects_atoms_outside_or_coincident() {
        let g = Grid::unit(8);
        let c = cfg(Mode::Quantization);
        let d = Density::uniform(g);
        assert!(SimState::new(d.clone(), AtomSet::uniform(vec![[1.5, 0.5]]), &c).is_err());
        assert!(SimState::new(d, AtomSet::uniform(vec![[0.5, 0.5], [0.5, 0.5]]), &c).is_err());
    }
}
