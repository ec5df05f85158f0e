//! CSV formats: atoms snapshots and the diagnostics series.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dynamics::DiagnosticsRow;
use crate::sdot::{AtomSet, Tessellation};

use super::AppError;

pub const SERIES_HEADER: [&str; 14] = [
    "step",
    "time",
    "energy_total",
    "energy_internal",
    "energy_mass",
    "energy_transport",
    "max_dist_to_barycenter",
    "min_pairwise_atom_dist",
    "min_pairwise_barycenter_dist",
    "mass_error",
    "linf_density",
    "alive_count",
    "clamp_events",
    "gibbs_l1_distance",
];

/// Shortest representation that parses back to the same `f64`.
pub fn real(v: f64) -> String {
    format!("{v:e}")
}

pub fn density_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("snapshots").join(format!("density_{step:05}.csv"))
}

pub fn atoms_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("snapshots").join(format!("atoms_{step:05}.csv"))
}

/// Writes `id,x,y,a,alive,psi,bx,by`; dead atoms have empty `psi`, `bx`, `by`.
pub fn write_atoms_csv(path: &Path, atoms: &AtomSet, tess: Option<&Tessellation>) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "x", "y", "a", "alive", "psi", "bx", "by"])?;
    for i in 0..atoms.len() {
        let p = atoms.positions[i];
        let alive = atoms.alive[i];
        let (psi, bx, by) = match (alive, tess) {
            (true, Some(t)) => (real(t.potentials[i]), real(t.barycenters[i][0]), real(t.barycenters[i][1])),
            _ => (String::new(), String::new(), String::new()),
        };
        let a = if alive { atoms.weights[i] } else { 0.0 };
        w.write_record([
            i.to_string(),
            real(p[0]),
            real(p[1]),
            real(a),
            (alive as u8).to_string(),
            psi,
            bx,
            by,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed row of an atoms CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomRecord {
    pub position: [f64; 2],
    pub weight: f64,
    pub alive: bool,
    pub psi: Option<f64>,
    pub barycenter: Option<[f64; 2]>,
}

/// Reads an atoms CSV. Rows must be listed by increasing `id` from 0.
pub fn read_atoms_csv(path: &Path) -> Result<Vec<AtomRecord>, AppError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (ix, iy) = match (col("x"), col("y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(AppError::Format(format!("{}: atoms csv needs x and y columns", path.display()))),
    };
    let (iid, ia, ialive, ipsi, ibx, iby) = (col("id"), col("a"), col("alive"), col("psi"), col("bx"), col("by"));
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let num = |c: Option<usize>| -> Result<Option<f64>, AppError> {
            match c.and_then(|c| rec.get(c)).map(str::trim) {
                None | Some("") => Ok(None),
                Some(t) => t
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| AppError::Format(format!("{} row {row}: not a number: {t:?}", path.display()))),
            }
        };
        if let Some(id) = num(iid)? {
            if id != k as f64 {
                return Err(AppError::Format(format!("{} row {row}: expected id {k}", path.display())));
            }
        }
        let x = num(Some(ix))?.ok_or_else(|| AppError::Format(format!("{} row {row}: missing x", path.display())))?;
        let y = num(Some(iy))?.ok_or_else(|| AppError::Format(format!("{} row {row}: missing y", path.display())))?;
        let alive = num(ialive)?.map(|v| v != 0.0).unwrap_or(true);
        let barycenter = match (num(ibx)?, num(iby)?) {
            (Some(bx), Some(by)) => Some([bx, by]),
            _ => None,
        };
        out.push(AtomRecord { position: [x, y], weight: num(ia)?.unwrap_or(f64::NAN), alive, psi: num(ipsi)?, barycenter });
    }
    Ok(out)
}

/// Builds an [`AtomSet`] from records. Missing weights mean uniform weights
/// over the alive atoms.
pub fn atoms_from_records(records: &[AtomRecord]) -> Result<AtomSet, AppError> {
    let alive: Vec<bool> = records.iter().map(|r| r.alive).collect();
    let n_alive = alive.iter().filter(|a| **a).count().max(1) as f64;
    let weights: Vec<f64> = if records.iter().all(|r| r.weight.is_nan()) {
        alive.iter().map(|a| if *a { 1.0 / n_alive } else { 0.0 }).collect()
    } else if records.iter().any(|r| r.weight.is_nan()) {
        return Err(AppError::Format("atoms csv: weights given for some atoms only".into()));
    } else {
        records.iter().map(|r| r.weight).collect()
    };
    let atoms = AtomSet { positions: records.iter().map(|r| r.position).collect(), weights, alive };
    atoms.validate().map_err(|e| AppError::Format(format!("atoms csv: {e}")))?;
    Ok(atoms)
}

/// Streams `series.csv` rows.
pub struct SeriesWriter {
    inner: csv::Writer<File>,
}

impl SeriesWriter {
    pub fn create(path: &Path) -> Result<Self, AppError> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(SERIES_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &DiagnosticsRow) -> Result<(), AppError> {
        let e = &row.energy;
        self.inner.write_record([
            row.step.to_string(),
            real(row.time),
            real(e.total),
            real(e.internal),
            real(e.mass_cost),
            real(e.transport),
            real(e.max_dist_to_barycenter),
            real(e.min_pairwise_atom_dist),
            real(e.min_pairwise_barycenter_dist),
            real(e.mass_error),
            real(e.linf_density),
            row.alive_count.to_string(),
            row.clamp_events.to_string(),
            real(e.gibbs_l1_distance),
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads a numeric CSV with a header into column-major vectors keyed by name.
pub fn read_numeric_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>, AppError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut cols: Vec<(String, Vec<f64>)> = r.headers()?.iter().map(|h| (h.to_string(), Vec::new())).collect();
    for rec in r.records() {
        let rec = rec?;
        for (k, field) in rec.iter().enumerate() {
            let v = if field.is_empty() { f64::NAN } else { field.parse().unwrap_or(f64::NAN) };
            if let Some(c) = cols.get_mut(k) {
                c.1.push(v);
            }
        }
    }
    Ok(cols)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atoms_round_trip_keeps_every_digit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atoms.csv");
        let atoms = AtomSet {
            positions: vec![[0.1234567890123456, 0.9876543210987654], [1.0 / 3.0, 2.0 / 3.0], [0.5, 0.5]],
            weights: vec![0.3, 0.7, 0.0],
            alive: vec![true, true, false],
        };
        write_atoms_csv(&path, &atoms, None).unwrap();
        let recs = read_atoms_csv(&path).unwrap();
        let back = atoms_from_records(&recs).unwrap();
        assert_eq!(back, atoms);
        assert!(recs.iter().all(|r| r.psi.is_none() && r.barycenter.is_none()));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(3).unwrap().ends_with(",0,,,"));
    }

    #[test]
    fn positions_only_file_gets_uniform_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "x,y\n0.25,0.5\n0.75,0.5\n").unwrap();
        let atoms = atoms_from_records(&read_atoms_csv(&path).unwrap()).unwrap();
        assert_eq!(atoms.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn real_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5e-17, 0.0] {
            assert_eq!(real(v).parse::<f64>().unwrap(), v);
        }
    }
}
