//! Point-pattern statistics for the crystallization diagnostics.

use crate::sdot::{AtomSet, Point};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrystalMetrics {
    pub nn_mean: f64,
    /// Standard deviation over mean of nearest-neighbor distances.
    pub nn_cv: f64,
    pub hex_order: f64,
}

/// Ids of the `k` nearest points to `points[i]`, ties to the lower id.
fn nearest(points: &[Point], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| {
            let d = (points[j][0] - points[i][0]).powi(2) + (points[j][1] - points[i][1]).powi(2);
            (d, j)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Per-point bond-orientational order `|⟨e^{6iθ}⟩|` over the 6 nearest
/// neighbors, and whether those neighbors surround the point (no angular
/// gap of π or more).
pub fn local_hex_order(points: &[Point], i: usize) -> (f64, bool) {
    let nb = nearest(points, i, 6);
    let mut bearings: Vec<f64> =
        nb.iter().map(|&j| (points[j][1] - points[i][1]).atan2(points[j][0] - points[i][0])).collect();
    let (mut re, mut im) = (0.0, 0.0);
    for t in &bearings {
        re += (6.0 * t).cos();
        im += (6.0 * t).sin();
    }
    let n = bearings.len().max(1) as f64;
    bearings.sort_by(f64::total_cmp);
    let mut gap: f64 = 0.0;
    for w in bearings.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    if let (Some(first), Some(last)) = (bearings.first(), bearings.last()) {
        gap = gap.max(first + 2.0 * std::f64::consts::PI - last);
    }
    ((re / n).hypot(im / n), gap < std::f64::consts::PI - 1e-12)
}

/// Nearest-neighbor statistics and hexatic order of the alive atoms.
///
/// The hexatic order averages the local order over atoms whose six nearest
/// neighbors surround them; boundary atoms, whose neighbors all lie on one
/// side, are left out. If no atom is surrounded all atoms are used. Returns
/// `None` with fewer than three alive atoms.
pub fn crystallization_metrics(atoms: &AtomSet) -> Option<CrystalMetrics> {
    let points: Vec<Point> = atoms.alive_ids().map(|i| atoms.positions[i]).collect();
    let n = points.len();
    if n < 3 {
        return None;
    }
    let nn: Vec<f64> = (0..n)
        .map(|i| {
            let j = nearest(&points, i, 1)[0];
            (points[j][0] - points[i][0]).hypot(points[j][1] - points[i][1])
        })
        .collect();
    let mean = nn.iter().sum::<f64>() / n as f64;
    let var = nn.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let local: Vec<(f64, bool)> = (0..n).map(|i| local_hex_order(&points, i)).collect();
    let inner: Vec<f64> = local.iter().filter(|l| l.1).map(|l| l.0).collect();
    let hex_order = if inner.is_empty() {
        local.iter().map(|l| l.0).sum::<f64>() / n as f64
    } else {
        inner.iter().sum::<f64>() / inner.len() as f64
    };
    Some(CrystalMetrics { nn_mean: mean, nn_cv: var.sqrt() / mean, hex_order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hexagon_is_perfectly_ordered() {
        let mut pts = vec![[0.5, 0.5]];
        for k in 0..6 {
            let t = k as f64 * std::f64::consts::PI / 3.0 + 0.1;
            pts.push([0.5 + 0.1 * t.cos(), 0.5 + 0.1 * t.sin()]);
        }
        let m = crystallization_metrics(&AtomSet::uniform(pts)).unwrap();
        assert!(m.nn_cv <= 1e-6);
        assert!(m.hex_order >= 0.999);
        assert!((m.nn_mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn square_lattice_center() {
        let mut pts = vec![];
        for j in 0..3 {
            for i in 0..3 {
                pts.push([0.2 + 0.3 * i as f64, 0.2 + 0.3 * j as f64]);
            }
        }
        // center id 4: four side neighbors, then the two lowest-id diagonals (0 and 2)
        let bearings = [0.0f64, 90.0, 180.0, 270.0, 225.0, 315.0].map(f64::to_radians);
        let re: f64 = bearings.iter().map(|t| (6.0 * t).cos()).sum::<f64>() / 6.0;
        let im: f64 = bearings.iter().map(|t| (6.0 * t).sin()).sum::<f64>() / 6.0;
        let (psi6, surrounded) = local_hex_order(&pts, 4);
        assert!(surrounded);
        assert!((psi6 - re.hypot(im)).abs() < 1e-12);
        let m = crystallization_metrics(&AtomSet::uniform(pts)).unwrap();
        assert!((m.hex_order - psi6).abs() < 1e-12, "only the center is surrounded");
        assert!(m.nn_cv < 1e-12);
    }

    #[test]
    fn random_points_are_disordered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point> = (0..200).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let m = crystallization_metrics(&AtomSet::uniform(pts)).unwrap();
        assert!(m.hex_order < 0.75, "{}", m.hex_order);
        assert!(m.nn_cv > 0.3);
    }

    #[test]
    fn too_few_atoms() {
        assert!(crystallization_metrics(&AtomSet::uniform(vec![[0.1, 0.1], [0.5, 0.5]])).is_none());
        let mut a = AtomSet::uniform(vec![[0.1, 0.1], [0.5, 0.5], [0.9, 0.2]]);
        a.alive[2] = false;
        a.weights = vec![0.5, 0.5, 0.0];
        assert!(crystallization_metrics(&a).is_none());
    }
}
