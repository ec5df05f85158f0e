//! PNG rendering of snapshots: density through viridis, Laguerre cell
//! boundaries, and atoms as dots.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::grid::{Density, Grid};
use crate::sdot::{assign_cells, AtomSet};

use super::config::load_config;
use super::snapshot::{atoms_from_records, atoms_path, density_path, read_atoms_csv};
use super::AppError;

const BOUNDARY: Rgb<u8> = Rgb([255, 255, 255]);
const ATOM: Rgb<u8> = Rgb([220, 30, 30]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    /// Min and max of the frame itself.
    PerFrame,
    /// Min and max over every density snapshot in the directory.
    Fixed,
}

/// Draws one frame. `labels` are per-cell owners (`None` skips boundaries)
/// and `range` the density values mapped to the ends of the colormap.
pub fn render_image(
    density: &Density,
    atoms: Option<&AtomSet>,
    labels: Option<&[u32]>,
    range: (f64, f64),
    scale: u32,
) -> RgbImage {
    let g = density.grid;
    let s = scale.max(1);
    let (w, h) = (g.nx as u32 * s, g.ny as u32 * s);
    let mut img = RgbImage::new(w, h);
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    // image rows run top to bottom, grid rows bottom to top
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let (i, j) = ((px / s) as usize, g.ny - 1 - (py / s) as usize);
        let t = ((density.values[g.index(i, j)] - lo) / span).clamp(0.0, 1.0);
        let c = colorous::VIRIDIS.eval_continuous(t);
        *pixel = Rgb([c.r, c.g, c.b]);
    }
    if let Some(labels) = labels {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.index(i, j);
                let (x0, y_top) = (i as u32 * s, (g.ny - 1 - j) as u32 * s);
                if i + 1 < g.nx && labels[c] != labels[c + 1] {
                    for y in y_top..y_top + s {
                        img.put_pixel(x0 + s - 1, y, BOUNDARY);
                    }
                }
                if j + 1 < g.ny && labels[c] != labels[c + g.nx] {
                    for x in x0..x0 + s {
                        img.put_pixel(x, y_top, BOUNDARY);
                    }
                }
            }
        }
    }
    if let Some(atoms) = atoms {
        let r = (s as i64 / 2).max(1);
        for i in atoms.alive_ids() {
            let p = atoms.positions[i];
            let cx = ((p[0] - g.domain.x_min) / g.domain.width() * w as f64) as i64;
            let cy = ((g.domain.y_max - p[1]) / g.domain.height() * h as f64) as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (cx + dx, cy + dy);
                    if dx * dx + dy * dy <= r * r && x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                        img.put_pixel(x as u32, y as u32, ATOM);
                    }
                }
            }
        }
    }
    img
}

fn value_range(d: &Density) -> (f64, f64) {
    (d.min_value(), d.max_value())
}

/// Steps with a density snapshot in `dir`, ascending.
pub fn snapshot_steps(dir: &Path) -> Result<Vec<usize>, AppError> {
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(dir.join("snapshots"))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(k) = name.strip_prefix("density_").and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(k) = k.parse() {
                steps.push(k);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Renders snapshot `frame` of a run directory to `snapshots/frame_KKKKK.png`
/// and returns the image path.
pub fn render_frame(dir: &Path, frame: usize, scale: u32, mode: ColorScale) -> Result<PathBuf, AppError> {
    let config = load_config(&dir.join("config.txt"))?;
    let grid: Grid = config.grid();
    let dpath = density_path(dir, frame);
    if !dpath.exists() {
        return Err(AppError::MissingFrame(frame));
    }
    let density = Density::read_csv(grid, &dpath)?;
    let records = read_atoms_csv(&atoms_path(dir, frame))?;
    let any_alive = records.iter().any(|r| r.alive);
    let (atoms, labels) = if any_alive {
        let atoms = atoms_from_records(&records)?;
        let psi: Vec<f64> = records.iter().map(|r| r.psi.unwrap_or(0.0)).collect();
        let labels = assign_cells(&grid, &atoms, &psi).map_err(|e| AppError::Format(e.to_string()))?;
        (Some(atoms), Some(labels))
    } else {
        (None, None)
    };
    let range = match mode {
        ColorScale::PerFrame => value_range(&density),
        ColorScale::Fixed => {
            let mut r = (f64::INFINITY, f64::NEG_INFINITY);
            for k in snapshot_steps(dir)? {
                let (lo, hi) = value_range(&Density::read_csv(grid, &density_path(dir, k))?);
                r = (r.0.min(lo), r.1.max(hi));
            }
            r
        }
    };
    let img = render_image(&density, atoms.as_ref(), labels.as_deref(), range, scale);
    let out = dir.join("snapshots").join(format!("frame_{frame:05}.png"));
    img.save(&out)?;
    Ok(out)
}
