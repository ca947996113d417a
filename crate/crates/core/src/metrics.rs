//! Reconstruction quality metrics: voxel IoU and surface F-score.

use crate::error::{Error, Result};
use crate::voxel::OccupancyGrid;

fn check_pair(op: &'static str, a: &OccupancyGrid, b: &OccupancyGrid) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.side(); 3],
            rhs: vec![b.side(); 3],
        });
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::InvalidArgument(format!("{op} expects binary grids")));
    }
    Ok(())
}

/// `|a ∧ b| / |a ∨ b|`, defined as 1 when both grids are empty.
pub fn voxel_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    check_pair("voxel_iou", a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.values().iter().zip(b.values()) {
        let (p, q) = (p != 0.0, q != 0.0);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Voxel centers in normalized `[0, 1]³` coordinates, ordered `(z, y, x)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceCloud {
    pub points: Vec<[f64; 3]>,
}

impl SurfaceCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Centers of occupied voxels that touch the grid boundary or have an empty
/// 6-neighbor, in raster order.
pub fn surface_points(g: &OccupancyGrid) -> SurfaceCloud {
    let n = g.side();
    let occ = |z: isize, y: isize, x: isize| -> bool {
        let inside = |v: isize| v >= 0 && v < n as isize;
        inside(z) && inside(y) && inside(x) && g.get(z as usize, y as usize, x as usize) != 0.0
    };
    let mut points = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                if g.get(z, y, x) == 0.0 {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let exposed = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ]
                .iter()
                .any(|&(dz, dy, dx)| !occ(zi + dz, yi + dy, xi + dx));
                if exposed {
                    let c = |i: usize| (i as f64 + 0.5) / n as f64;
                    points.push([c(z), c(y), c(x)]);
                }
            }
        }
    }
    SurfaceCloud { points }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Fraction of `from` points whose nearest `to` point is closer than `d`.
fn within_fraction(from: &SurfaceCloud, to: &SurfaceCloud, d: f64) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let d2 = d * d;
    let hits = from
        .points
        .iter()
        .filter(|p| to.points.iter().any(|q| dist2(p, q) < d2))
        .count();
    hits as f64 / from.len() as f64
}

/// Harmonic mean of precision and recall at distance `d`.
/// Both clouds empty scores 1; one empty scores 0.
pub fn fscore(pred: &SurfaceCloud, gt: &SurfaceCloud, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "F-score distance must be > 0, got {d}"
        )));
    }
    if pred.is_empty() && gt.is_empty() {
        return Ok(1.0);
    }
    let precision = within_fraction(pred, gt, d);
    let recall = within_fraction(gt, pred, d);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// F-score between two binary grids via their surface clouds.
pub fn grid_fscore(pred: &OccupancyGrid, gt: &OccupancyGrid, d: f64) -> Result<f64> {
    check_pair("grid_fscore", pred, gt)?;
    fscore(&surface_points(pred), &surface_points(gt), d)
}
