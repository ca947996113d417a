//! Orthographic ray casting of voxel grids.
//!
//! World space is `(x, y, z)` with `y` up; voxel `(z, y, x)` of the grid
//! occupies `[x, x+1] × [y, y+1] × [z, z+1]`. The camera looks at the grid
//! center from direction `c = (cos φ sin θ, sin φ, cos φ cos θ)` for azimuth
//! `θ` and elevation `φ`, and the image plane spans `N` world units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::voxel::OccupancyGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// 1 where the pixel's ray hits an occupied voxel.
    Silhouette,
    /// `1 − t/D` at the first hit (`D` = grid diagonal), 0 for a miss.
    Depth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Row-major, row 0 at the top, values in `[0,1]`.
    pub pixels: Vec<f32>,
}

impl RenderedView {
    /// 8-bit image; depth hits never quantize to the background value.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_unit(self.width, self.height, &self.pixels)
            .expect("pixel count matches dimensions")
    }
}

/// Sine and cosine with values within 1e-12 of 0 or ±1 snapped, so that
/// right-angle views are exact.
fn trig(deg: f64) -> (f64, f64) {
    let r = deg.to_radians();
    let snap = |v: f64| {
        for t in [-1.0, 0.0, 1.0] {
            if (v - t).abs() < 1e-12 {
                return t;
            }
        }
        v
    };
    (snap(r.sin()), snap(r.cos()))
}

/// First-hit distance along the ray `o + t·d`, or `None` on a miss.
fn cast(g: &OccupancyGrid, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let n = g.side() as f64;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] <= 0.0 || o[a] >= n {
                return None;
            }
        } else {
            let (ta, tb) = ((0.0 - o[a]) / d[a], (n - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 || t1 <= 0.0 {
        return None;
    }
    let t_start = t0.max(0.0);
    let side = g.side() as i64;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = o[a] + d[a] * t_start;
        cell[a] = (p.floor() as i64).clamp(0, side - 1);
        if d[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 - o[a]) / d[a];
            t_delta[a] = 1.0 / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - o[a]) / d[a];
            t_delta[a] = -1.0 / d[a];
        }
    }
    let mut t = t_start;
    loop {
        // cell is (x, y, z); the grid is indexed (z, y, x).
        if g.get(cell[2] as usize, cell[1] as usize, cell[0] as usize) >= 0.5 {
            return Some(t);
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= side {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

pub fn render_view(
    g: &OccupancyGrid,
    azimuth_deg: f64,
    elevation_deg: f64,
    width: usize,
    height: usize,
    mode: RenderMode,
) -> Result<RenderedView> {
    if !g.is_binary() {
        return Err(Error::InvalidArgument(
            "render_view needs a binary grid".into(),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(
            "image dimensions must be positive".into(),
        ));
    }
    let n = g.side() as f64;
    let (st, ct) = trig(azimuth_deg);
    let (sp, cp) = trig(elevation_deg);
    let c = [cp * st, sp, cp * ct];
    let right = [ct, 0.0, -st];
    let up = [-sp * st, cp, -sp * ct];
    let diag = n * 3f64.sqrt();
    let center = [n / 2.0; 3];
    let dir = [-c[0], -c[1], -c[2]];
    let mut pixels = Vec::with_capacity(width * height);
    for i in 0..height {
        let v = n / 2.0 - (i as f64 + 0.5) * n / height as f64;
        for j in 0..width {
            let u = (j as f64 + 0.5) * n / width as f64 - n / 2.0;
            let o: [f64; 3] =
                std::array::from_fn(|a| center[a] + right[a] * u + up[a] * v + c[a] * diag / 2.0);
            let value = match (cast(g, o, dir), mode) {
                (None, _) => 0.0,
                (Some(_), RenderMode::Silhouette) => 1.0,
                (Some(t), RenderMode::Depth) => ((1.0 - t / diag) as f32).max(1.0 / 255.0),
            };
            pixels.push(value);
        }
    }
    Ok(RenderedView {
        width,
        height,
        azimuth_deg,
        elevation_deg,
        pixels,
    })
}
