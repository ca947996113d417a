//! Procedural blocky objects built from axis-aligned boxes.
//!
//! Coordinates are `(z, y, x)` voxel indices with `y` pointing up. Objects
//! stay inside a centered region with a margin of `N/5` so that every
//! rendered view keeps them in frame.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::OccupancyGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archetype {
    #[serde(rename = "table")]
    Table,
    #[serde(rename = "chair")]
    Chair,
    #[serde(rename = "lshape")]
    LShape,
    #[serde(rename = "slab")]
    Slab,
    #[serde(rename = "random-union")]
    RandomUnion,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Table,
        Archetype::Chair,
        Archetype::LShape,
        Archetype::Slab,
        Archetype::RandomUnion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Table => "table",
            Archetype::Chair => "chair",
            Archetype::LShape => "lshape",
            Archetype::Slab => "slab",
            Archetype::RandomUnion => "random-union",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown archetype {s:?}")))
    }
}

/// Axis-aligned box: voxels `origin[a] .. origin[a] + extent[a]` on each axis `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl VoxelBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.extent[a])
    }

    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeSpec {
    pub seed: u64,
    pub archetype: Archetype,
    pub boxes: Vec<VoxelBox>,
    pub grid_side: usize,
}

impl ShapeSpec {
    /// Voxelwise OR of the boxes.
    pub fn rasterize(&self) -> OccupancyGrid {
        let mut g = OccupancyGrid::zeros(self.grid_side);
        for b in &self.boxes {
            for z in b.origin[0]..b.origin[0] + b.extent[0] {
                for y in b.origin[1]..b.origin[1] + b.extent[1] {
                    for x in b.origin[2]..b.origin[2] + b.extent[2] {
                        g.set(z, y, x, 1.0);
                    }
                }
            }
        }
        g
    }
}

fn bx(z: usize, y: usize, x: usize, ez: usize, ey: usize, ex: usize) -> VoxelBox {
    VoxelBox {
        origin: [z, y, x],
        extent: [ez, ey, ex],
    }
}

/// Usable region `[lo, lo + span)` on every axis.
fn region(n: usize) -> (usize, usize) {
    let lo = n / 5;
    (lo, n - 2 * lo)
}

fn range(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi.max(lo))
}

/// Legs at the corners of a `[z0, z0+ez) × [x0, x0+ex)` footprint.
fn legs(
    rng: &mut ChaCha8Rng,
    z0: usize,
    x0: usize,
    ez: usize,
    ex: usize,
    y0: usize,
    height: usize,
    count: usize,
) -> Vec<VoxelBox> {
    let w = range(rng, 1, 2.min(ez.min(ex) / 3).max(1));
    let corners = [
        (z0, x0),
        (z0 + ez - w, x0 + ex - w),
        (z0, x0 + ex - w),
        (z0 + ez - w, x0),
    ];
    if count == 2 {
        // Two wide panels under opposite edges.
        return vec![
            bx(z0, y0, x0, ez, height, w),
            bx(z0, y0, x0 + ex - w, ez, height, w),
        ];
    }
    corners[..count]
        .iter()
        .map(|&(z, x)| bx(z, y0, x, w, height, w))
        .collect()
}

fn table(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelBox> {
    let (lo, span) = region(n);
    let ez = range(rng, span * 3 / 5, span);
    let ex = range(rng, span * 3 / 5, span);
    let z0 = lo + range(rng, 0, span - ez);
    let x0 = lo + range(rng, 0, span - ex);
    let thick = range(rng, 1, 2);
    let leg_h = range(rng, span / 2, span - thick);
    let mut boxes = vec![bx(z0, lo + leg_h, x0, ez, thick, ex)];
    let count = range(rng, 2, 4);
    boxes.extend(legs(rng, z0, x0, ez, ex, lo, leg_h, count));
    boxes
}

fn chair(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelBox> {
    let (lo, span) = region(n);
    let ez = range(rng, span / 2, span * 4 / 5);
    let ex = range(rng, span / 2, span * 4 / 5);
    let z0 = lo + range(rng, 0, span - ez);
    let x0 = lo + range(rng, 0, span - ex);
    let seat_y = range(rng, span / 3, span / 2);
    let mut boxes = vec![bx(z0, lo + seat_y, x0, ez, 1, ex)];
    boxes.extend(legs(rng, z0, x0, ez, ex, lo, seat_y, 4));
    let back_h = range(rng, 2, span - seat_y - 1);
    boxes.push(bx(z0, lo + seat_y + 1, x0, 1, back_h, ex));
    boxes
}

fn lshape(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelBox> {
    let (lo, span) = region(n);
    let ex = range(rng, span / 3, span);
    let x0 = lo + range(rng, 0, span - ex);
    let base_h = range(rng, 1, span / 3);
    let ez = range(rng, span / 2, span);
    let z0 = lo + range(rng, 0, span - ez);
    let arm_d = range(rng, 1, ez / 2);
    let arm_h = range(rng, base_h + 2, span);
    vec![
        bx(z0, lo, x0, ez, base_h, ex),
        bx(z0, lo + base_h, x0, arm_d, arm_h - base_h, ex),
    ]
}

fn slab(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelBox> {
    let (lo, span) = region(n);
    let ey = range(rng, 1, 3);
    let ez = range(rng, span / 2, span);
    let ex = range(rng, span / 2, span);
    vec![bx(
        lo + range(rng, 0, span - ez),
        lo + range(rng, 0, span - ey),
        lo + range(rng, 0, span - ex),
        ez,
        ey,
        ex,
    )]
}

fn random_union(rng: &mut ChaCha8Rng, n: usize) -> Vec<VoxelBox> {
    let (lo, span) = region(n);
    let count = range(rng, 2, 3);
    (0..count)
        .map(|_| {
            let e: [usize; 3] = std::array::from_fn(|_| range(rng, 2, span * 3 / 5));
            let o: [usize; 3] = std::array::from_fn(|a| lo + range(rng, 0, span - e[a]));
            VoxelBox {
                origin: o,
                extent: e,
            }
        })
        .collect()
}

/// Deterministic shape for `(seed, archetype, n)`; `n` must be at least 8.
pub fn generate_shape(
    seed: u64,
    archetype: Archetype,
    n: usize,
) -> Result<(ShapeSpec, OccupancyGrid)> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!(
            "grid side must be >= 8, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = match archetype {
        Archetype::Table => table(&mut rng, n),
        Archetype::Chair => chair(&mut rng, n),
        Archetype::LShape => lshape(&mut rng, n),
        Archetype::Slab => slab(&mut rng, n),
        Archetype::RandomUnion => random_union(&mut rng, n),
    };
    let spec = ShapeSpec {
        seed,
        archetype,
        boxes,
        grid_side: n,
    };
    debug_assert!(spec
        .boxes
        .iter()
        .all(|b| b.volume() > 0 && (0..3).all(|a| b.origin[a] + b.extent[a] <= n)));
    let grid = spec.rasterize();
    Ok((spec, grid))
}
