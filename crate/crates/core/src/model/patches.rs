//! Index maps between grids and their patch sequences.
//!
//! 3D patches of side `s` are ordered raster-wise over the `(N/s)³` block
//! positions (z-major); inside a patch, voxels are z-major as in the grid.
//! 2D feature patches are ordered row-major over block positions; inside a
//! patch the order is `(channel, dy, dx)`.

use crate::error::{Error, Result};
use crate::voxel::OccupancyGrid;

/// For every grid voxel (raster order), its position in the flattened
/// `[(N/s)³, s³]` patch sequence. Gathering patches with this map stitches them.
pub fn stitch_map(grid_side: usize, patch_side: usize) -> Result<Vec<u32>> {
    if patch_side == 0 || grid_side % patch_side != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid side {grid_side} not divisible by patch side {patch_side}"
        )));
    }
    let (n, s) = (grid_side, patch_side);
    let blocks = n / s;
    let mut map = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let patch = ((z / s) * blocks + y / s) * blocks + x / s;
                let inner = ((z % s) * s + y % s) * s + x % s;
                map.push((patch * s * s * s + inner) as u32);
            }
        }
    }
    Ok(map)
}

/// Inverse of [`stitch_map`]: for every patch element, its grid voxel index.
pub fn split_map(grid_side: usize, patch_side: usize) -> Result<Vec<u32>> {
    let stitch = stitch_map(grid_side, patch_side)?;
    let mut out = vec![0u32; stitch.len()];
    for (voxel, &slot) in stitch.iter().enumerate() {
        out[slot as usize] = voxel as u32;
    }
    Ok(out)
}

/// Splits a grid into its flattened patch sequence.
pub fn split_grid(grid: &OccupancyGrid, patch_side: usize) -> Result<Vec<f32>> {
    let map = split_map(grid.side(), patch_side)?;
    Ok(map.iter().map(|&i| grid.values()[i as usize]).collect())
}

pub fn stitch_patches(
    patches: &[f32],
    grid_side: usize,
    patch_side: usize,
) -> Result<OccupancyGrid> {
    let map = stitch_map(grid_side, patch_side)?;
    if patches.len() != map.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} patch values, got {}",
            map.len(),
            patches.len()
        )));
    }
    OccupancyGrid::new(
        grid_side,
        map.iter().map(|&i| patches[i as usize]).collect(),
    )
}

/// Gather indices turning a `[C, side, side]` feature map into
/// `[(side/p)², C·p·p]` patch rows.
pub fn feature_patch_map(channels: usize, side: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || side % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature side {side} not divisible by patch side {p}"
        )));
    }
    let blocks = side / p;
    let mut map = Vec::with_capacity(channels * side * side);
    for by in 0..blocks {
        for bx in 0..blocks {
            for c in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (by * p + dy, bx * p + dx);
                        map.push(((c * side + y) * side + x) as u32);
                    }
                }
            }
        }
    }
    Ok(map)
}
