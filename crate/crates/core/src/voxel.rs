//! Occupancy grids and the rank-1 factor representation.
//!
//! Grids are stored z-major, y-middle, x-minor: voxel `(z, y, x)` lives at
//! `(z * N + y) * N + x`. The same order is used by the `VOXG` file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const VOXEL_MAGIC: &[u8; 4] = b"VOXG";
const FLAG_BINARY: u8 = 0;
const FLAG_REAL: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    side: usize,
    values: Vec<f32>,
}

impl OccupancyGrid {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        if side == 0 || values.len() != side * side * side {
            return Err(Error::InvalidArgument(format!(
                "grid of side {side} needs {} values, got {}",
                side * side * side,
                values.len()
            )));
        }
        Ok(OccupancyGrid { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        OccupancyGrid {
            side,
            values: vec![0.0; side * side * side],
        }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(side * side * side);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    values.push(f(z, y, x));
                }
            }
        }
        OccupancyGrid { side, values }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
            return Err(Error::InvalidArgument(format!(
                "expected a cubic [N, N, N] tensor, got {s:?}"
            )));
        }
        Self::new(s[0], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.side; 3], self.values.clone())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.side + y) * self.side + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.values[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Serializes to the `VOXG` format. Grids holding only 0/1 use the byte
    /// payload, anything else the `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let binary = self.is_binary();
        let mut out = Vec::with_capacity(9 + self.values.len() * if binary { 1 } else { 4 });
        out.extend_from_slice(VOXEL_MAGIC);
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        if binary {
            out.push(FLAG_BINARY);
            out.extend(self.values.iter().map(|&v| v as u8));
        } else {
            out.push(FLAG_REAL);
            for v in &self.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format("voxel", origin, reason);
        if bytes.len() < 9 || &bytes[..4] != VOXEL_MAGIC {
            return Err(bad("missing VOXG header"));
        }
        let side = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = side
            .checked_mul(side)
            .and_then(|v| v.checked_mul(side))
            .filter(|&c| c > 0)
            .ok_or_else(|| bad("invalid grid side"))?;
        let payload = &bytes[9..];
        let values = match bytes[8] {
            FLAG_BINARY => {
                if payload.len() != count {
                    return Err(bad("binary payload length mismatch"));
                }
                if payload.iter().any(|&b| b > 1) {
                    return Err(bad("binary payload byte outside {0, 1}"));
                }
                payload.iter().map(|&b| b as f32).collect()
            }
            FLAG_REAL => {
                if payload.len() != count * 4 {
                    return Err(bad("real payload length mismatch"));
                }
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            other => return Err(bad(&format!("unknown payload flag {other}"))),
        };
        Ok(OccupancyGrid { side, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `k` triplets `(z_i, y_i, x_i)` of length-`N` vectors with entries in `[0, 1]`,
/// stored as three row-major `[k, N]` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    side: usize,
    z: Vec<f32>,
    y: Vec<f32>,
    x: Vec<f32>,
}

impl FactorSet {
    pub fn new(side: usize, z: Vec<f32>, y: Vec<f32>, x: Vec<f32>) -> Result<Self> {
        if side == 0
            || z.is_empty()
            || z.len() % side != 0
            || y.len() != z.len()
            || x.len() != z.len()
        {
            return Err(Error::InvalidArgument(format!(
                "factor matrices must all be [k >= 1, {side}]; got lengths {}, {}, {}",
                z.len(),
                y.len(),
                x.len()
            )));
        }
        if let Some(v) = z
            .iter()
            .chain(&y)
            .chain(&x)
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "factor entry {v} outside [0, 1]"
            )));
        }
        Ok(FactorSet { side, z, y, x })
    }

    pub fn from_triplets(side: usize, triplets: &[(Vec<f32>, Vec<f32>, Vec<f32>)]) -> Result<Self> {
        let cat = |pick: fn(&(Vec<f32>, Vec<f32>, Vec<f32>)) -> &Vec<f32>| {
            triplets
                .iter()
                .flat_map(|t| pick(t).iter().copied())
                .collect::<Vec<_>>()
        };
        Self::new(side, cat(|t| &t.0), cat(|t| &t.1), cat(|t| &t.2))
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn k(&self) -> usize {
        self.z.len() / self.side
    }

    pub fn factor(&self, i: usize) -> (&[f32], &[f32], &[f32]) {
        let r = i * self.side..(i + 1) * self.side;
        (&self.z[r.clone()], &self.y[r.clone()], &self.x[r])
    }

    pub fn z(&self) -> &[f32] {
        &self.z
    }

    pub fn y(&self) -> &[f32] {
        &self.y
    }

    pub fn x(&self) -> &[f32] {
        &self.x
    }

    /// Unclipped rank-1 grid `z_i ⊗ y_i ⊗ x_i`.
    pub fn rank1_grid(&self, i: usize) -> OccupancyGrid {
        let (z, y, x) = self.factor(i);
        OccupancyGrid::from_fn(self.side, |a, b, c| z[a] * y[b] * x[c])
    }

    /// Keeps the triplets listed in `order`, in that order.
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let pick = |m: &[f32]| {
            order
                .iter()
                .flat_map(|&i| m[i * self.side..(i + 1) * self.side].iter().copied())
                .collect()
        };
        Self::new(self.side, pick(&self.z), pick(&self.y), pick(&self.x))
    }
}

/// Linear heads mapping decoder outputs to factor logits: `W: [d_model, N]`, `b: [N]`.
#[derive(Clone, Copy, Debug)]
pub struct FactorHeadVars {
    pub z_weight: Var,
    pub z_bias: Var,
    pub y_weight: Var,
    pub y_bias: Var,
    pub x_weight: Var,
    pub x_bias: Var,
}

/// Factor matrices `[k, N]` living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub z: Var,
    pub y: Var,
    pub x: Var,
}

impl FactorVars {
    pub fn to_factor_set(&self, tape: &Tape) -> Result<FactorSet> {
        let side = *tape.shape(self.z).last().unwrap_or(&0);
        FactorSet::new(
            side,
            tape.value(self.z).data().to_vec(),
            tape.value(self.y).data().to_vec(),
            tape.value(self.x).data().to_vec(),
        )
    }
}

/// `sigmoid(Y·W + b)` for each of the three heads; `decoder_output: [k, d_model]`.
pub fn apply_factor_heads(
    tape: &mut Tape,
    decoder_output: Var,
    heads: &FactorHeadVars,
) -> Result<FactorVars> {
    let mut head = |w: Var, b: Var| -> Result<Var> {
        let lin = tape.matmul(decoder_output, w)?;
        let lin = tape.add(lin, b)?;
        Ok(tape.sigmoid(lin))
    };
    Ok(FactorVars {
        z: head(heads.z_weight, heads.z_bias)?,
        y: head(heads.y_weight, heads.y_bias)?,
        x: head(heads.x_weight, heads.x_bias)?,
    })
}

/// Differentiable clipped composition `min(1, Σ_i z_i ⊗ y_i ⊗ x_i)`.
pub fn compose_factor_vars(tape: &mut Tape, f: &FactorVars) -> Result<Var> {
    tape.compose_clipped(f.z, f.y, f.x)
}

pub fn compose_factors(f: &FactorSet) -> OccupancyGrid {
    let mut tape = Tape::new();
    let n = f.side;
    let k = f.k();
    let z = tape.constant(Tensor::from_parts(vec![k, n], f.z.clone()));
    let y = tape.constant(Tensor::from_parts(vec![k, n], f.y.clone()));
    let x = tape.constant(Tensor::from_parts(vec![k, n], f.x.clone()));
    let out = tape
        .compose_clipped(z, y, x)
        .expect("factor matrices share a shape by construction");
    OccupancyGrid::from_tensor(tape.value(out)).expect("composition is cubic")
}

/// Mean squared error over all `N³` voxels.
pub fn mse_loss(p: &OccupancyGrid, g: &OccupancyGrid) -> Result<f32> {
    if p.side != g.side {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: vec![p.side; 3],
            rhs: vec![g.side; 3],
        });
    }
    let s: f64 = p
        .values
        .iter()
        .zip(&g.values)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((s / p.values.len() as f64) as f32)
}

/// Differentiable MSE between a predicted `[N, N, N]` node and a fixed target.
pub fn mse_loss_var(tape: &mut Tape, p: Var, g: &OccupancyGrid) -> Result<Var> {
    if tape.shape(p) != [g.side; 3] {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: tape.shape(p).to_vec(),
            rhs: vec![g.side; 3],
        });
    }
    let target = tape.constant(g.to_tensor());
    let diff = tape.sub(p, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Binarizes with an inclusive comparison: `1` where `p >= tau`.
pub fn threshold(p: &OccupancyGrid, tau: f32) -> Result<OccupancyGrid> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {tau}"
        )));
    }
    Ok(OccupancyGrid {
        side: p.side,
        values: p
            .values
            .iter()
            .map(|&v| if v >= tau { 1.0 } else { 0.0 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indicator_box(n: usize, lo: usize, hi: usize) -> Vec<f32> {
        (0..n)
            .map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn corner_block_from_indicator_factors() {
        let v = indicator_box(4, 0, 2);
        let f = FactorSet::new(4, v.clone(), v.clone(), v.clone()).unwrap();
        let g = compose_factors(&f);
        let expect =
            OccupancyGrid::from_fn(4, |z, y, x| if z < 2 && y < 2 && x < 2 { 1.0 } else { 0.0 });
        assert_eq!(g, expect);

        let twice = FactorSet::new(
            4,
            [v.clone(), v.clone()].concat(),
            [v.clone(), v.clone()].concat(),
            [v.clone(), v].concat(),
        )
        .unwrap();
        assert_eq!(compose_factors(&twice), expect);
    }

    #[test]
    fn factor_entries_outside_unit_interval_rejected() {
        assert!(FactorSet::new(2, vec![0.5, 1.5], vec![0.0; 2], vec![0.0; 2]).is_err());
        assert!(FactorSet::new(2, vec![-0.1, 0.5], vec![0.0; 2], vec![0.0; 2]).is_err());
        assert!(FactorSet::new(2, vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn mse_examples() {
        let g = OccupancyGrid::from_fn(3, |z, y, x| ((z + y + x) % 2) as f32);
        assert_eq!(mse_loss(&g, &g).unwrap(), 0.0);
        let zeros = OccupancyGrid::zeros(3);
        let ones = OccupancyGrid::new(3, vec![1.0; 27]).unwrap();
        assert_eq!(mse_loss(&zeros, &ones).unwrap(), 1.0);
        assert!(mse_loss(&zeros, &OccupancyGrid::zeros(2)).is_err());
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let g = OccupancyGrid::new(2, vec![0.3; 8]).unwrap();
        assert!(threshold(&g, 0.3)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 1.0));
        let b = OccupancyGrid::from_fn(2, |z, _, x| (z ^ x) as f32);
        assert_eq!(threshold(&b, 0.7).unwrap(), b);
        assert!(threshold(&b, 0.0).is_err());
        assert!(threshold(&b, 1.0).is_err());
    }

    #[test]
    fn voxel_file_layout_is_bit_exact() {
        let mut g = OccupancyGrid::zeros(2);
        g.set(0, 0, 1, 1.0);
        g.set(1, 1, 0, 1.0);
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..4], b"VOXG");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..], &[0, 1, 0, 0, 0, 0, 1, 0]);

        let mut r = g.clone();
        r.set(0, 0, 0, 0.25);
        let rb = r.to_bytes();
        assert_eq!(rb[8], 1);
        assert_eq!(&rb[9..13], &0.25f32.to_le_bytes());
        assert_eq!(rb.len(), 9 + 8 * 4);
        assert_eq!(OccupancyGrid::from_bytes(&rb, Path::new("mem")).unwrap(), r);
    }

    #[test]
    fn malformed_voxel_bytes_rejected() {
        let p = Path::new("mem");
        assert!(OccupancyGrid::from_bytes(b"VOXX\x01\0\0\0\0\x01", p).is_err());
        assert!(OccupancyGrid::from_bytes(b"VOXG\x02\0\0\0\0\x01", p).is_err());
        assert!(OccupancyGrid::from_bytes(b"VOXG\x01\0\0\0\x07\x01", p).is_err());
        assert!(OccupancyGrid::from_bytes(b"VOXG\x01\0\0\0\0\x02", p).is_err());
    }
}
