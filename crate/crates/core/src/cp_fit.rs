//! Gradient-descent fitting of clipped rank-1 factor sums to a fixed grid.
//!
//! Used as an oracle: it shows which grids the factor representation can
//! express, independently of any network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::voxel_iou;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::voxel::{self, FactorSet, FactorVars, OccupancyGrid};

pub const DEFAULT_LEARNING_RATE: f32 = 0.5;
pub const DEFAULT_ITERATIONS: usize = 2000;
/// Threshold used to score candidate fits.
pub const FIT_THRESHOLD: f32 = 0.3;
/// Random restarts tried by [`cp_fit_oracle`] before giving up on IoU 1.
pub const DEFAULT_RESTARTS: u64 = 4;

#[derive(Clone, Debug)]
pub struct CpFit {
    pub factors: FactorSet,
    /// Thresholded IoU of the returned factors against the target.
    pub iou: f64,
    pub loss: f32,
    pub iterations: usize,
}

/// Fits `k` factor triplets to `g` with plain gradient descent on
/// pre-sigmoid logits, minimizing the MSE of the clipped composition.
/// Returns the best iterate (highest thresholded IoU, then lowest loss).
/// Restarts from fresh initializations while no exact fit has been found.
pub fn cp_fit_oracle(g: &OccupancyGrid, k: usize, iterations: usize, seed: u64) -> Result<CpFit> {
    let mut best: Option<CpFit> = None;
    for r in 0..DEFAULT_RESTARTS {
        let fit = cp_fit_with_rate(
            g,
            k,
            iterations,
            seed.wrapping_add(r.wrapping_mul(0x9E37_79B9)),
            DEFAULT_LEARNING_RATE,
        )?;
        let better = best
            .as_ref()
            .is_none_or(|b| fit.iou > b.iou || (fit.iou == b.iou && fit.loss < b.loss));
        if better {
            best = Some(fit);
        }
        if best.as_ref().is_some_and(|b| b.iou == 1.0) {
            break;
        }
    }
    Ok(best.expect("at least one restart runs"))
}

/// A single descent from one initialization.
///
/// The learning rate applies to the summed squared error, i.e. the MSE
/// gradient is scaled by `N³` before the step.

pub fn cp_fit_with_rate(
    g: &OccupancyGrid,
    k: usize,
    iterations: usize,
    seed: u64,
    lr: f32,
) -> Result<CpFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("factor count k must be >= 1".into()));
    }
    let n = g.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut logits: [Vec<f32>; 3] =
        std::array::from_fn(|_| (0..k * n).map(|_| normal.sample(&mut rng)).collect());

    let mut best: Option<CpFit> = None;
    for it in 0..=iterations {
        let mut tape = Tape::new();
        let [lz, ly, lx] = logits
            .each_ref()
            .map(|l| tape.param(Tensor::from_parts(vec![k, n], l.clone())));
        let vars = FactorVars {
            z: tape.sigmoid(lz),
            y: tape.sigmoid(ly),
            x: tape.sigmoid(lx),
        };
        let p = voxel::compose_factor_vars(&mut tape, &vars)?;
        let loss = voxel::mse_loss_var(&mut tape, p, g)?;
        let loss_value = tape.value(loss).item();

        let pred = OccupancyGrid::from_tensor(tape.value(p))?;
        let iou = voxel_iou(
            &voxel::threshold(&pred, FIT_THRESHOLD)?,
            &voxel::threshold(g, 0.5)?,
        )?;
        let better = match &best {
            None => true,
            Some(b) => iou > b.iou || (iou == b.iou && loss_value < b.loss),
        };
        if better {
            best = Some(CpFit {
                factors: vars.to_factor_set(&tape)?,
                iou,
                loss: loss_value,
                iterations: it,
            });
        }
        if it == iterations {
            break;
        }
        let grads = tape.backward(loss)?;
        let step = lr * (n * n * n) as f32;
        for (l, v) in logits.iter_mut().zip([lz, ly, lx]) {
            let gv = grads.wrt(v);
            for (w, d) in l.iter_mut().zip(gv.data()) {
                *w -= step * d;
            }
        }
    }
    Ok(best.expect("at least one iterate is evaluated"))
}
