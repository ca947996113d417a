//! Central finite-difference gradient checking.
//!
//! The checked function maps input tensors to an output tensor of any shape.
//! The probe loss is `Σ w_i·out_i` for fixed pseudo-random weights `w`, summed
//! in `f64` outside the tape so that only the `f32` rounding of each output
//! enters the difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default probe step.
pub const FD_STEP: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-input `max|analytic - numeric| / max(|analytic|∞, |numeric|∞, floor)`.
    pub rel_errors: Vec<f32>,
    /// Per-input `max|analytic - numeric|`.
    pub abs_errors: Vec<f32>,
    /// Per-input `max(|analytic|∞, |numeric|∞)`.
    pub scales: Vec<f32>,
    pub probes: usize,
    /// Probes dropped because `x ± step` fell on different smooth pieces
    /// (see [`Tape::branch_signature`]).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f32 {
        self.rel_errors.iter().copied().fold(0.0, f32::max)
    }

    /// Largest absolute error over all inputs divided by the largest gradient
    /// over all inputs. Suited to whole models, where some tensors have
    /// gradients that are exactly zero or far below `f32` forward noise.
    pub fn global_rel_error(&self) -> f32 {
        let err = self.abs_errors.iter().copied().fold(0.0, f32::max);
        let scale = self.scales.iter().copied().fold(ABS_FLOOR, f32::max);
        err / scale
    }
}

/// Absolute floor on the gradient scale used to normalise errors.
pub const ABS_FLOOR: f32 = 1e-5;

pub struct GradCheck {
    pub step: f32,
    pub seed: u64,
    /// Probe at most this many entries per input (evenly strided). `None` probes all.
    pub max_probes_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: FD_STEP,
            seed: 0,
            max_probes_per_input: None,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        // Analytic pass.
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out_shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let weights: Vec<f32> = (0..tape.value(out).len())
            .map(|_| rng.random_range(0.5f32..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let wv = tape.constant(Tensor::from_parts(out_shape, weights.clone()));
        let weighted = tape.mul(out, wv)?;
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss)?;
        let base_branch = tape.branch_signature();

        let eval = |perturbed: &[Tensor]| -> Result<(f64, u64)> {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
            let o = f(&mut t, &vs)?;
            let l = t
                .value(o)
                .data()
                .iter()
                .zip(&weights)
                .map(|(&a, &w)| a as f64 * w as f64)
                .sum();
            Ok((l, t.branch_signature()))
        };

        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut abs_errors = Vec::with_capacity(inputs.len());
        let mut scales = Vec::with_capacity(inputs.len());
        let mut probes = 0;
        let mut skipped = 0;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (idx, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            let len = inputs[idx].len();
            let stride = match self.max_probes_per_input {
                Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
                _ => 1,
            };
            let mut max_err = 0.0f32;
            let mut scale = 0.0f32;
            for e in (0..len).step_by(stride) {
                let orig = inputs[idx].data()[e];
                let plus = orig + self.step;
                let minus = orig - self.step;
                work[idx].data_mut()[e] = plus;
                let (lp, bp) = eval(&work)?;
                work[idx].data_mut()[e] = minus;
                let (lm, bm) = eval(&work)?;
                work[idx].data_mut()[e] = orig;
                if bp != base_branch || bm != base_branch {
                    skipped += 1;
                    continue;
                }
                let numeric = ((lp - lm) / (plus as f64 - minus as f64)) as f32;
                let a = analytic.data()[e];
                max_err = max_err.max((a - numeric).abs());
                scale = scale.max(a.abs()).max(numeric.abs());
                probes += 1;
            }
            rel_errors.push(max_err / scale.max(ABS_FLOOR));
            abs_errors.push(max_err);
            scales.push(scale);
        }
        Ok(GradCheckReport {
            rel_errors,
            abs_errors,
            scales,
            probes,
            skipped,
        })
    }
}
