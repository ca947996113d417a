//! The LegoFormer network: backbone, pre-norm transformer and output heads.
//!
//! All forward computation happens on a [`Tape`], batched over objects.
//! Inference helpers such as [`LegoFormer::predict`] build a throwaway tape
//! with the parameters as constants.

pub mod checkpoint;
pub mod config;
mod layers;
pub mod params;
pub mod patches;
pub mod positional;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::voxel::{self, FactorHeadVars, FactorSet, FactorVars, OccupancyGrid};

pub use config::{ModelConfig, Scheme, Variant};
pub use layers::{causal_mask, diagonal_mask, AttentionKind, AttentionRecord};
pub use params::{parameter_count, ParamStore, ParameterBreakdown};
pub use positional::{sincos_positional, Layout};

use layers::{Bound, Capture};

/// Threshold used to binarize patches fed back during free-running naive decoding.
pub const FEEDBACK_THRESHOLD: f32 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct LegoFormer {
    config: ModelConfig,
    params: ParamStore,
}

/// Symbolic outputs of a batched forward pass.
pub struct BatchGraph {
    /// Composed occupancy `[B, N, N, N]`, values in `[0,1]`.
    pub grids: Var,
    /// Factor matrices `[B, k, N]` (factors scheme only).
    pub factors: Option<FactorVars>,
    /// Attention records per batch item (empty unless capture was requested).
    pub attention: Vec<Vec<AttentionRecord>>,
}

/// One reconstructed object.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grid: OccupancyGrid,
    pub factors: Option<FactorSet>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PredictOptions<'a> {
    pub capture: bool,
    /// Ground-truth grids for teacher-forced naive decoding, one per batch item.
    /// Ignored by the other schemes.
    pub teacher: Option<&'a [OccupancyGrid]>,
}

impl LegoFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&config, seed)?;
        Ok(LegoFormer { config, params })
    }

    /// Wraps an existing parameter set, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = params::param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(LegoFormer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Places every parameter on `tape`, in store order.
    pub fn bind_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        Bound::new(tape, &self.params, trainable).vars().to_vec()
    }

    fn bound<'a>(&'a self, vars: &[Var]) -> Result<Bound<'a>> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Bound::from_vars(&self.params, vars.to_vec()))
    }

    /// Full batched forward pass on `tape` using parameter handles from
    /// [`LegoFormer::bind_params`] (or any vars holding tensors of the same shapes).
    /// Naive-scheme training requires `teacher`; without it that scheme
    /// decodes free-running.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        views: &[Vec<GrayImage>],
        teacher: Option<&[OccupancyGrid]>,
        capture: bool,
    ) -> Result<BatchGraph> {
        let p = self.bound(param_vars)?;
        let mut sink: Option<Capture> = capture.then(|| vec![Vec::new(); views.len()]);
        let tokens = self.embed_on_tape(tape, &p, views)?;
        let memory = self.encode_on_tape(tape, &p, tokens, sink.as_mut())?;
        let (grids, factors) = match self.config.scheme {
            Scheme::Factors => {
                let (grids, f) = self.decode_factors_on_tape(tape, &p, memory, sink.as_mut())?;
                (grids, Some(f))
            }
            Scheme::NaiveNar | Scheme::NaiveFull => (
                self.decode_parallel_on_tape(tape, &p, memory, sink.as_mut())?,
                None,
            ),
            Scheme::Naive => {
                let g = match teacher {
                    Some(t) => self.decode_naive_teacher(tape, &p, memory, t, sink.as_mut())?,
                    None => self.decode_naive_free(tape, &p, memory, sink.as_mut())?,
                };
                (g, None)
            }
        };
        Ok(BatchGraph {
            grids,
            factors,
            attention: sink.unwrap_or_default(),
        })
    }

    /// Reconstructs each item of `views` with the parameters held as constants.
    pub fn predict_batch(
        &self,
        views: &[Vec<GrayImage>],
        opts: PredictOptions,
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape, false);
        let g = self.forward_on_tape(&mut tape, &vars, views, opts.teacher, opts.capture)?;
        let n = self.config.grid_side;
        let cube = n * n * n;
        let data = tape.value(g.grids).data();
        let mut attention = g.attention.into_iter();
        let mut out = Vec::with_capacity(views.len());
        for b in 0..views.len() {
            let grid = OccupancyGrid::new(n, data[b * cube..(b + 1) * cube].to_vec())?;
            let factors = match g.factors {
                Some(f) => {
                    let k = self.config.n_queries;
                    let rows = |v: Var| tape.value(v).data()[b * k * n..(b + 1) * k * n].to_vec();
                    Some(FactorSet::new(n, rows(f.z), rows(f.y), rows(f.x))?)
                }
                None => None,
            };
            out.push(Prediction {
                grid,
                factors,
                attention: attention.next().unwrap_or_default(),
            });
        }
        Ok(out)
    }

    pub fn predict(&self, views: &[GrayImage], opts: PredictOptions) -> Result<Prediction> {
        let batch = [views.to_vec()];
        Ok(self.predict_batch(&batch, opts)?.remove(0))
    }

    /// Encoder input tokens `[B, t, d_model]` for a batch of view sets.
    pub fn embed(&self, views: &[Vec<GrayImage>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape, false);
        let p = self.bound(&vars)?;
        let t = self.embed_on_tape(&mut tape, &p, views)?;
        Ok(tape.value(t).clone())
    }

    /// Encoder output `[B, t, d_model]` for precomputed tokens.
    pub fn encode(
        &self,
        tokens: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Vec<Vec<AttentionRecord>>)> {
        check_rank3(tokens, self.config.d_model)?;
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape, false);
        let p = self.bound(&vars)?;
        let mut sink: Option<Capture> = capture.then(|| vec![Vec::new(); tokens.shape()[0]]);
        let x = tape.constant(tokens.clone());
        let m = self.encode_on_tape(&mut tape, &p, x, sink.as_mut())?;
        Ok((tape.value(m).clone(), sink.unwrap_or_default()))
    }

    /// Factor-query decoder output `[B, k, d_model]` (after the closing norm) for a given memory.
    pub fn decode_factors(
        &self,
        memory: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Vec<Vec<AttentionRecord>>)> {
        if self.config.scheme != Scheme::Factors {
            return Err(Error::InvalidArgument(format!(
                "decode_factors needs the factors scheme, model uses {}",
                self.config.scheme
            )));
        }
        check_rank3(memory, self.config.d_model)?;
        let mut tape = Tape::new();
        let vars = self.bind_params(&mut tape, false);
        let p = self.bound(&vars)?;
        let mut sink: Option<Capture> = capture.then(|| vec![Vec::new(); memory.shape()[0]]);
        let m = tape.constant(memory.clone());
        let y = self.decode_queries(
            &mut tape,
            &p,
            m,
            Some(&diagonal_mask(self.config.n_queries)),
            sink.as_mut(),
        )?;
        Ok((tape.value(y).clone(), sink.unwrap_or_default()))
    }

    fn images_to_tensor(&self, views: &[Vec<GrayImage>]) -> Result<(Tensor, usize)> {
        let side = self.config.image_side;
        let v = views.first().map(Vec::len).unwrap_or(0);
        if views.is_empty() || v == 0 {
            return Err(Error::InvalidArgument(
                "forward needs at least one view per object".into(),
            ));
        }
        if views.iter().any(|s| s.len() != v) {
            return Err(Error::InvalidArgument(
                "all objects in a batch need the same view count".into(),
            ));
        }
        if self.config.variant == Variant::SingleView && v != 1 {
            return Err(Error::InvalidArgument(format!(
                "single-view model given {v} views"
            )));
        }
        let mut data = Vec::with_capacity(views.len() * v * side * side);
        for img in views.iter().flatten() {
            if img.width() != side || img.height() != side {
                return Err(Error::InvalidArgument(format!(
                    "image is {}x{}, model expects {side}x{side}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.to_unit());
        }
        Ok((Tensor::new(vec![views.len() * v, 1, side, side], data)?, v))
    }

    fn backbone(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let c = self.config.conv_units;
        let pool_after = 1.min(c - 1);
        for u in 0..c {
            let stride = if u == 0 { 2 } else { 1 };
            x = tape.conv2d(
                x,
                p.get(&format!("backbone.conv{u}.weight"))?,
                p.get(&format!("backbone.conv{u}.bias"))?,
                stride,
                1,
            )?;
            x = tape.channel_affine(
                x,
                p.get(&format!("backbone.norm{u}.scale"))?,
                p.get(&format!("backbone.norm{u}.shift"))?,
            )?;
            x = tape.relu(x);
            if u == pool_after {
                x = tape.max_pool2(x)?;
            }
        }
        Ok(x)
    }

    fn embed_on_tape(&self, tape: &mut Tape, p: &Bound, views: &[Vec<GrayImage>]) -> Result<Var> {
        let (images, v) = self.images_to_tensor(views)?;
        let batch = views.len();
        let x = tape.constant(images);
        let feat = self.backbone(tape, p, x)?;
        let (ch, side) = {
            let s = tape.shape(feat);
            (s[1], s[2])
        };
        match self.config.variant {
            Variant::MultiView => {
                let flat = tape.reshape(feat, &[batch, v, ch * side * side])?;
                layers::linear(tape, p, "embed", flat)
            }
            Variant::SingleView => {
                let ps = self.config.patch_side;
                let per = patches::feature_patch_map(ch, side, ps)?;
                let stride = (ch * side * side) as u32;
                let index: Vec<u32> = (0..batch as u32)
                    .flat_map(|b| per.iter().map(move |&i| b * stride + i))
                    .collect();
                let t = (side / ps).pow(2);
                let patches = tape.gather(feat, index, &[batch, t, ch * ps * ps])?;
                let tokens = layers::linear(tape, p, "embed", patches)?;
                let pos = tape.constant(sincos_positional(t, self.config.d_model, Layout::TwoD)?);
                tape.add(tokens, pos)
            }
        }
    }

    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        mut sink: Option<&mut Capture>,
    ) -> Result<Var> {
        for l in 0..self.config.n_layers {
            x = layers::encoder_layer(
                tape,
                p,
                self.slot(l),
                l,
                self.config.n_heads,
                x,
                sink.as_deref_mut(),
            )?;
        }
        layers::norm(tape, p, "enc.final_norm", x)
    }

    fn slot(&self, layer: usize) -> usize {
        if self.config.share_layer_weights {
            0
        } else {
            layer
        }
    }

    fn run_decoder(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        memory: Var,
        mask: Option<&[bool]>,
        mut sink: Option<&mut Capture>,
    ) -> Result<Var> {
        for l in 0..self.config.n_layers {
            x = layers::decoder_layer(
                tape,
                p,
                self.slot(l),
                l,
                self.config.n_heads,
                x,
                memory,
                mask,
                sink.as_deref_mut(),
            )?;
        }
        layers::norm(tape, p, "dec.final_norm", x)
    }

    /// Learned queries plus their 1D positional codes, tiled over the batch.
    fn query_inputs(&self, tape: &mut Tape, p: &Bound, batch: usize) -> Result<Var> {
        let q = p.get("queries")?;
        let (count, d) = (tape.shape(q)[0], tape.shape(q)[1]);
        let pos = tape.constant(sincos_positional(count, d, Layout::OneD)?);
        let q = tape.add(q, pos)?;
        tile(tape, q, batch)
    }

    fn decode_queries(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        mask: Option<&[bool]>,
        sink: Option<&mut Capture>,
    ) -> Result<Var> {
        let batch = tape.shape(memory)[0];
        let x = self.query_inputs(tape, p, batch)?;
        self.run_decoder(tape, p, x, memory, mask, sink)
    }

    fn decode_factors_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        sink: Option<&mut Capture>,
    ) -> Result<(Var, FactorVars)> {
        let k = self.config.n_queries;
        let n = self.config.grid_side;
        let batch = tape.shape(memory)[0];
        let y = self.decode_queries(tape, p, memory, Some(&diagonal_mask(k)), sink)?;
        let heads = FactorHeadVars {
            z_weight: p.get("head.z.weight")?,
            z_bias: p.get("head.z.bias")?,
            y_weight: p.get("head.y.weight")?,
            y_bias: p.get("head.y.bias")?,
            x_weight: p.get("head.x.weight")?,
            x_bias: p.get("head.x.bias")?,
        };
        let f = voxel::apply_factor_heads(tape, y, &heads)?;
        let mut grids = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows: Vec<u32> = ((b * k * n) as u32..((b + 1) * k * n) as u32).collect();
            let z = tape.gather(f.z, rows.clone(), &[k, n])?;
            let yv = tape.gather(f.y, rows.clone(), &[k, n])?;
            let x = tape.gather(f.x, rows, &[k, n])?;
            grids.push(tape.compose_clipped(z, yv, x)?);
        }
        let all = if batch == 1 {
            grids[0]
        } else {
            tape.concat(&grids, 0)?
        };
        Ok((tape.reshape(all, &[batch, n, n, n])?, f))
    }

    /// Naive-nAR and naive-full: one parallel pass over learned queries.
    fn decode_parallel_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        sink: Option<&mut Capture>,
    ) -> Result<Var> {
        let n = self.config.grid_side;
        let batch = tape.shape(memory)[0];
        let y = self.decode_queries(tape, p, memory, None, sink)?;
        match self.config.scheme {
            Scheme::NaiveFull => {
                let logits = layers::linear(tape, p, "head.full", y)?;
                let probs = tape.sigmoid(logits);
                tape.reshape(probs, &[batch, n, n, n])
            }
            _ => {
                let logits = layers::linear(tape, p, "head.patch", y)?;
                let probs = tape.sigmoid(logits);
                self.stitch(tape, probs, batch)
            }
        }
    }

    /// `[B, T, s³]` patch sequence to `[B, N, N, N]`.
    fn stitch(&self, tape: &mut Tape, patches_var: Var, batch: usize) -> Result<Var> {
        let n = self.config.grid_side;
        let cube = (n * n * n) as u32;
        let map = patches::stitch_map(n, self.config.output_patch_side)?;
        let index: Vec<u32> = (0..batch as u32)
            .flat_map(|b| map.iter().map(move |&i| b * cube + i))
            .collect();
        tape.gather(patches_var, index, &[batch, n, n, n])
    }

    /// Decoder input for the naive scheme: start token, then the embedded
    /// patches `0..T-1` of `prefix: [B, T-1, s³]`, plus 1D positional codes.
    fn naive_inputs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: Option<Var>,
        batch: usize,
    ) -> Result<Var> {
        let start = p.get("start_token")?;
        let start = tile(tape, start, batch)?;
        let seq = match prefix {
            Some(pre) => {
                let emb = layers::linear(tape, p, "patch_in", pre)?;
                tape.concat(&[start, emb], 1)?
            }
            None => start,
        };
        let len = tape.shape(seq)[1];
        let pos = tape.constant(sincos_positional(len, self.config.d_model, Layout::OneD)?);
        tape.add(seq, pos)
    }

    fn decode_naive_teacher(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        teacher: &[OccupancyGrid],
        sink: Option<&mut Capture>,
    ) -> Result<Var> {
        let batch = tape.shape(memory)[0];
        if teacher.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "teacher forcing needs {batch} target grids, got {}",
                teacher.len()
            )));
        }
        let s = self.config.output_patch_side;
        let s3 = s * s * s;
        let steps = self.config.output_patch_count();
        let prefix = if steps > 1 {
            let mut data = Vec::with_capacity(batch * (steps - 1) * s3);
            for g in teacher {
                if g.side() != self.config.grid_side {
                    return Err(Error::InvalidArgument(format!(
                        "target grid side {} does not match model side {}",
                        g.side(),
                        self.config.grid_side
                    )));
                }
                let split = patches::split_grid(g, s)?;
                data.extend_from_slice(&split[..(steps - 1) * s3]);
            }
            Some(tape.constant(Tensor::new(vec![batch, steps - 1, s3], data)?))
        } else {
            None
        };
        let x = self.naive_inputs(tape, p, prefix, batch)?;
        let y = self.run_decoder(tape, p, x, memory, Some(&causal_mask(steps)), sink)?;
        let logits = layers::linear(tape, p, "head.patch", y)?;
        let probs = tape.sigmoid(logits);
        self.stitch(tape, probs, batch)
    }

    /// Autoregressive loop: each step re-decodes the prefix of binarized
    /// predictions and keeps the newest output row. Attention is captured
    /// on the final step, whose matrices cover the whole sequence.
    fn decode_naive_free(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        mut sink: Option<&mut Capture>,
    ) -> Result<Var> {
        let batch = tape.shape(memory)[0];
        let s = self.config.output_patch_side;
        let s3 = s * s * s;
        let steps = self.config.output_patch_count();
        let mut emitted: Vec<Vec<f32>> = vec![Vec::with_capacity(steps * s3); batch];
        for step in 0..steps {
            let prefix = if step == 0 {
                None
            } else {
                let mut data = Vec::with_capacity(batch * step * s3);
                for e in &emitted {
                    data.extend(
                        e.iter()
                            .map(|&v| if v >= FEEDBACK_THRESHOLD { 1.0 } else { 0.0 }),
                    );
                }
                Some(tape.constant(Tensor::new(vec![batch, step, s3], data)?))
            };
            let x = self.naive_inputs(tape, p, prefix, batch)?;
            let last = step + 1 == steps;
            let cap = if last { sink.as_deref_mut() } else { None };
            let y = self.run_decoder(tape, p, x, memory, Some(&causal_mask(step + 1)), cap)?;
            let logits = layers::linear(tape, p, "head.patch", y)?;
            let probs = tape.sigmoid(logits);
            let vals = tape.value(probs).data();
            for (b, e) in emitted.iter_mut().enumerate() {
                let row = (b * (step + 1) + step) * s3;
                e.extend_from_slice(&vals[row..row + s3]);
            }
        }
        let all: Vec<f32> = emitted.into_iter().flatten().collect();
        let seq = tape.constant(Tensor::new(vec![batch, steps, s3], all)?);
        self.stitch(tape, seq, batch)
    }
}

/// Repeats `x: [r, d]` into `[batch, r, d]`.
fn tile(tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![batch];
    shape.extend_from_slice(tape.shape(x));
    let zeros = tape.constant(Tensor::zeros(&shape));
    tape.add(zeros, x)
}

fn check_rank3(t: &Tensor, d: usize) -> Result<()> {
    if t.rank() != 3 || t.shape()[2] != d || t.shape()[1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected [B, t, {d}] with t >= 1, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}
