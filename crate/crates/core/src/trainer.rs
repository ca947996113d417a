//! Training loop: batched MSE on composed grids, Adagrad with linear warmup.
//!
//! Every step draws its batch and views from an RNG seeded by
//! `(seed, step)`, so a run resumed from a checkpoint replays exactly the
//! same samples as an uninterrupted one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::voxel_iou;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{LegoFormer, PredictOptions, Scheme};
use crate::seed::{derive_seed, Stream};
use crate::synth::LoadedObject;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::voxel::{threshold, OccupancyGrid};

pub const LOG_HEADER: &str = "step,lr,loss,views";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adagrad,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewPolicy {
    Fixed(usize),
    /// Count drawn uniformly from `1..max` (exclusive) at every step.
    Uniform {
        max: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub adagrad_eps: f32,
    pub views: ViewPolicy,
    pub seed: u64,
    /// Save `step-{n}.lgfc` every this many steps (0 = final checkpoint only).
    pub checkpoint_interval: usize,
    /// Report mean training IoU every this many steps (0 = never).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_steps: 2000,
            base_lr: 0.01,
            warmup_steps: 200,
            optimizer: OptimizerKind::Adagrad,
            adagrad_eps: 1e-10,
            views: ViewPolicy::Fixed(4),
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup steps {} exceed total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        match self.views {
            ViewPolicy::Fixed(0) => Err(Error::Config("fixed view count must be >= 1".into())),
            ViewPolicy::Uniform { max } if max < 2 => {
                Err(Error::Config("uniform view policy needs max >= 2".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `base_lr · min(1, step / warmup)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    if cfg.warmup_steps == 0 {
        return cfg.base_lr;
    }
    let ramp = (step as f64 / cfg.warmup_steps as f64).min(1.0);
    (cfg.base_lr as f64 * ramp) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Accumulated squared gradients, one tensor per parameter.
    pub accum: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            accum: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

fn check_shapes(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `G += g²; w −= lr·g / (√G + eps)`, elementwise.
pub fn adagrad_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f32,
    eps: f32,
) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(&state.accum, grads)?;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(state.accum.iter_mut()) {
        for ((w, &gi), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a += gi * gi;
            if gi != 0.0 {
                *w -= lr * gi / (a.sqrt() + eps);
            }
        }
    }
    state.step += 1;
    Ok(())
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// Indices of the views to use, sampled without replacement in random order.
pub fn sample_views(pool: usize, policy: ViewPolicy, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let count = match policy {
        ViewPolicy::Fixed(v) => v,
        ViewPolicy::Uniform { max } => rng.random_range(1..max),
    };
    if count > pool || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} views from a pool of {pool}"
        )));
    }
    Ok(index::sample(rng, pool, count).into_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub views: usize,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.views)
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub struct Trainer<'a> {
    model: LegoFormer,
    state: OptimizerState,
    cfg: TrainConfig,
    data: Vec<&'a LoadedObject>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: LegoFormer, data: Vec<&'a LoadedObject>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let n = model.config().grid_side;
        if let Some(o) = data.iter().find(|o| o.grid.side() != n) {
            return Err(Error::Config(format!(
                "object {} has grid side {}, model expects {n}",
                o.entry.id,
                o.grid.side()
            )));
        }
        let min_pool = data.iter().map(|o| o.views.len()).min().unwrap_or(0);
        let need = match cfg.views {
            ViewPolicy::Fixed(v) => v,
            ViewPolicy::Uniform { max } => max - 1,
        };
        if need > min_pool {
            return Err(Error::Config(format!(
                "view policy needs {need} views but some objects have only {min_pool}"
            )));
        }
        let state = OptimizerState::new(model.params().tensors());
        Ok(Trainer {
            model,
            state,
            cfg,
            data,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(
        checkpoint: Checkpoint,
        data: Vec<&'a LoadedObject>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let Checkpoint { model, extra } = checkpoint;
        let mut t = Trainer::new(model, data, cfg)?;
        let find = |name: &str| extra.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for (i, name) in t.model.params().names().iter().enumerate() {
            let acc = find(&format!("optim.accum.{name}")).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks optimizer state for {name}"))
            })?;
            if acc.shape() != t.state.accum[i].shape() {
                return Err(Error::Config(format!(
                    "optimizer state for {name} has the wrong shape"
                )));
            }
            t.state.accum[i] = acc.clone();
        }
        let step = find("optim.step")
            .ok_or_else(|| Error::Config("checkpoint lacks optim.step".into()))?;
        let d = step.data();
        t.state.step = d[0] as usize + ((d[1] as usize) << 16);
        Ok(t)
    }

    pub fn model(&self) -> &LegoFormer {
        &self.model
    }

    pub fn into_model(self) -> LegoFormer {
        self.model
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> usize {
        self.state.step
    }

    fn optimizer_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .params()
            .names()
            .iter()
            .zip(&self.state.accum)
            .map(|(n, a)| (format!("optim.accum.{n}"), a.clone()))
            .collect();
        let s = self.state.step;
        out.push((
            "optim.step".into(),
            Tensor::vector(vec![(s & 0xFFFF) as f32, (s >> 16) as f32]),
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.optimizer_tensors())
    }

    pub fn load(path: &Path, data: Vec<&'a LoadedObject>, cfg: TrainConfig) -> Result<Self> {
        Self::resume(load_checkpoint(path, None)?, data, cfg)
    }

    /// Batch of object indices and per-object view indices for `step`.
    fn sample(&self, step: usize) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, Stream::Sampling, step as u64));
        let n = self.data.len();
        let mut objs = index::sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec();
        while objs.len() < self.cfg.batch_size {
            objs.push(rng.random_range(0..n));
        }
        let count = match self.cfg.views {
            ViewPolicy::Fixed(v) => v,
            ViewPolicy::Uniform { max } => rng.random_range(1..max),
        };
        let views = objs
            .iter()
            .map(|&o| sample_views(self.data[o].views.len(), ViewPolicy::Fixed(count), &mut rng))
            .collect::<Result<_>>()?;
        Ok((objs, views))
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.state.step;
        let lr = lr_at(step, &self.cfg);
        let (objs, view_idx) = self.sample(step)?;
        let views: Vec<Vec<GrayImage>> = objs
            .iter()
            .zip(&view_idx)
            .map(|(&o, vi)| vi.iter().map(|&i| self.data[o].views[i].clone()).collect())
            .collect();
        let targets: Vec<OccupancyGrid> = objs.iter().map(|&o| self.data[o].grid.clone()).collect();

        let mut tape = Tape::new();
        let vars = self.model.bind_params(&mut tape, true);
        let teacher = (self.model.config().scheme == Scheme::Naive).then_some(targets.as_slice());
        let graph = self
            .model
            .forward_on_tape(&mut tape, &vars, &views, teacher, false)?;
        let n = self.model.config().grid_side;
        let mut target_data = Vec::with_capacity(targets.len() * n * n * n);
        for g in &targets {
            target_data.extend_from_slice(g.values());
        }
        let target = tape.constant(Tensor::new(vec![targets.len(), n, n, n], target_data)?);
        let diff = tape.sub(graph.grids, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss_var = tape.mean(sq);
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        let grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let params = self.model.params_mut().tensors_mut();
        match self.cfg.optimizer {
            OptimizerKind::Adagrad => {
                adagrad_step(params, &grads, &mut self.state, lr, self.cfg.adagrad_eps)?
            }
            OptimizerKind::Sgd => {
                sgd_step(params, &grads, lr)?;
                self.state.step += 1;
            }
        }
        Ok(LogRow {
            step,
            lr,
            loss,
            views: view_idx[0].len(),
        })
    }

    /// Runs until `total_steps` steps are complete. Checkpoints go to
    /// `out_dir` when given; `on_row` sees every log row and `on_eval` every
    /// periodic training-IoU measurement.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
        mut on_eval: impl FnMut(usize, f64),
    ) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        let mut checkpoints = Vec::new();
        while self.state.step < self.cfg.total_steps {
            let row = self.step()?;
            on_row(&row);
            log.push(row);
            let done = self.state.step;
            if let Some(dir) = out_dir {
                let interval_hit =
                    self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0;
                if interval_hit || done == self.cfg.total_steps {
                    let path = dir.join(format!("step-{done}.lgfc"));
                    self.save(&path)?;
                    checkpoints.push(path);
                }
            }
            if self.cfg.eval_interval > 0 && done % self.cfg.eval_interval == 0 {
                on_eval(done, self.train_iou(self.default_eval_views(), 0.3)?);
            }
        }
        if let Some(dir) = out_dir {
            if self.cfg.total_steps == 0 || checkpoints.is_empty() {
                let path = dir.join(format!("step-{}.lgfc", self.state.step));
                self.save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(TrainOutcome { log, checkpoints })
    }

    fn default_eval_views(&self) -> usize {
        match self.cfg.views {
            ViewPolicy::Fixed(v) => v,
            ViewPolicy::Uniform { max } => max - 1,
        }
    }

    /// Mean IoU over the training objects using their first `views` views.
    /// Naive-scheme models decode with teacher forcing.
    pub fn train_iou(&self, views: usize, tau: f32) -> Result<f64> {
        mean_iou(&self.model, &self.data, views, tau, true)
    }
}

/// Mean thresholded IoU of `model` over `objects`, first `views` views each.
pub fn mean_iou(
    model: &LegoFormer,
    objects: &[&LoadedObject],
    views: usize,
    tau: f32,
    teacher_forced: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in objects.chunks(8) {
        let batch: Vec<Vec<GrayImage>> = chunk.iter().map(|o| o.views[..views].to_vec()).collect();
        let targets: Vec<OccupancyGrid> = chunk.iter().map(|o| o.grid.clone()).collect();
        let opts = PredictOptions {
            capture: false,
            teacher: (teacher_forced && model.config().scheme == Scheme::Naive)
                .then_some(targets.as_slice()),
        };
        for (pred, gt) in model.predict_batch(&batch, opts)?.iter().zip(&targets) {
            total += voxel_iou(&threshold(&pred.grid, tau)?, gt)?;
        }
    }
    Ok(total / objects.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}
