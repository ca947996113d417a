//! Run configuration: defaults, then a `key=value` file, then flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use legoformer::eval::EvalConfig;
use legoformer::model::ModelConfig;
use legoformer::synth::{DatasetConfig, RenderMode};
use legoformer::trainer::{OptimizerKind, TrainConfig, ViewPolicy};
use legoformer::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub objects: usize,
    pub grid: usize,
    pub image: usize,
    pub views: usize,
    pub elevation: f64,
    pub mode: RenderMode,
    pub train_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            objects: 20,
            grid: 16,
            image: 32,
            views: 8,
            elevation: 20.0,
            mode: RenderMode::Depth,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub deterministic: bool,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_split: SplitChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            threads: 1,
            deterministic: false,
            data: DataSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            eval_split: SplitChoice::Test,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    value.split(',').map(|v| parse(key, v)).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let v = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, v);
        }
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "deterministic" => self.deterministic = parse(key, v)?,
            "data.objects" => self.data.objects = parse(key, v)?,
            "data.grid" => self.data.grid = parse(key, v)?,
            "data.image" => self.data.image = parse(key, v)?,
            "data.views" => self.data.views = parse(key, v)?,
            "data.elevation" => self.data.elevation = parse(key, v)?,
            "data.mode" => {
                self.data.mode = match v {
                    "depth" => RenderMode::Depth,
                    "silhouette" => RenderMode::Silhouette,
                    _ => return Err(Error::Config(format!("unknown render mode {v:?}"))),
                }
            }
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "train.steps" => self.train.total_steps = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.base_lr = parse(key, v)?,
            "train.warmup" => self.train.warmup_steps = parse(key, v)?,
            "train.eps" => self.train.adagrad_eps = parse(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "adagrad" => OptimizerKind::Adagrad,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "train.views" => self.train.views = ViewPolicy::Fixed(parse(key, v)?),
            "train.max_views" => {
                self.train.views = ViewPolicy::Uniform {
                    max: parse(key, v)?,
                }
            }
            "train.checkpoint_every" => self.train.checkpoint_interval = parse(key, v)?,
            "train.eval_every" => self.train.eval_interval = parse(key, v)?,
            "eval.tau" => self.eval.tau = parse(key, v)?,
            "eval.fscore_distance" => self.eval.fscore_distance = parse(key, v)?,
            "eval.views" => self.eval.view_counts = parse_list(key, v)?,
            "eval.capture_attention" => self.eval.capture_attention = parse(key, v)?,
            "eval.split" => {
                self.eval_split = match v {
                    "train" => SplitChoice::Train,
                    "test" => SplitChoice::Test,
                    "all" => SplitChoice::All,
                    _ => return Err(Error::Config(format!("unknown split {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), Error> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    origin.display(),
                    no + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut dc = DatasetConfig::balanced(self.data.objects, self.data.views, self.seed);
        dc.grid_side = self.data.grid;
        dc.image_side = self.data.image;
        dc.elevation_deg = self.data.elevation;
        dc.mode = self.data.mode;
        dc.train_fraction = self.data.train_fraction;
        dc
    }

    /// Canonical listing of every setting, one `key=value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("seed", self.seed.to_string());
        line("out", self.out.display().to_string());
        line("threads", self.threads.to_string());
        line("deterministic", self.deterministic.to_string());
        line("data.objects", self.data.objects.to_string());
        line("data.grid", self.data.grid.to_string());
        line("data.image", self.data.image.to_string());
        line("data.views", self.data.views.to_string());
        line("data.elevation", self.data.elevation.to_string());
        line(
            "data.mode",
            match self.data.mode {
                RenderMode::Depth => "depth",
                RenderMode::Silhouette => "silhouette",
            }
            .into(),
        );
        line("data.train_fraction", self.data.train_fraction.to_string());
        for l in self.model.to_canonical_string().lines() {
            let (k, v) = l.split_once('=').expect("canonical lines are key=value");
            line(&format!("model.{k}"), v.to_string());
        }
        line("train.steps", self.train.total_steps.to_string());
        line("train.batch", self.train.batch_size.to_string());
        line("train.lr", self.train.base_lr.to_string());
        line("train.warmup", self.train.warmup_steps.to_string());
        line("train.eps", self.train.adagrad_eps.to_string());
        line(
            "train.optimizer",
            match self.train.optimizer {
                OptimizerKind::Adagrad => "adagrad",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        match self.train.views {
            ViewPolicy::Fixed(v) => line("train.views", v.to_string()),
            ViewPolicy::Uniform { max } => line("train.max_views", max.to_string()),
        }
        line(
            "train.checkpoint_every",
            self.train.checkpoint_interval.to_string(),
        );
        line("train.eval_every", self.train.eval_interval.to_string());
        line("eval.tau", self.eval.tau.to_string());
        line(
            "eval.fscore_distance",
            self.eval.fscore_distance.to_string(),
        );
        line(
            "eval.views",
            self.eval
                .view_counts
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        line(
            "eval.capture_attention",
            self.eval.capture_attention.to_string(),
        );
        line(
            "eval.split",
            match self.eval_split {
                SplitChoice::Train => "train",
                SplitChoice::Test => "test",
                SplitChoice::All => "all",
            }
            .into(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips_through_apply() {
        let mut cfg = RunConfig::default();
        cfg.set("model.d_model", "32").unwrap();
        cfg.set("train.max_views", "5").unwrap();
        cfg.set("eval.views", "1,3").unwrap();
        cfg.set("seed", "9").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("train.steps", "x").is_err());
        assert!(cfg.apply_text("no equals sign", Path::new("f")).is_err());
    }
}
