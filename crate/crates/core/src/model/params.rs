//! Named parameter tensors and their initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Scheme, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform `±sqrt(6 / fan_in)`, for convolutions followed by ReLU.
    He {
        fan_in: usize,
    },
    Normal {
        mean: f32,
        std: f32,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Xavier { fan_in, fan_out },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Number of distinct parameter sets per transformer side.
pub(crate) fn layer_slots(cfg: &ModelConfig) -> usize {
    if cfg.share_layer_weights {
        1
    } else {
        cfg.n_layers
    }
}

/// Every parameter of a model, in checkpoint order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = cfg.d_model;
    let c = cfg.conv_channels;
    for unit in 0..cfg.conv_units {
        let cin = if unit == 0 { 1 } else { c };
        out.push(ParamSpec {
            name: format!("backbone.conv{unit}.weight"),
            shape: vec![c, cin, 3, 3],
            init: Init::He { fan_in: cin * 9 },
        });
        out.push(ParamSpec {
            name: format!("backbone.conv{unit}.bias"),
            shape: vec![c],
            init: Init::Zeros,
        });
        out.push(ParamSpec {
            name: format!("backbone.norm{unit}.scale"),
            shape: vec![c],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("backbone.norm{unit}.shift"),
            shape: vec![c],
            init: Init::Zeros,
        });
    }
    let embed_in = match cfg.variant {
        Variant::MultiView => c * cfg.feature_side().pow(2),
        Variant::SingleView => c * cfg.patch_side.pow(2),
    };
    linear(&mut out, "embed", embed_in, d);

    for l in 0..layer_slots(cfg) {
        let p = format!("enc.{l}");
        norm(&mut out, &format!("{p}.norm1"), d);
        attention(&mut out, &format!("{p}.attn"), d);
        norm(&mut out, &format!("{p}.norm2"), d);
        linear(&mut out, &format!("{p}.ff1"), d, cfg.ff_dim);
        linear(&mut out, &format!("{p}.ff2"), cfg.ff_dim, d);
    }
    norm(&mut out, "enc.final_norm", d);

    for l in 0..layer_slots(cfg) {
        let p = format!("dec.{l}");
        norm(&mut out, &format!("{p}.norm1"), d);
        attention(&mut out, &format!("{p}.self_attn"), d);
        norm(&mut out, &format!("{p}.norm2"), d);
        attention(&mut out, &format!("{p}.cross_attn"), d);
        norm(&mut out, &format!("{p}.norm3"), d);
        linear(&mut out, &format!("{p}.ff1"), d, cfg.ff_dim);
        linear(&mut out, &format!("{p}.ff2"), cfg.ff_dim, d);
    }
    norm(&mut out, "dec.final_norm", d);

    let queries = |count: usize| ParamSpec {
        name: "queries".into(),
        shape: vec![count, d],
        init: Init::Normal {
            mean: cfg.query_init_mean,
            std: cfg.query_init_std,
        },
    };
    let n = cfg.grid_side;
    let patch = cfg.output_patch_side.pow(3);
    match cfg.scheme {
        Scheme::Factors => {
            out.push(queries(cfg.n_queries));
            for axis in ["z", "y", "x"] {
                linear(&mut out, &format!("head.{axis}"), d, n);
            }
        }
        Scheme::NaiveNar => {
            out.push(queries(cfg.output_patch_count()));
            linear(&mut out, "head.patch", d, patch);
        }
        Scheme::NaiveFull => {
            out.push(queries(1));
            linear(&mut out, "head.full", d, n * n * n);
        }
        Scheme::Naive => {
            out.push(ParamSpec {
                name: "start_token".into(),
                shape: vec![1, d],
                init: Init::Normal {
                    mean: cfg.query_init_mean,
                    std: cfg.query_init_std,
                },
            });
            linear(&mut out, "patch_in", patch, d);
            linear(&mut out, "head.patch", d, patch);
        }
    }
    out
}

/// Exact trainable-parameter tally, computed in closed form from the config.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let counts = ParameterBreakdown::of(cfg);
    counts.backbone
        + counts.embed
        + counts.encoder_layers
        + counts.decoder_layers
        + counts.final_norms
        + counts.output
}

/// Parameter tally split by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub backbone: usize,
    pub embed: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub final_norms: usize,
    pub output: usize,
}

impl ParameterBreakdown {
    pub fn of(cfg: &ModelConfig) -> Self {
        let (d, ff, c) = (cfg.d_model, cfg.ff_dim, cfg.conv_channels);
        let lin = |i: usize, o: usize| i * o + o;
        let attn = 4 * lin(d, d);
        let ffn = lin(d, ff) + lin(ff, d);
        let enc_layer = 2 * (2 * d) + attn + ffn;
        let dec_layer = 3 * (2 * d) + 2 * attn + ffn;
        let slots = layer_slots(cfg);

        let backbone = (0..cfg.conv_units)
            .map(|u| {
                let cin = if u == 0 { 1 } else { c };
                c * cin * 9 + 3 * c
            })
            .sum();
        let embed_in = match cfg.variant {
            Variant::MultiView => c * cfg.feature_side().pow(2),
            Variant::SingleView => c * cfg.patch_side.pow(2),
        };
        let n = cfg.grid_side;
        let s3 = cfg.output_patch_side.pow(3);
        let output = match cfg.scheme {
            Scheme::Factors => cfg.n_queries * d + 3 * lin(d, n),
            Scheme::NaiveNar => cfg.output_patch_count() * d + lin(d, s3),
            Scheme::NaiveFull => d + lin(d, n * n * n),
            Scheme::Naive => d + lin(s3, d) + lin(d, s3),
        };
        ParameterBreakdown {
            backbone,
            embed: lin(embed_in, d),
            encoder_layers: slots * enc_layer,
            decoder_layers: slots * dec_layer,
            final_norms: 2 * (2 * d),
            output,
        }
    }

    pub fn transformer_layers(&self) -> usize {
        self.encoder_layers + self.decoder_layers
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter {name}"
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamStore {
            names,
            tensors,
            index,
        })
    }

    pub(crate) fn initialize(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_specs(cfg)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<f32> = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::He { fan_in } => {
                        let a = (6.0 / fan_in as f32).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Normal { mean, std } => {
                        let dist = Normal::new(mean, std).expect("validated std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                (spec.name, Tensor::from_parts(spec.shape, data))
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
