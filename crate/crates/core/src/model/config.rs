use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One token per view (no positional encoding).
    MultiView,
    /// Patch tokens from a single view, with 2D positional codes.
    SingleView,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Factors,
    Naive,
    NaiveNar,
    NaiveFull,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiView => "m",
            Variant::SingleView => "s",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" | "multi" | "multi-view" => Ok(Variant::MultiView),
            "s" | "single" | "single-view" => Ok(Variant::SingleView),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected m or s)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Factors => "factors",
            Scheme::Naive => "naive",
            Scheme::NaiveNar => "naive-nar",
            Scheme::NaiveFull => "naive-full",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factors" => Ok(Scheme::Factors),
            "naive" => Ok(Scheme::Naive),
            "naive-nar" => Ok(Scheme::NaiveNar),
            "naive-full" => Ok(Scheme::NaiveFull),
            _ => Err(Error::Config(format!(
                "unknown scheme {s:?} (expected factors, naive, naive-nar or naive-full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_side: usize,
    /// Input views are square grayscale images of this side.
    pub image_side: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of factor queries `k` (factors scheme only).
    pub n_queries: usize,
    pub variant: Variant,
    pub scheme: Scheme,
    /// Convolutional units `c` in the backbone.
    pub conv_units: usize,
    pub conv_channels: usize,
    /// Patch side `p` over the backbone feature map (single-view only).
    pub patch_side: usize,
    pub share_layer_weights: bool,
    pub query_init_mean: f32,
    pub query_init_std: f32,
    /// Side `s` of the 3D output patches (naive schemes).
    pub output_patch_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_side: 16,
            image_side: 32,
            d_model: 64,
            ff_dim: 128,
            n_layers: 2,
            n_heads: 4,
            n_queries: 8,
            variant: Variant::MultiView,
            scheme: Scheme::Factors,
            conv_units: 3,
            conv_channels: 16,
            patch_side: 4,
            share_layer_weights: false,
            query_init_mean: 0.0,
            query_init_std: 1.0,
            output_patch_side: 4,
        }
    }
}

impl ModelConfig {
    /// Side of the backbone feature map: a stride-2 first unit and one 2×2 pool.
    pub fn feature_side(&self) -> usize {
        self.image_side.div_ceil(2) / 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Encoder token count for a given number of views.
    pub fn token_count(&self, views: usize) -> usize {
        match self.variant {
            Variant::MultiView => views,
            Variant::SingleView => (self.feature_side() / self.patch_side).pow(2),
        }
    }

    /// Number of 3D output patches `(N/s)³` for the naive schemes.
    pub fn output_patch_count(&self) -> usize {
        (self.grid_side / self.output_patch_side).pow(3)
    }

    /// Decoder sequence length for the configured scheme.
    pub fn decoder_length(&self) -> usize {
        match self.scheme {
            Scheme::Factors => self.n_queries,
            Scheme::Naive | Scheme::NaiveNar => self.output_patch_count(),
            Scheme::NaiveFull => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_side == 0
            || self.d_model == 0
            || self.ff_dim == 0
            || self.n_heads == 0
            || self.n_layers == 0
        {
            return fail(
                "grid_side, d_model, ff_dim, n_heads and n_layers must be positive".into(),
            );
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return fail(format!(
                "d_model {} must be even for sine-cosine codes",
                self.d_model
            ));
        }
        if self.conv_units == 0 || self.conv_channels == 0 {
            return fail("conv_units and conv_channels must be positive".into());
        }
        if self.image_side < 4 || self.image_side % 4 != 0 {
            return fail(format!(
                "image_side {} must be a positive multiple of 4",
                self.image_side
            ));
        }
        if self.scheme == Scheme::Factors && self.n_queries == 0 {
            return fail("n_queries must be >= 1".into());
        }
        if self.query_init_std < 0.0 {
            return fail("query_init_std must be >= 0".into());
        }
        if self.variant == Variant::SingleView {
            if self.d_model % 4 != 0 {
                return fail(format!(
                    "single-view d_model {} must be divisible by 4",
                    self.d_model
                ));
            }
            if self.patch_side == 0 || self.feature_side() % self.patch_side != 0 {
                return fail(format!(
                    "feature side {} not divisible by patch side {}",
                    self.feature_side(),
                    self.patch_side
                ));
            }
        }
        if matches!(self.scheme, Scheme::Naive | Scheme::NaiveNar)
            && (self.output_patch_side == 0 || self.grid_side % self.output_patch_side != 0)
        {
            return fail(format!(
                "grid side {} not divisible by output patch side {}",
                self.grid_side, self.output_patch_side
            ));
        }
        Ok(())
    }

    /// Canonical `key=value` lines in a fixed order.
    pub fn to_canonical_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("grid_side", self.grid_side.to_string()),
            ("image_side", self.image_side.to_string()),
            ("d_model", self.d_model.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("variant", self.variant.to_string()),
            ("scheme", self.scheme.to_string()),
            ("conv_units", self.conv_units.to_string()),
            ("conv_channels", self.conv_channels.to_string()),
            ("patch_side", self.patch_side.to_string()),
            ("share_layer_weights", self.share_layer_weights.to_string()),
            ("query_init_mean", self.query_init_mean.to_string()),
            ("query_init_std", self.query_init_std.to_string()),
            ("output_patch_side", self.output_patch_side.to_string()),
        ]
    }

    /// Sets one field from its canonical key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for model.{key}")))
        }
        match key {
            "grid_side" => self.grid_side = parse(key, value)?,
            "image_side" => self.image_side = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_queries" => self.n_queries = parse(key, value)?,
            "variant" => self.variant = value.trim().parse()?,
            "scheme" => self.scheme = value.trim().parse()?,
            "conv_units" => self.conv_units = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "patch_side" => self.patch_side = parse(key, value)?,
            "share_layer_weights" => self.share_layer_weights = parse(key, value)?,
            "query_init_mean" => self.query_init_mean = parse(key, value)?,
            "query_init_std" => self.query_init_std = parse(key, value)?,
            "output_patch_side" => self.output_patch_side = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_canonical_string(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let cfg = ModelConfig {
            scheme: Scheme::NaiveNar,
            variant: Variant::SingleView,
            query_init_std: 0.5,
            share_layer_weights: true,
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_canonical_string(&cfg.to_canonical_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rules() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_patch = ModelConfig {
            variant: Variant::SingleView,
            patch_side: 3,
            ..ModelConfig::default()
        };
        assert!(bad_patch.validate().is_err());
        let bad_out = ModelConfig {
            scheme: Scheme::Naive,
            output_patch_side: 3,
            ..ModelConfig::default()
        };
        assert!(bad_out.validate().is_err());
    }

    #[test]
    fn token_and_patch_counts() {
        let s = ModelConfig {
            variant: Variant::SingleView,
            ..ModelConfig::default()
        };
        assert_eq!(s.feature_side(), 8);
        assert_eq!(s.token_count(1), 4);
        let n = ModelConfig {
            grid_side: 8,
            scheme: Scheme::Naive,
            ..ModelConfig::default()
        };
        assert_eq!(n.output_patch_count(), 8);
    }
}
