//! Transformer building blocks on a tape. Activations are `[B, T, d]`.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var, MASK_FILL};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    EncoderEncoder,
    DecoderEncoder,
    DecoderDecoder,
}

/// Post-softmax attention scores of one head, `rows × cols`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f32>,
}

impl AttentionRecord {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.scores[r * self.cols..(r + 1) * self.cols]
    }
}

/// Parameters of a [`ParamStore`] placed on a tape, addressable by name.
pub(crate) struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { store, vars }
    }

    pub fn from_vars(store: &'a ParamStore, vars: Vec<Var>) -> Self {
        Bound { store, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Attention records per batch item.
pub(crate) type Capture = Vec<Vec<AttentionRecord>>;

pub(crate) struct AttnSpec<'m> {
    pub kind: AttentionKind,
    pub layer: usize,
    /// `rows × cols` entries; `true` blocks attention.
    pub mask: Option<&'m [bool]>,
}

/// `x·W + b` for `x: [.., d_in]`.
pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = (
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
    );
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / d_in.max(1);
    let flat = tape.reshape(x, &[rows, d_in])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = tape.shape(w)[1];
    tape.reshape(y, &out_shape)
}

pub(crate) fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (g, b) = (
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
    );
    tape.layer_norm(x, g, b, LN_EPS)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Multi-head attention of `q_in: [B, T, d]` over `kv_in: [B, S, d]`.
/// Rows whose every column is masked produce zero weights.
pub(crate) fn attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    spec: &AttnSpec,
    capture: Option<&mut Capture>,
) -> Result<Var> {
    let (batch, rows, d) = {
        let s = tape.shape(q_in);
        (s[0], s[1], s[2])
    };
    let cols = tape.shape(kv_in)[1];
    let q = linear(tape, p, &format!("{prefix}.q"), q_in)?;
    let k = linear(tape, p, &format!("{prefix}.k"), kv_in)?;
    let v = linear(tape, p, &format!("{prefix}.v"), kv_in)?;
    let (q, k, v) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / ((d / heads) as f32).sqrt());
    if let Some(mask) = spec.mask {
        if mask.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "attention mask has {} entries for a {rows}x{cols} score matrix",
                mask.len()
            )));
        }
        scores = tape.masked_fill(scores, mask, MASK_FILL)?;
    }
    let mut weights = tape.softmax(scores, 3)?;
    if let Some(mask) = spec.mask {
        let row_valid: Vec<f32> = mask
            .chunks(cols)
            .flat_map(|r| {
                let live = if r.iter().all(|&m| m) { 0.0 } else { 1.0 };
                std::iter::repeat_n(live, cols)
            })
            .collect();
        if row_valid.contains(&0.0) {
            let rv = tape.constant(Tensor::new(vec![rows, cols], row_valid)?);
            weights = tape.mul(weights, rv)?;
        }
    }
    if let Some(sink) = capture {
        let w = tape.value(weights).data();
        let plane = rows * cols;
        for (b, records) in sink.iter_mut().enumerate().take(batch) {
            for h in 0..heads {
                let start = (b * heads + h) * plane;
                records.push(AttentionRecord {
                    kind: spec.kind,
                    layer: spec.layer,
                    head: h,
                    rows,
                    cols,
                    scores: w[start..start + plane].to_vec(),
                });
            }
        }
    }
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, rows, d])?;
    linear(tape, p, &format!("{prefix}.o"), ctx)
}

pub(crate) fn feed_forward(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.ff1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.ff2"), h)
}

/// Pre-norm encoder layer with unmasked self-attention.
pub(crate) fn encoder_layer(
    tape: &mut Tape,
    p: &Bound,
    slot: usize,
    layer: usize,
    heads: usize,
    x: Var,
    capture: Option<&mut Capture>,
) -> Result<Var> {
    let pre = format!("enc.{slot}");
    let h = norm(tape, p, &format!("{pre}.norm1"), x)?;
    let spec = AttnSpec {
        kind: AttentionKind::EncoderEncoder,
        layer,
        mask: None,
    };
    let a = attention(tape, p, &format!("{pre}.attn"), h, h, heads, &spec, capture)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{pre}.norm2"), x)?;
    let f = feed_forward(tape, p, &pre, h)?;
    tape.add(x, f)
}

/// Pre-norm decoder layer: masked self-attention, cross-attention, feed-forward.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_layer(
    tape: &mut Tape,
    p: &Bound,
    slot: usize,
    layer: usize,
    heads: usize,
    x: Var,
    memory: Var,
    self_mask: Option<&[bool]>,
    mut capture: Option<&mut Capture>,
) -> Result<Var> {
    let pre = format!("dec.{slot}");
    let h = norm(tape, p, &format!("{pre}.norm1"), x)?;
    let spec = AttnSpec {
        kind: AttentionKind::DecoderDecoder,
        layer,
        mask: self_mask,
    };
    let a = attention(
        tape,
        p,
        &format!("{pre}.self_attn"),
        h,
        h,
        heads,
        &spec,
        capture.as_deref_mut(),
    )?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{pre}.norm2"), x)?;
    let spec = AttnSpec {
        kind: AttentionKind::DecoderEncoder,
        layer,
        mask: None,
    };
    let a = attention(
        tape,
        p,
        &format!("{pre}.cross_attn"),
        h,
        memory,
        heads,
        &spec,
        capture,
    )?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{pre}.norm3"), x)?;
    let f = feed_forward(tape, p, &pre, h)?;
    tape.add(x, f)
}

/// `true` on the diagonal: a query may not attend to itself.
pub fn diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i / n == i % n).collect()
}

/// `true` above the diagonal: step `i` sees steps `0..=i` only.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n > i / n).collect()
}
