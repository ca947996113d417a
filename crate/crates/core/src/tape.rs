//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs, so parents always precede children and a single reverse
//! sweep over the node list is a valid topological order for [`Tape::backward`].
//! A fresh tape is built for each forward pass.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use crate::tensor::{strides, Tensor};

/// Fill value used by [`Tape::masked_fill`] before a softmax.
pub const MASK_FILL: f32 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    MatMul {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Sigmoid(Var),
    Relu(Var),
    ClipMax {
        a: Var,
        max: f32,
    },
    Outer3 {
        z: Var,
        y: Var,
        x: Var,
    },
    ComposeClipped {
        z: Var,
        y: Var,
        x: Var,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Gather {
        a: Var,
        index: Vec<u32>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        batch: usize,
        out_ch: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        channels: usize,
        spatial: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f32]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` may equal `lhs` or be a trailing suffix of it (repeated over the leading axes).
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(())
    } else {
        Err(shape_err(op, lhs, rhs))
    }
}

fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output shape and (lhs, rhs) matrix-index pairs for broadcast batch dims.
fn batch_pairs(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            if pa[d] != 1 {
                ia += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ib += idx[d] * sb[d];
            }
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise branch taken so far: ReLU signs, clip states
    /// and max-pool winners. Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.data(*a).iter().for_each(|&x| (x > 0.0).hash(&mut h)),
                Op::ClipMax { a, max } => {
                    self.data(*a).iter().for_each(|&x| (x < *max).hash(&mut h))
                }
                Op::ComposeClipped { .. } => node
                    .value
                    .data()
                    .iter()
                    .for_each(|&x| (x < 1.0).hash(&mut h)),
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        check_broadcast(op, &sa, sb)?;
        let bd = self.data(b);
        let n = bd.len().max(1);
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(sa, out), make(a, b), ng))
    }

    /// Elementwise sum; `b` may broadcast as a trailing suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let v = self.value(a);
        let out: Vec<f32> = v.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale { a, factor }, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = self.value(a);
        let out: Vec<f32> = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // Comparisons rather than f32::max/min so NaN propagates.
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// `min(max, a)`; the gradient is 1 below the bound and 0 where clipped.
    pub fn clip_max(&mut self, a: Var, max: f32) -> Var {
        self.unary(a, |x| if x > max { max } else { x }, Op::ClipMax { a, max })
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (mut shape, pairs) = batch_pairs(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| shape_err("matmul", sa, sb))?;
        let mut out = vec![0.0; pairs.len() * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for (o, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_nn(
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
        }
        shape.extend_from_slice(&[m, n]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                pairs,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for i in 0..d {
                let h = ((row[i] as f64 - mean) * rs) as f32;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// `out[i,j,k] = z[i]·y[j]·x[k]`.
    pub fn outer3(&mut self, z: Var, y: Var, x: Var) -> Result<Var> {
        let n = self.value(z).len();
        for v in [z, y, x] {
            if self.shape(v) != [n] {
                return Err(shape_err("outer3", self.shape(z), self.shape(v)));
            }
        }
        let (zd, yd, xd) = (self.data(z), self.data(y), self.data(x));
        let mut out = Vec::with_capacity(n * n * n);
        for &zv in zd {
            for &yv in yd {
                let zy = zv * yv;
                out.extend(xd.iter().map(|&xv| zy * xv));
            }
        }
        let ng = self.ng(&[z, y, x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, n, n], out),
            Op::Outer3 { z, y, x },
            ng,
        ))
    }

    /// `min(1, Σ_i z_i ⊗ y_i ⊗ x_i)` for factor matrices of shape `[k, n]`,
    /// accumulated into a single `n³` buffer.
    pub fn compose_clipped(&mut self, z: Var, y: Var, x: Var) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        if sz.len() != 2 || self.shape(y) != sz || self.shape(x) != sz {
            return Err(shape_err("compose_clipped", &sz, self.shape(x)));
        }
        let (k, n) = (sz[0], sz[1]);
        let (zd, yd, xd) = (self.data(z), self.data(y), self.data(x));
        // f64 accumulation makes the result independent of factor order.
        let mut acc = vec![0.0f64; n * n * n];
        for i in 0..k {
            let (zi, yi, xi) = (
                &zd[i * n..(i + 1) * n],
                &yd[i * n..(i + 1) * n],
                &xd[i * n..(i + 1) * n],
            );
            for (a, &zv) in zi.iter().enumerate() {
                if zv == 0.0 {
                    continue;
                }
                for (b, &yv) in yi.iter().enumerate() {
                    let zy = zv as f64 * yv as f64;
                    let row = &mut acc[(a * n + b) * n..(a * n + b + 1) * n];
                    for (o, &xv) in row.iter_mut().zip(xi) {
                        *o += zy * xv as f64;
                    }
                }
            }
        }
        let out: Vec<f32> = acc
            .iter()
            .map(|&v| if v > 1.0 { 1.0 } else { v as f32 })
            .collect();
        let ng = self.ng(&[z, y, x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, n, n], out),
            Op::ComposeClipped { z, y, x, k, n },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// `out[i] = a.flat[index[i]]`, with the given output shape.
    pub fn gather(&mut self, a: Var, index: Vec<u32>, shape: &[usize]) -> Result<Var> {
        let src = self.data(a);
        if shape.iter().product::<usize>() != index.len()
            || index.iter().any(|&i| i as usize >= src.len())
        {
            return Err(shape_err("gather", self.shape(a), shape));
        }
        let out: Vec<f32> = index.iter().map(|&i| src[i as usize]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather { a, index },
            ng,
        ))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(shape_err("permute", &shape, axes));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            let off: usize = idx
                .iter()
                .zip(axes)
                .map(|(&i, &ax)| i * in_strides[ax])
                .sum();
            index.push(off as u32);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out =
            Vec::with_capacity(outer * total_axis * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let d = self.data(p);
                let chunk = d.len() / outer;
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true with `value`. `mask` covers a
    /// trailing suffix of `a`'s shape and repeats over the leading axes.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f32) -> Result<Var> {
        let len = self.value(a).len();
        if mask.is_empty() || len % mask.len() != 0 {
            return Err(shape_err("masked_fill", self.shape(a), &[mask.len()]));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { value } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|&v| v as f64).sum::<f64>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Mean(a), ng)
    }

    /// 2D convolution of `x: [B, C, H, W]` with square kernels `w: [O, C, K, K]`
    /// and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4
            || sw.len() != 4
            || sw[1] != sx[1]
            || sw[2] != sw[3]
            || self.shape(b) != [sw[0]]
            || stride == 0
        {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        let (batch, out_ch) = (sx[0], sw[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.height * geom.width;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * out_ch * cols];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for bi in 0..batch {
            geom.im2col(&xd[bi * in_len..(bi + 1) * in_len], &mut col);
            let ob = &mut out[bi * out_ch * cols..(bi + 1) * out_ch * cols];
            for (o, chunk) in ob.chunks_mut(cols).enumerate() {
                chunk.fill(bd[o]);
            }
            gemm_nn(wd, &col, ob, out_ch, rows, cols);
        }
        let shape = vec![batch, out_ch, geom.out_height(), geom.out_width()];
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2 on `[B, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", &s, &[2, 2]));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let planes = s[0] * s[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * s[3] + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s[3] + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool2 { x, argmax },
            ng,
        ))
    }

    /// Per-channel `x·scale[c] + shift[c]` on `[B, C, H, W]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(scale) != [s[1]] || self.shape(shift) != [s[1]] {
            return Err(shape_err("channel_affine", &s, self.shape(scale)));
        }
        let (channels, spatial) = (s[1], s[2] * s[3]);
        let (xd, sc, sh) = (self.data(x), self.data(scale), self.data(shift));
        let out: Vec<f32> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / spatial) % channels;
                v * sc[c] + sh[c]
            })
            .collect();
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::ChannelAffine {
                x,
                scale,
                shift,
                channels,
                spatial,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % n] += sign * y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let n = bd.len();
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bd[i % n];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % n] += y * ad[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)
                });
            }
            Op::MatMul {
                a,
                b,
                pairs,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_nt(
                            &g[o * m * n..(o + 1) * m * n],
                            &bd[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_tn(
                            &ad[ia * m * k..(ia + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f32 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gn = val(*gain);
                let d = gn.len();
                acc(*gain, &mut |gg| {
                    for (i, &y) in g.iter().enumerate() {
                        gg[i % d] += y * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut mean_gh = 0.0f32;
                        let mut mean_ghx = 0.0f32;
                        for i in 0..d {
                            let gh = g[base + i] * gn[i];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[base + i];
                        }
                        mean_gh /= d as f32;
                        mean_ghx /= d as f32;
                        for i in 0..d {
                            let gh = g[base + i] * gn[i];
                            gx[base + i] += rs * (gh - mean_gh - xhat[base + i] * mean_ghx);
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::ClipMax { a, max } => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] < *max {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Outer3 { z, y, x } => {
                let (zd, yd, xd) = (val(*z), val(*y), val(*x));
                let n = zd.len();
                let mut gz = vec![0.0; n];
                let mut gy = vec![0.0; n];
                let mut gx = vec![0.0; n];
                rank1_grads(g, zd, yd, xd, n, &mut gz, &mut gy, &mut gx);
                acc(*z, &mut |s| {
                    s.iter_mut().zip(&gz).for_each(|(a, b)| *a += b)
                });
                acc(*y, &mut |s| {
                    s.iter_mut().zip(&gy).for_each(|(a, b)| *a += b)
                });
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&gx).for_each(|(a, b)| *a += b)
                });
            }
            Op::ComposeClipped { z, y, x, k, n } => {
                let (k, n) = (*k, *n);
                // Clipped voxels (value == 1) pass no gradient.
                let masked: Vec<f32> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &p)| if p < 1.0 { gv } else { 0.0 })
                    .collect();
                let (zd, yd, xd) = (val(*z), val(*y), val(*x));
                let mut gz = vec![0.0; k * n];
                let mut gy = vec![0.0; k * n];
                let mut gx = vec![0.0; k * n];
                for i in 0..k {
                    let r = i * n..(i + 1) * n;
                    rank1_grads(
                        &masked,
                        &zd[r.clone()],
                        &yd[r.clone()],
                        &xd[r.clone()],
                        n,
                        &mut gz[r.clone()],
                        &mut gy[r.clone()],
                        &mut gx[r],
                    );
                }
                acc(*z, &mut |s| {
                    s.iter_mut().zip(&gz).for_each(|(a, b)| *a += b)
                });
                acc(*y, &mut |s| {
                    s.iter_mut().zip(&gy).for_each(|(a, b)| *a += b)
                });
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&gx).for_each(|(a, b)| *a += b)
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Gather { a, index } => {
                acc(*a, &mut |ga| {
                    for (&i, &y) in index.iter().zip(g) {
                        ga[i as usize] += y;
                    }
                });
            }
            Op::Concat { parts, outer } => {
                let outer = *outer;
                let total = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.len() / outer;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::MaskedFill { a, mask } => {
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if !mask[i % mask.len()] {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f32;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let (xd, wd) = (val(*x), val(*w));
                let out_len = out_ch * cols;
                acc(*b, &mut |gb| {
                    for (i, chunk) in g.chunks(cols).enumerate() {
                        gb[i % out_ch] += chunk.iter().sum::<f32>();
                    }
                });
                let need_w = nodes[w.0].needs_grad;
                let need_x = nodes[x.0].needs_grad;
                let mut col = vec![0.0; rows * cols];
                let mut gw = if need_w {
                    vec![0.0; out_ch * rows]
                } else {
                    Vec::new()
                };
                let mut gx = if need_x {
                    vec![0.0; batch * in_len]
                } else {
                    Vec::new()
                };
                for bi in 0..*batch {
                    let gout = &g[bi * out_len..(bi + 1) * out_len];
                    if need_w {
                        geom.im2col(&xd[bi * in_len..(bi + 1) * in_len], &mut col);
                        gemm_nt(gout, &col, &mut gw, *out_ch, cols, rows);
                    }
                    if need_x {
                        col.fill(0.0);
                        gemm_tn(wd, gout, &mut col, rows, *out_ch, cols);
                        geom.col2im_add(&col, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if need_w {
                    acc(*w, &mut |s| {
                        s.iter_mut().zip(&gw).for_each(|(a, b)| *a += b)
                    });
                }
                if need_x {
                    acc(*x, &mut |s| {
                        s.iter_mut().zip(&gx).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&i, &y) in argmax.iter().zip(g) {
                        gx[i as usize] += y;
                    }
                });
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                channels,
                spatial,
            } => {
                let (xd, sc) = (val(*x), val(*scale));
                let ch = |i: usize| (i / spatial) % channels;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sc[ch(i)];
                    }
                });
                acc(*scale, &mut |gs| {
                    for i in 0..g.len() {
                        gs[ch(i)] += g[i] * xd[i];
                    }
                });
                acc(*shift, &mut |gs| {
                    for i in 0..g.len() {
                        gs[ch(i)] += g[i];
                    }
                });
            }
        }
    }
}

/// Gradients of `Σ g[a,b,c]·z[a]·y[b]·x[c]` with respect to each vector.
#[allow(clippy::too_many_arguments)]
fn rank1_grads(
    g: &[f32],
    z: &[f32],
    y: &[f32],
    x: &[f32],
    n: usize,
    gz: &mut [f32],
    gy: &mut [f32],
    gx: &mut [f32],
) {
    // m[a][b] = Σ_c g[a,b,c]·x[c]
    let mut m = vec![0.0f32; n * n];
    for (ab, mv) in m.iter_mut().enumerate() {
        let row = &g[ab * n..(ab + 1) * n];
        *mv = row.iter().zip(x).map(|(p, q)| p * q).sum();
    }
    for a in 0..n {
        for b in 0..n {
            let v = m[a * n + b];
            gz[a] += v * y[b];
            gy[b] += v * z[a];
        }
    }
    for a in 0..n {
        for b in 0..n {
            let zy = z[a] * y[b];
            if zy == 0.0 {
                continue;
            }
            let row = &g[(a * n + b) * n..(a * n + b + 1) * n];
            for (gxv, &gv) in gx.iter_mut().zip(row) {
                *gxv += zy * gv;
            }
        }
    }
}
