//! Reverse-mode automatic differentiation on a single-threaded tape.
//!
//! Every operation is recorded eagerly: the node stores its output value,
//! the op kind and its input ids, plus whatever small buffers the adjoint
//! needs. `backward` replays the tape in exact reverse order. Individual
//! kernels may parallelize internally over disjoint output regions, which
//! keeps results bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Constant,
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    MatMul(TensorId, TensorId),
    Swish(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // mean and 1/std per row
        saved: Vec<(f64, f64)>,
    },
    EmbedLookup {
        table: TensorId,
        ids: Vec<u32>,
    },
    PrefixConcat {
        prefix: TensorId,
        tokens: TensorId,
        seq: usize,
    },
    CausalAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        seq: usize,
        // softmax(QK^T/sqrt(hd)) per (sample, head), [B, H, L, L]
        attn: Vec<f64>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    ProjectAxis {
        x: TensorId,
        diag: TensorId,
        axis: usize,
        levels: u32,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
    SumAll(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. One tape per training step; recording is single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable the per-op finiteness scan (kept on by default).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<TensorId> {
        if self.check_finite {
            value.check_finite("tape op output")?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Register a trainable parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<TensorId> {
        self.push(value, Op::Leaf, true)
    }

    /// Register a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `x + bias`, broadcasting a 1-D bias over the last axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias length {} vs {} columns",
                bv.len(),
                c
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x, bias]);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// 2-D matrix product; tensors are viewed as [rows, last-axis].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = (av.rows(), av.cols());
        let (kb, n) = (bv.rows(), bv.cols());
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner extents disagree ({m}x{ka} vs {kb}x{n})"
            )));
        }
        let value = matmul(av, bv, m, ka, n);
        let rg = self.needs_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Elementwise x * sigmoid(x).
    pub fn swish(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Swish(x), rg)
    }

    /// Softmax along the given axis, max-subtracted for overflow safety.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for rank {rank}"
            )));
        }
        let (pre, n, post) = axis_split(xv.shape(), axis);
        let mut data = xv.data().to_vec();
        softmax_lanes(&mut data, pre, n, post);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Softmax { x, axis }, rg)
    }

    /// Row-wise layer norm with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias length {}/{} vs {} columns",
                gv.len(),
                bv.len(),
                c
            )));
        }
        let rows = xv.rows();
        let mut data = vec![0.0; xv.len()];
        let mut saved = Vec::with_capacity(rows);
        for (out, row) in data.chunks_mut(c).zip(xv.data().chunks(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            saved.push((mean, inv));
            for ((o, &v), (&g, &b)) in out
                .iter_mut()
                .zip(row)
                .zip(gv.data().iter().zip(bv.data()))
            {
                *o = (v - mean) * inv * g + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            },
            rg,
        )
    }

    /// Gather rows of `table` by index; output is [ids.len(), cols].
    pub fn embed_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let tv = &self.nodes[table.0].value;
        let (rows, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Contract(format!(
                    "embed_lookup: index {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&tv.data()[id as usize * c..(id as usize + 1) * c]);
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.needs_grad(&[table]);
        self.push(
            value,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Interleave per-sample prefix rows before each block of `seq` token rows.
    ///
    /// prefix: [B, d], tokens: [B*seq, d] -> [B*(seq+1), d].
    pub fn prefix_concat(&mut self, prefix: TensorId, tokens: TensorId, seq: usize) -> Result<TensorId> {
        let (pv, tv) = (&self.nodes[prefix.0].value, &self.nodes[tokens.0].value);
        let d = tv.cols();
        if pv.cols() != d {
            return Err(Error::Shape("prefix_concat: column mismatch".into()));
        }
        let batch = pv.rows();
        if tv.rows() != batch * seq {
            return Err(Error::Shape(format!(
                "prefix_concat: {} token rows, expected {}x{}",
                tv.rows(),
                batch,
                seq
            )));
        }
        let mut data = Vec::with_capacity(batch * (seq + 1) * d);
        for b in 0..batch {
            data.extend_from_slice(&pv.data()[b * d..(b + 1) * d]);
            data.extend_from_slice(&tv.data()[b * seq * d..(b + 1) * seq * d]);
        }
        let value = Tensor::new(vec![batch * (seq + 1), d], data)?;
        let rg = self.needs_grad(&[prefix, tokens]);
        self.push(
            value,
            Op::PrefixConcat {
                prefix,
                tokens,
                seq,
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over per-sample blocks of `seq` rows.
    ///
    /// q, k, v: [B*seq, d]; returns the mixed values, [B*seq, d]. Position i
    /// attends to positions <= i within its own sample.
    pub fn causal_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        seq: usize,
    ) -> Result<TensorId> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qv.cols();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::Shape("attention: q/k/v shapes differ".into()));
        }
        if d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {d} columns not divisible into {heads} heads"
            )));
        }
        let rows = qv.rows();
        if rows % seq != 0 {
            return Err(Error::Shape(format!(
                "attention: {rows} rows not a multiple of seq {seq}"
            )));
        }
        let batch = rows / seq;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut ctx = vec![0.0; rows * d];
        let mut attn = vec![0.0; batch * heads * seq * seq];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        ctx.par_chunks_mut(seq * d)
            .zip(attn.par_chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (ctx_b, attn_b))| {
                let base = b * seq * d;
                for h in 0..heads {
                    let col = h * hd;
                    let a_h = &mut attn_b[h * seq * seq..(h + 1) * seq * seq];
                    for i in 0..seq {
                        let qrow = &qd[base + i * d + col..base + i * d + col + hd];
                        let arow = &mut a_h[i * seq..i * seq + i + 1];
                        // scores for j <= i, then softmax in place
                        let mut maxv = f64::NEG_INFINITY;
                        for (j, a) in arow.iter_mut().enumerate() {
                            let krow = &kd[base + j * d + col..base + j * d + col + hd];
                            let mut s = 0.0;
                            for (x, y) in qrow.iter().zip(krow) {
                                s += x * y;
                            }
                            *a = s * scale;
                            if *a > maxv {
                                maxv = *a;
                            }
                        }
                        let mut z = 0.0;
                        for a in arow.iter_mut() {
                            *a = (*a - maxv).exp();
                            z += *a;
                        }
                        let inv = 1.0 / z;
                        for a in arow.iter_mut() {
                            *a *= inv;
                        }
                        // ctx_i = sum_j a_ij v_j
                        let out = &mut ctx_b[i * d + col..i * d + col + hd];
                        for (j, &a) in arow.iter().enumerate() {
                            let vrow = &vd[base + j * d + col..base + j * d + col + hd];
                            for (o, &vj) in out.iter_mut().zip(vrow) {
                                *o += a * vj;
                            }
                        }
                    }
                }
            });
        let value = Tensor::new(vec![rows, d], ctx)?;
        let rg = self.needs_grad(&[q, k, v]);
        self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq,
                attn,
            },
            rg,
        )
    }

    /// Weighted mean negative log-likelihood in nats.
    ///
    /// logits: [rows, V]; targets and weights have one entry per row; rows
    /// with weight 0 are masked out of the mean.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<TensorId> {
        let lv = &self.nodes[logits.0].value;
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        for &t in targets {
            if t as usize >= v {
                return Err(Error::Contract(format!(
                    "cross_entropy: target {t} out of range for {v} classes"
                )));
            }
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Contract(
                "cross_entropy: no unmasked positions".into(),
            ));
        }
        // Serial reduction: the loss value feeds metrics logs, which must be
        // bitwise stable regardless of thread count.
        let total: f64 = lv
            .data()
            .chunks(v)
            .zip(targets.iter())
            .zip(weights.iter())
            .map(|((row, &t), &w)| {
                if w == 0.0 {
                    return 0.0;
                }
                let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&x| (x - maxv).exp()).sum();
                w * (z.ln() + maxv - row[t as usize])
            })
            .sum();
        let value = Tensor::scalar(total / wsum);
        let rg = self.needs_grad(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Contract an axis of length n down to n >> levels:
    /// out[.., a, ..] = sum over j with (j >> levels) == a of diag[j] * x[.., j, ..].
    pub fn project_axis(
        &mut self,
        x: TensorId,
        diag: TensorId,
        axis: usize,
        levels: u32,
    ) -> Result<TensorId> {
        let (xv, dv) = (&self.nodes[x.0].value, &self.nodes[diag.0].value);
        let rank = xv.shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "project_axis: axis {axis} out of range for rank {rank}"
            )));
        }
        let (pre, n, post) = axis_split(xv.shape(), axis);
        if dv.len() != n {
            return Err(Error::Shape(format!(
                "project_axis: diagonal length {} vs axis extent {}",
                dv.len(),
                n
            )));
        }
        if n % (1usize << levels) != 0 {
            return Err(Error::Contract(format!(
                "project_axis: extent {n} not divisible by 2^{levels}"
            )));
        }
        let out_n = n >> levels;
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = out_n;
        let mut data = vec![0.0; pre * out_n * post];
        let (xd, dd) = (xv.data(), dv.data());
        for p in 0..pre {
            let src = &xd[p * n * post..(p + 1) * n * post];
            let dst = &mut data[p * out_n * post..(p + 1) * out_n * post];
            for j in 0..n {
                let a = j >> levels;
                let w = dd[j];
                let s = &src[j * post..(j + 1) * post];
                let o = &mut dst[a * post..(a + 1) * post];
                for (ov, &sv) in o.iter_mut().zip(s) {
                    *ov += w * sv;
                }
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs_grad(&[x, diag]);
        self.push(
            value,
            Op::ProjectAxis {
                x,
                diag,
                axis,
                levels,
            },
            rg,
        )
    }

    /// Columns [start, end) of a 2-D view.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {end}) out of {c} columns"
            )));
        }
        let rows = xv.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![rows, w], data)?;
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::SliceCols { x, start, end }, rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    /// Reverse pass. `loss` must be a scalar recorded on this tape.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if !ln.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss has shape {:?}, expected a scalar",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => continue,
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |dst| axpy(dst, 1.0, g.data()));
                    self.acc(&mut grads, *b, |dst| axpy(dst, 1.0, g.data()));
                }
                Op::AddBias(x, bias) => {
                    self.acc(&mut grads, *x, |dst| axpy(dst, 1.0, g.data()));
                    let c = self.nodes[bias.0].value.len();
                    self.acc(&mut grads, *bias, |dst| {
                        for row in g.data().chunks(c) {
                            axpy(dst, 1.0, row);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.acc(&mut grads, *a, |dst| {
                        for ((o, &gv), &x) in dst.iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += gv * x;
                        }
                    });
                    self.acc(&mut grads, *b, |dst| {
                        for ((o, &gv), &x) in dst.iter_mut().zip(g.data()).zip(av.data()) {
                            *o += gv * x;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    self.acc(&mut grads, *x, |dst| axpy(dst, *c, g.data()));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if self.nodes[a.0].requires_grad {
                        let da = matmul_nt(&g, bv, m, n, k);
                        self.acc(&mut grads, *a, |dst| axpy(dst, 1.0, da.data()));
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = matmul_tn(av, &g, m, k, n);
                        self.acc(&mut grads, *b, |dst| axpy(dst, 1.0, db.data()));
                    }
                }
                Op::Swish(x) => {
                    let xv = &self.nodes[x.0].value;
                    self.acc(&mut grads, *x, |dst| {
                        for ((o, &gv), &v) in dst.iter_mut().zip(g.data()).zip(xv.data()) {
                            let s = sigmoid(v);
                            *o += gv * s * (1.0 + v * (1.0 - s));
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let yv = &node.value;
                    let (pre, n, post) = axis_split(yv.shape(), *axis);
                    self.acc(&mut grads, *x, |dst| {
                        let yd = yv.data();
                        let gd = g.data();
                        for p in 0..pre {
                            for q in 0..post {
                                let base = p * n * post + q;
                                let mut dot = 0.0;
                                for j in 0..n {
                                    dot += gd[base + j * post] * yd[base + j * post];
                                }
                                for j in 0..n {
                                    let idx = base + j * post;
                                    dst[idx] += yd[idx] * (gd[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    saved,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let c = gv.len();
                    if self.nodes[gain.0].requires_grad {
                        self.acc(&mut grads, *gain, |dst| {
                            for (row, (grow, &(mean, inv))) in xv
                                .data()
                                .chunks(c)
                                .zip(g.data().chunks(c).zip(saved.iter()))
                            {
                                for ((o, &xval), &gval) in dst.iter_mut().zip(row).zip(grow) {
                                    *o += gval * (xval - mean) * inv;
                                }
                            }
                        });
                    }
                    if self.nodes[bias.0].requires_grad {
                        self.acc(&mut grads, *bias, |dst| {
                            for grow in g.data().chunks(c) {
                                axpy(dst, 1.0, grow);
                            }
                        });
                    }
                    if self.nodes[x.0].requires_grad {
                        self.acc(&mut grads, *x, |dst| {
                            for (((orow, row), grow), &(mean, inv)) in dst
                                .chunks_mut(c)
                                .zip(xv.data().chunks(c))
                                .zip(g.data().chunks(c))
                                .zip(saved.iter())
                            {
                                // dxhat = g * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for ((&gval, &xval), &gn) in
                                    grow.iter().zip(row).zip(gv.data())
                                {
                                    let dxh = gval * gn;
                                    let xh = (xval - mean) * inv;
                                    s1 += dxh;
                                    s2 += dxh * xh;
                                }
                                s1 /= c as f64;
                                s2 /= c as f64;
                                for ((o, (&gval, &xval)), &gn) in orow
                                    .iter_mut()
                                    .zip(grow.iter().zip(row))
                                    .zip(gv.data())
                                {
                                    let dxh = gval * gn;
                                    let xh = (xval - mean) * inv;
                                    *o += inv * (dxh - s1 - xh * s2);
                                }
                            }
                        });
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    let c = self.nodes[table.0].value.cols();
                    self.acc(&mut grads, *table, |dst| {
                        for (&id, grow) in ids.iter().zip(g.data().chunks(c)) {
                            let o = &mut dst[id as usize * c..(id as usize + 1) * c];
                            axpy(o, 1.0, grow);
                        }
                    });
                }
                Op::PrefixConcat {
                    prefix,
                    tokens,
                    seq,
                } => {
                    let d = self.nodes[tokens.0].value.cols();
                    let batch = self.nodes[prefix.0].value.rows();
                    let stride = (*seq + 1) * d;
                    self.acc(&mut grads, *prefix, |dst| {
                        for b in 0..batch {
                            axpy(
                                &mut dst[b * d..(b + 1) * d],
                                1.0,
                                &g.data()[b * stride..b * stride + d],
                            );
                        }
                    });
                    self.acc(&mut grads, *tokens, |dst| {
                        for b in 0..batch {
                            axpy(
                                &mut dst[b * seq * d..(b + 1) * seq * d],
                                1.0,
                                &g.data()[b * stride + d..(b + 1) * stride],
                            );
                        }
                    });
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    seq,
                    attn,
                } => {
                    let (qv, kv, vv) = (
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                    );
                    let d = qv.cols();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = vec![0.0; qv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let gd = g.data();
                    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                    let seq_ = *seq;
                    let heads_ = *heads;
                    dq.par_chunks_mut(seq_ * d)
                        .zip(dk.par_chunks_mut(seq_ * d))
                        .zip(dv.par_chunks_mut(seq_ * d))
                        .enumerate()
                        .for_each(|(b, ((dq_b, dk_b), dv_b))| {
                            let base = b * seq_ * d;
                            let attn_b = &attn[b * heads_ * seq_ * seq_..(b + 1) * heads_ * seq_ * seq_];
                            let mut ds_row = vec![0.0; seq_];
                            for h in 0..heads_ {
                                let col = h * hd;
                                let a_h = &attn_b[h * seq_ * seq_..(h + 1) * seq_ * seq_];
                                for i in 0..seq_ {
                                    let arow = &a_h[i * seq_..i * seq_ + i + 1];
                                    let grow = &gd[base + i * d + col..base + i * d + col + hd];
                                    // dA_ij = g_i . v_j ; dv_j += a_ij * g_i
                                    let mut dot = 0.0;
                                    for (j, &a) in arow.iter().enumerate() {
                                        let vrow = &vd[base + j * d + col..base + j * d + col + hd];
                                        let mut da = 0.0;
                                        for (x, y) in grow.iter().zip(vrow) {
                                            da += x * y;
                                        }
                                        ds_row[j] = da;
                                        dot += da * a;
                                        let o = &mut dv_b[j * d + col..j * d + col + hd];
                                        for (ov, &gv2) in o.iter_mut().zip(grow) {
                                            *ov += a * gv2;
                                        }
                                    }
                                    // dS = A o (dA - dot); dq_i += dS . K ; dk_j += dS_ij * q_i
                                    let qrow = &qd[base + i * d + col..base + i * d + col + hd];
                                    for (j, &a) in arow.iter().enumerate() {
                                        let ds = a * (ds_row[j] - dot) * scale;
                                        if ds == 0.0 {
                                            continue;
                                        }
                                        let krow = &kd[base + j * d + col..base + j * d + col + hd];
                                        let oq = &mut dq_b[i * d + col..i * d + col + hd];
                                        for (ov, &kx) in oq.iter_mut().zip(krow) {
                                            *ov += ds * kx;
                                        }
                                        let ok = &mut dk_b[j * d + col..j * d + col + hd];
                                        for (ov, &qx) in ok.iter_mut().zip(qrow) {
                                            *ov += ds * qx;
                                        }
                                    }
                                }
                            }
                        });
                    self.acc(&mut grads, *q, |dst| axpy(dst, 1.0, &dq));
                    self.acc(&mut grads, *k, |dst| axpy(dst, 1.0, &dk));
                    self.acc(&mut grads, *v, |dst| axpy(dst, 1.0, &dv));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = &self.nodes[logits.0].value;
                    let vdim = lv.cols();
                    let wsum: f64 = weights.iter().sum();
                    let gscale = g.scalar_value() / wsum;
                    self.acc(&mut grads, *logits, |dst| {
                        dst.par_chunks_mut(vdim)
                            .zip(lv.data().par_chunks(vdim))
                            .zip(targets.par_iter().zip(weights.par_iter()))
                            .for_each(|((orow, row), (&t, &w))| {
                                if w == 0.0 {
                                    return;
                                }
                                let maxv =
                                    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                let mut z = 0.0;
                                for &x in row {
                                    z += (x - maxv).exp();
                                }
                                let c = w * gscale;
                                for ((o, &x), j) in orow.iter_mut().zip(row).zip(0..) {
                                    let p = (x - maxv).exp() / z;
                                    *o += c * (p - if j == t as usize { 1.0 } else { 0.0 });
                                }
                            });
                    });
                }
                Op::ProjectAxis {
                    x,
                    diag,
                    axis,
                    levels,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let dv = &self.nodes[diag.0].value;
                    let (pre, n, post) = axis_split(xv.shape(), *axis);
                    if self.nodes[x.0].requires_grad {
                        self.acc(&mut grads, *x, |dst| {
                            let dd = dv.data();
                            let gd = g.data();
                            let out_n = n >> levels;
                            for p in 0..pre {
                                let grow = &gd[p * out_n * post..(p + 1) * out_n * post];
                                let orow = &mut dst[p * n * post..(p + 1) * n * post];
                                for j in 0..n {
                                    let a = j >> levels;
                                    let w = dd[j];
                                    let src = &grow[a * post..(a + 1) * post];
                                    let o = &mut orow[j * post..(j + 1) * post];
                                    for (ov, &sv) in o.iter_mut().zip(src) {
                                        *ov += w * sv;
                                    }
                                }
                            }
                        });
                    }
                    if self.nodes[diag.0].requires_grad {
                        self.acc(&mut grads, *diag, |dst| {
                            let xd = xv.data();
                            let gd = g.data();
                            let out_n = n >> levels;
                            for p in 0..pre {
                                let grow = &gd[p * out_n * post..(p + 1) * out_n * post];
                                let xrow = &xd[p * n * post..(p + 1) * n * post];
                                for (j, o) in dst.iter_mut().enumerate() {
                                    let a = j >> levels;
                                    let src = &grow[a * post..(a + 1) * post];
                                    let xs = &xrow[j * post..(j + 1) * post];
                                    let mut acc = 0.0;
                                    for (&gv2, &xvl) in src.iter().zip(xs) {
                                        acc += gv2 * xvl;
                                    }
                                    *o += acc;
                                }
                            }
                        });
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let c = self.nodes[x.0].value.cols();
                    let w = end - start;
                    self.acc(&mut grads, *x, |dst| {
                        for (orow, grow) in dst.chunks_mut(c).zip(g.data().chunks(w)) {
                            axpy(&mut orow[*start..*end], 1.0, grow);
                        }
                    });
                }
                Op::SumAll(x) => {
                    let gv = g.scalar_value();
                    self.acc(&mut grads, *x, |dst| {
                        for o in dst.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Tensor>], id: TensorId, f: F) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        f(slot.as_mut().expect("just initialized").data_mut());
    }
}

/// Gradients keyed by tape node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += a * s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    (pre, n, post)
}

fn softmax_lanes(data: &mut [f64], pre: usize, n: usize, post: usize) {
    for p in 0..pre {
        for q in 0..post {
            let base = p * n * post + q;
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..n {
                maxv = maxv.max(data[base + j * post]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (data[base + j * post] - maxv).exp();
                data[base + j * post] = e;
                z += e;
            }
            for j in 0..n {
                data[base + j * post] /= z;
            }
        }
    }
}

/// Maximum relative error between reverse-mode gradients and a central
/// finite-difference estimate, over up to `coords_per_param` sampled
/// coordinates of each parameter.
///
/// The relative error uses max(|g|, |g_hat|, 1e-8) as denominator. The
/// function is evaluated twice at the base point first; if the two values
/// disagree the oracle is invalid (non-deterministic f).
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    coords_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("finite_diff_check: epsilon must be > 0".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::Contract(
                "finite_diff_check: f must produce a scalar".into(),
            ));
        }
        Ok(v.scalar_value())
    };

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(format!(
            "two forward passes disagree: {base_a} vs {base_b}"
        )));
    }

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(
            "finite_diff_check: f must produce a scalar".into(),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let count = coords_per_param.min(n);
        let mut coords: Vec<usize> = if count == n {
            (0..n).collect()
        } else {
            (0..count).map(|_| rng.gen_range(0..n)).collect()
        };
        coords.sort_unstable();
        coords.dedup();
        let analytic = grads.get(ids[pi]);
        for &ci in &coords {
            let orig = p.data()[ci];
            perturbed[pi].data_mut()[ci] = orig + epsilon;
            let up = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig - epsilon;
            let down = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig;
            let est = (up - down) / (2.0 * epsilon);
            let g = analytic.map_or(0.0, |t| t.data()[ci]);
            let denom = g.abs().max(est.abs()).max(1e-8);
            worst = worst.max((g - est).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        crate::rng::derive(seed, crate::rng::stream::GRADCHECK, 0)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Independent oracle: plain triple loop, no shared code with the kernels.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let c = t.matmul(a, i2).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut r = rng(1);
        for &(m, k, n) in &[(3, 3, 3), (5, 7, 2), (64, 64, 64), (17, 33, 9)] {
            let a = rand_tensor(&[m, k], &mut r);
            let b = rand_tensor(&[k, n], &mut r);
            let mut t = Tape::new();
            let ai = t.constant(a.clone()).unwrap();
            let bi = t.constant(b.clone()).unwrap();
            let c = t.matmul(ai, bi).unwrap();
            let want = naive_matmul(&a, &b);
            assert!(max_rel(t.value(c), &want) < 1e-12, "{}x{}x{}", m, k, n);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_kernels_match_naive() {
        let mut r = rng(2);
        let a = rand_tensor(&[6, 4], &mut r);
        let b = rand_tensor(&[5, 4], &mut r); // b^T is 4x5
        let got = matmul_nt(&a, &b, 6, 4, 5);
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data_mut()[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        assert!(max_rel(&got, &naive_matmul(&a, &bt)) < 1e-12);

        let c = rand_tensor(&[6, 7], &mut r);
        let got = matmul_tn(&a, &c, 6, 4, 7); // a^T (4x6) * c (6x7)
        let mut at = Tensor::zeros(&[4, 6]);
        for i in 0..6 {
            for j in 0..4 {
                at.data_mut()[j * 6 + i] = a.data()[i * 4 + j];
            }
        }
        assert!(max_rel(&got, &naive_matmul(&at, &c)) < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y).data()[0] - 0.5).abs() < 1e-15);

        // max subtraction keeps huge inputs finite
        let x = t.constant(Tensor::from_vec(vec![1000.0, 1000.0])).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y).data()[0] - 0.5).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![0.0, 3.0f64.ln()])).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(3);
        for _ in 0..20 {
            let scale: f64 = r.gen_range(0.1..1e4);
            let x = Tensor::randn(&[4, 9], scale, &mut r);
            let mut t = Tape::new();
            let xi = t.constant(x).unwrap();
            let y = t.softmax(xi, 1).unwrap();
            for row in t.value(y).data().chunks(9) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swish_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![0.0, 1.0, 40.0])).unwrap();
        let y = t.swish(x).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.731_058_578_630_0049).abs() < 1e-12);
        assert!((d[2] - 40.0).abs() < 1e-9); // sigmoid saturates
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[3, 512])).unwrap();
        let loss = t.cross_entropy(logits, &[0, 7, 511], &[1.0, 1.0, 1.0]).unwrap();
        assert!((t.value(loss).scalar_value() - 512.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_perfect_prediction_limit() {
        let mut t = Tape::new();
        let mut l = Tensor::zeros(&[1, 4]);
        l.data_mut()[2] = 200.0; // huge margin on the correct class
        let li = t.constant(l).unwrap();
        let loss = t.cross_entropy(li, &[2], &[1.0]).unwrap();
        assert!(t.value(loss).scalar_value() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_semantics() {
        let mut r = rng(4);
        let logits = rand_tensor(&[2, 8], &mut r);
        let mut t = Tape::new();
        let li = t.constant(logits.clone()).unwrap();
        let both = t.cross_entropy(li, &[3, 5], &[1.0, 0.0]).unwrap();
        let row0 = t
            .constant(Tensor::new(vec![1, 8], logits.data()[..8].to_vec()).unwrap())
            .unwrap();
        let only = t.cross_entropy(row0, &[3], &[1.0]).unwrap();
        assert!((t.value(both).scalar_value() - t.value(only).scalar_value()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut t = Tape::new();
        let li = t.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(
            t.cross_entropy(li, &[4], &[1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_linear_map() {
        // loss = sum(W x): dW[i][j] = x[j] in every row
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap()).unwrap();
        let x = t.constant(Tensor::new(vec![3, 1], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        let grads = t.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_quadratic() {
        // loss = ||W||^2: grad = 2W
        let mut t = Tape::new();
        let wt = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = t.leaf(wt.clone()).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        for (g, v) in gw.data().iter().zip(wt.data()) {
            assert!((g - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_quadratic_is_nearly_exact() {
        // central differences are exact for quadratics up to rounding
        let mut r = rng(5);
        let p = Tensor::from_vec(vec![1.7]);
        let err = finite_diff_check(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                t.sum_all(sq)
            },
            &[p],
            1e-4,
            8,
            &mut r,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn finite_diff_flags_wrong_adjoint() {
        // Detaching one factor makes the analytic gradient x instead of 2x:
        // the check must report a large error (negative control).
        let mut r = rng(6);
        let p = Tensor::from_vec(vec![0.9, -1.3, 2.2]);
        let err = finite_diff_check(
            |t, ids| {
                let frozen = t.constant(t.value(ids[0]).clone())?;
                let sq = t.mul(ids[0], frozen)?;
                t.sum_all(sq)
            },
            &[p],
            1e-4,
            8,
            &mut r,
        )
        .unwrap();
        assert!(err > 1e-2, "err = {err}");
    }

    #[test]
    fn finite_diff_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let p = Tensor::from_vec(vec![1.0]);
        let mut r = rng(7);
        let res = finite_diff_check(
            |t, ids| {
                calls.set(calls.get() + 1.0);
                let noise = t.constant(Tensor::scalar(calls.get()))?;
                let y = t.mul(ids[0], noise)?;
                t.sum_all(y)
            },
            &[p],
            1e-4,
            4,
            &mut r,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        // One composite function per primitive, >= 50 sampled coordinates.
        let mut r = rng(8);
        let checks: Vec<(&str, f64)> = vec![
            ("add", {
                let a = rand_tensor(&[5, 11], &mut r);
                let b = rand_tensor(&[5, 11], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.add(ids[0], ids[1])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[a, b],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("add_bias", {
                let x = rand_tensor(&[9, 7], &mut r);
                let b = rand_tensor(&[7], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.add_bias(ids[0], ids[1])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[x, b],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("mul_scale", {
                let a = rand_tensor(&[6, 10], &mut r);
                let b = rand_tensor(&[6, 10], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.mul(ids[0], ids[1])?;
                        let y = t.scale(y, -1.75)?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[a, b],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("matmul", {
                let a = rand_tensor(&[6, 8], &mut r);
                let b = rand_tensor(&[8, 5], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.matmul(ids[0], ids[1])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[a, b],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("swish", {
                let x = rand_tensor(&[8, 8], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.swish(ids[0])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[x],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("softmax", {
                let x = rand_tensor(&[7, 9], &mut r);
                let probe = rand_tensor(&[7, 9], &mut r);
                finite_diff_check(
                    move |t, ids| {
                        let y = t.softmax(ids[0], 1)?;
                        let p = t.constant(probe.clone())?;
                        let y2 = t.mul(y, p)?;
                        t.sum_all(y2)
                    },
                    &[x],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("layer_norm", {
                let x = rand_tensor(&[6, 12], &mut r);
                let gn = rand_tensor(&[12], &mut r);
                let bs = rand_tensor(&[12], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.layer_norm(ids[0], ids[1], ids[2])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[x, gn, bs],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("embed_lookup", {
                let table = rand_tensor(&[10, 6], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.embed_lookup(ids[0], &[0, 3, 3, 9, 1, 7, 2, 8, 4, 6, 5])?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[table],
                    1e-5,
                    60,
                    &mut r,
                )
                .unwrap()
            }),
            ("prefix_concat", {
                let prefix = rand_tensor(&[3, 4], &mut r);
                let toks = rand_tensor(&[3 * 5, 4], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.prefix_concat(ids[0], ids[1], 5)?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[prefix, toks],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
            ("causal_attention", {
                let q = Tensor::randn(&[2 * 6, 8], 0.7, &mut r);
                let k = Tensor::randn(&[2 * 6, 8], 0.7, &mut r);
                let v = Tensor::randn(&[2 * 6, 8], 0.7, &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.causal_attention(ids[0], ids[1], ids[2], 2, 6)?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[q, k, v],
                    1e-5,
                    60,
                    &mut r,
                )
                .unwrap()
            }),
            ("cross_entropy", {
                let logits = rand_tensor(&[12, 7], &mut r);
                finite_diff_check(
                    |t, ids| {
                        t.cross_entropy(
                            ids[0],
                            &[0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4],
                            &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
                        )
                    },
                    &[logits],
                    1e-5,
                    60,
                    &mut r,
                )
                .unwrap()
            }),
            ("project_axis", {
                let x = rand_tensor(&[8, 6], &mut r);
                let d0 = rand_tensor(&[8], &mut r);
                let d1 = rand_tensor(&[6], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.project_axis(ids[0], ids[1], 0, 1)?;
                        let y = t.project_axis(y, ids[2], 1, 1)?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[x, d0, d1],
                    1e-5,
                    60,
                    &mut r,
                )
                .unwrap()
            }),
            ("slice_cols", {
                let x = rand_tensor(&[9, 10], &mut r);
                finite_diff_check(
                    |t, ids| {
                        let y = t.slice_cols(ids[0], 2, 7)?;
                        let y2 = t.mul(y, y)?;
                        t.sum_all(y2)
                    },
                    &[x],
                    1e-5,
                    55,
                    &mut r,
                )
                .unwrap()
            }),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn attention_is_causal() {
        // Perturbing row j of v must not change context rows < j.
        let mut r = rng(9);
        let q = rand_tensor(&[7, 4], &mut r);
        let k = rand_tensor(&[7, 4], &mut r);
        let v = rand_tensor(&[7, 4], &mut r);
        let run = |vv: &Tensor| {
            let mut t = Tape::new();
            let qi = t.constant(q.clone()).unwrap();
            let ki = t.constant(k.clone()).unwrap();
            let vi = t.constant(vv.clone()).unwrap();
            let c = t.causal_attention(qi, ki, vi, 2, 7).unwrap();
            t.value(c).clone()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        for c in 0..4 {
            v2.data_mut()[4 * 4 + c] += 3.0; // perturb position 4
        }
        let out = run(&v2);
        for row in 0..4 {
            for c in 0..4 {
                assert_eq!(base.data()[row * 4 + c], out.data()[row * 4 + c]);
            }
        }
        assert_ne!(base.data()[4 * 4], out.data()[4 * 4]);
    }

    #[test]
    fn finite_check_rejects_overflow() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(Tensor::from_vec(vec![f64::INFINITY])),
            Err(Error::NonFinite(_))
        ));
        let a = t.constant(Tensor::from_vec(vec![1e308])).unwrap();
        assert!(matches!(t.mul(a, a), Err(Error::NonFinite(_))));
    }
}
