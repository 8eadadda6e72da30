//! Task-conditioned weight generators.
//!
//! The core mechanism maps a source model's weight tables to a smaller
//! model's tables through sparse diagonal projection matrices
//! P[i][j] = p_j * delta(i, floor(s*j)) and Q[i][j] = q_i * delta(j, floor(s*i)),
//! with the diagonals p(t), q(t) produced from the task vector by shallow
//! MLPs (a shared first linear map, one second layer per table). Every
//! projected output element therefore mixes a 2^k x 2^k block of source
//! elements, and gradients flow both into the generator MLPs and back into
//! the source weights.
//!
//! The module also carries the reference generators the projection is
//! verified against: a dense 4-index generator (test oracle) and the
//! additive weight-manifold family (linear, modular, low-rank).

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::transformer::{
    table_shapes, TransformerConfig, WeightIds, WeightSet, WeightTree,
};
use serde::{Deserialize, Serialize};

/// Task vector dimension of the bundled synthetic dataset.
pub const SYNTH_TASK_DIM: usize = 18;

/// The task identifier t: a finite real vector of fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector(Vec<f64>);

impl TaskVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Contract("task vector must be non-empty".into()));
        }
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task vector".into()));
        }
        Ok(TaskVector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Which generator family produced (or would produce) a weight set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Sparse diagonal P/Q projection of a source model (the core mechanism).
    DiagonalProjection,
    /// Literal 4-index linear generator; test-only reference.
    DenseOracle,
    /// Additive delta linear in t.
    LinearManifold,
    /// Additive delta as a coefficient-weighted sum of fixed modules.
    Modular,
    /// Additive low-rank delta per weight matrix.
    LowRank,
}

/// Whether per-dimension tables (embeddings, positional table, layer norms,
/// unembedding) are projected from the source or owned per target size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorTablePolicy {
    Projected,
    Owned,
}

/// How one source table is covered by the operator.
#[derive(Clone, Debug, PartialEq)]
enum HeadKind {
    /// Dense [in, out] table plus its bias: p over out, q over in.
    Matrix { in_dim: usize, out_dim: usize },
    /// One p diagonal over the table's embedding axis.
    VectorP { len: usize },
    /// One q diagonal over the table's embedding axis (unembedding).
    VectorQ { len: usize },
}

impl HeadKind {
    fn p_len(&self) -> usize {
        match self {
            HeadKind::Matrix { out_dim, .. } => *out_dim,
            HeadKind::VectorP { len } => *len,
            HeadKind::VectorQ { .. } => 0,
        }
    }
    fn q_len(&self) -> usize {
        match self {
            HeadKind::Matrix { in_dim, .. } => *in_dim,
            HeadKind::VectorP { .. } => 0,
            HeadKind::VectorQ { len } => *len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TableHead {
    /// Name of the source table this head generates diagonals for.
    table: String,
    kind: HeadKind,
    /// Second linear layer [r, p_len + q_len] and its bias.
    weight: Tensor,
    bias: Tensor,
}

/// Per-size task-conditioned projection operator for one source model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOperator {
    pub source_config: TransformerConfig,
    /// Additional halvings: target multiplier k = source k + levels.
    pub levels: u32,
    pub dim_t: usize,
    pub inner_dim: usize,
    pub policy: VectorTablePolicy,
    /// Shared first linear map [dim_t, r]; no bias, so t = 0 passes swish(0) = 0.
    first: Tensor,
    heads: Vec<TableHead>,
    /// Target-size tables owned by the operator under the Owned policy.
    owned: Vec<(String, Tensor)>,
}

/// Which sources tables get diagonal heads, in canonical table order.
fn head_plan(source_config: &TransformerConfig) -> Vec<(String, HeadKind)> {
    let mut plan = Vec::new();
    table_shapes(source_config).for_each(|name, shape| {
        if name == "unembedding" {
            plan.push((name.to_string(), HeadKind::VectorQ { len: shape[0] }));
        } else if shape.len() == 2 && !name.starts_with("prefix") {
            if name.contains(".attn.w") || name.contains(".mlp.w") {
                plan.push((
                    name.to_string(),
                    HeadKind::Matrix {
                        in_dim: shape[0],
                        out_dim: shape[1],
                    },
                ));
            } else {
                // token and positional embeddings: rows live in model space
                plan.push((name.to_string(), HeadKind::VectorP { len: shape[1] }));
            }
        } else if shape.len() == 1 && (name.contains("ln") || name.contains("final_ln")) {
            plan.push((name.to_string(), HeadKind::VectorP { len: shape[0] }));
        }
        // attention/MLP biases share their matrix head's p diagonal
    });
    plan
}

fn vector_table(name: &str) -> bool {
    !(name.contains(".attn.") || name.contains(".mlp."))
}

impl ProjectionOperator {
    /// Fresh operator. The second-layer weights start near zero with all
    /// diagonal entries biased at 1, so the initial projection is a plain
    /// unscaled block sum and the projected model is non-degenerate.
    pub fn new(
        source_config: &TransformerConfig,
        levels: u32,
        dim_t: usize,
        inner_dim: usize,
        policy: VectorTablePolicy,
        seed: u64,
    ) -> Result<Self> {
        source_config.validate()?;
        let target = source_config
            .with_multiplier_log2(source_config.multiplier_log2 + levels);
        target.validate()?;
        if dim_t == 0 || inner_dim == 0 {
            return Err(Error::Config("operator needs dim_t > 0 and r > 0".into()));
        }
        let mut r = rng::derive(seed, stream::INIT, 1);
        let first = Tensor::randn(&[dim_t, inner_dim], 1.0 / (dim_t as f64).sqrt(), &mut r);
        let mut heads = Vec::new();
        for (table, kind) in head_plan(source_config) {
            if policy == VectorTablePolicy::Owned && vector_table(&table) {
                continue;
            }
            let len = kind.p_len() + kind.q_len();
            heads.push(TableHead {
                table,
                kind,
                weight: Tensor::randn(&[inner_dim, len], 1e-3, &mut r),
                bias: Tensor::full(&[len], 1.0),
            });
        }
        let mut owned = Vec::new();
        if policy == VectorTablePolicy::Owned {
            table_shapes(&target).for_each(|name, shape| {
                if vector_table(name) && !name.starts_with("prefix") {
                    let init = if name.ends_with(".gain") {
                        Tensor::full(shape, 1.0)
                    } else if shape.len() == 1 {
                        Tensor::zeros(shape)
                    } else {
                        Tensor::randn(shape, crate::transformer::INIT_STD, &mut r)
                    };
                    owned.push((name.to_string(), init));
                }
            });
        }
        Ok(ProjectionOperator {
            source_config: source_config.clone(),
            levels,
            dim_t,
            inner_dim,
            policy,
            first,
            heads,
            owned,
        })
    }

    /// Exact identity operator: levels = 0, zero MLP weights, unit diagonals.
    pub fn identity(source_config: &TransformerConfig, dim_t: usize, inner_dim: usize) -> Result<Self> {
        let mut op = Self::new(
            source_config,
            0,
            dim_t,
            inner_dim,
            VectorTablePolicy::Projected,
            0,
        )?;
        for h in &mut op.heads {
            h.weight = Tensor::zeros(h.weight.shape());
            h.bias = Tensor::full(h.bias.shape(), 1.0);
        }
        Ok(op)
    }

    pub fn target_config(&self) -> TransformerConfig {
        self.source_config
            .with_multiplier_log2(self.source_config.multiplier_log2 + self.levels)
    }

    /// Exact number of trainable scalars in the operator.
    pub fn param_count(&self) -> usize {
        let mut n = self.first.len();
        for h in &self.heads {
            n += h.weight.len() + h.bias.len();
        }
        for (_, t) in &self.owned {
            n += t.len();
        }
        n
    }

    /// Visit every trainable table (shared map, per-table heads, owned
    /// tables) in canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("op.first", &self.first);
        for h in &self.heads {
            f(&format!("op.head.{}.w", h.table), &h.weight);
            f(&format!("op.head.{}.b", h.table), &h.bias);
        }
        for (name, t) in &self.owned {
            f(&format!("op.owned.{name}"), t);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("op.first", &mut self.first);
        for h in &mut self.heads {
            f(&format!("op.head.{}.w", h.table), &mut h.weight);
            f(&format!("op.head.{}.b", h.table), &mut h.bias);
        }
        for (name, t) in &mut self.owned {
            f(&format!("op.owned.{name}"), t);
        }
    }

    /// Replace parameters from a canonical-order list (checkpoint loading).
    pub fn load_params(&mut self, tables: &[(String, Tensor)]) -> Result<()> {
        let mut want = Vec::new();
        self.for_each_param(|name, t| want.push((name.to_string(), t.shape().to_vec())));
        if want.len() != tables.len() {
            return Err(Error::Format(format!(
                "operator expects {} tables, got {}",
                want.len(),
                tables.len()
            )));
        }
        for ((wname, wshape), (name, t)) in want.iter().zip(tables) {
            if wname != name || wshape != t.shape() {
                return Err(Error::Format(format!(
                    "operator table mismatch: expected {wname} {wshape:?}, got {name} {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tables.iter();
        self.for_each_param_mut(|_, t| {
            *t = it.next().expect("length checked").1.clone();
        });
        Ok(())
    }

    /// The diagonals (p, q) this operator generates for one table.
    pub fn generate_diagonals(&self, table: &str, t: &TaskVector) -> Result<(Vec<f64>, Vec<f64>)> {
        if t.dim() != self.dim_t {
            return Err(Error::Contract(format!(
                "task vector dimension {} != operator dim_t {}",
                t.dim(),
                self.dim_t
            )));
        }
        let head = self
            .heads
            .iter()
            .find(|h| h.table == table)
            .ok_or_else(|| Error::Lookup(format!("no diagonal head for table {table}")))?;
        let r = self.inner_dim;
        // h = swish(t . first); out = h . weight + bias
        let mut hidden = vec![0.0; r];
        for (i, &ti) in t.as_slice().iter().enumerate() {
            for (j, h) in hidden.iter_mut().enumerate() {
                *h += ti * self.first.data()[i * r + j];
            }
        }
        for h in hidden.iter_mut() {
            let s = 1.0 / (1.0 + (-*h).exp());
            *h *= s;
        }
        let len = head.bias.len();
        let mut out = head.bias.data().to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += hj * head.weight.data()[j * len + c];
            }
        }
        let split = head.kind.p_len();
        let q = out.split_off(split);
        Ok((out, q))
    }
}

/// Dense realization of P: [sN x N] with P[i][j] = p_j at row floor(s*j).
pub fn build_p(p: &[f64], levels: u32) -> Result<Tensor> {
    let n = p.len();
    if n % (1usize << levels) != 0 {
        return Err(Error::Contract(format!(
            "build_p: {n} rows not divisible by 2^{levels}"
        )));
    }
    let sn = n >> levels;
    let mut out = Tensor::zeros(&[sn, n]);
    for (j, &v) in p.iter().enumerate() {
        out.data_mut()[(j >> levels) * n + j] = v;
    }
    Ok(out)
}

/// Dense realization of Q: [N x sN] with Q[i][j] = q_i at column floor(s*i).
pub fn build_q(q: &[f64], levels: u32) -> Result<Tensor> {
    let n = q.len();
    if n % (1usize << levels) != 0 {
        return Err(Error::Contract(format!(
            "build_q: {n} rows not divisible by 2^{levels}"
        )));
    }
    let sn = n >> levels;
    let mut out = Tensor::zeros(&[n, sn]);
    for (i, &v) in q.iter().enumerate() {
        out.data_mut()[i * sn + (i >> levels)] = v;
    }
    Ok(out)
}

/// Sparse contraction P W1 Q (and P b1) without materializing P or Q.
///
/// `w1` is [out, in]; p has length out, q has length in; the result is
/// [out >> levels, in >> levels].
pub fn project_table(
    w1: &Tensor,
    b1: Option<&Tensor>,
    p: &[f64],
    q: &[f64],
    levels: u32,
) -> Result<(Tensor, Option<Tensor>)> {
    if w1.shape().len() != 2 {
        return Err(Error::Shape("project_table: w1 must be 2-D".into()));
    }
    if p.len() != w1.shape()[0] || q.len() != w1.shape()[1] {
        return Err(Error::Shape(format!(
            "project_table: diagonals ({}, {}) vs table {:?}",
            p.len(),
            q.len(),
            w1.shape()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.constant(w1.clone())?;
    let pd = tape.constant(Tensor::from_vec(p.to_vec()))?;
    let qd = tape.constant(Tensor::from_vec(q.to_vec()))?;
    let half = tape.project_axis(w, pd, 0, levels)?;
    let ws = tape.project_axis(half, qd, 1, levels)?;
    let bs = match b1 {
        None => None,
        Some(b) => {
            if b.len() != p.len() {
                return Err(Error::Shape(format!(
                    "project_table: bias length {} vs p length {}",
                    b.len(),
                    p.len()
                )));
            }
            let bi = tape.constant(b.clone())?;
            let bsi = tape.project_axis(bi, pd, 0, levels)?;
            Some(tape.value(bsi).clone())
        }
    };
    Ok((tape.value(ws).clone(), bs))
}

/// Operator tables registered on a tape.
pub struct OperatorIds {
    pub first: TensorId,
    heads: Vec<(TensorId, TensorId)>,
    owned: Vec<TensorId>,
}

/// Register the operator's tables on a tape (leaves when trainable).
pub fn register_operator(
    tape: &mut Tape,
    op: &ProjectionOperator,
    trainable: bool,
) -> Result<OperatorIds> {
    let mut push = |t: &Tensor, tape: &mut Tape| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let first = push(&op.first, tape)?;
    let mut heads = Vec::with_capacity(op.heads.len());
    for h in &op.heads {
        let w = push(&h.weight, tape)?;
        let b = push(&h.bias, tape)?;
        heads.push((w, b));
    }
    let mut owned = Vec::with_capacity(op.owned.len());
    for (_, t) in &op.owned {
        owned.push(push(t, tape)?);
    }
    Ok(OperatorIds {
        first,
        heads,
        owned,
    })
}

/// Generate the full projected weight set for one task on the tape.
///
/// Every output table is a differentiable function of the operator MLPs and
/// the source tables, so one backward pass reaches both.
pub fn project_model_on_tape(
    tape: &mut Tape,
    op: &ProjectionOperator,
    op_ids: &OperatorIds,
    source_ids: &WeightIds,
    t: &TaskVector,
) -> Result<WeightIds> {
    if t.dim() != op.dim_t {
        return Err(Error::Contract(format!(
            "task vector dimension {} != operator dim_t {}",
            t.dim(),
            op.dim_t
        )));
    }
    let levels = op.levels;
    // shared trunk: h = swish(t . first), shape [1, r]
    let t_in = tape.constant(Tensor::new(vec![1, op.dim_t], t.as_slice().to_vec())?)?;
    let pre = tape.matmul(t_in, op_ids.first)?;
    let hidden = tape.swish(pre)?;

    // per-table diagonals, keyed by source table name
    let mut diag_p: Vec<(&str, TensorId)> = Vec::new();
    let mut diag_q: Vec<(&str, TensorId)> = Vec::new();
    for (h, &(w, b)) in op.heads.iter().zip(&op_ids.heads) {
        let lin = tape.matmul(hidden, w)?;
        let out = tape.add_bias(lin, b)?;
        let split = h.kind.p_len();
        let total = split + h.kind.q_len();
        if split > 0 {
            diag_p.push((&h.table, tape.slice_cols(out, 0, split)?));
        }
        if split < total {
            diag_q.push((&h.table, tape.slice_cols(out, split, total)?));
        }
    }
    let find = |list: &[(&str, TensorId)], name: &str| -> Result<TensorId> {
        list.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Config(format!("operator missing diagonal head for {name}")))
    };
    let mut owned_it = op.owned.iter().zip(&op_ids.owned);
    let mut next_owned = |name: &str| -> Result<TensorId> {
        let ((oname, _), &id) = owned_it
            .next()
            .ok_or_else(|| Error::Config(format!("operator missing owned table for {name}")))?;
        if oname != name {
            return Err(Error::Config(format!(
                "owned table order mismatch: expected {name}, found {oname}"
            )));
        }
        Ok(id)
    };

    source_ids.try_map_named(|name, &src| {
        if name.starts_with("prefix") {
            return Err(Error::Config(
                "cannot project a conditional source model".into(),
            ));
        }
        if vector_table(name) {
            if op.policy == VectorTablePolicy::Owned {
                return next_owned(name);
            }
            return match name {
                "unembedding" => {
                    let q = find(&diag_q, name)?;
                    tape.project_axis(src, q, 0, levels)
                }
                "token_embedding" | "positional_embedding" => {
                    let p = find(&diag_p, name)?;
                    tape.project_axis(src, p, 1, levels)
                }
                _ => {
                    // layer norm gains and biases
                    let p = find(&diag_p, name)?;
                    tape.project_axis(src, p, 0, levels)
                }
            };
        }
        // dense tables [in, out] and their biases
        if name.ends_with(".wq")
            || name.ends_with(".wk")
            || name.ends_with(".wv")
            || name.ends_with(".wo")
            || name.ends_with(".w_in")
            || name.ends_with(".w_out")
        {
            let p = find(&diag_p, name)?;
            let q = find(&diag_q, name)?;
            let half = tape.project_axis(src, q, 0, levels)?;
            tape.project_axis(half, p, 1, levels)
        } else {
            // bias: projected with its matrix's p diagonal
            let matrix = bias_owner(name);
            let p = find(&diag_p, &matrix)?;
            tape.project_axis(src, p, 0, levels)
        }
    })
}

fn bias_owner(bias_name: &str) -> String {
    // layers.N.attn.bq -> layers.N.attn.wq ; layers.N.mlp.b_in -> layers.N.mlp.w_in
    if let Some(idx) = bias_name.rfind(".b") {
        let (head, tail) = bias_name.split_at(idx);
        format!("{head}.w{}", &tail[2..])
    } else {
        bias_name.to_string()
    }
}

/// One-shot generation of the projected model's weights for task t.
pub fn project_model(
    op: &ProjectionOperator,
    source: &WeightSet,
    t: &TaskVector,
) -> Result<WeightSet> {
    if source.config != op.source_config {
        return Err(Error::Config(
            "source model config differs from the operator's source config".into(),
        ));
    }
    let mut tape = Tape::new();
    let source_ids = crate::transformer::register_weights(&mut tape, source, false)?;
    let op_ids = register_operator(&mut tape, op, false)?;
    let out_ids = project_model_on_tape(&mut tape, op, &op_ids, &source_ids, t)?;
    let tables: WeightTree<Tensor> =
        out_ids.try_map_named(|_, &id| Ok(tape.value(id).clone()))?;
    Ok(WeightSet {
        config: op.target_config(),
        tables,
    })
}

/// Modular-network construction: the projected table as a coefficient-
/// weighted sum of the 2^k x 2^k grid of equally-sized blocks of w1.
pub fn modular_as_projection(w1: &Tensor, block_coeffs: &Tensor, levels: u32) -> Result<Tensor> {
    if w1.shape().len() != 2 {
        return Err(Error::Shape("modular_as_projection: w1 must be 2-D".into()));
    }
    let grid = 1usize << levels;
    if block_coeffs.len() != grid * grid {
        return Err(Error::Contract(format!(
            "modular_as_projection: need {} coefficients, got {}",
            grid * grid,
            block_coeffs.len()
        )));
    }
    let (rows, cols) = (w1.shape()[0], w1.shape()[1]);
    if rows % grid != 0 || cols % grid != 0 {
        return Err(Error::Contract(format!(
            "modular_as_projection: {rows}x{cols} not divisible into a {grid}x{grid} grid"
        )));
    }
    let (h, w) = (rows / grid, cols / grid);
    let mut out = Tensor::zeros(&[h, w]);
    for a in 0..grid {
        for b in 0..grid {
            let c = block_coeffs.data()[a * grid + b];
            if c == 0.0 {
                continue;
            }
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[i * w + j] += c * w1.data()[(i + a * h) * cols + (j + b * w)];
                }
            }
        }
    }
    Ok(out)
}

/// Additive delta linear in t: delta_alpha = sum_i S[alpha][i] t_i.
pub fn linear_manifold_delta(s_matrix: &Tensor, t: &TaskVector) -> Result<Tensor> {
    if s_matrix.shape().len() != 2 || s_matrix.shape()[1] != t.dim() {
        return Err(Error::Shape(format!(
            "linear_manifold_delta: S {:?} vs task dim {}",
            s_matrix.shape(),
            t.dim()
        )));
    }
    let (rows, cols) = (s_matrix.shape()[0], s_matrix.shape()[1]);
    let mut out = Tensor::zeros(&[rows]);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &tj) in t.as_slice().iter().enumerate() {
            acc += s_matrix.data()[i * cols + j] * tj;
        }
        *o = acc;
    }
    Ok(out)
}

/// Additive delta as a sum of modules: delta_alpha = sum_k S_k[alpha] eta_k.
pub fn modular_delta(modules: &[Tensor], eta: &[f64]) -> Result<Tensor> {
    if modules.is_empty() || modules.len() != eta.len() {
        return Err(Error::Contract(format!(
            "modular_delta: {} modules vs {} coefficients",
            modules.len(),
            eta.len()
        )));
    }
    let shape = modules[0].shape().to_vec();
    if modules.iter().any(|m| m.shape() != shape) {
        return Err(Error::Shape("modular_delta: module shapes differ".into()));
    }
    let mut out = Tensor::zeros(&shape);
    for (m, &c) in modules.iter().zip(eta) {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// Additive low-rank delta: delta_W = L R with L [n, r], R [r, m].
pub fn low_rank_delta(l: &Tensor, r: &Tensor) -> Result<Tensor> {
    if l.shape().len() != 2 || r.shape().len() != 2 || l.shape()[1] != r.shape()[0] {
        return Err(Error::Shape(format!(
            "low_rank_delta: {:?} x {:?}",
            l.shape(),
            r.shape()
        )));
    }
    Ok(crate::tensor::matmul(
        l,
        r,
        l.shape()[0],
        l.shape()[1],
        r.shape()[1],
    ))
}

/// Literal 4-index linear generator (test oracle, tiny shapes only):
/// Ws[i][j] = sum_kl VW[i][j][k][l] W1[k][l] + VB[i][j],
/// bs[i] = sum_k UW[i][k] b1[k] + UB[i].
pub fn dense_general_generator(
    vw: &Tensor,
    vb: &Tensor,
    uw: &Tensor,
    ub: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if w1.shape().len() != 2 || vw.shape().len() != 4 {
        return Err(Error::Shape(
            "dense_general_generator: W1 must be 2-D, VW 4-D".into(),
        ));
    }
    if w1.shape().iter().any(|&e| e > 16) {
        return Err(Error::Contract(
            "dense_general_generator: oracle is restricted to shapes <= 16x16".into(),
        ));
    }
    let (so, si) = (vw.shape()[0], vw.shape()[1]);
    let (o, i) = (vw.shape()[2], vw.shape()[3]);
    if w1.shape() != [o, i] || vb.shape() != [so, si] {
        return Err(Error::Shape(format!(
            "dense_general_generator: VW {:?} / VB {:?} vs W1 {:?}",
            vw.shape(),
            vb.shape(),
            w1.shape()
        )));
    }
    let sb = uw.shape()[0];
    if uw.shape() != [sb, b1.len()] || ub.len() != sb {
        return Err(Error::Shape("dense_general_generator: UW/UB vs b1".into()));
    }
    let mut ws = Tensor::zeros(&[so, si]);
    for a in 0..so {
        for b in 0..si {
            let mut acc = vb.data()[a * si + b];
            for k in 0..o {
                for l in 0..i {
                    acc += vw.data()[((a * si + b) * o + k) * i + l] * w1.data()[k * i + l];
                }
            }
            ws.data_mut()[a * si + b] = acc;
        }
    }
    let mut bs = Tensor::zeros(&[sb]);
    for c in 0..sb {
        let mut acc = ub.data()[c];
        for k in 0..b1.len() {
            acc += uw.data()[c * b1.len() + k] * b1.data()[k];
        }
        bs.data_mut()[c] = acc;
    }
    Ok((ws, bs))
}
