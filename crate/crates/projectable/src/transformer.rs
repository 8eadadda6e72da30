//! GPT-2-style decoder-only autoregressive model over discrete tokens.
//!
//! Weights live outside the model as a plain value (`WeightSet`) so that
//! generated weights can be plugged in; the forward pass is a pure function
//! of (config, weights, input, seed). The embedding width is `d * s` with
//! the multiplier s = 2^-k, so one config describes a whole family of
//! sizes.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Embedding width of the s = 1 family member.
    pub base_embed_dim: usize,
    /// k in s = 2^-k.
    pub multiplier_log2: u32,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_expansion: usize,
    pub dropout_rate: f64,
    /// For conditional models: dimension of the task vector mapped to the
    /// prefix embedding at position 0.
    pub prefix_input_dim: Option<usize>,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_embed_dim % (1usize << self.multiplier_log2) != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by 2^{}",
                self.base_embed_dim, self.multiplier_log2
            )));
        }
        let ds = self.embed_dim();
        if ds == 0 || ds % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {ds} not divisible into {} heads",
                self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_layers == 0 {
            return Err(Error::Config("zero-sized model".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// s = 2^-k as a float.
    pub fn multiplier(&self) -> f64 {
        1.0 / (1u64 << self.multiplier_log2) as f64
    }

    /// Actual embedding width d * s.
    pub fn embed_dim(&self) -> usize {
        self.base_embed_dim >> self.multiplier_log2
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim() * self.mlp_expansion
    }

    /// The same architecture at a different size multiplier.
    pub fn with_multiplier_log2(&self, k: u32) -> Self {
        TransformerConfig {
            multiplier_log2: k,
            ..self.clone()
        }
    }
}

/// One value per weight table, generic so the same structure can carry
/// tensors, tape ids or shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTree<T> {
    pub token_embedding: T,
    pub positional_embedding: T,
    pub layers: Vec<LayerTree<T>>,
    pub final_ln_gain: T,
    pub final_ln_bias: T,
    pub unembedding: T,
    /// Conditional models only: (weight [dim_t, ds], bias [ds]).
    pub prefix_map: Option<(T, T)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTree<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub mlp_in: T,
    pub mlp_in_bias: T,
    pub mlp_out: T,
    pub mlp_out_bias: T,
}

impl<T> LayerTree<T> {
    fn try_map_named<U, F>(&self, prefix: &str, f: &mut F) -> Result<LayerTree<U>>
    where
        F: FnMut(&str, &T) -> Result<U>,
    {
        Ok(LayerTree {
            ln1_gain: f(&format!("{prefix}.ln1.gain"), &self.ln1_gain)?,
            ln1_bias: f(&format!("{prefix}.ln1.bias"), &self.ln1_bias)?,
            wq: f(&format!("{prefix}.attn.wq"), &self.wq)?,
            bq: f(&format!("{prefix}.attn.bq"), &self.bq)?,
            wk: f(&format!("{prefix}.attn.wk"), &self.wk)?,
            bk: f(&format!("{prefix}.attn.bk"), &self.bk)?,
            wv: f(&format!("{prefix}.attn.wv"), &self.wv)?,
            bv: f(&format!("{prefix}.attn.bv"), &self.bv)?,
            wo: f(&format!("{prefix}.attn.wo"), &self.wo)?,
            bo: f(&format!("{prefix}.attn.bo"), &self.bo)?,
            ln2_gain: f(&format!("{prefix}.ln2.gain"), &self.ln2_gain)?,
            ln2_bias: f(&format!("{prefix}.ln2.bias"), &self.ln2_bias)?,
            mlp_in: f(&format!("{prefix}.mlp.w_in"), &self.mlp_in)?,
            mlp_in_bias: f(&format!("{prefix}.mlp.b_in"), &self.mlp_in_bias)?,
            mlp_out: f(&format!("{prefix}.mlp.w_out"), &self.mlp_out)?,
            mlp_out_bias: f(&format!("{prefix}.mlp.b_out"), &self.mlp_out_bias)?,
        })
    }
}

impl<T> WeightTree<T> {
    /// Visit every table in canonical order, producing a parallel tree.
    pub fn try_map_named<U, F>(&self, mut f: F) -> Result<WeightTree<U>>
    where
        F: FnMut(&str, &T) -> Result<U>,
    {
        let token_embedding = f("token_embedding", &self.token_embedding)?;
        let positional_embedding = f("positional_embedding", &self.positional_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.try_map_named(&format!("layers.{i}"), &mut f)?);
        }
        Ok(WeightTree {
            token_embedding,
            positional_embedding,
            layers,
            final_ln_gain: f("final_ln.gain", &self.final_ln_gain)?,
            final_ln_bias: f("final_ln.bias", &self.final_ln_bias)?,
            unembedding: f("unembedding", &self.unembedding)?,
            prefix_map: match &self.prefix_map {
                None => None,
                Some((w, b)) => Some((f("prefix.weight", w)?, f("prefix.bias", b)?)),
            },
        })
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.try_map_named(|name, t| {
            f(name, t);
            Ok(())
        })
        .expect("infallible visitor");
    }

    pub fn table_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}

/// Shapes of every table, fully determined by the config. This is the
/// single authority that init, parameter counting and deserialization
/// validate against.
pub fn table_shapes(config: &TransformerConfig) -> WeightTree<Vec<usize>> {
    let d = config.embed_dim();
    let m = config.mlp_dim();
    let layer = LayerTree {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        mlp_in: vec![d, m],
        mlp_in_bias: vec![m],
        mlp_out: vec![m, d],
        mlp_out_bias: vec![d],
    };
    WeightTree {
        token_embedding: vec![config.vocab_size, d],
        positional_embedding: vec![config.max_seq_len, d],
        layers: vec![layer; config.num_layers],
        final_ln_gain: vec![d],
        final_ln_bias: vec![d],
        unembedding: vec![d, config.vocab_size],
        prefix_map: config.prefix_input_dim.map(|t| (vec![t, d], vec![d])),
    }
}

/// Exact total number of scalars across all weight tables.
pub fn param_count(config: &TransformerConfig) -> usize {
    let mut total = 0;
    table_shapes(config).for_each(|_, shape| total += shape.iter().product::<usize>());
    total
}

/// The full set of named weight tables of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub config: TransformerConfig,
    pub tables: WeightTree<Tensor>,
}

/// Scaled-normal init for matrices, zeros for biases, ones for norm gains;
/// bitwise deterministic for a fixed (config, seed).
pub fn init_weights(config: &TransformerConfig, seed: u64) -> Result<WeightSet> {
    config.validate()?;
    let mut r = rng::derive(seed, stream::INIT, 0);
    let tables =
        table_shapes(config).try_map_named(|name, shape| Ok(init_table(name, shape, &mut r)))?;
    Ok(WeightSet {
        config: config.clone(),
        tables,
    })
}

fn init_table(name: &str, shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".gain") {
        Tensor::full(shape, 1.0)
    } else if shape.len() == 1 {
        // biases and norm offsets start at zero
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, INIT_STD, r)
    }
}

/// A tokenized sequence, with an optional conditioning embedding occupying
/// position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub prefix_embedding: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn plain(tokens: Vec<u32>) -> Self {
        TokenSequence {
            tokens,
            prefix_embedding: None,
        }
    }
}

/// Weight tables registered on a tape.
pub type WeightIds = WeightTree<TensorId>;

/// Register every table on the tape, as leaves (trainable) or constants.
pub fn register_weights(tape: &mut Tape, w: &WeightSet, trainable: bool) -> Result<WeightIds> {
    w.tables.try_map_named(|_, t| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// How the conditioning prefix of a batch is supplied.
pub enum PrefixSource<'a> {
    /// No prefix: plain unconditional sequences.
    None,
    /// Raw per-sample embedding vectors (already in model space).
    Embedded(Vec<Vec<f64>>),
    /// Task vectors mapped through the model's learned prefix table.
    FromTask(&'a [Vec<f64>]),
}

/// Tape-level forward pass. All sequences must have equal length; returns
/// the logits node of shape [batch * rows_per_sample, vocab] together with
/// rows_per_sample (sequence length plus one when a prefix is present).
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &TransformerConfig,
    w: &WeightIds,
    tokens: &[Vec<u32>],
    prefix: PrefixSource,
    train_mode: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(TensorId, usize)> {
    let batch = tokens.len();
    if batch == 0 {
        return Err(Error::Contract("forward: empty batch".into()));
    }
    let seq = tokens[0].len();
    if seq == 0 || tokens.iter().any(|t| t.len() != seq) {
        return Err(Error::Contract(
            "forward: sequences must be non-empty and equal length".into(),
        ));
    }
    let v = config.vocab_size;
    for t in tokens {
        if let Some(&bad) = t.iter().find(|&&tok| tok as usize >= v) {
            return Err(Error::Contract(format!(
                "forward: token {bad} outside vocabulary of {v}"
            )));
        }
    }
    let has_prefix = !matches!(prefix, PrefixSource::None);
    let rows_per_sample = seq + usize::from(has_prefix);
    if rows_per_sample > config.max_seq_len {
        return Err(Error::Contract(format!(
            "forward: effective length {rows_per_sample} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let d = config.embed_dim();

    // token + positional embeddings
    let flat: Vec<u32> = tokens.iter().flatten().copied().collect();
    let tok_emb = tape.embed_lookup(w.token_embedding, &flat)?;
    let mut x = match prefix {
        PrefixSource::None => tok_emb,
        PrefixSource::Embedded(rows) => {
            if rows.len() != batch || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Contract(
                    "forward: prefix embeddings must be one length-ds vector per sample".into(),
                ));
            }
            let data: Vec<f64> = rows.into_iter().flatten().collect();
            let p = tape.constant(Tensor::new(vec![batch, d], data)?)?;
            tape.prefix_concat(p, tok_emb, seq)?
        }
        PrefixSource::FromTask(tasks) => {
            let Some((pw, pb)) = w.prefix_map else {
                return Err(Error::Config(
                    "forward: task prefix requested but model has no prefix table".into(),
                ));
            };
            let dim_t = tape.value(pw).rows();
            if tasks.len() != batch || tasks.iter().any(|t| t.len() != dim_t) {
                return Err(Error::Contract(format!(
                    "forward: need one length-{dim_t} task vector per sample"
                )));
            }
            let data: Vec<f64> = tasks.iter().flatten().copied().collect();
            let t_in = tape.constant(Tensor::new(vec![batch, dim_t], data)?)?;
            let proj = tape.matmul(t_in, pw)?;
            let p = tape.add_bias(proj, pb)?;
            tape.prefix_concat(p, tok_emb, seq)?
        }
    };
    let pos_ids: Vec<u32> = (0..batch)
        .flat_map(|_| 0..rows_per_sample as u32)
        .collect();
    let pos = tape.embed_lookup(w.positional_embedding, &pos_ids)?;
    x = tape.add(x, pos)?;
    x = apply_dropout(tape, x, config, train_mode, dropout_rng)?;

    for layer in &w.layers {
        // pre-norm attention
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = tape.matmul(h, layer.wq)?;
        let q = tape.add_bias(q, layer.bq)?;
        let k = tape.matmul(h, layer.wk)?;
        let k = tape.add_bias(k, layer.bk)?;
        let val = tape.matmul(h, layer.wv)?;
        let val = tape.add_bias(val, layer.bv)?;
        let ctx = tape.causal_attention(q, k, val, config.num_heads, rows_per_sample)?;
        let o = tape.matmul(ctx, layer.wo)?;
        let o = tape.add_bias(o, layer.bo)?;
        let o = apply_dropout(tape, o, config, train_mode, dropout_rng)?;
        x = tape.add(x, o)?;
        // pre-norm MLP
        let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let a = tape.matmul(h2, layer.mlp_in)?;
        let a = tape.add_bias(a, layer.mlp_in_bias)?;
        let a = tape.swish(a)?;
        let m = tape.matmul(a, layer.mlp_out)?;
        let m = tape.add_bias(m, layer.mlp_out_bias)?;
        let m = apply_dropout(tape, m, config, train_mode, dropout_rng)?;
        x = tape.add(x, m)?;
    }
    let xf = tape.layer_norm(x, w.final_ln_gain, w.final_ln_bias)?;
    let logits = tape.matmul(xf, w.unembedding)?;
    Ok((logits, rows_per_sample))
}

fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    config: &TransformerConfig,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let p = config.dropout_rate;
    if !train_mode || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let inv = 1.0 / keep;
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?)?;
    tape.mul(x, mask)
}

/// Next-token targets and loss weights for one batch.
///
/// Position i predicts token i+1; when a prefix is present, the prefix
/// position predicts token 0 and is included; the final position has no
/// target.
pub fn targets_and_weights(tokens: &[Vec<u32>], has_prefix: bool) -> (Vec<u32>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for t in tokens {
        if has_prefix {
            targets.extend_from_slice(t);
            targets.push(0);
            weights.extend(std::iter::repeat(1.0).take(t.len()));
            weights.push(0.0);
        } else {
            targets.extend_from_slice(&t[1..]);
            targets.push(0);
            weights.extend(std::iter::repeat(1.0).take(t.len() - 1));
            weights.push(0.0);
        }
    }
    (targets, weights)
}

/// Tape-level mean next-token NLL in nats per predicted token.
pub fn loss_on_tape(
    tape: &mut Tape,
    config: &TransformerConfig,
    w: &WeightIds,
    tokens: &[Vec<u32>],
    prefix: PrefixSource,
    train_mode: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let has_prefix = !matches!(prefix, PrefixSource::None);
    if !has_prefix && tokens.iter().any(|t| t.len() < 2) {
        return Err(Error::Contract(
            "loss: unconditional sequences need at least two tokens".into(),
        ));
    }
    let (logits, _) = forward_on_tape(tape, config, w, tokens, prefix, train_mode, dropout_rng)?;
    let (targets, weights) = targets_and_weights(tokens, has_prefix);
    tape.cross_entropy(logits, &targets, &weights)
}

fn batch_views(batch: &[TokenSequence]) -> Result<(Vec<Vec<u32>>, PrefixSource<'static>)> {
    let tokens: Vec<Vec<u32>> = batch.iter().map(|s| s.tokens.clone()).collect();
    let with_prefix = batch
        .iter()
        .filter(|s| s.prefix_embedding.is_some())
        .count();
    let prefix = if with_prefix == 0 {
        PrefixSource::None
    } else if with_prefix == batch.len() {
        PrefixSource::Embedded(
            batch
                .iter()
                .map(|s| s.prefix_embedding.clone().expect("checked"))
                .collect(),
        )
    } else {
        return Err(Error::Contract(
            "batch mixes sequences with and without prefix embeddings".into(),
        ));
    };
    Ok((tokens, prefix))
}

/// Causal logits for a batch of sequences, shape [batch, rows, vocab].
/// Deterministic given the seed; dropout is active only in train mode.
pub fn forward_logits(
    config: &TransformerConfig,
    weights: &WeightSet,
    batch: &[TokenSequence],
    train_mode: bool,
    seed: u64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register_weights(&mut tape, weights, false)?;
    let (tokens, prefix) = batch_views(batch)?;
    let mut drop_rng = rng::derive(seed, stream::DROPOUT, 0);
    let (logits, rows) = forward_on_tape(
        &mut tape, config, &ids, &tokens, prefix, train_mode, &mut drop_rng,
    )?;
    tape.value(logits)
        .clone()
        .reshaped(vec![batch.len(), rows, config.vocab_size])
}

/// Mean next-token NLL in nats per token for a batch.
pub fn sequence_loss(
    config: &TransformerConfig,
    weights: &WeightSet,
    batch: &[TokenSequence],
    train_mode: bool,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = register_weights(&mut tape, weights, false)?;
    let (tokens, prefix) = batch_views(batch)?;
    let mut drop_rng = rng::derive(seed, stream::DROPOUT, 0);
    let loss = loss_on_tape(
        &mut tape, config, &ids, &tokens, prefix, train_mode, &mut drop_rng,
    )?;
    Ok(tape.value(loss).scalar_value())
}

/// Autoregressive sampling: greedy argmax when `greedy`, else categorical.
///
/// A conditional model predicts token 0 from its prefix position. An
/// unconditional model has no position that was trained to predict token 0,
/// so its first token comes from the model's position-0 output when fed a
/// fixed start probe (token 0) — deterministic and model-driven.
pub fn sample_tokens(
    config: &TransformerConfig,
    weights: &WeightSet,
    prefix_embedding: Option<Vec<f64>>,
    len: usize,
    greedy: bool,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut r = rng::derive(seed, stream::EVAL, 1);
    let mut tokens: Vec<u32> = Vec::with_capacity(len);
    for step in 0..len {
        let probe = if step == 0 { vec![0u32] } else { tokens.clone() };
        let seqs = vec![TokenSequence {
            tokens: probe,
            prefix_embedding: prefix_embedding.clone(),
        }];
        let logits = forward_logits(config, weights, &seqs, false, seed)?;
        // With a prefix, row i predicts token i; without, row i predicts
        // token i+1 (and row 0 fed the start probe stands in for token 0).
        let row = match (prefix_embedding.is_some(), step) {
            (true, s) => s,
            (false, 0) => 0,
            (false, s) => s - 1,
        };
        let v = config.vocab_size;
        let row_logits = &logits.data()[row * v..(row + 1) * v];
        tokens.push(pick_token(row_logits, greedy, &mut r));
    }
    Ok(tokens)
}

fn pick_token(logits: &[f64], greedy: bool, r: &mut ChaCha8Rng) -> u32 {
    if greedy {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expd: Vec<f64> = logits.iter().map(|&x| (x - maxv).exp()).collect();
    let z: f64 = expd.iter().sum();
    let mut u = r.gen::<f64>() * z;
    for (i, &e) in expd.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (expd.len() - 1) as u32
}
