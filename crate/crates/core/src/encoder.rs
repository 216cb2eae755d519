use rand::Rng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::{truncated_normal, Float, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedPair;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    /// Packed sequence length used by data pipelines.
    pub max_len: usize,
    /// Rows of the position table; at least `max_len`.
    pub max_position: usize,
    pub dropout: f64,
    pub use_segment_embeddings: bool,
    pub num_segments: usize,
    /// LayerNorm over the summed embeddings.
    pub embedding_norm: bool,
    pub layer_norm_eps: f64,
    /// Dependency-embedding branch (DeDBERT) on or off.
    pub inject_deps: bool,
    pub dep_dim: usize,
    pub dep_heads: usize,
    pub dep_ff_size: usize,
    /// Whether the dependency table receives gradient updates.
    pub finetune_deps: bool,
}

impl ModelConfig {
    /// Small configuration for CPU experiments.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 256,
            max_len: 128,
            max_position: 128,
            dropout: 0.1,
            use_segment_embeddings: true,
            num_segments: 2,
            embedding_norm: true,
            layer_norm_eps: 1e-12,
            inject_deps: false,
            dep_dim: 300,
            dep_heads: 4,
            dep_ff_size: 1200,
            finetune_deps: true,
        }
    }

    /// BERT-base widths with a 512-row position table.
    pub fn full_size(vocab_size: usize, num_layers: usize) -> Self {
        Self {
            num_layers,
            hidden_size: 768,
            num_heads: 12,
            ff_size: 3072,
            max_position: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn with_injection(mut self, on: bool) -> Self {
        self.inject_deps = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if self.max_position < self.max_len {
            return Err(Error::Config(format!(
                "max_position {} smaller than max_len {}",
                self.max_position, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.use_segment_embeddings && self.num_segments == 0 {
            return Err(Error::Config("num_segments must be positive".into()));
        }
        if self.inject_deps {
            if self.dep_dim == 0 || self.dep_heads == 0 || self.dep_ff_size == 0 {
                return Err(Error::Config("dependency branch sizes must be positive".into()));
            }
            if self.dep_dim % self.dep_heads != 0 {
                return Err(Error::Config(format!(
                    "dep_dim {} not divisible by dep_heads {}",
                    self.dep_dim, self.dep_heads
                )));
            }
        }
        Ok(())
    }

    /// Feature width the heads see: hidden, plus dep_dim under injection.
    pub fn output_width(&self) -> usize {
        if self.inject_deps {
            self.hidden_size + self.dep_dim
        } else {
            self.hidden_size
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward settings: dropout is active only in [`Mode::Train`].
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { mode: Mode::Train, rng }
    }

    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        Self { mode: Mode::Eval, rng }
    }

    pub fn dropout<T: Float>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        match self.mode {
            Mode::Train if p > 0.0 => Ok(g.dropout(x, p, self.rng)?),
            _ => Ok(x),
        }
    }
}

/// Equal-length packed sequences flattened batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a TokenizedPair>) -> Result<Self> {
        let mut batch = Batch {
            batch_size: 0,
            seq_len: 0,
            ids: Vec::new(),
            segment_ids: Vec::new(),
            attention_mask: Vec::new(),
        };
        for p in pairs {
            if batch.batch_size == 0 {
                batch.seq_len = p.len();
            } else if p.len() != batch.seq_len {
                return Err(Error::Data(format!(
                    "ragged batch: sequence {} has length {}, expected {}",
                    batch.batch_size,
                    p.len(),
                    batch.seq_len
                )));
            }
            if p.segment_ids.len() != p.len() || p.attention_mask.len() != p.len() {
                return Err(Error::Data(format!("sequence {} has misaligned fields", batch.batch_size)));
            }
            batch.ids.extend_from_slice(&p.ids);
            batch.segment_ids.extend_from_slice(&p.segment_ids);
            batch.attention_mask.extend_from_slice(&p.attention_mask);
            batch.batch_size += 1;
        }
        if batch.batch_size == 0 || batch.seq_len == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(batch)
    }

    /// Additive attention bias `[B, 1, 1, L]`: 0 for real keys, -inf for pads.
    pub fn attention_bias<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        let data = self
            .attention_mask
            .iter()
            .map(|&m| if m == 1 { T::zero() } else { T::neg_infinity() })
            .collect();
        let bias = Tensor::new(&[self.batch_size, 1, 1, self.seq_len], data)?;
        Ok(g.constant(bias))
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch_size).flat_map(|_| 0..self.seq_len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in, out]`, truncated-normal; bias zero.
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), truncated_normal(&[in_dim, out_dim], INIT_STD, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).fill(T::zero());
        store.value_mut(self.bias).fill(T::zero());
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
            eps,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, self.eps)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Post-LN encoder block: self-attention and a GELU feed-forward, each
/// followed by dropout, a residual connection, and LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub num_heads: usize,
    pub width: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        num_heads: usize,
        ff_size: usize,
        eps: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.attention.query"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.attention.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.attention.value"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.attention.output"), width, width, rng)?,
            attention_norm: LayerNorm::new(store, &format!("{name}.attention.norm"), width, eps)?,
            ff_in: Linear::new(store, &format!("{name}.ff.in"), width, ff_size, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff.out"), ff_size, width, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff.norm"), width, eps)?,
            num_heads,
            width,
            dropout,
        })
    }

    /// `x`: `[B, L, W]`; `bias`: `[B, 1, 1, L]` from [`Batch::attention_bias`].
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        bias: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, l, w] = shape[..] else {
            return Err(Error::Tensor(redbert_tensor::TensorError::Shape {
                op: "transformer_block",
                lhs: shape.clone(),
                rhs: vec![0, 0, self.width],
            }));
        };
        if w != self.width {
            return Err(Error::Tensor(redbert_tensor::TensorError::Shape {
                op: "transformer_block",
                lhs: shape,
                rhs: vec![b, l, self.width],
            }));
        }
        let heads = self.num_heads;
        let dh = w / heads;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, l, heads, dh])?;
            Ok(g.permute(v, &[0, 2, 1, 3])?)
        };
        let q = self.query.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = self.key.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = self.value.forward(g, store, x)?;
        let v = split(g, v)?;

        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, T::of_f64(1.0 / (dh as f64).sqrt()));
        let scores = g.add(scores, bias)?;
        let probs = g.softmax(scores, 3)?;
        let probs = ctx.dropout(g, probs, self.dropout)?;
        let context = g.matmul(probs, v)?;
        let context = g.permute(context, &[0, 2, 1, 3])?;
        let context = g.reshape(context, &[b, l, w])?;
        let attended = self.output.forward(g, store, context)?;
        let attended = ctx.dropout(g, attended, self.dropout)?;
        let x = g.add(x, attended)?;
        let x = self.attention_norm.forward(g, store, x)?;

        let hidden = self.ff_in.forward(g, store, x)?;
        let hidden = g.gelu(hidden);
        let out = self.ff_out.forward(g, store, hidden)?;
        let out = ctx.dropout(g, out, self.dropout)?;
        let x = g.add(x, out)?;
        self.ff_norm.forward(g, store, x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lin in [&self.query, &self.key, &self.value, &self.output] {
            ids.extend(lin.ids());
        }
        ids.extend(self.attention_norm.ids());
        ids.extend(self.ff_in.ids());
        ids.extend(self.ff_out.ids());
        ids.extend(self.ff_norm.ids());
        ids
    }
}

/// Token + position (+ segment) embeddings followed by stacked blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub token_embeddings: ParamId,
    pub position_embeddings: ParamId,
    pub segment_embeddings: Option<ParamId>,
    pub embedding_norm: Option<LayerNorm>,
    pub layers: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new<T: Float, R: Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let token_embeddings = store.add(
            "encoder.token_embeddings",
            truncated_normal(&[config.vocab_size, h], INIT_STD, rng),
        )?;
        let position_embeddings = store.add(
            "encoder.position_embeddings",
            truncated_normal(&[config.max_position, h], INIT_STD, rng),
        )?;
        let segment_embeddings = if config.use_segment_embeddings {
            Some(store.add(
                "encoder.segment_embeddings",
                truncated_normal(&[config.num_segments, h], INIT_STD, rng),
            )?)
        } else {
            None
        };
        let embedding_norm = if config.embedding_norm {
            Some(LayerNorm::new(store, "encoder.embedding_norm", h, config.layer_norm_eps)?)
        } else {
            None
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.layer{i}"),
                    h,
                    config.num_heads,
                    config.ff_size,
                    config.layer_norm_eps,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            token_embeddings,
            position_embeddings,
            segment_embeddings,
            embedding_norm,
            layers,
        })
    }

    /// Rejects ids outside the vocabulary and sequences longer than the
    /// position table.
    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_position {
            return Err(Error::Data(format!(
                "sequence length {} exceeds position table {}",
                batch.seq_len, self.config.max_position
            )));
        }
        if let Some(i) = batch.ids.iter().position(|&id| id >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {} out of range (vocab {}) at sequence {} position {}",
                batch.ids[i],
                self.config.vocab_size,
                i / batch.seq_len,
                i % batch.seq_len
            )));
        }
        if self.segment_embeddings.is_some() {
            if let Some(i) = batch.segment_ids.iter().position(|&s| s >= self.config.num_segments) {
                return Err(Error::Data(format!(
                    "segment id {} out of range at sequence {} position {}",
                    batch.segment_ids[i],
                    i / batch.seq_len,
                    i % batch.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Hidden states `H`, shape `[B, L, hidden]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        bias: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let h = self.config.hidden_size;
        let table = g.param(store, self.token_embeddings);
        let mut x = g.gather_rows(table, &batch.ids)?;
        let pos_table = g.param(store, self.position_embeddings);
        let pos = g.gather_rows(pos_table, &batch.positions())?;
        x = g.add(x, pos)?;
        if let Some(seg) = self.segment_embeddings {
            let seg_table = g.param(store, seg);
            let s = g.gather_rows(seg_table, &batch.segment_ids)?;
            x = g.add(x, s)?;
        }
        let mut x = g.reshape(x, &[batch.batch_size, batch.seq_len, h])?;
        if let Some(norm) = &self.embedding_norm {
            x = norm.forward(g, store, x)?;
        }
        x = ctx.dropout(g, x, self.config.dropout)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, bias, ctx)?;
        }
        Ok(x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embeddings, self.position_embeddings];
        ids.extend(self.segment_embeddings);
        if let Some(n) = &self.embedding_norm {
            ids.extend(n.ids());
        }
        for layer in &self.layers {
            ids.extend(layer.ids());
        }
        ids
    }

    pub fn count_parameters<T: Float>(&self, store: &ParamStore<T>) -> usize {
        self.ids().iter().map(|&id| store.value(id).numel()).sum()
    }
}
