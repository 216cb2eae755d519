//! Dependency-embedding branch: a lookup into a pretrained table `DW`, one
//! side transformer block over those vectors, and per-position concatenation
//! `c_t = [t_t ; h_t]` with the encoder states.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use redbert_tensor::{truncated_normal, Float, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

use crate::encoder::{Batch, Ctx, Encoder, ModelConfig, TransformerBlock, INIT_STD};
use crate::error::{io_err, Error, Result};
use crate::tokenizer::Vocab;

/// Vectors read from a word2vec text file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl WordVectors {
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(w, _)| w == word)
            .map(|(_, v)| v.as_slice())
    }

    /// word2vec text format: a `count dim` header, then `word v1 .. vdim`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.entries.len(), self.dim);
        for (word, v) in &self.entries {
            out.push_str(word);
            for x in v {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

pub fn parse_word2vec(text: &str) -> Result<WordVectors> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("embedding file is empty".into()))?;
    let mut fields = header.split_whitespace();
    let parse_header = |f: Option<&str>| -> Result<usize> {
        f.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad embedding header {header:?}, expected \"count dim\"")))
    };
    let count = parse_header(fields.next())?;
    let dim = parse_header(fields.next())?;
    let mut entries = Vec::with_capacity(count);
    for (n, line) in lines {
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default().to_string();
        let v = parts
            .map(|x| {
                x.parse::<f32>()
                    .map_err(|_| Error::Data(format!("line {}: bad number {x:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if v.len() != dim {
            return Err(Error::Data(format!(
                "line {}: {} values for {word:?}, header says {dim}",
                n + 1,
                v.len()
            )));
        }
        entries.push((word, v));
    }
    if entries.len() != count {
        return Err(Error::Data(format!(
            "header declares {count} vectors, file holds {}",
            entries.len()
        )));
    }
    Ok(WordVectors { dim, entries })
}

pub fn load_word2vec(path: &Path) -> Result<WordVectors> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_word2vec(&text)
}

/// Aligns file vectors to vocabulary rows. Tokens absent from the file
/// (including `##` continuation pieces) get truncated-normal rows; the
/// `[PAD]` row is zero. Returns the table and the number of rows copied.
pub fn align_dep_table<R: Rng>(
    vocab: &Vocab,
    vectors: Option<&WordVectors>,
    dep_dim: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, usize)> {
    if let Some(v) = vectors {
        if v.dim != dep_dim {
            return Err(Error::Config(format!(
                "embedding file dimension {} does not match dep_dim {dep_dim}",
                v.dim
            )));
        }
    }
    let mut table: Tensor<f32> = truncated_normal(&[vocab.len(), dep_dim], INIT_STD, rng);
    let mut copied = 0;
    if let Some(v) = vectors {
        let index: std::collections::HashMap<&str, &[f32]> =
            v.entries.iter().map(|(w, x)| (w.as_str(), x.as_slice())).collect();
        for (id, tok) in vocab.tokens().iter().enumerate() {
            if id == vocab.pad_id() {
                continue;
            }
            if let Some(row) = index.get(tok.as_str()) {
                table.data_mut()[id * dep_dim..(id + 1) * dep_dim].copy_from_slice(row);
                copied += 1;
            }
        }
    }
    let pad = vocab.pad_id();
    table.data_mut()[pad * dep_dim..(pad + 1) * dep_dim].fill(0.0);
    Ok((table, copied))
}

/// The dependency table `DW` plus the side transformer over it.
#[derive(Clone, Debug, PartialEq)]
pub struct DepBranch {
    pub table: ParamId,
    pub positions: ParamId,
    pub block: TransformerBlock,
    pub dep_dim: usize,
    pub dropout: f64,
}

impl DepBranch {
    /// Registers a randomly initialized table (pad row zero and pinned).
    pub fn new<T: Float, R: Rng>(
        config: &ModelConfig,
        pad_id: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dep_dim;
        let mut init: Tensor<T> = truncated_normal(&[config.vocab_size, d], INIT_STD, rng);
        init.data_mut()[pad_id * d..(pad_id + 1) * d].fill(T::zero());
        let table = store.add("deps.table", init)?;
        store.pin_rows(table, &[pad_id]);
        store.set_requires_grad(table, config.finetune_deps);
        let positions = store.add(
            "deps.position_embeddings",
            truncated_normal(&[config.max_position, d], INIT_STD, rng),
        )?;
        let block = TransformerBlock::new(
            store,
            "deps.side",
            d,
            config.dep_heads,
            config.dep_ff_size,
            config.layer_norm_eps,
            config.dropout,
            rng,
        )?;
        Ok(Self {
            table,
            positions,
            block,
            dep_dim: d,
            dropout: config.dropout,
        })
    }

    /// Replaces the table values, keeping the pad row at zero.
    pub fn set_table<T: Float>(&self, store: &mut ParamStore<T>, table: &Tensor<f32>, pad_id: usize) -> Result<()> {
        let current = store.value(self.table).shape().to_vec();
        if table.shape() != current.as_slice() {
            return Err(TensorError::Shape {
                op: "set_dep_table",
                lhs: current,
                rhs: table.shape().to_vec(),
            }
            .into());
        }
        let mut t: Tensor<T> = table.cast();
        let d = self.dep_dim;
        t.data_mut()[pad_id * d..(pad_id + 1) * d].fill(T::zero());
        *store.value_mut(self.table) = t;
        Ok(())
    }

    /// `D = lookup(X, DW)`, shape `[B, L, dep_dim]`.
    pub fn lookup<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch) -> Result<Var> {
        let rows = store.value(self.table).shape()[0];
        if let Some(i) = batch.ids.iter().position(|&id| id >= rows) {
            return Err(Error::Data(format!(
                "token id {} out of range (dependency table {rows}) at sequence {} position {}",
                batch.ids[i],
                i / batch.seq_len,
                i % batch.seq_len
            )));
        }
        let table = g.param(store, self.table);
        let d = g.gather_rows(table, &batch.ids)?;
        Ok(g.reshape(d, &[batch.batch_size, batch.seq_len, self.dep_dim])?)
    }

    /// `T = Transformer(D)` with the branch's own position embeddings.
    pub fn side_transform<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        d: Var,
        batch: &Batch,
        bias: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let shape = g.shape(d).to_vec();
        if shape != [batch.batch_size, batch.seq_len, self.dep_dim] {
            return Err(TensorError::Shape {
                op: "side_transform",
                lhs: shape,
                rhs: vec![batch.batch_size, batch.seq_len, self.dep_dim],
            }
            .into());
        }
        let pos_table = g.param(store, self.positions);
        let pos = g.gather_rows(pos_table, &batch.positions())?;
        let pos = g.reshape(pos, &shape)?;
        let x = g.add(d, pos)?;
        let x = ctx.dropout(g, x, self.dropout)?;
        self.block.forward(g, store, x, bias, ctx)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.table, self.positions];
        ids.extend(self.block.ids());
        ids
    }
}

/// `C = [T ; H]` along the feature axis, `T` first.
pub fn inject<T: Float>(g: &mut Graph<T>, t: Var, h: Var) -> Result<Var> {
    let (ts, hs) = (g.shape(t).to_vec(), g.shape(h).to_vec());
    if ts.len() != hs.len() || ts[..ts.len() - 1] != hs[..hs.len() - 1] {
        return Err(TensorError::Shape {
            op: "inject",
            lhs: ts,
            rhs: hs,
        }
        .into());
    }
    Ok(g.concat_last(&[t, h])?)
}

/// Encoder outputs handed to the heads.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// Encoder states `H`, `[B, L, hidden]`.
    pub hidden: Var,
    /// Side-transformer states `T`, present under injection.
    pub deps: Option<Var>,
    /// What the heads consume: `C` under injection, otherwise `H`.
    pub output: Var,
}

/// Encoder plus the optional dependency branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub encoder: Encoder,
    pub deps: Option<DepBranch>,
}

impl Backbone {
    pub fn new<T: Float, R: Rng>(
        config: &ModelConfig,
        pad_id: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(config, store, rng)?;
        let deps = if config.inject_deps {
            Some(DepBranch::new(config, pad_id, store, rng)?)
        } else {
            None
        };
        Ok(Self { encoder, deps })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn output_width(&self) -> usize {
        self.config().output_width()
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        ctx: &mut Ctx,
    ) -> Result<Features> {
        let bias = batch.attention_bias(g)?;
        let hidden = self.encoder.forward(g, store, batch, bias, ctx)?;
        match &self.deps {
            None => Ok(Features {
                hidden,
                deps: None,
                output: hidden,
            }),
            Some(branch) => {
                let d = branch.lookup(g, store, batch)?;
                let t = branch.side_transform(g, store, d, batch, bias, ctx)?;
                let output = inject(g, t, hidden)?;
                Ok(Features {
                    hidden,
                    deps: Some(t),
                    output,
                })
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.ids();
        if let Some(d) = &self.deps {
            ids.extend(d.ids());
        }
        ids
    }
}
