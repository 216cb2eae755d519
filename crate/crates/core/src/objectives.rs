use rand::Rng;
use redbert_tensor::{Float, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

use crate::encoder::{LayerNorm, Linear};
use crate::error::{Error, Result};

/// Default width of the intent network in [`ProactiveHead`].
pub const INTENT_DIM: usize = 32;

/// Tolerance on teacher row sums accepted by [`distill_loss`].
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Loss plus the logits and log-probabilities it was computed from.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub logits: Var,
    pub log_probs: Var,
}

/// Row-wise softmax of `logits` over the last axis, as a plain tensor.
pub fn probabilities<T: Float>(g: &mut Graph<T>, logits: Var) -> Result<Tensor<T>> {
    let axis = g.shape(logits).len() - 1;
    let p = g.softmax(logits, axis)?;
    Ok(g.value(p).clone())
}

fn check_labels(labels: &[usize], num_classes: usize, what: &str) -> Result<()> {
    match labels.iter().position(|&y| y >= num_classes) {
        Some(i) => Err(Error::Data(format!(
            "{what} label {} at example {i} outside 0..{num_classes}",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Index-based cross-entropy over `[N, C]` logits, averaged over rows.
pub fn softmax_cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<LossOutput> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    let log_probs = g.log_softmax(logits, 1)?;
    let loss = g.nll(log_probs, labels)?;
    Ok(LossOutput {
        loss,
        logits,
        log_probs,
    })
}

/// Rows at position 0 of each sequence: `[B, L, W]` to `[B, W]`.
pub fn cls_rows<T: Float>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let [b, l, w] = shape[..] else {
        return Err(TensorError::Shape {
            op: "cls_rows",
            lhs: shape,
            rhs: vec![0, 0, 0],
        }
        .into());
    };
    let flat = g.reshape(features, &[b * l, w])?;
    let idx: Vec<usize> = (0..b).map(|i| i * l).collect();
    Ok(g.gather_rows(flat, &idx)?)
}

/// Selected `(sequence, position)` rows of `[B, L, W]` as `[N, W]`.
pub fn select_positions<T: Float>(g: &mut Graph<T>, features: Var, positions: &[(usize, usize)]) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let [b, l, w] = shape[..] else {
        return Err(TensorError::Shape {
            op: "select_positions",
            lhs: shape,
            rhs: vec![0, 0, 0],
        }
        .into());
    };
    let mut idx = Vec::with_capacity(positions.len());
    for &(s, p) in positions {
        if s >= b || p >= l {
            return Err(Error::Data(format!(
                "position ({s}, {p}) outside batch of {b} sequences of length {l}"
            )));
        }
        idx.push(s * l + p);
    }
    let flat = g.reshape(features, &[b * l, w])?;
    Ok(g.gather_rows(flat, &idx)?)
}

/// `P_NSP = softmax(h_CLS W_NSP + B_NSP)` over {not-next = 0, is-next = 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct NspHead {
    pub linear: Linear,
}

impl NspHead {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, in_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "nsp", in_dim, 2, rng)?,
        })
    }

    pub fn loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cls: Var,
        labels: &[usize],
    ) -> Result<LossOutput> {
        check_labels(labels, 2, "NSP")?;
        let logits = self.linear.forward(g, store, cls)?;
        softmax_cross_entropy(g, logits, labels)
    }

    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        self.linear.zero(store);
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.linear.ids().to_vec()
    }
}

/// Dense + GELU + LayerNorm transform, then a decoder tied to the token
/// embedding table with its own bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead {
    pub transform: Linear,
    pub norm: LayerNorm,
    /// Token embedding table `[V, hidden]`, shared with the encoder.
    pub decoder: ParamId,
    pub bias: ParamId,
    pub vocab_size: usize,
}

/// Masked-LM loss; `loss` is `None` when no position was masked.
#[derive(Clone, Copy, Debug)]
pub struct MlmOutput {
    pub loss: Option<LossOutput>,
    pub count: usize,
}

impl MlmHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        hidden: usize,
        token_embeddings: ParamId,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab_size = store.value(token_embeddings).shape()[0];
        Ok(Self {
            transform: Linear::new(store, "mlm.transform", in_dim, hidden, rng)?,
            norm: LayerNorm::new(store, "mlm.norm", hidden, eps)?,
            decoder: token_embeddings,
            bias: store.add("mlm.bias", Tensor::zeros(&[vocab_size]))?,
            vocab_size,
        })
    }

    /// Vocabulary logits for `[N, in_dim]` rows.
    pub fn logits<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rows: Var) -> Result<Var> {
        let t = self.transform.forward(g, store, rows)?;
        let t = g.gelu(t);
        let t = self.norm.forward(g, store, t)?;
        let e = g.param(store, self.decoder);
        let logits = g.matmul_nt(t, e)?;
        let b = g.param(store, self.bias);
        Ok(g.add(logits, b)?)
    }

    /// Cross-entropy averaged over masked positions only.
    pub fn loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        positions: &[(usize, usize)],
        labels: &[usize],
    ) -> Result<MlmOutput> {
        if positions.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} masked positions but {} labels",
                positions.len(),
                labels.len()
            )));
        }
        if positions.is_empty() {
            return Ok(MlmOutput { loss: None, count: 0 });
        }
        check_labels(labels, self.vocab_size, "MLM")?;
        let rows = select_positions(g, features, positions)?;
        let logits = self.logits(g, store, rows)?;
        Ok(MlmOutput {
            loss: Some(softmax_cross_entropy(g, logits, labels)?),
            count: positions.len(),
        })
    }

    /// Zeroes the transform and bias; logits become uniform.
    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        self.transform.zero(store);
        store.value_mut(self.norm.beta).fill(T::zero());
        store.value_mut(self.bias).fill(T::zero());
    }

    /// Parameters owned by the head (the tied table is excluded).
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.transform.ids().to_vec();
        ids.extend(self.norm.ids());
        ids.push(self.bias);
        ids
    }
}

/// Soft-target cross-entropy `-sum t log softmax(s / temperature)`, averaged
/// over rows. Teacher rows must be probability vectors.
pub fn distill_loss<T: Float>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_probs: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(student_logits).to_vec();
    if shape.len() != 2 || teacher_probs.shape() != shape.as_slice() {
        return Err(TensorError::Shape {
            op: "distill_loss",
            lhs: shape,
            rhs: teacher_probs.shape().to_vec(),
        }
        .into());
    }
    for (i, row) in teacher_probs.rows().enumerate() {
        let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
        if row.iter().any(|x| !(x.as_f64() >= 0.0)) || (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Data(format!(
                "teacher row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    let scaled = if temperature == 1.0 {
        student_logits
    } else {
        g.scale(student_logits, T::of_f64(1.0 / temperature))
    };
    let log_s = g.log_softmax(scaled, 1)?;
    let t = g.constant(teacher_probs.clone());
    let prod = g.mul(t, log_s)?;
    let total = g.sum(prod);
    Ok(g.scale(total, T::of_f64(-1.0 / shape[0] as f64)))
}

/// Entropy of each row of a probability matrix, averaged over rows.
pub fn mean_entropy<T: Float>(probs: &Tensor<T>) -> f64 {
    let rows = probs.rows().count().max(1);
    probs
        .rows()
        .map(|r| {
            r.iter()
                .map(|p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / rows as f64
}

/// `softmax(x W_CLS + B_CLS)` over a sequence summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            linear: Linear::new(store, name, in_dim, num_classes, rng)?,
            num_classes,
        })
    }

    pub fn logits<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.linear.forward(g, store, x)
    }

    pub fn loss<T: Float>(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<LossOutput> {
        check_labels(labels, self.num_classes, "class")?;
        softmax_cross_entropy(g, logits, labels)
    }

    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        self.linear.zero(store);
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.linear.ids().to_vec()
    }
}

/// Per-position `softmax(h W_ST + B_ST)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerHead {
    pub linear: Linear,
    pub num_tags: usize,
}

impl TaggerHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        num_tags: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_tags < 2 {
            return Err(Error::Config(format!("tagger needs at least 2 tags, got {num_tags}")));
        }
        Ok(Self {
            linear: Linear::new(store, name, in_dim, num_tags, rng)?,
            num_tags,
        })
    }

    /// Logits `[B, L, num_tags]`.
    pub fn logits<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        self.linear.forward(g, store, features)
    }

    /// Cross-entropy over positions whose tag is `Some`; pads and special
    /// tokens carry `None`. Returns `None` when nothing is tagged.
    pub fn loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        logits: Var,
        tags: &[Vec<Option<usize>>],
    ) -> Result<Option<LossOutput>> {
        let shape = g.shape(logits).to_vec();
        let [b, l, k] = shape[..] else {
            return Err(TensorError::Shape {
                op: "tag_loss",
                lhs: shape,
                rhs: vec![0, 0, self.num_tags],
            }
            .into());
        };
        if tags.len() != b {
            return Err(Error::Data(format!("{} tag sequences for a batch of {b}", tags.len())));
        }
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for (s, seq) in tags.iter().enumerate() {
            if seq.len() != l {
                return Err(Error::Data(format!(
                    "tag sequence {s} has length {}, sequence length is {l}",
                    seq.len()
                )));
            }
            for (p, t) in seq.iter().enumerate() {
                if let Some(t) = *t {
                    positions.push((s, p));
                    labels.push(t);
                }
            }
        }
        if positions.is_empty() {
            return Ok(None);
        }
        check_labels(&labels, k, "tag")?;
        let rows = select_positions(g, logits, &positions)?;
        Ok(Some(softmax_cross_entropy(g, rows, &labels)?))
    }

    pub fn zero<T: Float>(&self, store: &mut ParamStore<T>) {
        self.linear.zero(store);
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.linear.ids().to_vec()
    }
}

/// Next-intent classifier over `hi_CLS = [h_CLS ; NN(X_I)]`, where `NN` is
/// two affine layers with a GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct ProactiveHead {
    pub intent_in: Linear,
    pub intent_out: Linear,
    pub classifier: ClassifierHead,
    pub num_intents: usize,
    pub intent_dim: usize,
}

impl ProactiveHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        num_intents: usize,
        intent_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_intents == 0 || intent_dim == 0 {
            return Err(Error::Config("intent network sizes must be positive".into()));
        }
        Ok(Self {
            intent_in: Linear::new(store, "proactive.intent_in", num_intents, intent_dim, rng)?,
            intent_out: Linear::new(store, "proactive.intent_out", intent_dim, intent_dim, rng)?,
            classifier: ClassifierHead::new(store, "proactive.classifier", in_dim + intent_dim, num_classes, rng)?,
            num_intents,
            intent_dim,
        })
    }

    /// `I = NN(X_I)` for one-hot rows `[B, num_intents]`.
    pub fn intent_features<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        intents: &Tensor<T>,
    ) -> Result<Var> {
        check_one_hot(intents, self.num_intents)?;
        let x = g.constant(intents.clone());
        let h = self.intent_in.forward(g, store, x)?;
        let h = g.gelu(h);
        self.intent_out.forward(g, store, h)
    }

    /// Logits over next intents from `h_CLS` rows `[B, W]`.
    pub fn logits<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cls: Var,
        intents: &Tensor<T>,
    ) -> Result<Var> {
        let i = self.intent_features(g, store, intents)?;
        if g.shape(i)[0] != g.shape(cls)[0] {
            return Err(Error::Data(format!(
                "{} intent rows for {} sequences",
                g.shape(i)[0],
                g.shape(cls)[0]
            )));
        }
        let hi = g.concat_last(&[cls, i])?;
        self.classifier.logits(g, store, hi)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.intent_in.ids().to_vec();
        ids.extend(self.intent_out.ids());
        ids.extend(self.classifier.ids());
        ids
    }
}

/// One-hot rows `[indices.len(), n]`.
pub fn one_hot<T: Float>(indices: &[usize], n: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[indices.len(), n]);
    for (row, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(Error::Data(format!("one-hot index {i} outside 0..{n}")));
        }
        t.data_mut()[row * n + i] = T::one();
    }
    Ok(t)
}

fn check_one_hot<T: Float>(x: &Tensor<T>, n: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != n {
        return Err(Error::Data(format!(
            "intent input has shape {:?}, expected [_, {n}]",
            x.shape()
        )));
    }
    for (i, row) in x.rows().enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != n - 1 {
            return Err(Error::Data(format!("intent row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Loss weights for the joint pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointWeights {
    pub nsp: f64,
    pub mlm: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self { nsp: 1.0, mlm: 1.0 }
    }
}

/// `w_nsp * L_NSP + w_mlm * L_MLM`; the MLM term is dropped when nothing in
/// the batch was masked.
pub fn joint_loss<T: Float>(
    g: &mut Graph<T>,
    nsp: &LossOutput,
    mlm: &MlmOutput,
    weights: JointWeights,
) -> Result<Var> {
    let a = g.scale(nsp.loss, T::of_f64(weights.nsp));
    match &mlm.loss {
        Some(m) => {
            let b = g.scale(m.loss, T::of_f64(weights.mlm));
            Ok(g.add(a, b)?)
        }
        None => Ok(a),
    }
}
