use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
use crate::datapipe::TrainingInstance;
use crate::depinject::{align_dep_table, Backbone, Features, WordVectors};
use crate::encoder::{Batch, Ctx, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{
    cls_rows, joint_loss, one_hot, ClassifierHead, JointWeights, LossOutput, MlmHead, MlmOutput, NspHead, ProactiveHead,
    TaggerHead, INTENT_DIM,
};
use crate::tasks::{EncodedExample, Scheme, TaskKind};
use crate::tokenizer::Vocab;

/// Backbone plus the two pretraining heads. Holds parameter ids only, so
/// the same structure drives stores of any float type.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainNet {
    pub backbone: Backbone,
    pub nsp: NspHead,
    pub mlm: MlmHead,
}

/// Graph handles from one pretraining forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PretrainOutput {
    pub total: Var,
    pub nsp: LossOutput,
    pub mlm: MlmOutput,
    pub features: Features,
}

impl PretrainNet {
    pub fn new<T: Float, R: rand::Rng>(
        config: &ModelConfig,
        pad_id: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(config, pad_id, store, rng)?;
        let width = backbone.output_width();
        let nsp = NspHead::new(store, width, rng)?;
        let mlm = MlmHead::new(
            store,
            width,
            config.hidden_size,
            backbone.encoder.token_embeddings,
            config.layer_norm_eps,
            rng,
        )?;
        Ok(Self { backbone, nsp, mlm })
    }

    /// Joint NSP + MLM loss over a batch of instances.
    pub fn loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instances: &[&TrainingInstance],
        weights: JointWeights,
        ctx: &mut Ctx,
    ) -> Result<PretrainOutput> {
        let batch = Batch::from_pairs(instances.iter().map(|i| &i.pair))?;
        let features = self.backbone.forward(g, store, &batch, ctx)?;
        let cls = cls_rows(g, features.output)?;
        let nsp_labels: Vec<usize> = instances.iter().map(|i| i.nsp_label).collect();
        let nsp = self.nsp.loss(g, store, cls, &nsp_labels)?;
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for (s, inst) in instances.iter().enumerate() {
            if inst.masked_positions.len() != inst.mlm_labels.len() {
                return Err(Error::Data(format!("instance {s}: masked positions and labels differ in length")));
            }
            for (&p, &y) in inst.masked_positions.iter().zip(&inst.mlm_labels) {
                if p >= batch.seq_len {
                    return Err(Error::Data(format!(
                        "instance {s}: masked position {p} beyond sequence length {}",
                        batch.seq_len
                    )));
                }
                positions.push((s, p));
                labels.push(y);
            }
        }
        let mlm = self.mlm.loss(g, store, features.output, &positions, &labels)?;
        let total = joint_loss(g, &nsp, &mlm, weights)?;
        Ok(PretrainOutput {
            total,
            nsp,
            mlm,
            features,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.ids();
        ids.extend(self.nsp.ids());
        ids.extend(self.mlm.ids());
        ids
    }
}

/// What a task head predicts and over which labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    #[serde(default)]
    pub intents: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead {
    Classifier(ClassifierHead),
    Tagger(TaggerHead),
    Proactive(ProactiveHead),
}

#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    pub logits: Var,
    pub loss: Option<LossOutput>,
}

impl TaskHead {
    pub fn new<T: Float, R: rand::Rng>(
        spec: &TaskSpec,
        in_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let k = spec.labels.len();
        Ok(match (spec.kind, spec.kind.scheme()) {
            (TaskKind::Proactive, _) => TaskHead::Proactive(ProactiveHead::new(
                store,
                in_dim,
                spec.intents.len(),
                INTENT_DIM,
                k,
                rng,
            )?),
            (_, Scheme::Tagging) => TaskHead::Tagger(TaggerHead::new(store, "task.tagger", in_dim, k, rng)?),
            (_, Scheme::Classification) => {
                TaskHead::Classifier(ClassifierHead::new(store, "task.classifier", in_dim, k, rng)?)
            }
        })
    }

    /// Logits, and the loss when every example carries gold labels.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &Features,
        examples: &[&EncodedExample],
    ) -> Result<TaskOutput> {
        match self {
            TaskHead::Classifier(head) => {
                let cls = cls_rows(g, features.output)?;
                let logits = head.logits(g, store, cls)?;
                let labels: Option<Vec<usize>> = examples.iter().map(|e| e.label).collect();
                let loss = labels.map(|y| head.loss(g, logits, &y)).transpose()?;
                Ok(TaskOutput { logits, loss })
            }
            TaskHead::Tagger(head) => {
                let logits = head.logits(g, store, features.output)?;
                let tags: Vec<Vec<Option<usize>>> = examples.iter().map(|e| e.tags.clone()).collect();
                let loss = head.loss(g, logits, &tags)?;
                Ok(TaskOutput { logits, loss })
            }
            TaskHead::Proactive(head) => {
                let cls = cls_rows(g, features.output)?;
                let intents: Vec<usize> = examples
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e.intent.ok_or_else(|| Error::Data(format!("example {i} lacks a current intent"))))
                    .collect::<Result<_>>()?;
                let x: Tensor<T> = one_hot(&intents, head.num_intents)?;
                let logits = head.logits(g, store, cls, &x)?;
                let labels: Option<Vec<usize>> = examples.iter().map(|e| e.label).collect();
                let loss = labels.map(|y| head.classifier.loss(g, logits, &y)).transpose()?;
                Ok(TaskOutput { logits, loss })
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            TaskHead::Classifier(h) => h.ids(),
            TaskHead::Tagger(h) => h.ids(),
            TaskHead::Proactive(h) => h.ids(),
        }
    }
}

/// A configured network, its vocabulary, and its `f32` parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub net: PretrainNet,
    pub task: Option<(TaskSpec, TaskHead)>,
}

impl Model {
    /// Random initialization; deterministic under `seed`.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = PretrainNet::new(&config, vocab.pad_id(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            net,
            task: None,
        })
    }

    /// Adds the downstream head.
    pub fn set_task(&mut self, spec: TaskSpec, seed: u64) -> Result<()> {
        if self.task.is_some() {
            return Err(Error::Config("model already carries a task head".into()));
        }
        if spec.kind == TaskKind::Proactive && spec.intents.is_empty() {
            return Err(Error::Config("proactive task needs an intent vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let head = TaskHead::new(&spec, self.net.backbone.output_width(), &mut self.store, &mut rng)?;
        self.task = Some((spec, head));
        Ok(())
    }

    /// Loads dependency vectors into the injection table. Vocabulary tokens
    /// missing from `vectors` keep a fresh random row. Returns the number of
    /// rows copied from `vectors`.
    pub fn set_dep_vectors(&mut self, vectors: &WordVectors, seed: u64) -> Result<usize> {
        let branch = self
            .net
            .backbone
            .deps
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without dependency injection".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        let (table, copied) = align_dep_table(&self.vocab, Some(vectors), self.config.dep_dim, &mut rng)?;
        branch.set_table(&mut self.store, &table, self.vocab.pad_id())?;
        Ok(copied)
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_parameters()
    }

    pub fn header(&self, meta: BTreeMap<String, String>) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            task: self.task.as_ref().map(|(s, _)| s.clone()),
            meta,
        }
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint::from_store(self.header(meta), &self.store)
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, String>) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let vocab = Vocab::from_tokens(ckpt.header.vocab.clone())?;
        let mut model = Model::init(ckpt.header.config.clone(), vocab, 0)?;
        if let Some(spec) = &ckpt.header.task {
            model.set_task(spec.clone(), 0)?;
        }
        ckpt.restore(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Marks everything outside the task head as frozen (or trainable).
    pub fn freeze_backbone(&mut self, frozen: bool) {
        let task_ids: Vec<ParamId> = self.task.as_ref().map(|(_, h)| h.ids()).unwrap_or_default();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            if task_ids.contains(&id) {
                continue;
            }
            let trainable = !frozen && self.default_trainable(id);
            self.store.set_requires_grad(id, trainable);
        }
    }

    fn default_trainable(&self, id: ParamId) -> bool {
        match &self.net.backbone.deps {
            Some(d) if d.table == id => self.config.finetune_deps,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SPECIAL_TOKENS;

    #[test]
    fn vocab_size_mismatch_is_config_error() {
        let vocab = Vocab::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()).unwrap();
        let err = Model::init(ModelConfig::desk(6), vocab, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
