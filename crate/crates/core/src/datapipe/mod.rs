//! Pretraining data: corpus documents, next-sentence pairs, MLM masking,
//! document-level splits, and binary instance shards.

mod synth;

pub use synth::{
    build_vocab, dependency_vectors, generate_corpus, generate_synthetic, generate_task, Grammar, SyntheticData,
    SyntheticSpec,
};

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tasks::{read_jsonl, write_jsonl};
use crate::tokenizer::{encode_pair, TokenizedPair, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Catalog,
    Chat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub source: Source,
    pub sentences: Vec<String>,
}

impl CorpusDoc {
    pub fn validate(&self) -> Result<()> {
        if !self.sentences.iter().any(|s| !s.trim().is_empty()) {
            return Err(Error::Data(format!("document {} has no non-empty sentence", self.doc_id)));
        }
        Ok(())
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    let docs: Vec<CorpusDoc> = read_jsonl(path)?;
    for d in &docs {
        d.validate()?;
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[CorpusDoc]) -> Result<()> {
    write_jsonl(path, docs)
}

/// Splits running text after `.`, `!`, or `?`.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

pub const IS_NEXT: usize = 1;
pub const NOT_NEXT: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspPair {
    pub a: String,
    pub b: String,
    pub label: usize,
    pub doc_a: usize,
    pub doc_b: usize,
}

/// One pair per consecutive sentence pair in each document: with
/// probability 1/2 the true successor (label 1), otherwise a random sentence
/// from a different document (label 0).
pub fn make_nsp_pairs(corpus: &[CorpusDoc], seed: u64) -> Result<Vec<NspPair>> {
    if corpus.len() < 2 {
        return Err(Error::Config(format!(
            "next-sentence pairs need at least 2 documents, got {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (d, doc) in corpus.iter().enumerate() {
        for i in 0..doc.sentences.len().saturating_sub(1) {
            if rng.random_bool(0.5) {
                pairs.push(NspPair {
                    a: doc.sentences[i].clone(),
                    b: doc.sentences[i + 1].clone(),
                    label: IS_NEXT,
                    doc_a: d,
                    doc_b: d,
                });
            } else {
                let mut other = rng.random_range(0..corpus.len() - 1);
                if other >= d {
                    other += 1;
                }
                let donor = &corpus[other].sentences;
                let j = rng.random_range(0..donor.len());
                pairs.push(NspPair {
                    a: doc.sentences[i].clone(),
                    b: donor[j].clone(),
                    label: NOT_NEXT,
                    doc_a: d,
                    doc_b: other,
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub select_rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub pair: TokenizedPair,
    pub masked_positions: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    pub nsp_label: usize,
}

/// Applies BERT-style masking. Random replacements draw uniformly from the
/// non-special vocabulary.
#[derive(Clone, Debug)]
pub struct Masker {
    pub config: MaskingConfig,
    mask_id: usize,
    pool: Vec<usize>,
    vocab: Vocab,
}

impl Masker {
    pub fn new(vocab: &Vocab, config: MaskingConfig) -> Self {
        let pool = (0..vocab.len()).filter(|&i| !vocab.is_special(i)).collect();
        Self {
            config,
            mask_id: vocab.mask_id(),
            pool,
            vocab: vocab.clone(),
        }
    }

    /// Positions eligible for masking: real tokens other than specials.
    pub fn maskable(&self, pair: &TokenizedPair) -> Vec<usize> {
        (0..pair.len())
            .filter(|&p| {
                let id = pair.ids[p];
                pair.attention_mask[p] == 1
                    && id != self.vocab.cls_id()
                    && id != self.vocab.sep_id()
                    && id != self.vocab.pad_id()
            })
            .collect()
    }

    pub fn apply<R: Rng>(&self, pair: &TokenizedPair, nsp_label: usize, rng: &mut R) -> (TrainingInstance, Vec<MaskAction>) {
        let mut out = pair.clone();
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        let mut actions = Vec::new();
        for p in self.maskable(pair) {
            if !rng.random_bool(self.config.select_rate) {
                continue;
            }
            positions.push(p);
            labels.push(pair.ids[p]);
            let u: f64 = rng.random();
            let action = if u < self.config.mask_fraction {
                out.ids[p] = self.mask_id;
                MaskAction::Mask
            } else if u < self.config.mask_fraction + self.config.random_fraction && !self.pool.is_empty() {
                out.ids[p] = self.pool[rng.random_range(0..self.pool.len())];
                MaskAction::Random
            } else {
                MaskAction::Keep
            };
            actions.push(action);
        }
        (
            TrainingInstance {
                pair: out,
                masked_positions: positions,
                mlm_labels: labels,
                nsp_label,
            },
            actions,
        )
    }
}

pub fn apply_masking(pair: &TokenizedPair, nsp_label: usize, vocab: &Vocab, seed: u64) -> TrainingInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Masker::new(vocab, MaskingConfig::default()).apply(pair, nsp_label, &mut rng).0
}

/// Pairs, tokenizes, and masks a corpus into pretraining instances.
pub fn build_instances(
    corpus: &[CorpusDoc],
    vocab: &Vocab,
    max_len: usize,
    masking: MaskingConfig,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    let pairs = make_nsp_pairs(corpus, seed)?;
    let masker = Masker::new(vocab, masking);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    pairs
        .iter()
        .map(|p| {
            let pair = encode_pair(&p.a, Some(&p.b), vocab, max_len)?;
            Ok(masker.apply(&pair, p.label, &mut rng).0)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Document-level split: `round(train_fraction * N)` shuffled documents go
/// to train, the rest to test. Both keep corpus order.
pub fn split_corpus(corpus: &[CorpusDoc], spec: SplitSpec) -> Result<(Vec<CorpusDoc>, Vec<CorpusDoc>)> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!("train_fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let n_train = (spec.train_fraction * corpus.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut in_train = vec![false; corpus.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (doc, t) in corpus.iter().zip(in_train) {
        if t {
            train.push(doc.clone());
        } else {
            test.push(doc.clone());
        }
    }
    Ok((train, test))
}

const SHARD_MAGIC: &[u8; 8] = b"RDBSHRD1";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_instance(inst: &TrainingInstance, buf: &mut Vec<u8>) {
    let p = &inst.pair;
    put_u32(buf, p.len());
    for &id in &p.ids {
        put_u32(buf, id);
    }
    for &s in &p.segment_ids {
        put_u32(buf, s);
    }
    buf.extend_from_slice(&p.attention_mask);
    put_u32(buf, inst.masked_positions.len());
    for &m in &inst.masked_positions {
        put_u32(buf, m);
    }
    for &l in &inst.mlm_labels {
        put_u32(buf, l);
    }
    put_u32(buf, inst.nsp_label);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("truncated instance at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn decode_instance(bytes: &[u8]) -> Result<TrainingInstance> {
    let mut c = Cursor { bytes, at: 0 };
    let len = c.u32()?;
    let ids = c.u32s(len)?;
    let segment_ids = c.u32s(len)?;
    let attention_mask = c.take(len)?.to_vec();
    let m = c.u32()?;
    let masked_positions = c.u32s(m)?;
    let mlm_labels = c.u32s(m)?;
    let nsp_label = c.u32()?;
    if c.at != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after instance", bytes.len() - c.at)));
    }
    Ok(TrainingInstance {
        pair: TokenizedPair {
            ids,
            segment_ids,
            attention_mask,
        },
        masked_positions,
        mlm_labels,
        nsp_label,
    })
}

/// Shard layout: magic, then `u32` length-prefixed instance records.
pub fn write_shard(path: &Path, instances: &[TrainingInstance]) -> Result<()> {
    let mut bytes = SHARD_MAGIC.to_vec();
    let mut record = Vec::new();
    for inst in instances {
        record.clear();
        encode_instance(inst, &mut record);
        put_u32(&mut bytes, record.len());
        bytes.extend_from_slice(&record);
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_shard(path: &Path) -> Result<Vec<TrainingInstance>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < SHARD_MAGIC.len() || &bytes[..SHARD_MAGIC.len()] != SHARD_MAGIC {
        return Err(Error::Data(format!("{} is not an instance shard", path.display())));
    }
    let mut c = Cursor {
        bytes: &bytes,
        at: SHARD_MAGIC.len(),
    };
    let mut out = Vec::new();
    while c.at < bytes.len() {
        let n = c.u32()?;
        out.push(decode_instance(c.take(n)?)?);
    }
    Ok(out)
}
