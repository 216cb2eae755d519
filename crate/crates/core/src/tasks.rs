//! Labeled datasets for the downstream tasks and their encoding into
//! model inputs.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tokenizer::{encode_ids, tokenize_words, wordpiece_tokenize, TokenizedPair, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Intent,
    Sentiment,
    Ner,
    TitleCompression,
    /// Next-intent suggestion from the current utterance, history, and
    /// current intent (also called contextual intent detection).
    Proactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Classification,
    Tagging,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Intent,
        TaskKind::Sentiment,
        TaskKind::Ner,
        TaskKind::TitleCompression,
        TaskKind::Proactive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Intent => "intent",
            TaskKind::Sentiment => "sentiment",
            TaskKind::Ner => "ner",
            TaskKind::TitleCompression => "title_compression",
            TaskKind::Proactive => "proactive",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name || (name == "contextual" && *k == TaskKind::Proactive))
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown task {name:?}; expected one of {}", known.join(", ")))
            })
    }

    pub fn scheme(self) -> Scheme {
        match self {
            TaskKind::Ner | TaskKind::TitleCompression => Scheme::Tagging,
            _ => Scheme::Classification,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Entity span over word offsets `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// One labeled example. Classification tasks use `label`; tagging tasks use
/// `words` and `tags`; the proactive task adds `history` and
/// `current_intent`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    /// Output classes (or tags), id = position.
    pub labels: Vec<String>,
    /// Input intent vocabulary for the proactive task; empty otherwise.
    pub intents: Vec<String>,
    pub examples: Vec<TaskExample>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Label file: one label per line, id = line number.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let labels: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let mut seen = std::collections::HashSet::new();
    for l in &labels {
        if !seen.insert(l) {
            return Err(Error::Config(format!("duplicate label {l:?} in {}", path.display())));
        }
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut text = labels.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Model-ready example. Tags are aligned to packed positions; `None` marks
/// specials, pads, and word continuation pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub pair: TokenizedPair,
    pub label: Option<usize>,
    pub tags: Vec<Option<usize>>,
    pub intent: Option<usize>,
}

fn lookup(labels: &[String], value: &str, what: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == value)
        .ok_or_else(|| Error::Config(format!("{what} {value:?} missing from the label set")))
}

/// Encodes every example of `dataset`. Labels outside the label set are a
/// config error (label file and data disagree).
pub fn encode_dataset(dataset: &TaskDataset, vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedExample>> {
    dataset
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            encode_example(dataset, ex, vocab, max_len).map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("example {i}: {m}")),
                Error::Config(m) => Error::Config(format!("example {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

pub fn encode_example(dataset: &TaskDataset, ex: &TaskExample, vocab: &Vocab, max_len: usize) -> Result<EncodedExample> {
    match dataset.kind.scheme() {
        Scheme::Tagging => {
            let (words, tags) = match (&ex.words, &ex.tags) {
                (Some(w), Some(t)) => (w, t),
                _ => return Err(Error::Data("tagging example lacks words or tags".into())),
            };
            if words.len() != tags.len() {
                return Err(Error::Data(format!("{} words but {} tags", words.len(), tags.len())));
            }
            let tag_ids = tags
                .iter()
                .map(|t| lookup(&dataset.labels, t, "tag"))
                .collect::<Result<Vec<_>>>()?;
            let (ids, owner) = tokenize_words(words, vocab);
            let pair = encode_ids(&ids, None, vocab, max_len)?;
            let kept = pair.real_len() - 2;
            let mut aligned = vec![None; pair.len()];
            for p in 0..kept {
                if p == 0 || owner[p] != owner[p - 1] {
                    aligned[p + 1] = Some(tag_ids[owner[p]]);
                }
            }
            Ok(EncodedExample {
                pair,
                label: None,
                tags: aligned,
                intent: None,
            })
        }
        Scheme::Classification => {
            let label = ex
                .label
                .as_deref()
                .ok_or_else(|| Error::Data("classification example lacks a label".into()))?;
            let label = lookup(&dataset.labels, label, "label")?;
            let a = wordpiece_tokenize(&ex.text, vocab);
            let (pair, intent) = if dataset.kind == TaskKind::Proactive {
                let current = ex
                    .current_intent
                    .as_deref()
                    .ok_or_else(|| Error::Data("proactive example lacks current_intent".into()))?;
                let intent = lookup(&dataset.intents, current, "current intent")?;
                let b = ex.history.as_deref().map(|h| wordpiece_tokenize(h, vocab));
                (encode_ids(&a, b.as_deref(), vocab, max_len)?, Some(intent))
            } else {
                (encode_ids(&a, None, vocab, max_len)?, None)
            };
            Ok(EncodedExample {
                tags: vec![None; pair.len()],
                pair,
                label: Some(label),
                intent,
            })
        }
    }
}

/// Writes `<dir>/<task>.jsonl` and `<dir>/<task>.labels` (plus
/// `<task>.intents` for the proactive task).
pub fn save_dataset(dir: &Path, dataset: &TaskDataset) -> Result<()> {
    let name = dataset.kind.name();
    write_jsonl(&dir.join(format!("{name}.jsonl")), &dataset.examples)?;
    write_labels(&dir.join(format!("{name}.labels")), &dataset.labels)?;
    if !dataset.intents.is_empty() {
        write_labels(&dir.join(format!("{name}.intents")), &dataset.intents)?;
    }
    Ok(())
}

/// Loads a dataset written by [`save_dataset`] from its JSONL path; label
/// files are looked up next to it.
pub fn load_dataset(kind: TaskKind, data: &Path, labels: Option<&Path>) -> Result<TaskDataset> {
    let examples = read_jsonl(data)?;
    let labels_path = labels.map(Path::to_path_buf).unwrap_or_else(|| data.with_extension("labels"));
    let labels = read_labels(&labels_path)?;
    let intents = if kind == TaskKind::Proactive {
        read_labels(&data.with_extension("intents"))?
    } else {
        Vec::new()
    };
    Ok(TaskDataset {
        kind,
        labels,
        intents,
        examples,
    })
}
