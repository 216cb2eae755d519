//! Flat `key=value` settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub boolean: bool,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        boolean: false,
    }
}

const fn switch(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        boolean: true,
    }
}

pub const COMMON: &[Key] = &[
    key("seed", "0", "random seed"),
    key("out_root", "runs", "output root (REDBERT_RUN_DIR overrides the default)"),
    key("run_name", "", "run directory name under the output root [default: <command>-seed<seed>]"),
];

pub const ARCH: &[Key] = &[
    key("layers", "2", "encoder layers"),
    key("hidden", "64", "hidden size"),
    key("heads", "4", "attention heads"),
    key("ff", "256", "feed-forward size"),
    key("max_len", "128", "maximum packed sequence length"),
    key("dropout", "0.1", "dropout probability"),
    switch("inject_deps", "false", "add the dependency-embedding branch"),
    key("dep_vectors", "", "word2vec text file for the dependency table"),
    key("dep_dim", "300", "dependency embedding width"),
    key("dep_heads", "4", "side-transformer heads"),
    key("dep_ff", "1200", "side-transformer feed-forward size"),
    switch("finetune_deps", "true", "update the dependency table during training"),
];

pub const TRAIN: &[Key] = &[
    key("batch_size", "32", "batch size"),
    key("lr", "2e-5", "Adam learning rate (constant)"),
    key("max_epochs", "3", "epoch limit"),
    key("patience", "3", "epochs without validation improvement before stopping"),
    key("eval_every", "0", "log the training loss every N steps (0: per epoch)"),
    key("clip_norm", "1.0", "global gradient-norm clip (0 disables)"),
    key("validation_fraction", "0.1", "share of the training data held out for early stopping"),
];

pub const GEN_CORPUS: &[Key] = &[
    key("grammar", "", "grammar TOML [default: built-in retail grammar]"),
    key("num_docs", "2000", "documents to generate"),
    key("chat_fraction", "0.2", "share of chat documents"),
    key("train_fraction", "0.9", "corpus share kept for training"),
    key("examples_per_task", "1000", "training examples per downstream task"),
    key("test_examples", "200", "test examples per downstream task"),
    key("dep_dim", "300", "dependency vector width"),
];

pub const PRETRAIN: &[Key] = &[
    key("corpus", "", "corpus JSONL (required)"),
    key("vocab", "", "vocabulary file (required unless --init)"),
    key("init", "", "checkpoint to continue from"),
    key("nsp_weight", "1.0", "NSP loss weight"),
    key("mlm_weight", "1.0", "MLM loss weight"),
    key("teacher", "", "teacher checkpoint for distillation"),
    key("distill_weight", "0", "distillation loss weight (0 disables)"),
    key("distill_temperature", "1.0", "distillation temperature"),
];

pub const FINETUNE: &[Key] = &[
    key("task", "", "intent | sentiment | ner | title_compression | proactive (required)"),
    key("data", "", "training JSONL (required)"),
    key("labels", "", "label file [default: <data>.labels]"),
    key("test", "", "held-out JSONL scored after training"),
    key("checkpoint", "", "pretrained checkpoint [default: random init]"),
    key("vocab", "", "vocabulary file (required without --checkpoint)"),
    switch("freeze_encoder", "false", "train the task head only"),
];

pub const EVAL: &[Key] = &[
    key("checkpoint", "", "fine-tuned checkpoint (required)"),
    key("task", "", "task name [default: the checkpoint's task]"),
    key("data", "", "labeled JSONL (required)"),
    key("labels", "", "label file [default: <data>.labels]"),
    key("batch_size", "32", "evaluation batch size"),
];

pub const PROJECT: &[Key] = &[
    key("sentence", "", "sentence to embed (required)"),
    key("model_a", "", "first checkpoint (required)"),
    key("model_b", "", "second checkpoint (required)"),
    key("name_a", "original", "legend label of the first model"),
    key("name_b", "retrained", "legend label of the second model"),
];

pub fn keys_for(command: &str) -> Vec<Key> {
    let groups: &[&[Key]] = match command {
        "gen-corpus" => &[COMMON, GEN_CORPUS],
        "pretrain" => &[COMMON, PRETRAIN, ARCH, TRAIN],
        "finetune" => &[COMMON, FINETUNE, ARCH, TRAIN],
        "eval" => &[COMMON, EVAL],
        "project" => &[COMMON, PROJECT],
        _ => &[],
    };
    let mut out: Vec<Key> = Vec::new();
    for k in groups.iter().flat_map(|g| g.iter()) {
        if !out.iter().any(|o| o.name == k.name) {
            out.push(*k);
        }
    }
    if command == "finetune" {
        for k in out.iter_mut() {
            if k.name == "max_epochs" {
                k.default = "20";
            }
        }
    }
    out
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value settings file; flags override it"),
    );
    for k in keys_for(name) {
        let mut arg = Arg::new(k.name).long(flag_name(k.name)).help(k.help);
        arg = if k.boolean {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else {
            arg.num_args(1).value_name("VALUE")
        };
        if !k.default.is_empty() {
            arg = arg.help(format!("{} [default: {}]", k.help, k.default));
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(command: &str, matches: &ArgMatches) -> Result<Self, CliError> {
        let keys = keys_for(command);
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        if let Ok(root) = std::env::var("REDBERT_RUN_DIR") {
            if !root.is_empty() {
                values.insert("out_root".into(), root);
            }
        }
        if let Some(path) = matches.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
            for (k, v) in parse_config(&text, path)? {
                if !values.contains_key(&k) {
                    return Err(CliError::Usage(format!("{path}: unknown key {k:?} for {command}")));
                }
                values.insert(k, v);
            }
        }
        for k in &keys {
            if matches.value_source(k.name) == Some(ValueSource::CommandLine) {
                if let Some(v) = matches.get_one::<String>(k.name) {
                    values.insert(k.name.to_string(), v.clone());
                }
            }
        }
        if values.get("run_name").is_some_and(String::is_empty) {
            let seed = values.get("seed").cloned().unwrap_or_default();
            values.insert("run_name".into(), format!("{command}-seed{seed}"));
        }
        let s = Self {
            command: command.to_string(),
            values,
        };
        for k in &keys {
            if k.boolean {
                s.bool(k.name)?;
            }
        }
        Ok(s)
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("--{} expects {what}, got {raw:?}", flag_name(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Usage(format!("--{} expects true or false, got {other:?}", flag_name(key)))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::Usage(format!("{} requires --{}", self.command, flag_name(key))))
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out_root")).join(self.str("run_name"))
    }

    /// The resolved settings as a config file.
    pub fn to_config(&self) -> String {
        let mut out = format!("# redbert {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}
