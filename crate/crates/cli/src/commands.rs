use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use redbert_core::analyze::{emit_figure, project};
use redbert_core::datapipe::{
    build_instances, dependency_vectors, generate_synthetic, generate_task, read_corpus, split_corpus,
    write_corpus, Grammar, MaskingConfig, Source, SplitSpec, SyntheticSpec,
};
use redbert_core::depinject::load_word2vec;
use redbert_core::encoder::ModelConfig;
use redbert_core::model::Model;
use redbert_core::objectives::JointWeights;
use redbert_core::tasks::{load_dataset, save_dataset, TaskKind};
use redbert_core::tokenizer::load_vocab;
use redbert_core::trainkit::{evaluate_with_loss, fine_tune, pretrain, DistillConfig, History, RunLog, TrainRunConfig};
use serde_json::json;

use crate::settings::Settings;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(s: &Settings) -> Result<()> {
    match s.command.as_str() {
        "gen-corpus" => gen_corpus(s),
        "pretrain" => pretrain_cmd(s),
        "finetune" => finetune_cmd(s),
        "eval" => eval_cmd(s),
        "project" => project_cmd(s),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| {
        CliError::Core(redbert_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Creates the run directory and writes `manifest.json` and `config.txt`
/// before any computation.
fn start_run(s: &Settings, inputs: &[&str], outputs: &[&str]) -> Result<PathBuf> {
    let dir = s.run_dir();
    std::fs::create_dir_all(&dir).map_err(|source| {
        CliError::Core(redbert_core::Error::Io {
            path: dir.clone(),
            source,
        })
    })?;
    let inputs: BTreeMap<&str, &str> = inputs.iter().map(|k| (*k, s.str(k))).filter(|(_, v)| !v.is_empty()).collect();
    let manifest = json!({
        "command": s.command,
        "config": s.values,
        "seed": s.str("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "run_dir": dir,
        "code_version": env!("CARGO_PKG_VERSION"),
    });
    write(&dir.join("manifest.json"), &format!("{:#}\n", manifest))?;
    write(&dir.join("config.txt"), &s.to_config())?;
    Ok(dir)
}

fn model_config(s: &Settings, vocab_size: usize) -> Result<ModelConfig> {
    let mut c = ModelConfig::desk(vocab_size);
    c.num_layers = s.usize("layers")?;
    c.hidden_size = s.usize("hidden")?;
    c.num_heads = s.usize("heads")?;
    c.ff_size = s.usize("ff")?;
    c.max_len = s.usize("max_len")?;
    c.max_position = c.max_len;
    c.dropout = s.f64("dropout")?;
    c.inject_deps = s.bool("inject_deps")?;
    c.dep_dim = s.usize("dep_dim")?;
    c.dep_heads = s.usize("dep_heads")?;
    c.dep_ff_size = s.usize("dep_ff")?;
    c.finetune_deps = s.bool("finetune_deps")?;
    c.validate()?;
    Ok(c)
}

fn train_config(s: &Settings, checkpoint: Option<PathBuf>) -> Result<TrainRunConfig> {
    let c = TrainRunConfig {
        batch_size: s.usize("batch_size")?,
        learning_rate: s.f64("lr")?,
        max_epochs: s.usize("max_epochs")?,
        patience: s.usize("patience")?,
        seed: s.u64("seed")?,
        eval_every: s.usize("eval_every")?,
        clip_norm: s.f64("clip_norm")?,
        validation_fraction: s.f64("validation_fraction")?,
        checkpoint,
        ..TrainRunConfig::default()
    };
    c.validate()?;
    Ok(c)
}

/// Fresh model from a vocabulary file and the architecture settings, with
/// dependency vectors loaded when given.
fn fresh_model(s: &Settings) -> Result<Model> {
    let vocab = load_vocab(&s.required_path("vocab")?)?;
    let config = model_config(s, vocab.len())?;
    let seed = s.u64("seed")?;
    let mut model = Model::init(config, vocab, seed)?;
    if let Some(path) = s.path("dep_vectors") {
        if !model.config.inject_deps {
            return Err(CliError::Usage("--dep-vectors needs --inject-deps".into()));
        }
        let vectors = load_word2vec(&path)?;
        let copied = model.set_dep_vectors(&vectors, seed)?;
        eprintln!("loaded {copied} dependency vectors from {}", path.display());
    }
    Ok(model)
}

fn metric_lines(rows: &[(String, String)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn gen_corpus(s: &Settings) -> Result<()> {
    let dir = start_run(
        s,
        &["grammar"],
        &["corpus.jsonl", "corpus_train.jsonl", "corpus_test.jsonl", "vocab.txt", "deps.vec", "tasks/", "metrics.csv"],
    )?;
    let grammar = match s.path("grammar") {
        Some(p) => Grammar::load(&p)?,
        None => Grammar::builtin(),
    };
    let seed = s.u64("seed")?;
    let spec = SyntheticSpec {
        num_docs: s.usize("num_docs")?,
        chat_fraction: s.f64("chat_fraction")?,
        examples_per_task: s.usize("examples_per_task")?,
        seed,
    };
    let data = generate_synthetic(&grammar, &spec)?;
    let (train, test) = split_corpus(
        &data.corpus,
        SplitSpec {
            train_fraction: s.f64("train_fraction")?,
            seed,
        },
    )?;
    write_corpus(&dir.join("corpus.jsonl"), &data.corpus)?;
    write_corpus(&dir.join("corpus_train.jsonl"), &train)?;
    write_corpus(&dir.join("corpus_test.jsonl"), &test)?;
    data.vocab.save(&dir.join("vocab.txt"))?;
    dependency_vectors(&grammar, s.usize("dep_dim")?, seed).save(&dir.join("deps.vec"))?;
    let (train_dir, test_dir) = (dir.join("tasks/train"), dir.join("tasks/test"));
    for d in [&train_dir, &test_dir] {
        std::fs::create_dir_all(d).map_err(|source| {
            CliError::Core(redbert_core::Error::Io {
                path: d.clone(),
                source,
            })
        })?;
    }
    let test_examples = s.usize("test_examples")?;
    let mut rows = vec![
        ("documents".to_string(), data.corpus.len().to_string()),
        (
            "chat_documents".to_string(),
            data.corpus.iter().filter(|d| d.source == Source::Chat).count().to_string(),
        ),
        (
            "sentences".to_string(),
            data.corpus.iter().map(|d| d.sentences.len()).sum::<usize>().to_string(),
        ),
        ("train_documents".to_string(), train.len().to_string()),
        ("test_documents".to_string(), test.len().to_string()),
        ("vocab_size".to_string(), data.vocab.len().to_string()),
    ];
    for (k, ds) in data.tasks.iter().enumerate() {
        save_dataset(&train_dir, ds)?;
        let test_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(1000 + k as u64);
        let held_out = generate_task(&grammar, ds.kind, test_examples, test_seed);
        save_dataset(&test_dir, &held_out)?;
        rows.push((format!("{}_train_examples", ds.kind), ds.examples.len().to_string()));
        rows.push((format!("{}_test_examples", ds.kind), held_out.examples.len().to_string()));
    }
    write(&dir.join("metrics.csv"), &metric_lines(&rows))?;
    println!("wrote {} documents and {} task datasets to {}", data.corpus.len(), data.tasks.len(), dir.display());
    Ok(())
}

fn pretrain_cmd(s: &Settings) -> Result<()> {
    let dir = start_run(
        s,
        &["corpus", "vocab", "init", "teacher", "dep_vectors"],
        &["model.bin", "metrics.csv", "run.jsonl"],
    )?;
    let corpus = read_corpus(&s.required_path("corpus")?)?;
    let mut model = match s.path("init") {
        Some(p) => Model::load(&p)?,
        None => fresh_model(s)?,
    };
    let seed = s.u64("seed")?;
    let instances = build_instances(&corpus, &model.vocab, model.config.max_len, MaskingConfig::default(), seed)?;
    let checkpoint = dir.join("model.bin");
    let mut config = train_config(s, Some(checkpoint.clone()))?;
    config.weights = JointWeights {
        nsp: s.f64("nsp_weight")?,
        mlm: s.f64("mlm_weight")?,
    };
    let distill_weight = s.f64("distill_weight")?;
    let teacher = match s.path("teacher") {
        Some(p) => Some(Model::load(&p)?),
        None => None,
    };
    if distill_weight > 0.0 {
        if teacher.is_none() {
            return Err(CliError::Usage("--distill-weight needs --teacher".into()));
        }
        config.distill = Some(DistillConfig {
            weight: distill_weight,
            temperature: s.f64("distill_temperature")?,
        });
    }
    let mut log = RunLog::create(&dir.join("run.jsonl"))?;
    eprintln!(
        "pretraining {} parameters on {} instances",
        model.count_parameters(),
        instances.len()
    );
    let outcome = pretrain(&mut model, &instances, &config, teacher.as_ref(), &mut log)?;
    let meta = BTreeMap::from([
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("best_val_loss".to_string(), outcome.best_val_loss.to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    model.save(&checkpoint, meta)?;
    outcome.history.save_csv(&dir.join("metrics.csv"))?;
    println!(
        "best validation loss {} at epoch {} ({} steps); checkpoint {}",
        outcome.best_val_loss,
        outcome.best_epoch,
        outcome.steps,
        checkpoint.display()
    );
    Ok(())
}

fn task_kind(s: &Settings, fallback: Option<TaskKind>) -> Result<TaskKind> {
    match (s.str("task"), fallback) {
        ("", Some(k)) => Ok(k),
        ("", None) => Err(CliError::Usage(format!("{} requires --task", s.command))),
        (name, _) => TaskKind::parse(name).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn finetune_cmd(s: &Settings) -> Result<()> {
    let dir = start_run(
        s,
        &["data", "labels", "test", "checkpoint", "vocab", "dep_vectors"],
        &["model.bin", "metrics.csv", "report.csv", "test_report.csv", "run.jsonl"],
    )?;
    let kind = task_kind(s, None)?;
    let data = s.required_path("data")?;
    let labels = s.path("labels");
    let dataset = load_dataset(kind, &data, labels.as_deref())?;
    let mut model = match s.path("checkpoint") {
        Some(p) => Model::load(&p)?,
        None => fresh_model(s)?,
    };
    let checkpoint = dir.join("model.bin");
    let mut config = train_config(s, Some(checkpoint.clone()))?;
    config.freeze_encoder = s.bool("freeze_encoder")?;
    let mut log = RunLog::create(&dir.join("run.jsonl"))?;
    let outcome = fine_tune(&mut model, &dataset, &config, &mut log)?;
    let mut history: History = outcome.history.clone();
    model.save(
        &checkpoint,
        BTreeMap::from([("best_epoch".to_string(), outcome.best_epoch.to_string())]),
    )?;
    outcome.report.save_csv(&dir.join("report.csv"))?;
    println!(
        "{kind}: validation macro-F1 {} at epoch {} ({} trainable parameters)",
        outcome.report.f1(),
        outcome.best_epoch,
        outcome.trainable_parameters
    );
    if let Some(test) = s.path("test") {
        let labels_path = labels.unwrap_or_else(|| data.with_extension("labels"));
        let mut held_out = load_dataset(kind, &test, Some(&labels_path))?;
        held_out.intents = dataset.intents.clone();
        let (report, loss) = evaluate_with_loss(&model, &held_out, config.batch_size)?;
        report.save_csv(&dir.join("test_report.csv"))?;
        history.push(outcome.steps, "test", loss, Some(report.f1()));
        println!("{kind}: test macro-F1 {}", report.f1());
    }
    history.save_csv(&dir.join("metrics.csv"))?;
    Ok(())
}

fn eval_cmd(s: &Settings) -> Result<()> {
    let dir = start_run(s, &["checkpoint", "data", "labels"], &["metrics.csv", "report.csv"])?;
    let model = Model::load(&s.required_path("checkpoint")?)?;
    let kind = task_kind(s, model.task.as_ref().map(|(t, _)| t.kind))?;
    let data = s.required_path("data")?;
    let labels = s.path("labels");
    let mut dataset = load_dataset(kind, &data, labels.as_deref())?;
    if let Some((spec, _)) = &model.task {
        if dataset.intents.is_empty() {
            dataset.intents = spec.intents.clone();
        }
    }
    let (report, loss) = evaluate_with_loss(&model, &dataset, s.usize("batch_size")?)?;
    report.save_csv(&dir.join("report.csv"))?;
    let mut history = History::default();
    history.push(0, "test", loss, Some(report.f1()));
    history.save_csv(&dir.join("metrics.csv"))?;
    println!("{kind}: macro-F1 {} micro-F1 {} over {} items", report.macro_f1, report.micro_f1, report.total);
    Ok(())
}

fn project_cmd(s: &Settings) -> Result<()> {
    let dir = start_run(
        s,
        &["model_a", "model_b"],
        &["projection.svg", "projection.csv", "projection_distances.csv", "metrics.csv"],
    )?;
    let sentence = s.str("sentence");
    if sentence.trim().is_empty() {
        return Err(CliError::Usage("project requires --sentence".into()));
    }
    let a = Model::load(&s.required_path("model_a")?)?;
    let b = Model::load(&s.required_path("model_b")?)?;
    let report = project(sentence, &[(s.str("name_a"), &a), (s.str("name_b"), &b)])?;
    let files = emit_figure(&report, &dir.join("projection.svg"))?;
    let mut rows = vec![
        ("explained_variance_ratio_1".to_string(), report.explained_variance_ratio[0].to_string()),
        ("explained_variance_ratio_2".to_string(), report.explained_variance_ratio[1].to_string()),
        ("points".to_string(), (report.words.len() * report.models.len()).to_string()),
    ];
    for m in &report.models {
        let n = report.words.len();
        let pairs = (n * n.saturating_sub(1) / 2).max(1);
        let mean: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m.distances_hidden[i][j]).sum::<f64>()
            / pairs as f64;
        rows.push((format!("mean_hidden_distance_{}", m.name), mean.to_string()));
    }
    write(&dir.join("metrics.csv"), &metric_lines(&rows))?;
    println!("wrote {} and {}", files.svg.display(), files.points.display());
    Ok(())
}
