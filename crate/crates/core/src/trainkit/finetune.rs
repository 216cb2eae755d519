use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::Graph;
use serde_json::json;

use super::metrics::{evaluate_f1, MetricReport};
use super::{apply_update, carve_validation, epoch_order, EarlyStopping, Goal, History, RunLog, TrainRunConfig, Verdict};
use crate::encoder::{Batch, Ctx};
use crate::error::{Error, Result};
use crate::model::{Model, TaskHead, TaskSpec};
use crate::tasks::{encode_dataset, EncodedExample, Scheme, TaskDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub history: History,
    /// Validation report of the restored (best) epoch.
    pub report: MetricReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub trainable_parameters: usize,
    pub epoch_seconds: Vec<f64>,
}

/// Attaches a head for `dataset`, or checks that the existing head was
/// built for the same task and label set.
pub fn prepare_task(model: &mut Model, dataset: &TaskDataset, seed: u64) -> Result<()> {
    let spec = TaskSpec {
        kind: dataset.kind,
        labels: dataset.labels.clone(),
        intents: dataset.intents.clone(),
    };
    match &model.task {
        Some((existing, _)) if *existing == spec => Ok(()),
        Some((existing, _)) => Err(Error::Config(format!(
            "model head was built for task {} with labels [{}]; dataset is task {} with labels [{}]",
            existing.kind,
            existing.labels.join(", "),
            spec.kind,
            spec.labels.join(", ")
        ))),
        None => model.set_task(spec, seed),
    }
}

fn head(model: &Model) -> Result<&TaskHead> {
    model
        .task
        .as_ref()
        .map(|(_, h)| h)
        .ok_or_else(|| Error::Config("model has no task head".into()))
}

fn scheme(model: &Model) -> Result<Scheme> {
    model
        .task
        .as_ref()
        .map(|(s, _)| s.kind.scheme())
        .ok_or_else(|| Error::Config("model has no task head".into()))
}

fn gold(example: &EncodedExample, scheme: Scheme) -> Vec<Option<usize>> {
    match scheme {
        Scheme::Classification => vec![example.label],
        Scheme::Tagging => example.tags.clone(),
    }
}

/// Scores `examples` in evaluation mode: per-item predictions and the mean
/// loss (NaN when no example carries gold labels).
fn score(model: &Model, examples: &[&EncodedExample], batch_size: usize) -> Result<(Vec<Vec<usize>>, f64)> {
    let head = head(model)?;
    let scheme = scheme(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictions = Vec::with_capacity(examples.len());
    let (mut total, mut weight) = (0.0, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut rng);
        let batch = Batch::from_pairs(chunk.iter().map(|e| &e.pair))?;
        let features = model.net.backbone.forward(&mut g, &model.store, &batch, &mut ctx)?;
        let out = head.forward(&mut g, &model.store, &features, chunk)?;
        if let Some(loss) = out.loss {
            total += g.value(loss.loss).data()[0] as f64 * chunk.len() as f64;
            weight += chunk.len();
        }
        let best = g.value(out.logits).argmax_rows();
        match scheme {
            Scheme::Classification => predictions.extend(best.into_iter().map(|p| vec![p])),
            Scheme::Tagging => predictions.extend(best.chunks(batch.seq_len).map(<[usize]>::to_vec)),
        }
    }
    let loss = if weight == 0 { f64::NAN } else { total / weight as f64 };
    Ok((predictions, loss))
}

/// Argmax predictions: one label per classification example, one tag per
/// packed position for tagging.
pub fn predict(model: &Model, examples: &[EncodedExample], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    Ok(score(model, &refs, batch_size)?.0)
}

fn report_for(model: &Model, examples: &[&EncodedExample], batch_size: usize) -> Result<(MetricReport, f64)> {
    let scheme = scheme(model)?;
    let labels = &model.task.as_ref().map(|(s, _)| s.labels.clone()).unwrap_or_default();
    let (predictions, loss) = score(model, examples, batch_size)?;
    let gold: Vec<Vec<Option<usize>>> = examples.iter().map(|e| gold(e, scheme)).collect();
    Ok((evaluate_f1(&predictions, &gold, labels, scheme)?, loss))
}

/// F1 of a fine-tuned model on a labeled dataset.
pub fn evaluate(model: &Model, dataset: &TaskDataset, batch_size: usize) -> Result<MetricReport> {
    Ok(evaluate_with_loss(model, dataset, batch_size)?.0)
}

/// [`evaluate`] plus the mean loss over the dataset.
pub fn evaluate_with_loss(model: &Model, dataset: &TaskDataset, batch_size: usize) -> Result<(MetricReport, f64)> {
    match &model.task {
        Some((spec, _)) if spec.kind == dataset.kind && spec.labels == dataset.labels => {}
        _ => return Err(Error::Config(format!("model head does not match task {}", dataset.kind))),
    }
    let encoded = encode_dataset(dataset, &model.vocab, model.config.max_len)?;
    let refs: Vec<&EncodedExample> = encoded.iter().collect();
    report_for(model, &refs, batch_size)
}

/// Full-model fine-tuning (head only with `freeze_encoder`), early stopping
/// on validation macro-F1, best-epoch restore.
pub fn fine_tune(
    model: &mut Model,
    dataset: &TaskDataset,
    config: &TrainRunConfig,
    log: &mut RunLog,
) -> Result<FineTuneOutcome> {
    config.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::Data(format!("task {} has no examples", dataset.kind)));
    }
    prepare_task(model, dataset, config.seed)?;
    model.freeze_backbone(config.freeze_encoder);
    let trainable_parameters = model.store.count_trainable();
    let encoded = encode_dataset(dataset, &model.vocab, model.config.max_len)?;
    let (train_idx, mut val_idx) = carve_validation(encoded.len(), config.validation_fraction, config.seed);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let val: Vec<&EncodedExample> = val_idx.iter().map(|&i| &encoded[i]).collect();
    log.event(
        "finetune_start",
        json!({"task": dataset.kind.name(), "train": train_idx.len(), "validation": val.len(), "trainable": trainable_parameters}),
    )?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(3);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(4);
    let mut adam = config.adam();
    let mut stopper = EarlyStopping::new(Goal::Maximize, config.patience);
    let mut history = History::default();
    let mut best = model.store.clone();
    let mut best_report = None;
    let mut step = 0u64;
    let mut epochs_run = 0;
    let mut epoch_seconds = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let order = epoch_order(train_idx.len(), &mut order_rng);
        let (mut running, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &encoded[train_idx[i]]).collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let mut ctx = Ctx::train(&mut dropout_rng);
            let b = Batch::from_pairs(batch.iter().map(|e| &e.pair))?;
            let features = model.net.backbone.forward(&mut g, &model.store, &b, &mut ctx)?;
            let out = head(model)?.forward(&mut g, &model.store, &features, &batch)?;
            let Some(loss) = out.loss else { continue };
            let value = g.value(loss.loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Run(format!("fine-tuning loss is {value} at step {}", step + 1)));
            }
            g.backward(loss.loss, &mut model.store)?;
            apply_update(&mut model.store, &mut adam, config.clip_norm)?;
            step += 1;
            running += value * batch.len() as f64;
            seen += batch.len();
            if config.eval_every > 0 && step % config.eval_every as u64 == 0 {
                history.push(step, "train", value, None);
            }
        }
        if config.eval_every == 0 {
            history.push(step, "train", running / seen.max(1) as f64, None);
        }
        let (report, val_loss) = report_for(model, &val, config.batch_size)?;
        history.push(step, "val", val_loss, Some(report.f1()));
        epochs_run = epoch;
        let seconds = started.elapsed().as_secs_f64();
        epoch_seconds.push(seconds);
        let verdict = stopper.observe_with_tiebreak(report.f1(), Some(val_loss).filter(|l| l.is_finite()));
        log.event(
            "epoch",
            json!({"epoch": epoch, "step": step, "val_loss": val_loss, "val_f1": report.f1(), "seconds": seconds}),
        )?;
        if verdict == Verdict::Improved {
            best = model.store.clone();
            if let Some(path) = &config.checkpoint {
                let meta = BTreeMap::from([
                    ("epoch".to_string(), epoch.to_string()),
                    ("val_f1".to_string(), report.f1().to_string()),
                ]);
                model.save(path, meta)?;
            }
            best_report = Some(report);
        }
        if verdict == Verdict::Stop {
            break;
        }
    }
    model.store.load_values_from(&best)?;
    model.store.zero_grad();
    let report = match best_report {
        Some(r) => r,
        None => report_for(model, &val, config.batch_size)?.0,
    };
    log.event("finetune_end", json!({"best_epoch": stopper.best_epoch(), "val_f1": report.f1()}))?;
    Ok(FineTuneOutcome {
        history,
        report,
        best_epoch: stopper.best_epoch(),
        epochs_run,
        steps: step,
        trainable_parameters,
        epoch_seconds,
    })
}
