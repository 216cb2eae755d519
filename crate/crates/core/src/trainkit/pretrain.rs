use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::{Graph, Var};
use serde_json::json;

use super::{apply_update, carve_validation, epoch_order, DistillConfig, EarlyStopping, Goal, History, RunLog, TrainRunConfig, Verdict};
use crate::datapipe::TrainingInstance;
use crate::encoder::{Batch, Ctx};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{distill_loss, select_positions};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub history: History,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub epoch_seconds: Vec<f64>,
}

fn masked_positions(instances: &[&TrainingInstance]) -> Vec<(usize, usize)> {
    instances
        .iter()
        .enumerate()
        .flat_map(|(s, inst)| inst.masked_positions.iter().map(move |&p| (s, p)))
        .collect()
}

/// Teacher MLM distribution at the masked positions, softened by `temperature`.
fn teacher_probs(
    teacher: &Model,
    instances: &[&TrainingInstance],
    temperature: f64,
) -> Result<Option<redbert_tensor::Tensor<f32>>> {
    let positions = masked_positions(instances);
    if positions.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let batch = Batch::from_pairs(instances.iter().map(|i| &i.pair))?;
    let features = teacher.net.backbone.forward(&mut g, &teacher.store, &batch, &mut ctx)?;
    let rows = select_positions(&mut g, features.output, &positions)?;
    let logits = teacher.net.mlm.logits(&mut g, &teacher.store, rows)?;
    let scaled = g.scale(logits, 1.0 / temperature as f32);
    let probs = g.softmax(scaled, 1)?;
    Ok(Some(g.value(probs).clone()))
}

fn batch_loss(
    model: &Model,
    g: &mut Graph<f32>,
    instances: &[&TrainingInstance],
    config: &TrainRunConfig,
    teacher: Option<(&Model, DistillConfig)>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let out = model.net.loss(g, &model.store, instances, config.weights, ctx)?;
    let (Some((teacher, d)), Some(mlm)) = (teacher, out.mlm.loss) else {
        return Ok(out.total);
    };
    let Some(probs) = teacher_probs(teacher, instances, d.temperature)? else {
        return Ok(out.total);
    };
    let soft = distill_loss(g, mlm.logits, &probs, d.temperature)?;
    let soft = g.scale(soft, d.weight as f32);
    Ok(g.add(out.total, soft)?)
}

/// Mean joint loss over `instances` in evaluation mode (no dropout).
pub fn validation_loss(model: &Model, instances: &[&TrainingInstance], config: &TrainRunConfig) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in instances.chunks(config.batch_size) {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut rng);
        let loss = model.net.loss(&mut g, &model.store, chunk, config.weights, &mut ctx)?.total;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / instances.len() as f64)
}

fn save_state(model: &Model, config: &TrainRunConfig, meta: &[(&str, String)]) -> Result<()> {
    if let Some(path) = &config.checkpoint {
        let meta: BTreeMap<String, String> = meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        model.save(path, meta)?;
    }
    Ok(())
}

fn diverged(model: &Model, config: &TrainRunConfig, step: u64, what: String) -> Error {
    if let Err(e) = save_state(model, config, &[("status", "diverged".into()), ("step", step.to_string())]) {
        return e;
    }
    Error::Run(format!("pretraining diverged after step {step}: {what}"))
}

/// Joint NSP + MLM pretraining with Adam, early stopping on validation loss,
/// and best-epoch restore. The validation slice is carved from `instances`.
///
/// A non-finite loss or gradient aborts with [`Error::Run`]; the parameters
/// (and the checkpoint, when configured) keep the last finite state.
pub fn pretrain(
    model: &mut Model,
    instances: &[TrainingInstance],
    config: &TrainRunConfig,
    teacher: Option<&Model>,
    log: &mut RunLog,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::Data("no pretraining instances".into()));
    }
    let teacher = match (teacher, config.distill) {
        (Some(t), Some(d)) => {
            if t.vocab != model.vocab {
                return Err(Error::Config("teacher and student vocabularies differ".into()));
            }
            Some((t, d))
        }
        (None, Some(_)) => return Err(Error::Config("distillation configured without a teacher".into())),
        _ => None,
    };
    let (train_idx, mut val_idx) = carve_validation(instances.len(), config.validation_fraction, config.seed);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let val: Vec<&TrainingInstance> = val_idx.iter().map(|&i| &instances[i]).collect();
    log.event(
        "pretrain_start",
        json!({"train": train_idx.len(), "validation": val.len(), "parameters": model.count_parameters()}),
    )?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);
    let mut adam = config.adam();
    let mut stopper = EarlyStopping::new(Goal::Minimize, config.patience);
    let mut history = History::default();
    let mut best = model.store.clone();
    let mut step = 0u64;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    let mut epoch_seconds = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let order = epoch_order(train_idx.len(), &mut order_rng);
        let (mut running, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &instances[train_idx[i]]).collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let mut ctx = Ctx::train(&mut dropout_rng);
            let loss = batch_loss(model, &mut g, &batch, config, teacher, &mut ctx)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(diverged(model, config, step, format!("loss is {value}")));
            }
            g.backward(loss, &mut model.store)?;
            if let Err(e) = apply_update(&mut model.store, &mut adam, config.clip_norm) {
                return Err(diverged(model, config, step, e.to_string()));
            }
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
        let val_loss = validation_loss(model, &val, config)?;
        if !val_loss.is_finite() {
            return Err(diverged(model, config, step, format!("validation loss is {val_loss} after epoch {epoch}")));
        }
        history.push(step, "val", val_loss, None);
        epochs_run = epoch;
        let seconds = started.elapsed().as_secs_f64();
        epoch_seconds.push(seconds);
        let verdict = stopper.observe(val_loss);
        log.event(
            "epoch",
            json!({"epoch": epoch, "step": step, "val_loss": val_loss, "seconds": seconds, "improved": verdict == Verdict::Improved}),
        )?;
        if verdict == Verdict::Improved {
            best = model.store.clone();
            save_state(
                model,
                config,
                &[("epoch", epoch.to_string()), ("step", step.to_string()), ("val_loss", val_loss.to_string())],
            )?;
        }
        if verdict == Verdict::Stop {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    model.store.load_values_from(&best)?;
    model.store.zero_grad();
    log.event("pretrain_end", json!({"best_epoch": stopper.best_epoch(), "steps": step}))?;
    Ok(PretrainOutcome {
        history,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best().unwrap_or(f64::NAN),
        epochs_run,
        steps: step,
        stopped_early,
        epoch_seconds,
    })
}

/// Repeated updates on one fixed batch. Returns the loss seen before each
/// update; stops once the loss falls below `target`.
pub fn fit_batch(
    model: &mut Model,
    instances: &[TrainingInstance],
    config: &TrainRunConfig,
    max_steps: usize,
    target: Option<f64>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let batch: Vec<&TrainingInstance> = instances.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut adam = config.adam();
    let mut losses = Vec::with_capacity(max_steps);
    for step in 0..max_steps {
        model.store.zero_grad();
        let mut g = Graph::new();
        let mut ctx = Ctx::train(&mut rng);
        let loss = model.net.loss(&mut g, &model.store, &batch, config.weights, &mut ctx)?.total;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Run(format!("loss is {value} at step {}", step + 1)));
        }
        losses.push(value);
        if target.is_some_and(|t| value < t) {
            break;
        }
        g.backward(loss, &mut model.store)?;
        apply_update(&mut model.store, &mut adam, config.clip_norm)?;
    }
    model.store.zero_grad();
    Ok(losses)
}
