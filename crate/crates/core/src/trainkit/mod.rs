//! Training loops, early stopping, metrics, and run logging.

mod finetune;
mod metrics;
mod pretrain;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::{clip_grad_norm, AdamConfig, AdamState, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::objectives::JointWeights;

pub use finetune::{evaluate, evaluate_with_loss, fine_tune, predict, prepare_task, FineTuneOutcome};
pub(crate) use metrics::csv_field;
pub use metrics::{evaluate_f1, ClassMetrics, MetricReport};
pub use pretrain::{fit_batch, pretrain, validation_loss, PretrainOutcome};

/// Soft-target distillation from a teacher's MLM distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub weight: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Record the training loss every this many steps (0: once per epoch).
    pub eval_every: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub weights: JointWeights,
    /// Train the task head only.
    pub freeze_encoder: bool,
    pub distill: Option<DistillConfig>,
    /// Where the best (and, on divergence, last finite) state is written.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-5,
            max_epochs: 3,
            patience: 3,
            seed: 0,
            eval_every: 0,
            clip_norm: 1.0,
            validation_fraction: 0.1,
            weights: JointWeights::default(),
            freeze_encoder: false,
            distill: None,
            checkpoint: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if let Some(d) = &self.distill {
            if !(d.temperature > 0.0) || !(d.weight >= 0.0) {
                return bad(format!("invalid distillation settings {d:?}"));
            }
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamState<f32> {
        AdamState::new(AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on one validation metric per epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub goal: Goal,
    pub patience: usize,
    best: Option<f64>,
    best_loss: Option<f64>,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(goal: Goal, patience: usize) -> Self {
        Self {
            goal,
            patience,
            best: None,
            best_loss: None,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    /// Records the metric for the next epoch. NaN never counts as an
    /// improvement.
    pub fn observe(&mut self, value: f64) -> Verdict {
        self.observe_with_tiebreak(value, None)
    }

    /// Like [`observe`](Self::observe), but a tie on `value` counts as an
    /// improvement when `loss` is strictly lower than the best epoch's.
    pub fn observe_with_tiebreak(&mut self, value: f64, loss: Option<f64>) -> Verdict {
        self.epoch += 1;
        let better = match (self.best, self.goal) {
            _ if value.is_nan() => false,
            (None, _) => true,
            (Some(b), _) if value == b => match (loss, self.best_loss) {
                (Some(l), Some(bl)) => l < bl,
                _ => false,
            },
            (Some(b), Goal::Minimize) => value < b,
            (Some(b), Goal::Maximize) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_loss = loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best value (0 before any observation).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub f1: Option<f64>,
}

/// Loss curves, written as `step,split,loss,f1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<LossRecord>,
}

impl History {
    pub fn push(&mut self, step: u64, split: &str, loss: f64, f1: Option<f64>) {
        self.records.push(LossRecord {
            step,
            split: split.to_string(),
            loss,
            f1,
        });
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &LossRecord> + '_ {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,loss,f1\n");
        for r in &self.records {
            let f1 = r.f1.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.step, r.split, r.loss, f1);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// JSON-lines event log. A log without a path discards events.
#[derive(Debug, Default)]
pub struct RunLog {
    path: Option<PathBuf>,
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(std::io::BufWriter::new(file)),
        })
    }

    pub fn discard() -> Self {
        Self::default()
    }

    pub fn event(&mut self, name: &str, fields: serde_json::Value) -> Result<()> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), name.into());
        if let serde_json::Value::Object(extra) = fields {
            obj.extend(extra);
        }
        let path = self.path.as_deref().unwrap_or(Path::new(""));
        serde_json::to_writer(&mut *file, &obj)?;
        file.write_all(b"\n").map_err(io_err(path))?;
        file.flush().map_err(io_err(path))
    }
}

/// Deterministic split of `n` items into (train, validation) index lists.
/// At least one validation item is carved when `fraction > 0` and `n > 1`;
/// with a single item the validation set reuses it.
pub fn carve_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    idx.shuffle(&mut rng);
    if fraction <= 0.0 || n == 0 {
        return (idx, Vec::new());
    }
    if n == 1 {
        return (idx.clone(), idx);
    }
    let v = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - v);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Clips, checks, and applies one optimizer update. Non-finite gradients
/// are a run error and leave the parameters untouched.
pub(crate) fn apply_update(store: &mut ParamStore<f32>, adam: &mut AdamState<f32>, clip_norm: f64) -> Result<()> {
    let norm = if clip_norm > 0.0 {
        clip_grad_norm(store, clip_norm)
    } else {
        redbert_tensor::grad_norm(store)
    };
    if !norm.is_finite() {
        return Err(Error::Run(format!("gradient norm is {norm}")));
    }
    adam.step(store)?;
    Ok(())
}
