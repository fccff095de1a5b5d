//! The training loop and its serialized outcome.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::data::{batches, Batch, DataBudget, Split};
use crate::error::{Error, Result};
use crate::model::{lm_loss, ForwardOptions, Gpt, ModelConfig};
use crate::tensor::Tensor;
use crate::train::adamw::{clip_grad_norm, AdamW, AdamWParams};
use crate::train::checkpoint;
use crate::train::config::TrainConfig;

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Evaluation batches are drawn from this stream, independent of the run
/// seed, so every run on one split is scored on the same windows.
const EVAL_STREAM: u64 = 0x5EED_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    Collapsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Outcome of one (config, seed, data budget) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub variant: String,
    pub scale: String,
    pub n_params: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data_budget: DataBudget,
    pub data_source: String,
    pub effective_batch: usize,
    pub trace: Vec<EvalPoint>,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub train_val_gap: Option<f64>,
    pub wall_seconds: f64,
    pub status: RunStatus,
    #[serde(default)]
    pub saturation: Option<f64>,
    #[serde(default)]
    pub note: Option<String>,
}

impl RunRecord {
    /// Recomputes the summary fields from `trace`.
    pub fn summarize(&mut self) {
        let best = self
            .trace
            .iter()
            .filter(|p| p.val_loss.is_finite())
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
        self.best_val_loss = best.map(|p| p.val_loss);
        self.best_step = best.map(|p| p.step);
        let last = self.trace.last();
        self.final_train_loss = last.map(|p| p.train_loss);
        self.train_val_gap = last.map(|p| p.val_loss - p.train_loss);
    }

    /// Running minimum of validation loss over the trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|p| {
                best = best.min(p.val_loss);
                best
            })
            .collect()
    }
}

/// Hash of everything that defines a condition except the seed, so seeds
/// of one condition share it.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig, budget: &DataBudget) -> String {
    let train = TrainConfig { seed: 0, ..train.clone() };
    let budget = DataBudget { seed: 0, ..*budget };
    let json = serde_json::to_string(&(model, &train, &budget)).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn run_id(model: &ModelConfig, train: &TrainConfig, budget: &DataBudget) -> String {
    format!(
        "{}-{}-t{}-s{}-{}",
        model.variant_label(),
        model.scale_label(),
        budget.train_tokens,
        train.seed,
        &config_hash(model, train, budget)[..8]
    )
}

/// Training and validation data for one run.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub train: &'a Split,
    pub val: &'a Split,
    pub budget: DataBudget,
    pub source: &'a str,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Final checkpoint goes to `<dir>/<run_id>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also writes `<dir>/<run_id>.step<N>.ckpt` at every evaluation.
    pub interval_checkpoints: bool,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalPoint)>,
    /// Ends the run early at this step while keeping the schedule of the
    /// full `max_steps` run (calibration prefixes).
    pub stop_after: Option<usize>,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub model: Gpt<f32>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// The fixed windows used to score a split.
pub fn eval_batches(split: &Split, batch_size: usize, block_size: usize, n: usize, budget_seed: u64) -> Result<Vec<Batch>> {
    (0..n as u64)
        .map(|i| batches(split, batch_size, block_size, mix(EVAL_STREAM, budget_seed), i))
        .collect()
}

/// Mean next-token loss over `batches` without building gradients.
pub fn mean_loss(model: &Gpt<f32>, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b.inputs, b.batch, ForwardOptions::eval())?;
        let loss = lm_loss(&mut g, out.logits, &b.targets)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Loss and gradients of one micro-batch.
pub fn loss_and_grads(model: &Gpt<f32>, batch: &Batch, dropout_seed: u64) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.inputs, batch.batch, ForwardOptions::training(dropout_seed))?;
    let loss = lm_loss(&mut g, out.logits, &batch.targets)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let tensors = out
        .params
        .iter()
        .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(g.shape(id).to_vec())))
        .collect();
    Ok((value, tensors))
}

/// Trains a fresh model seeded by `train.seed`. Numeric blow-ups end the
/// run with status `diverged` and keep the trace gathered so far.
pub fn train_run(model_cfg: &ModelConfig, train: &TrainConfig, data: RunData<'_>, mut opts: RunOptions<'_>) -> Result<RunOutput> {
    model_cfg.validate()?;
    train.validate()?;
    if data.train.vocab_size() > model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocab_size {}",
            data.train.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    let started = Instant::now();
    let mut model = Gpt::<f32>::new(model_cfg.clone(), train.seed)?;
    let run_id = run_id(model_cfg, train, &data.budget);
    let block = model_cfg.block_size;
    let train_eval = eval_batches(data.train, train.batch_size, block, train.eval_batches, data.budget.seed)?;
    let val_eval = eval_batches(data.val, train.batch_size, block, train.eval_batches, data.budget.seed)?;
    let decays: Vec<bool> = model.specs().iter().map(|s| s.decays()).collect();
    let mut opt = AdamW::new(model.tensors());
    let stream_seed = mix(train.seed, data.budget.seed);

    let mut record = RunRecord {
        schema_version: RUN_SCHEMA_VERSION,
        run_id: run_id.clone(),
        config_hash: config_hash(model_cfg, train, &data.budget),
        variant: model_cfg.variant_label(),
        scale: model_cfg.scale_label(),
        n_params: model.num_params(),
        model: model_cfg.clone(),
        train: train.clone(),
        seed: train.seed,
        data_budget: data.budget,
        data_source: data.source.to_string(),
        effective_batch: train.effective_batch(),
        trace: Vec::new(),
        best_val_loss: None,
        best_step: None,
        final_train_loss: None,
        train_val_gap: None,
        wall_seconds: 0.0,
        status: RunStatus::Completed,
        saturation: None,
        note: None,
    };

    let mut evaluate = |model: &Gpt<f32>, step: usize, record: &mut RunRecord| -> Result<bool> {
        let point = EvalPoint {
            step,
            train_loss: finite_or_nan(mean_loss(model, &train_eval))?,
            val_loss: finite_or_nan(mean_loss(model, &val_eval))?,
            lr: train.lr_at(step),
        };
        record.trace.push(point);
        if let Some(cb) = opts.on_eval.as_mut() {
            cb(&point);
        }
        if let (Some(dir), true) = (&opts.checkpoint_dir, opts.interval_checkpoints) {
            checkpoint::save(model, step, &dir.join(format!("{run_id}.step{step}.ckpt")))?;
        }
        Ok(point.train_loss.is_finite() && point.val_loss.is_finite())
    };

    let last = opts.stop_after.map_or(train.max_steps, |s| s.min(train.max_steps));
    let mut completed = true;
    for step in 0..last {
        if step % train.eval_interval == 0 && !evaluate(&model, step, &mut record)? {
            completed = false;
            record.note = Some(format!("non-finite evaluation loss at step {step}"));
            break;
        }
        match train_step(&mut model, &mut opt, train, &decays, data.train, stream_seed, step) {
            Ok(_) => {}
            Err(Error::NonFinite { op }) => {
                completed = false;
                record.note = Some(format!("non-finite value in {op} at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if completed && !evaluate(&model, last, &mut record)? {
        completed = false;
        record.note = Some("non-finite evaluation loss after the last step".into());
    }
    if !completed {
        record.status = RunStatus::Diverged;
    }
    record.summarize();
    record.wall_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint::save(&model, last, &dir.join(format!("{run_id}.ckpt")))?;
    }
    Ok(RunOutput { record, model })
}

fn finite_or_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NonFinite { .. }) => Ok(f64::NAN),
        other => other,
    }
}

/// One optimizer update with gradient accumulation and clipping; returns
/// the mean micro-batch loss and the pre-clip gradient norm.
pub fn train_step(
    model: &mut Gpt<f32>,
    opt: &mut AdamW,
    train: &TrainConfig,
    decays: &[bool],
    split: &Split,
    stream_seed: u64,
    step: usize,
) -> Result<(f64, f64)> {
    let block = model.config().block_size;
    let accum = train.grad_accum;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    let mut loss_sum = 0.0;
    for micro in 0..accum {
        let counter = (step * accum + micro) as u64;
        let batch = batches(split, train.batch_size, block, stream_seed, counter)?;
        let (loss, grads) = loss_and_grads(model, &batch, mix(stream_seed, counter))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        loss_sum += loss;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = total.expect("grad_accum ≥ 1");
    if accum > 1 {
        let s = 1.0 / accum as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    let norm = clip_grad_norm(&mut grads, train.grad_clip);
    let h = AdamWParams {
        lr: train.lr_at(step),
        beta1: train.betas.0,
        beta2: train.betas.1,
        eps: train.eps,
        weight_decay: train.weight_decay,
    };
    opt.step(model.tensors_mut(), &grads, decays, h)?;
    Ok((loss_sum / accum as f64, norm))
}
