//! Adam optimization of the trainable parameters, the epoch loop, and
//! checkpointing.
//!
//! Each step binds the parameter set onto a fresh tape, computes the batch
//! loss, backpropagates, and applies a bias-corrected Adam update to every
//! trainable tensor. Mini-batch order comes from a dedicated shuffle stream
//! of the experiment seed, so a (config, seed) pair fully determines the
//! trained parameters, the loss history, and every report.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{streams, stream_rng, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{Model, ScoringContext};
use crate::space::{Split, World};
use crate::tensor::{bind, Bindings, Gradients, ParamSet, Tape};

// ── Adam ────────────────────────────────────────────────────────────────

/// Optimizer hyperparameters.
#[derive(Copy, Clone, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> AdamHyper {
        AdamHyper { lr: 5e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments plus the shared step count.
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    moments: BTreeMap<usize, Moments>,
}

impl AdamState {
    /// Zero moments for every trainable parameter of the set.
    pub fn new(set: &ParamSet, hyper: AdamHyper) -> AdamState {
        let moments = set
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let n = p.numel();
                (id.index(), Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        AdamState { hyper, step: 0, moments }
    }

    /// Mini-batches processed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter.
/// Frozen parameters are untouched; a trainable parameter the loss never
/// reached is a wiring bug and rejected.
pub fn adam_step(
    set: &mut ParamSet,
    bindings: &Bindings,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);

    let ids: Vec<_> = set.ids().collect();
    for id in ids {
        if !set.get(id).trainable {
            continue;
        }
        let grad = grads.wrt(bindings.tensor(id)).ok_or_else(|| {
            Error::Contract(format!(
                "no gradient for trainable parameter {}",
                set.get(id).name
            ))
        })?;
        let grad = grad.to_vec();
        let param = set.get_mut(id);
        let slot = state.moments.get_mut(&id.index()).ok_or_else(|| {
            Error::Contract(format!("parameter {} unknown to the optimizer", param.name))
        })?;
        if grad.len() != param.values.len() {
            return Err(Error::Contract(format!(
                "gradient size {} does not match parameter {} size {}",
                grad.len(),
                param.name,
                param.values.len()
            )));
        }
        for i in 0..grad.len() {
            slot.m[i] = h.beta1 * slot.m[i] + (1.0 - h.beta1) * grad[i];
            slot.v[i] = h.beta2 * slot.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            param.values[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

// ── History ─────────────────────────────────────────────────────────────

/// Numeric snapshot of one step's loss breakdown.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

/// Losses per step and validation reports per epoch.
#[derive(Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepLoss>,
    pub epoch_reports: Vec<EvalReport>,
}

impl TrainHistory {
    /// Per-step loss CSV: step, one column per term, then the total.
    pub fn loss_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.steps.first() {
            let mut cols = vec!["step".to_string()];
            cols.extend(first.terms.iter().map(|(n, _)| n.clone()));
            cols.push("total".to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        for (step, loss) in self.steps.iter().enumerate() {
            let mut cols = vec![step.to_string()];
            cols.extend(loss.terms.iter().map(|(_, v)| format!("{v:.17e}")));
            cols.push(format!("{:.17e}", loss.total));
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    /// Mean total loss over one epoch's steps, given the epoch boundaries.
    pub fn epoch_mean_total(&self, epoch: usize, steps_per_epoch: usize) -> f64 {
        let slice = &self.steps[epoch * steps_per_epoch..(epoch + 1) * steps_per_epoch];
        slice.iter().map(|s| s.total).sum::<f64>() / slice.len() as f64
    }
}

// ── Epoch loop ──────────────────────────────────────────────────────────

/// One pass over the training set in seeded-shuffle order.
pub fn train_epoch(
    model: &mut Model,
    ctx: &ScoringContext,
    train: &[Sample],
    batch_size: usize,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
        let tape = Tape::new();
        let bindings = bind(&tape, &model.params, true)?;
        let breakdown = model.batch_loss(&tape, &bindings, ctx, &batch)?;
        let grads = tape.backward(&breakdown.total)?;
        adam_step(&mut model.params, &bindings, &grads, adam)?;
        history.steps.push(StepLoss { terms: breakdown.terms.clone(), total: breakdown.total_value });
    }
    Ok(())
}

/// Training-run settings beyond the model itself.
#[derive(Copy, Clone, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
    /// World used for the per-epoch validation report.
    pub world: World,
    /// Finite points of the validation bias sweep.
    pub sweep_points: usize,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            epochs: 20,
            batch_size: 16,
            hyper: AdamHyper::default(),
            seed: 0,
            world: World::Open,
            sweep_points: 21,
        }
    }
}

/// Train for the configured epochs, evaluating on validation after each,
/// then optionally write a checkpoint stamped with the config hash.
pub fn fit(
    model: &mut Model,
    dataset: &Dataset,
    split: &Split,
    cfg: &FitConfig,
    config_hash: u64,
    checkpoint: Option<&Path>,
) -> Result<TrainHistory> {
    let train_ctx = model.train_context(split)?;
    let eval_ctx = model.eval_context(split, cfg.world)?;
    let mut adam = AdamState::new(&model.params, cfg.hyper);
    let mut rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut history = TrainHistory::default();
    for _ in 0..cfg.epochs {
        train_epoch(
            model,
            &train_ctx,
            &dataset.train,
            cfg.batch_size,
            &mut adam,
            &mut rng,
            &mut history,
        )?;
        let scores = model.score_samples(&eval_ctx, &dataset.val)?;
        history.epoch_reports.push(metrics::evaluate(cfg.world, &scores, cfg.sweep_points)?);
    }
    if let Some(path) = checkpoint {
        save_checkpoint(path, config_hash, &model.params)?;
    }
    Ok(history)
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_HEADER: &str = "MFSB-CHECKPOINT v1";

/// Write every trainable tensor (name, shape, bit-exact values) plus the
/// config hash to a text checkpoint.
pub fn save_checkpoint(path: &Path, config_hash: u64, set: &ParamSet) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("config_hash {config_hash:016x}\n"));
    let trainable: Vec<_> = set.iter().filter(|(_, p)| p.trainable).collect();
    out.push_str(&format!("tensors {}\n", trainable.len()));
    for (_, p) in trainable {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor {} {}\n", p.name, dims.join(" ")));
        let words: Vec<String> = p.values.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint into a freshly initialized parameter set, verifying
/// the header, the config hash, and every tensor's shape.
pub fn load_checkpoint(path: &Path, expected_hash: u64, set: &mut ParamSet) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Format(format!("checkpoint truncated before {what}")))
    };

    let header = next("header")?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Format(format!("bad checkpoint header: {header:?}")));
    }
    let hash_line = next("config hash")?;
    let hash = hash_line
        .strip_prefix("config_hash ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Format(format!("bad config hash line: {hash_line:?}")))?;
    if hash != expected_hash {
        return Err(Error::Format(format!(
            "checkpoint was written for config {hash:016x}, expected {expected_hash:016x}"
        )));
    }
    let count_line = next("tensor count")?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad tensor count line: {count_line:?}")))?;

    let mut loaded: Vec<String> = Vec::with_capacity(count);
    for _ in 0..count {
        let head = next("tensor header")?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Format(format!("bad tensor header: {head:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Format("tensor header missing name".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dimension in {head:?}"))))
            .collect::<Result<_>>()?;
        let id = set
            .by_name(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} unknown to this model")))?;
        if set.get(id).shape != shape {
            return Err(Error::Format(format!(
                "tensor {} shape {:?} does not match checkpoint shape {:?}",
                name,
                set.get(id).shape,
                shape
            )));
        }
        let data = next("tensor values")?;
        let values: Vec<f64> = data
            .split_whitespace()
            .map(|w| {
                u64::from_str_radix(w, 16)
                    .map(f64::from_bits)
                    .map_err(|_| Error::Format(format!("bad value word {w:?} in tensor {name}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != set.get(id).numel() {
            return Err(Error::Format(format!(
                "tensor {} has {} values, expected {}",
                name,
                values.len(),
                set.get(id).numel()
            )));
        }
        set.get_mut(id).values = values;
        loaded.push(name);
    }

    for (_, p) in set.iter() {
        if p.trainable && !loaded.contains(&p.name) {
            return Err(Error::Format(format!("checkpoint is missing trainable tensor {}", p.name)));
        }
    }
    Ok(())
}
