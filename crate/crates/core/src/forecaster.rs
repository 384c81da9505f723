//! Return forecasting on top of a pretrained [`MiniLlm`]: low-rank adapters
//! on every attention and feed-forward linear map, a pooled sequence
//! representation and an affine head `r̂ = w·h + b`, fine-tuned on squared
//! error.
//!
//! Two pooling modes turn the `L x D` hidden states into one vector:
//!
//! * [`PoolingMode::Bottleneck`] reads the row of the appended end token;
//! * [`PoolingMode::Aggregated`] averages every non-padding row, the end
//!   token included.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::Instance;
use crate::model::{HiddenStates, LoraConfig, MiniLlm, INIT_STD};
use crate::optim::{lr_at_step, Adam};
use crate::params::ParamStore;
use crate::pretrain::batch_gradients;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_OFFSET: &str = "head.offset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Bottleneck,
    Aggregated,
}

/// Adds rank-`rank` adapters to every attention and feed-forward linear map
/// and freezes all existing parameters. `A` is Gaussian (std 0.02) and `B` is
/// zero, so the adapted model computes exactly what the base model did.
pub fn attach_lora(mut model: MiniLlm, rank: usize, alpha: f64, seed: u64) -> Result<MiniLlm> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
    }
    if model.lora.is_some() {
        return Err(Error::Config("model already carries adapters".into()));
    }
    let layers = model.config.linear_layers();
    if let Some((name, fan_in, fan_out)) = layers.iter().find(|(_, i, o)| rank > (*i).min(*o)) {
        return Err(Error::Config(format!(
            "rank {rank} exceeds {name} dimensions {fan_out}x{fan_in}"
        )));
    }
    model.params.set_all_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, fan_in, fan_out) in layers {
        model.params.insert(
            format!("{name}.lora_a"),
            Tensor::randn(rank, fan_in, INIT_STD, &mut rng).with_requires_grad(true),
        );
        model.params.insert(
            format!("{name}.lora_b"),
            Tensor::zeros(fan_out, rank).with_requires_grad(true),
        );
    }
    model.lora = Some(LoraConfig { rank, alpha });
    Ok(model)
}

/// Trainable parameter count `Σ r·(in + out)` over adapted maps.
pub fn lora_parameter_count(model: &MiniLlm) -> usize {
    model
        .params
        .iter()
        .filter(|(n, _)| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
        .map(|(_, t)| t.numel())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastHead {
    pub weight: Vec<f64>,
    pub offset: f64,
}

impl ForecastHead {
    pub fn zeros(d_model: usize) -> Self {
        ForecastHead {
            weight: vec![0.0; d_model],
            offset: 0.0,
        }
    }

    /// Gaussian weights with std 0.02 and zero offset.
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(1, d_model, INIT_STD, &mut rng);
        ForecastHead {
            weight: t.into_data(),
            offset: 0.0,
        }
    }

    pub fn apply(&self, pooled: &[f64]) -> f64 {
        self.weight.iter().zip(pooled).map(|(w, h)| w * h).sum::<f64>() + self.offset
    }
}

/// The row of the end token.
pub fn pool_bottleneck(hidden: &HiddenStates, eos_position: usize, eos_token: usize) -> Result<Vec<f64>> {
    if eos_position >= hidden.valid_length {
        return Err(Error::Contract(format!(
            "end-token position {eos_position} outside valid length {}",
            hidden.valid_length
        )));
    }
    if hidden.token_ids.get(eos_position) != Some(&eos_token) {
        return Err(Error::Contract(format!("no end token at position {eos_position}")));
    }
    Ok(hidden.row(eos_position).to_vec())
}

/// Mean of the non-padding rows.
pub fn pool_aggregated(hidden: &HiddenStates) -> Result<Vec<f64>> {
    let n = hidden.valid_length;
    if n == 0 {
        return Err(Error::Precondition("no valid rows to average".into()));
    }
    let d = hidden.states.cols();
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(hidden.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// A language model, its pooling mode and a forecasting head sharing one
/// parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnForecaster {
    pub model: MiniLlm,
    pub pooling: PoolingMode,
}

impl ReturnForecaster {
    pub fn new(mut model: MiniLlm, head: ForecastHead, pooling: PoolingMode) -> Result<Self> {
        let d = model.config.d_model;
        if head.weight.len() != d {
            return Err(Error::dim("forecast_head", format!("{} weights for D={d}", head.weight.len())));
        }
        model
            .params
            .insert(HEAD_WEIGHT, Tensor::row_vector(head.weight).with_requires_grad(true));
        model
            .params
            .insert(HEAD_OFFSET, Tensor::scalar(head.offset).with_requires_grad(true));
        Ok(ReturnForecaster { model, pooling })
    }

    /// Attaches adapters per `config` and a fresh head to a pretrained model.
    pub fn from_pretrained(model: MiniLlm, config: &FineTuneConfig, seed: u64) -> Result<Self> {
        let d = model.config.d_model;
        let adapted = attach_lora(model, config.lora_rank, config.lora_alpha, seed)?;
        Self::new(adapted, ForecastHead::init(d, seed.wrapping_add(1)), config.pooling)
    }

    pub fn head(&self) -> ForecastHead {
        ForecastHead {
            weight: self.model.params.get(HEAD_WEIGHT).expect("head weight").data().to_vec(),
            offset: self.model.params.get(HEAD_OFFSET).expect("head offset").item(),
        }
    }

    /// Records `r̂` for one sequence as a `1 x 1` node.
    pub fn forecast_on_tape(&self, tape: &mut Tape, params: &ParamStore, seq: &TokenSequence) -> Result<Var> {
        let hidden = self.model.forward_with(tape, params, seq.ids())?;
        let valid = seq.valid_length();
        let pooled = match self.pooling {
            PoolingMode::Bottleneck => {
                let eos = valid - 1;
                if seq.ids()[eos] != self.model.eos_token() {
                    return Err(Error::Contract(format!("no end token at position {eos}")));
                }
                tape.slice_rows(hidden, eos, 1)?
            }
            PoolingMode::Aggregated => {
                let rows = tape.slice_rows(hidden, 0, valid)?;
                tape.mean_rows(rows)?
            }
        };
        let w = tape.param(params, HEAD_WEIGHT)?;
        let b = tape.param(params, HEAD_OFFSET)?;
        let dot = tape.matmul_nt(pooled, w)?;
        tape.add(dot, b)
    }

    fn squared_error_on_tape(&self, tape: &mut Tape, params: &ParamStore, inst: &Instance) -> Result<Var> {
        let f = self.forecast_on_tape(tape, params, &inst.sequence)?;
        let y = tape.constant(Tensor::scalar(inst.label))?;
        let diff = tape.sub(f, y)?;
        tape.mul(diff, diff)
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let f = self.forecast_on_tape(&mut tape, &self.model.params, seq)?;
        Ok(tape.value(f).item())
    }

    /// Forecasts for many instances, computed in parallel.
    pub fn predict_all(&self, instances: &[Instance]) -> Result<Vec<f64>> {
        instances.par_iter().map(|i| self.predict(&i.sequence)).collect()
    }

    pub fn mse(&self, instances: &[Instance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Precondition("no instances to score".into()));
        }
        let preds = self.predict_all(instances)?;
        let sse: f64 = preds.iter().zip(instances).map(|(p, i)| (p - i.label).powi(2)).sum();
        Ok(sse / instances.len() as f64)
    }

    /// Mean squared error of a batch with its parameter gradients.
    pub fn batch_mse_gradients(&self, batch: &[&Instance]) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let params = &self.model.params;
        batch_gradients(params, batch, |tape, inst| self.squared_error_on_tape(tape, params, inst))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.model.save(dir, stem)?;
        let path = dir.join(format!("{stem}.pooling.json"));
        fs::write(&path, serde_json::to_string(&self.pooling).expect("pooling serialises"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mut model = MiniLlm::load(dir, stem)?;
        let path = dir.join(format!("{stem}.pooling.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let pooling = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        model.params.require(HEAD_WEIGHT)?;
        model.params.require(HEAD_OFFSET)?;
        for (name, t) in model.params.iter_mut() {
            let trainable = name.starts_with("head.") || name.ends_with(".lora_a") || name.ends_with(".lora_b");
            t.set_requires_grad(trainable);
        }
        Ok(ReturnForecaster { model, pooling })
    }
}

pub fn predict_return(forecaster: &ReturnForecaster, instance: &Instance) -> Result<f64> {
    forecaster.predict(&instance.sequence)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub pooling: PoolingMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for FineTuneConfig {
    /// Batch 32, learning rate 1e-5, 100 warmup steps, 10 epochs, rank-4
    /// adapters with `alpha = rank`, aggregated pooling.
    fn default() -> Self {
        FineTuneConfig {
            batch_size: 32,
            peak_lr: 1e-5,
            warmup_steps: 100,
            epochs: 10,
            pooling: PoolingMode::Aggregated,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    /// Training-set MSE before the first update.
    pub initial_train_mse: f64,
    /// Pre-update batch MSE of every step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses within each epoch.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Minimises batch MSE over the adapters and head. Returns the parameters of
/// the epoch with the lowest validation MSE (the last epoch when `val` is
/// empty).
pub fn finetune(
    mut forecaster: ReturnForecaster,
    train: &[Instance],
    val: &[Instance],
    config: &FineTuneConfig,
    seed: u64,
) -> Result<(ReturnForecaster, FineTuneReport)> {
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("fine-tuning needs positive batch size and epochs".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = (steps_per_epoch * config.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new();
    let mut report = FineTuneReport {
        initial_train_mse: forecaster.mse(train)?,
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = forecaster.batch_mse_gradients(&batch)?;
            report.step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
            let lr = lr_at_step(step, config.warmup_steps, total + 1, config.peak_lr)?;
            adam.step(&mut forecaster.model.params, &grads, lr)?;
        }
        report.train_mse.push(epoch_loss / steps_per_epoch as f64);

        let score = if val.is_empty() {
            // without validation data the latest epoch wins
            -(epoch as f64)
        } else {
            let v = forecaster.mse(val)?;
            report.val_mse.push(v);
            v
        };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, trainable_snapshot(&forecaster.model.params)));
            report.best_epoch = epoch;
        }
    }

    if let Some((_, snapshot)) = best {
        for (name, t) in snapshot.iter() {
            *forecaster.model.params.get_mut(name).expect("snapshot name") = t.clone();
        }
    }
    Ok((forecaster, report))
}

fn trainable_snapshot(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
        out.insert(name.clone(), t.clone());
    }
    out
}
