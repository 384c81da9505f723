//! Pretraining loop: masked-token loss for encoders, next-token loss for
//! decoders, Adam with warmup and linear decay.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::NewsItem;
use crate::model::{clm_loss_on_tape, mask_for_mlm, mlm_loss_on_tape, ArchKind, MaskedSequence, MiniLlm};
use crate::optim::{lr_at_step, Adam};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSchedule {
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            steps: 500,
            batch: 16,
            peak_lr: 3e-3,
            warmup: 50,
        }
    }
}

/// One sequence per news item, truncated to its most recent `max_len - 1`
/// tokens so the decoder's BOS still fits. Empty headlines are skipped.
pub fn corpus_from_news(news: &[NewsItem], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    let keep = max_len.saturating_sub(1);
    news.iter()
        .map(|n| vocab.tokenize(&n.text).0)
        .filter(|ids| !ids.is_empty())
        .map(|ids| TokenSequence(ids[ids.len().saturating_sub(keep)..].to_vec()))
        .collect()
}

/// Loss and parameter gradients for a batch, averaged over its members.
/// Members run in parallel, each on its own tape; the reduction walks them in
/// batch order so results do not depend on thread scheduling.
pub(crate) fn batch_gradients<T, F>(
    params: &ParamStore,
    batch: &[T],
    per_item: F,
) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> Result<crate::tape::Var> + Sync,
{
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let loss = per_item(&mut tape, item)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?.for_store(params);
            Ok((value, grads))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        g.scale_assign(scale);
    }
    Ok((total * scale, sum))
}

/// Trains every parameter of `model` on `corpus` and returns the pre-update
/// batch loss of each step.
///
/// The learning rate at step `s` (0-based) is `lr_at_step(s + 1, warmup,
/// steps + 1, peak_lr)`, so no update runs at a zero rate.
pub fn pretrain(
    mut model: MiniLlm,
    corpus: &[TokenSequence],
    schedule: &PretrainSchedule,
    seed: u64,
) -> Result<(MiniLlm, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Precondition("pretraining corpus is empty".into()));
    }
    if schedule.batch == 0 || schedule.steps == 0 {
        return Err(Error::Config("pretraining needs positive steps and batch".into()));
    }
    let limit = model.config.max_len;
    if let Some(seq) = corpus.iter().find(|s| s.len() > limit) {
        return Err(Error::Length {
            len: seq.len(),
            max_len: limit,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(schedule.steps as usize);

    for step in 0..schedule.steps {
        let mut picked = Vec::with_capacity(schedule.batch);
        while picked.len() < schedule.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&corpus[order[cursor]]);
            cursor += 1;
        }

        let (loss, grads) = match model.config.arch {
            ArchKind::Encoder => {
                let masked: Vec<MaskedSequence> = picked
                    .iter()
                    .map(|s| mask_for_mlm(s, model.config.mask_prob, &mut rng))
                    .collect::<Result<_>>()?;
                batch_gradients(&model.params, &masked, |tape, m| {
                    mlm_loss_on_tape(&model, tape, &model.params, m)
                })?
            }
            ArchKind::Decoder => batch_gradients(&model.params, &picked, |tape, s| {
                clm_loss_on_tape(&model, tape, &model.params, s)
            })?,
        };
        losses.push(loss);

        let lr = lr_at_step(step + 1, schedule.warmup, schedule.steps + 1, schedule.peak_lr)?;
        adam.step(&mut model.params, &grads, lr)?;
    }
    Ok((model, losses))
}
