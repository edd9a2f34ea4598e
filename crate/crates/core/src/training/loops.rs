use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::dataspec::{stratify, ModalitySpec, MultimodalTile};
use crate::error::{Error, Result};
use crate::objectives::ContrastiveMode;
use crate::tensor::Tensor;
use crate::tokenizer::{assemble_batch, TokenBatch};

use super::config::TrainConfig;
use super::metrics::{f1_scores, EpochRecord, F1Report};
use super::model::Model;
use super::optim::{adam_step, Adam, Plateau};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Probe,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Probe => "probe",
        }
    }
}

/// Optimizer, schedule and progress of a run; checkpointed with the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam,
    pub scheduler: Plateau,
}

impl TrainState {
    pub fn new(model: &Model, phase: Phase, cfg: &TrainConfig) -> Self {
        let lr = match phase {
            Phase::Pretrain => cfg.pretrain_lr,
            Phase::Finetune => cfg.finetune_lr,
            Phase::Probe => cfg.probe_lr,
        };
        TrainState { phase, epoch: 0, adam: Adam::new(&model.store), scheduler: Plateau::new(lr, cfg.patience, cfg.decay) }
    }
}

/// Called after every epoch with the record, the current model and state,
/// and whether the validation loss improved.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Model, &TrainState, bool) -> Result<()> + 'a;

/// Deterministic sub-seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn batches(n: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn assemble(tiles: &[MultimodalTile], idx: &[usize], specs: &[ModalitySpec]) -> Result<TokenBatch> {
    let sel: Vec<MultimodalTile> = idx.iter().map(|&i| tiles[i].clone()).collect();
    assemble_batch(&sel, specs)
}

fn labels_of(tiles: &[MultimodalTile], num_classes: usize) -> Result<Vec<Vec<u8>>> {
    tiles
        .iter()
        .map(|t| {
            let l = t
                .labels()?
                .ok_or_else(|| Error::Invalid(format!("tile `{}` has no labels", t.tile_id)))?;
            if l.len() != num_classes {
                return Err(Error::Shape(format!("tile `{}` has {} labels, expected {num_classes}", t.tile_id, l.len())));
            }
            Ok(l.to_vec())
        })
        .collect()
}

/// Stratified subset of `fraction` of the tiles (all of them at 1.0).
pub fn label_subset(tiles: &[MultimodalTile], fraction: f64, seed: u64) -> Result<Vec<MultimodalTile>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    if fraction >= 1.0 {
        return Ok(tiles.to_vec());
    }
    let labels: Vec<Option<Vec<u8>>> =
        tiles.iter().map(|t| t.labels().map(|l| l.map(<[u8]>::to_vec))).collect::<Result<_>>()?;
    let assign = stratify(&labels, &[fraction, 1.0 - fraction], seed)?;
    let out: Vec<MultimodalTile> = tiles.iter().zip(assign).filter(|(_, a)| *a == 0).map(|(t, _)| t.clone()).collect();
    if out.is_empty() {
        return Err(Error::Invalid(format!("label fraction {fraction} of {} tiles selects nothing", tiles.len())));
    }
    Ok(out)
}

fn wall(cfg: &TrainConfig, start: Instant) -> f64 {
    if cfg.record_wall_time {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Self-supervised pretraining on unlabeled tiles.
pub fn pretrain(
    model: &mut Model,
    state: &mut TrainState,
    train: &[MultimodalTile],
    val: &[MultimodalTile],
    cfg: &TrainConfig,
    hook: &mut EpochHook,
) -> Result<()> {
    cfg.validate()?;
    let specs = cfg.selected_modalities(&model.config.modalities)?;
    if cfg.contrastive != ContrastiveMode::Off && specs.len() < 2 {
        return Err(Error::Config("the contrastive loss needs at least two modalities".into()));
    }
    if train.is_empty() {
        return Err(Error::Invalid("no training tiles".into()));
    }
    let start = Instant::now();
    while state.epoch < cfg.pretrain_epochs {
        let epoch = state.epoch;
        let mut sums = [0.0; 3];
        let plan = batches(train.len(), cfg.batch_tiles, derive_seed(cfg.seed, &[1, epoch as u64]));
        for (b, idx) in plan.iter().enumerate() {
            let batch = assemble(train, idx, &specs)?;
            let mask_seed = derive_seed(cfg.seed, &[2, epoch as u64, b as u64]);
            let (loss, grads) = model.pretrain_step(&batch, cfg, mask_seed, true)?;
            adam_step(&mut model.store, &grads.unwrap(), &mut state.adam, state.scheduler.lr, None)?;
            sums[0] += loss.total;
            sums[1] += loss.con;
            sums[2] += loss.mae;
        }
        let nb = plan.len() as f64;
        let val_loss = if val.is_empty() {
            sums[0] / nb
        } else {
            let mut total = 0.0;
            let vplan: Vec<Vec<usize>> =
                (0..val.len()).collect::<Vec<_>>().chunks(cfg.batch_tiles).map(<[usize]>::to_vec).collect();
            for (b, idx) in vplan.iter().enumerate() {
                let batch = assemble(val, idx, &specs)?;
                let (loss, _) = model.pretrain_step(&batch, cfg, derive_seed(cfg.seed, &[3, b as u64]), false)?;
                total += loss.total * idx.len() as f64;
            }
            total / val.len() as f64
        };
        let lr = state.scheduler.lr;
        let improved = state.scheduler.observe(val_loss);
        state.epoch += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            phase: Phase::Pretrain.as_str().into(),
            loss_total: sums[0] / nb,
            loss_con: Some(sums[1] / nb),
            loss_mae: Some(sums[2] / nb),
            lr,
            f1_weighted: None,
            f1_macro: None,
            f1_micro: None,
            wall_s: wall(cfg, start),
            val_loss: Some(val_loss),
        };
        hook(&record, model, state, improved)?;
        if state.scheduler.since_best >= cfg.early_stop {
            break;
        }
    }
    Ok(())
}

fn targets(labels: &[Vec<u8>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| labels[i].iter().map(|&v| v as f64).collect()).collect()
}

/// Validation loss and scores of the current model on `tiles`.
pub fn evaluate(model: &Model, tiles: &[MultimodalTile], cfg: &TrainConfig) -> Result<(f64, F1Report)> {
    if tiles.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let specs = cfg.selected_modalities(&model.config.modalities)?;
    let labels = labels_of(tiles, model.config.num_classes)?;
    let mut preds = Vec::with_capacity(tiles.len());
    let mut loss = 0.0;
    let all: Vec<usize> = (0..tiles.len()).collect();
    for idx in all.chunks(cfg.batch_tiles) {
        let batch = assemble(tiles, idx, &specs)?;
        for (k, logits) in model.predict_logits(&batch)?.into_iter().enumerate() {
            let y = &labels[idx[k]];
            loss += logits
                .iter()
                .zip(y)
                .map(|(&z, &t)| z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / y.len() as f64;
            preds.push(logits.iter().map(|&z| (z >= 0.0) as u8).collect());
        }
    }
    Ok((loss / tiles.len() as f64, f1_scores(&preds, &labels)?))
}

fn supervised_record(phase: Phase, epoch: usize, train_loss: f64, lr: f64, val: &(f64, F1Report), wall_s: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        phase: phase.as_str().into(),
        loss_total: train_loss,
        loss_con: None,
        loss_mae: None,
        lr,
        f1_weighted: Some(val.1.weighted_f1),
        f1_macro: Some(val.1.macro_f1),
        f1_micro: Some(val.1.micro_f1),
        wall_s,
        val_loss: Some(val.0),
    }
}

/// Supervised fine-tuning of every parameter on labeled tiles (already
/// subset to the label fraction). The parameters with the best
/// validation loss are restored at the end.
pub fn finetune(
    model: &mut Model,
    state: &mut TrainState,
    train: &[MultimodalTile],
    val: &[MultimodalTile],
    cfg: &TrainConfig,
    hook: &mut EpochHook,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("fine-tuning needs non-empty train and validation splits".into()));
    }
    let specs = cfg.selected_modalities(&model.config.modalities)?;
    let labels = labels_of(train, model.config.num_classes)?;
    let start = Instant::now();
    let mut best = model.store.clone();
    while state.epoch < cfg.finetune_epochs {
        let epoch = state.epoch;
        let plan = batches(train.len(), cfg.batch_tiles, derive_seed(cfg.seed, &[4, epoch as u64]));
        let mut sum = 0.0;
        for idx in &plan {
            let batch = assemble(train, idx, &specs)?;
            let (loss, grads) = model.supervised_step(&batch, &targets(&labels, idx), true)?;
            adam_step(&mut model.store, &grads.unwrap(), &mut state.adam, state.scheduler.lr, None)?;
            sum += loss;
        }
        let v = evaluate(model, val, cfg)?;
        let lr = state.scheduler.lr;
        let improved = state.scheduler.observe(v.0);
        if improved {
            best = model.store.clone();
        }
        state.epoch += 1;
        let record = supervised_record(Phase::Finetune, state.epoch, sum / plan.len() as f64, lr, &v, wall(cfg, start));
        hook(&record, model, state, improved)?;
        if state.scheduler.since_best >= cfg.early_stop {
            break;
        }
    }
    model.store = best;
    Ok(())
}

/// Trains only the head on frozen mean-pooled features.
pub fn linear_probe(
    model: &mut Model,
    state: &mut TrainState,
    train: &[MultimodalTile],
    val: &[MultimodalTile],
    cfg: &TrainConfig,
    hook: &mut EpochHook,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("probing needs non-empty train and validation splits".into()));
    }
    let specs = cfg.selected_modalities(&model.config.modalities)?;
    let labels = labels_of(train, model.config.num_classes)?;
    let all: Vec<usize> = (0..train.len()).collect();
    let mut feats = Vec::with_capacity(train.len());
    for idx in all.chunks(cfg.batch_tiles) {
        feats.extend(model.tile_features(&assemble(train, idx, &specs)?)?);
    }
    let head = model.head_params();
    let start = Instant::now();
    let mut best = model.store.clone();
    while state.epoch < cfg.finetune_epochs {
        let epoch = state.epoch;
        let plan = batches(train.len(), cfg.batch_tiles, derive_seed(cfg.seed, &[5, epoch as u64]));
        let mut sum = 0.0;
        for idx in &plan {
            let (loss, grads) = probe_step(model, &feats, &labels, idx);
            adam_step(&mut model.store, &grads, &mut state.adam, state.scheduler.lr, Some(&head))?;
            sum += loss;
        }
        let v = evaluate(model, val, cfg)?;
        let lr = state.scheduler.lr;
        let improved = state.scheduler.observe(v.0);
        if improved {
            best = model.store.clone();
        }
        state.epoch += 1;
        let record = supervised_record(Phase::Probe, state.epoch, sum / plan.len() as f64, lr, &v, wall(cfg, start));
        hook(&record, model, state, improved)?;
        if state.scheduler.since_best >= cfg.early_stop {
            break;
        }
    }
    model.store = best;
    Ok(())
}

fn probe_step(model: &Model, feats: &[Vec<f64>], labels: &[Vec<u8>], idx: &[usize]) -> (f64, Gradients) {
    let d = model.config.d;
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(Tensor::from_vec(&[idx.len(), d], idx.iter().flat_map(|&i| feats[i].clone()).collect()));
    let logits = model.head.forward(&mut tape, x);
    let y: Vec<f64> = idx.iter().flat_map(|&i| labels[i].iter().map(|&v| v as f64)).collect();
    // Mean over tiles and classes matches the per-tile mean of fine-tuning.
    let loss = tape.bce_with_logits(logits, &y);
    let value = tape.value(loss).item();
    (value, tape.backward(&[(loss, Tensor::scalar(1.0))]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = batches(10, 4, 7);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
