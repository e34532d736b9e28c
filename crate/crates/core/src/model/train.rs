//! Desk-scale source training: mean absolute error on (image, score) pairs.

use super::{images_to_tensor, ParamRole, QualityModel, ROTATIONS};
use crate::distortions::quality_preserving_augment;
use crate::eval::metrics::srocc;
use crate::image::Image;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{BnMode, Tape, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs spent fitting the rotation head after the main fit; 0 skips it.
    pub rotation_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 3e-3, rotation_epochs: 4, seed: 7 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training MAE of each epoch, measured before each step.
    pub epoch_mae: Vec<f64>,
    pub holdout_srocc: Option<f64>,
    pub rotation_loss: Vec<f64>,
}

fn step_params(model: &mut QualityModel, idx: &[usize], adam: &mut AdamState) -> Result<()> {
    let mut chosen: Vec<&mut Tensor> = model
        .params_mut()
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| idx.binary_search(i).is_ok())
        .map(|(_, t)| t)
        .collect();
    adam.step(&mut chosen)?;
    Ok(())
}

pub fn train_source(
    model: &mut QualityModel,
    train: &[(Image, f64)],
    holdout: &[(Image, f64)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_source_grouped(model, train, &vec![0; train.len()], holdout, cfg)
}

/// Mini-batches splits shuffled within each group, so batch statistics are
/// always those of a single group (e.g. one distortion kind).
fn grouped_batches<R: rand::Rng>(groups: &[usize], bs: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut batches = Vec::new();
    for g in ids {
        let mut members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        members.shuffle(rng);
        batches.extend(members.chunks(bs).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// As [`train_source`], with `groups[i]` naming the stratum of sample `i`.
pub fn train_source_grouped(
    model: &mut QualityModel,
    train: &[(Image, f64)],
    groups: &[usize],
    holdout: &[(Image, f64)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if groups.len() != train.len() {
        return Err(Error::InvalidArgument(format!("train_source: {} groups for {} samples", groups.len(), train.len())));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("train_source: empty training set".into()));
    }
    if let Some((i, _)) = train.iter().enumerate().find(|(_, (_, s))| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("train_source: score {i} is not finite")));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let crop = model.arch().crop;
    let idx = model.indices_where(ParamRole::at_source_training);
    let lens: Vec<usize> = idx.iter().map(|&i| model.params()[i].len()).collect();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..Default::default() }, lens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bs = cfg.batch_size.max(2);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in grouped_batches(groups, bs, &mut rng) {
            let chunk = chunk.as_slice();
            let imgs = chunk
                .iter()
                .map(|&i| quality_preserving_augment(&train[i].0, crop, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = chunk.iter().map(|&i| train[i].1).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, ParamRole::at_source_training);
            let x = tape.constant(images_to_tensor(&imgs)?);
            let out = model.forward(&mut tape, &vars, x, BnMode::Train)?;
            let y = tape.constant(Tensor::new(vec![chunk.len(), 1], targets)?);
            let diff = tape.sub(out.quality, y)?;
            let abs = tape.abs(diff);
            let loss = tape.mean(abs)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: loss {lv}")));
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &vars);
            step_params(model, &idx, &mut adam)?;
            model.zero_grads();
            total += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        report.epoch_mae.push(total / seen.max(1) as f64);
        log::debug!("source epoch {epoch}: mae {:.4}", report.epoch_mae[epoch]);
    }
    if cfg.rotation_epochs > 0 {
        let imgs: Vec<Image> = train.iter().map(|(im, _)| im.center_crop(crop)).collect::<Result<_>>()?;
        report.rotation_loss = train_rotation_head(model, &imgs, cfg.rotation_epochs, cfg.lr, cfg.seed ^ 0x5eed)?;
    }
    if holdout.len() >= 3 {
        let imgs: Vec<Image> = holdout.iter().map(|(im, _)| im.center_crop(crop)).collect::<Result<_>>()?;
        let gt: Vec<f64> = holdout.iter().map(|(_, s)| *s).collect();
        let mut pred = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(32) {
            pred.extend(model.predict_quality(chunk, BnMode::Eval)?);
        }
        report.holdout_srocc = Some(srocc(&pred, &gt)?);
    }
    Ok(report)
}

/// Fits only the rotation head on all four rotations of `images`, with the
/// trunk in eval mode. Returns mean cross-entropy per epoch.
pub fn train_rotation_head(model: &mut QualityModel, images: &[Image], epochs: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let idx = model.indices_where(|r| r == ParamRole::RotationHead);
    let lens: Vec<usize> = idx.iter().map(|&i| model.params()[i].len()).collect();
    let mut adam = AdamState::new(AdamConfig { lr, ..Default::default() }, lens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(8) {
            let mut rotated = Vec::with_capacity(chunk.len() * ROTATIONS);
            let mut targets = Vec::with_capacity(chunk.len() * ROTATIONS);
            for &i in chunk {
                for r in 0..ROTATIONS {
                    rotated.push(images[i].rotate90(r));
                    targets.push(r);
                }
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, |r| r == ParamRole::RotationHead);
            let x = tape.constant(images_to_tensor(&rotated)?);
            let out = model.forward_frozen(&mut tape, &vars, x, BnMode::Eval)?;
            let logits = model.rotation_logits(&mut tape, &vars, out.projection)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("rotation head loss {lv}")));
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &vars);
            step_params(model, &idx, &mut adam)?;
            model.zero_grads();
            total += lv;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
    }
    Ok(losses)
}
