//! Per-batch test-time adaptation.
//!
//! Every batch starts from the source snapshot with a fresh optimizer,
//! optimizes the auxiliary objective over BN affine and projection
//! parameters for a few iterations, then scores the batch with the adapted
//! trunk and the untouched regressor.

use crate::distortions::{make_triplet, quality_preserving_augment, DistortionKind, DistortionTriplet};
use crate::image::Image;
use crate::losses::{combined_objective, form_groups, rotation_loss_on_tape, GcOptions, LossBreakdown, Objective};
use crate::model::{images_to_tensor, ModelSnapshot, ParamRole, QualityModel};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{BnMode, Tape, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionMode {
    Single(DistortionKind),
    All,
    Best,
}

impl fmt::Display for DistortionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistortionMode::Single(k) => write!(f, "single:{k}"),
            DistortionMode::All => f.write_str("all"),
            DistortionMode::Best => f.write_str("best"),
        }
    }
}

impl FromStr for DistortionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all" => Ok(DistortionMode::All),
            "best" => Ok(DistortionMode::Best),
            _ => match s.strip_prefix("single:") {
                Some(k) => Ok(DistortionMode::Single(k.parse()?)),
                None => Err(Error::Config(vec![format!(
                    "unknown distortion mode `{s}` (expected best, all, or single:<kind>)"
                )])),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub p: f64,
    pub tau: f64,
    pub groups: usize,
    pub distortion_mode: DistortionMode,
    pub seeds: Vec<u64>,
    pub crop: usize,
    pub objective: Objective,
    pub positive_in_denominator: bool,
    /// BN statistics for the adaptation forwards.
    pub adapt_bn_mode: BnMode,
    /// BN statistics for scoring with the adapted model.
    pub predict_bn_mode: BnMode,
    /// BN statistics for pseudo-labels and distortion selection.
    pub source_bn_mode: BnMode,
    pub resample_triplets: bool,
    /// When false, every image gets the source model's eval-mode score.
    pub enabled: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            lr: 1e-3,
            batch_size: 8,
            lambda: 1.0,
            p: 0.25,
            tau: 1.0,
            groups: 2,
            distortion_mode: DistortionMode::Best,
            seeds: vec![0, 1, 2, 3, 4],
            crop: 64,
            objective: Objective::Combined,
            positive_in_denominator: false,
            adapt_bn_mode: BnMode::BatchStats,
            predict_bn_mode: BnMode::BatchStats,
            source_bn_mode: BnMode::Eval,
            resample_triplets: false,
            enabled: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TtaConfig {
    /// All violations, not just the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.iterations < 1 {
            e.push("iterations must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            e.push(format!("batch_size {} must be >= 2", self.batch_size));
        }
        if self.groups < 2 {
            e.push(format!("groups {} must be >= 2", self.groups));
        }
        if !(self.p > 0.0 && self.p <= 1.0 / self.groups.max(1) as f64 + 1e-12) {
            e.push(format!("p {} must lie in (0, 1/groups]", self.p));
        }
        if !(self.tau > 0.0) {
            e.push(format!("tau {} must be positive", self.tau));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            e.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !self.lambda.is_finite() {
            e.push("lambda must be finite".into());
        }
        if self.seeds.is_empty() {
            e.push("seeds must not be empty".into());
        }
        if self.crop == 0 {
            e.push("crop must be positive".into());
        }
        if self.adapt_bn_mode == BnMode::Train || self.predict_bn_mode == BnMode::Train || self.source_bn_mode == BnMode::Train {
            e.push("bn modes at test time must be eval or batch_stats".into());
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.validation_errors();
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.adam_eps }
    }

    fn gc_options(&self) -> GcOptions {
        GcOptions { tau: self.tau, positive_in_denominator: self.positive_in_denominator }
    }
}

/// Outcome of adapting on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub seed: u64,
    pub batch_index: usize,
    pub image_ids: Vec<usize>,
    /// Source-model scores (eval-mode BN).
    pub baseline_scores: Vec<f64>,
    pub adapted_scores: Vec<f64>,
    /// Objective value at the start of each iteration, before its update.
    pub loss_trajectory: Vec<LossBreakdown>,
    /// Distortion kinds used for each image's rank term.
    pub kinds: Vec<Vec<DistortionKind>>,
    /// Largest absolute parameter change made by the first optimizer step.
    pub first_step_max_update: f64,
    /// Set when the batch fell back to baseline scores.
    pub flagged: Option<String>,
    /// Content hashes of the adapted model; absent when no model was adapted.
    pub param_hashes: Option<ParamHashes>,
}

/// Content hashes of a model split by the adaptable partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamHashes {
    /// Everything outside the adaptable set, running statistics included.
    pub frozen: String,
    /// BN affine and projection-head parameters.
    pub adaptable: String,
}

impl ParamHashes {
    pub fn of(model: &QualityModel) -> Self {
        Self {
            frozen: model.content_hash_where(|r| !r.is_adaptable(), true),
            adaptable: model.content_hash_where(ParamRole::is_adaptable, false),
        }
    }
}

/// Source-model scores of the heavy and light versions per kind; returns the
/// kind with the largest absolute gap (ties to the earlier kind).
fn pick_kind(gaps: &[(DistortionKind, f64)]) -> DistortionKind {
    let mut best = gaps[0];
    for &g in &gaps[1..] {
        if g.1 > best.1 {
            best = g;
        }
    }
    best.0
}

/// Builds triplets of all three kinds for every patch and scores them with
/// the source model in one pass. Returns, per patch, the triplets in
/// [`DistortionKind::ALL`] order and the absolute score gaps.
fn score_all_kinds<R: Rng + ?Sized>(
    source: &QualityModel,
    patches: &[Image],
    mode: BnMode,
    rng: &mut R,
) -> Result<Vec<(Vec<DistortionTriplet>, Vec<(DistortionKind, f64)>)>> {
    let mut triplets = Vec::with_capacity(patches.len());
    let mut imgs = Vec::with_capacity(patches.len() * 6);
    for p in patches {
        let ts = DistortionKind::ALL
            .iter()
            .map(|&k| make_triplet(p, k, rng))
            .collect::<Result<Vec<_>>>()?;
        for t in &ts {
            imgs.push(t.high.clone());
            imgs.push(t.low.clone());
        }
        triplets.push(ts);
    }
    let mut scores = Vec::with_capacity(imgs.len());
    // eval-mode scoring is per-image, so chunking does not change values
    for chunk in imgs.chunks(48) {
        scores.extend(source.predict_quality(chunk, mode)?);
    }
    Ok(triplets
        .into_iter()
        .enumerate()
        .map(|(i, ts)| {
            let gaps = DistortionKind::ALL
                .iter()
                .enumerate()
                .map(|(k, &kind)| (kind, (scores[i * 6 + 2 * k] - scores[i * 6 + 2 * k + 1]).abs()))
                .collect();
            (ts, gaps)
        })
        .collect())
}

/// The kind whose heavy/light pair the source model separates most.
pub fn select_distortion_type<R: Rng + ?Sized>(source: &QualityModel, x: &Image, rng: &mut R) -> Result<DistortionKind> {
    let scored = score_all_kinds(source, std::slice::from_ref(x), BnMode::Eval, rng)?;
    Ok(pick_kind(&scored[0].1))
}

/// Chosen triplets per image according to `mode`.
fn build_triplets<R: Rng + ?Sized>(
    source: &QualityModel,
    patches: &[Image],
    cfg: &TtaConfig,
    rng: &mut R,
) -> Result<Vec<Vec<DistortionTriplet>>> {
    match cfg.distortion_mode {
        DistortionMode::Single(kind) => patches
            .iter()
            .map(|p| make_triplet(p, kind, rng).map(|t| vec![t]))
            .collect(),
        DistortionMode::All => patches
            .iter()
            .map(|p| DistortionKind::ALL.iter().map(|&k| make_triplet(p, k, rng)).collect())
            .collect(),
        DistortionMode::Best => Ok(score_all_kinds(source, patches, cfg.source_bn_mode, rng)?
            .into_iter()
            .map(|(mut ts, gaps)| {
                let kind = pick_kind(&gaps);
                let pos = DistortionKind::ALL.iter().position(|&k| k == kind).expect("known kind");
                vec![ts.swap_remove(pos)]
            })
            .collect()),
    }
}

/// Scoring view of an image: its centered `crop × crop` patch.
pub fn scoring_view(img: &Image, crop: usize) -> Result<Image> {
    if img.height() == crop && img.width() == crop {
        Ok(img.clone())
    } else {
        img.center_crop(crop)
    }
}

fn score(model: &QualityModel, imgs: &[Image], mode: BnMode) -> Result<Vec<f64>> {
    model.predict_quality(imgs, mode)
}

/// Adapts a restored copy of the source model on `batch` and scores it.
pub fn adapt_batch<R: Rng + ?Sized>(
    source: &ModelSnapshot,
    batch: &[Image],
    cfg: &TtaConfig,
    rng: &mut R,
) -> Result<BatchResult> {
    cfg.validate()?;
    let n = batch.len();
    let views = batch.iter().map(|im| scoring_view(im, cfg.crop)).collect::<Result<Vec<_>>>()?;
    let source_model = source.model();
    let baseline = score(source_model, &views, BnMode::Eval)?;
    let mut result = BatchResult {
        seed: 0,
        batch_index: 0,
        image_ids: (0..n).collect(),
        baseline_scores: baseline.clone(),
        adapted_scores: baseline.clone(),
        loss_trajectory: Vec::new(),
        kinds: vec![Vec::new(); n],
        first_step_max_update: 0.0,
        flagged: None,
        param_hashes: None,
    };
    if !cfg.enabled {
        return Ok(result);
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("adapt_batch: batch of {n} needs at least 2 images")));
    }
    let pseudo = if cfg.source_bn_mode == BnMode::Eval {
        baseline.clone()
    } else {
        score(source_model, &views, cfg.source_bn_mode)?
    };
    let partition = form_groups(&pseudo, cfg.p, cfg.groups)?;

    let mut model = source.instantiate();
    let adaptable = model.adaptable_indices();
    let mut adam = AdamState::new(cfg.adam(), adaptable.iter().map(|&i| model.params()[i].len()));

    let patches = batch
        .iter()
        .map(|im| quality_preserving_augment(im, cfg.crop, rng))
        .collect::<Result<Vec<_>>>()?;
    let needs_triplets = cfg.objective.uses_rank();
    let mut triplets = if needs_triplets { build_triplets(source_model, &patches, cfg, rng)? } else { Vec::new() };
    result.kinds = if needs_triplets {
        triplets.iter().map(|ts| ts.iter().map(|t| t.kind).collect()).collect()
    } else {
        vec![Vec::new(); n]
    };

    for it in 0..cfg.iterations {
        if it > 0 && cfg.resample_triplets && needs_triplets {
            triplets = build_triplets(source_model, &patches, cfg, rng)?;
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |r| r.is_adaptable());
        let (loss, breakdown) = if cfg.objective == Objective::Rotation {
            let l = rotation_loss_on_tape(&mut tape, &model, &vars, &patches, cfg.adapt_bn_mode)?;
            let v = tape.value(l).data()[0];
            (l, LossBreakdown { gc: 0.0, rank: 0.0, combined: v, lambda: 0.0, tau: cfg.tau })
        } else {
            let x = tape.constant(images_to_tensor(&patches)?);
            let z = model.forward_frozen(&mut tape, &vars, x, cfg.adapt_bn_mode)?.projection;
            let per_kind = triplets.first().map_or(0, Vec::len);
            let mut ranks = Vec::with_capacity(per_kind);
            for k in 0..per_kind {
                let highs: Vec<Image> = triplets.iter().map(|ts| ts[k].high.clone()).collect();
                let lows: Vec<Image> = triplets.iter().map(|ts| ts[k].low.clone()).collect();
                let xh = tape.constant(images_to_tensor(&highs)?);
                let xl = tape.constant(images_to_tensor(&lows)?);
                let zh = model.forward_frozen(&mut tape, &vars, xh, cfg.adapt_bn_mode)?.projection;
                let zl = model.forward_frozen(&mut tape, &vars, xl, cfg.adapt_bn_mode)?.projection;
                ranks.push((zh, zl));
            }
            combined_objective(&mut tape, z, &ranks, &partition, cfg.objective, cfg.lambda, cfg.gc_options())?
        };
        if !breakdown.combined.is_finite() {
            result.flagged = Some(format!("non-finite loss at iteration {}", it + 1));
            result.adapted_scores = baseline;
            result.param_hashes = Some(ParamHashes::of(&model));
            return Ok(result);
        }
        result.loss_trajectory.push(breakdown);
        tape.backward(loss)?;
        model.collect_grads(&tape, &vars);
        let before: Vec<Tensor> = if it == 0 { adaptable.iter().map(|&i| model.params()[i].clone()).collect() } else { Vec::new() };
        {
            let mut chosen: Vec<&mut Tensor> = model
                .params_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| adaptable.binary_search(i).is_ok())
                .map(|(_, t)| t)
                .collect();
            if let Err(e) = adam.step(&mut chosen) {
                result.flagged = Some(e.to_string());
                result.adapted_scores = baseline;
                result.param_hashes = Some(ParamHashes::of(&model));
                return Ok(result);
            }
        }
        if it == 0 {
            result.first_step_max_update = adaptable
                .iter()
                .zip(&before)
                .flat_map(|(&i, b)| model.params()[i].data().iter().zip(b.data()).map(|(a, c)| (a - c).abs()))
                .fold(0.0, f64::max);
        }
        model.zero_grads();
    }
    result.adapted_scores = score(&model, &views, cfg.predict_bn_mode)?;
    result.param_hashes = Some(ParamHashes::of(&model));
    if result.adapted_scores.iter().any(|s| !s.is_finite()) {
        result.flagged = Some("non-finite adapted score".into());
        result.adapted_scores = baseline;
    }
    Ok(result)
}

/// Output of [`tta_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRun {
    pub batches: Vec<BatchResult>,
    /// Per seed, one adapted score per test image in input order.
    pub scores: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl TtaRun {
    pub fn flagged_batches(&self) -> usize {
        self.batches.iter().filter(|b| b.flagged.is_some()).count()
    }
}

/// splitmix64 fold of the seed and the batch's image ids, so a batch's
/// randomness depends only on its composition.
pub fn batch_seed(seed: u64, ids: &[usize]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.iter().fold(mix(seed), |h, &id| mix(h ^ id as u64))
}

/// Batch composition for one seed: a seeded shuffle chunked by `batch_size`.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs adaptation over `test_set` for every seed in `cfg.seeds`.
///
/// Batches are independent: each restarts from the snapshot, so cells run
/// in parallel. A ragged final batch that cannot form groups is scored by
/// the source model.
pub fn tta_run(model: &QualityModel, test_set: &[Image], cfg: &TtaConfig) -> Result<TtaRun> {
    cfg.validate()?;
    if test_set.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "tta_run: {} test images is fewer than batch size {}",
            test_set.len(),
            cfg.batch_size
        )));
    }
    let snapshot = model.snapshot();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for (bi, ids) in batch_plan(test_set.len(), cfg.batch_size, seed).into_iter().enumerate() {
            cells.push((seed, bi, ids));
        }
    }
    let results = cells
        .par_iter()
        .map(|(seed, bi, ids)| run_cell(&snapshot, test_set, cfg, *seed, *bi, ids))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![vec![f64::NAN; test_set.len()]; cfg.seeds.len()];
    for r in &results {
        let s = cfg.seeds.iter().position(|&x| x == r.seed).expect("seed from config");
        for (&id, &v) in r.image_ids.iter().zip(&r.adapted_scores) {
            scores[s][id] = v;
        }
    }
    Ok(TtaRun { batches: results, scores, seeds: cfg.seeds.clone() })
}

fn run_cell(snapshot: &ModelSnapshot, test_set: &[Image], cfg: &TtaConfig, seed: u64, bi: usize, ids: &[usize]) -> Result<BatchResult> {
    let batch: Vec<Image> = ids.iter().map(|&i| test_set[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, ids));
    let n = ids.len();
    let adaptable = n >= 2 && crate::losses::group_size(cfg.p, n) >= 1 && crate::losses::group_size(cfg.p, n) * cfg.groups <= n;
    let mut r = if adaptable {
        adapt_batch(snapshot, &batch, cfg, &mut rng)?
    } else {
        let off = TtaConfig { enabled: false, ..cfg.clone() };
        let mut r = adapt_batch(snapshot, &batch, &off, &mut rng)?;
        r.flagged = Some(format!("ragged batch of {n} scored by the source model"));
        r
    };
    r.seed = seed;
    r.batch_index = bi;
    r.image_ids = ids.to_vec();
    Ok(r)
}
