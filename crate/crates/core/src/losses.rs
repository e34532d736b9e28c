//! Self-supervised objectives: group contrastive loss over pseudo-label
//! quality groups, the distortion rank loss, their combination, and the
//! rotation-prediction baseline.

use crate::image::Image;
use crate::model::{images_to_tensor, ParamRole, QualityModel, ROTATIONS};
use crate::tensor::{BnMode, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Quality groups of one batch, built from pseudo-label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    /// Batch indices sorted by ascending pseudo-score (stable).
    pub order: Vec<usize>,
    /// Groups of batch indices, lowest quality first.
    pub groups: Vec<Vec<usize>>,
    pub fraction: f64,
    pub group_count: usize,
}

impl GroupPartition {
    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    pub fn low(&self) -> &[usize] {
        &self.groups[0]
    }

    pub fn high(&self) -> &[usize] {
        self.groups.last().expect("at least two groups")
    }
}

/// `round(p·n)` with halves rounded up.
pub fn group_size(p: f64, n: usize) -> usize {
    (p * n as f64 + 0.5 + 1e-9).floor() as usize
}

/// Sorts the batch by pseudo-score and carves out `groups` disjoint,
/// rank-contiguous groups of `round(p·N)` images each. With two groups
/// these are the lowest and highest `p` fractions; with more, the groups
/// are spread evenly over the sorted order.
pub fn form_groups(pseudo_scores: &[f64], p: f64, groups: usize) -> Result<GroupPartition> {
    let n = pseudo_scores.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("form_groups: batch of {n} needs at least 2 images")));
    }
    if groups < 2 {
        return Err(Error::InvalidArgument(format!("form_groups: {groups} groups; need at least 2")));
    }
    if !(p > 0.0 && p <= 1.0 / groups as f64 + 1e-12) {
        return Err(Error::InvalidArgument(format!("form_groups: p={p} must lie in (0, 1/{groups}]")));
    }
    if pseudo_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("form_groups: non-finite pseudo-score".into()));
    }
    let m = group_size(p, n);
    if m < 1 {
        return Err(Error::InvalidArgument(format!("form_groups: batch too small for p (round({p}·{n}) = 0)")));
    }
    if m * groups > n {
        return Err(Error::InvalidArgument(format!("form_groups: {groups} groups of {m} exceed batch of {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pseudo_scores[a].total_cmp(&pseudo_scores[b]));
    let span = (n - m) as f64 / (groups - 1) as f64;
    let group_list = (0..groups)
        .map(|g| {
            let start = (g as f64 * span).round() as usize;
            order[start..start + m].to_vec()
        })
        .collect();
    Ok(GroupPartition { order, groups: group_list, fraction: p, group_count: groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcOptions {
    pub tau: f64,
    /// Adds the positive pair to the denominator (textbook NT-Xent). Off by
    /// default: the denominator sums over the opposing group only.
    pub positive_in_denominator: bool,
}

impl Default for GcOptions {
    fn default() -> Self {
        Self { tau: 1.0, positive_in_denominator: false }
    }
}

fn scalar_sum(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Pair term for (i, j) given a precomputed similarity matrix `sim` [N,N].
fn pair_term(tape: &mut Tape, sim: Var, n: usize, i: usize, j: usize, negatives: &[usize], opts: GcOptions) -> Result<Var> {
    let mut den_idx: Vec<usize> = negatives.iter().map(|&k| i * n + k).collect();
    if opts.positive_in_denominator {
        den_idx.push(i * n + j);
    }
    let den = tape.gather(sim, &den_idx)?;
    let den = tape.scale(den, 1.0 / opts.tau);
    let lse = tape.logsumexp(den)?;
    let num = tape.gather(sim, &[i * n + j])?;
    let num = tape.sum(num);
    let num = tape.scale(num, 1.0 / opts.tau);
    Ok(tape.sub(lse, num)?)
}

/// Group contrastive loss on projections `z` [N,D].
///
/// For every ordered pair of distinct groups (A, B) and every ordered pair
/// i ≠ j inside A, adds `-log(exp(s_ij/τ) / Σ_{k∈B} exp(s_ik/τ))`.
pub fn gc_loss(tape: &mut Tape, z: Var, partition: &GroupPartition, opts: GcOptions) -> Result<Var> {
    if !(opts.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("gc_loss: tau {} must be positive", opts.tau)));
    }
    let n = tape.value(z).shape().first().copied().unwrap_or(0);
    if partition.groups.iter().flatten().any(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!("gc_loss: partition references images beyond batch of {n}")));
    }
    let sim = tape.pairwise_cosine(z, z)?;
    let mut terms = Vec::new();
    for (a, pos) in partition.groups.iter().enumerate() {
        for (b, neg) in partition.groups.iter().enumerate() {
            if a == b {
                continue;
            }
            for &i in pos {
                for &j in pos {
                    if i != j {
                        terms.push(pair_term(tape, sim, n, i, j, neg, opts)?);
                    }
                }
            }
        }
    }
    scalar_sum(tape, &terms)
}

/// Single pair loss on plain vectors.
pub fn gc_pair_loss(z_i: &[f64], z_j: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("gc_pair_loss: no negatives".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("gc_pair_loss: tau {tau} must be positive")));
    }
    let d = z_i.len();
    let mut rows = Vec::with_capacity(d * (2 + negatives.len()));
    rows.extend_from_slice(z_i);
    rows.extend_from_slice(z_j);
    for neg in negatives {
        rows.extend_from_slice(neg);
    }
    let n = 2 + negatives.len();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![n, d], rows).map_err(|_| {
        Error::Tensor(TensorError::InvalidArgument { op: "gc_pair_loss", msg: "vectors differ in length".into() })
    })?);
    let sim = tape.pairwise_cosine(z, z)?;
    let neg: Vec<usize> = (2..n).collect();
    let v = pair_term(&mut tape, sim, n, 0, 1, &neg, GcOptions { tau, positive_in_denominator: false })?;
    Ok(tape.value(v).data()[0])
}

/// Euclidean distances of a test image's projection to its two degraded versions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletDistances {
    pub d_high: f64,
    pub d_low: f64,
}

/// `P(d_high ≥ d_low) = σ(d_high − d_low)`, stable for large |difference|.
pub fn rank_probability(d: TripletDistances) -> f64 {
    let x = d.d_high - d.d_low;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy against the target label 1.
pub fn rank_loss_single(p: f64) -> f64 {
    -p.ln()
}

/// Same loss as [`rank_loss_single`] of [`rank_probability`], in the fused
/// `softplus(-(d_high - d_low))` form.
pub fn rank_loss_fused(d: TripletDistances) -> f64 {
    let x = -(d.d_high - d.d_low);
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Σ_i softplus(d_low,i − d_high,i) over rows of `z`, `z_high`, `z_low` [N,D].
pub fn rank_loss_batch(tape: &mut Tape, z: Var, z_high: Var, z_low: Var) -> Result<Var> {
    let d_high = tape.euclidean_distance(z, z_high)?;
    let d_low = tape.euclidean_distance(z, z_low)?;
    let margin = tape.sub(d_low, d_high)?;
    let sp = tape.softplus(margin);
    Ok(tape.sum(sp))
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gc: f64,
    pub rank: f64,
    pub combined: f64,
    pub lambda: f64,
    pub tau: f64,
}

pub fn combined_loss(gc: f64, rank: f64, lambda: f64, tau: f64) -> LossBreakdown {
    LossBreakdown { gc, rank, combined: gc + lambda * rank, lambda, tau }
}

/// Which terms enter the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Combined,
    RankOnly,
    GcOnly,
    Rotation,
}

impl Objective {
    pub fn uses_gc(self) -> bool {
        matches!(self, Objective::Combined | Objective::GcOnly)
    }

    pub fn uses_rank(self) -> bool {
        matches!(self, Objective::Combined | Objective::RankOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Combined => "combined",
            Objective::RankOnly => "rank_only",
            Objective::GcOnly => "gc_only",
            Objective::Rotation => "rotation",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "combined" => Ok(Objective::Combined),
            "rank_only" | "rank" => Ok(Objective::RankOnly),
            "gc_only" | "gc" => Ok(Objective::GcOnly),
            "rotation" => Ok(Objective::Rotation),
            other => Err(Error::Config(vec![format!("unknown objective `{other}`")])),
        }
    }
}

/// Builds `L_gc + λ·L_r` on the tape. Terms disabled by `objective` are
/// exactly zero. `ranks` holds one (z_high, z_low) pair per distortion kind
/// in use; their rank losses are summed.
pub fn combined_objective(
    tape: &mut Tape,
    z: Var,
    ranks: &[(Var, Var)],
    partition: &GroupPartition,
    objective: Objective,
    lambda: f64,
    opts: GcOptions,
) -> Result<(Var, LossBreakdown)> {
    let gc = if objective.uses_gc() {
        gc_loss(tape, z, partition, opts)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let rank = if objective.uses_rank() {
        let terms = ranks
            .iter()
            .map(|&(h, l)| rank_loss_batch(tape, z, h, l))
            .collect::<Result<Vec<_>>>()?;
        scalar_sum(tape, &terms)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let weighted = tape.scale(rank, lambda);
    let total = tape.add(gc, weighted)?;
    let b = combined_loss(tape.value(gc).data()[0], tape.value(rank).data()[0], lambda, opts.tau);
    Ok((total, b))
}

/// Every image rotated by 0°, 90°, 180° and 270°, with matching labels.
pub fn rotation_batch(batch: &[Image]) -> Result<(Vec<Image>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("rotation_loss: empty batch".into()));
    }
    if let Some(im) = batch.iter().find(|im| im.height() != im.width()) {
        return Err(Error::InvalidImage(format!("rotation_loss: non-square crop {}x{}", im.height(), im.width())));
    }
    let mut imgs = Vec::with_capacity(batch.len() * ROTATIONS);
    let mut labels = Vec::with_capacity(batch.len() * ROTATIONS);
    for im in batch {
        for r in 0..ROTATIONS {
            imgs.push(im.rotate90(r));
            labels.push(r);
        }
    }
    Ok((imgs, labels))
}

/// Rotation-prediction cross-entropy recorded on `tape` through the
/// model's rotation head, using bound parameter handles `vars`.
pub fn rotation_loss_on_tape(
    tape: &mut Tape,
    model: &QualityModel,
    vars: &[Var],
    batch: &[Image],
    mode: BnMode,
) -> Result<Var> {
    let (imgs, labels) = rotation_batch(batch)?;
    let x = tape.constant(images_to_tensor(&imgs)?);
    let out = model.forward_frozen(tape, vars, x, mode)?;
    let logits = model.rotation_logits(tape, vars, out.projection)?;
    Ok(tape.softmax_cross_entropy(logits, &labels)?)
}

/// Value of the rotation-prediction loss for `batch`.
pub fn rotation_loss(model: &QualityModel, batch: &[Image], mode: BnMode) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |_| false);
    let l = rotation_loss_on_tape(&mut tape, model, &vars, batch, mode)?;
    Ok(tape.value(l).data()[0])
}

/// Roles updated when adapting with the rotation objective.
pub fn rotation_adaptable(role: ParamRole) -> bool {
    role.is_adaptable()
}
