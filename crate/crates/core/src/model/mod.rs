//! The Y-shaped quality network: a convolutional trunk with batch-norm
//! layers feeding a scalar quality regressor and a 256-d projection head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use train::{train_rotation_head, train_source, train_source_grouped, TrainConfig, TrainReport};

use crate::image::Image;
use crate::tensor::{BnMode, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Output channels of each conv(3×3, stride 2)-BN-ReLU block.
    pub widths: Vec<usize>,
    pub crop: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub regressor_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Seeds the trunk and regressor initialization.
    pub seed: u64,
    /// Seeds the projection and rotation heads, which source training leaves alone.
    pub head_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32, 64],
            crop: 64,
            proj_hidden: 64,
            proj_dim: 256,
            regressor_hidden: 32,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
            head_seed: 1234,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.widths.is_empty() {
            errs.push("arch: need at least one conv block".to_string());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            errs.push(format!("arch: in_channels {} must be 1 or 3", self.in_channels));
        }
        let factor = 1usize << self.widths.len().min(30);
        if self.crop == 0 || self.crop % factor != 0 {
            errs.push(format!(
                "arch: crop {} must be a positive multiple of {factor} for {} stride-2 blocks",
                self.crop,
                self.widths.len()
            ));
        }
        if self.widths.iter().chain([&self.proj_hidden, &self.proj_dim, &self.regressor_hidden]).any(|&w| w == 0) {
            errs.push("arch: layer widths must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            errs.push("arch: bn_eps must be > 0 and bn_momentum in [0,1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    Projection,
    Regressor,
    RotationHead,
}

impl ParamRole {
    /// Members of the set updated at test time: BN affine and projection head.
    pub fn is_adaptable(self) -> bool {
        matches!(self, ParamRole::BnGamma | ParamRole::BnBeta | ParamRole::Projection)
    }

    pub fn at_source_training(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::BnGamma | ParamRole::BnBeta | ParamRole::Regressor)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        use ParamRole::*;
        [ConvWeight, BnGamma, BnBeta, Projection, Regressor, RotationHead].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv: Vec<usize>,
    gamma: Vec<usize>,
    beta: Vec<usize>,
    /// w1, b1, w2, b2
    proj: [usize; 4],
    reg: [usize; 4],
    /// w, b
    rot: [usize; 2],
}

/// Number of rotation classes (0°, 90°, 180°, 270°).
pub const ROTATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    arch: ArchConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    roles: Vec<ParamRole>,
    running: Vec<RunningStats>,
    layout: Layout,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub features: Var,
    pub projection: Var,
    pub quality: Var,
}

/// Immutable copy of every parameter and running statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot(QualityModel);

impl ModelSnapshot {
    pub fn model(&self) -> &QualityModel {
        &self.0
    }

    /// A fresh, independently owned model equal to the snapshot.
    pub fn instantiate(&self) -> QualityModel {
        self.0.clone()
    }
}

struct Builder {
    params: Vec<Tensor>,
    names: Vec<String>,
    roles: Vec<ParamRole>,
}

impl Builder {
    fn push(&mut self, name: String, role: ParamRole, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.roles.push(role);
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, role: ParamRole, din: usize, dout: usize, rng: &mut impl Rng) -> (usize, usize) {
        let bound = 1.0 / (din as f64).sqrt();
        let w: Vec<f64> = (0..din * dout).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..dout).map(|_| rng.random_range(-bound..bound)).collect();
        let wi = self.push(format!("{prefix}.weight"), role, Tensor::new(vec![dout, din], w).expect("shape"));
        let bi = self.push(format!("{prefix}.bias"), role, Tensor::new(vec![dout], b).expect("shape"));
        (wi, bi)
    }
}

/// Stacks same-sized images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    if let Some(bad) = images.iter().find(|im| !im.same_dims(first)) {
        return Err(Error::InvalidImage(format!(
            "batch mixes {}x{}x{} with {}x{}x{}",
            first.height(),
            first.width(),
            first.channels(),
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for im in images {
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(vec![images.len(), first.channels(), first.height(), first.width()], data)?)
}

impl QualityModel {
    pub fn build(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut b = Builder { params: Vec::new(), names: Vec::new(), roles: Vec::new() };
        let (mut conv, mut gamma, mut beta, mut running) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut cin = arch.in_channels;
        for (i, &cout) in arch.widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            conv.push(b.push(
                format!("block{i}.conv.weight"),
                ParamRole::ConvWeight,
                Tensor::new(vec![cout, cin, 3, 3], w).expect("shape"),
            ));
            gamma.push(b.push(format!("block{i}.bn.gamma"), ParamRole::BnGamma, Tensor::full(vec![cout], 1.0)));
            beta.push(b.push(format!("block{i}.bn.beta"), ParamRole::BnBeta, Tensor::zeros(vec![cout])));
            running.push(RunningStats { mean: vec![0.0; cout], var: vec![1.0; cout] });
            cin = cout;
        }
        let f = arch.feature_dim();
        let (r1w, r1b) = b.linear("regressor.fc1", ParamRole::Regressor, f, arch.regressor_hidden, &mut rng);
        let (r2w, r2b) = b.linear("regressor.fc2", ParamRole::Regressor, arch.regressor_hidden, 1, &mut rng);
        let mut head_rng = ChaCha8Rng::seed_from_u64(arch.head_seed);
        let (p1w, p1b) = b.linear("projection.fc1", ParamRole::Projection, f, arch.proj_hidden, &mut head_rng);
        let (p2w, p2b) = b.linear("projection.fc2", ParamRole::Projection, arch.proj_hidden, arch.proj_dim, &mut head_rng);
        let (rw, rb) = b.linear("rotation.fc", ParamRole::RotationHead, arch.proj_dim, ROTATIONS, &mut head_rng);
        let layout = Layout {
            conv,
            gamma,
            beta,
            proj: [p1w, p1b, p2w, p2b],
            reg: [r1w, r1b, r2w, r2b],
            rot: [rw, rb],
        };
        Ok(Self { arch, params: b.params, names: b.names, roles: b.roles, running, layout })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layout.gamma.len()
    }

    /// Indices of BN affine and projection-head tensors.
    pub fn adaptable_indices(&self) -> Vec<usize> {
        self.indices_where(ParamRole::is_adaptable)
    }

    pub fn indices_where(&self, pred: impl Fn(ParamRole) -> bool) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| pred(self.roles[i])).collect()
    }

    pub fn rotation_head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let [w, b] = self.layout.rot;
        let (lo, hi) = self.params.split_at_mut(b);
        (&mut lo[w], &mut hi[0])
    }

    /// Records every parameter on `tape`; `trainable` decides which ones carry gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamRole) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .zip(&self.roles)
            .map(|(p, &role)| {
                let mut t = p.clone();
                t.grad = None;
                t.requires_grad = trainable(role);
                tape.leaf(&t)
            })
            .collect()
    }

    /// Copies gradients of bound leaves back into the parameters' grad slots.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = tape.grad(v).map(<[f64]>::to_vec);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: BnMode,
        running: &mut [RunningStats],
    ) -> Result<ForwardOut> {
        let l = &self.layout;
        let mut h = x;
        for (i, stats) in running.iter_mut().enumerate() {
            h = tape.conv2d(h, vars[l.conv[i]], 2, 1)?;
            h = tape.batch_norm(
                h,
                vars[l.gamma[i]],
                vars[l.beta[i]],
                &mut stats.mean,
                &mut stats.var,
                mode,
                self.arch.bn_eps,
                self.arch.bn_momentum,
            )?;
            h = tape.relu(h);
        }
        let features = tape.global_avg_pool(h)?;
        let r = tape.linear(features, vars[l.reg[0]], vars[l.reg[1]])?;
        let r = tape.relu(r);
        let quality = tape.linear(r, vars[l.reg[2]], vars[l.reg[3]])?;
        let p = tape.linear(features, vars[l.proj[0]], vars[l.proj[1]])?;
        let p = tape.relu(p);
        let projection = tape.linear(p, vars[l.proj[2]], vars[l.proj[3]])?;
        Ok(ForwardOut { features, projection, quality })
    }

    /// Forward pass; in [`BnMode::Train`] the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: BnMode) -> Result<ForwardOut> {
        let mut running = std::mem::take(&mut self.running);
        let out = self.forward_with(tape, vars, x, mode, &mut running);
        self.running = running;
        out
    }

    /// Forward pass that never touches running statistics.
    pub fn forward_frozen(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: BnMode) -> Result<ForwardOut> {
        let mode = if mode == BnMode::Train { BnMode::BatchStats } else { mode };
        let mut running = self.running.clone();
        self.forward_with(tape, vars, x, mode, &mut running)
    }

    pub fn rotation_logits(&self, tape: &mut Tape, vars: &[Var], projection: Var) -> Result<Var> {
        let [w, b] = self.layout.rot;
        Ok(tape.linear(projection, vars[w], vars[b])?)
    }

    fn infer(&self, batch: &[Image], mode: BnMode) -> Result<(Tape, ForwardOut)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(images_to_tensor(batch)?);
        let out = self.forward_frozen(&mut tape, &vars, x, mode)?;
        Ok((tape, out))
    }

    /// One score per image. `mode` is [`BnMode::Eval`] or [`BnMode::BatchStats`].
    pub fn predict_quality(&self, batch: &[Image], mode: BnMode) -> Result<Vec<f64>> {
        let (tape, out) = self.infer(batch, mode)?;
        Ok(tape.value(out.quality).data().to_vec())
    }

    /// Projection-head outputs, `[N, proj_dim]`.
    pub fn extract_projection(&self, batch: &[Image], mode: BnMode) -> Result<Tensor> {
        let (tape, out) = self.infer(batch, mode)?;
        Ok(tape.value(out.projection).clone())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut m = self.clone();
        m.zero_grads();
        ModelSnapshot(m)
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot) -> Result<()> {
        let src = &snapshot.0;
        if src.arch != self.arch || src.names != self.names {
            return Err(Error::ArchMismatch("snapshot was taken from a different architecture".into()));
        }
        for (dst, s) in self.params.iter_mut().zip(&src.params) {
            dst.data_mut().copy_from_slice(s.data());
            dst.grad = None;
        }
        self.running.clone_from(&src.running);
        Ok(())
    }

    /// SHA-256 over names, shapes, and exact bit patterns of the selected
    /// parameters, plus running statistics when `with_running` is set.
    pub fn content_hash_where(&self, pred: impl Fn(ParamRole) -> bool, with_running: bool) -> String {
        let mut h = Sha256::new();
        for i in self.indices_where(pred) {
            h.update(self.names[i].as_bytes());
            for d in self.params[i].shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in self.params[i].data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        if with_running {
            for s in &self.running {
                for v in s.mean.iter().chain(&s.var) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn content_hash(&self) -> String {
        self.content_hash_where(|_| true, true)
    }

    pub(crate) fn from_parts(arch: ArchConfig, tensors: Vec<(String, ParamRole, Tensor)>, running: Vec<RunningStats>) -> Result<Self> {
        let mut model = Self::build(arch)?;
        if tensors.len() != model.params.len() || running.len() != model.running.len() {
            return Err(Error::ArchMismatch(format!(
                "{} tensors / {} bn layers, architecture expects {} / {}",
                tensors.len(),
                running.len(),
                model.params.len(),
                model.running.len()
            )));
        }
        for (i, (name, role, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] || role != model.roles[i] || t.shape() != model.params[i].shape() {
                return Err(Error::ArchMismatch(format!("tensor {i} `{name}` {:?} does not match `{}`", t.shape(), model.names[i])));
            }
            model.params[i] = t;
        }
        for (i, s) in running.iter().enumerate() {
            if s.mean.len() != model.running[i].mean.len() || s.var.len() != model.running[i].var.len() {
                return Err(Error::ArchMismatch(format!("running stats of bn layer {i} have wrong width")));
            }
        }
        model.running = running;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    pub(crate) fn test_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..3 * side * side).map(|_| rng.random::<f64>()).collect();
                Image::new(side, side, 3, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_shapes() {
        let m = QualityModel::build(ArchConfig::default()).unwrap();
        let batch = test_images(8, 64, 1);
        let (tape, out) = m.infer(&batch, BnMode::Eval).unwrap();
        assert_eq!(tape.value(out.features).shape(), &[8, 64]);
        assert_eq!(tape.value(out.projection).shape(), &[8, 256]);
        assert_eq!(tape.value(out.quality).shape(), &[8, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = QualityModel::build(ArchConfig::default()).unwrap();
        let b = QualityModel::build(ArchConfig::default()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = QualityModel::build(ArchConfig { seed: 9, ..Default::default() }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn adaptable_set_partition() {
        let m = QualityModel::build(ArchConfig::default()).unwrap();
        assert_eq!(m.bn_layer_count(), 4);
        let adaptable = m.adaptable_indices();
        let bn = adaptable.iter().filter(|&&i| matches!(m.roles()[i], ParamRole::BnGamma | ParamRole::BnBeta)).count();
        let proj = adaptable.iter().filter(|&&i| m.roles()[i] == ParamRole::Projection).count();
        assert_eq!(bn, 8);
        assert_eq!(proj, 4);
        assert!(adaptable.iter().all(|&i| !matches!(m.roles()[i], ParamRole::ConvWeight | ParamRole::Regressor)));
    }

    #[test]
    fn crop_must_fit_pooling_depth() {
        assert!(QualityModel::build(ArchConfig { crop: 60, ..Default::default() }).is_err());
    }

    #[test]
    fn duplicate_images_score_identically_in_eval() {
        let m = QualityModel::build(ArchConfig::default()).unwrap();
        let imgs = test_images(2, 64, 3);
        let batch = vec![imgs[0].clone(), imgs[1].clone(), imgs[0].clone()];
        let s = m.predict_quality(&batch, BnMode::Eval).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].to_bits(), s[2].to_bits());
    }

    #[test]
    fn eval_is_permutation_equivariant() {
        let m = QualityModel::build(ArchConfig::default()).unwrap();
        let imgs = test_images(4, 32, 4);
        let s = m.predict_quality(&imgs, BnMode::Eval).unwrap();
        let rev: Vec<Image> = imgs.iter().rev().cloned().collect();
        let r = m.predict_quality(&rev, BnMode::Eval).unwrap();
        for i in 0..4 {
            assert_eq!(s[i].to_bits(), r[3 - i].to_bits());
        }
    }

    #[test]
    fn batch_mode_differs_from_eval_on_shifted_batch() {
        let m = QualityModel::build(ArchConfig::default()).unwrap();
        let imgs: Vec<Image> = test_images(4, 64, 5)
            .into_iter()
            .map(|im| Image::from_clipped(64, 64, 3, im.data().iter().map(|v| v * 0.2 + 0.7).collect()).unwrap())
            .collect();
        let e = m.predict_quality(&imgs, BnMode::Eval).unwrap();
        let b = m.predict_quality(&imgs, BnMode::BatchStats).unwrap();
        assert!(e.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn snapshot_restore_bit_exact() {
        let mut m = QualityModel::build(ArchConfig::default()).unwrap();
        let before = m.content_hash();
        let snap = m.snapshot();
        for i in m.indices_where(|r| r == ParamRole::BnGamma) {
            m.params_mut()[i].data_mut().iter_mut().for_each(|g| *g *= 1.5);
        }
        m.running[0].mean[0] = 3.0;
        assert_ne!(m.content_hash(), before);
        m.restore(&snap).unwrap();
        assert_eq!(m.content_hash(), before);
        assert_eq!(m, *snap.model());
        m.restore(&snap).unwrap();
        assert_eq!(m.content_hash(), before);
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let mut m = QualityModel::build(ArchConfig::default()).unwrap();
        let other = QualityModel::build(ArchConfig { widths: vec![8, 16, 32, 32], ..Default::default() }).unwrap();
        assert!(matches!(m.restore(&other.snapshot()), Err(Error::ArchMismatch(_))));
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut m = QualityModel::build(ArchConfig::default()).unwrap();
        let batch = test_images(4, 64, 8);
        let before = m.running.clone();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, |_| false);
        let x = tape.constant(images_to_tensor(&batch).unwrap());
        m.forward(&mut tape, &vars, x, BnMode::BatchStats).unwrap();
        assert_eq!(m.running, before);
        m.forward(&mut tape, &vars, x, BnMode::Train).unwrap();
        assert_ne!(m.running, before);
    }

    /// conv → BN → ReLU → FC composite on a 4×1×8×8 input against central differences.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut r = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let x = Tensor::new(vec![4, 1, 8, 8], r(256, 1.0)).unwrap();
        let w = Tensor::new(vec![3, 1, 3, 3], r(27, 0.5)).unwrap();
        let gamma = Tensor::new(vec![3], r(3, 1.0).iter().map(|v| v + 1.5).collect()).unwrap();
        let beta = Tensor::new(vec![3], r(3, 0.5)).unwrap();
        let fw = Tensor::new(vec![2, 3 * 4 * 4], r(96, 0.5)).unwrap();
        let fb = Tensor::new(vec![2], r(2, 0.5)).unwrap();
        let err = grad_check(
            |t, v| {
                let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
                let h = t.conv2d(v[0], v[1], 2, 1)?;
                let h = t.batch_norm(h, v[2], v[3], &mut rm, &mut rv, BnMode::BatchStats, 1e-5, 0.1)?;
                let h = t.relu(h);
                let h2 = t.reshape(h, vec![4, 48])?;
                let y = t.linear(h2, v[4], v[5])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, w, gamma, beta, fw, fb],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
