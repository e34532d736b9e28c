use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm layer obtains its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Current-batch statistics; running statistics updated by EMA.
    Train,
    /// Current-batch statistics; running statistics left untouched.
    BatchStats,
    /// Running statistics.
    Eval,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

/// Values saved by the batch-norm forward for its backward rule.
#[derive(Debug, Clone)]
pub struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    n: usize,
    c: usize,
    hw: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: Box<BnSaved> },
    Relu(Var),
    Linear { x: Var, w: Var, b: Var, n: usize, din: usize, dout: usize },
    GlobalAvgPool { x: Var, n: usize, c: usize, hw: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    Cosine { a: Var, b: Var, d: usize },
    PairwiseCosine { a: Var, b: Var, d: usize },
    Euclidean { a: Var, b: Var, d: usize },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize>, d: usize },
    LogSumExp(Var),
    SoftmaxXent { logits: Var, targets: Vec<usize>, k: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rows_of(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [d] => Some((1, *d)),
        [n, d] => Some((*n, *d)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a copy of `t`; it participates in gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = t.requires_grad;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient from the most recent [`Tape::backward`], if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    // ---- primitives ----

    /// 2-D convolution, `x` [N,C,H,W], `w` [Co,C,K,K], no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let geom = ConvGeom::new(&xs, &ws, stride, pad).ok_or_else(|| TensorError::InvalidShape {
            op: "conv2d",
            shape: xs.clone(),
            msg: format!("kernel {} stride {stride} pad {pad} does not fit", ws[2]),
        })?;
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w));
        let value = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Batch normalization over (N, H, W) for each channel of `x` [N,C,H,W] (or [N,C]).
    ///
    /// `running_mean`/`running_var` are read in eval mode and updated in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = match xs.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "batch_norm",
                    shape: xs,
                    msg: "expected [N,C] or [N,C,H,W]".into(),
                })
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" { "batch_norm(gamma)" } else { "batch_norm(beta)" },
                    lhs: xs.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                msg: format!("running stats have {} / {} channels, expected {c}", running_mean.len(), running_var.len()),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument { op: "batch_norm", msg: "eps must be positive".into() });
        }
        let batch_stats = mode.uses_batch_stats();
        let (mean, var) = if batch_stats {
            let per_channel = n * hw;
            if per_channel < 2 {
                return Err(TensorError::DegenerateBatch(per_channel));
            }
            kernels::channel_moments(self.data(x), n, c, hw)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        if mode == BnMode::Train {
            let m = (n * hw) as f64;
            for ch in 0..c {
                let unbiased = var[ch] * m / (m - 1.0);
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
                running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let saved = Box::new(BnSaved { xhat, inv_std, batch_stats, n, c, hw });
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, saved }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Fully-connected affine map: `x` [N,in], `w` [out,in], `b` [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(self.data(x), self.data(w), self.data(b), n, din, dout);
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b, n, din, dout }, rg))
    }

    /// [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(TensorError::InvalidShape { op: "global_avg_pool", shape: xs, msg: "expected 4-D input".into() });
        };
        let hw = h * w;
        let xd = self.data(x);
        let out: Vec<f64> = (0..n * c).map(|i| xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x, n, c, hw }, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(TensorError::InvalidShape { op: "mean", shape: self.shape(x).to_vec(), msg: "empty".into() });
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    fn row_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        self.same_shape(op, a, b)?;
        rows_of(self.shape(a)).ok_or_else(|| TensorError::InvalidShape {
            op,
            shape: self.shape(a).to_vec(),
            msg: "expected a vector or a matrix of row vectors".into(),
        })
    }

    /// Row-wise cosine similarity → [N].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.row_pair("cosine_similarity", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ar, br) = (&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]);
            let (na, nb) = (norm(ar), norm(br));
            if na == 0.0 || nb == 0.0 {
                return Err(TensorError::ZeroNorm { op: "cosine_similarity" });
            }
            out.push(dot(ar, br) / (na * nb));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out), Op::Cosine { a, b, d }, rg))
    }

    /// Cosine similarity of every row of `a` [N,D] with every row of `b` [M,D] → [N,M].
    pub fn pairwise_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "pairwise_cosine", lhs: sa, rhs: sb });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let an = normalized_rows(self.data(a), n, d).ok_or(TensorError::ZeroNorm { op: "pairwise_cosine" })?;
        let bn = normalized_rows(self.data(b), m, d).ok_or(TensorError::ZeroNorm { op: "pairwise_cosine" })?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&an[i * d..(i + 1) * d], &bn[j * d..(j + 1) * d]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseCosine { a, b, d }, rg))
    }

    /// Row-wise Euclidean distance → [N].
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.row_pair("euclidean_distance", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..n)
            .map(|i| {
                ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[i * d..(i + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out), Op::Euclidean { a, b, d }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = self.data(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(TensorError::InvalidArgument { op: "gather", msg: format!("index {bad} out of range {len}") });
        }
        let xd = self.data(x);
        let out: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Picks rows of a matrix `x` [N,D] → [rows.len(), D].
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, d] = xs[..] else {
            return Err(TensorError::InvalidShape { op: "select_rows", shape: xs, msg: "expected a matrix".into() });
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::InvalidArgument { op: "select_rows", msg: format!("row {bad} out of range {n}") });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows.len(), d], out)?, Op::SelectRows { x, rows: rows.to_vec(), d }, rg))
    }

    /// `ln Σ exp(x)` over every element → scalar.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let xd = self.data(x);
        if xd.is_empty() {
            return Err(TensorError::InvalidShape { op: "logsumexp", shape: self.shape(x).to_vec(), msg: "empty".into() });
        }
        let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = m + xd.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(x), rg))
    }

    /// Mean softmax cross-entropy of `logits` [M,K] against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let [m, k] = ls[..] else {
            return Err(TensorError::InvalidShape { op: "softmax_cross_entropy", shape: ls, msg: "expected [M,K]".into() });
        };
        if targets.len() != m || targets.iter().any(|&t| t >= k) || m == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("{} targets for {m} rows of {k} classes", targets.len()),
            });
        }
        let ld = self.data(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), k },
            rg,
        ))
    }

    // ---- reverse pass ----

    /// Populates gradients of the scalar `loss` for every node requiring them.
    ///
    /// Previous gradients are discarded; nodes that require a gradient but are
    /// not on a path to `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.data(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                let (gx, gw) = kernels::conv2d_backward(geom, self.data(*x), self.data(*w), g, need_x, need_w);
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*w, &mut |s| add_into(s, &gw));
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let BnSaved { xhat, inv_std, batch_stats, n, c, hw } = saved.as_ref();
                let (n, c, hw) = (*n, *c, *hw);
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * hw) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = if *batch_stats {
                                    gm[ch] * inv_std[ch] / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    gm[ch] * inv_std[ch] * g[j]
                                };
                            }
                        }
                    }
                    acc(*x, &mut |s| add_into(s, &dx));
                }
                acc(*gamma, &mut |s| add_into(s, &dgamma));
                acc(*beta, &mut |s| add_into(s, &dbeta));
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for ((s, &gv), &xv) in s.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Linear { x, w, b, n, din, dout } => {
                let (n, din, dout) = (*n, *din, *dout);
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for k in 0..din {
                                s[r * din + k] += gv * wd[o * din + k];
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for k in 0..din {
                                s[o * din + k] += gv * xd[r * din + k];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..n {
                        for o in 0..dout {
                            s[o] += g[r * dout + o];
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x, n, c, hw } => {
                let inv = 1.0 / *hw as f64;
                acc(*x, &mut |s| {
                    for i in 0..n * c {
                        for v in &mut s[i * hw..(i + 1) * hw] {
                            *v += g[i] * inv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, gv)| *s -= gv));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bd[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * ad[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, gv)| *s += gv * c)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / self.data(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += inv));
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Log(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xd[k];
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Softplus(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * stable_sigmoid(xd[k]);
                    }
                });
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * if xd[k] > 0.0 { 1.0 } else if xd[k] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Cosine { a, b, d } => {
                let d = *d;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let n = out.len();
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for r in 0..n {
                    let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                    let (na, nb) = (norm(ar), norm(br));
                    let c = out[r];
                    for k in 0..d {
                        ga[r * d + k] = g[r] * (br[k] / (na * nb) - c * ar[k] / (na * na));
                        gb[r * d + k] = g[r] * (ar[k] / (na * nb) - c * br[k] / (nb * nb));
                    }
                }
                acc(*a, &mut |s| add_into(s, &ga));
                acc(*b, &mut |s| add_into(s, &gb));
            }
            Op::PairwiseCosine { a, b, d } => {
                let d = *d;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (n, m) = (ad.len() / d, bd.len() / d);
                let an = normalized_rows(ad, n, d).expect("checked in forward");
                let bn = normalized_rows(bd, m, d).expect("checked in forward");
                // gradient w.r.t. the normalized rows, then through the normalization
                let mut dan = vec![0.0; n * d];
                let mut dbn = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            dan[i * d + k] += gv * bn[j * d + k];
                            dbn[j * d + k] += gv * an[i * d + k];
                        }
                    }
                }
                let through_norm = |raw: &[f64], unit: &[f64], dunit: &[f64], rows: usize| {
                    let mut out = vec![0.0; rows * d];
                    for r in 0..rows {
                        let nr = norm(&raw[r * d..(r + 1) * d]);
                        let u = &unit[r * d..(r + 1) * d];
                        let du = &dunit[r * d..(r + 1) * d];
                        let proj = dot(du, u);
                        for k in 0..d {
                            out[r * d + k] = (du[k] - proj * u[k]) / nr;
                        }
                    }
                    out
                };
                if self.rg(*a) {
                    let ga = through_norm(ad, &an, &dan, n);
                    acc(*a, &mut |s| add_into(s, &ga));
                }
                if self.rg(*b) {
                    let gb = through_norm(bd, &bn, &dbn, m);
                    acc(*b, &mut |s| add_into(s, &gb));
                }
            }
            Op::Euclidean { a, b, d } => {
                let d = *d;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; ad.len()];
                for (r, &dist) in out.iter().enumerate() {
                    if dist == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        ga[r * d + k] = g[r] * (ad[r * d + k] - bd[r * d + k]) / dist;
                    }
                }
                acc(*a, &mut |s| add_into(s, &ga));
                acc(*b, &mut |s| s.iter_mut().zip(&ga).for_each(|(s, gv)| *s -= gv));
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Gather { x, idx } => acc(*x, &mut |s| {
                for (k, &i) in idx.iter().enumerate() {
                    s[i] += g[k];
                }
            }),
            Op::SelectRows { x, rows, d } => acc(*x, &mut |s| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..*d {
                        s[r * d + j] += g[k * d + j];
                    }
                }
            }),
            Op::LogSumExp(x) => {
                let xd = self.data(*x);
                let lse = out[0];
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (xd[k] - lse).exp();
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, k } => {
                let k = *k;
                let ld = self.data(*logits);
                let m = targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * k..(r + 1) * k];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for c in 0..k {
                            let p = (row[c] - mx).exp() / z;
                            let y = if c == t { 1.0 } else { 0.0 };
                            s[r * k + c] += g[0] * (p - y) / m;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized_rows(x: &[f64], rows: usize, d: usize) -> Option<Vec<f64>> {
    let mut out = x.to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        let nr = norm(row);
        if nr == 0.0 {
            return None;
        }
        row.iter_mut().for_each(|v| *v /= nr);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1], vec![3.0]);
        let y = t.mul(x, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2, 3, 2], (0..12).map(f64::from).collect());
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut t, vec![3], vec![1.0, 2.0, 3.0]);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn cosine_and_distance_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let c = t.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let s_same = t.cosine_similarity(a, b).unwrap();
        let s_orth = t.cosine_similarity(a, c).unwrap();
        assert_eq!(t.value(s_same).data(), &[1.0]);
        assert_eq!(t.value(s_orth).data(), &[0.0]);
        let p = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let o = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let d = t.euclidean_distance(p, o).unwrap();
        assert_eq!(t.value(d).data(), &[5.0]);
        assert!(matches!(t.cosine_similarity(p, o), Err(TensorError::ZeroNorm { .. })));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2]));
        let b = t.constant(Tensor::zeros(vec![3]));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn softplus_is_stable() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-800.0, 0.0, 800.0, 10.0]));
        let y = t.softplus(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
        assert!((v[3] - 10.000045398899218).abs() < 1e-12);
    }
}
