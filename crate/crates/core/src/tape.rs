//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every produced tensor is a node; nodes record the operation and whatever
//! forward values the backward rule needs. The tape is append-only and
//! topological by construction, and single-writer: one forward/backward
//! evaluation at a time.

use crate::error::{Result, SeidError};
use crate::layers::{
    col2im, conv_out_size, im2col, matmul_nn, transpose, BatchNormState, BnMode, ConvSpec,
    PoolKind, PoolSpec,
};
use crate::tensor::{Shape, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

/// How the second operand aligns with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinMode {
    /// identical shapes
    Elem,
    /// a: N x C x H x W, b: per-channel vector (C or 1xCx1x1)
    ChanParam,
    /// a: N x C x H x W, b: N x C (per-sample per-channel gates)
    SampleChan,
    /// a: N x M, b: M (row-broadcast bias)
    Row,
}

enum Op {
    Leaf,
    Bin {
        kind: BinKind,
        mode: BinMode,
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    /// a * b^T
    MatMulBT(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Pool2d {
        x: Var,
        spec: PoolSpec,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CenterLoss {
        feats: Var,
        labels: Vec<usize>,
        centers: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operation selector for the generic dispatch entry point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    ScaleByScalar(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable, produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, all-zero if `v` did not contribute to the loss.
    pub fn grad(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape.dims()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ----

    pub fn elementwise(&mut self, kind: ElemKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElemKind::Add, Some(b)) => self.add(a, b),
            (ElemKind::Sub, Some(b)) => self.sub(a, b),
            (ElemKind::Mul, Some(b)) => self.mul(a, b),
            (ElemKind::Relu, None) => Ok(self.relu(a)),
            (ElemKind::Sigmoid, None) => Ok(self.sigmoid(a)),
            (ElemKind::ScaleByScalar(c), None) => Ok(self.scale(a, c)),
            _ => Err(SeidError::contract(
                "elementwise: operand arity does not match kind".to_string(),
            )),
        }
    }

    fn bin_mode(&self, a: Var, b: Var) -> Result<BinMode> {
        let sa = &self.value(a).shape;
        let sb = &self.value(b).shape;
        if sa == sb {
            return Ok(BinMode::Elem);
        }
        let da = sa.dims();
        let db = sb.dims();
        if da.len() == 4 {
            let c = da[1];
            if db == [c] || db == [1, c, 1, 1] {
                return Ok(BinMode::ChanParam);
            }
            if db == [da[0], c] {
                return Ok(BinMode::SampleChan);
            }
        }
        if da.len() == 2 && db == [da[1]] {
            return Ok(BinMode::Row);
        }
        Err(SeidError::shape(format!(
            "operands {sa} and {sb} are neither equal nor per-channel broadcastable"
        )))
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let mode = self.bin_mode(a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape = av.shape.clone();
        let mut data = Vec::with_capacity(av.data.len());
        let apply = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        match mode {
            BinMode::Elem => {
                data.extend(av.data.iter().zip(&bv.data).map(|(&x, &y)| apply(x, y)));
            }
            BinMode::ChanParam => {
                let [n, c, h, w] = dims4(&av.shape);
                let hw = h * w;
                for ni in 0..n {
                    for ci in 0..c {
                        let y = bv.data[ci];
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            data.push(apply(av.data[base + i], y));
                        }
                    }
                }
            }
            BinMode::SampleChan => {
                let [n, c, h, w] = dims4(&av.shape);
                let hw = h * w;
                for ni in 0..n {
                    for ci in 0..c {
                        let y = bv.data[ni * c + ci];
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            data.push(apply(av.data[base + i], y));
                        }
                    }
                }
            }
            BinMode::Row => {
                let m = bv.data.len();
                for (i, &x) in av.data.iter().enumerate() {
                    data.push(apply(x, bv.data[i % m]));
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Bin { kind, mode, a, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| sigmoid_scalar(x)).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| x * c).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Scale(a, c), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(&self.value(a).shape)?;
        let (k2, m) = dims2(&self.value(b).shape)?;
        if k != k2 {
            return Err(SeidError::shape(format!(
                "matmul inner dimensions differ: {} vs {}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_nn(&self.value(a).data, &self.value(b).data, n, k, m, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_dims(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// a(n x k) * b(m x k)^T -> n x m
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(&self.value(a).shape)?;
        let (m, k2) = dims2(&self.value(b).shape)?;
        if k != k2 {
            return Err(SeidError::shape(format!(
                "matmul_bt inner dimensions differ: {} vs {}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut bt = vec![0.0; k * m];
        transpose(&self.value(b).data, m, k, &mut bt);
        let mut out = vec![0.0; n * m];
        matmul_nn(&self.value(a).data, &bt, n, k, m, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_dims(&[n, m], out)?, Op::MatMulBT(a, b), rg))
    }

    // ---- conv / pool / concat / bn ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, width] = dims4(&self.value(x).shape);
        if cin != spec.in_channels {
            return Err(SeidError::shape(format!(
                "conv2d: input has {cin} channels, spec expects {}",
                spec.in_channels
            )));
        }
        if self.value(w).shape.dims() != spec.weight_dims() {
            return Err(SeidError::shape(format!(
                "conv2d: weight shape {} does not match spec {:?}",
                self.value(w).shape,
                spec.weight_dims()
            )));
        }
        let oh = conv_out_size(h, spec.kernel, spec.stride, spec.pad)?;
        let ow = conv_out_size(width, spec.kernel, spec.stride, spec.pad)?;
        let ckk = cin * spec.kernel * spec.kernel;
        let os = oh * ow;
        let mut out = vec![0.0; n * spec.out_channels * os];
        let mut col = vec![0.0; ckk * os];
        for ni in 0..n {
            let xs = &self.value(x).data[ni * cin * h * width..(ni + 1) * cin * h * width];
            im2col(xs, cin, h, width, spec.kernel, spec.stride, spec.pad, oh, ow, &mut col);
            let dst = &mut out[ni * spec.out_channels * os..(ni + 1) * spec.out_channels * os];
            matmul_nn(&self.value(w).data, &col, spec.out_channels, ckk, os, dst);
        }
        if let Some(bias) = b {
            let bv = &self.value(bias).data;
            if bv.len() != spec.out_channels {
                return Err(SeidError::shape(format!(
                    "conv2d: bias length {} != out_channels {}",
                    bv.len(),
                    spec.out_channels
                )));
            }
            for ni in 0..n {
                for o in 0..spec.out_channels {
                    let base = (ni * spec.out_channels + o) * os;
                    let bo = bv[o];
                    for v in &mut out[base..base + os] {
                        *v += bo;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bias) = b {
            inputs.push(bias);
        }
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::from_dims(&[n, spec.out_channels, oh, ow], out)?,
            Op::Conv2d { x, w, b, spec },
            rg,
        ))
    }

    pub fn pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let [n, c, h, w] = dims4(&self.value(x).shape);
        let (kernel, stride, pad) = match spec.kind {
            PoolKind::GlobalAverage => (h.max(w), 1, 0),
            _ => (spec.kernel, spec.stride, spec.pad),
        };
        let (oh, ow) = match spec.kind {
            PoolKind::GlobalAverage => (1, 1),
            _ => (
                conv_out_size(h, kernel, stride, pad)?,
                conv_out_size(w, kernel, stride, pad)?,
            ),
        };
        let os = oh * ow;
        let mut out = vec![0.0; n * c * os];
        let mut argmax = Vec::new();
        let xd = &self.value(x).data;
        match spec.kind {
            PoolKind::GlobalAverage => {
                let hw = h * w;
                for (i, chunk) in xd.chunks(hw).enumerate() {
                    let mut s = 0.0;
                    for &v in chunk {
                        s += v;
                    }
                    out[i] = s / hw as f64;
                }
            }
            PoolKind::Average => {
                let area = (kernel * kernel) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut s = 0.0;
                                for ki in 0..kernel {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        s += xd[base + iy as usize * w + ix as usize];
                                    }
                                }
                                out[(ni * c + ci) * os + oy * ow + ox] = s / area;
                            }
                        }
                    }
                }
            }
            PoolKind::Max => {
                argmax = vec![0usize; n * c * os];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = usize::MAX;
                                for ki in 0..kernel {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        let idx = base + iy as usize * w + ix as usize;
                                        // strict > keeps the first index on ties
                                        if xd[idx] > best {
                                            best = xd[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                if best_idx == usize::MAX {
                                    return Err(SeidError::shape(
                                        "max pool window contains no valid input".to_string(),
                                    ));
                                }
                                let oi = (ni * c + ci) * os + oy * ow + ox;
                                out[oi] = best;
                                argmax[oi] = best_idx;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::from_dims(&[n, c, oh, ow], out)?,
            Op::Pool2d { x, spec, argmax },
            rg,
        ))
    }

    /// Concatenate along the channel axis; blocks appear in argument order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(SeidError::contract("concat of zero tensors".to_string()));
        }
        if xs.len() == 1 {
            // identity; still record so backward slices correctly
            let value = self.value(xs[0]).clone();
            let rg = self.nodes[xs[0].0].requires_grad;
            return Ok(self.push(value, Op::Concat(xs.to_vec()), rg));
        }
        let mut shape = self.value(xs[0]).shape.clone();
        for &x in &xs[1..] {
            shape = shape.concat_with(&self.value(x).shape, 1)?;
        }
        let [n, c_total, h, w] = dims4(&shape);
        let hw = h * w;
        let mut out = vec![0.0; n * c_total * hw];
        for ni in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let ci = self.value(x).shape.dims()[1];
                let src = &self.value(x).data[ni * ci * hw..(ni + 1) * ci * hw];
                out[(ni * c_total + c_off) * hw..(ni * c_total + c_off + ci) * hw]
                    .copy_from_slice(src);
                c_off += ci;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(&self.value(x).shape);
        if state.channels() != c || self.value(gamma).data.len() != c || self.value(beta).data.len() != c
        {
            return Err(SeidError::shape(format!(
                "batch_norm: channel mismatch (input {c}, state {})",
                state.channels()
            )));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = &self.value(x).data;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            s += xd[base + i];
                        }
                    }
                    mean[ci] = s / m;
                    let mut v = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            let d = xd[base + i] - mean[ci];
                            v += d * d;
                        }
                    }
                    var[ci] = v / m;
                }
                for ci in 0..c {
                    state.running_mean[ci] =
                        (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean[ci];
                    state.running_var[ci] =
                        (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var[ci];
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let gd = &self.value(gamma).data;
        let bd = &self.value(beta).data;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - mean[ci]) * inv_std[ci];
                    xhat[base + i] = xh;
                    out[base + i] = gd[ci] * xh + bd[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_dims(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            rg,
        ))
    }

    // ---- shape / reduction ----

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(dims)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data.len() as f64;
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    // ---- classification heads ----

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = dims2(&self.value(x).shape)?;
        let mut out = vec![0.0; n * m];
        softmax_rows(&self.value(x).data, n, m, &mut out);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_dims(&[n, m], out)?, Op::Softmax(x), rg))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, m) = dims2(&self.value(logits).shape)?;
        if labels.len() != n {
            return Err(SeidError::contract(format!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(SeidError::contract(format!(
                "label {bad} out of range for {m} classes"
            )));
        }
        let mut probs = vec![0.0; n * m];
        softmax_rows(&self.value(logits).data, n, m, &mut probs);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * m + l].ln();
        }
        loss /= n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// (1/2N) * sum_i ||x_i - c_{y_i}||^2; centers are constants here.
    pub fn center_loss(&mut self, feats: Var, labels: &[usize], centers: &Tensor) -> Result<Var> {
        let (n, d) = dims2(&self.value(feats).shape)?;
        let (classes, dc) = dims2(&centers.shape)?;
        if d != dc {
            return Err(SeidError::shape(format!(
                "center_loss: feature width {d} != center width {dc}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SeidError::contract(format!(
                "label {bad} out of range for {classes} centers"
            )));
        }
        if labels.len() != n {
            return Err(SeidError::contract(format!(
                "center_loss: {} labels for batch of {n}",
                labels.len()
            )));
        }
        let fd = &self.value(feats).data;
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..d {
                let diff = fd[i * d + j] - centers.data[l * d + j];
                loss += diff * diff;
            }
        }
        loss /= 2.0 * n as f64;
        let rg = self.nodes[feats.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CenterLoss {
                feats,
                labels: labels.to_vec(),
                centers: centers.clone(),
            },
            rg,
        ))
    }

    // ---- backward ----

    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(SeidError::contract(format!(
                "backward: loss must be scalar, got shape {}",
                loss_value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(GradStore { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let entry = &mut grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(self.value(v).shape.dims()));
        }
        update(&mut entry.as_mut().unwrap().data);
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Bin { kind, mode, a, b } => self.backprop_bin(*kind, *mode, *a, *b, g, grads),
            Op::Relu(x) => {
                let xd = &self.value(*x).data;
                self.acc(grads, *x, |dst| {
                    for (j, d) in dst.iter_mut().enumerate() {
                        // subgradient 0 at exactly 0
                        if xd[j] > 0.0 {
                            *d += g.data[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = &self.nodes[i].value.data;
                self.acc(grads, *x, |dst| {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g.data[j] * yd[j] * (1.0 - yd[j]);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |dst| {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g.data[j] * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                // dA = g * B^T ; dB = A^T * g
                let (n, k) = dims2(&self.value(*a).shape)?;
                let (_, m) = dims2(&self.value(*b).shape)?;
                if self.nodes[a.0].requires_grad {
                    let mut bt = vec![0.0; m * k];
                    transpose(&self.value(*b).data, k, m, &mut bt);
                    let mut da = vec![0.0; n * k];
                    matmul_nn(&g.data, &bt, n, m, k, &mut da);
                    self.acc(grads, *a, |dst| add_into(dst, &da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut at = vec![0.0; k * n];
                    transpose(&self.value(*a).data, n, k, &mut at);
                    let mut db = vec![0.0; k * m];
                    matmul_nn(&at, &g.data, k, n, m, &mut db);
                    self.acc(grads, *b, |dst| add_into(dst, &db));
                }
            }
            Op::MatMulBT(a, b) => {
                // y = a * b^T ; dA = g * b ; dB = g^T * a
                let (n, k) = dims2(&self.value(*a).shape)?;
                let (m, _) = dims2(&self.value(*b).shape)?;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; n * k];
                    matmul_nn(&g.data, &self.value(*b).data, n, m, k, &mut da);
                    self.acc(grads, *a, |dst| add_into(dst, &da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gt = vec![0.0; m * n];
                    transpose(&g.data, n, m, &mut gt);
                    let mut db = vec![0.0; m * k];
                    matmul_nn(&gt, &self.value(*a).data, m, n, k, &mut db);
                    self.acc(grads, *b, |dst| add_into(dst, &db));
                }
            }
            Op::Conv2d { x, w, b, spec } => self.backprop_conv(*x, *w, *b, *spec, g, grads)?,
            Op::Pool2d { x, spec, argmax } => {
                let [n, c, h, w] = dims4(&self.value(*x).shape);
                let [_, _, oh, ow] = dims4(&self.nodes[i].value.shape);
                let os = oh * ow;
                let hw = h * w;
                match spec.kind {
                    PoolKind::Max => {
                        self.acc(grads, *x, |dst| {
                            for (oi, &src) in argmax.iter().enumerate() {
                                dst[src] += g.data[oi];
                            }
                        });
                    }
                    PoolKind::GlobalAverage => {
                        let inv = 1.0 / hw as f64;
                        self.acc(grads, *x, |dst| {
                            for (ci, chunk) in dst.chunks_mut(hw).enumerate() {
                                let gv = g.data[ci] * inv;
                                for d in chunk {
                                    *d += gv;
                                }
                            }
                        });
                    }
                    PoolKind::Average => {
                        let (kernel, stride, pad) = (spec.kernel, spec.stride, spec.pad);
                        let inv = 1.0 / (kernel * kernel) as f64;
                        self.acc(grads, *x, |dst| {
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * hw;
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let gv =
                                                g.data[(ni * c + ci) * os + oy * ow + ox] * inv;
                                            for ki in 0..kernel {
                                                let iy =
                                                    (oy * stride + ki) as isize - pad as isize;
                                                if iy < 0 || iy as usize >= h {
                                                    continue;
                                                }
                                                for kj in 0..kernel {
                                                    let ix = (ox * stride + kj) as isize
                                                        - pad as isize;
                                                    if ix < 0 || ix as usize >= w {
                                                        continue;
                                                    }
                                                    dst[base + iy as usize * w + ix as usize] +=
                                                        gv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Concat(xs) => {
                let [n, c_total, h, w] = dims4(&self.nodes[i].value.shape);
                let hw = h * w;
                let mut c_off = 0;
                for &x in xs {
                    let ci = self.value(x).shape.dims()[1];
                    self.acc(grads, x, |dst| {
                        for ni in 0..n {
                            let src_base = (ni * c_total + c_off) * hw;
                            let dst_base = ni * ci * hw;
                            for j in 0..ci * hw {
                                dst[dst_base + j] += g.data[src_base + j];
                            }
                        }
                    });
                    c_off += ci;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = dims4(&self.value(*x).shape);
                let hw = h * w;
                let m = (n * hw) as f64;
                let gd = &self.value(*gamma).data;
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for j in 0..hw {
                            sum_g[ci] += g.data[base + j];
                            sum_gx[ci] += g.data[base + j] * xhat[base + j];
                        }
                    }
                }
                self.acc(grads, *beta, |dst| add_into(dst, &sum_g));
                self.acc(grads, *gamma, |dst| add_into(dst, &sum_gx));
                if *train {
                    self.acc(grads, *x, |dst| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                let scale = gd[ci] * inv_std[ci] / m;
                                for j in 0..hw {
                                    dst[base + j] += scale
                                        * (m * g.data[base + j]
                                            - sum_g[ci]
                                            - xhat[base + j] * sum_gx[ci]);
                                }
                            }
                        }
                    });
                } else {
                    self.acc(grads, *x, |dst| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                let scale = gd[ci] * inv_std[ci];
                                for j in 0..hw {
                                    dst[base + j] += scale * g.data[base + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |dst| add_into(dst, &g.data));
            }
            Op::Sum(x) => {
                let gv = g.data[0];
                self.acc(grads, *x, |dst| {
                    for d in dst {
                        *d += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let count = self.value(*x).data.len() as f64;
                let gv = g.data[0] / count;
                self.acc(grads, *x, |dst| {
                    for d in dst {
                        *d += gv;
                    }
                });
            }
            Op::Softmax(x) => {
                let (n, m) = dims2(&self.nodes[i].value.shape)?;
                let p = &self.nodes[i].value.data;
                self.acc(grads, *x, |dst| {
                    for r in 0..n {
                        let row = r * m;
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += g.data[row + j] * p[row + j];
                        }
                        for j in 0..m {
                            dst[row + j] += p[row + j] * (g.data[row + j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let (n, m) = dims2(&self.value(*logits).shape)?;
                let gv = g.data[0] / n as f64;
                self.acc(grads, *logits, |dst| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            dst[r * m + j] += gv * (probs[r * m + j] - onehot);
                        }
                    }
                });
            }
            Op::CenterLoss {
                feats,
                labels,
                centers,
            } => {
                let (n, d) = dims2(&self.value(*feats).shape)?;
                let fd = &self.value(*feats).data;
                let gv = g.data[0] / n as f64;
                self.acc(grads, *feats, |dst| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..d {
                            dst[r * d + j] += gv * (fd[r * d + j] - centers.data[l * d + j]);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn backprop_bin(
        &self,
        kind: BinKind,
        mode: BinMode,
        a: Var,
        b: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        // da: direct for add/sub, scaled by broadcast(b) for mul
        if self.nodes[a.0].requires_grad {
            match kind {
                BinKind::Add | BinKind::Sub => {
                    self.acc(grads, a, |dst| add_into(dst, &g.data));
                }
                BinKind::Mul => {
                    let bv = self.value(b);
                    let av_shape = self.value(a).shape.clone();
                    self.acc(grads, a, |dst| {
                        for_each_broadcast(&av_shape, mode, |flat, bidx| {
                            dst[flat] += g.data[flat] * bv.data[bidx];
                        });
                    });
                }
            }
        }
        // db: reduce over the broadcast axes
        if self.nodes[b.0].requires_grad {
            let sign = if kind == BinKind::Sub { -1.0 } else { 1.0 };
            let av = self.value(a);
            let av_shape = av.shape.clone();
            self.acc(grads, b, |dst| {
                for_each_broadcast(&av_shape, mode, |flat, bidx| {
                    let contrib = match kind {
                        BinKind::Mul => g.data[flat] * av.data[flat],
                        _ => g.data[flat] * sign,
                    };
                    dst[bidx] += contrib;
                });
            });
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let [n, cin, h, width] = dims4(&self.value(x).shape);
        let [_, cout, oh, ow] = dims4(&g.shape);
        let os = oh * ow;
        let ckk = cin * spec.kernel * spec.kernel;
        let need_dx = self.nodes[x.0].requires_grad;
        let need_dw = self.nodes[w.0].requires_grad;
        let mut dw_acc = vec![0.0; cout * ckk];
        let mut dx_acc = if need_dx {
            vec![0.0; n * cin * h * width]
        } else {
            Vec::new()
        };
        let mut col = vec![0.0; ckk * os];
        let mut colt = vec![0.0; os * ckk];
        let mut wt = vec![0.0; ckk * cout];
        transpose(&self.value(w).data, cout, ckk, &mut wt);
        let mut dwn = vec![0.0; cout * ckk];
        let mut dcol = vec![0.0; ckk * os];
        for ni in 0..n {
            let gs = &g.data[ni * cout * os..(ni + 1) * cout * os];
            if need_dw {
                let xs = &self.value(x).data[ni * cin * h * width..(ni + 1) * cin * h * width];
                im2col(
                    xs, cin, h, width, spec.kernel, spec.stride, spec.pad, oh, ow, &mut col,
                );
                transpose(&col, ckk, os, &mut colt);
                matmul_nn(gs, &colt, cout, os, ckk, &mut dwn);
                add_into(&mut dw_acc, &dwn);
            }
            if need_dx {
                matmul_nn(&wt, gs, ckk, cout, os, &mut dcol);
                let dst = &mut dx_acc[ni * cin * h * width..(ni + 1) * cin * h * width];
                col2im(
                    &dcol, cin, h, width, spec.kernel, spec.stride, spec.pad, oh, ow, dst,
                );
            }
        }
        if need_dw {
            self.acc(grads, w, |dst| add_into(dst, &dw_acc));
        }
        if need_dx {
            self.acc(grads, x, |dst| add_into(dst, &dx_acc));
        }
        if let Some(bias) = b {
            self.acc(grads, bias, |dst| {
                for ni in 0..n {
                    for o in 0..cout {
                        let base = (ni * cout + o) * os;
                        let mut s = 0.0;
                        for j in 0..os {
                            s += g.data[base + j];
                        }
                        dst[o] += s;
                    }
                }
            });
        }
        Ok(())
    }
}

// Iterate the flat indices of `a` along with the matching broadcast index of b.
fn for_each_broadcast(a_shape: &Shape, mode: BinMode, mut f: impl FnMut(usize, usize)) {
    match mode {
        BinMode::Elem => {
            for i in 0..a_shape.elem_count() {
                f(i, i);
            }
        }
        BinMode::ChanParam => {
            let [n, c, h, w] = dims4(a_shape);
            let hw = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        f(base + i, ci);
                    }
                }
            }
        }
        BinMode::SampleChan => {
            let [n, c, h, w] = dims4(a_shape);
            let hw = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        f(base + i, ni * c + ci);
                    }
                }
            }
        }
        BinMode::Row => {
            let dims = a_shape.dims();
            let (n, m) = (dims[0], dims[1]);
            for r in 0..n {
                for j in 0..m {
                    f(r * m + j, j);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for r in 0..n {
        let row = &x[r * m..(r + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * m + j] = e;
            sum += e;
        }
        for j in 0..m {
            out[r * m + j] /= sum;
        }
    }
}

fn dims2(shape: &Shape) -> Result<(usize, usize)> {
    let d = shape.dims();
    if d.len() != 2 {
        return Err(SeidError::shape(format!("expected rank-2 tensor, got {shape}")));
    }
    Ok((d[0], d[1]))
}

fn dims4(shape: &Shape) -> [usize; 4] {
    let d = shape.dims();
    assert!(d.len() == 4, "expected rank-4 tensor, got {shape}");
    [d[0], d[1], d[2], d[3]]
}
