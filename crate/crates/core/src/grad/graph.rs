//! Tape of recorded operations and the reverse pass over it.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order because operands must exist before the node that uses
//! them. [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients; gradients are retained only on parameter leaves, intermediate
//! buffers are dropped as soon as their node has been processed.
//!
//! Layout is N×C×H×W for all image ops. Convolution is cross-correlation
//! (no kernel flip).

use crate::grad::Tensor;
use crate::{Error, Result};

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output spatial size equals input.
    Same,
    /// No padding, output shrinks by kernel size minus one.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update running statistics.
    Train,
    /// Normalize by running statistics.
    Eval,
}

/// Per-channel running statistics owned by the model, updated by train-mode
/// batch norm: `running <- 0.9 * running + 0.1 * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        shift: Var,
        mode: BnMode,
        // Statistics the forward pass normalized with.
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2x2 {
        x: Var,
        // Flat input index of the winning element per output element.
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        // Softmax probabilities, same layout as logits.
        probs: Vec<f64>,
    },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Relu { x }
            | Op::MaxPool2x2 { x, .. }
            | Op::Upsample2x { x } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatChannels { a, b } => vec![a, b],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::BatchNorm {
                x, gamma, shift, ..
            } => vec![x, gamma, shift],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Row-major matrix product `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)`
/// with explicit operand strides so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut().take(m * n) {
            *x = if beta == 0.0 { 0.0 } else { *x * beta };
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients are not tracked through.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Graph::backward`] call. Only
    /// parameter leaves retain gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| k * v).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, k }, needs)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Cross-correlation of `x` (N×Cin×H×W) with `w` (Cout×Cin×KH×KW) plus
    /// per-output-channel bias. Zero padding for [`Padding::Same`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, kcin, kh, kw] = self.value(w).dims4("conv2d")?;
        let mismatch = |detail: String| Error::ShapeMismatch {
            op: "conv2d",
            detail,
        };
        if kcin != cin {
            return Err(mismatch(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(mismatch(format!(
                "kernel spatial size {kh}x{kw} must be odd"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.shape(b)
            )));
        }
        let geo = ConvGeometry::new(h, wd, kh, kw, padding)?;
        let (oh, ow) = (geo.oh, geo.ow);

        let k = cin * kh * kw;
        let area = oh * ow;
        let mut cols = vec![0.0f64; k * area];
        let mut out = vec![0.0f64; n * cout * area];
        let xdata = self.value(x).data();
        let wdata = self.value(w).data();
        let bdata = self.value(b).data();
        for s in 0..n {
            im2col(&xdata[s * cin * h * wd..(s + 1) * cin * h * wd], cin, &geo, &mut cols);
            let o = &mut out[s * cout * area..(s + 1) * cout * area];
            gemm(
                cout, k, area, 1.0, wdata, k as isize, 1, &cols, area as isize, 1, 0.0, o,
            );
            for c in 0..cout {
                let bias = bdata[c];
                for v in &mut o[c * area..(c + 1) * area] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, padding }, needs))
    }

    /// Per-channel normalization with affine transform. Train mode uses
    /// batch statistics (biased variance over the N·H·W values of each
    /// channel) and folds them into `running`; eval mode reads `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        shift: Var,
        mode: BnMode,
        running: &mut BnRunning,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        let mismatch = |detail: String| Error::ShapeMismatch {
            op: "batch_norm",
            detail,
        };
        if self.shape(gamma) != [c] || self.shape(shift) != [c] {
            return Err(mismatch(format!(
                "gamma {:?} / shift {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(shift)
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(mismatch(format!(
                "running stats sized {} do not match {c} channels",
                running.mean.len()
            )));
        }
        let count = n * h * w;
        let area = h * w;
        let xdata = self.value(x).data();

        let (mean, var) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch { count });
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * area;
                        acc += xdata[base..base + area].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * area;
                        for &v in &xdata[base..base + area] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                for ch in 0..c {
                    running.mean[ch] =
                        BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                    running.var[ch] =
                        BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let gdata = self.value(gamma).data();
        let sdata = self.value(shift).data();
        let mut out = vec![0.0f64; xdata.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * area;
                let (m, is, g, sh) = (mean[ch], inv_std[ch], gdata[ch], sdata[ch]);
                for i in base..base + area {
                    out[i] = g * (xdata[i] - m) * is + sh;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(shift);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                shift,
                mode,
                mean,
                inv_std,
            },
            needs,
        ))
    }

    /// 2×2 max pooling with stride 2. Spatial dims must be even; ties keep
    /// the first maximum in row-major window order, so values and gradient
    /// routing are deterministic.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("max_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialDims {
                op: "max_pool2x2",
                h,
                w,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xdata = self.value(x).data();
        let mut out = vec![0.0f64; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let ibase = plane * h * w;
            let obase = plane * oh * ow;
            for y in 0..oh {
                for xc in 0..ow {
                    let mut best_idx = ibase + (2 * y) * w + 2 * xc;
                    let mut best = xdata[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ibase + (2 * y + dy) * w + 2 * xc + dx;
                        if xdata[idx] > best {
                            best = xdata[idx];
                            best_idx = idx;
                        }
                    }
                    out[obase + y * ow + xc] = best;
                    argmax[obase + y * ow + xc] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }, needs))
    }

    /// Nearest-neighbor 2× upsampling; exactly inverts the shape change of
    /// [`Graph::max_pool2x2`].
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xdata = self.value(x).data();
        let mut out = vec![0.0f64; n * c * oh * ow];
        for plane in 0..n * c {
            let ibase = plane * h * w;
            let obase = plane * oh * ow;
            for y in 0..h {
                for xc in 0..w {
                    let v = xdata[ibase + y * w + xc];
                    let o = obase + (2 * y) * ow + 2 * xc;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample2x { x }, needs))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!(
                    "non-channel dims differ: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        let area = ha * wa;
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        let mut out = vec![0.0f64; na * (ca + cb) * area];
        for s in 0..na {
            let o = s * (ca + cb) * area;
            out[o..o + ca * area].copy_from_slice(&adata[s * ca * area..(s + 1) * ca * area]);
            out[o + ca * area..o + (ca + cb) * area]
                .copy_from_slice(&bdata[s * cb * area..(s + 1) * cb * area]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }, needs))
    }

    /// Mean over all pixels of −log softmax probability of the true class.
    /// `labels` holds per-pixel class indices (shape N×H×W, integral values).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4("softmax_cross_entropy")?;
        if labels.shape() != [n, h, w] {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!(
                    "labels shape {:?} does not match logits {:?}",
                    labels.shape(),
                    self.shape(logits)
                ),
            });
        }
        let mut idx = Vec::with_capacity(labels.len());
        for (i, &v) in labels.data().iter().enumerate() {
            if v.fract() != 0.0 || v < 0.0 || v >= c as f64 {
                return Err(Error::LabelOutOfRange {
                    label: v as usize,
                    classes: c,
                    index: i,
                });
            }
            idx.push(v as usize);
        }

        let area = h * w;
        let zdata = self.value(logits).data();
        let mut probs = vec![0.0f64; zdata.len()];
        let mut loss = 0.0;
        for s in 0..n {
            for p in 0..area {
                let at = |ch: usize| (s * c + ch) * area + p;
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(zdata[at(ch)]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    denom += (zdata[at(ch)] - m).exp();
                }
                let lse = m + denom.ln();
                for ch in 0..c {
                    probs[at(ch)] = (zdata[at(ch)] - lse).exp();
                }
                loss += lse - zdata[at(idx[s * area + p])];
            }
        }
        let value = Tensor::scalar(loss / (n * area) as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: idx,
                probs,
            },
            needs,
        ))
    }

    /// Populate gradients of all parameter leaves reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let node = &self.nodes[loss.0];
            if node.value.len() != 1 || node.value.rank() > 1 {
                return Err(Error::NonScalarLoss {
                    shape: node.value.shape().to_vec(),
                });
            }
            if matches!(node.op, Op::Leaf) {
                return Err(Error::DetachedLoss);
            }
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].grad = Some(gout);
                continue;
            }
            // Allocate zeroed accumulators for operands that track gradients.
            for v in self.nodes[id].op.operands() {
                if self.nodes[v.0].needs_grad && grads[v.0].is_none() {
                    grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
                }
            }
            self.op_backward(id, &gout, &mut grads)?;
        }
        Ok(())
    }

    /// Accumulate `gout` (gradient at node `id`) into the operand slots of
    /// `grads`. Slots left `None` belong to operands that do not track
    /// gradients and are skipped.
    fn op_backward(
        &self,
        id: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves handled by backward()"),
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(g) = grads[v.0].as_mut() {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if grads[a.0].is_some() {
                    let bv = self.nodes[b.0].value.data();
                    let g = grads[a.0].as_mut().expect("checked");
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(bv) {
                        *gi += go * x;
                    }
                }
                if grads[b.0].is_some() {
                    let av = self.nodes[a.0].value.data();
                    let g = grads[b.0].as_mut().expect("checked");
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(av) {
                        *gi += go * x;
                    }
                }
            }
            Op::Scale { x, k } => {
                if let Some(g) = grads[x.0].as_mut() {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += k * go;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = grads[x.0].as_mut() {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Relu { x } => {
                if grads[x.0].is_some() {
                    let xdata = self.nodes[x.0].value.data();
                    let g = grads[x.0].as_mut().expect("checked");
                    for ((gi, go), xv) in g.iter_mut().zip(gout).zip(xdata) {
                        if *xv > 0.0 {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, padding } => {
                self.conv2d_backward(*x, *w, *b, *padding, gout, grads)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                shift,
                mode,
                mean,
                inv_std,
            } => {
                self.batch_norm_backward(*x, *gamma, *shift, *mode, mean, inv_std, gout, grads)?;
            }
            Op::MaxPool2x2 { x, argmax } => {
                if let Some(g) = grads[x.0].as_mut() {
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src] += gout[o];
                    }
                }
            }
            Op::Upsample2x { x } => {
                if grads[x.0].is_some() {
                    let [n, c, h, w] = self.nodes[x.0].value.dims4("upsample2x")?;
                    let ow = 2 * w;
                    let g = grads[x.0].as_mut().expect("checked");
                    for plane in 0..n * c {
                        let ibase = plane * h * w;
                        let obase = plane * (2 * h) * ow;
                        for y in 0..h {
                            for xc in 0..w {
                                let o = obase + (2 * y) * ow + 2 * xc;
                                g[ibase + y * w + xc] +=
                                    gout[o] + gout[o + 1] + gout[o + ow] + gout[o + ow + 1];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.dims4("concat_channels")?;
                let cb = self.nodes[b.0].value.shape()[1];
                let area = h * w;
                if let Some(g) = grads[a.0].as_mut() {
                    for s in 0..n {
                        let o = s * (ca + cb) * area;
                        for (gi, go) in g[s * ca * area..(s + 1) * ca * area]
                            .iter_mut()
                            .zip(&gout[o..o + ca * area])
                        {
                            *gi += go;
                        }
                    }
                }
                if let Some(g) = grads[b.0].as_mut() {
                    for s in 0..n {
                        let o = s * (ca + cb) * area + ca * area;
                        for (gi, go) in g[s * cb * area..(s + 1) * cb * area]
                            .iter_mut()
                            .zip(&gout[o..o + cb * area])
                        {
                            *gi += go;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if grads[logits.0].is_some() {
                    let [n, c, h, w] = self.nodes[logits.0].value.dims4("sce")?;
                    let area = h * w;
                    let scale = gout[0] / (n * area) as f64;
                    let g = grads[logits.0].as_mut().expect("checked");
                    for s in 0..n {
                        for p in 0..area {
                            let truth = labels[s * area + p];
                            for ch in 0..c {
                                let i = (s * c + ch) * area + p;
                                let onehot = if ch == truth { 1.0 } else { 0.0 };
                                g[i] += scale * (probs[i] - onehot);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let [n, cin, h, wd] = self.nodes[x.0].value.dims4("conv2d")?;
        let [cout, _, kh, kw] = self.nodes[w.0].value.dims4("conv2d")?;
        let geo = ConvGeometry::new(h, wd, kh, kw, padding)?;
        let (oh, ow) = (geo.oh, geo.ow);
        let k = cin * kh * kw;
        let area = oh * ow;

        let need_x = grads[x.0].is_some();
        let need_w = grads[w.0].is_some();
        let need_b = grads[b.0].is_some();

        let xdata = self.nodes[x.0].value.data();
        let wdata = self.nodes[w.0].value.data();
        let mut cols = vec![0.0f64; if need_w { k * area } else { 0 }];
        let mut dcols = vec![0.0f64; if need_x { k * area } else { 0 }];

        for s in 0..n {
            let go = &gout[s * cout * area..(s + 1) * cout * area];
            if need_w {
                im2col(&xdata[s * cin * h * wd..(s + 1) * cin * h * wd], cin, &geo, &mut cols);
                let gw = grads[w.0].as_mut().expect("checked");
                // dW(cout×k) += gO(cout×area) · cols^T(area×k)
                gemm(
                    cout,
                    area,
                    k,
                    1.0,
                    go,
                    area as isize,
                    1,
                    &cols,
                    1,
                    area as isize,
                    1.0,
                    gw,
                );
            }
            if need_b {
                let gb = grads[b.0].as_mut().expect("checked");
                for c in 0..cout {
                    gb[c] += go[c * area..(c + 1) * area].iter().sum::<f64>();
                }
            }
            if need_x {
                // dcols(k×area) = W^T(k×cout) · gO(cout×area)
                gemm(
                    k,
                    cout,
                    area,
                    1.0,
                    wdata,
                    1,
                    k as isize,
                    go,
                    area as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let gx = grads[x.0].as_mut().expect("checked");
                col2im_add(
                    &dcols,
                    cin,
                    &geo,
                    &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd],
                );
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        shift: Var,
        mode: BnMode,
        mean: &[f64],
        inv_std: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let [n, c, h, w] = self.nodes[x.0].value.dims4("batch_norm")?;
        let area = h * w;
        let count = (n * area) as f64;
        let xdata = self.nodes[x.0].value.data();
        let gdata = self.nodes[gamma.0].value.data();

        for ch in 0..c {
            let (m, is, g) = (mean[ch], inv_std[ch], gdata[ch]);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * area;
                for i in base..base + area {
                    let dy = gout[i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * (xdata[i] - m) * is;
                }
            }
            if let Some(gg) = grads[gamma.0].as_mut() {
                gg[ch] += sum_dy_xhat;
            }
            if let Some(gs) = grads[shift.0].as_mut() {
                gs[ch] += sum_dy;
            }
            if grads[x.0].is_some() {
                let gx = grads[x.0].as_mut().expect("checked");
                match mode {
                    BnMode::Train => {
                        // Batch statistics are functions of x; the mean and
                        // variance terms feed back into every element of the
                        // channel.
                        let k1 = sum_dy / count;
                        let k2 = sum_dy_xhat / count;
                        for s in 0..n {
                            let base = (s * c + ch) * area;
                            for i in base..base + area {
                                let xhat = (xdata[i] - m) * is;
                                gx[i] += g * is * (gout[i] - k1 - xhat * k2);
                            }
                        }
                    }
                    BnMode::Eval => {
                        // Running statistics are constants.
                        for s in 0..n {
                            let base = (s * c + ch) * area;
                            for i in base..base + area {
                                gx[i] += g * is * gout[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Spatial bookkeeping shared by the convolution forward and backward paths.
struct ConvGeometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Result<Self> {
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            });
        }
        Ok(ConvGeometry {
            h,
            w,
            kh,
            kw,
            ph,
            pw,
            oh: h + 2 * ph - kh + 1,
            ow: w + 2 * pw - kw + 1,
        })
    }
}

/// Gather input patches into a (Cin·KH·KW)×(OH·OW) matrix; positions that
/// fall in the zero padding contribute zeros.
fn im2col(x: &[f64], cin: usize, geo: &ConvGeometry, cols: &mut [f64]) {
    let ConvGeometry {
        h,
        w,
        kh,
        kw,
        ph,
        pw,
        oh,
        ow,
    } = *geo;
    let area = oh * ow;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out = &mut cols[row * area..(row + 1) * area];
                for oy in 0..oh {
                    let iy = oy + ky;
                    for ox in 0..ow {
                        let ix = ox + kx;
                        out[oy * ow + ox] =
                            if iy >= ph && ix >= pw && iy - ph < h && ix - pw < w {
                                x[(c * h + (iy - ph)) * w + (ix - pw)]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulate column gradients back onto the
/// input gradient buffer.
fn col2im_add(dcols: &[f64], cin: usize, geo: &ConvGeometry, gx: &mut [f64]) {
    let ConvGeometry {
        h,
        w,
        kh,
        kw,
        ph,
        pw,
        oh,
        ow,
    } = *geo;
    let area = oh * ow;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &dcols[row * area..(row + 1) * area];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        gx[(c * h + (iy - ph)) * w + (ix - pw)] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let w = g.param(t(vec![1, 1, 1, 1], vec![1.0]));
        let b = g.param(t(vec![1], vec![0.0]));
        let y = g.conv2d(x, w, b, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_zero_input_yields_bias_everywhere() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 1, 4, 4]));
        let w = g.param(Tensor::zeros(vec![3, 1, 3, 3]));
        let b = g.param(t(vec![3], vec![0.5, -1.0, 2.0]));
        let y = g.conv2d(x, w, b, Padding::Same).unwrap();
        let data = g.value(y).data();
        for s in 0..2 {
            for c in 0..3 {
                for i in 0..16 {
                    assert_eq!(data[(s * 3 + c) * 16 + i], [0.5, -1.0, 2.0][c]);
                }
            }
        }
    }

    #[test]
    fn conv_averaging_kernel_center_equals_neighborhood_mean() {
        let mut g = Graph::new();
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.input(t(vec![1, 1, 4, 4], ramp.clone()));
        let w = g.param(t(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]));
        let b = g.param(t(vec![1], vec![0.0]));
        let y = g.conv2d(x, w, b, Padding::Same).unwrap();
        // Output at (1,1) covers input rows 0..3, cols 0..3.
        let mut mean = 0.0;
        for iy in 0..3 {
            for ix in 0..3 {
                mean += ramp[iy * 4 + ix];
            }
        }
        mean /= 9.0;
        assert_relative_eq!(g.value(y).data()[4 + 1], mean, max_relative = 1e-14);
    }

    #[test]
    fn conv_valid_padding_shrinks_output() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 5, 6]));
        let w = g.param(Tensor::zeros(vec![4, 2, 3, 3]));
        let b = g.param(Tensor::zeros(vec![4]));
        let y = g.conv2d(x, w, b, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 3, 4]);
    }

    #[test]
    fn conv_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 4, 4]));
        let w3 = g.param(Tensor::zeros(vec![4, 3, 3, 3]));
        let w_even = g.param(Tensor::zeros(vec![4, 2, 2, 2]));
        let w_ok = g.param(Tensor::zeros(vec![4, 2, 3, 3]));
        let b_bad = g.param(Tensor::zeros(vec![5]));
        let b_ok = g.param(Tensor::zeros(vec![4]));
        assert!(g.conv2d(x, w3, b_ok, Padding::Same).is_err());
        assert!(g.conv2d(x, w_even, b_ok, Padding::Same).is_err());
        assert!(g.conv2d(x, w_ok, b_bad, Padding::Same).is_err());
    }

    #[test]
    fn batch_norm_zero_input_stays_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 2, 2]));
        let gamma = g.param(Tensor::filled(vec![3], 1.0));
        let shift = g.param(Tensor::zeros(vec![3]));
        let mut running = BnRunning::new(3);
        let y = g
            .batch_norm(x, gamma, shift, BnMode::Train, &mut running)
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut g = Graph::new();
        // Spread large enough that the 1e-5 variance guard is negligible.
        let data: Vec<f64> = (0..32).map(|i| (i as f64) * 3.7 - 11.0).collect();
        let x = g.input(t(vec![2, 2, 2, 4], data));
        let gamma = g.param(Tensor::filled(vec![2], 1.0));
        let shift = g.param(Tensor::zeros(vec![2]));
        let mut running = BnRunning::new(2);
        let y = g
            .batch_norm(x, gamma, shift, BnMode::Train, &mut running)
            .unwrap();
        let out = g.value(y).data();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for s in 0..2 {
                let base = (s * 2 + ch) * 8;
                vals.extend_from_slice(&out[base..base + 8]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / 16.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_affine_applies_gamma_and_shift() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64) * 5.0).collect();
        let x = g.input(t(vec![1, 1, 4, 4], data.clone()));
        let gamma1 = g.param(t(vec![1], vec![1.0]));
        let shift0 = g.param(t(vec![1], vec![0.0]));
        let gamma2 = g.param(t(vec![1], vec![2.0]));
        let shift3 = g.param(t(vec![1], vec![3.0]));
        let mut r1 = BnRunning::new(1);
        let mut r2 = BnRunning::new(1);
        let plain = g
            .batch_norm(x, gamma1, shift0, BnMode::Train, &mut r1)
            .unwrap();
        let affine = g
            .batch_norm(x, gamma2, shift3, BnMode::Train, &mut r2)
            .unwrap();
        let p = g.value(plain).data().to_vec();
        let a = g.value(affine).data().to_vec();
        for i in 0..16 {
            assert_relative_eq!(a[i], 2.0 * p[i] + 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_and_eval_reads_them() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..8).map(|i| f64::from(i) * 2.0).collect();
        let x = g.input(t(vec![2, 1, 2, 2], data));
        let gamma = g.param(t(vec![1], vec![1.0]));
        let shift = g.param(t(vec![1], vec![0.0]));
        let mut running = BnRunning::new(1);
        g.batch_norm(x, gamma, shift, BnMode::Train, &mut running)
            .unwrap();
        // Batch mean 7, biased variance 21; running = 0.9*init + 0.1*batch.
        assert_relative_eq!(running.mean[0], 0.7, max_relative = 1e-12);
        assert_relative_eq!(running.var[0], 0.9 + 2.1, max_relative = 1e-12);

        let stats_before = running.clone();
        let y = g
            .batch_norm(x, gamma, shift, BnMode::Eval, &mut running)
            .unwrap();
        assert_eq!(running, stats_before, "eval must not touch running stats");
        let expect0 = (0.0 - 0.7) / (3.0f64 + BN_EPS).sqrt();
        assert_relative_eq!(g.value(y).data()[0], expect0, max_relative = 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_value_batches_in_train_mode() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 2, 1, 1], vec![1.0, 2.0]));
        let gamma = g.param(Tensor::filled(vec![2], 1.0));
        let shift = g.param(Tensor::zeros(vec![2]));
        let mut running = BnRunning::new(2);
        let err = g
            .batch_norm(x, gamma, shift, BnMode::Train, &mut running)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch { count: 1 }));
        // Eval mode is fine on the same shape.
        assert!(g
            .batch_norm(x, gamma, shift, BnMode::Eval, &mut running)
            .is_ok());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 1, 4], vec![-1.0, 2.0, 0.0, -0.5]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_and_upsample_are_shape_inverses() {
        let mut g = Graph::new();
        let x = g.input(t(
            vec![1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 1.0, //
                3.0, 4.0, 0.0, 2.0, //
                0.0, 0.0, 9.0, 8.0, //
                1.0, 1.0, 7.0, 6.0,
            ],
        ));
        let p = g.max_pool2x2(x).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 2, 2]);
        assert_eq!(g.value(p).data(), &[4.0, 5.0, 1.0, 9.0]);
        let u = g.upsample2x(p).unwrap();
        assert_eq!(g.shape(u), g.shape(x));
        assert_eq!(g.value(u).data()[0..4], [4.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(
            g.max_pool2x2(x),
            Err(Error::OddSpatialDims { h: 3, w: 4, .. })
        ));
    }

    #[test]
    fn concat_keeps_first_operand_first() {
        let mut g = Graph::new();
        let a = g.input(Tensor::filled(vec![1, 3, 2, 2], 1.0));
        let b = g.input(Tensor::filled(vec![1, 5, 2, 2], 2.0));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 2, 2]);
        let data = g.value(y).data();
        assert!(data[..12].iter().all(|&v| v == 1.0));
        assert!(data[12..].iter().all(|&v| v == 2.0));

        let c = g.input(Tensor::zeros(vec![1, 2, 3, 2]));
        assert!(g.concat_channels(a, c).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_num_classes() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::filled(vec![2, 4, 2, 2], 0.3));
        let labels = t(vec![2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 0.0]);
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        assert_relative_eq!(g.value(loss).data()[0], 4.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(vec![1, 3, 1, 2]));
        let high = t(vec![1, 1, 2], vec![0.0, 3.0]);
        let frac = t(vec![1, 1, 2], vec![0.0, 1.5]);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &high),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(g.softmax_cross_entropy(logits, &frac).is_err());
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut g = Graph::new();
        let theta = g.param(t(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = g.sum(theta);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_norm_squared_gives_theta() {
        let mut g = Graph::new();
        let theta = g.param(t(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let sq = g.mul(theta, theta).unwrap();
        let total = g.sum(sq);
        let loss = g.scale(total, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn backward_routes_pool_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]));
        let p = g.max_pool2x2(x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_recorded_loss() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]));
        let doubled = g.scale(x, 2.0);
        assert!(matches!(
            g.backward(doubled),
            Err(Error::NonScalarLoss { .. })
        ));
        let lone = g.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(lone), Err(Error::DetachedLoss)));
    }

    #[test]
    fn backward_skips_untracked_branches() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 1, 2], vec![3.0, 4.0]));
        let p = g.param(t(vec![1, 1, 1, 2], vec![1.0, 1.0]));
        let y = g.mul(x, p).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_accumulates_over_shared_operands() {
        // loss = sum(x*x) + sum(x) has gradient 2x + 1.
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 1, 1, 3], vec![1.0, -1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum(sq);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -1.0, 5.0]);
    }
}
