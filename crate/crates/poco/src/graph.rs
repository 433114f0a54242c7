//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Values are computed at op-construction time, so feature values are
//! available mid-build (hard-negative selection needs them before the
//! stage losses are added). `backward` replays the tape in reverse. A graph
//! is built, differentiated once, and dropped; parameters live outside in
//! [`crate::model::Param`] and are bound as leaves each step.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Per-channel batch statistics from a training-mode batch norm, handed
/// back so the layer can fold them into its running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add,
    Mul,
    /// forward was a*x + b; only the slope matters going backward
    Affine { a: S },
    Ln,
    Relu,
    /// y = x @ w + b; inputs (x, w, b)
    Linear,
    /// y = a @ b, or a @ transpose(b)
    MatMul { transpose_b: bool },
    /// rows scaled to unit L2 norm; caches the norms
    RowNormalize { norms: Vec<S> },
    RowSoftmax,
    /// pick (row, col) entries of a rank-2 input into a new rank-2 output
    Gather2d { coords: Vec<(usize, usize)> },
    SliceRows { start: usize },
    /// sum of all elements -> rank-0
    Sum,
    /// mean over batch of -log softmax(logits)[label]; caches probabilities
    CrossEntropy { labels: Vec<usize>, probs: Vec<S> },
    Conv2d {
        stride: usize,
        pad: usize,
        /// im2col buffers, one (c_in*k*k) x (h_out*w_out) block per image
        cols: Vec<S>,
    },
    MaxPool2d {
        /// flat input index of each output element's max
        argmax: Vec<usize>,
    },
    GlobalAvgPool,
    BatchNormTrain { xhat: Vec<S>, inv_std: Vec<S> },
    BatchNormEval { mean: Vec<S>, inv_std: Vec<S> },
    Reshape,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, vec![], requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: Vec<NodeId>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, inputs, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(format!(
                "add: shape {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Add, vec![a, b], rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(format!(
                "mul: shape {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Mul, vec![a, b], rg))
    }

    pub fn affine(&mut self, x: NodeId, a: S, b: S) -> Result<NodeId> {
        let value = self.val(x).map(|v| a * v + b);
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::Affine { a }, vec![x], rg))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.val(x).data().iter().find(|v| **v <= S::zero()) {
            return Err(Error::numeric(format!("ln of non-positive value {bad}")));
        }
        let value = self.val(x).map(|v| v.ln());
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::Ln, vec![x], rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.val(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::Relu, vec![x], rg))
    }

    // ---- linear algebra ---------------------------------------------------

    /// y = x @ w + b with x: (n, d_in), w: (d_in, d_out), b: (d_out).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(format!(
                "linear: x {xs:?}, w {ws:?}, b {bs:?} are inconsistent"
            )));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![S::zero(); n * d_out];
        ops::mm_ab(self.val(x).data(), self.val(w).data(), n, d_in, d_out, &mut out);
        for i in 0..n {
            for j in 0..d_out {
                out[i * d_out + j] = out[i * d_out + j] + self.val(b).data()[j];
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(value, Op::Linear, vec![x, w, b], rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// y = a @ transpose(b); rows of `b` are laid out like rows of `a`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (asp, bsp) = (self.val(a).shape(), self.val(b).shape());
        if asp.len() != 2 || bsp.len() != 2 {
            return Err(Error::shape("matmul expects rank-2 inputs".to_string()));
        }
        let (m, k) = (asp[0], asp[1]);
        let (n, inner_ok) = if transpose_b {
            (bsp[0], bsp[1] == k)
        } else {
            (bsp[1], bsp[0] == k)
        };
        if !inner_ok {
            return Err(Error::shape(format!(
                "matmul: {asp:?} x {bsp:?} (transpose_b={transpose_b}) inner dims differ"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        if transpose_b {
            ops::mm_abt(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        } else {
            ops::mm_ab(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::MatMul { transpose_b }, vec![a, b], rg))
    }

    /// Scale each row of a rank-2 tensor to unit L2 norm. A zero row is an
    /// error: a direction-free vector has no cosine similarity.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 2 {
            return Err(Error::shape("row_normalize expects rank-2 input".to_string()));
        }
        let (n, d) = (xs[0], xs[1]);
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = self.val(x).row(i);
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm == S::zero() {
                return Err(Error::numeric(format!("row_normalize: row {i} has zero norm")));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::RowNormalize { norms }, vec![x], rg))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 2 {
            return Err(Error::shape("row_softmax expects rank-2 input".to_string()));
        }
        let (n, d) = (xs[0], xs[1]);
        let mut out = vec![S::zero(); n * d];
        ops::softmax_rows(self.val(x).data(), n, d, &mut out);
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::RowSoftmax, vec![x], rg))
    }

    /// Build a (rows, cols) tensor from arbitrary (r, c) entries of a rank-2
    /// input; `coords` is row-major over the output.
    pub fn gather2d(
        &mut self,
        x: NodeId,
        coords: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 2 {
            return Err(Error::shape("gather2d expects rank-2 input".to_string()));
        }
        if coords.len() != rows * cols {
            return Err(Error::shape(format!(
                "gather2d: {} coords for {rows}x{cols} output",
                coords.len()
            )));
        }
        let (in_r, in_c) = (xs[0], xs[1]);
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in &coords {
            if r >= in_r || c >= in_c {
                return Err(Error::shape(format!(
                    "gather2d: coord ({r},{c}) outside {in_r}x{in_c} input"
                )));
            }
            out.push(self.val(x).data()[r * in_c + c]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::Gather2d { coords }, vec![x], rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 2 || end > xs[0] || start >= end {
            return Err(Error::shape(format!("slice_rows: [{start}, {end}) of shape {xs:?}")));
        }
        let cols = xs[1];
        let data = self.val(x).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::SliceRows { start }, vec![x], rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.val(x).data().iter().copied().sum::<S>();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum, vec![x], rg))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.val(logits).shape();
        if ls.len() != 2 {
            return Err(Error::shape("cross_entropy expects rank-2 logits".to_string()));
        }
        let (n, k) = (ls[0], ls[1]);
        if n == 0 || labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![S::zero(); n * k];
        ops::softmax_rows(self.val(logits).data(), n, k, &mut probs);
        let mut total = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            total = total - probs[i * k + label].ln();
        }
        let value = Tensor::scalar(total / S::from_f64(n as f64));
        let rg = self.any_requires(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            rg,
        ))
    }

    // ---- spatial ops (NCHW) -------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d: x {xs:?} (want NCHW), w {ws:?} (want OIKK), b {bs:?}"
            )));
        }
        let (n, c_in, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in || k != k2 || bs[0] != c_out {
            return Err(Error::shape(format!(
                "conv2d: weight {ws:?} / bias {bs:?} inconsistent with input {xs:?}"
            )));
        }
        let extent_err =
            || Error::shape(format!("conv2d: kernel {k} too large for {h}x{w_in} with pad {pad}"));
        let h_out = ops::conv_out_extent(h, pad, k, stride).ok_or_else(extent_err)?;
        let w_out = ops::conv_out_extent(w_in, pad, k, stride).ok_or_else(extent_err)?;

        let ckk = c_in * k * k;
        let plane = h_out * w_out;
        let mut cols = vec![S::zero(); n * ckk * plane];
        let mut out = vec![S::zero(); n * c_out * plane];
        for img in 0..n {
            let col = &mut cols[img * ckk * plane..(img + 1) * ckk * plane];
            ops::im2col(
                &self.val(x).data()[img * c_in * h * w_in..(img + 1) * c_in * h * w_in],
                c_in, h, w_in, k, stride, pad, h_out, w_out, col,
            );
            let out_img = &mut out[img * c_out * plane..(img + 1) * c_out * plane];
            ops::mm_ab(self.val(w).data(), col, c_out, ckk, plane, out_img);
            for o in 0..c_out {
                let bias = self.val(b).data()[o];
                for v in &mut out_img[o * plane..(o + 1) * plane] {
                    *v = *v + bias;
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, h_out, w_out], out)?;
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { stride, pad, cols }, vec![x, w, b], rg))
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d expects NCHW input".to_string()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let extent_err =
            || Error::shape(format!("max_pool2d: kernel {kernel} too large for {h}x{w}"));
        let h_out = ops::conv_out_extent(h, 0, kernel, stride).ok_or_else(extent_err)?;
        let w_out = ops::conv_out_extent(w, 0, kernel, stride).ok_or_else(extent_err)?;
        let mut out = Vec::with_capacity(n * c * h_out * w_out);
        let mut argmax = Vec::with_capacity(n * c * h_out * w_out);
        let data = self.val(x).data();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut best_idx = base + (oy * stride) * w + ox * stride;
                        let mut best = data[best_idx];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                // strict > keeps the first (row-major) max on ties
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, h_out, w_out], out)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::MaxPool2d { argmax }, vec![x], rg))
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.val(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool expects NCHW input".to_string()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let scale = S::from_f64(1.0 / plane as f64);
        let mut out = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let s = self.val(x).data()[nc * plane..(nc + 1) * plane]
                .iter()
                .copied()
                .sum::<S>();
            out.push(s * scale);
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool, vec![x], rg))
    }

    /// Training-mode batch norm over (N, H, W) per channel; returns the batch
    /// statistics so the caller can update running averages.
    pub fn batch_norm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats<S>)> {
        let (n, c, h, w) = self.bn_check(x, gamma, beta)?;
        let plane = h * w;
        let m = n * plane;
        let minv = S::from_f64(1.0 / m as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        let data = self.val(x).data();
        for ch in 0..c {
            let mut s = S::zero();
            for img in 0..n {
                let base = (img * c + ch) * plane;
                s = s + data[base..base + plane].iter().copied().sum::<S>();
            }
            mean[ch] = s * minv;
            let mut v = S::zero();
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for &val in &data[base..base + plane] {
                    let d = val - mean[ch];
                    v = v + d * d;
                }
            }
            var[ch] = v * minv;
        }
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = vec![S::zero(); data.len()];
        let mut out = vec![S::zero(); data.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (g, b) = (self.val(gamma).data()[ch], self.val(beta).data()[ch]);
                for i in base..base + plane {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), out)?;
        let rg = self.any_requires(&[x, gamma, beta]);
        let id = self.push(value, Op::BatchNormTrain { xhat, inv_std }, vec![x, gamma, beta], rg);
        Ok((id, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batch_norm2d_eval: running stats len {} / {} for {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let plane = h * w;
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
            .collect();
        let data = self.val(x).data();
        let mut out = vec![S::zero(); data.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (g, b) = (self.val(gamma).data()[ch], self.val(beta).data()[ch]);
                for i in base..base + plane {
                    out[i] = g * (data[i] - running_mean[ch]) * inv_std[ch] + b;
                }
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), out)?;
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormEval { mean: running_mean.to_vec(), inv_std },
            vec![x, gamma, beta],
            rg,
        ))
    }

    fn bn_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize, usize)> {
        let xs = self.val(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm2d expects NCHW input".to_string()));
        }
        let c = xs[1];
        if self.val(gamma).shape() != [c] || self.val(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm2d: gamma {:?} / beta {:?} for {c} channels",
                self.val(gamma).shape(),
                self.val(beta).shape()
            )));
        }
        Ok((xs[0], c, xs[2], xs[3]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.val(x).numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.val(x).shape(),
                shape
            )));
        }
        let value = Tensor::new(shape, self.val(x).data().to_vec())?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, Op::Reshape, vec![x], rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every node that requires them. `loss` must hold
    /// a single element; calling twice without rebuilding is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid(
                "backward already ran on this graph; rebuild the forward pass first",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(seed_shape, S::one()));

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none()
                || !self.nodes[id].requires_grad
                || matches!(self.nodes[id].op, Op::Leaf)
            {
                continue;
            }
            let contribs = self.input_gradients(id);
            for (iid, contrib) in contribs {
                let target = &mut self.nodes[iid];
                if target.grad.is_none() {
                    target.grad = Some(Tensor::zeros(target.value.shape().to_vec()));
                }
                let g = target.grad.as_mut().unwrap().data_mut();
                debug_assert_eq!(g.len(), contrib.len());
                for (gv, cv) in g.iter_mut().zip(contrib) {
                    *gv = *gv + cv;
                }
            }
        }
        Ok(())
    }

    /// Per-input gradient contributions of node `id`, skipping inputs that
    /// do not require gradients. Read-only; accumulation happens in
    /// `backward` so aliased inputs (e.g. `mul(x, x)`) sum correctly.
    fn input_gradients(&self, id: usize) -> Vec<(usize, Vec<S>)> {
        let node = &self.nodes[id];
        let dy = node.grad.as_ref().unwrap().data();
        let y_shape = node.value.shape();
        let in_val = |slot: usize| &self.nodes[node.inputs[slot].0].value;
        let wants = |slot: usize| self.nodes[node.inputs[slot].0].requires_grad;
        let mut out: Vec<(usize, Vec<S>)> = Vec::with_capacity(node.inputs.len());

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for slot in 0..2 {
                    if wants(slot) {
                        out.push((node.inputs[slot].0, dy.to_vec()));
                    }
                }
            }
            Op::Mul => {
                for slot in 0..2 {
                    if wants(slot) {
                        let other = in_val(1 - slot).data();
                        out.push((
                            node.inputs[slot].0,
                            dy.iter().zip(other).map(|(&g, &o)| g * o).collect(),
                        ));
                    }
                }
            }
            Op::Affine { a } => {
                if wants(0) {
                    out.push((node.inputs[0].0, dy.iter().map(|&g| g * *a).collect()));
                }
            }
            Op::Ln => {
                if wants(0) {
                    let x = in_val(0).data();
                    out.push((
                        node.inputs[0].0,
                        dy.iter().zip(x).map(|(&g, &v)| g / v).collect(),
                    ));
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = in_val(0).data();
                    out.push((
                        node.inputs[0].0,
                        dy.iter()
                            .zip(x)
                            .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                            .collect(),
                    ));
                }
            }
            Op::Linear => {
                let (n, d_out) = (y_shape[0], y_shape[1]);
                let d_in = in_val(0).shape()[1];
                if wants(0) {
                    let mut dx = vec![S::zero(); n * d_in];
                    ops::mm_abt(dy, in_val(1).data(), n, d_out, d_in, &mut dx);
                    out.push((node.inputs[0].0, dx));
                }
                if wants(1) {
                    let mut dw = vec![S::zero(); d_in * d_out];
                    ops::mm_atb(in_val(0).data(), dy, d_in, n, d_out, &mut dw);
                    out.push((node.inputs[1].0, dw));
                }
                if wants(2) {
                    let mut db = vec![S::zero(); d_out];
                    for i in 0..n {
                        for j in 0..d_out {
                            db[j] = db[j] + dy[i * d_out + j];
                        }
                    }
                    out.push((node.inputs[2].0, db));
                }
            }
            Op::MatMul { transpose_b } => {
                let (m, n) = (y_shape[0], y_shape[1]);
                let k = in_val(0).shape()[1];
                if *transpose_b {
                    // y = a @ b^T with b: (n, k); da = dy @ b, db = dy^T @ a
                    if wants(0) {
                        let mut da = vec![S::zero(); m * k];
                        ops::mm_ab(dy, in_val(1).data(), m, n, k, &mut da);
                        out.push((node.inputs[0].0, da));
                    }
                    if wants(1) {
                        let mut db = vec![S::zero(); n * k];
                        ops::mm_atb(dy, in_val(0).data(), n, m, k, &mut db);
                        out.push((node.inputs[1].0, db));
                    }
                } else {
                    // y = a @ b with b: (k, n); da = dy @ b^T, db = a^T @ dy
                    if wants(0) {
                        let mut da = vec![S::zero(); m * k];
                        ops::mm_abt(dy, in_val(1).data(), m, n, k, &mut da);
                        out.push((node.inputs[0].0, da));
                    }
                    if wants(1) {
                        let mut db = vec![S::zero(); k * n];
                        ops::mm_atb(in_val(0).data(), dy, k, m, n, &mut db);
                        out.push((node.inputs[1].0, db));
                    }
                }
            }
            Op::RowNormalize { norms } => {
                if wants(0) {
                    let y = node.value.data();
                    let (n, d) = (y_shape[0], y_shape[1]);
                    let mut dx = vec![S::zero(); n * d];
                    for i in 0..n {
                        let yr = &y[i * d..(i + 1) * d];
                        let dyr = &dy[i * d..(i + 1) * d];
                        let dot = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..d {
                            dx[i * d + j] = (dyr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::RowSoftmax => {
                if wants(0) {
                    let y = node.value.data();
                    let (n, d) = (y_shape[0], y_shape[1]);
                    let mut dx = vec![S::zero(); n * d];
                    for i in 0..n {
                        let yr = &y[i * d..(i + 1) * d];
                        let dyr = &dy[i * d..(i + 1) * d];
                        let dot = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..d {
                            dx[i * d + j] = yr[j] * (dyr[j] - dot);
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::Gather2d { coords } => {
                if wants(0) {
                    let in_cols = in_val(0).shape()[1];
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        dx[r * in_cols + c] = dx[r * in_cols + c] + dy[i];
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::SliceRows { start } => {
                if wants(0) {
                    let cols = y_shape[1];
                    let rows = y_shape[0];
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    dx[start * cols..(start + rows) * cols].copy_from_slice(dy);
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::Sum => {
                if wants(0) {
                    out.push((node.inputs[0].0, vec![dy[0]; in_val(0).numel()]));
                }
            }
            Op::CrossEntropy { labels, probs } => {
                if wants(0) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = dy[0] / S::from_f64(n as f64);
                    let mut dx = Vec::with_capacity(probs.len());
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let ind = if label == j { S::one() } else { S::zero() };
                            dx.push(scale * (probs[i * k + j] - ind));
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::Conv2d { stride, pad, cols } => {
                let (n, c_out, h_out, w_out) = (y_shape[0], y_shape[1], y_shape[2], y_shape[3]);
                let plane = h_out * w_out;
                let ws = in_val(1).shape();
                let (c_in, k) = (ws[1], ws[2]);
                let ckk = c_in * k * k;
                let xs = in_val(0).shape();
                let (h, w_sp) = (xs[2], xs[3]);
                if wants(0) {
                    let w_data = in_val(1).data();
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    let img_len = c_in * h * w_sp;
                    let mut dcol = vec![S::zero(); ckk * plane];
                    for img in 0..n {
                        for v in dcol.iter_mut() {
                            *v = S::zero();
                        }
                        ops::mm_atb(
                            w_data,
                            &dy[img * c_out * plane..(img + 1) * c_out * plane],
                            ckk,
                            c_out,
                            plane,
                            &mut dcol,
                        );
                        ops::col2im_add(
                            &dcol,
                            c_in,
                            h,
                            w_sp,
                            k,
                            *stride,
                            *pad,
                            h_out,
                            w_out,
                            &mut dx[img * img_len..(img + 1) * img_len],
                        );
                    }
                    out.push((node.inputs[0].0, dx));
                }
                if wants(1) {
                    let mut dw = vec![S::zero(); in_val(1).numel()];
                    for img in 0..n {
                        ops::mm_abt(
                            &dy[img * c_out * plane..(img + 1) * c_out * plane],
                            &cols[img * ckk * plane..(img + 1) * ckk * plane],
                            c_out,
                            plane,
                            ckk,
                            &mut dw,
                        );
                    }
                    out.push((node.inputs[1].0, dw));
                }
                if wants(2) {
                    let mut db = vec![S::zero(); c_out];
                    for img in 0..n {
                        for o in 0..c_out {
                            let s = dy[(img * c_out + o) * plane..(img * c_out + o + 1) * plane]
                                .iter()
                                .copied()
                                .sum::<S>();
                            db[o] = db[o] + s;
                        }
                    }
                    out.push((node.inputs[2].0, db));
                }
            }
            Op::MaxPool2d { argmax } => {
                if wants(0) {
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    for (o, &i) in argmax.iter().enumerate() {
                        dx[i] = dx[i] + dy[o];
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::GlobalAvgPool => {
                if wants(0) {
                    let nc = node.value.numel();
                    let plane = in_val(0).numel() / nc;
                    let scale = S::from_f64(1.0 / plane as f64);
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    for i in 0..nc {
                        let g = dy[i] * scale;
                        for v in &mut dx[i * plane..(i + 1) * plane] {
                            *v = g;
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let (n_imgs, c) = (y_shape[0], y_shape[1]);
                let plane = y_shape[2] * y_shape[3];
                let gamma = in_val(1).data();
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for img in 0..n_imgs {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] = sum_dy[ch] + dy[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
                        }
                    }
                }
                if wants(0) {
                    let m = S::from_f64((n_imgs * plane) as f64);
                    let mut dx = vec![S::zero(); xhat.len()];
                    for img in 0..n_imgs {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let coeff = gamma[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = coeff
                                    * (dy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m);
                            }
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
                if wants(1) {
                    out.push((node.inputs[1].0, sum_dy_xhat));
                }
                if wants(2) {
                    out.push((node.inputs[2].0, sum_dy));
                }
            }
            Op::BatchNormEval { mean, inv_std } => {
                let (n_imgs, c) = (y_shape[0], y_shape[1]);
                let plane = y_shape[2] * y_shape[3];
                let gamma = in_val(1).data();
                if wants(0) {
                    let mut dx = vec![S::zero(); in_val(0).numel()];
                    for img in 0..n_imgs {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let coeff = gamma[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = dy[i] * coeff;
                            }
                        }
                    }
                    out.push((node.inputs[0].0, dx));
                }
                if wants(1) {
                    let x = in_val(0).data();
                    let mut dgamma = vec![S::zero(); c];
                    for img in 0..n_imgs {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            for i in base..base + plane {
                                dgamma[ch] =
                                    dgamma[ch] + dy[i] * (x[i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    out.push((node.inputs[1].0, dgamma));
                }
                if wants(2) {
                    let mut dbeta = vec![S::zero(); c];
                    for img in 0..n_imgs {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            for i in base..base + plane {
                                dbeta[ch] = dbeta[ch] + dy[i];
                            }
                        }
                    }
                    out.push((node.inputs[2].0, dbeta));
                }
            }
            Op::Reshape => {
                if wants(0) {
                    out.push((node.inputs[0].0, dy.to_vec()));
                }
            }
        }
        out
    }

    /// Hash of every ReLU sign mask and max-pool argmax on the tape. Two
    /// evaluations whose signatures differ crossed an activation boundary,
    /// which invalidates a finite-difference comparison between them.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let mut acc: u8 = 0;
                    let mut bits = 0;
                    for &v in x.data() {
                        acc = (acc << 1) | u8::from(v > S::zero());
                        bits += 1;
                        if bits == 8 {
                            h = ops::fnv1a64_extend(h, &[acc]);
                            acc = 0;
                            bits = 0;
                        }
                    }
                    if bits > 0 {
                        h = ops::fnv1a64_extend(h, &[acc]);
                    }
                }
                Op::MaxPool2d { argmax } => {
                    for &i in argmax {
                        h = ops::fnv1a64_extend(h, &(i as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_matches_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn one_by_one_conv_with_identity_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let w = g.leaf(t(&[1, 1, 1, 1], &[1.0]), true);
        let b = g.leaf(t(&[1], &[0.0]), true);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_identity_passes_through() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[3.0, -4.0]), true);
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true);
        let b = g.leaf(t(&[2], &[0.0, 0.0]), true);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let gamma = g.leaf(t(&[1], &[1.0]), true);
        let beta = g.leaf(t(&[1], &[0.0]), true);
        let (y, stats) = g.batch_norm2d_train(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "var {var}");
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.var[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn matmul_nt_matches_manual_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = g.leaf(t(&[2, 3], &[7.0, 8.0, 9.0, 1.0, 0.5, -1.0]), false);
        let y = g.matmul_nt(a, b).unwrap();
        // rows of a dotted with rows of b
        assert_eq!(g.value(y).data(), &[50.0, -1.0, 122.0, 0.5]);
    }

    #[test]
    fn gather_gradient_scatters_back() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let picked = g.gather2d(x, vec![(0, 1), (1, 0)], 1, 2).unwrap();
        let loss = g.sum(picked).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_rows_gradient_lands_in_slice() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let mid = g.slice_rows(x, 1, 2).unwrap();
        assert_eq!(g.value(mid).data(), &[3.0, 4.0]);
        let loss = g.sum(mid).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_difference_agrees_for_composite_graph() {
        // loss = sum(relu(x @ w)) checked against central differences on w
        let xv = [0.3, -0.7, 0.5, 0.9, -0.2, 0.1];
        let wv = [0.4, -0.3, 0.8, 0.6, -0.5, 0.2];
        let eval = |w: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t(&[2, 3], &xv), false);
            let wt = g.leaf(t(&[3, 2], w), true);
            let y = g.matmul(x, wt).unwrap();
            let r = g.relu(y).unwrap();
            let loss = g.sum(r).unwrap();
            g.value(loss).item().unwrap()
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &xv), false);
        let wt = g.leaf(t(&[3, 2], &wv), true);
        let y = g.matmul(x, wt).unwrap();
        let r = g.relu(y).unwrap();
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(wt).unwrap().data().to_vec();
        let h = 1e-6;
        for i in 0..wv.len() {
            let mut plus = wv;
            plus[i] += h;
            let mut minus = wv;
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-7,
                "coord {i}: fd {fd} vs autograd {}",
                grad[i]
            );
        }
    }

    #[test]
    fn repeated_build_is_bit_identical() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(
                Tensor::new(vec![2, 2], vec![0.1f32, -0.4, 0.7, 0.2]).unwrap(),
                true,
            );
            let sm = g.row_softmax(x).unwrap();
            let ln = g.ln(sm).unwrap();
            let loss = g.sum(ln).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).item().unwrap().to_bits(),
                g.grad(x)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn activation_signature_tracks_relu_flips() {
        let sig = |v: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t(&[2], &[v, 1.0]), true);
            let _ = g.relu(x).unwrap();
            g.activation_signature()
        };
        assert_eq!(sig(0.5), sig(0.6));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
