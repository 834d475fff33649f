//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! The forward pass records primitive operations in topological order;
//! [`Tape::backward`] replays them in exact reverse. Tensors are immutable
//! once recorded and every reduction runs left-to-right, so replaying the
//! same graph on the same inputs is bit-identical.

use crate::error::{Error, Result};
use crate::flops::cost;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Structural attention mask for one context/query split: row i may attend
/// to column j iff `j < split || j == i`. Realizes the additive mask
/// softmax(x + M) with M ∈ {0, −∞} without materializing M.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub split: usize,
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        col < self.split || col == row
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// [m,k] · [k,n]
    Matmul { a: NodeId, b: NodeId },
    /// scale · ([m,k] · [n,k]ᵀ)
    DotNt { a: NodeId, b: NodeId, scale: f64 },
    Add { a: NodeId, b: NodeId },
    /// [m,n] + broadcast [n]
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: f64 },
    Mul { a: NodeId, b: NodeId },
    Gelu { a: NodeId },
    /// Normalize over the last axis, then affine with gain/bias of that length.
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    Softmax { a: NodeId, axis: usize },
    MaskedSoftmaxRows { a: NodeId, mask: AttnMask },
    SliceCols { a: NodeId, lo: usize, hi: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Keep the m input rows on top, zero rows below up to `total`.
    PadRowsBottom { a: NodeId, total: usize },
    SelectRows { a: NodeId, lo: usize, hi: usize },
    /// Mean over rows of −log softmax(row)[target]; scalar output.
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
    SumAll { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of primitive operations with their result tensors.
pub struct Tape {
    nodes: Vec<Node>,
    forward_flops: u64,
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    pub flops: u64,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when the node never
    /// received one (e.g. a parameter unused by the loss).
    pub fn grad_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), forward_flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count of everything recorded so far (see [`cost`]).
    pub fn forward_flops(&self) -> u64 {
        self.forward_flops
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, flops: u64) -> NodeId {
        self.forward_flops += flops;
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record a constant input; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false, 0)
    }

    /// Record a trainable parameter; gradient is produced by backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true, 0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (two_d(va)?, two_d(vb)?);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let out = mm_nn(va.data(), vb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        t.check_finite("matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, t, needs, cost::matmul(m, k, n)))
    }

    /// scale · (a · bᵀ) for a: [m,k], b: [n,k].
    pub fn dot_nt(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[n, k2]) = (two_d(va)?, two_d(vb)?);
        if k != k2 {
            return Err(Error::Shape(format!("dot_nt: [{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let mut out = mm_nt(va.data(), vb.data(), m, k, n);
        for v in &mut out {
            *v *= scale;
        }
        let t = Tensor::new(vec![m, n], out)?;
        t.check_finite("dot_nt")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::DotNt { a, b, scale }, t, needs, cost::dot_nt(m, k, n)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_no_nan("add")?;
        let needs = self.needs(a) || self.needs(b);
        let n = t.numel() as u64;
        Ok(self.push(Op::Add { a, b }, t, needs, cost::elementwise(n)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let &[m, n] = two_d(va)?;
        if vb.shape() != [n] {
            return Err(Error::Shape(format!("add_bias: {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(va.data()[i * n + j] + vb.data()[j]);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        t.check_finite("add_bias")?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias { a, bias }, t, needs, cost::elementwise((m * n) as u64)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_finite("scale")?;
        let needs = self.needs(a);
        let n = t.numel() as u64;
        Ok(self.push(Op::Scale { a, factor }, t, needs, cost::elementwise(n)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul: {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_finite("mul")?;
        let needs = self.needs(a) || self.needs(b);
        let n = t.numel() as u64;
        Ok(self.push(Op::Mul { a, b }, t, needs, cost::elementwise(n)))
    }

    /// Exact Gaussian-CDF form x·Φ(x), not the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| gelu_exact(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_finite("gelu")?;
        let needs = self.needs(a);
        let n = t.numel() as u64;
        Ok(self.push(Op::Gelu { a }, t, needs, cost::gelu(n)))
    }

    /// Zero mean, unit variance over the last axis (epsilon 1e-5 inside the
    /// square root), then per-position affine.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::Shape("layer_norm: 0-d input".into()))?;
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::Shape("layer_norm: gain/bias length".into()));
        }
        let rows = va.numel() / c;
        let (g, b) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..rows {
            let x = &va.data()[r * c..(r + 1) * c];
            let (mean, inv) = ln_stats(x);
            for j in 0..c {
                data.push((x[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let t = Tensor::new(shape, data)?;
        t.check_finite("layer_norm")?;
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        let flops = cost::layer_norm(rows as u64, c as u64);
        Ok(self.push(Op::LayerNorm { a, gain, bias }, t, needs, flops))
    }

    /// Max-subtracted softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.shape().len() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for {:?}",
                va.shape()
            )));
        }
        let mut data = va.data().to_vec();
        for_each_axis_slice(va.shape(), axis, |idx| {
            softmax_slice_inplace(&mut data, idx);
        });
        let t = Tensor::new(va.shape().to_vec(), data)?;
        t.check_finite("softmax")?;
        let needs = self.needs(a);
        let n = t.numel() as u64;
        Ok(self.push(Op::Softmax { a, axis }, t, needs, cost::softmax(n)))
    }

    /// Row softmax under a context/query attention mask; blocked positions
    /// get probability zero.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: AttnMask) -> Result<NodeId> {
        let va = self.value(a);
        let &[m, n] = two_d(va)?;
        if mask.split == 0 || mask.split > n {
            return Err(Error::Shape(format!("masked_softmax: split {} of {n}", mask.split)));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(i, j) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.allows(i, j) {
                    let e = (row[j] - max).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        t.check_finite("masked_softmax")?;
        let needs = self.needs(a);
        let flops = cost::softmax((m * n) as u64);
        Ok(self.push(Op::MaskedSoftmaxRows { a, mask }, t, needs, flops))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        let &[m, n] = two_d(va)?;
        if lo >= hi || hi > n {
            return Err(Error::Shape(format!("slice_cols: {lo}..{hi} of {n}")));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + lo..i * n + hi]);
        }
        let t = Tensor::new(vec![m, w], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols { a, lo, hi }, t, needs, 0))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let m = two_d(self.value(parts[0]))?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let &[pm, pn] = two_d(self.value(p))?;
            if pm != m {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, t, needs, 0))
    }

    pub fn pad_rows_bottom(&mut self, a: NodeId, total: usize) -> Result<NodeId> {
        let va = self.value(a);
        let &[m, n] = two_d(va)?;
        if total < m {
            return Err(Error::Shape(format!("pad_rows_bottom: {total} < {m}")));
        }
        let mut data = va.data().to_vec();
        data.resize(total * n, 0.0);
        let t = Tensor::new(vec![total, n], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::PadRowsBottom { a, total }, t, needs, 0))
    }

    pub fn select_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        let &[m, n] = two_d(va)?;
        if lo >= hi || hi > m {
            return Err(Error::Shape(format!("select_rows: {lo}..{hi} of {m}")));
        }
        let data = va.data()[lo * n..hi * n].to_vec();
        let t = Tensor::new(vec![hi - lo, n], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SelectRows { a, lo, hi }, t, needs, 0))
    }

    /// Mean over rows of −log softmax(row)[target].
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let va = self.value(logits);
        let &[q, c] = two_d(va)?;
        if targets.len() != q {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {q} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &va.data()[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let t = Tensor::scalar(total / q as f64);
        t.check_finite("cross_entropy")?;
        let needs = self.needs(logits);
        let flops = cost::cross_entropy(q as u64, c as u64);
        Ok(self.push(Op::CrossEntropyMean { logits, targets: targets.to_vec() }, t, needs, flops))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let t = Tensor::scalar(s);
        t.check_finite("sum_all")?;
        let needs = self.needs(a);
        let n = va.numel() as u64;
        Ok(self.push(Op::SumAll { a }, t, needs, cost::elementwise(n)))
    }

    /// Reverse sweep from a scalar loss. Every node recorded before the loss
    /// is visited in exact reverse order; parameters the loss never touched
    /// simply receive no gradient (read them out as zeros).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Invalid("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut flops = 0u64;

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads, &mut flops)?;
        }
        Ok(Gradients { grads, flops })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(t) => {
                let d = delta.data();
                for (x, &y) in t.data_mut().iter_mut().zip(d) {
                    *x += y;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        flops: &mut u64,
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {
                // Terminal: keep the gradient readable for the caller.
                grads[id] = Some(g.clone());
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.nrows(), va.ncols());
                let n = vb.ncols();
                if self.needs(*a) {
                    let da = mm_nt(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                    *flops += cost::matmul(m, n, k);
                }
                if self.needs(*b) {
                    let db = mm_tn(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                    *flops += cost::matmul(k, m, n);
                }
            }
            Op::DotNt { a, b, scale } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.nrows(), va.ncols());
                let n = vb.nrows();
                if self.needs(*a) {
                    let mut da = mm_nn(g.data(), vb.data(), m, n, k);
                    for v in &mut da {
                        *v *= scale;
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                    *flops += cost::dot_nt_bwd_side(m, n, k);
                }
                if self.needs(*b) {
                    let mut db = mm_tn(g.data(), va.data(), m, n, k);
                    for v in &mut db {
                        *v *= scale;
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?);
                    *flops += cost::dot_nt_bwd_side(n, m, k);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                let (m, n) = (g.nrows(), g.ncols());
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db)?);
                    *flops += cost::elementwise((m * n) as u64);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                *flops += cost::elementwise(g.numel() as u64);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                    *flops += cost::elementwise(g.numel() as u64);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
                    *flops += cost::elementwise(g.numel() as u64);
                }
            }
            Op::Gelu { a } => {
                let va = self.value(*a);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                *flops += cost::gelu_bwd(g.numel() as u64);
            }
            Op::LayerNorm { a, gain, bias } => {
                let va = self.value(*a);
                let c = *va.shape().last().unwrap();
                let rows = va.numel() / c;
                let gv = self.value(*gain).data().to_vec();
                let mut da = vec![0.0; va.numel()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for r in 0..rows {
                    let x = &va.data()[r * c..(r + 1) * c];
                    let gy = &g.data()[r * c..(r + 1) * c];
                    let (mean, inv) = ln_stats(x);
                    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxhat = gy[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[j];
                        dgain[j] += gy[j] * xhat[j];
                        dbias[j] += gy[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let dxhat = gy[j] * gv[j];
                        da[r * c + j] =
                            inv * (dxhat - sum_dxhat * inv_c - xhat[j] * sum_dxhat_xhat * inv_c);
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, Tensor::new(vec![c], dgain)?);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, Tensor::new(vec![c], dbias)?);
                }
                *flops += cost::layer_norm_bwd(rows as u64, c as u64);
            }
            Op::Softmax { a, axis } => {
                let y = &self.nodes[id].value;
                let mut da = vec![0.0; y.numel()];
                for_each_axis_slice(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| y.data()[i] * g.data()[i]).sum();
                    for &i in idx {
                        da[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), da)?);
                *flops += cost::softmax_bwd(y.numel() as u64);
            }
            Op::MaskedSoftmaxRows { a, mask } => {
                let y = &self.nodes[id].value;
                let (m, n) = (y.nrows(), y.ncols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if mask.allows(i, j) {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
                *flops += cost::softmax_bwd((m * n) as u64);
            }
            Op::SliceCols { a, lo, hi: _ } => {
                let va = self.value(*a);
                let (m, n) = (va.nrows(), va.ncols());
                let w = g.ncols();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + lo..i * n + lo + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::ConcatCols { parts } => {
                let m = g.nrows();
                let total = g.ncols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![m, w], dp)?);
                    }
                    off += w;
                }
            }
            Op::PadRowsBottom { a, total: _ } => {
                let va = self.value(*a);
                let (m, n) = (va.nrows(), va.ncols());
                let da = g.data()[..m * n].to_vec();
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::SelectRows { a, lo, hi } => {
                let va = self.value(*a);
                let (m, n) = (va.nrows(), va.ncols());
                let mut da = vec![0.0; m * n];
                da[lo * n..hi * n].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let va = self.value(*logits);
                let (q, c) = (va.nrows(), va.ncols());
                let upstream = g.item() / q as f64;
                let mut da = vec![0.0; q * c];
                for (i, &y) in targets.iter().enumerate() {
                    let row = &va.data()[i * c..(i + 1) * c];
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        da[i * c + j] = upstream * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![q, c], da)?);
                *flops += cost::cross_entropy_bwd(q as u64, c as u64);
            }
            Op::SumAll { a } => {
                let va = self.value(*a);
                let da = vec![g.item(); va.numel()];
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
            }
        }
        Ok(())
    }
}

fn two_d(t: &Tensor) -> Result<&[usize; 2]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected 2-d tensor, got {:?}", t.shape())))
}

fn ln_stats(x: &[f64]) -> (f64, f64) {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + 1e-5).sqrt())
}

pub(crate) fn gelu_exact(x: f64) -> f64 {
    x * 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

fn softmax_slice_inplace(data: &mut [f64], idx: &[usize]) {
    let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in idx {
        let e = (data[i] - max).exp();
        data[i] = e;
        sum += e;
    }
    for &i in idx {
        data[i] /= sum;
    }
}

/// Visit each 1-d slice along `axis`, passing the flat indices of its
/// elements in order.
fn for_each_axis_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (l, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + l) * inner + i;
            }
            f(&idx);
        }
    }
}

// ── dense kernels ────────────────────────────────────────────────────

/// c[m,n] = a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}
