use std::collections::{BTreeMap, HashMap};

use super::{gemm, log_softmax, softmax, Float, Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Geometry of a "same"-padded 2-D patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent of a "same"-padded convolution: `ceil(input / stride)`.
pub fn conv_output_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Leading padding for a "same" convolution along one axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> usize {
    let out = conv_output_extent(input, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    total / 2
}

impl ConvGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} and stride {stride} must be positive"),
            ));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::shape("conv2d", "empty spatial input"));
        }
        Ok(ConvGeom {
            in_h,
            in_w,
            channels,
            kernel_h,
            kernel_w,
            stride,
            out_h: conv_output_extent(in_h, stride),
            out_w: conv_output_extent(in_w, stride),
            pad_top: same_padding(in_h, kernel_h, stride),
            pad_left: same_padding(in_w, kernel_w, stride),
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch entry.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch_len();
        let c = self.channels;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * patch;
                for ky in 0..self.kernel_h {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel_w {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let col = row + (ky * self.kernel_w + kx) * c;
                        let src = (iy as usize * self.in_w + ix as usize) * c;
                        for ch in 0..c {
                            f(col + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

enum Op<T: Float> {
    Leaf,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    Im2Col { x: NodeId, geom: ConvGeom },
    ChannelNorm(NodeId),
    HardThreshold { x: NodeId, mask: Vec<bool>, total: T },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode tape recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<String, NodeId>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node,
    /// so gradients from every use accumulate into one entry.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = params.get(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x[..., m] + b[m]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.value(x).last_dim();
        if self.value(b).len() != m || self.value(b).rank() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// `x[..., n] · w[n, m] -> [..., m]`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let n = vx.last_dim();
        if vw.rank() != 2 || vw.shape()[0] != n || vx.rank() == 0 {
            return Err(Error::shape(
                "matmul",
                format!("input {:?}, weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let m = vw.shape()[1];
        let rows = vx.len() / n.max(1);
        let mut out = vec![T::zero(); rows * m];
        gemm(rows, n, m, vx.data(), false, vw.data(), false, &mut out, false);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = m;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(x, w)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    /// Softmax over all elements (the spatial softmax for an h×w map).
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), softmax(vx.data())).expect("same length");
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), log_softmax(vx.data())).expect("same length");
        self.push(v, Op::LogSoftmax(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs leading {:?}", s, lead),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let w = vx.last_dim();
        if vx.rank() == 0 || start + len > w {
            return Err(Error::shape(
                "slice_last",
                format!("[{start}, {}) of {:?}", start + len, vx.shape()),
            ));
        }
        let rows = vx.len() / w.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Slice { x, start, len }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Extract "same"-padded patches: `[H, W, C] -> [Ho, Wo, kh*kw*C]`.
    pub fn im2col(&mut self, x: NodeId, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(Error::shape("conv2d", format!("input must be HxWxC, got {:?}", vx.shape())));
        }
        let s = vx.shape();
        let geom = ConvGeom::new(s[0], s[1], s[2], kernel_h, kernel_w, stride)?;
        let mut cols = vec![T::zero(); geom.out_h * geom.out_w * geom.patch_len()];
        let src = vx.data();
        geom.for_each_tap(|col, inp| cols[col] = src[inp]);
        let v = Tensor::new(vec![geom.out_h, geom.out_w, geom.patch_len()], cols)?;
        Ok(self.push(v, Op::Im2Col { x, geom }))
    }

    /// "Same"-padded 2-D convolution; `w` is `[kh, kw, Cin, Cout]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || xs.len() != 3 || ws[2] != xs[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        }
        let cols = self.im2col(x, ws[0], ws[1], stride)?;
        let wmat = self.reshape(w, &[ws[0] * ws[1] * ws[2], ws[3]])?;
        let y = self.matmul(cols, wmat)?;
        self.add_bias(y, b)
    }

    /// `x · w + b` over the trailing axis.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn gates(&mut self, pre: NodeId, width: usize) -> Result<[NodeId; 4]> {
        let i = self.slice_last(pre, 0, width)?;
        let f = self.slice_last(pre, width, width)?;
        let g = self.slice_last(pre, 2 * width, width)?;
        let o = self.slice_last(pre, 3 * width, width)?;
        Ok([self.sigmoid(i), self.sigmoid(f), self.tanh(g), self.sigmoid(o)])
    }

    fn cell_update(&mut self, gates: [NodeId; 4], c: NodeId) -> Result<(NodeId, NodeId)> {
        let [i, f, g, o] = gates;
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_new = self.add(keep, write)?;
        let squashed = self.tanh(c_new);
        let h_new = self.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// LSTM cell with gate order i, f, g, o. `w` is `[n + m, 4m]`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let m = self.value(h).last_dim();
        if self.shape(c) != self.shape(h) || self.value(b).len() != 4 * m {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "h {:?}, c {:?}, bias {:?}",
                    self.shape(h),
                    self.shape(c),
                    self.shape(b)
                ),
            ));
        }
        let joined = self.concat(&[x, h])?;
        let pre = self.dense(joined, w, b)?;
        let gates = self.gates(pre, m)?;
        self.cell_update(gates, c)
    }

    /// ConvLSTM cell: gates from a "same" stride-1 convolution over the
    /// channel concatenation of input and hidden state; `w` is
    /// `[k, k, Cin + c, 4c]`.
    pub fn convlstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let width = self.value(h).last_dim();
        if self.shape(c) != self.shape(h) || self.value(b).len() != 4 * width {
            return Err(Error::shape(
                "convlstm_cell",
                format!(
                    "h {:?}, c {:?}, bias {:?}",
                    self.shape(h),
                    self.shape(c),
                    self.shape(b)
                ),
            ));
        }
        let joined = self.concat(&[x, h])?;
        let pre = self.conv2d(joined, w, b, 1)?;
        let gates = self.gates(pre, width)?;
        self.cell_update(gates, c)
    }

    /// L2 norm over the trailing axis: `[..., c] -> [...]`.
    pub fn channel_l2_norm(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let c = vx.last_dim().max(1);
        let data: Vec<T> = vx
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let shape = vx.shape()[..vx.rank().saturating_sub(1)].to_vec();
        let v = Tensor::new(shape, data).expect("row count");
        self.push(v, Op::ChannelNorm(x))
    }

    /// Zero entries below `t * max(x)` and renormalise the survivors.
    pub fn hard_threshold(&mut self, x: NodeId, t: T) -> Result<NodeId> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
        }
        let vx = self.value(x);
        let max = vx.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let cut = t * max;
        let mask: Vec<bool> = vx.data().iter().map(|&v| v >= cut).collect();
        let total: T = vx
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| keep)
            .map(|(&v, _)| v)
            .sum();
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v / total } else { T::zero() })
            .collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::HardThreshold { x, mask, total }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter in
    /// `params`. Parameters that do not influence the loss get zeros.
    /// Does not mutate the graph, so repeated calls agree.
    pub fn backward(&self, loss: NodeId, params: &ParamSet<T>) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, self);
                    accumulate(&mut grads, *b, &g, self);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, self);
                    accumulate(&mut grads, *b, &g.map(|v| -v), self);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |gi, bi| gi * bi);
                    let gb = elementwise(&g, self.value(*a), |gi, ai| gi * ai);
                    accumulate(&mut grads, *a, &ga, self);
                    accumulate(&mut grads, *b, &gb, self);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, &g.map(|v| v * s), self);
                }
                Op::AddBias(x, b) => {
                    let m = g.last_dim();
                    let mut gb = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, &g, self);
                    let gb = Tensor::new(self.shape(*b).to_vec(), gb)?;
                    accumulate(&mut grads, *b, &gb, self);
                }
                Op::MatMul(x, w) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let n = vx.last_dim();
                    let m = vw.shape()[1];
                    let rows = vx.len() / n.max(1);
                    let mut gx = vec![T::zero(); rows * n];
                    gemm(rows, m, n, g.data(), false, vw.data(), true, &mut gx, false);
                    let mut gw = vec![T::zero(); n * m];
                    gemm(n, rows, m, vx.data(), true, g.data(), false, &mut gw, false);
                    accumulate(&mut grads, *x, &Tensor::new(vx.shape().to_vec(), gx)?, self);
                    accumulate(&mut grads, *w, &Tensor::new(vw.shape().to_vec(), gw)?, self);
                }
                Op::Relu(x) => {
                    let gx = elementwise(&g, self.value(*x), |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Tanh(x) => {
                    let gx = elementwise(&g, &node.value, |gi, yi| gi * (T::one() - yi * yi));
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Sigmoid(x) => {
                    let gx = elementwise(&g, &node.value, |gi, yi| gi * yi * (T::one() - yi));
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                    let gx = elementwise(&g, y, |gi, yi| yi * (gi - dot));
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::LogSoftmax(x) => {
                    let total: T = g.sum();
                    let gx = elementwise(&g, &node.value, |gi, yi| gi - yi.exp() * total);
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let gx = Tensor::full(self.shape(*x), gv);
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Concat(parts) => {
                    let total = g.last_dim();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, &Tensor::new(self.shape(p).to_vec(), gp)?, self);
                        offset += w;
                    }
                }
                Op::Slice { x, start, len } => {
                    let w = self.value(*x).last_dim();
                    let rows = g.len() / (*len).max(1);
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let dst = gx.data_mut();
                    for r in 0..rows {
                        dst[r * w + start..r * w + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::Im2Col { x, geom } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    {
                        let dst = gx.data_mut();
                        let src = g.data();
                        geom.for_each_tap(|col, inp| dst[inp] += src[col]);
                    }
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::ChannelNorm(x) => {
                    let vx = self.value(*x);
                    let c = vx.last_dim().max(1);
                    let mut gx = Tensor::zeros(vx.shape());
                    for ((dst, src), (&gi, &n)) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(vx.data().chunks(c))
                        .zip(g.data().iter().zip(node.value.data()))
                    {
                        if n > T::zero() {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = gi * s / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, self);
                }
                Op::HardThreshold { x, mask, total } => {
                    let y = &node.value;
                    let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gi, &keep)| if keep { (gi - dot) / *total } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, &Tensor::new(y.shape().to_vec(), data)?, self);
                }
            }
        }

        let mut full = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let g = out
                .remove(name)
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            full.insert(name.to_string(), g);
        }
        Ok(Gradients::from_map(full))
    }
}

fn elementwise<T: Float>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same length")
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: &Tensor<T>, graph: &Graph<T>) {
    // Leaves that are plain constants never need a gradient buffer.
    if matches!(graph.nodes[id.0].op, Op::Leaf) {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}
