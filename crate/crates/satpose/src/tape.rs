//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] replays the
//! record in reverse, accumulating gradients into every node. The op set is
//! exactly what the trunk, the four heads, and the optimizer need. Everything
//! is single-threaded and allocation-ordered, so forward and backward are
//! bitwise deterministic for a fixed input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    BadTensor { len: usize, shape: Vec<usize> },
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TapeError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TapeError::BadTensor { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    Matmul,
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    Softplus,
    Upsample2x,
    Reshape,
    ReduceMean { axes: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of its value shape when the node did not
    /// participate in the backward pass.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Elementwise addition. `b` may also be a trailing-suffix broadcast of
    /// `a` (e.g. a `[O]` bias added to `[N, O]`).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let suffix = sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..];
        if sa != sb && !suffix {
            return Err(mismatch("add", format!("{sa:?} vs {sb:?}")));
        }
        let bn = self.value(b).numel().max(1);
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += bd[i % bn];
        }
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (v, &b_v) in out.data.iter_mut().zip(bd) {
            *v *= b_v;
        }
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v += c;
        }
        self.push(Op::AddScalar(c), vec![a], out)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        self.push(Op::MulScalar(c), vec![a], out)
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul, vec![a, b], Tensor::from_vec(&[m, n], out)?))
    }

    /// 3x3 convolution with padding 1 and stride 1 or 2.
    /// `x: [n, c, h, w]`, `weight: [o, c, 3, 3]`, `bias: [o]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, TapeError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(mismatch("conv2d", format!("x {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(mismatch(
                "conv2d",
                format!("input channels {} vs kernel channels {}", sx[1], sw[1]),
            ));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d", format!("bias {sb:?} vs out channels {}", sw[0])));
        }
        if stride != 1 && stride != 2 {
            return Err(mismatch("conv2d", format!("unsupported stride {stride}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let oplane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                for v in oplane.iter_mut() {
                    *v = bd[oi];
                }
                for ci in 0..c {
                    let xplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let kern = &wd[(oi * c + ci) * 9..(oi * c + ci + 1) * 9];
                    for oy in 0..ho {
                        let iy0 = (oy * stride) as isize - 1;
                        for ox in 0..wo {
                            let ix0 = (ox * stride) as isize - 1;
                            let mut acc = 0.0;
                            for ky in 0..3isize {
                                let iy = iy0 + ky;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3isize {
                                    let ix = ix0 + kx;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xplane[iy as usize * w + ix as usize]
                                        * kern[(ky * 3 + kx) as usize];
                                }
                            }
                            oplane[oy * wo + ox] += acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { stride }, vec![x, weight, bias], value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(Op::Sigmoid, vec![a], out)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.max(0.0) + (-v.abs()).exp().ln_1p();
        }
        self.push(Op::Softplus, vec![a], out)
    }

    /// Nearest-neighbor 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 {
            return Err(mismatch("upsample2x", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ad = self.value(a).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for plane in 0..n * c {
            let src = &ad[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    dst[y * wo + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::Upsample2x, vec![a], value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TapeError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let value = Tensor::from_vec(shape, self.value(a).data.clone())?;
        Ok(self.push(Op::Reshape, vec![a], value))
    }

    /// Mean over the given axes (removed from the output shape).
    pub fn reduce_mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, TapeError> {
        let s = self.value(a).shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= s.len()) || axes.is_empty() {
            return Err(mismatch("reduce_mean", format!("axes {axes:?} on {s:?}")));
        }
        let out_shape: Vec<usize> =
            s.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        let count: usize = axes.iter().map(|&ax| s[ax]).product();
        let mut out = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        let ad = self.value(a).data();
        for (flat, &v) in ad.iter().enumerate() {
            out[reduced_index(flat, &s, &axes, &out_shape)] += v;
        }
        let inv = 1.0 / count as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(Op::ReduceMean { axes }, vec![a], value))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TapeError> {
        if inputs.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} on {first:?}")));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", format!("{first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let s = self.value(id).shape().to_vec();
            let ad = self.value(id).data();
            let span = s[axis] * inner;
            for b in 0..outer {
                let src = &ad[b * span..(b + 1) * span];
                let dst_start = b * axis_total * inner + offset * inner;
                out[dst_start..dst_start + span].copy_from_slice(src);
            }
            offset += s[axis];
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(Op::Concat { axis }, inputs.to_vec(), value))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TapeError> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(mismatch("slice", format!("[{start}, {}) along {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let ad = self.value(a).data();
        let mut out = vec![0.0; outer * len * inner];
        for b in 0..outer {
            let src_start = b * s[axis] * inner + start * inner;
            let dst_start = b * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&ad[src_start..src_start + len * inner]);
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(Op::Slice { axis, start, len }, vec![a], value))
    }

    /// Reverse pass. Each `(node, seed)` pair injects `dL/d(node) = seed`;
    /// gradients of all ancestors are accumulated and returned.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients, TapeError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(TapeError::UnknownNode(id.0));
            }
            if seed.shape() != self.value(*id).shape() {
                return Err(mismatch(
                    "backward",
                    format!(
                        "seed shape {:?} vs node shape {:?}",
                        seed.shape(),
                        self.value(*id).shape()
                    ),
                ));
            }
            accumulate(&mut grads, *id, seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.backprop_node(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        grad: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<(), TapeError> {
        let node = &self.nodes[idx];
        let gd = grad.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                accumulate(grads, a, grad.clone());
                let bshape = self.value(b).shape().to_vec();
                let bn = self.value(b).numel().max(1);
                let mut gb = Tensor::zeros(&bshape);
                for (i, &g) in gd.iter().enumerate() {
                    gb.data[i % bn] += g;
                }
                accumulate(grads, b, gb);
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let mut ga = self.value(b).clone();
                for (v, &g) in ga.data.iter_mut().zip(gd) {
                    *v *= g;
                }
                let mut gb = self.value(a).clone();
                for (v, &g) in gb.data.iter_mut().zip(gd) {
                    *v *= g;
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            Op::AddScalar(_) => accumulate(grads, node.inputs[0], grad.clone()),
            Op::MulScalar(c) => {
                let mut ga = grad.clone();
                for v in ga.data.iter_mut() {
                    *v *= c;
                }
                accumulate(grads, node.inputs[0], ga);
            }
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                // dA = G B^T, dB = A^T G.
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * gd[i * n + j];
                        }
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&[m, k], ga)?);
                accumulate(grads, b, Tensor::from_vec(&[k, n], gb)?);
            }
            Op::Conv2d { stride } => {
                let (x, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let sx = self.value(x).shape().to_vec();
                let sw = self.value(weight).shape().to_vec();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let o = sw[0];
                let so = node.value.shape();
                let (ho, wo) = (so[2], so[3]);
                let xd = self.value(x).data();
                let wd = self.value(weight).data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; o];
                for ni in 0..n {
                    for oi in 0..o {
                        let gplane = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                        gb[oi] += gplane.iter().sum::<f64>();
                        for ci in 0..c {
                            let xplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            let kern = &wd[(oi * c + ci) * 9..(oi * c + ci + 1) * 9];
                            let gxp = (ni * c + ci) * h * w;
                            let gwp = (oi * c + ci) * 9;
                            for oy in 0..ho {
                                let iy0 = (oy * stride) as isize - 1;
                                for ox in 0..wo {
                                    let g = gplane[oy * wo + ox];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let ix0 = (ox * stride) as isize - 1;
                                    for ky in 0..3isize {
                                        let iy = iy0 + ky;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3isize {
                                            let ix = ix0 + kx;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = iy as usize * w + ix as usize;
                                            let ki = (ky * 3 + kx) as usize;
                                            gx[gxp + xi] += g * kern[ki];
                                            gw[gwp + ki] += g * xplane[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, x, Tensor::from_vec(&sx, gx)?);
                accumulate(grads, weight, Tensor::from_vec(&sw, gw)?);
                accumulate(grads, bias, Tensor::from_vec(&[o], gb)?);
            }
            Op::Relu => {
                let a = node.inputs[0];
                let mut ga = grad.clone();
                for (v, &x) in ga.data.iter_mut().zip(self.value(a).data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                accumulate(grads, a, ga);
            }
            Op::Sigmoid => {
                let mut ga = grad.clone();
                for (v, &y) in ga.data.iter_mut().zip(node.value.data()) {
                    *v *= y * (1.0 - y);
                }
                accumulate(grads, node.inputs[0], ga);
            }
            Op::Softplus => {
                let a = node.inputs[0];
                let mut ga = grad.clone();
                for (v, &x) in ga.data.iter_mut().zip(self.value(a).data()) {
                    *v *= 1.0 / (1.0 + (-x).exp());
                }
                accumulate(grads, a, ga);
            }
            Op::Upsample2x => {
                let a = node.inputs[0];
                let s = self.value(a).shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut ga = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                    let dst = &mut ga[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        for x in 0..wo {
                            dst[(y / 2) * w + x / 2] += src[y * wo + x];
                        }
                    }
                }
                accumulate(grads, a, Tensor::from_vec(&s, ga)?);
            }
            Op::Reshape => {
                let a = node.inputs[0];
                let ga = Tensor::from_vec(self.value(a).shape(), grad.data.clone())?;
                accumulate(grads, a, ga);
            }
            Op::ReduceMean { axes } => {
                let a = node.inputs[0];
                let s = self.value(a).shape().to_vec();
                let out_shape = node.value.shape().to_vec();
                let count: usize = axes.iter().map(|&ax| s[ax]).product();
                let inv = 1.0 / count as f64;
                let mut ga = vec![0.0; self.value(a).numel()];
                for (flat, v) in ga.iter_mut().enumerate() {
                    *v = gd[reduced_index(flat, &s, axes, &out_shape)] * inv;
                }
                accumulate(grads, a, Tensor::from_vec(&s, ga)?);
            }
            Op::Concat { axis } => {
                let first = self.value(node.inputs[0]).shape().to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let axis_total = node.value.shape()[*axis];
                let mut offset = 0;
                for &id in &node.inputs {
                    let s = self.value(id).shape().to_vec();
                    let span = s[*axis] * inner;
                    let mut gi = vec![0.0; self.value(id).numel()];
                    for b in 0..outer {
                        let src_start = b * axis_total * inner + offset * inner;
                        gi[b * span..(b + 1) * span]
                            .copy_from_slice(&gd[src_start..src_start + span]);
                    }
                    offset += s[*axis];
                    accumulate(grads, id, Tensor::from_vec(&s, gi)?);
                }
            }
            Op::Slice { axis, start, len } => {
                let a = node.inputs[0];
                let s = self.value(a).shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut ga = vec![0.0; self.value(a).numel()];
                for b in 0..outer {
                    let dst_start = b * s[*axis] * inner + start * inner;
                    let src_start = b * len * inner;
                    ga[dst_start..dst_start + len * inner]
                        .copy_from_slice(&gd[src_start..src_start + len * inner]);
                }
                accumulate(grads, a, Tensor::from_vec(&s, ga)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (v, &add) in existing.data.iter_mut().zip(g.data()) {
                *v += add;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Flat index into the reduced-output buffer for `reduce_mean`.
fn reduced_index(flat: usize, shape: &[usize], axes: &[usize], out_shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = rem % shape[i];
        rem /= shape[i];
    }
    let mut out = 0;
    let mut oi = 0;
    for (i, &c) in coords.iter().enumerate() {
        if axes.contains(&i) {
            continue;
        }
        out = out * out_shape[oi] + c;
        oi += 1;
    }
    out
}

/// Adam optimizer state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape), v: Tensor::zeros(shape), step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected).
/// Rejects non-finite gradients; `name` identifies the parameter in the error.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    name: &str,
) -> Result<(), TapeError> {
    if param.shape() != grad.shape() {
        return Err(mismatch(
            "adam_step",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(TapeError::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..param.data.len() {
        let g = grad.data[i];
        state.m.data[i] = ADAM_BETA1 * state.m.data[i] + (1.0 - ADAM_BETA1) * g;
        state.v.data[i] = ADAM_BETA2 * state.v.data[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m.data[i] / bc1;
        let v_hat = state.v.data[i] / bc2;
        param.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn square_derivative_via_mul() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let grads = tape.backward(&[(y, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let g = rand_tensor(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let na = tape.leaf(a.clone());
        let nb = tape.leaf(b.clone());
        let y = tape.matmul(na, nb).unwrap();
        let grads = tape.backward(&[(y, g.clone())]).unwrap();
        // dA = G B^T
        for i in 0..3 {
            for p in 0..4 {
                let mut expect = 0.0;
                for j in 0..2 {
                    expect += g.data()[i * 2 + j] * b.data()[p * 2 + j];
                }
                let got = grads.get(na).unwrap().data()[i * 4 + p];
                assert!((got - expect).abs() < 1e-12);
            }
        }
        // dB = A^T G
        for p in 0..4 {
            for j in 0..2 {
                let mut expect = 0.0;
                for i in 0..3 {
                    expect += a.data()[i * 4 + p] * g.data()[i * 2 + j];
                }
                let got = grads.get(nb).unwrap().data()[p * 2 + j];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for stride in [1usize, 2] {
            let x = rand_tensor(&[1, 1, 6, 6], &mut rng);
            let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
            let b = rand_tensor(&[2], &mut rng);
            let err = gradcheck::tape_gradient_check(
                |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], stride),
                &[x, w, b],
                42,
            )
            .unwrap();
            assert!(err < 1e-5, "conv2d stride {stride} FD error {err}");
        }
    }

    #[test]
    fn every_op_passes_a_gradient_spot_check() {
        for (name, err) in gradcheck::check_all_ops(7, 5).unwrap() {
            assert!(err < 1e-5, "{name} FD error {err}");
        }
    }

    #[test]
    fn shape_mismatch_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 4]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[3]);
        adam_step(&mut p, &g, &mut st, 1e-3, "p").unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let mut p = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.3, -7.0]).unwrap();
        let mut st = AdamState::new(&[2]);
        let lr = 1e-2;
        adam_step(&mut p, &g, &mut st, lr, "p").unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let step = p.data()[i];
            assert!((step.abs() - lr).abs() < lr * 1e-3, "step {step}");
            assert!(step.signum() == -gv.signum());
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let mut st = AdamState::new(&[1]);
        let err = adam_step(&mut p, &g, &mut st, 1e-3, "trunk.conv1.weight").unwrap_err();
        assert!(err.to_string().contains("trunk.conv1.weight"));
    }

    #[test]
    fn adam_descends_a_quadratic_bowl_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut w = rand_tensor(&[8], &mut rng);
        let mut st = AdamState::new(&[8]);
        let mut prev = w.l2_norm();
        let mut norms = Vec::new();
        for _ in 0..200 {
            let g = Tensor::from_vec(&[8], w.data().iter().map(|v| 2.0 * v).collect()).unwrap();
            adam_step(&mut w, &g, &mut st, 5e-4, "w").unwrap();
            norms.push(w.l2_norm());
        }
        // Monotone decrease after a short warmup.
        for (i, &n) in norms.iter().enumerate().skip(5) {
            assert!(n < prev, "norm increased at step {i}");
            prev = n;
        }
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(44);
            let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
            let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let mut tape = Tape::new();
            let nx = tape.leaf(x);
            let nw = tape.leaf(w);
            let nb = tape.leaf(b);
            let c = tape.conv2d(nx, nw, nb, 2).unwrap();
            let r = tape.relu(c);
            let m = tape.reduce_mean(r, &[0, 1, 2, 3]).unwrap();
            let grads = tape.backward(&[(m, Tensor::scalar(1.0))]).unwrap();
            (
                tape.value(m).item().to_bits(),
                grads.get(nw).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
