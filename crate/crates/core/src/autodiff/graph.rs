use crate::autodiff::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape(NodeId),
    LogSoftmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    SampleMean(NodeId),
    ClampMin(NodeId, f64),
    DivSample(NodeId, NodeId),
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order of the
/// (acyclic by construction) dependency graph; `backward` walks it in reverse.
/// Leaves created with [`Graph::param`] collect gradients; leaves created
/// with [`Graph::constant`] and everything derived only from constants do not.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient, if `backward` reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Relu(a)
            | Op::Reshape(a)
            | Op::LogSoftmax(a)
            | Op::Scale(a, _)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::SampleMean(a)
            | Op::ClampMin(a, _) => vec![a],
            Op::MaxPool2 { input, .. } => vec![input],
            Op::Gather { x, .. } => vec![x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DivSample(a, b) => vec![a, b],
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(
                what.to_string(),
                format!("operand shapes {sa:?} and {sb:?} differ"),
            ));
        }
        Ok(())
    }

    /// 2-D convolution: `input[N,C,H,W] * weight[F,C,k,k] + bias[F]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 4 {
            return Err(Error::dim(
                "input rank",
                format!("expected NCHW, got {is:?}"),
            ));
        }
        if ws.len() != 4 {
            return Err(Error::dim(
                "weight rank",
                format!("expected FCkk, got {ws:?}"),
            ));
        }
        if ws[1] != is[1] {
            return Err(Error::dim(
                "channel axis",
                format!("input has {} channels, weight expects {}", is[1], ws[1]),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::dim(
                "kernel axes",
                format!("kernel must be square, got {ws:?}"),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(
                "bias axis",
                format!("bias shape {bs:?} does not match {} filters", ws[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let k = ws[2];
        if k > is[2] + 2 * padding {
            return Err(Error::dim(
                "height axis",
                format!("kernel {k} exceeds padded height"),
            ));
        }
        if k > is[3] + 2 * padding {
            return Err(Error::dim(
                "width axis",
                format!("kernel {k} exceeds padded width"),
            ));
        }
        let geometry = ConvGeometry {
            batch: is[0],
            in_channels: is[1],
            height: is[2],
            width: is[3],
            filters: ws[0],
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.output_shape().to_vec(), out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "input rank",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        if !s[2].is_multiple_of(2) {
            return Err(Error::dim("height axis", format!("odd height {}", s[2])));
        }
        if !s[3].is_multiple_of(2) {
            return Err(Error::dim("width axis", format!("odd width {}", s[3])));
        }
        let (out, argmax) =
            kernels::maxpool2_forward([s[0], s[1], s[2], s[3]], self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        self.push(value, Op::MaxPool2 { input: x, argmax }, "maxpool2")
    }

    /// Affine map `x[N,D] · w[D,K] + b[K]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::dim(
                "rank",
                format!("dense expects 2-D operands, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(
                "inner axis",
                format!("input width {} vs weight rows {}", xs[1], ws[0]),
            ));
        }
        if bs != [ws[1]] {
            return Err(Error::dim(
                "bias axis",
                format!("bias {bs:?} vs {} outputs", ws[1]),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let out = kernels::dense_forward(
            n,
            d,
            k,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        self.push(
            Tensor::new(vec![n, k], out)?,
            Op::Dense { x, w, b },
            "dense",
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Collapses all axes after the first: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.shape()[0];
        let d = v.sample_len();
        self.reshape(x, &[n, d])
    }

    /// Row-wise log-softmax of `[N, K]` logits, stabilized by the row max.
    pub fn log_softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(
                "rank",
                format!("log_softmax expects [N,K], got {s:?}"),
            ));
        }
        if s[1] < 2 {
            return Err(Error::dim("class axis", "need at least two classes"));
        }
        let k = s[1];
        let mut out = Vec::with_capacity(s[0] * k);
        for row in self.value(logits).data().chunks_exact(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push(Tensor::new(s, out)?, Op::LogSoftmax(logits), "log_softmax")
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    fn map(
        &mut self,
        a: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| f(*x)).collect(),
        )?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.map(a, Op::ClampMin(a, floor), "clamp_min", |x| x.max(floor))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Per-sample mean: `[N, ...] -> [N]`.
    pub fn sample_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = v.shape()[0];
        let per = v.sample_len();
        let data = v
            .data()
            .chunks_exact(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        self.push(
            Tensor::new(vec![n], data)?,
            Op::SampleMean(a),
            "sample_mean",
        )
    }

    /// Divides every element of sample `n` in `a[N, ...]` by `d[n]`.
    pub fn div_sample(&mut self, a: NodeId, d: NodeId) -> Result<NodeId> {
        let (va, vd) = (self.value(a), self.value(d));
        let n = va.shape()[0];
        if vd.shape() != [n] {
            return Err(Error::dim(
                "batch axis",
                format!("divisor {:?} does not match batch {n}", vd.shape()),
            ));
        }
        let per = va.sample_len();
        let data = va
            .data()
            .chunks_exact(per)
            .zip(vd.data())
            .flat_map(|(c, q)| c.iter().map(move |x| x / q))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::DivSample(a, d), "div_sample")
    }

    /// Picks `x[n, indices[n]]` from a `[N, K]` tensor, giving `[N]`.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(
                "rank",
                format!("gather expects [N,K], got {s:?}"),
            ));
        }
        if indices.len() != s[0] {
            return Err(Error::dim(
                "batch axis",
                format!("{} indices for batch of {}", indices.len(), s[0]),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(Error::contract(format!(
                "index {bad} out of range for {} classes",
                s[1]
            )));
        }
        let v = self.value(x).data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(n, &j)| v[n * s[1] + j])
            .collect();
        self.push(
            Tensor::new(vec![s[0]], data)?,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            "gather",
        )
    }

    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.backward_with_hook(root, |_| {})
    }

    /// Reverse-mode sweep from a scalar root. `hook` is called once for every
    /// node that receives a gradient during this sweep. Gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward_with_hook(&mut self, root: NodeId, mut hook: impl FnMut(NodeId)) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            hook(NodeId(i));
            self.propagate(i, &g, &mut pending);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, pending: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let out = self.nodes[i].value.data();
        let gd = g.data();
        macro_rules! acc {
            ($id:expr, |$buf:ident| $body:expr) => {{
                let id: NodeId = $id;
                if needs(id) {
                    let slot = pending[id.0]
                        .get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
                    let $buf: &mut [f64] = slot.data_mut();
                    $body;
                }
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let mut gi = needs(input).then(|| Tensor::zeros(self.shape(input)));
                let mut gw = needs(weight).then(|| Tensor::zeros(self.shape(weight)));
                let mut gb = needs(bias).then(|| Tensor::zeros(self.shape(bias)));
                kernels::conv2d_backward(
                    geometry,
                    val(input),
                    val(weight),
                    gd,
                    gi.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (id, t) in [(input, gi), (weight, gw), (bias, gb)] {
                    if let Some(t) = t {
                        add_pending(pending, id, t);
                    }
                }
            }
            Op::Relu(a) => acc!(*a, |buf| {
                for ((b, x), g) in buf.iter_mut().zip(val(*a)).zip(gd) {
                    if *x > 0.0 {
                        *b += g;
                    }
                }
            }),
            Op::MaxPool2 { input, argmax } => acc!(*input, |buf| {
                for (src, g) in argmax.iter().zip(gd) {
                    buf[*src] += g;
                }
            }),
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.shape(x);
                let (n, d, k) = (xs[0], xs[1], self.shape(w)[1]);
                let mut gx = needs(x).then(|| Tensor::zeros(self.shape(x)));
                let mut gw = needs(w).then(|| Tensor::zeros(self.shape(w)));
                let mut gb = needs(b).then(|| Tensor::zeros(self.shape(b)));
                kernels::dense_backward(
                    n,
                    d,
                    k,
                    val(x),
                    val(w),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (id, t) in [(x, gx), (w, gw), (b, gb)] {
                    if let Some(t) = t {
                        add_pending(pending, id, t);
                    }
                }
            }
            Op::Reshape(a) => acc!(*a, |buf| add_into(buf, gd)),
            Op::LogSoftmax(a) => acc!(*a, |buf| {
                let k = self.shape(*a)[1];
                for ((b, o), gr) in buf
                    .chunks_exact_mut(k)
                    .zip(out.chunks_exact(k))
                    .zip(gd.chunks_exact(k))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        b[j] += gr[j] - o[j].exp() * total;
                    }
                }
            }),
            Op::Add(a, b) => {
                acc!(*a, |buf| add_into(buf, gd));
                acc!(*b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| add_into(buf, gd));
                acc!(*b, |buf| {
                    for (x, g) in buf.iter_mut().zip(gd) {
                        *x -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |buf| {
                    for ((x, g), o) in buf.iter_mut().zip(gd).zip(val(b)) {
                        *x += g * o;
                    }
                });
                acc!(b, |buf| {
                    for ((x, g), o) in buf.iter_mut().zip(gd).zip(val(a)) {
                        *x += g * o;
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf| {
                for (x, g) in buf.iter_mut().zip(gd) {
                    *x += c * g;
                }
            }),
            Op::Square(a) => acc!(*a, |buf| {
                for ((x, g), v) in buf.iter_mut().zip(gd).zip(val(*a)) {
                    *x += 2.0 * v * g;
                }
            }),
            Op::Exp(a) => acc!(*a, |buf| {
                for ((x, g), o) in buf.iter_mut().zip(gd).zip(out) {
                    *x += o * g;
                }
            }),
            Op::Sum(a) => acc!(*a, |buf| {
                let g0 = gd[0];
                for x in buf.iter_mut() {
                    *x += g0;
                }
            }),
            Op::SampleMean(a) => acc!(*a, |buf| {
                let per = self.value(*a).sample_len();
                for (chunk, g) in buf.chunks_exact_mut(per).zip(gd) {
                    let share = g / per as f64;
                    for x in chunk {
                        *x += share;
                    }
                }
            }),
            Op::ClampMin(a, floor) => acc!(*a, |buf| {
                for ((x, g), v) in buf.iter_mut().zip(gd).zip(val(*a)) {
                    if *v > *floor {
                        *x += g;
                    }
                }
            }),
            Op::DivSample(a, d) => {
                let (a, d) = (*a, *d);
                let per = self.value(a).sample_len();
                let dv = val(d);
                acc!(a, |buf| {
                    for ((chunk, gc), q) in
                        buf.chunks_exact_mut(per).zip(gd.chunks_exact(per)).zip(dv)
                    {
                        for (x, g) in chunk.iter_mut().zip(gc) {
                            *x += g / q;
                        }
                    }
                });
                acc!(d, |buf| {
                    for (((x, gc), oc), q) in buf
                        .iter_mut()
                        .zip(gd.chunks_exact(per))
                        .zip(out.chunks_exact(per))
                        .zip(dv)
                    {
                        let s: f64 = gc.iter().zip(oc).map(|(g, o)| g * o).sum();
                        *x -= s / q;
                    }
                });
            }
            Op::Gather { x, indices } => acc!(*x, |buf| {
                let k = self.shape(*x)[1];
                for (n, (&j, g)) in indices.iter().zip(gd).enumerate() {
                    buf[n * k + j] += g;
                }
            }),
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (x, y) in buf.iter_mut().zip(g) {
        *x += y;
    }
}

fn add_pending(pending: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut pending[id.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
