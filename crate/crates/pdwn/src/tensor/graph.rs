//! Reverse-mode differentiation over a flat tape of 4-D tensor ops.
//!
//! A [`Graph`] is rebuilt for every forward pass. Ops append nodes that only
//! reference earlier nodes, so the tape order is already topological and
//! `backward` is a single reverse sweep. Gradient accumulation is additive:
//! a tensor feeding two consumers receives the sum of both contributions.

use super::kernels;
use super::{Scalar, Shape, TensorData};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::warp::kernels as warp_kernels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
        // right/bottom edge replication applied for odd extents
        padded: (bool, bool),
    },
    BilinearResize {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    SliceChannels {
        input: NodeId,
        from: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        input: NodeId,
        scale: f64,
        shift: f64,
    },
    RepeatChannels {
        input: NodeId,
        reps: usize,
    },
    SumAll {
        input: NodeId,
    },
    L1Loss {
        pred: NodeId,
        target: NodeId,
    },
    DeformableWarp {
        feature: NodeId,
        offsets: NodeId,
        modulation: NodeId,
        weight: NodeId,
    },
    FlowWarp {
        feature: NodeId,
        flow: NodeId,
    },
    CostVolume {
        left: NodeId,
        right: NodeId,
        radius: usize,
    },
}

/// Discriminant of [`Op`], used by the gradient-check registry to enumerate
/// every op the engine defines. `all()` must list each variant exactly once;
/// `name()` matches exhaustively so a new variant cannot be forgotten here
/// without failing to compile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    LeakyRelu,
    MaxPool2,
    BilinearResize,
    Sigmoid,
    SoftmaxChannels,
    ConcatChannels,
    SliceChannels,
    Add,
    Mul,
    Affine,
    RepeatChannels,
    SumAll,
    L1Loss,
    DeformableWarp,
    FlowWarp,
    CostVolume,
}

impl OpKind {
    pub fn all() -> &'static [OpKind] {
        use OpKind::*;
        &[
            Leaf,
            Conv2d,
            LeakyRelu,
            MaxPool2,
            BilinearResize,
            Sigmoid,
            SoftmaxChannels,
            ConcatChannels,
            SliceChannels,
            Add,
            Mul,
            Affine,
            RepeatChannels,
            SumAll,
            L1Loss,
            DeformableWarp,
            FlowWarp,
            CostVolume,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::RepeatChannels => "repeat_channels",
            OpKind::SumAll => "sum_all",
            OpKind::L1Loss => "l1_loss",
            OpKind::DeformableWarp => "deformable_warp",
            OpKind::FlowWarp => "flow_warp",
            OpKind::CostVolume => "cost_volume",
        }
    }

    pub fn differentiable(&self) -> bool {
        !matches!(self, OpKind::Leaf)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::SoftmaxChannels { .. } => OpKind::SoftmaxChannels,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::RepeatChannels { .. } => OpKind::RepeatChannels,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::L1Loss { .. } => OpKind::L1Loss,
            Op::DeformableWarp { .. } => OpKind::DeformableWarp,
            Op::FlowWarp { .. } => OpKind::FlowWarp,
            Op::CostVolume { .. } => OpKind::CostVolume,
        }
    }
}

pub(crate) struct Node<T> {
    pub value: TensorData<T>,
    pub grad: Option<TensorData<T>>,
    pub requires: bool,
    pub op: Op,
}

/// The differentiation tape. One instance per forward/backward pass, confined
/// to a single thread of control; kernels parallelize internally.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) param_bindings: Vec<(usize, NodeId)>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_bindings: Vec::new(),
            backward_done: false,
        }
    }

    pub(crate) fn push(&mut self, value: TensorData<T>, requires: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: TensorData<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    /// Accumulated gradient, if this node required one and backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&TensorData<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient buffer, zero-filled when backward never reached the node.
    pub fn grad_or_zeros(&self, id: NodeId) -> TensorData<T> {
        match self.nodes[id.0].grad.as_ref() {
            Some(g) => g.clone(),
            None => TensorData::zeros(self.shape(id)),
        }
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    // ---- op constructors -------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {}x{}", ws.h, ws.w)));
        }
        if is.c != ws.c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight input channels {}", is.c, ws.c),
            ));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {} != 1x{}x1x1", bs, ws.n),
            ));
        }
        if is.h + 2 * padding < ws.h || is.w + 2 * padding < ws.w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} exceeds padded input {}x{}", ws.h, is.h + 2 * padding, is.w + 2 * padding),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let value = kernels::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            stride,
            padding,
        );
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            value,
            requires,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let x = &self.nodes[input.0].value;
        let mut value = TensorData::zeros(x.shape);
        let src = &x.data;
        for_each_chunk(&mut value.data, x.shape.h * x.shape.w, |i, chunk| {
            let base = i * x.shape.h * x.shape.w;
            for (j, v) in chunk.iter_mut().enumerate() {
                let t = src[base + j];
                *v = if t > T::ZERO { t } else { s * t };
            }
        });
        let requires = self.requires(input);
        self.push(value, requires, Op::LeakyRelu { input, slope })
    }

    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let padded = (x.shape.h % 2 == 1, x.shape.w % 2 == 1);
        let (value, argmax) = kernels::max_pool2_forward(x);
        let requires = self.requires(input);
        self.push(value, requires, Op::MaxPool2 { input, argmax, padded })
    }

    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output extents must be >= 1"));
        }
        let value = kernels::bilinear_resize_forward(&self.nodes[input.0].value, out_h, out_w);
        let requires = self.requires(input);
        Ok(self.push(value, requires, Op::BilinearResize { input }))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let mut value = TensorData::zeros(x.shape);
        let src = &x.data;
        for_each_chunk(&mut value.data, x.shape.h * x.shape.w, |i, chunk| {
            let base = i * x.shape.h * x.shape.w;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = T::ONE / (T::ONE + (-src[base + j]).exp());
            }
        });
        let requires = self.requires(input);
        self.push(value, requires, Op::Sigmoid { input })
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        if x.shape.c < 2 {
            return Err(Error::shape(
                "softmax_channels",
                format!("needs >= 2 channels, got {}", x.shape.c),
            ));
        }
        let value = kernels::softmax_channels_forward(x);
        let requires = self.requires(input);
        Ok(self.push(value, requires, Op::SoftmaxChannels { input }))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let first = self.shape(inputs[0]);
        let mut c_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if !s.same_spatial(&first) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial/batch mismatch: {} vs {}", s, first),
                ));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut value = TensorData::zeros(out_shape);
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &id in inputs {
                let src = &self.nodes[id.0].value;
                let c = src.shape.c;
                let src_base = src.shape.at(n, 0, 0, 0);
                let dst_base = out_shape.at(n, c_off, 0, 0);
                value.data[dst_base..dst_base + c * plane]
                    .copy_from_slice(&src.data[src_base..src_base + c * plane]);
                c_off += c;
            }
        }
        let requires = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(
            value,
            requires,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, input: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let s = self.shape(input);
        if from >= to || to > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {}..{} invalid for {} channels", from, to, s.c),
            ));
        }
        let out_shape = Shape::new(s.n, to - from, s.h, s.w);
        let mut value = TensorData::zeros(out_shape);
        let plane = s.h * s.w;
        let src = &self.nodes[input.0].value;
        for n in 0..s.n {
            let src_base = s.at(n, from, 0, 0);
            let dst_base = out_shape.at(n, 0, 0, 0);
            value.data[dst_base..dst_base + (to - from) * plane]
                .copy_from_slice(&src.data[src_base..src_base + (to - from) * plane]);
        }
        let requires = self.requires(input);
        Ok(self.push(value, requires, Op::SliceChannels { input, from }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_shape_check("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = TensorData::zeros(av.shape);
        let (ad, bd) = (&av.data, &bv.data);
        let plane = av.shape.h * av.shape.w;
        for_each_chunk(&mut value.data, plane, |i, chunk| {
            let base = i * plane;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = ad[base + j] + bd[base + j];
            }
        });
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_shape_check("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = TensorData::zeros(av.shape);
        let (ad, bd) = (&av.data, &bv.data);
        let plane = av.shape.h * av.shape.w;
        for_each_chunk(&mut value.data, plane, |i, chunk| {
            let base = i * plane;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = ad[base + j] * bd[base + j];
            }
        });
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Mul { a, b }))
    }

    /// y = scale * x + shift, elementwise with scalar coefficients.
    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> NodeId {
        let (sc, sh) = (T::from_f64(scale), T::from_f64(shift));
        let x = &self.nodes[input.0].value;
        let mut value = TensorData::zeros(x.shape);
        let src = &x.data;
        let plane = x.shape.h * x.shape.w;
        for_each_chunk(&mut value.data, plane, |i, chunk| {
            let base = i * plane;
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = sc * src[base + j] + sh;
            }
        });
        let requires = self.requires(input);
        self.push(value, requires, Op::Affine { input, scale, shift })
    }

    /// Tiles the channel axis `reps` times: (n, c, h, w) -> (n, c*reps, h, w).
    pub fn repeat_channels(&mut self, input: NodeId, reps: usize) -> NodeId {
        let s = self.shape(input);
        let out_shape = Shape::new(s.n, s.c * reps, s.h, s.w);
        let mut value = TensorData::zeros(out_shape);
        let block = s.c * s.h * s.w;
        let src = &self.nodes[input.0].value;
        for n in 0..s.n {
            for r in 0..reps {
                let dst = out_shape.at(n, r * s.c, 0, 0);
                value.data[dst..dst + block].copy_from_slice(&src.data[n * block..(n + 1) * block]);
            }
        }
        let requires = self.requires(input);
        self.push(value, requires, Op::RepeatChannels { input, reps })
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let total: T = x.data.iter().copied().sum();
        let value = TensorData::new(Shape::scalar(), vec![total]).expect("scalar");
        let requires = self.requires(input);
        self.push(value, requires, Op::SumAll { input })
    }

    /// Mean absolute error over all elements; subgradient 0 at exact zeros.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.elementwise_shape_check("l1_loss", pred, target)?;
        let (pv, tv) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        let total: T = pv.data.iter().zip(&tv.data).map(|(p, t)| (*p - *t).abs()).sum();
        let mean = total / T::from_f64(pv.shape.len() as f64);
        let value = TensorData::new(Shape::scalar(), vec![mean]).expect("scalar");
        let requires = self.requires(pred) || self.requires(target);
        Ok(self.push(value, requires, Op::L1Loss { pred, target }))
    }

    fn elementwise_shape_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{} vs {}", sa, sb)));
        }
        Ok(())
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every reachable node that requires a
    /// gradient ends up with its total (summed) gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1x1x1, got {}", self.shape(loss)),
            ));
        }
        self.nodes[loss.0].grad = Some(TensorData::full(Shape::scalar(), T::ONE));
        for i in (0..self.nodes.len()).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.requires || node.grad.is_none() {
                continue;
            }
            let gout = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if head[input.0].requires {
                        let g = kernels::conv2d_backward_input(
                            gout,
                            &head[weight.0].value,
                            head[input.0].value.shape,
                            *stride,
                            *padding,
                        );
                        accum(&mut head[input.0], g);
                    }
                    if head[weight.0].requires {
                        let g = kernels::conv2d_backward_weight(
                            gout,
                            &head[input.0].value,
                            head[weight.0].value.shape,
                            *stride,
                            *padding,
                        );
                        accum(&mut head[weight.0], g);
                    }
                    if head[bias.0].requires {
                        let g = kernels::conv2d_backward_bias(gout);
                        accum(&mut head[bias.0], g);
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let input = *input;
                    if head[input.0].requires {
                        let s = T::from_f64(*slope);
                        let x = &head[input.0].value;
                        let mut g = TensorData::zeros(x.shape);
                        for ((gv, xv), go) in g.data.iter_mut().zip(&x.data).zip(&gout.data) {
                            *gv = if *xv > T::ZERO { *go } else { s * *go };
                        }
                        accum(&mut head[input.0], g);
                    }
                }
                Op::MaxPool2 { input, argmax, .. } => {
                    let input = *input;
                    if head[input.0].requires {
                        let g = kernels::max_pool2_backward(gout, argmax, head[input.0].value.shape);
                        accum(&mut head[input.0], g);
                    }
                }
                Op::BilinearResize { input } => {
                    let input = *input;
                    if head[input.0].requires {
                        let g = kernels::bilinear_resize_backward(gout, head[input.0].value.shape);
                        accum(&mut head[input.0], g);
                    }
                }
                Op::Sigmoid { input } => {
                    let input = *input;
                    if head[input.0].requires {
                        let y = &node.value;
                        let mut g = TensorData::zeros(y.shape);
                        for ((gv, yv), go) in g.data.iter_mut().zip(&y.data).zip(&gout.data) {
                            *gv = *go * *yv * (T::ONE - *yv);
                        }
                        accum(&mut head[input.0], g);
                    }
                }
                Op::SoftmaxChannels { input } => {
                    let input = *input;
                    if head[input.0].requires {
                        let g = kernels::softmax_channels_backward(gout, &node.value);
                        accum(&mut head[input.0], g);
                    }
                }
                Op::ConcatChannels { inputs } => {
                    let plane = node.value.shape.h * node.value.shape.w;
                    let mut c_off = 0;
                    for &src in inputs.clone().iter() {
                        let s = head[src.0].value.shape;
                        if head[src.0].requires {
                            let mut g = TensorData::zeros(s);
                            for n in 0..s.n {
                                let from = node.value.shape.at(n, c_off, 0, 0);
                                let to = g.shape.at(n, 0, 0, 0);
                                g.data[to..to + s.c * plane]
                                    .copy_from_slice(&gout.data[from..from + s.c * plane]);
                            }
                            accum(&mut head[src.0], g);
                        }
                        c_off += s.c;
                    }
                }
                Op::SliceChannels { input, from } => {
                    let (input, from) = (*input, *from);
                    if head[input.0].requires {
                        let s = head[input.0].value.shape;
                        let plane = s.h * s.w;
                        let c_out = node.value.shape.c;
                        let mut g = TensorData::zeros(s);
                        for n in 0..s.n {
                            let dst = s.at(n, from, 0, 0);
                            let src = node.value.shape.at(n, 0, 0, 0);
                            g.data[dst..dst + c_out * plane]
                                .copy_from_slice(&gout.data[src..src + c_out * plane]);
                        }
                        accum(&mut head[input.0], g);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if head[a.0].requires {
                        accum(&mut head[a.0], gout.clone());
                    }
                    if head[b.0].requires {
                        accum(&mut head[b.0], gout.clone());
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if head[a.0].requires {
                        let bv = &head[b.0].value;
                        let mut g = TensorData::zeros(bv.shape);
                        for ((gv, go), ov) in g.data.iter_mut().zip(&gout.data).zip(&bv.data) {
                            *gv = *go * *ov;
                        }
                        accum(&mut head[a.0], g);
                    }
                    if head[b.0].requires {
                        let av = &head[a.0].value;
                        let mut g = TensorData::zeros(av.shape);
                        for ((gv, go), ov) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                            *gv = *go * *ov;
                        }
                        accum(&mut head[b.0], g);
                    }
                }
                Op::Affine { input, scale, .. } => {
                    let input = *input;
                    if head[input.0].requires {
                        let s = T::from_f64(*scale);
                        let mut g = gout.clone();
                        for v in g.data.iter_mut() {
                            *v = *v * s;
                        }
                        accum(&mut head[input.0], g);
                    }
                }
                Op::RepeatChannels { input, reps } => {
                    let (input, reps) = (*input, *reps);
                    if head[input.0].requires {
                        let s = head[input.0].value.shape;
                        let block = s.c * s.h * s.w;
                        let mut g = TensorData::zeros(s);
                        for n in 0..s.n {
                            for r in 0..reps {
                                let src = node.value.shape.at(n, r * s.c, 0, 0);
                                for j in 0..block {
                                    g.data[n * block + j] += gout.data[src + j];
                                }
                            }
                        }
                        accum(&mut head[input.0], g);
                    }
                }
                Op::SumAll { input } => {
                    let input = *input;
                    if head[input.0].requires {
                        let g = TensorData::full(head[input.0].value.shape, gout.data[0]);
                        accum(&mut head[input.0], g);
                    }
                }
                Op::L1Loss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let scale = gout.data[0] / T::from_f64(head[pred.0].value.shape.len() as f64);
                    let signs: Vec<T> = head[pred.0]
                        .value
                        .data
                        .iter()
                        .zip(&head[target.0].value.data)
                        .map(|(p, t)| {
                            if *p > *t {
                                scale
                            } else if *p < *t {
                                -scale
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    if head[pred.0].requires {
                        let g = TensorData::new(head[pred.0].value.shape, signs.clone()).unwrap();
                        accum(&mut head[pred.0], g);
                    }
                    if head[target.0].requires {
                        let mut g = TensorData::new(head[target.0].value.shape, signs).unwrap();
                        for v in g.data.iter_mut() {
                            *v = -*v;
                        }
                        accum(&mut head[target.0], g);
                    }
                }
                Op::DeformableWarp {
                    feature,
                    offsets,
                    modulation,
                    weight,
                } => {
                    let (feature, offsets, modulation, weight) = (*feature, *offsets, *modulation, *weight);
                    let grads = warp_kernels::deformable_warp_backward(
                        gout,
                        &head[feature.0].value,
                        &head[offsets.0].value,
                        &head[modulation.0].value,
                        &head[weight.0].value,
                        head[feature.0].requires,
                        head[offsets.0].requires,
                        head[modulation.0].requires,
                        head[weight.0].requires,
                    );
                    if let Some(g) = grads.feature {
                        accum(&mut head[feature.0], g);
                    }
                    if let Some(g) = grads.offsets {
                        accum(&mut head[offsets.0], g);
                    }
                    if let Some(g) = grads.modulation {
                        accum(&mut head[modulation.0], g);
                    }
                    if let Some(g) = grads.weight {
                        accum(&mut head[weight.0], g);
                    }
                }
                Op::FlowWarp { feature, flow } => {
                    let (feature, flow) = (*feature, *flow);
                    let (gf, gv) = warp_kernels::flow_warp_backward(
                        gout,
                        &head[feature.0].value,
                        &head[flow.0].value,
                        head[feature.0].requires,
                        head[flow.0].requires,
                    );
                    if let Some(g) = gf {
                        accum(&mut head[feature.0], g);
                    }
                    if let Some(g) = gv {
                        accum(&mut head[flow.0], g);
                    }
                }
                Op::CostVolume { left, right, radius } => {
                    let (left, right, radius) = (*left, *right, *radius);
                    let (gl, gr) = warp_kernels::cost_volume_backward(
                        gout,
                        &head[left.0].value,
                        &head[right.0].value,
                        radius,
                        head[left.0].requires,
                        head[right.0].requires,
                    );
                    if let Some(g) = gl {
                        accum(&mut head[left.0], g);
                    }
                    if let Some(g) = gr {
                        accum(&mut head[right.0], g);
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn accum<T: Scalar>(node: &mut Node<T>, g: TensorData<T>) {
    debug_assert_eq!(node.value.shape, g.shape);
    match &mut node.grad {
        None => node.grad = Some(g),
        Some(dst) => {
            for (d, s) in dst.data.iter_mut().zip(g.data) {
                *d += s;
            }
        }
    }
}
