//! A small reverse-mode autodiff graph over `(C, D, H, W)` f32 tensors,
//! sized for the ops the segmentation networks need: 3D convolution
//! (lowered to GEMM), stride-2 transposed convolution, 2x max pooling
//! and upsampling, instance/group normalization, ReLU/PReLU, channel
//! dropout, channel concat/add and channel softmax.
//!
//! A graph is built per forward pass against a borrowed [`ParamSet`];
//! `backward` folds gradients node by node in reverse creation order and
//! returns one gradient per parameter. Everything is deterministic:
//! iteration orders are fixed and dropout draws come from a caller-owned
//! stream.

pub mod kernels;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use kernels as kn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f32>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Concatenates all parameters into one flat buffer (creation order).
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_len());
        for v in &self.values {
            out.extend(v.iter());
        }
        out
    }

    /// Loads a flat buffer produced by [`ParamSet::flatten`] on an
    /// identically shaped set.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Format(format!(
                "parameter blob has {} scalars, network needs {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut off = 0usize;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        Ok(())
    }
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    a
}

/// Gradients per parameter, indexed by [`ParamId`].
#[derive(Debug)]
pub struct ParamGrads {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl ParamGrads {
    fn new(n: usize) -> Self {
        ParamGrads {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.grads[id.0].as_ref()
    }

    /// Sums another gradient set into this one (fixed parameter order).
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (dst, src) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => *d += s,
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

enum Op {
    Input,
    Conv3d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Option<Array2<f32>>,
    },
    ConvTranspose2 {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleTrilinear2 {
        x: NodeId,
    },
    UpsampleNearest2 {
        x: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Array4<f32>,
        inv_std: Vec<f32>,
    },
    GroupNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        xhat: Array4<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        x: NodeId,
    },
    PRelu {
        x: NodeId,
        alpha: ParamId,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        split: usize,
    },
    ChannelDropout {
        x: NodeId,
        mask: Vec<f32>,
    },
}

struct Node {
    value: Array4<f32>,
    op: Op,
}

const NORM_EPS: f32 = 1e-5;

/// One forward pass under construction (or finished).
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    /// Whether backward-pass caches (im2col matrices) are kept.
    record: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet, record: bool) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            record,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array4<f32> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array4<f32>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array4<f32>) -> NodeId {
        // Kernels index raw slices; force standard layout at the boundary.
        let value = if value.as_slice().is_some() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, Op::Input)
    }

    fn param4(&self, id: ParamId) -> &ArrayD<f32> {
        self.params.value(id)
    }

    /// 3D convolution; weight shape (Cout, Cin, k, k, k), optional bias
    /// (Cout). "Same" size with k=3, pad=1, stride=1.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let wv = self.param4(w);
        let wdim = wv.shape().to_vec();
        let (cout, cin, k) = (wdim[0], wdim[1], wdim[2]);
        let xv = &self.nodes[x.0].value;
        let (xc, d, h, ww) = xv.dim();
        if xc != cin {
            return Err(Error::Shape(format!(
                "conv3d: input has {xc} channels, weight expects {cin}"
            )));
        }
        if d + 2 * pad < k || h + 2 * pad < k || ww + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv3d: input {d}x{h}x{ww} smaller than kernel {k}"
            )));
        }
        let cols = kn::im2col(&xv.view(), k, stride, pad);
        let w2 = wv
            .view()
            .into_shape_with_order((cout, cin * k * k * k))
            .expect("weight layout");
        let mut y2 = w2.dot(&cols);
        if let Some(bid) = b {
            let bv = self.param4(bid);
            for (mut row, &bias) in y2.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        let (od, oh, ow) = (
            kn::conv_out_len(d, k, stride, pad),
            kn::conv_out_len(h, k, stride, pad),
            kn::conv_out_len(ww, k, stride, pad),
        );
        let y = y2
            .into_shape_with_order((cout, od, oh, ow))
            .expect("conv output layout");
        let cols = if self.record { Some(cols) } else { None };
        Ok(self.push(
            y,
            Op::Conv3d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Transposed convolution with kernel 2, stride 2 (x2 upsampling).
    /// Weight shape (Cin, Cout, 2, 2, 2).
    pub fn conv_transpose2(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let wv = self.param4(w);
        let wdim = wv.shape().to_vec();
        let (cin, cout) = (wdim[0], wdim[1]);
        let xv = &self.nodes[x.0].value;
        if xv.dim().0 != cin {
            return Err(Error::Shape(format!(
                "conv_transpose2: input has {} channels, weight expects {cin}",
                xv.dim().0
            )));
        }
        let w2t = lower_transpose_weight(wv, cin, cout);
        let mut y = kn::conv_transpose2(&xv.view(), &w2t, cout);
        if let Some(bid) = b {
            let bv = self.param4(bid);
            for (mut ch, &bias) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                ch.mapv_inplace(|v| v + bias);
            }
        }
        Ok(self.push(y, Op::ConvTranspose2 { x, w, b }))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (_, d, h, w) = xv.dim();
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2: extent {d}x{h}x{w} not even"
            )));
        }
        let (y, argmax) = kn::maxpool2(&xv.view());
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample_trilinear2(&mut self, x: NodeId) -> NodeId {
        let y = kn::upsample_trilinear2(&self.nodes[x.0].value.view());
        self.push(y, Op::UpsampleTrilinear2 { x })
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let y = kn::upsample_nearest2(&self.nodes[x.0].value.view());
        self.push(y, Op::UpsampleNearest2 { x })
    }

    /// Instance normalization: per-channel stats over the spatial extent,
    /// learned per-channel affine.
    pub fn instance_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (c, d, h, w) = xv.dim();
        let n = (d * h * w) as f64;
        let mut xhat = Array4::<f32>::zeros(xv.dim());
        let mut inv_std = vec![0.0f32; c];
        let gv = self.param4(gamma).clone();
        let bv = self.param4(beta).clone();
        let mut y = Array4::<f32>::zeros(xv.dim());
        for ci in 0..c {
            let ch = xv.index_axis(Axis(0), ci);
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch
                .iter()
                .map(|&v| {
                    let dlt = v as f64 - mean;
                    dlt * dlt
                })
                .sum::<f64>()
                / n;
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[ci] = istd as f32;
            let (g, b) = (gv[[ci]], bv[[ci]]);
            let mut xh = xhat.index_axis_mut(Axis(0), ci);
            let mut yc = y.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut xh)
                .and(&mut yc)
                .and(&ch)
                .for_each(|xh, yv, &xv| {
                    let v = ((xv as f64 - mean) * istd) as f32;
                    *xh = v;
                    *yv = g * v + b;
                });
        }
        self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Group normalization over `groups` channel groups.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (c, d, h, w) = xv.dim();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        let cpg = c / groups;
        let n = (cpg * d * h * w) as f64;
        let mut xhat = Array4::<f32>::zeros(xv.dim());
        let mut inv_std = vec![0.0f32; groups];
        let gv = self.param4(gamma).clone();
        let bv = self.param4(beta).clone();
        let mut y = Array4::<f32>::zeros(xv.dim());
        for g in 0..groups {
            let span = ndarray::s![g * cpg..(g + 1) * cpg, .., .., ..];
            let block = xv.slice(span);
            let mean = block.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = block
                .iter()
                .map(|&v| {
                    let dlt = v as f64 - mean;
                    dlt * dlt
                })
                .sum::<f64>()
                / n;
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[g] = istd as f32;
            for ci in g * cpg..(g + 1) * cpg {
                let ch = xv.index_axis(Axis(0), ci);
                let (ga, be) = (gv[[ci]], bv[[ci]]);
                let mut xh = xhat.index_axis_mut(Axis(0), ci);
                let mut yc = y.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut xh)
                    .and(&mut yc)
                    .and(&ch)
                    .for_each(|xh, yv, &xv| {
                        let v = ((xv as f64 - mean) * istd) as f32;
                        *xh = v;
                        *yv = ga * v + be;
                    });
            }
        }
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    /// PReLU with one learned slope per channel.
    pub fn prelu(&mut self, x: NodeId, alpha: ParamId) -> NodeId {
        let av = self.param4(alpha).clone();
        let xv = &self.nodes[x.0].value;
        let mut y = xv.clone();
        for (ci, mut ch) in y.axis_iter_mut(Axis(0)).enumerate() {
            let a = av[[ci]];
            ch.mapv_inplace(|v| if v > 0.0 { v } else { a * v });
        }
        self.push(y, Op::PRelu { x, alpha })
    }

    /// Softmax over the channel axis, per voxel.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let y = softmax_channels_of(xv);
        self.push(y, Op::SoftmaxChannels { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dim() != bv.dim() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let y = av + bv;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ca, da, ha, wa) = av.dim();
        let (_, db, hb, wb) = bv.dim();
        if (da, ha, wa) != (db, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: spatial {:?} vs {:?}",
                (da, ha, wa),
                (db, hb, wb)
            )));
        }
        let y = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .expect("checked shapes");
        Ok(self.push(y, Op::ConcatChannels { a, b, split: ca }))
    }

    /// Spatial channel dropout: each channel is zeroed with probability
    /// `p`, survivors scaled by 1/(1-p).
    pub fn channel_dropout(&mut self, x: NodeId, p: f32, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p {p} outside [0, 1)")));
        }
        let xv = &self.nodes[x.0].value;
        let c = xv.dim().0;
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..c)
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep_scale })
            .collect();
        let mut y = xv.clone();
        for (ci, mut ch) in y.axis_iter_mut(Axis(0)).enumerate() {
            let m = mask[ci];
            ch.mapv_inplace(|v| v * m);
        }
        Ok(self.push(y, Op::ChannelDropout { x, mask }))
    }

    /// Reverse-mode sweep from `from`, seeded with dL/d(from).
    /// Returns one gradient per parameter.
    pub fn backward(&mut self, from: NodeId, seed: Array4<f32>) -> Result<ParamGrads> {
        if !self.record {
            return Err(Error::Config(
                "backward requires a graph built with record = true".into(),
            ));
        }
        if seed.dim() != self.nodes[from.0].value.dim() {
            return Err(Error::Shape(format!(
                "backward seed {:?} vs node {:?}",
                seed.dim(),
                self.nodes[from.0].value.dim()
            )));
        }
        let mut node_grads: Vec<Option<Array4<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[from.0] = Some(seed);
        let mut pgrads = ParamGrads::new(self.params.len());

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = node_grads[i].take() else {
                continue;
            };
            // Split borrows: node i is inspected while parents receive grads.
            let (op, _value) = {
                let node = &self.nodes[i];
                (&node.op, &node.value)
            };
            match op {
                Op::Input => {}
                Op::Conv3d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => {
                    let (x, w, b, k, stride, pad) = (*x, *w, *b, *k, *stride, *pad);
                    let xdim = self.nodes[x.0].value.dim();
                    let cols_owned;
                    let cols_ref = match cols {
                        Some(c) => c,
                        None => {
                            cols_owned =
                                kn::im2col(&self.nodes[x.0].value.view(), k, stride, pad);
                            &cols_owned
                        }
                    };
                    let (cout, od, oh, ow) = gy.dim();
                    let gy2 = gy
                        .view()
                        .into_shape_with_order((cout, od * oh * ow))
                        .expect("grad layout");
                    // dW = dY . cols^T
                    let dw2 = gy2.dot(&cols_ref.t());
                    let wshape = self.params.value(w).shape().to_vec();
                    let dw = dw2
                        .into_shape_with_order(IxDyn(&wshape))
                        .expect("weight grad layout");
                    accum_param(&mut pgrads, w, dw);
                    if let Some(bid) = b {
                        let db = gy2.sum_axis(Axis(1));
                        accum_param(&mut pgrads, bid, db.into_dyn());
                    }
                    // dX = col2im(W^T . dY)
                    let cin_k3 = wshape[1] * k * k * k;
                    let w2 = self
                        .params
                        .value(w)
                        .view()
                        .into_shape_with_order((cout, cin_k3))
                        .expect("weight layout");
                    let dcols = w2.t().dot(&gy2);
                    let dx = kn::col2im(&dcols, xdim, k, stride, pad);
                    accum_node(&mut node_grads, x, dx);
                }
                Op::ConvTranspose2 { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xdim = self.nodes[x.0].value.dim();
                    let (cin, d, h, ww) = xdim;
                    let q = d * h * ww;
                    let wv = self.params.value(w);
                    let cout = wv.shape()[1];
                    // Gather output grad into (Cout*8, Q) columns.
                    let dcols = kn::conv_transpose2_gather(&gy.view(), q);
                    // dX = W2 . dcols with W2 (Cin, Cout*8).
                    let w2 = lower_transpose_weight(wv, cin, cout);
                    let dx2 = w2.t().dot(&dcols); // (Cin, Q)
                    let dx = dx2
                        .into_shape_with_order((cin, d, h, ww))
                        .expect("grad layout");
                    accum_node(&mut node_grads, x, dx);
                    // dW2t = dcols . x2^T -> (Cout*8, Cin)
                    let x2 = self.nodes[x.0]
                        .value
                        .view()
                        .into_shape_with_order((cin, q))
                        .expect("input layout");
                    let dw2t = dcols.dot(&x2.t());
                    // Re-fold to (Cin, Cout, 2, 2, 2).
                    let mut dw = ArrayD::<f32>::zeros(IxDyn(&[cin, cout, 2, 2, 2]));
                    for ci in 0..cin {
                        for co in 0..cout {
                            for kk in 0..8 {
                                dw[[ci, co, kk / 4, (kk / 2) % 2, kk % 2]] =
                                    dw2t[[co * 8 + kk, ci]];
                            }
                        }
                    }
                    accum_param(&mut pgrads, w, dw);
                    if let Some(bid) = b {
                        let mut db = Array1::<f32>::zeros(cout);
                        for (ci, ch) in gy.axis_iter(Axis(0)).enumerate() {
                            db[ci] = ch.sum();
                        }
                        accum_param(&mut pgrads, bid, db.into_dyn());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let x = *x;
                    let mut dx = Array4::<f32>::zeros(self.nodes[x.0].value.dim());
                    let dxs = dx.as_slice_mut().unwrap();
                    for (g, &a) in gy.iter().zip(argmax.iter()) {
                        dxs[a as usize] += *g;
                    }
                    accum_node(&mut node_grads, x, dx);
                }
                Op::UpsampleTrilinear2 { x } => {
                    let x = *x;
                    let dx = kn::upsample_trilinear2_backward(
                        &gy.view(),
                        self.nodes[x.0].value.dim(),
                    );
                    accum_node(&mut node_grads, x, dx);
                }
                Op::UpsampleNearest2 { x } => {
                    let x = *x;
                    let dx =
                        kn::upsample_nearest2_backward(&gy.view(), self.nodes[x.0].value.dim());
                    accum_node(&mut node_grads, x, dx);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (c, d, h, w) = xhat.dim();
                    let n = (d * h * w) as f64;
                    let gv = self.params.value(gamma);
                    let mut dx = Array4::<f32>::zeros(xhat.dim());
                    let mut dgamma = Array1::<f32>::zeros(c);
                    let mut dbeta = Array1::<f32>::zeros(c);
                    for ci in 0..c {
                        let gych = gy.index_axis(Axis(0), ci);
                        let xh = xhat.index_axis(Axis(0), ci);
                        let g = gv[[ci]];
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        let mut dg = 0.0f64;
                        let mut db = 0.0f64;
                        for (&gyv, &xhv) in gych.iter().zip(xh.iter()) {
                            let dxhat = (gyv * g) as f64;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhv as f64;
                            dg += (gyv * xhv) as f64;
                            db += gyv as f64;
                        }
                        dgamma[ci] = dg as f32;
                        dbeta[ci] = db as f32;
                        let m1 = sum_dxhat / n;
                        let m2 = sum_dxhat_xhat / n;
                        let istd = inv_std[ci] as f64;
                        let mut dxch = dx.index_axis_mut(Axis(0), ci);
                        ndarray::Zip::from(&mut dxch)
                            .and(&gych)
                            .and(&xh)
                            .for_each(|dxv, &gyv, &xhv| {
                                let dxhat = (gyv * g) as f64;
                                *dxv = ((dxhat - m1 - xhv as f64 * m2) * istd) as f32;
                            });
                    }
                    accum_param(&mut pgrads, gamma, dgamma.into_dyn());
                    accum_param(&mut pgrads, beta, dbeta.into_dyn());
                    accum_node(&mut node_grads, x, dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let (c, d, h, w) = xhat.dim();
                    let cpg = c / groups;
                    let n = (cpg * d * h * w) as f64;
                    let gv = self.params.value(gamma);
                    let mut dx = Array4::<f32>::zeros(xhat.dim());
                    let mut dgamma = Array1::<f32>::zeros(c);
                    let mut dbeta = Array1::<f32>::zeros(c);
                    for g in 0..groups {
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for ci in g * cpg..(g + 1) * cpg {
                            let gych = gy.index_axis(Axis(0), ci);
                            let xh = xhat.index_axis(Axis(0), ci);
                            let ga = gv[[ci]];
                            let mut dg = 0.0f64;
                            let mut db = 0.0f64;
                            for (&gyv, &xhv) in gych.iter().zip(xh.iter()) {
                                let dxhat = (gyv * ga) as f64;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhv as f64;
                                dg += (gyv * xhv) as f64;
                                db += gyv as f64;
                            }
                            dgamma[ci] = dg as f32;
                            dbeta[ci] = db as f32;
                        }
                        let m1 = sum_dxhat / n;
                        let m2 = sum_dxhat_xhat / n;
                        let istd = inv_std[g] as f64;
                        for ci in g * cpg..(g + 1) * cpg {
                            let gych = gy.index_axis(Axis(0), ci);
                            let xh = xhat.index_axis(Axis(0), ci);
                            let ga = gv[[ci]];
                            let mut dxch = dx.index_axis_mut(Axis(0), ci);
                            ndarray::Zip::from(&mut dxch)
                                .and(&gych)
                                .and(&xh)
                                .for_each(|dxv, &gyv, &xhv| {
                                    let dxhat = (gyv * ga) as f64;
                                    *dxv = ((dxhat - m1 - xhv as f64 * m2) * istd) as f32;
                                });
                        }
                    }
                    accum_param(&mut pgrads, gamma, dgamma.into_dyn());
                    accum_param(&mut pgrads, beta, dbeta.into_dyn());
                    accum_node(&mut node_grads, x, dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = &self.nodes[x.0].value;
                    let mut dx = gy.clone();
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accum_node(&mut node_grads, x, dx);
                }
                Op::PRelu { x, alpha } => {
                    let (x, alpha) = (*x, *alpha);
                    let xv = &self.nodes[x.0].value;
                    let av = self.params.value(alpha);
                    let c = xv.dim().0;
                    let mut dx = Array4::<f32>::zeros(xv.dim());
                    let mut dalpha = Array1::<f32>::zeros(c);
                    for ci in 0..c {
                        let a = av[[ci]];
                        let gych = gy.index_axis(Axis(0), ci);
                        let xch = xv.index_axis(Axis(0), ci);
                        let mut da = 0.0f64;
                        let mut dxch = dx.index_axis_mut(Axis(0), ci);
                        ndarray::Zip::from(&mut dxch)
                            .and(&gych)
                            .and(&xch)
                            .for_each(|dxv, &g, &v| {
                                if v > 0.0 {
                                    *dxv = g;
                                } else {
                                    *dxv = g * a;
                                    da += (g * v) as f64;
                                }
                            });
                        dalpha[ci] = da as f32;
                    }
                    accum_param(&mut pgrads, alpha, dalpha.into_dyn());
                    accum_node(&mut node_grads, x, dx);
                }
                Op::SoftmaxChannels { x } => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let (c, d, h, w) = y.dim();
                    let mut dx = Array4::<f32>::zeros(y.dim());
                    for di in 0..d {
                        for hi in 0..h {
                            for wi in 0..w {
                                let mut dot = 0.0f64;
                                for ci in 0..c {
                                    dot +=
                                        (gy[[ci, di, hi, wi]] * y[[ci, di, hi, wi]]) as f64;
                                }
                                for ci in 0..c {
                                    let yv = y[[ci, di, hi, wi]];
                                    dx[[ci, di, hi, wi]] =
                                        yv * (gy[[ci, di, hi, wi]] - dot as f32);
                                }
                            }
                        }
                    }
                    accum_node(&mut node_grads, x, dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accum_node(&mut node_grads, a, gy.clone());
                    accum_node(&mut node_grads, b, gy);
                }
                Op::ConcatChannels { a, b, split } => {
                    let (a, b, split) = (*a, *b, *split);
                    let ga = gy.slice(ndarray::s![..split, .., .., ..]).to_owned();
                    let gb = gy.slice(ndarray::s![split.., .., .., ..]).to_owned();
                    accum_node(&mut node_grads, a, ga);
                    accum_node(&mut node_grads, b, gb);
                }
                Op::ChannelDropout { x, mask } => {
                    let x = *x;
                    let mut dx = gy;
                    for (ci, mut ch) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let m = mask[ci];
                        ch.mapv_inplace(|v| v * m);
                    }
                    accum_node(&mut node_grads, x, dx);
                }
            }
        }
        Ok(pgrads)
    }
}

fn accum_node(grads: &mut [Option<Array4<f32>>], id: NodeId, delta: Array4<f32>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn accum_param(pgrads: &mut ParamGrads, id: ParamId, delta: ArrayD<f32>) {
    match &mut pgrads.grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Lowers (Cin, Cout, 2, 2, 2) transposed-conv weights to (Cout*8, Cin).
fn lower_transpose_weight(wv: &ArrayD<f32>, cin: usize, cout: usize) -> Array2<f32> {
    let mut w2t = Array2::<f32>::zeros((cout * 8, cin));
    let w5 = wv.view().into_dimensionality::<ndarray::Ix5>().unwrap();
    for ci in 0..cin {
        for co in 0..cout {
            for kk in 0..8 {
                w2t[[co * 8 + kk, ci]] = w5[[ci, co, kk / 4, (kk / 2) % 2, kk % 2]];
            }
        }
    }
    w2t
}

/// Per-voxel softmax over the channel axis of a value tensor (no graph).
pub fn softmax_channels_of(x: &Array4<f32>) -> Array4<f32> {
    let (c, d, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros(x.dim());
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let mut m = f32::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(x[[ci, di, hi, wi]]);
                }
                let mut sum = 0.0f32;
                for ci in 0..c {
                    let e = (x[[ci, di, hi, wi]] - m).exp();
                    y[[ci, di, hi, wi]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    y[[ci, di, hi, wi]] /= sum;
                }
            }
        }
    }
    y
}

/// Deterministic per-draw rng used by dropout and init.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Converts an f32 graph tensor to an f64 dynamic array (loss boundary).
pub fn to_f64(x: &Array4<f32>) -> ArrayD<f64> {
    x.mapv(|v| v as f64).into_dyn()
}

/// Converts an f64 loss gradient back to the f32 graph domain.
pub fn to_f32_4(x: &ArrayD<f64>) -> Result<Array4<f32>> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Shape(format!("expected 4-d gradient: {e}")))?;
    Ok(x4.mapv(|v| v as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = seeded_rng(seed);
        let mut a = Array4::<f32>::zeros(shape);
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        a
    }

    /// Numeric check of d(sum(f(x) * probe))/d(param) for every param
    /// scalar, against the graph's backward.
    fn check_param_gradients<F>(params: &mut ParamSet, x: &Array4<f32>, forward: F, tol: f32)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        // Fixed probe makes the scalar objective sensitive to every output.
        let probe = {
            let mut g = Graph::new(params, true);
            let xin = g.input(x.clone());
            let out = forward(&mut g, xin);
            random4(g.value(out).dim(), 777)
        };
        let objective = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps, false);
            let xin = g.input(x.clone());
            let out = forward(&mut g, xin);
            g.value(out)
                .iter()
                .zip(probe.iter())
                .map(|(&a, &b)| (a * b) as f64)
                .sum()
        };
        // Analytic gradients.
        let analytic = {
            let mut g = Graph::new(params, true);
            let xin = g.input(x.clone());
            let out = forward(&mut g, xin);
            g.backward(out, probe.clone()).unwrap()
        };
        let h = 3e-3f32;
        for pid in 0..params.len() {
            let n = params.value(ParamId(pid)).len();
            for idx in 0..n {
                let orig = params.value(ParamId(pid)).as_slice().unwrap()[idx];
                params.value_mut(ParamId(pid)).as_slice_mut().unwrap()[idx] = orig + h;
                let up = objective(params);
                params.value_mut(ParamId(pid)).as_slice_mut().unwrap()[idx] = orig - h;
                let down = objective(params);
                params.value_mut(ParamId(pid)).as_slice_mut().unwrap()[idx] = orig;
                let numeric = ((up - down) / (2.0 * h as f64)) as f32;
                let got = analytic
                    .get(ParamId(pid))
                    .map(|g| g.as_slice().unwrap()[idx])
                    .unwrap_or(0.0);
                let scale = numeric.abs().max(got.abs()).max(1.0);
                assert!(
                    (numeric - got).abs() / scale < tol,
                    "param {pid}[{idx}]: numeric {numeric} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = seeded_rng(1);
        let mut params = ParamSet::new();
        let w = params.add("w", he_uniform(&[3, 2, 3, 3, 3], 2 * 27, &mut rng));
        let b = params.add("b", ArrayD::zeros(IxDyn(&[3])));
        let x = random4((2, 4, 4, 4), 2);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| g.conv3d(xin, w, Some(b), 1, 1).unwrap(),
            2e-2,
        );
    }

    #[test]
    fn strided_conv_gradients_match() {
        let mut rng = seeded_rng(3);
        let mut params = ParamSet::new();
        let w = params.add("w", he_uniform(&[4, 2, 2, 2, 2], 2 * 8, &mut rng));
        let x = random4((2, 4, 4, 4), 4);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| g.conv3d(xin, w, None, 2, 0).unwrap(),
            2e-2,
        );
    }

    #[test]
    fn conv_transpose_gradients_match() {
        let mut rng = seeded_rng(5);
        let mut params = ParamSet::new();
        let w = params.add("w", he_uniform(&[3, 2, 2, 2, 2], 3 * 8, &mut rng));
        let b = params.add("b", ArrayD::zeros(IxDyn(&[2])));
        let x = random4((3, 3, 3, 3), 6);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| g.conv_transpose2(xin, w, Some(b)).unwrap(),
            2e-2,
        );
    }

    #[test]
    fn norm_layer_gradients_match() {
        let mut params = ParamSet::new();
        let gamma = params.add("g", ArrayD::from_elem(IxDyn(&[4]), 1.2f32));
        let beta = params.add("b", ArrayD::from_elem(IxDyn(&[4]), 0.1f32));
        let x = random4((4, 3, 3, 3), 7);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| g.instance_norm(xin, gamma, beta),
            2e-2,
        );
        let mut params2 = ParamSet::new();
        let gamma2 = params2.add("g", ArrayD::from_elem(IxDyn(&[4]), 0.9f32));
        let beta2 = params2.add("b", ArrayD::from_elem(IxDyn(&[4]), -0.2f32));
        check_param_gradients(
            &mut params2,
            &x,
            |g, xin| g.group_norm(xin, gamma2, beta2, 2).unwrap(),
            2e-2,
        );
    }

    #[test]
    fn prelu_and_composite_path_gradients_match() {
        let mut rng = seeded_rng(9);
        let mut params = ParamSet::new();
        let w1 = params.add("w1", he_uniform(&[4, 2, 3, 3, 3], 2 * 27, &mut rng));
        let alpha = params.add("a", ArrayD::from_elem(IxDyn(&[4]), 0.25f32));
        let gamma = params.add("g", ArrayD::from_elem(IxDyn(&[4]), 1.0f32));
        let beta = params.add("b", ArrayD::zeros(IxDyn(&[4])));
        let w2 = params.add("w2", he_uniform(&[2, 4, 1, 1, 1], 4, &mut rng));
        let x = random4((2, 4, 4, 4), 10);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| {
                let c = g.conv3d(xin, w1, None, 1, 1).unwrap();
                let n = g.instance_norm(c, gamma, beta);
                let p = g.prelu(n, alpha);
                let pooled = g.maxpool2(p).unwrap();
                let up = g.upsample_trilinear2(pooled);
                let out = g.conv3d(up, w2, None, 1, 0).unwrap();
                g.softmax_channels(out)
            },
            3e-2,
        );
    }

    #[test]
    fn skip_connection_gradients_match() {
        // No activation at the probe point: finite differences across a
        // ReLU kink are meaningless.
        let mut rng = seeded_rng(11);
        let mut params = ParamSet::new();
        let w1 = params.add("w1", he_uniform(&[3, 3, 3, 3, 3], 3 * 27, &mut rng));
        let w2 = params.add("w2", he_uniform(&[3, 6, 1, 1, 1], 6, &mut rng));
        let x = random4((3, 4, 4, 4), 12);
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| {
                let c = g.conv3d(xin, w1, None, 1, 1).unwrap();
                let summed = g.add(c, xin).unwrap();
                let cat = g.concat_channels(summed, xin).unwrap();
                g.conv3d(cat, w2, None, 1, 0).unwrap()
            },
            2e-2,
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        // The ReLU sits between two convs and its pre-activations must be
        // bounded away from zero, otherwise central differences straddle
        // the kink and say nothing.
        let mut rng = seeded_rng(41);
        let mut x = Array4::<f32>::zeros((2, 3, 3, 3));
        for v in x.iter_mut() {
            let mag = rng.random_range(0.3..1.0f32);
            *v = if rng.random_bool(0.5) { mag } else { -mag };
        }
        let mut params = ParamSet::new();
        // Identity 1x1 conv: pre-activations equal x, which is bounded
        // away from zero by construction.
        let mut ident = ArrayD::<f32>::zeros(IxDyn(&[2, 2, 1, 1, 1]));
        ident[[0, 0, 0, 0, 0]] = 1.0;
        ident[[1, 1, 0, 0, 0]] = 1.0;
        let w1 = params.add("w1", ident);
        let w2 = params.add("w2", he_uniform(&[2, 2, 1, 1, 1], 2, &mut rng));
        check_param_gradients(
            &mut params,
            &x,
            |g, xin| {
                let pre = g.conv3d(xin, w1, None, 1, 0).unwrap();
                let r = g.relu(pre);
                g.conv3d(r, w2, None, 1, 0).unwrap()
            },
            2e-2,
        );
    }

    #[test]
    fn softmax_outputs_normalize() {
        let x = random4((4, 3, 3, 3), 13);
        let params = ParamSet::new();
        let mut g = Graph::new(&params, false);
        let xin = g.input(x);
        let s = g.softmax_channels(xin);
        let y = g.value(s);
        for d in 0..3 {
            for h in 0..3 {
                for w in 0..3 {
                    let sum: f32 = (0..4).map(|c| y[[c, d, h, w]]).sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn dropout_masks_whole_channels_and_scales() {
        let x = Array4::<f32>::from_elem((8, 2, 2, 2), 1.0);
        let params = ParamSet::new();
        let mut g = Graph::new(&params, false);
        let xin = g.input(x);
        let mut rng = seeded_rng(21);
        let d = g.channel_dropout(xin, 0.5, &mut rng).unwrap();
        let y = g.value(d);
        let mut dropped = 0;
        for c in 0..8 {
            let vals: Vec<f32> = y.index_axis(Axis(0), c).iter().cloned().collect();
            assert!(vals.iter().all(|&v| v == vals[0]), "channel not uniform");
            if vals[0] == 0.0 {
                dropped += 1;
            } else {
                assert!((vals[0] - 2.0).abs() < 1e-6, "kept channel scaled by 2");
            }
        }
        assert!(dropped > 0 && dropped < 8, "p=0.5 over 8 channels: {dropped}");
    }

    #[test]
    fn dropout_rejects_bad_p() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params, false);
        let xin = g.input(Array4::zeros((2, 2, 2, 2)));
        let mut rng = seeded_rng(0);
        assert!(g.channel_dropout(xin, 1.0, &mut rng).is_err());
    }

    #[test]
    fn param_flatten_round_trip() {
        let mut rng = seeded_rng(31);
        let mut params = ParamSet::new();
        params.add("a", he_uniform(&[2, 3], 3, &mut rng));
        params.add("b", he_uniform(&[4], 4, &mut rng));
        let flat = params.flatten();
        let mut other = params.clone();
        other.value_mut(ParamId(0)).fill(0.0);
        other.load_flat(&flat).unwrap();
        assert_eq!(other.flatten(), flat);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
