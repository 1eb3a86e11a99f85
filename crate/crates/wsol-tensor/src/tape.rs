//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its result and enough metadata to
//! replay the chain rule. [`Tape::backward`] seeds the scalar loss with 1 and
//! sweeps the nodes in reverse creation order, which is already a
//! topological order. A tape is single-use: the backward pass consumes it
//! and a second backward is rejected.

use crate::error::{Result, TensorError};
use crate::ops::{self, ConvGeom};
use crate::tensor::{bilinear_source, Element, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How the smaller operand of a binary op maps onto the larger one.
/// Only per-channel style broadcasts are supported.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// b holds one value per (batch, channel) of a 4-D a.
    PerImageChannel { spatial: usize },
    /// b holds one value per channel, shared across the batch.
    PerChannel { spatial: usize, channels: usize },
    /// b holds one value per column of a 2-D a.
    Row { cols: usize },
}

impl Broadcast {
    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::PerImageChannel { spatial } => i / spatial,
            Broadcast::PerChannel { spatial, channels } => (i / spatial) % channels,
            Broadcast::Row { cols } => i % cols,
        }
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    let b_numel: usize = b.iter().product();
    if a.len() == 4 {
        let (batch, channels, h, w) = (a[0], a[1], a[2], a[3]);
        let spatial = h * w;
        let per_image = b == [batch, channels, 1, 1] || b == [batch, channels];
        if per_image && b_numel == batch * channels {
            return Some(Broadcast::PerImageChannel { spatial });
        }
        let per_channel = b == [channels] || b == [1, channels, 1, 1] || b == [1, channels];
        if per_channel && b_numel == channels {
            return Some(Broadcast::PerChannel { spatial, channels });
        }
    }
    if a.len() == 2 {
        let cols = a[1];
        if (b == [cols] || b == [1, cols]) && b_numel == cols {
            return Some(Broadcast::Row { cols });
        }
    }
    None
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        batch: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    GlobalAvgPool {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    UpsampleBilinear {
        a: usize,
    },
    UpsampleNearest {
        a: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    MaskedBce {
        pred: usize,
        positive: Vec<T>,
        weight: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Probability clamp used by the masked BCE so `ln` stays finite.
pub const BCE_CLAMP: f64 = 1e-7;

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Records a leaf that does not participate in gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        assert!(!self.consumed, "tape already consumed by backward");
        self.push(value, false, Op::Leaf)
    }

    /// Records a leaf whose gradient will be populated by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        assert!(!self.consumed, "tape already consumed by backward");
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer of `v`, present after a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("grad matches value shape")
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        self.check_open()?;
        // Both ops are commutative; keep the broadcast operand second.
        let (a, b) = if self.nodes[a.0].value.numel() < self.nodes[b.0].value.numel() {
            (b, a)
        } else {
            (a, b)
        };
        let (a_shape, b_shape) = (self.shape(a), self.shape(b));
        let bc = broadcast_kind(a_shape, b_shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: match kind {
                BinKind::Add => "add",
                BinKind::Mul => "mul",
            },
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        })?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data: Vec<T> = match kind {
            BinKind::Add => av
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[bc.map(i)])
                .collect(),
            BinKind::Mul => av
                .iter()
                .enumerate()
                .map(|(i, &x)| x * bv[bc.map(i)])
                .collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Binary { kind, a: a.0, b: b.0, bc }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let value = self.nodes[a.0].value.map(|x| x.max(T::zero()));
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Relu { a: a.0 }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let one = T::one();
        let value = self.nodes[a.0].value.map(|x| one / (one + (-x).exp()));
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Sigmoid { a: a.0 }))
    }

    // ── Convolution and linear algebra ───────────────────────────────

    /// 2-D convolution, NCHW input against an (out_c, in_c, k_h, k_w) kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_open()?;
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernel).to_vec();
        if in_shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d",
                expected: "4-D input (batch, channel, height, width)",
                got: in_shape,
            });
        }
        if k_shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d",
                expected: "4-D kernel (out_c, in_c, k_h, k_w)",
                got: k_shape,
            });
        }
        if in_shape[1] != k_shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (channel count)",
                lhs: in_shape,
                rhs: k_shape,
            });
        }
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (batch, in_c, in_h, in_w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (out_c, k_h, k_w) = (k_shape[0], k_shape[2], k_shape[3]);
        let out_h = (in_h + 2 * pad).checked_sub(k_h).map(|d| d / stride + 1);
        let out_w = (in_w + 2 * pad).checked_sub(k_w).map(|d| d / stride + 1);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(TensorError::EmptyConvOutput {
                    input: in_shape,
                    kernel: k_shape,
                    stride,
                    pad,
                })
            }
        };
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad,
        };

        let img_len = in_c * in_h * in_w;
        let out_len = out_c * out_h * out_w;
        let mut data = vec![T::zero(); batch * out_len];
        let mut patches = vec![T::zero(); geom.patch_rows() * geom.out_pixels()];
        let input_data = self.nodes[input.0].value.data();
        let kernel_data = self.nodes[kernel.0].value.data();
        for b in 0..batch {
            ops::im2col(&input_data[b * img_len..(b + 1) * img_len], &geom, &mut patches);
            ops::matmul_acc(
                kernel_data,
                &patches,
                out_c,
                geom.patch_rows(),
                geom.out_pixels(),
                &mut data[b * out_len..(b + 1) * out_len],
            );
        }
        let value = Tensor::new(vec![batch, out_c, out_h, out_w], data)?;
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
                batch,
            },
        ))
    }

    /// 2-D matrix product (m,k) x (k,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut data = vec![T::zero(); m * n];
        ops::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut data,
        );
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    // ── Pooling, resizing, reshaping ─────────────────────────────────

    /// Spatial mean of a 4-D tensor, output shape (batch, channel, 1, 1).
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "global_avg_pool",
                expected: "4-D input",
                got: shape,
            });
        }
        let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = h * w;
        let inv = T::from_f64(1.0 / spatial as f64);
        let src = self.nodes[a.0].value.data();
        let data: Vec<T> = (0..batch * channels)
            .map(|i| {
                let s: T = src[i * spatial..(i + 1) * spatial].iter().cloned().sum();
                s * inv
            })
            .collect();
        let value = Tensor::new(vec![batch, channels, 1, 1], data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::GlobalAvgPool { a: a.0 }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_open()?;
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { a: a.0 }))
    }

    /// Bilinear upsampling (align-corners-false) of a 4-D tensor.
    /// Shrinking is rejected.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.upsample(a, out_h, out_w, false)
    }

    /// Nearest-neighbor upsampling of a 4-D tensor.
    pub fn upsample_nearest(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.upsample(a, out_h, out_w, true)
    }

    fn upsample(&mut self, a: Var, out_h: usize, out_w: usize, nearest: bool) -> Result<Var> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "upsample",
                expected: "4-D input",
                got: shape,
            });
        }
        let (batch, channels, in_h, in_w) = (shape[0], shape[1], shape[2], shape[3]);
        if out_h < in_h || out_w < in_w {
            return Err(TensorError::DownsampleRequested {
                in_h,
                in_w,
                out_h,
                out_w,
            });
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); batch * channels * out_h * out_w];
        let planes = batch * channels;
        for p in 0..planes {
            let src_plane = &src[p * in_h * in_w..(p + 1) * in_h * in_w];
            let dst_plane = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            if nearest {
                for oy in 0..out_h {
                    let iy = nearest_source(oy, in_h, out_h);
                    for ox in 0..out_w {
                        let ix = nearest_source(ox, in_w, out_w);
                        dst_plane[oy * out_w + ox] = src_plane[iy * in_w + ix];
                    }
                }
            } else {
                let one = T::one();
                for oy in 0..out_h {
                    let (y0, y1, wy) = bilinear_source::<T>(oy, in_h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1, wx) = bilinear_source::<T>(ox, in_w, out_w);
                        dst_plane[oy * out_w + ox] = src_plane[y0 * in_w + x0]
                            * (one - wy)
                            * (one - wx)
                            + src_plane[y0 * in_w + x1] * (one - wy) * wx
                            + src_plane[y1 * in_w + x0] * wy * (one - wx)
                            + src_plane[y1 * in_w + x1] * wy * wx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, out_h, out_w], data)?;
        let rg = self.nodes[a.0].requires_grad;
        let op = if nearest {
            Op::UpsampleNearest { a: a.0 }
        } else {
            Op::UpsampleBilinear { a: a.0 }
        };
        Ok(self.push(value, rg, op))
    }

    /// Concatenates 4-D tensors along the channel dimension.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.check_open()?;
        let first = *inputs.first().ok_or(TensorError::NoInputs {
            op: "concat_channels",
        })?;
        let f_shape = self.shape(first).to_vec();
        if f_shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "concat_channels",
                expected: "4-D inputs",
                got: f_shape,
            });
        }
        let (batch, h, w) = (f_shape[0], f_shape[2], f_shape[3]);
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != batch || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: f_shape,
                    rhs: s.to_vec(),
                });
            }
            total_c += s[1];
        }
        let mut data = vec![T::zero(); batch * total_c * h * w];
        let spatial = h * w;
        for b in 0..batch {
            let mut c_off = 0;
            for &v in inputs {
                let c_i = self.shape(v)[1];
                let src = self.nodes[v.0].value.data();
                let src_slice = &src[b * c_i * spatial..(b + 1) * c_i * spatial];
                let dst_start = (b * total_c + c_off) * spatial;
                data[dst_start..dst_start + c_i * spatial].copy_from_slice(src_slice);
                c_off += c_i;
            }
        }
        let value = Tensor::new(vec![batch, total_c, h, w], data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            rg,
            Op::ConcatChannels {
                inputs: inputs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    // ── Reductions and losses ────────────────────────────────────────

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let s: T = self.nodes[a.0].value.data().iter().cloned().sum();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { a: a.0 }))
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.nodes[a.0].value.numel();
        let s: T = self.nodes[a.0].value.data().iter().cloned().sum();
        let value = Tensor::scalar(s * T::from_f64(1.0 / n as f64));
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Mean { a: a.0 }))
    }

    /// Mean softmax cross-entropy of (batch, classes) logits against class
    /// indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_open()?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::BadRank {
                op: "softmax_cross_entropy",
                expected: "(batch, classes) logits with one target per row",
                got: shape,
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        let data = self.nodes[logits.0].value.data();
        let mut total = T::zero();
        for (b, &t) in targets.iter().enumerate() {
            assert!(t < classes, "target {t} out of range for {classes} classes");
            let row = &data[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let log_sum_exp: T = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += log_sum_exp - row[t];
        }
        let value = Tensor::scalar(total * T::from_f64(1.0 / batch as f64));
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Masked binary cross-entropy:
    /// `-(1/N) * sum(w * (g*ln(p) + (1-g)*ln(1-p)))` where `N` is the total
    /// element count of `pred`. Pixels with `w = 0` contribute nothing to
    /// either the loss or the gradient; the denominator still counts them.
    pub fn masked_bce(&mut self, pred: Var, positive: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let n = self.nodes[pred.0].value.numel();
        if positive.numel() != n || weight.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_bce",
                lhs: self.shape(pred).to_vec(),
                rhs: positive.shape().to_vec(),
            });
        }
        let p = self.nodes[pred.0].value.data();
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let one = T::one();
        let mut total = T::zero();
        for ((&pi, &w), &g) in p.iter().zip(weight.data()).zip(positive.data()) {
            if w == T::zero() {
                continue;
            }
            let pc = pi.max(lo).min(hi);
            total += w * (g * pc.ln() + (one - g) * (one - pc).ln());
        }
        let value = Tensor::scalar(-total * T::from_f64(1.0 / n as f64));
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::MaskedBce {
                pred: pred.0,
                positive: positive.data().to_vec(),
                weight: weight.data().to_vec(),
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// node and consumes the tape; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.consumed = true;
        for node in self.nodes.iter_mut() {
            node.grad = Some(vec![T::zero(); node.value.numel()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        // Gradient flowing into node i; moved out to appease the borrow
        // checker while we mutate input grads.
        let grad = self.nodes[i].grad.take().unwrap();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bc } => {
                let (kind, a, b, bc) = (*kind, *a, *b, *bc);
                match kind {
                    BinKind::Add => {
                        if self.nodes[a].requires_grad {
                            let ga = self.nodes[a].grad.as_mut().unwrap();
                            for (gv, &g) in ga.iter_mut().zip(&grad) {
                                *gv += g;
                            }
                        }
                        if self.nodes[b].requires_grad {
                            let gb = self.nodes[b].grad.as_mut().unwrap();
                            for (i, &g) in grad.iter().enumerate() {
                                gb[bc.map(i)] += g;
                            }
                        }
                    }
                    BinKind::Mul => {
                        if self.nodes[a].requires_grad {
                            let b_data: Vec<T> = self.nodes[b].value.data().to_vec();
                            let ga = self.nodes[a].grad.as_mut().unwrap();
                            for (i, &g) in grad.iter().enumerate() {
                                ga[i] += g * b_data[bc.map(i)];
                            }
                        }
                        if self.nodes[b].requires_grad {
                            let a_data: Vec<T> = self.nodes[a].value.data().to_vec();
                            let gb = self.nodes[b].grad.as_mut().unwrap();
                            for (i, &g) in grad.iter().enumerate() {
                                gb[bc.map(i)] += g * a_data[i];
                            }
                        }
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let mask: Vec<bool> =
                        self.nodes[a].value.data().iter().map(|&x| x > T::zero()).collect();
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for ((gv, &g), pass) in ga.iter_mut().zip(&grad).zip(mask) {
                        if pass {
                            *gv += g;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let s: Vec<T> = self.nodes[i].value.data().to_vec();
                    let one = T::one();
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for ((gv, &g), sv) in ga.iter_mut().zip(&grad).zip(s) {
                        *gv += g * sv * (one - sv);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
            } => {
                let (input, kernel, geom, batch) = (*input, *kernel, *geom, *batch);
                let img_len = geom.in_c * geom.in_h * geom.in_w;
                let out_len = geom.out_c * geom.out_pixels();
                let want_input = self.nodes[input].requires_grad;
                let want_kernel = self.nodes[kernel].requires_grad;

                let mut patches = vec![T::zero(); geom.patch_rows() * geom.out_pixels()];
                let mut d_patches = vec![T::zero(); patches.len()];
                let mut d_kernel = vec![T::zero(); geom.out_c * geom.patch_rows()];
                let mut d_input = vec![T::zero(); batch * img_len];

                {
                    let input_data = self.nodes[input].value.data();
                    let kernel_data = self.nodes[kernel].value.data();
                    for b in 0..batch {
                        let g_out = &grad[b * out_len..(b + 1) * out_len];
                        if want_kernel {
                            ops::im2col(
                                &input_data[b * img_len..(b + 1) * img_len],
                                &geom,
                                &mut patches,
                            );
                            ops::matmul_nt_acc(
                                g_out,
                                &patches,
                                geom.out_c,
                                geom.out_pixels(),
                                geom.patch_rows(),
                                &mut d_kernel,
                            );
                        }
                        if want_input {
                            for v in d_patches.iter_mut() {
                                *v = T::zero();
                            }
                            ops::matmul_tn_acc(
                                kernel_data,
                                g_out,
                                geom.out_c,
                                geom.patch_rows(),
                                geom.out_pixels(),
                                &mut d_patches,
                            );
                            ops::col2im_acc(
                                &d_patches,
                                &geom,
                                &mut d_input[b * img_len..(b + 1) * img_len],
                            );
                        }
                    }
                }
                if want_kernel {
                    let gk = self.nodes[kernel].grad.as_mut().unwrap();
                    for (gv, d) in gk.iter_mut().zip(d_kernel) {
                        *gv += d;
                    }
                }
                if want_input {
                    let gi = self.nodes[input].grad.as_mut().unwrap();
                    for (gv, d) in gi.iter_mut().zip(d_input) {
                        *gv += d;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].requires_grad {
                    let b_data: Vec<T> = self.nodes[b].value.data().to_vec();
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC * B^T
                    ops::matmul_nt_acc(&grad, &b_data, m, n, k, &mut da);
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for (gv, d) in ga.iter_mut().zip(da) {
                        *gv += d;
                    }
                }
                if self.nodes[b].requires_grad {
                    let a_data: Vec<T> = self.nodes[a].value.data().to_vec();
                    let mut db = vec![T::zero(); k * n];
                    // dB = A^T * dC
                    ops::matmul_tn_acc(&a_data, &grad, m, k, n, &mut db);
                    let gb = self.nodes[b].grad.as_mut().unwrap();
                    for (gv, d) in gb.iter_mut().zip(db) {
                        *gv += d;
                    }
                }
            }
            Op::GlobalAvgPool { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let spatial = shape[2] * shape[3];
                    let inv = T::from_f64(1.0 / spatial as f64);
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for (i, gv) in ga.iter_mut().enumerate() {
                        *gv += grad[i / spatial] * inv;
                    }
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for (gv, &g) in ga.iter_mut().zip(&grad) {
                        *gv += g;
                    }
                }
            }
            Op::UpsampleBilinear { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let in_shape = self.nodes[a].value.shape().to_vec();
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (in_h, in_w) = (in_shape[2], in_shape[3]);
                    let (out_h, out_w) = (out_shape[2], out_shape[3]);
                    let planes = in_shape[0] * in_shape[1];
                    let one = T::one();
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for p in 0..planes {
                        let g_plane = &grad[p * out_h * out_w..(p + 1) * out_h * out_w];
                        let ga_plane = &mut ga[p * in_h * in_w..(p + 1) * in_h * in_w];
                        for oy in 0..out_h {
                            let (y0, y1, wy) = bilinear_source::<T>(oy, in_h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1, wx) = bilinear_source::<T>(ox, in_w, out_w);
                                let g = g_plane[oy * out_w + ox];
                                ga_plane[y0 * in_w + x0] += g * (one - wy) * (one - wx);
                                ga_plane[y0 * in_w + x1] += g * (one - wy) * wx;
                                ga_plane[y1 * in_w + x0] += g * wy * (one - wx);
                                ga_plane[y1 * in_w + x1] += g * wy * wx;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let in_shape = self.nodes[a].value.shape().to_vec();
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (in_h, in_w) = (in_shape[2], in_shape[3]);
                    let (out_h, out_w) = (out_shape[2], out_shape[3]);
                    let planes = in_shape[0] * in_shape[1];
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for p in 0..planes {
                        let g_plane = &grad[p * out_h * out_w..(p + 1) * out_h * out_w];
                        let ga_plane = &mut ga[p * in_h * in_w..(p + 1) * in_h * in_w];
                        for oy in 0..out_h {
                            let iy = nearest_source(oy, in_h, out_h);
                            for ox in 0..out_w {
                                let ix = nearest_source(ox, in_w, out_w);
                                ga_plane[iy * in_w + ix] += g_plane[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { inputs } => {
                let inputs = inputs.clone();
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (batch, total_c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let spatial = h * w;
                let mut c_off = 0;
                for v in inputs {
                    let c_i = self.nodes[v].value.shape()[1];
                    if self.nodes[v].requires_grad {
                        let gv = self.nodes[v].grad.as_mut().unwrap();
                        for b in 0..batch {
                            let src_start = (b * total_c + c_off) * spatial;
                            let dst_start = b * c_i * spatial;
                            for j in 0..c_i * spatial {
                                gv[dst_start + j] += grad[src_start + j];
                            }
                        }
                    }
                    c_off += c_i;
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let g = grad[0];
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for gv in ga.iter_mut() {
                        *gv += g;
                    }
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let n = self.nodes[a].value.numel();
                    let g = grad[0] * T::from_f64(1.0 / n as f64);
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for gv in ga.iter_mut() {
                        *gv += g;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                if self.nodes[logits].requires_grad {
                    let shape = self.nodes[logits].value.shape().to_vec();
                    let (batch, classes) = (shape[0], shape[1]);
                    let data: Vec<T> = self.nodes[logits].value.data().to_vec();
                    let scale = grad[0] * T::from_f64(1.0 / batch as f64);
                    let gl = self.nodes[logits].grad.as_mut().unwrap();
                    for (b, &t) in targets.iter().enumerate() {
                        let row = &data[b * classes..(b + 1) * classes];
                        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
                        let denom: T = exps.iter().cloned().sum();
                        for c in 0..classes {
                            let softmax = exps[c] / denom;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[b * classes + c] += scale * (softmax - onehot);
                        }
                    }
                }
            }
            Op::MaskedBce {
                pred,
                positive,
                weight,
            } => {
                let pred = *pred;
                let positive = positive.clone();
                let weight = weight.clone();
                if self.nodes[pred].requires_grad {
                    let n = self.nodes[pred].value.numel();
                    let p: Vec<T> = self.nodes[pred].value.data().to_vec();
                    let lo = T::from_f64(BCE_CLAMP);
                    let hi = T::one() - lo;
                    let one = T::one();
                    let scale = grad[0] * T::from_f64(1.0 / n as f64);
                    let gp = self.nodes[pred].grad.as_mut().unwrap();
                    for i in 0..n {
                        let w = weight[i];
                        if w == T::zero() {
                            continue;
                        }
                        let g = positive[i];
                        let pc = p[i].max(lo).min(hi);
                        gp[i] -= scale * w * (g / pc - (one - g) / (one - pc));
                    }
                }
            }
        }
        self.nodes[i].grad = Some(grad);
    }
}

#[inline]
fn nearest_source(o: usize, in_dim: usize, out_dim: usize) -> usize {
    (o * in_dim / out_dim).min(in_dim - 1)
}
