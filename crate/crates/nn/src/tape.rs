//! Gradient tape. Nodes are appended in evaluation order, so the node list is
//! already a topological order and `backward` is a single reverse sweep.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    /// Scalar whose gradient with respect to `input` was computed in closed
    /// form by the caller.
    LocalGrad {
        input: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward evaluation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that keeps no backward state; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if self.grad_enabled && requires_grad {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: self.grad_enabled && requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// 2D cross-correlation. `input` is `[N, C, H, W]`, `weight` is
    /// `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        self.check_bias("conv2d", bias, ws[0])?;
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {ws:?} does not fit input {xs:?}")))?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let (out, cols) = kernels::conv_forward(
            self.value(input).data(),
            xs[0],
            self.value(weight).data(),
            ws[0],
            bias.map(|b| self.value(b).data()),
            &geom,
            self.grad_enabled && rg,
        );
        let value = Tensor::from_vec(&[xs[0], ws[0], geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Pointwise convolution; `weight` is `[O, C]` or `[O, C, 1, 1]`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        match ws.as_slice() {
            [_, _, 1, 1] => self.conv2d(input, weight, bias, 1, 0),
            [o, c] => {
                let w4 = self.reshape(weight, &[*o, *c, 1, 1])?;
                self.conv2d(input, w4, bias, 1, 0)
            }
            _ => Err(shape_err("conv1x1", format!("weight {ws:?}"))),
        }
    }

    /// Per-channel convolution. `weight` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
            return Err(shape_err("depthwise_conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        self.check_bias("depthwise_conv2d", bias, xs[1])?;
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding)
            .ok_or_else(|| shape_err("depthwise_conv2d", "kernel larger than padded input"))?;
        let out = kernels::depthwise_forward(
            self.value(input).data(),
            xs[0],
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[xs[0], xs[1], geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Depthwise {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over the two trailing axes.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("maxpool2x2", format!("input {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2x2(self.value(input).data(), planes, h, w);
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = h.div_ceil(2);
        shape[r - 1] = w.div_ceil(2);
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MaxPool { input, argmax }, rg))
    }

    /// `input [N, in] * weight[out, in]^T + bias[out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        self.check_bias("dense", bias, ws[0])?;
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        gemm(
            MatRef::new(self.value(input).data(), n, fin),
            MatRef::new(self.value(weight).data(), fout, fin).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += *bb;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_vec(&[n, fout], out)?,
            Op::Dense { input, weight, bias },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Parametric ReLU with a single learnable slope (`slope` has one element).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(shape_err("prelu", format!("slope shape {:?}", self.shape(slope))));
        }
        let a = self.value(slope).item();
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { a * v })
            .collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(input) || self.rg(slope);
        Ok(self.push(value, Op::Prelu { input, slope }, rg))
    }

    /// Inverted dropout. Identity (same node) outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Collapse all axes after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        let n = xs[0];
        let rest = xs[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Concatenate `[N, F_i]` tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(first) = inputs.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat", format!("input {s:?} with batch {n}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[row * w..(row + 1) * w]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::from_vec(&[n, total], out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().map(|v| *v * *v).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::SumSquares { input }, rg)
    }

    /// Record a scalar `value` whose derivative with respect to `input` is
    /// `grad` (same shape as `input`). Used for fused losses.
    pub fn scalar_with_grad(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(shape_err(
                "scalar_with_grad",
                format!("grad {:?} vs input {:?}", grad.shape(), self.shape(input)),
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::LocalGrad { input, grad }, rg))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, n: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.value(b).numel() != n {
                return Err(shape_err(op, format!("bias {:?}, expected {n}", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(self.shape(v), data).expect("gradient shape")
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let out_ch = self.shape(*weight)[0];
                let cg = kernels::conv_backward(
                    self.value(*input).data(),
                    cols,
                    self.shape(*input)[0],
                    self.value(*weight).data(),
                    out_ch,
                    geom,
                    gd,
                    self.rg(*input),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                self.accumulate(grads, *weight, self.like(*weight, cg.dw));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, self.like(*b, cg.db));
                }
            }
            Op::Depthwise {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::depthwise_backward(
                    self.value(*input).data(),
                    self.shape(*input)[0],
                    self.value(*weight).data(),
                    geom,
                    gd,
                    self.rg(*input),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                self.accumulate(grads, *weight, self.like(*weight, cg.dw));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, self.like(*b, cg.db));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (gv, &i) in gd.iter().zip(argmax) {
                    dx[i] += *gv;
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*weight)[0];
                let dy = MatRef::new(gd, n, fout);
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(
                        dy,
                        MatRef::new(self.value(*weight).data(), fout, fin),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        dy.t(),
                        MatRef::new(self.value(*input).data(), n, fin),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *weight, self.like(*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Prelu { input, slope } => {
                let a = self.value(*slope).item();
                let x = self.value(*input).data();
                let mut da = T::zero();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| {
                        if *v > T::zero() {
                            *g
                        } else {
                            da += *g * *v;
                            a * *g
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, self.like(*input, dx));
                self.accumulate(grads, *slope, self.like(*slope, vec![da]));
            }
            Op::Dropout { input, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, self.like(*input, gd.to_vec()));
            }
            Op::Concat { inputs } => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let w = self.shape(*v)[1];
                    let mut d = Vec::with_capacity(n * w);
                    for row in 0..n {
                        d.extend_from_slice(&gd[row * total + offset..row * total + offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, *v, self.like(*v, d));
                }
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, self.like(*input, vec![gd[0]; n]));
            }
            Op::SumSquares { input } => {
                let two = T::of(2.0);
                let d = self.value(*input).data().iter().map(|v| two * *v * gd[0]).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::LocalGrad { input, grad } => {
                let d = grad.data().iter().map(|v| *v * gd[0]).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
        }
        Ok(())
    }
}
