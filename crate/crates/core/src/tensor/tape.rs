use std::cell::RefCell;

use super::kernels::{col2im_add, im2col, matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Tensor, TensorError};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Shape bookkeeping for a 2-D cross-correlation over `[n×c×h×w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Selu(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Reduce {
        input: usize,
        outer: usize,
        extent: usize,
        inner: usize,
        mean: bool,
    },
    Reshape(usize),
    Softmax(usize),
    Sigmoid(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
        spatial: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    ScalarFn {
        input: usize,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in creation order so that reverse order is a
/// valid topological order for the chain rule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; leaves the loss does not depend on get exact zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(var.id).map_or(&[][..], |s| s)),
        }
    }

    /// Gradient by raw node id, if one was produced.
    pub fn get(&self, node_id: usize) -> Option<&Tensor> {
        self.grads.get(node_id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Untracked input such as a data batch.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn check<'a>(&self, var: Var<'a>) -> Result<(), TensorError> {
        if std::ptr::eq(var.tape, self) && var.id < self.nodes.borrow().len() {
            Ok(())
        } else {
            Err(TensorError::NotOnTape)
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&node.op, &node.value, &g, &nodes, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn map_grad(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).expect("gradient shape matches node shape")
}

fn backprop(op: &Op, out: &Tensor, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let total: f64 = g.data().iter().sum();
            let (ga, gb) = match bc {
                Broadcast::Same => (
                    g.clone(),
                    map_grad(g.shape(), g.data().iter().map(|v| sign * v).collect()),
                ),
                Broadcast::LhsScalar => (
                    map_grad(val(a).shape(), vec![total]),
                    map_grad(g.shape(), g.data().iter().map(|v| sign * v).collect()),
                ),
                Broadcast::RhsScalar => (g.clone(), map_grad(val(b).shape(), vec![sign * total])),
            };
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (val(a), val(b));
            match bc {
                Broadcast::Same => {
                    if needs(a) {
                        let d = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                        accumulate(grads, nodes, a, map_grad(av.shape(), d));
                    }
                    if needs(b) {
                        let d = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                        accumulate(grads, nodes, b, map_grad(bv.shape(), d));
                    }
                }
                Broadcast::LhsScalar | Broadcast::RhsScalar => {
                    let (s, t, sid, tid) = if bc == Broadcast::LhsScalar {
                        (av, bv, a, b)
                    } else {
                        (bv, av, b, a)
                    };
                    let sv = s.data()[0];
                    if needs(sid) {
                        let d: f64 = g.data().iter().zip(t.data()).map(|(g, t)| g * t).sum();
                        accumulate(grads, nodes, sid, map_grad(s.shape(), vec![d]));
                    }
                    if needs(tid) {
                        let d = g.data().iter().map(|g| g * sv).collect();
                        accumulate(grads, nodes, tid, map_grad(t.shape(), d));
                    }
                }
            }
        }
        Op::Exp(a) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y)
                .collect();
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::Log(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(a).data())
                .map(|(g, x)| g / x)
                .collect();
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::Selu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(a).data().iter().zip(out.data()))
                .map(|(g, (&x, &y))| {
                    if x > 0.0 {
                        g * SELU_LAMBDA
                    } else {
                        g * (y + SELU_LAMBDA * SELU_ALPHA)
                    }
                })
                .collect();
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::MatMul { a, b, m, k, n } => {
            if needs(a) {
                let mut d = vec![0.0; m * k];
                matmul_nt_into(g.data(), val(b).data(), &mut d, m, n, k);
                accumulate(grads, nodes, a, map_grad(val(a).shape(), d));
            }
            if needs(b) {
                let mut d = vec![0.0; k * n];
                matmul_tn_into(val(a).data(), g.data(), &mut d, k, m, n);
                accumulate(grads, nodes, b, map_grad(val(b).shape(), d));
            }
        }
        Op::AddBias { x, bias } => {
            accumulate(grads, nodes, x, g.clone());
            if needs(bias) {
                let n = val(bias).len();
                let mut d = vec![0.0; n];
                for row in g.data().chunks_exact(n) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, bias, map_grad(val(bias).shape(), d));
            }
        }
        Op::Reduce {
            input,
            outer,
            extent,
            inner,
            mean,
        } => {
            let scale = if mean { 1.0 / extent as f64 } else { 1.0 };
            let mut d = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                for e in 0..extent {
                    for i in 0..inner {
                        d[(o * extent + e) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            accumulate(grads, nodes, input, map_grad(val(input).shape(), d));
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, a, map_grad(val(a).shape(), g.data().to_vec()));
        }
        Op::Softmax(a) => {
            let c = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; out.len()];
            for ((drow, prow), grow) in d
                .chunks_exact_mut(c)
                .zip(out.data().chunks_exact(c))
                .zip(g.data().chunks_exact(c))
            {
                let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                for ((dv, p), gv) in drow.iter_mut().zip(prow).zip(grow) {
                    *dv = p * (gv - dot);
                }
            }
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::Sigmoid(a) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            accumulate(grads, nodes, a, map_grad(out.shape(), d));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
            batch_stats,
        } => {
            let d = inv_std.len();
            let m = g.len() / d;
            let gam = val(gamma).data();
            let mut sum_g = vec![0.0; d];
            let mut sum_gx = vec![0.0; d];
            for (grow, xrow) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    sum_g[j] += grow[j];
                    sum_gx[j] += grow[j] * xrow[j];
                }
            }
            if needs(x) {
                let mut dx = vec![0.0; m * d];
                let mf = m as f64;
                for ((dxrow, grow), xrow) in dx
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                {
                    for j in 0..d {
                        dxrow[j] = if batch_stats {
                            gam[j] * inv_std[j] / mf
                                * (mf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j])
                        } else {
                            gam[j] * inv_std[j] * grow[j]
                        };
                    }
                }
                accumulate(grads, nodes, x, map_grad(val(x).shape(), dx));
            }
            accumulate(grads, nodes, gamma, map_grad(val(gamma).shape(), sum_gx));
            accumulate(grads, nodes, beta, map_grad(val(beta).shape(), sum_g));
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
        } => {
            let (oh, ow) = (geom.out_h(), geom.out_w());
            let plane = oh * ow;
            let patch = geom.patch_len();
            let oc = geom.out_channels;
            let img_len = geom.in_channels * geom.height * geom.width;
            let xv = val(x).data();
            let kv = val(kernel).data();
            let mut dk = needs(kernel).then(|| vec![0.0; oc * patch]);
            let mut dx = needs(x).then(|| vec![0.0; xv.len()]);
            let mut cols = vec![0.0; patch * plane];
            let mut dcols = vec![0.0; patch * plane];
            for s in 0..geom.batch {
                let gs = &g.data()[s * oc * plane..(s + 1) * oc * plane];
                if let Some(dk) = dk.as_mut() {
                    im2col(
                        &xv[s * img_len..(s + 1) * img_len],
                        geom.in_channels,
                        geom.height,
                        geom.width,
                        geom.kernel_h,
                        geom.kernel_w,
                        geom.stride,
                        geom.padding,
                        oh,
                        ow,
                        &mut cols,
                    );
                    matmul_nt_into(gs, &cols, dk, oc, plane, patch);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    matmul_tn_into(kv, gs, &mut dcols, patch, oc, plane);
                    col2im_add(
                        &dcols,
                        geom.in_channels,
                        geom.height,
                        geom.width,
                        geom.kernel_h,
                        geom.kernel_w,
                        geom.stride,
                        geom.padding,
                        oh,
                        ow,
                        &mut dx[s * img_len..(s + 1) * img_len],
                    );
                }
            }
            if let Some(dk) = dk {
                accumulate(grads, nodes, kernel, map_grad(val(kernel).shape(), dk));
            }
            if let Some(dx) = dx {
                accumulate(grads, nodes, x, map_grad(val(x).shape(), dx));
            }
            if let Some(b) = bias.filter(|&b| needs(b)) {
                let mut db = vec![0.0; oc];
                for (i, chunk) in g.data().chunks_exact(plane).enumerate() {
                    db[i % oc] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, nodes, b, map_grad(val(b).shape(), db));
            }
        }
        Op::MaxPool { input, ref argmax } => {
            let mut d = vec![0.0; val(input).len()];
            for (gv, &src) in g.data().iter().zip(argmax) {
                d[src] += gv;
            }
            accumulate(grads, nodes, input, map_grad(val(input).shape(), d));
        }
        Op::GlobalAvgPool { input, spatial } => {
            let scale = 1.0 / spatial as f64;
            let mut d = vec![0.0; val(input).len()];
            for (chunk, gv) in d.chunks_exact_mut(spatial).zip(g.data()) {
                chunk.iter_mut().for_each(|v| *v = gv * scale);
            }
            accumulate(grads, nodes, input, map_grad(val(input).shape(), d));
        }
        Op::Dropout { input, ref mask } => {
            let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(grads, nodes, input, map_grad(out.shape(), d));
        }
        Op::ScalarFn {
            input,
            ref local_grad,
        } => {
            let g0 = g.data()[0];
            let d = local_grad.iter().map(|v| g0 * v).collect();
            accumulate(grads, nodes, input, map_grad(val(input).shape(), d));
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: Var<'_>) -> Result<(), TensorError> {
        self.tape.check(other)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(other)?;
        let (value, bc) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() == b.shape() {
                let d = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (map_grad(a.shape(), d), Broadcast::Same)
            } else if a.len() == 1 {
                let s = a.data()[0];
                (
                    map_grad(b.shape(), b.data().iter().map(|&y| f(s, y)).collect()),
                    Broadcast::LhsScalar,
                )
            } else if b.len() == 1 {
                let s = b.data()[0];
                (
                    map_grad(a.shape(), a.data().iter().map(|&x| f(x, s)).collect()),
                    Broadcast::RhsScalar,
                )
            } else {
                return Err(TensorError::IncompatibleShapes {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(name, value, make(self.id, other.id, bc), rg)
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        let value =
            self.with_value(|a| map_grad(a.shape(), a.data().iter().map(|&x| f(x)).collect()));
        self.tape.push(name, value, op, self.requires_grad())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>, TensorError> {
        if let Some(bad) = self.with_value(|a| a.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    /// `max(0, x)`.
    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn selu(self) -> Result<Var<'t>, TensorError> {
        self.unary("selu", selu, Op::Selu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other)?;
        let (value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::IncompatibleShapes {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut c, m, k, n);
            (map_grad(&[m, n], c), m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "matmul",
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(bias)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.len() {
                return Err(TensorError::IncompatibleShapes {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut d = x.data().to_vec();
            for row in d.chunks_exact_mut(b.len()) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            map_grad(x.shape(), d)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        self.tape.push(
            "add_bias",
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            rg,
        )
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>, TensorError> {
        let (value, outer, extent, inner) = self.with_value(|a| {
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    axis,
                    rank: a.rank(),
                });
            }
            let shape = a.shape();
            let outer: usize = shape[..axis].iter().product();
            let extent = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let src = &a.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            if mean {
                let denom = extent as f64;
                out.iter_mut().for_each(|v| *v /= denom);
            }
            let mut new_shape = shape.to_vec();
            new_shape.remove(axis);
            Ok((map_grad(&new_shape, out), outer, extent, inner))
        })?;
        self.tape.push(
            if mean { "mean" } else { "sum" },
            value,
            Op::Reduce {
                input: self.id,
                outer,
                extent,
                inner,
                mean,
            },
            self.requires_grad(),
        )
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce(axis, false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce(axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>, TensorError> {
        let n = self.with_value(|a| a.len());
        self.reshape(&[n])?.sum(0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = self.value().reshape(shape)?;
        self.tape
            .push("reshape", value, Op::Reshape(self.id), self.requires_grad())
    }

    /// Row-wise softmax over the last axis of an `[m×C]` matrix.
    pub fn softmax(self) -> Result<Var<'t>, TensorError> {
        let value = self.with_value(|a| {
            if a.rank() != 2 {
                return Err(TensorError::Invalid(format!(
                    "softmax expects a matrix, got shape {:?}",
                    a.shape()
                )));
            }
            let c = a.shape()[1];
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Ok(map_grad(a.shape(), out))
        })?;
        self.tape
            .push("softmax", value, Op::Softmax(self.id), self.requires_grad())
    }

    /// Per-feature affine normalization of an `[m×d]` batch.
    ///
    /// With `running = None` the batch's own mean and population variance
    /// are used and gradients flow through both statistics. With
    /// `running = Some((mean, var))` the supplied statistics are constants.
    /// Returns the output together with the batch mean and variance when
    /// those were computed.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        epsilon: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var<'t>, Option<(Vec<f64>, Vec<f64>)>), TensorError> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (value, xhat, inv_std, stats) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if x.rank() != 2 || g.len() != x.shape()[1] || b.len() != x.shape()[1] {
                return Err(TensorError::IncompatibleShapes {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, d) = (x.shape()[0], x.shape()[1]);
            let (mean, var, stats) = match running {
                Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
                None => {
                    let mut mean = vec![0.0; d];
                    for row in x.data().chunks_exact(d) {
                        for (acc, v) in mean.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    let mut var = vec![0.0; d];
                    for row in x.data().chunks_exact(d) {
                        for j in 0..d {
                            let c = row[j] - mean[j];
                            var[j] += c * c;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    (mean.clone(), var.clone(), Some((mean, var)))
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
            let mut xhat = vec![0.0; m * d];
            let mut out = vec![0.0; m * d];
            for ((xr, hr), or) in x
                .data()
                .chunks_exact(d)
                .zip(xhat.chunks_exact_mut(d))
                .zip(out.chunks_exact_mut(d))
            {
                for j in 0..d {
                    hr[j] = (xr[j] - mean[j]) * inv_std[j];
                    or[j] = g.data()[j] * hr[j] + b.data()[j];
                }
            }
            (map_grad(x.shape(), out), xhat, inv_std, stats)
        };
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let batch_stats = stats.is_some();
        let out = self.tape.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )?;
        Ok((out, stats))
    }

    /// Cross-correlation of `[n×c×h×w]` input with `[oc×c×kh×kw]` kernels.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(kernel)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let k = &nodes[kernel.id].value;
            let mismatch = || TensorError::IncompatibleShapes {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            };
            if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] || stride == 0 {
                return Err(mismatch());
            }
            let geom = ConvGeometry {
                batch: x.shape()[0],
                in_channels: x.shape()[1],
                height: x.shape()[2],
                width: x.shape()[3],
                out_channels: k.shape()[0],
                kernel_h: k.shape()[2],
                kernel_w: k.shape()[3],
                stride,
                padding,
            };
            if geom.kernel_h == 0
                || geom.kernel_w == 0
                || geom.height + 2 * padding < geom.kernel_h
                || geom.width + 2 * padding < geom.kernel_w
            {
                return Err(mismatch());
            }
            let bias_vals = match bias {
                Some(b) => {
                    let bv = &nodes[b.id].value;
                    if bv.len() != geom.out_channels {
                        return Err(mismatch());
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let (oh, ow) = (geom.out_h(), geom.out_w());
            let plane = oh * ow;
            let patch = geom.patch_len();
            let img_len = geom.in_channels * geom.height * geom.width;
            let oc = geom.out_channels;
            let mut out = vec![0.0; geom.batch * oc * plane];
            let mut cols = vec![0.0; patch * plane];
            for s in 0..geom.batch {
                im2col(
                    &x.data()[s * img_len..(s + 1) * img_len],
                    geom.in_channels,
                    geom.height,
                    geom.width,
                    geom.kernel_h,
                    geom.kernel_w,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut cols,
                );
                let dst = &mut out[s * oc * plane..(s + 1) * oc * plane];
                matmul_into(k.data(), &cols, dst, oc, patch, plane);
                if let Some(bv) = bias_vals {
                    for (chunk, b) in dst.chunks_exact_mut(plane).zip(bv) {
                        chunk.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
            (map_grad(&[geom.batch, oc, oh, ow], out), geom)
        };
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        )
    }

    /// Non-overlapping `size×size` max pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn max_pool2d(self, size: usize) -> Result<Var<'t>, TensorError> {
        let (value, argmax) = self.with_value(|x| {
            if x.rank() != 4 || size == 0 || x.shape()[2] < size || x.shape()[3] < size {
                return Err(TensorError::Invalid(format!(
                    "max_pool2d({size}) cannot pool shape {:?}",
                    x.shape()
                )));
            }
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h / size, w / size);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * size * w + ox * size;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = base + (oy * size + dy) * w + ox * size + dx;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x.data()[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((map_grad(&[n, c, oh, ow], out), argmax))
        })?;
        self.tape.push(
            "max_pool2d",
            value,
            Op::MaxPool {
                input: self.id,
                argmax,
            },
            self.requires_grad(),
        )
    }

    /// Spatial mean per channel: `[n×c×h×w] -> [n×c]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>, TensorError> {
        let (value, spatial) = self.with_value(|x| {
            if x.rank() != 4 || x.shape()[2] == 0 || x.shape()[3] == 0 {
                return Err(TensorError::Invalid(format!(
                    "global_avg_pool expects non-empty [n×c×h×w], got {:?}",
                    x.shape()
                )));
            }
            let spatial = x.shape()[2] * x.shape()[3];
            let out = x
                .data()
                .chunks_exact(spatial)
                .map(|c| c.iter().sum::<f64>() / spatial as f64)
                .collect();
            Ok((map_grad(&[x.shape()[0], x.shape()[1]], out), spatial))
        })?;
        self.tape.push(
            "global_avg_pool",
            value,
            Op::GlobalAvgPool {
                input: self.id,
                spatial,
            },
            self.requires_grad(),
        )
    }

    /// Multiplies elementwise by a fixed mask (dropout keeps/scales).
    pub fn apply_mask(self, mask: Vec<f64>) -> Result<Var<'t>, TensorError> {
        let value = self.with_value(|x| {
            if mask.len() != x.len() {
                return Err(TensorError::LengthMismatch {
                    shape: x.shape().to_vec(),
                    expected: x.len(),
                    got: mask.len(),
                });
            }
            Ok(map_grad(
                x.shape(),
                x.data().iter().zip(&mask).map(|(a, b)| a * b).collect(),
            ))
        })?;
        self.tape.push(
            "dropout",
            value,
            Op::Dropout {
                input: self.id,
                mask,
            },
            self.requires_grad(),
        )
    }

    /// Records a scalar function of this variable whose value and local
    /// gradient were computed by the caller.
    pub fn scalar_fn(
        self,
        name: &'static str,
        value: f64,
        local_grad: Vec<f64>,
    ) -> Result<Var<'t>, TensorError> {
        let len = self.with_value(|x| x.len());
        if local_grad.len() != len {
            return Err(TensorError::LengthMismatch {
                shape: self.shape(),
                expected: len,
                got: local_grad.len(),
            });
        }
        self.tape.push(
            name,
            Tensor::scalar(value),
            Op::ScalarFn {
                input: self.id,
                local_grad,
            },
            self.requires_grad(),
        )
    }
}

pub(crate) fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
        assert!(matches!(
            a.matmul(a),
            Err(TensorError::IncompatibleShapes { .. })
        ));
    }

    #[test]
    fn elementwise_cases() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.exp().unwrap().value().data(), &[1.0]);
        let neg = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(
            neg.log(),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(
            a.add(c),
            Err(TensorError::IncompatibleShapes { .. })
        ));
        let s = tape.constant(Tensor::scalar(10.0));
        assert_eq!(s.sub(a).unwrap().value().data(), &[9.0, 8.0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let tape = Tape::new();
        let big = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(
            big.exp(),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let a = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = a.mean(0).unwrap().value();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.item(), Some(2.5));
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        assert_eq!(ones.sum(1).unwrap().value().data(), &[2.0, 2.0]);
        assert!(matches!(
            ones.sum(2),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn backward_simple_rules() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[1], &[3.0]));
        let loss = w.mul(w).unwrap().sum(0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[6.0]);

        let tape = Tape::new();
        let w = tape.leaf(t(&[4], &[1.0, -2.0, 0.5, 9.0]));
        let loss = w.mean(0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.25; 4]);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let used = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = used.exp().unwrap().sum(0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));
        let other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x), Err(TensorError::NotOnTape)));
        assert!(matches!(w.add(x), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) -> dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -1.0, 2.0]));
        let loss = x.mul(x).unwrap().add(x).unwrap().sum(0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, -1.0, 5.0]);
    }

    #[test]
    fn selu_values() {
        assert_eq!(selu(0.0), 0.0);
        assert!((selu(-1.0) - (-1.111_330_737_812_562_5)).abs() < 1e-12);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-15);
    }
}
