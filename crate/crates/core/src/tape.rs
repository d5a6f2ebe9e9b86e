//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Values are
//! computed eagerly; [`Tape::gradients`] replays the record backwards from a
//! scalar. Nodes built only from constants are never visited on the way back,
//! so holding model weights as constants makes input-only gradients cheap.

use std::cell::{Ref, RefCell};

use log::warn;

use crate::dct::{self, PatchGrid};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Silu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    AddChannel {
        x: usize,
        v: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(usize, usize),
    PatchDct {
        x: usize,
        grid: PatchGrid,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Var#{} {:?}",
            self.id,
            self.tape.nodes.borrow()[self.id].value
        )
    }
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the output did not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        if !std::ptr::eq(self.tape, var.tape) {
            warn!("gradient requested for a variable recorded on a different tape");
            return Tensor::zeros(&var.shape());
        }
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
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

    /// A value gradients can be taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Input, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Input, false)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Backpropagates from the scalar `output` through everything recorded.
    pub fn gradients(&self, output: Var<'_>) -> Result<Gradients> {
        ensure!(
            std::ptr::eq(self, output.tape),
            "output variable belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        ensure!(
            root.value.is_scalar(),
            "gradients need a scalar output, got shape {:?}",
            root.value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[output.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// `d output / d leaf` for a scalar `output`.
///
/// A `leaf` from another tape gets a zero gradient and a warning.
pub fn backward(output: Var<'_>, leaf: Var<'_>) -> Result<Tensor> {
    if !std::ptr::eq(output.tape, leaf.tape) {
        warn!("leaf is not on the output's tape; returning a zero gradient");
        output.tape.gradients(output)?;
        return Ok(Tensor::zeros(&leaf.shape()));
    }
    Ok(output.tape.gradients(output)?.wrt(leaf))
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match node.op {
        Op::Input => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if nodes[a].requires_grad {
                accumulate(grads, nodes, a, g.zip_map(val(b), |g, y| g * y).unwrap());
            }
            if nodes[b].requires_grad {
                accumulate(grads, nodes, b, g.zip_map(val(a), |g, x| g * x).unwrap());
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.scale(c)),
        Op::Offset(a) => accumulate(grads, nodes, a, g.clone()),
        Op::Silu(a) => {
            let d = g
                .zip_map(val(a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .unwrap();
            accumulate(grads, nodes, a, d);
        }
        Op::Sigmoid(a) => {
            let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y)).unwrap();
            accumulate(grads, nodes, a, d);
        }
        Op::Exp(a) => {
            let d = g.zip_map(&node.value, |g, y| g * y).unwrap();
            accumulate(grads, nodes, a, d);
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.item()));
        }
        Op::Mean(a) => {
            let n = val(a).len() as f64;
            accumulate(grads, nodes, a, Tensor::full(val(a).shape(), g.item() / n));
        }
        Op::Conv2d { x, w, b, pad } => {
            let xs = val(x);
            let ws = val(w);
            if nodes[x].requires_grad {
                accumulate(
                    grads,
                    nodes,
                    x,
                    conv2d_backward_input(g, ws, xs.shape(), pad),
                );
            }
            if nodes[w].requires_grad {
                accumulate(
                    grads,
                    nodes,
                    w,
                    conv2d_backward_weight(g, xs, ws.shape(), pad),
                );
            }
            if nodes[b].requires_grad {
                let cout = g.shape()[0];
                let plane = g.len() / cout;
                let db: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                accumulate(grads, nodes, b, Tensor::new(vec![cout], db).unwrap());
            }
        }
        Op::Linear { x, w, b } => {
            let xs = val(x).data();
            let ws = val(w);
            let (m, n) = (ws.shape()[0], ws.shape()[1]);
            if nodes[x].requires_grad {
                let mut dx = vec![0.0; n];
                for (i, gi) in g.data().iter().enumerate() {
                    for (d, wv) in dx.iter_mut().zip(&ws.data()[i * n..(i + 1) * n]) {
                        *d += gi * wv;
                    }
                }
                accumulate(grads, nodes, x, Tensor::new(vec![n], dx).unwrap());
            }
            if nodes[w].requires_grad {
                let dw = Tensor::from_fn(&[m, n], |k| g.data()[k / n] * xs[k % n]);
                accumulate(grads, nodes, w, dw);
            }
            accumulate(grads, nodes, b, g.clone());
        }
        Op::AddChannel { x, v } => {
            accumulate(grads, nodes, x, g.clone());
            if nodes[v].requires_grad {
                let c = g.shape()[0];
                let plane = g.len() / c;
                let dv: Vec<f64> = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                accumulate(grads, nodes, v, Tensor::new(vec![c], dv).unwrap());
            }
        }
        Op::AvgPool2(a) => {
            let shape = val(a).shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let gd = g.data();
            let d = Tensor::from_fn(&shape, |k| {
                let ch = k / (h * w);
                let y = (k / w) % h;
                let x = k % w;
                gd[ch * oh * ow + (y / 2) * ow + x / 2] * 0.25
            });
            debug_assert_eq!(d.len(), c * h * w);
            accumulate(grads, nodes, a, d);
        }
        Op::Upsample2(a) => {
            let shape = val(a).shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (uh, uw) = (2 * h, 2 * w);
            let gd = g.data();
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..uh {
                    for x in 0..uw {
                        d[ch * h * w + (y / 2) * w + x / 2] += gd[ch * uh * uw + y * uw + x];
                    }
                }
            }
            accumulate(grads, nodes, a, Tensor::new(shape, d).unwrap());
        }
        Op::Concat(a, b) => {
            let na = val(a).len();
            let ga = Tensor::new(val(a).shape().to_vec(), g.data()[..na].to_vec()).unwrap();
            let gb = Tensor::new(val(b).shape().to_vec(), g.data()[na..].to_vec()).unwrap();
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Op::PatchDct { x, grid } => {
            // Orthogonal per patch: the adjoint is the inverse transform.
            let d = dct::patch_dct(&grid, g.data(), true);
            accumulate(grads, nodes, x, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
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

fn conv_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

/// Output rows `oy` whose input row `oy + k - pad` is in bounds.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (cin, h, wd) = conv_dims(x.shape());
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let plane = h * wd;
    let xd = x.data();
    let wt = w.data();
    let mut out = vec![0.0; cout * plane];
    for oc in 0..cout {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(b.data()[oc]);
        for ic in 0..cin {
            let xi = &xd[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, pad, wd);
                    for oy in y0..y1 {
                        let iy = oy + ky - pad;
                        let orow = &mut o[oy * wd + x0..oy * wd + x1];
                        let irow = &xi[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, wd], out).unwrap()
}

fn conv2d_backward_input(g: &Tensor, w: &Tensor, xshape: &[usize], pad: usize) -> Tensor {
    let (cin, h, wd) = conv_dims(xshape);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let plane = h * wd;
    let gd = g.data();
    let wt = w.data();
    let mut dx = vec![0.0; cin * plane];
    for oc in 0..cout {
        let go = &gd[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            let di = &mut dx[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, pad, wd);
                    for oy in y0..y1 {
                        let iy = oy + ky - pad;
                        let grow = &go[oy * wd + x0..oy * wd + x1];
                        let drow = &mut di[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), dx).unwrap()
}

fn conv2d_backward_weight(g: &Tensor, x: &Tensor, wshape: &[usize], pad: usize) -> Tensor {
    let (cin, h, wd) = conv_dims(x.shape());
    let (cout, k) = (wshape[0], wshape[2]);
    let plane = h * wd;
    let gd = g.data();
    let xd = x.data();
    let mut dw = vec![0.0; cout * cin * k * k];
    for oc in 0..cout {
        let go = &gd[oc * plane..(oc + 1) * plane];
        for ic in 0..cin {
            let xi = &xd[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, wd);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy + ky - pad;
                        let grow = &go[oy * wd + x0..oy * wd + x1];
                        let irow = &xi[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[((oc * cin + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Tensor::new(wshape.to_vec(), dw).unwrap()
}

// Fallible counterparts of the operator traits, so the names are deliberate.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        ensure!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
        Ok(())
    }

    fn binary(
        self,
        other: Var<'t>,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self
            .tape
            .value(self.id)
            .zip_map(&self.tape.value(other.id), f)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, op(self.id, other.id), rg))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.tape.value(self.id).map(f);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(v, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same tape and shape")
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value(self.id).sum());
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(v, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value(self.id).mean());
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(v, Op::Mean(self.id), rg)
    }

    /// Mean of squared differences.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Same-padded stride-1 convolution of a `[Cin, H, W]` input with a
    /// `[Cout, Cin, k, k]` kernel (k odd) and `[Cout]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        ensure!(
            xs.len() == 3
                && ws.len() == 4
                && ws[1] == xs[0]
                && ws[2] == ws[3]
                && ws[2] % 2 == 1
                && bs == [ws[0]],
            "conv2d shape mismatch: input {:?}, weight {:?}, bias {:?}",
            xs,
            ws,
            bs
        );
        let pad = ws[2] / 2;
        let v = conv2d_forward(
            &self.tape.value(self.id),
            &self.tape.value(weight.id),
            &self.tape.value(bias.id),
            pad,
        );
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                pad,
            },
            rg,
        ))
    }

    /// `W x + b` for a vector `x` of length n, `W` of shape `[m, n]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        ensure!(
            xs.len() == 1 && ws.len() == 2 && ws[1] == xs[0] && bs == [ws[0]],
            "linear shape mismatch: input {:?}, weight {:?}, bias {:?}",
            xs,
            ws,
            bs
        );
        let v = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(weight.id);
            let b = self.tape.value(bias.id);
            let n = xs[0];
            Tensor::from_fn(&[ws[0]], |i| {
                b.data()[i]
                    + w.data()[i * n..(i + 1) * n]
                        .iter()
                        .zip(x.data())
                        .map(|(a, c)| a * c)
                        .sum::<f64>()
            })
        };
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            v,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            rg,
        ))
    }

    /// Adds `v[c]` to every element of channel `c` of a `[C, H, W]` tensor.
    pub fn add_channel(self, v: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&v)?;
        let (xs, vs) = (self.shape(), v.shape());
        ensure!(
            xs.len() == 3 && vs == [xs[0]],
            "add_channel shape mismatch: input {:?}, per-channel {:?}",
            xs,
            vs
        );
        let out = {
            let x = self.tape.value(self.id);
            let vv = self.tape.value(v.id);
            let plane = xs[1] * xs[2];
            Tensor::from_fn(&xs, |k| x.data()[k] + vv.data()[k / plane])
        };
        let rg = self.tape.requires(&[self.id, v.id]);
        Ok(self.tape.push(
            out,
            Op::AddChannel {
                x: self.id,
                v: v.id,
            },
            rg,
        ))
    }

    /// 2x2 average pooling of a `[C, H, W]` tensor with even H, W.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let s = self.shape();
        ensure!(
            s.len() == 3 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2),
            "avg_pool2 needs [C, even H, even W], got {:?}",
            s
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let out = {
            let x = self.tape.value(self.id);
            let d = x.data();
            Tensor::from_fn(&[c, oh, ow], |k| {
                let ch = k / (oh * ow);
                let y = (k / ow) % oh;
                let xx = k % ow;
                let base = ch * h * w + 2 * y * w + 2 * xx;
                0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1])
            })
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::AvgPool2(self.id), rg))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let s = self.shape();
        ensure!(s.len() == 3, "upsample2 needs [C, H, W], got {:?}", s);
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = {
            let x = self.tape.value(self.id);
            let d = x.data();
            Tensor::from_fn(&[c, 2 * h, 2 * w], |k| {
                let ch = k / (4 * h * w);
                let y = (k / (2 * w)) % (2 * h);
                let xx = k % (2 * w);
                d[ch * h * w + (y / 2) * w + xx / 2]
            })
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Upsample2(self.id), rg))
    }

    /// Stacks two `[C, H, W]` tensors along the channel axis.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.shape(), other.shape());
        ensure!(
            a.len() == 3 && b.len() == 3 && a[1..] == b[1..],
            "concat shape mismatch: {:?} vs {:?}",
            a,
            b
        );
        let out = {
            let mut d = self.tape.value(self.id).data().to_vec();
            d.extend_from_slice(self.tape.value(other.id).data());
            Tensor::new(vec![a[0] + b[0], a[1], a[2]], d)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::Concat(self.id, other.id), rg))
    }

    /// Per-patch orthonormal DCT of a `[C, H, W]` tensor; coefficients are
    /// stored where their patch's pixels were.
    pub fn patch_dct(self, side: usize) -> Result<Var<'t>> {
        let grid = PatchGrid::new(&self.shape(), side)?;
        let out = {
            let x = self.tape.value(self.id);
            Tensor::new(x.shape().to_vec(), dct::patch_dct(&grid, x.data(), false))?
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::PatchDct { x: self.id, grid }, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_gradient, random_tensor};

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.square().sum();
        assert_eq!(backward(loss, x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.5));
        let y = tape.leaf(Tensor::full(&[3], 2.0));
        let loss = y.square().sum();
        assert_eq!(backward(loss, x).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn foreign_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let z = other.leaf(Tensor::full(&[4], 1.0));
        let loss = x.square().sum();
        assert_eq!(backward(loss, z).unwrap(), Tensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        assert!(backward(x.square(), x).is_err());
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let tape = Tape::new();
        let img = random_tensor(&[1, 5, 7], 3);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = tape
            .constant(img.clone())
            .conv2d(tape.constant(k), tape.constant(Tensor::zeros(&[1])))
            .unwrap();
        assert_eq!(y.value(), img);
    }

    #[test]
    fn zero_weight_linear_returns_bias() {
        let tape = Tape::new();
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = tape
            .constant(random_tensor(&[4], 1))
            .linear(
                tape.constant(Tensor::zeros(&[3, 4])),
                tape.constant(b.clone()),
            )
            .unwrap();
        assert_eq!(y.value(), b);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let msg = x.conv2d(w, b).unwrap_err().to_string();
        assert!(
            msg.contains("[2, 4, 4]") && msg.contains("[3, 5, 3, 3]"),
            "{msg}"
        );
        let y = tape.constant(Tensor::zeros(&[3]));
        let msg = x.add(y).unwrap_err().to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[3]"), "{msg}");
    }

    // Finite-difference checks, one per primitive.

    #[test]
    fn grad_elementwise() {
        let a0 = random_tensor(&[2, 3, 3], 10);
        let b0 = random_tensor(&[2, 3, 3], 11);
        check_gradient(&a0, |t, a| {
            let b = t.constant(b0.clone());
            let y = a.mul(b)?.add(a.silu())?.sub(a.sigmoid().scale(2.0))?;
            Ok(y.add(a.scale(0.3).exp())?.offset(0.7).square().mean())
        });
    }

    #[test]
    fn grad_conv2d_input_and_weight() {
        let x0 = random_tensor(&[2, 6, 5], 20);
        let w0 = random_tensor(&[3, 2, 3, 3], 21);
        let b0 = random_tensor(&[3], 22);
        let (wc, bc) = (w0.clone(), b0.clone());
        check_gradient(&x0, move |t, x| {
            Ok(x.conv2d(t.constant(wc.clone()), t.constant(bc.clone()))?
                .square()
                .sum())
        });
        let (xc, bc) = (x0.clone(), b0.clone());
        check_gradient(&w0, move |t, w| {
            Ok(t.constant(xc.clone())
                .conv2d(w, t.constant(bc.clone()))?
                .silu()
                .sum())
        });
        check_gradient(&b0, move |t, b| {
            Ok(t.constant(x0.clone())
                .conv2d(t.constant(w0.clone()), b)?
                .square()
                .mean())
        });
    }

    #[test]
    fn grad_linear() {
        let x0 = random_tensor(&[5], 30);
        let w0 = random_tensor(&[3, 5], 31);
        let b0 = random_tensor(&[3], 32);
        let (wc, bc) = (w0.clone(), b0.clone());
        check_gradient(&x0, move |t, x| {
            Ok(x.linear(t.constant(wc.clone()), t.constant(bc.clone()))?
                .square()
                .sum())
        });
        check_gradient(&w0, move |t, w| {
            Ok(t.constant(x0.clone())
                .linear(w, t.constant(b0.clone()))?
                .silu()
                .sum())
        });
    }

    #[test]
    fn grad_channel_pool_upsample_concat() {
        let x0 = random_tensor(&[2, 4, 6], 40);
        let v0 = random_tensor(&[2], 41);
        let vc = v0.clone();
        check_gradient(&x0, move |t, x| {
            let y = x
                .add_channel(t.constant(vc.clone()))?
                .avg_pool2()?
                .upsample2()?;
            Ok(y.concat(x)?.silu().square().sum())
        });
        check_gradient(&v0, move |t, v| {
            Ok(t.constant(x0.clone()).add_channel(v)?.square().sum())
        });
    }

    #[test]
    fn grad_patch_dct() {
        let x0 = random_tensor(&[2, 8, 8], 50);
        let m0 = random_tensor(&[2, 8, 8], 51);
        check_gradient(&x0, move |t, x| {
            Ok(x.patch_dct(4)?.mul(t.constant(m0.clone()))?.sum().sigmoid())
        });
    }
}
