//! Tape-based reverse-mode automatic differentiation.
//!
//! Every vector-Jacobian product is itself expressed with graph operations,
//! so gradients can be differentiated again. The R1 penalty relies on this:
//! it differentiates the squared input-gradient norm of the discriminator
//! with respect to the discriminator's weights.

use crate::error::{shape_err, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Powf(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    /// Elementwise product with a constant; backs relu, leaky relu and abs.
    MulMask(Tensor<T>),
    SumTo,
    BroadcastTo,
    Reshape,
    MatMul,
    Transpose,
    Conv {
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        stride: usize,
        pad: usize,
    },
    Up2,
    Up2T,
    Pool2,
    Pool2T,
    NarrowC {
        start: usize,
        len: usize,
    },
    PadC {
        before: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
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
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (op, inputs) = if requires_grad {
            (op, inputs.iter().map(|v| v.0).collect())
        } else {
            (Op::Leaf, Vec::new())
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    fn bin(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let v = tensor::binary(self.value(a), self.value(b), f)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::c(c);
        self.unary(x, Op::Scale(c), move |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = T::c(c);
        self.unary(x, Op::AddScalar, move |v| v + k)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, |v| v.ln())
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let e = T::c(p);
        self.unary(x, Op::Powf(p), move |v| v.powf(e))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.powf(x, 0.5)
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.powf(x, -0.5)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus, softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn mul_mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(shape_err!("mask {:?} vs {:?}", mask.shape(), self.shape(x)));
        }
        let v = tensor::binary(self.value(x), &mask, |a, b| a * b)?;
        Ok(self.push(v, Op::MulMask(mask), &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let mask = self.value(x).map(|v| if v > T::zero() { T::one() } else { s });
        self.mul_mask(x, mask).expect("mask built from x")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let mask = self.value(x).map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.mul_mask(x, mask).expect("mask built from x")
    }

    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = tensor::sum_to(self.value(x), shape)?;
        Ok(self.push(v, Op::SumTo, &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = tensor::broadcast_to(self.value(x), shape)?;
        Ok(self.push(v, Op::BroadcastTo, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.sum_to(x, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = tensor::transpose2d(self.value(x))?;
        Ok(self.push(v, Op::Transpose, &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::Conv { stride, pad }, &[x, w]))
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, stride: usize, pad: usize, h: usize, wd: usize) -> Result<Var> {
        let v = tensor::conv2d_input_grad(self.value(gy), self.value(w), stride, pad, h, wd)?;
        Ok(self.push(v, Op::ConvInputGrad { stride, pad }, &[gy, w]))
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, stride: usize, pad: usize, kh: usize, kw: usize) -> Result<Var> {
        let v = tensor::conv2d_weight_grad(self.value(x), self.value(gy), stride, pad, kh, kw)?;
        Ok(self.push(v, Op::ConvWeightGrad { stride, pad }, &[x, gy]))
    }

    /// Bilinear ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::upsample2(self.value(x))?;
        Ok(self.push(v, Op::Up2, &[x]))
    }

    fn upsample2_t(&mut self, x: Var) -> Result<Var> {
        let v = tensor::upsample2_t(self.value(x))?;
        Ok(self.push(v, Op::Up2T, &[x]))
    }

    /// 2×2 average pooling.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::avgpool2(self.value(x))?;
        Ok(self.push(v, Op::Pool2, &[x]))
    }

    fn avgpool2_t(&mut self, x: Var) -> Result<Var> {
        let v = tensor::avgpool2_t(self.value(x))?;
        Ok(self.push(v, Op::Pool2T, &[x]))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(v, Op::NarrowC { start, len }, &[x]))
    }

    pub fn pad_channels(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let v = tensor::pad_channels(self.value(x), before, after)?;
        Ok(self.push(v, Op::PadC { before }, &[x]))
    }

    /// Concatenate two `N×C×…` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, cb) = (self.shape(a)[1], self.shape(b)[1]);
        let pa = self.pad_channels(a, 0, cb)?;
        let pb = self.pad_channels(b, ca, 0)?;
        self.add(pa, pb)
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`.
    ///
    /// With `create_graph` the gradient computation is recorded on the tape
    /// and can be differentiated again. Targets that `y` does not depend on
    /// get zero gradients.
    pub fn grad(&mut self, y: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(y).numel() != 1 {
            return Err(shape_err!("grad needs a scalar output, got {:?}", self.shape(y)));
        }
        let top = y.0;
        let mut reach = vec![false; top + 1];
        for w in wrt {
            if w.0 <= top {
                reach[w.0] = true;
            }
        }
        for i in 0..=top {
            if !reach[i] {
                let n = &self.nodes[i];
                reach[i] = n.requires_grad && n.inputs.iter().any(|&j| reach[j]);
            }
        }

        let saved = self.recording;
        self.recording = create_graph;
        let result = self.backprop(top, &reach, wrt);
        self.recording = saved;
        result
    }

    fn backprop(&mut self, top: usize, reach: &[bool], wrt: &[Var]) -> Result<Vec<Var>> {
        let mut grads: Vec<Option<Var>> = vec![None; top + 1];
        if reach[top] {
            let shape = self.shape(Var(top)).to_vec();
            grads[top] = Some(self.constant(Tensor::ones(shape)));
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i] else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|&j| reach[j]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.vjp(i, g, &needs)?;
            for (k, c) in contribs.into_iter().enumerate() {
                let (Some(c), true) = (c, needs[k]) else { continue };
                let j = inputs[k];
                grads[j] = Some(match grads[j] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(*w).to_vec();
                    Ok(self.constant(Tensor::zeros(shape)))
                }
            })
            .collect()
    }

    fn vjp(&mut self, i: usize, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let out = Var(i);
        let inp: Vec<Var> = self.nodes[i].inputs.iter().map(|&j| Var(j)).collect();
        let op = self.nodes[i].op.clone();
        let shape_of = |s: &Self, k: usize| s.shape(inp[k]).to_vec();
        let need = |k: usize| needs.get(k).copied().unwrap_or(false);

        let r = match op {
            Op::Leaf => vec![],
            Op::Add => {
                let (sa, sb) = (shape_of(self, 0), shape_of(self, 1));
                vec![
                    opt(need(0), || self.sum_to(g, &sa))?,
                    opt(need(1), || self.sum_to(g, &sb))?,
                ]
            }
            Op::Sub => {
                let (sa, sb) = (shape_of(self, 0), shape_of(self, 1));
                let ga = opt(need(0), || self.sum_to(g, &sa))?;
                let gb = opt(need(1), || {
                    let s = self.sum_to(g, &sb)?;
                    Ok(self.neg(s))
                })?;
                vec![ga, gb]
            }
            Op::Mul => {
                let (sa, sb) = (shape_of(self, 0), shape_of(self, 1));
                let ga = opt(need(0), || {
                    let p = self.mul(g, inp[1])?;
                    self.sum_to(p, &sa)
                })?;
                let gb = opt(need(1), || {
                    let p = self.mul(g, inp[0])?;
                    self.sum_to(p, &sb)
                })?;
                vec![ga, gb]
            }
            Op::Div => {
                let (sa, sb) = (shape_of(self, 0), shape_of(self, 1));
                let ga = opt(need(0), || {
                    let q = self.div(g, inp[1])?;
                    self.sum_to(q, &sa)
                })?;
                let gb = opt(need(1), || {
                    let p = self.mul(g, out)?;
                    let q = self.div(p, inp[1])?;
                    let s = self.sum_to(q, &sb)?;
                    Ok(self.neg(s))
                })?;
                vec![ga, gb]
            }
            Op::Neg => vec![Some(self.neg(g))],
            Op::Scale(c) => vec![Some(self.scale(g, c))],
            Op::AddScalar => vec![Some(g)],
            Op::Exp => vec![Some(self.mul(g, out)?)],
            Op::Log => vec![Some(self.div(g, inp[0])?)],
            Op::Powf(p) => {
                let d = self.powf(inp[0], p - 1.0);
                let m = self.mul(g, d)?;
                vec![Some(self.scale(m, p))]
            }
            Op::Tanh => {
                let y2 = self.square(out);
                let n = self.neg(y2);
                let d = self.add_scalar(n, 1.0);
                vec![Some(self.mul(g, d)?)]
            }
            Op::Sigmoid => {
                let n = self.neg(out);
                let one_minus = self.add_scalar(n, 1.0);
                let d = self.mul(out, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Softplus => {
                let s = self.sigmoid(inp[0]);
                vec![Some(self.mul(g, s)?)]
            }
            Op::Square => {
                let m = self.mul(g, inp[0])?;
                vec![Some(self.scale(m, 2.0))]
            }
            Op::MulMask(mask) => vec![Some(self.mul_mask(g, mask)?)],
            Op::SumTo => {
                let s = shape_of(self, 0);
                vec![Some(self.broadcast_to(g, &s)?)]
            }
            Op::BroadcastTo => {
                let s = shape_of(self, 0);
                vec![Some(self.sum_to(g, &s)?)]
            }
            Op::Reshape => {
                let s = shape_of(self, 0);
                vec![Some(self.reshape(g, &s)?)]
            }
            Op::MatMul => {
                let ga = opt(need(0), || {
                    let bt = self.transpose(inp[1])?;
                    self.matmul(g, bt)
                })?;
                let gb = opt(need(1), || {
                    let at = self.transpose(inp[0])?;
                    self.matmul(at, g)
                })?;
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Conv { stride, pad } => {
                let xs = shape_of(self, 0);
                let ws = shape_of(self, 1);
                let gx = opt(need(0), || self.conv_input_grad(g, inp[1], stride, pad, xs[2], xs[3]))?;
                let gw = opt(need(1), || self.conv_weight_grad(inp[0], g, stride, pad, ws[2], ws[3]))?;
                vec![gx, gw]
            }
            Op::ConvInputGrad { stride, pad } => {
                // out = Aᵀ(gy; w)
                let ws = shape_of(self, 1);
                let ggy = opt(need(0), || self.conv2d(g, inp[1], stride, pad))?;
                let gw = opt(need(1), || self.conv_weight_grad(g, inp[0], stride, pad, ws[2], ws[3]))?;
                vec![ggy, gw]
            }
            Op::ConvWeightGrad { stride, pad } => {
                // out = W(x, gy)
                let xs = shape_of(self, 0);
                let gx = opt(need(0), || self.conv_input_grad(inp[1], g, stride, pad, xs[2], xs[3]))?;
                let ggy = opt(need(1), || self.conv2d(inp[0], g, stride, pad))?;
                vec![gx, ggy]
            }
            Op::Up2 => vec![Some(self.upsample2_t(g)?)],
            Op::Up2T => vec![Some(self.upsample2(g)?)],
            Op::Pool2 => vec![Some(self.avgpool2_t(g)?)],
            Op::Pool2T => vec![Some(self.avgpool2(g)?)],
            Op::NarrowC { start, len } => {
                let c = shape_of(self, 0)[1];
                vec![Some(self.pad_channels(g, start, c - start - len)?)]
            }
            Op::PadC { before, .. } => {
                let c = shape_of(self, 0)[1];
                vec![Some(self.narrow_channels(g, before, c)?)]
            }
        };
        Ok(r)
    }
}

fn opt<F: FnOnce() -> Result<Var>>(needed: bool, f: F) -> Result<Option<Var>> {
    if needed {
        f().map(Some)
    } else {
        Ok(None)
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let y = build(&mut g, v);
            g.value(y).item()
        };
        let mut g = Graph::new();
        let v = g.param(x0.clone());
        let y = build(&mut g, v);
        let gx = g.grad(y, &[v], false).unwrap()[0];
        let analytic = g.value(gx).data().to_vec();
        let numeric = numeric_grad(&x0, eval);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.5, -1.5, 0.9]);
        check(x.clone(), |g, v| {
            let a = g.tanh(v);
            let b = g.softplus(v);
            let c = g.mul(a, b).unwrap();
            let d = g.square(v);
            let e = g.add_scalar(d, 1.0);
            let f = g.rsqrt(e);
            let h = g.div(c, f).unwrap();
            let s = g.sigmoid(h);
            let l = g.leaky_relu(s, 0.2);
            g.mean_all(l).unwrap()
        });
        check(x, |g, v| {
            let e = g.exp(v);
            let p = g.add_scalar(e, 1.0);
            let l = g.log(p);
            let a = g.abs(v);
            let s = g.sub(l, a).unwrap();
            g.sum_all(s).unwrap()
        });
    }

    #[test]
    fn broadcast_gradients() {
        let x = t(&[1, 3], &[0.2, -0.4, 0.6]);
        check(x, |g, v| {
            let big = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
            let m = g.mul(big, v).unwrap();
            let s = g.sum_to(m, &[2, 1]).unwrap();
            let q = g.square(s);
            g.sum_all(q).unwrap()
        });
    }

    #[test]
    fn conv_and_resample_gradients() {
        let x = Tensor::from_fn(vec![2, 2, 4, 4], |i| ((i * 37 % 17) as f64 / 17.0) - 0.5);
        let w = Tensor::from_fn(vec![3, 2, 3, 3], |i| ((i * 13 % 11) as f64 / 11.0) - 0.4);
        check(x.clone(), |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, 2, 1).unwrap();
            let u = g.upsample2(y).unwrap();
            let p = g.avgpool2(u).unwrap();
            let q = g.square(p);
            g.sum_all(q).unwrap()
        });
        check(w.clone(), |g, wv| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let t = g.tanh(y);
            g.mean_all(t).unwrap()
        });
    }

    #[test]
    fn second_order_through_conv() {
        // f(w) = ‖∂/∂x Σ tanh(conv(x, w))‖²: needs the gradient graph itself.
        let x = Tensor::from_fn(vec![1, 2, 4, 4], |i| ((i * 7 % 9) as f64 / 9.0) - 0.5);
        let w = Tensor::from_fn(vec![2, 2, 3, 3], |i| ((i * 5 % 7) as f64 / 7.0) - 0.5);
        check(w, |g, wv| {
            let xv = g.param(x.clone());
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let a = g.tanh(y);
            let s = g.sum_all(a).unwrap();
            let gx = g.grad(s, &[xv], true).unwrap()[0];
            let sq = g.square(gx);
            g.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn matmul_and_channels_gradients() {
        let a = t(&[2, 3], &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6]);
        check(a, |g, v| {
            let b = g.constant(t(&[3, 2], &[1., -1., 0.5, 2., -0.5, 1.5]));
            let m = g.matmul(v, b).unwrap();
            let r = g.reshape(m, &[1, 4, 1, 1]).unwrap();
            let c = g.concat_channels(r, r).unwrap();
            let n = g.narrow_channels(c, 2, 4).unwrap();
            let s = g.softplus(n);
            g.sum_all(s).unwrap()
        });
    }

    #[test]
    fn unreached_targets_get_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(vec![2]));
        let b = g.param(Tensor::ones(vec![3]));
        let y = g.sum_all(a).unwrap();
        let gs = g.grad(y, &[a, b], false).unwrap();
        assert_eq!(g.value(gs[0]).data(), &[1.0, 1.0]);
        assert_eq!(g.value(gs[1]).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
