//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! `dL/dx` for every node that depends on a leaf created with
//! `requires_grad = true`. Nodes that do not require gradients are skipped
//! entirely, so constant inputs (context grids, labels) cost nothing on the
//! way back.
//!
//! The primitive set is sized to the model: element-wise arithmetic and
//! activations, `matmul`, stride-1 zero-padded `conv2d`, reductions,
//! broadcasting, concatenation and slicing.
//!
//! ```
//! use poseidon::diff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.item(y), 9.0);
//! assert_eq!(grads.get(x).unwrap()[0], 6.0);
//! ```

use std::cell::{Cell, Ref, RefCell};

use crate::{Error, Result};

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exprel(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    SumAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    GlobalAvgPool(Var),
    Broadcast(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss through any
    /// differentiable path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Record of evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    track_kinks: bool,
    kinks: Cell<u64>,
    consumed: Cell<bool>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0
    } else {
        x.exp_m1() / x
    }
}

fn exprel_prime(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
    } else {
        // (x e^x - e^x + 1) / x^2
        ((x - 1.0) * x.exp_m1() + x) / (x * x)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that fingerprints every non-differentiable branch taken
    /// (relu signs, max positions, clamp regions). Two evaluations with equal
    /// [`Tape::kink_signature`] lie on the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        Tape {
            track_kinks: true,
            ..Tape::default()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks.get()
    }

    fn note_kink(&self, bits: impl Iterator<Item = u64>) {
        if self.track_kinks {
            let mut h = self.kinks.get();
            for b in bits {
                h = (h ^ b).wrapping_mul(0x100_0000_01b3).rotate_left(7);
            }
            self.kinks.set(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape.clone()
    }

    /// First element of a node's value; the value of a scalar.
    pub fn item(&self, var: Var) -> f64 {
        self.nodes.borrow()[var.0].value.data[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n.value.data.iter().map(|&v| f(v)).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.push(value, rg, op)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, ta, tb)?;
            let data = ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor {
                shape: ta.shape.clone(),
                data,
            }
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn add_scalar(&self, x: Var, shift: f64) -> Var {
        self.affine(x, 1.0, shift)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        let y = self.unary(x, Op::Relu(x), |v| v.max(0.0));
        if self.track_kinks {
            let nodes = self.nodes.borrow();
            self.note_kink(nodes[x.0].value.data.iter().map(|&v| u64::from(v > 0.0)));
        }
        y
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// `(e^x - 1) / x`, continuous through 0.
    pub fn exprel(&self, x: Var) -> Var {
        self.unary(x, Op::Exprel(x), exprel)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Element-wise `x^exponent` for a constant exponent.
    pub fn pow(&self, x: Var, exponent: f64) -> Var {
        self.unary(x, Op::Pow(x, exponent), |v| v.powf(exponent))
    }

    pub fn square(&self, x: Var) -> Var {
        self.pow(x, 2.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi));
        if self.track_kinks {
            let nodes = self.nodes.borrow();
            self.note_kink(
                nodes[x.0]
                    .value
                    .data
                    .iter()
                    .map(|&v| u64::from(v < lo) | (u64::from(v > hi) << 1)),
            );
        }
        y
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("operands {:?} and {:?}", ta.shape, tb.shape),
                ));
            }
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let mut out = vec![0.0; m * n];
            matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Stride-1, zero-padded 2-D convolution (cross-correlation).
    /// `input (Ci, H, W)`, `weight (Co, Ci, k, k)` with odd `k`, optional
    /// `bias (Co)`; output `(Co, H, W)`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
            let geom = ConvGeom::new(x, w)?;
            let mut out = vec![0.0; geom.co * geom.h * geom.w];
            if let Some(b) = bias {
                let b = &nodes[b.0].value;
                if b.shape != [geom.co] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} for {} output channels", b.shape, geom.co),
                    ));
                }
                for (plane, &bv) in out.chunks_mut(geom.h * geom.w).zip(&b.data) {
                    plane.fill(bv);
                }
            }
            geom.forward(&x.data, &w.data, &mut out);
            Tensor {
                shape: vec![geom.co, geom.h, geom.w],
                data: out,
            }
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.requires(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.data.iter().sum(), nodes[x.0].requires_grad)
        };
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            (
                d.iter().sum::<f64>() / d.len() as f64,
                nodes[x.0].requires_grad,
            )
        };
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Maximum over all elements; ties resolve to the first maximal element.
    pub fn max(&self, x: Var) -> Result<Var> {
        let (m, arg, rg) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            if d.is_empty() {
                return Err(Error::shape("max", "empty tensor"));
            }
            let arg = first_argmax(d.iter().copied());
            (d[arg], arg, nodes[x.0].requires_grad)
        };
        self.note_kink(std::iter::once(arg as u64));
        Ok(self.push(Tensor::scalar(m), rg, Op::Max(x, arg)))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(op, format!("axis {axis} of {shape:?}")));
        }
        Ok(shape)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("sum_axis", x, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..][..inner];
                    for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let mut s = shape.clone();
            s[axis] = 1;
            (
                Tensor {
                    shape: s,
                    data: out,
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.check_axis("mean_axis", x, axis)?[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Maximum along `axis` (kept with extent 1); the gradient goes to the
    /// first maximal element.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("max_axis", x, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let (value, args, rg) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut args = vec![0usize; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..][..inner];
                    let dst = &mut out[o * inner..][..inner];
                    let arg = &mut args[o * inner..][..inner];
                    for i in 0..inner {
                        if src[i] > dst[i] || k == 0 {
                            dst[i] = src[i];
                            arg[i] = k;
                        }
                    }
                }
            }
            let mut s = shape.clone();
            s[axis] = 1;
            (
                Tensor {
                    shape: s,
                    data: out,
                },
                args,
                nodes[x.0].requires_grad,
            )
        };
        self.note_kink(args.iter().map(|&a| a as u64));
        Ok(self.push(value, rg, Op::MaxAxis(x, axis, args)))
    }

    /// `(C, H, W) -> (C)` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape.len() != 3 || t.data.is_empty() {
                return Err(Error::shape(
                    "global_avg_pool",
                    format!("expected (C, H, W), got {:?}", t.shape),
                ));
            }
            let hw = t.shape[1] * t.shape[2];
            let data = t
                .data
                .chunks(hw)
                .map(|c| c.iter().sum::<f64>() / hw as f64)
                .collect();
            (
                Tensor {
                    shape: vec![t.shape[0]],
                    data,
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::GlobalAvgPool(x)))
    }

    /// Numpy-style broadcast to `shape`: trailing dimensions align, and each
    /// source dimension must equal the target or be 1.
    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let map = BroadcastMap::new(&t.shape, shape)?;
            let mut data = vec![0.0; map.len()];
            map.for_each(|dst, src| data[dst] = t.data[src]);
            (
                Tensor {
                    shape: shape.to_vec(),
                    data,
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::Broadcast(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} into {shape:?}", t.shape),
                ));
            }
            (
                Tensor {
                    shape: shape.to_vec(),
                    data: t.data.clone(),
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|p| &nodes[p.0].value)
                .ok_or_else(|| Error::shape("concat", "no operands"))?;
            if axis >= first.shape.len() {
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis} of {:?}", first.shape),
                ));
            }
            let mut shape = first.shape.clone();
            shape[axis] = 0;
            for p in parts {
                let s = &nodes[p.0].value.shape;
                let compatible = s.len() == first.shape.len()
                    && s.iter()
                        .zip(&first.shape)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(
                        "concat",
                        format!("operands {:?} and {s:?} along axis {axis}", first.shape),
                    ));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = axis_split(&first.shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let block = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * block..][..block]);
                }
            }
            let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
            (Tensor { shape, data }, rg)
        };
        Ok(self.push(value, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&d[(o * n + start) * inner..][..len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            (Tensor { shape: s, data }, nodes[x.0].requires_grad)
        };
        Ok(self.push(
            value,
            rg,
            Op::Slice {
                input: x,
                axis,
                start,
            },
        ))
    }

    /// Reverse pass from a scalar node. A tape supports a single backward
    /// pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.data.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::InvalidInput(
                "backward already ran on this tape".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let y = &node.value.data;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.iter().copied());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.iter().copied());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (&val(*a).data, &val(*b).data);
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(db).map(|(g, y)| g * y));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(da).map(|(g, x)| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let db = &val(*b).data;
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(db).map(|(g, d)| g / d));
                    }
                    if wants(*b) {
                        let it = g.iter().zip(db).zip(y).map(|((g, d), q)| -g * q / d);
                        accumulate(&mut grads, *b, it);
                    }
                }
                Op::Affine(x, s) => accumulate(&mut grads, *x, g.iter().map(|g| g * s)),
                Op::Relu(x) => {
                    let it = g
                        .iter()
                        .zip(&val(*x).data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 });
                    accumulate(&mut grads, *x, it);
                }
                Op::Sigmoid(x) => accumulate(
                    &mut grads,
                    *x,
                    g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)),
                ),
                Op::Tanh(x) => accumulate(
                    &mut grads,
                    *x,
                    g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)),
                ),
                Op::Softplus(x) => {
                    let it = g.iter().zip(&val(*x).data).map(|(g, v)| g * sigmoid(*v));
                    accumulate(&mut grads, *x, it);
                }
                Op::Exprel(x) => {
                    let it = g
                        .iter()
                        .zip(&val(*x).data)
                        .map(|(g, v)| g * exprel_prime(*v));
                    accumulate(&mut grads, *x, it);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, g.iter().zip(y).map(|(g, e)| g * e)),
                Op::Log(x) => accumulate(
                    &mut grads,
                    *x,
                    g.iter().zip(&val(*x).data).map(|(g, v)| g / v),
                ),
                Op::Pow(x, c) => {
                    let it = g
                        .iter()
                        .zip(&val(*x).data)
                        .map(|(g, v)| g * c * v.powf(c - 1.0));
                    accumulate(&mut grads, *x, it);
                }
                Op::Clamp(x, lo, hi) => {
                    let it = g.iter().zip(&val(*x).data).map(|(g, v)| {
                        if *v >= *lo && *v <= *hi {
                            *g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, it);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if wants(*a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..][..n];
                            for p in 0..k {
                                let brow = &tb.data[p * n..][..n];
                                da[i * k + p] = dot(grow, brow);
                            }
                        }
                        accumulate(&mut grads, *a, da.into_iter());
                    }
                    if wants(*b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..][..n];
                            for p in 0..k {
                                let av = ta.data[i * k + p];
                                if av != 0.0 {
                                    axpy(av, grow, &mut db[p * n..][..n]);
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db.into_iter());
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (val(*input), val(*weight));
                    let geom = ConvGeom::new(x, w)?;
                    if let Some(b) = bias.filter(|b| wants(*b)) {
                        let hw = geom.h * geom.w;
                        accumulate(&mut grads, b, g.chunks(hw).map(|c| c.iter().sum::<f64>()));
                    }
                    if wants(*weight) {
                        let mut gw = vec![0.0; w.data.len()];
                        geom.weight_grad(&x.data, &g, &mut gw);
                        accumulate(&mut grads, *weight, gw.into_iter());
                    }
                    if wants(*input) {
                        let mut gx = vec![0.0; x.data.len()];
                        geom.input_grad(&w.data, &g, &mut gx);
                        accumulate(&mut grads, *input, gx.into_iter());
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).data.len();
                    accumulate(&mut grads, *x, std::iter::repeat_n(g[0], n));
                }
                Op::Mean(x) => {
                    let n = val(*x).data.len();
                    accumulate(&mut grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
                }
                Op::Max(x, arg) => {
                    let n = val(*x).data.len();
                    let it = (0..n).map(|i| if i == *arg { g[0] } else { 0.0 });
                    accumulate(&mut grads, *x, it);
                }
                Op::SumAxis(x, axis) => {
                    let (outer, n, inner) = axis_split(&val(*x).shape, *axis);
                    let it = (0..outer * n * inner).map(|i| {
                        let o = i / (n * inner);
                        g[o * inner + i % inner]
                    });
                    accumulate(&mut grads, *x, it);
                }
                Op::MaxAxis(x, axis, args) => {
                    let (outer, n, inner) = axis_split(&val(*x).shape, *axis);
                    let it = (0..outer * n * inner).map(|i| {
                        let o = i / (n * inner);
                        let k = (i / inner) % n;
                        let j = o * inner + i % inner;
                        if args[j] == k {
                            g[j]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, it);
                }
                Op::GlobalAvgPool(x) => {
                    let s = &val(*x).shape;
                    let hw = s[1] * s[2];
                    let it = (0..s[0] * hw).map(|i| g[i / hw] / hw as f64);
                    accumulate(&mut grads, *x, it);
                }
                Op::Broadcast(x) => {
                    let src = val(*x);
                    let map = BroadcastMap::new(&src.shape, &node.value.shape)?;
                    let mut gx = vec![0.0; src.data.len()];
                    map.for_each(|dst, s| gx[s] += g[dst]);
                    accumulate(&mut grads, *x, gx.into_iter());
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g.iter().copied()),
                Op::Concat(parts, axis) => {
                    let out_shape = &node.value.shape;
                    let (outer, total, inner) = axis_split(out_shape, *axis);
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).shape[*axis];
                        if wants(*p) {
                            let mut gp = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                gp.extend_from_slice(
                                    &g[(o * total + offset) * inner..][..n * inner],
                                );
                            }
                            accumulate(&mut grads, *p, gp.into_iter());
                        }
                        offset += n;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (outer, n, inner) = axis_split(&val(*input).shape, *axis);
                    let len = node.value.shape[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        gx[(o * n + start) * inner..][..len * inner]
                            .copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    accumulate(&mut grads, *input, gx.into_iter());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: impl Iterator<Item = f64>) {
    match &mut grads[var.0] {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contribution.collect()),
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..][..n], orow);
            }
        }
    }
}

/// Input is scattered from its non-zeros when at most this fraction of it
/// is non-zero.
const SPARSE_DENSITY: f64 = 0.25;

struct ConvGeom {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor) -> Result<Self> {
        let bad = || {
            Error::shape(
                "conv2d",
                format!("input {:?} with weight {:?}", x.shape, w.shape),
            )
        };
        if x.shape.len() != 3 || w.shape.len() != 4 {
            return Err(bad());
        }
        let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let (co, wci, k, k2) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(bad());
        }
        Ok(ConvGeom {
            ci,
            co,
            h,
            w: wd,
            k,
        })
    }

    /// For kernel offset `d = kk - pad`, output positions `o` whose source
    /// `o + d` is in `[0, n)`.
    fn range(n: usize, d: isize) -> std::ops::Range<usize> {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        lo..hi.max(lo)
    }

    fn nonzeros(&self, x: &[f64]) -> Option<Vec<(usize, usize, usize, f64)>> {
        let nnz = x.iter().filter(|v| **v != 0.0).count();
        if nnz as f64 > SPARSE_DENSITY * x.len() as f64 {
            return None;
        }
        let hw = self.h * self.w;
        Some(
            x.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| (i / hw, (i % hw) / self.w, i % self.w, v))
                .collect(),
        )
    }

    fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        if let Some(nz) = self.nonzeros(x) {
            for (c, yi, xi, v) in nz {
                for o in 0..self.co {
                    let plane = &mut out[o * hw..][..hw];
                    for ky in 0..k {
                        let oy = yi as isize - (ky as isize - pad);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = xi as isize - (kx as isize - pad);
                            if ox < 0 || ox >= w as isize {
                                continue;
                            }
                            let wv = wt[((o * self.ci + c) * k + ky) * k + kx];
                            plane[oy as usize * w + ox as usize] += wv * v;
                        }
                    }
                }
            }
            return;
        }
        for o in 0..self.co {
            let plane = &mut out[o * hw..][..hw];
            for c in 0..self.ci {
                let src = &x[c * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = wt[((o * self.ci + c) * k + ky) * k + kx];
                        let xr = Self::range(w, dx);
                        for y in Self::range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * w..][..w];
                            let orow = &mut plane[y * w..][..w];
                            let s0 = (xr.start as isize + dx) as usize;
                            let n = xr.len();
                            axpy(wv, &srow[s0..s0 + n], &mut orow[xr.start..xr.start + n]);
                        }
                    }
                }
            }
        }
    }

    fn weight_grad(&self, x: &[f64], g: &[f64], gw: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        if let Some(nz) = self.nonzeros(x) {
            for (c, yi, xi, v) in nz {
                for o in 0..self.co {
                    let gp = &g[o * hw..][..hw];
                    for ky in 0..k {
                        let oy = yi as isize - (ky as isize - pad);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = xi as isize - (kx as isize - pad);
                            if ox < 0 || ox >= w as isize {
                                continue;
                            }
                            gw[((o * self.ci + c) * k + ky) * k + kx] +=
                                gp[oy as usize * w + ox as usize] * v;
                        }
                    }
                }
            }
            return;
        }
        for o in 0..self.co {
            let gp = &g[o * hw..][..hw];
            for c in 0..self.ci {
                let src = &x[c * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let xr = Self::range(w, dx);
                        let s0 = (xr.start as isize + dx) as usize;
                        let n = xr.len();
                        let mut acc = 0.0;
                        for y in Self::range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            acc += dot(&gp[y * w + xr.start..][..n], &src[sy * w + s0..][..n]);
                        }
                        gw[((o * self.ci + c) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }

    fn input_grad(&self, wt: &[f64], g: &[f64], gx: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        for o in 0..self.co {
            let gp = &g[o * hw..][..hw];
            for c in 0..self.ci {
                let dst = &mut gx[c * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = wt[((o * self.ci + c) * k + ky) * k + kx];
                        let xr = Self::range(w, dx);
                        let s0 = (xr.start as isize + dx) as usize;
                        let n = xr.len();
                        for y in Self::range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            axpy(
                                wv,
                                &gp[y * w + xr.start..][..n],
                                &mut dst[sy * w + s0..][..n],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Flat index mapping for a broadcast from `src` to `dst` shape.
struct BroadcastMap {
    dst: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], dst: &[usize]) -> Result<Self> {
        if src.len() > dst.len() {
            return Err(Error::shape("broadcast", format!("{src:?} to {dst:?}")));
        }
        let lead = dst.len() - src.len();
        let mut src_strides = vec![0; dst.len()];
        let mut stride = 1;
        for i in (0..src.len()).rev() {
            let (s, d) = (src[i], dst[lead + i]);
            if s != d && s != 1 {
                return Err(Error::shape("broadcast", format!("{src:?} to {dst:?}")));
            }
            src_strides[lead + i] = if s == 1 { 0 } else { stride };
            stride *= s;
        }
        Ok(BroadcastMap {
            dst: dst.to_vec(),
            src_strides,
        })
    }

    fn len(&self) -> usize {
        self.dst.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.len();
        if n == 0 {
            return;
        }
        let rank = self.dst.len();
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for flat in 0..n {
            f(flat, src);
            for d in (0..rank).rev() {
                idx[d] += 1;
                src += self.src_strides[d];
                if idx[d] < self.dst[d] {
                    break;
                }
                src -= self.src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    /// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over checked
    /// coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `±h` evaluations straddle a non-differentiable
    /// point (different relu/max/clamp branches); excluded from the check.
    pub skipped_kinks: usize,
}

/// Compares reverse-mode gradients of the scalar function `f` at `x` with
/// central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` on every
/// coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<(f64, u64)> {
        let tape = Tape::with_kink_tracking();
        let v = tape.param(point.clone());
        let out = f(&tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::InvalidInput(
                "grad_check needs a scalar function".into(),
            ));
        }
        Ok((tape.item(out), tape.kink_signature()))
    };

    let tape = Tape::with_kink_tracking();
    let xv = tape.param(x.clone());
    let out = f(&tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidInput(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradCheck::default();
    let mut point = x.clone();
    for &i in coords {
        let orig = point.data[i];
        point.data[i] = orig + h;
        let (fp, sp) = eval(&point)?;
        point.data[i] = orig - h;
        let (fm, sm) = eval(&point)?;
        point.data[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        report.checked += 1;
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}
