//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]. A [`Tape`] records every differentiable
//! operation in execution order; each recorded result is addressed by a
//! [`Var`] handle. [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar with respect to every node that
//! depends on a `requires_grad` leaf.
//!
//! Layout is row-major throughout. Images and feature maps are
//! `H × W × C`, convolution kernels `kh × kw × Cin × Cout`.

use std::fmt;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::omni::{self, PadMode, Padding};

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has an empty dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Gather {
        input: Var,
        index: Vec<Option<usize>>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: (usize, usize),
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanRows {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    AddScalar {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Log {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    LogSumExp {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    L2Distance {
        a: Var,
        b: Var,
    },
    RollingL2 {
        a: Var,
        b: Var,
    },
    Normalize {
        input: Var,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it
/// and a reverse scan is a valid reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].as_ref().map(|g| Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
            requires_grad: false,
        })
    }

    /// Gradient data, or zeros if the node received none.
    pub fn data_or_zeros(&self, var: Var) -> Vec<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.shapes[var.0].iter().product()],
        }
    }
}

fn check_same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    Ok(())
}

fn hwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0],
            got: shape.to_vec(),
        }),
    }
}

/// Width and depth of the two trailing dimensions, plus the product of the
/// leading ones. `[w, d]` is treated as `[1, w, d]`.
pub(crate) fn rows_width_depth(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [w, d] => Ok((1, w, d)),
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0],
            got: shape.to_vec(),
        }),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `out[i] = input[index[i]]`, or zero where the index is `None`.
    pub fn gather(
        &mut self,
        input: Var,
        index: Vec<Option<usize>>,
        shape: &[usize],
    ) -> Result<Var> {
        let src = self.value(input);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(
                "gather: index length does not match output shape",
            ));
        }
        if let Some(&bad) = index.iter().flatten().find(|&&i| i >= src.numel()) {
            return Err(Error::invalid(format!("gather: index {bad} out of range")));
        }
        let data = index
            .iter()
            .map(|i| i.map_or(T::zero(), |i| src.data[i]))
            .collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    pub fn pad(&mut self, input: Var, mode: &PadMode) -> Result<Var> {
        let (index, shape) = omni::pad_index(self.value(input).shape(), mode)?;
        self.gather(input, index, &shape)
    }

    /// Same-size convolution with the given padding followed by striding.
    ///
    /// Output is `(H / sh) × (W / sw) × Cout`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (h, w, cin) = hwc("conv2d", self.value(input).shape())?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kh, kw, kcin, _] = kshape[..] else {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                expected: vec![0, 0, cin, 0],
                got: kshape,
            });
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                expected: vec![kh, kw, cin, kshape[3]],
                got: kshape,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} must have odd sides"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || h % stride.0 != 0 || w % stride.1 != 0 {
            return Err(Error::invalid(format!(
                "conv2d: stride {stride:?} does not divide input {h}x{w}"
            )));
        }
        let mode = PadMode::same(padding, kh, kw);
        let padded = if mode.is_empty() {
            input
        } else {
            self.pad(input, &mode)?
        };
        self.conv2d_valid(padded, kernel, stride)
    }

    /// Unpadded convolution; windows start at multiples of the stride.
    pub fn conv2d_valid(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (h, w, cin) = hwc("conv2d", x.shape())?;
        let &[kh, kw, kcin, cout] = k.shape() else {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                expected: vec![0, 0, cin, 0],
                got: k.shape().to_vec(),
            });
        };
        if kcin != cin || kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![kh, kw, cin, cout],
                got: x.shape().to_vec(),
            });
        }
        let (sh, sw) = stride;
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut out = vec![T::zero(); oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..][..cout];
                for ky in 0..kh {
                    let row = oy * sh + ky;
                    for kx in 0..kw {
                        let col = ox * sw + kx;
                        let xs = &x.data[(row * w + col) * cin..][..cin];
                        let ks = &k.data[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            let kr = &ks[ci * cout..][..cout];
                            for (ov, &kv) in o.iter_mut().zip(kr) {
                                *ov = *ov + xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, cout], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias along the last dimension.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let c = *x.shape.last().unwrap();
        if b.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                expected: vec![c],
                got: b.shape.clone(),
            });
        }
        let data = x
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b.data).map(|(&v, &bv)| v + bv))
            .collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::AddBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
            requires_grad: false,
        };
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Windowed max over `H × W × C`; windows that do not fit are dropped.
    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = hwc("maxpool2d", x.shape())?;
        let (ph, pw) = window;
        let (sh, sw) = stride;
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 || ph > h || pw > w {
            return Err(Error::invalid(format!(
                "maxpool2d: window {window:?} / stride {stride:?} invalid for {h}x{w}"
            )));
        }
        let oh = (h - ph) / sh + 1;
        let ow = (w - pw) / sw + 1;
        let mut out = Vec::with_capacity(oh * ow * c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = (oy * sh * w + ox * sw) * c + ch;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let i = ((oy * sh + dy) * w + ox * sw + dx) * c + ch;
                            if x.data[i] > x.data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Averages `H × W × C` over rows, giving `W × C`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = hwc("mean_rows", x.shape())?;
        let inv = T::one() / T::of(h as f64);
        let mut out = vec![T::zero(); w * c];
        for row in x.data.chunks(w * c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let value = Tensor::new(vec![w, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MeanRows { input }, rg))
    }

    /// Affine map over the last dimension: `x[n × in] · weight[in × out] + bias[out]`.
    /// A rank-1 input is treated as a single row.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let fan_in = *x.shape.last().unwrap();
        let &[win, wout] = wt.shape() else {
            return Err(Error::ShapeMismatch {
                op: "dense weight",
                expected: vec![fan_in, 0],
                got: wt.shape.clone(),
            });
        };
        if win != fan_in || b.shape != [wout] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                expected: vec![fan_in, wout],
                got: vec![win, b.shape[0]],
            });
        }
        let rows = x.numel() / fan_in;
        let mut out = Vec::with_capacity(rows * wout);
        for xr in x.data.chunks(fan_in) {
            let mut o = b.data.clone();
            for (i, &xv) in xr.iter().enumerate() {
                for (ov, &wv) in o.iter_mut().zip(&wt.data[i * wout..][..wout]) {
                    *ov = *ov + xv * wv;
                }
            }
            out.extend(o);
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = wout;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(op, x, y)?;
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            requires_grad: false,
        })
    }

    fn unary(&self, input: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(input);
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.unary(input, |v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let value = self.unary(input, |v| v + c);
        let rg = self.rg(&[input]);
        self.push(value, Op::AddScalar { input }, rg)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = self.unary(input, |v| v.exp());
        let rg = self.rg(&[input]);
        self.push(value, Op::Exp { input }, rg)
    }

    pub fn ln(&mut self, input: Var) -> Var {
        let value = self.unary(input, |v| v.ln());
        let rg = self.rg(&[input]);
        self.push(value, Op::Log { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data.iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("concat inputs"));
        }
        let data: Vec<T> = inputs
            .iter()
            .flat_map(|v| self.value(*v).data.iter().copied())
            .collect();
        let value = Tensor::new(vec![data.len()], data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// `log Σ exp(x)` over all elements, computed with max subtraction.
    pub fn logsumexp(&mut self, input: Var) -> Var {
        let x = &self.value(input).data;
        let m = x.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = x.iter().map(|&v| (v - m).exp()).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp { input }, rg)
    }

    /// Dot product with a constant weight vector.
    pub fn dot_const(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                expected: vec![weights.len()],
                got: x.shape.clone(),
            });
        }
        let s = x.data.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }, rg))
    }

    /// Euclidean norm of `a − b` over the flattened tensors.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("l2_distance", x, y)?;
        let s: T = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s.sqrt()), Op::L2Distance { a, b }, rg))
    }

    /// All `w` rolling distances `‖shift_k(a) − b‖₂`, where `shift_k` moves
    /// columns left by `k` along the width dimension of `h × w × d` (or
    /// `w × d`) maps. Output shape `[w]`.
    pub fn rolling_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("rolling_l2", x, y)?;
        let (h, w, d) = rows_width_depth("rolling_l2", x.shape())?;
        let data = (0..w)
            .map(|k| rolled_sq_dist(&x.data, &y.data, h, w, d, k).sqrt())
            .collect();
        let value = Tensor::new(vec![w], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RollingL2 { a, b }, rg))
    }

    /// Scales the whole tensor to unit Euclidean norm (zero stays zero).
    pub fn normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let norm = x.data.iter().map(|&v| v * v).sum::<T>().sqrt();
        let inv = if norm > T::zero() {
            T::one() / norm
        } else {
            T::zero()
        };
        let value = self.unary(input, |v| v * inv);
        let rg = self.rg(&[input]);
        self.push(value, Op::Normalize { input, norm }, rg)
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: vec![1],
                got: v.shape.clone(),
            });
        }
        if !v.data[0].is_finite() {
            return Err(Error::invalid(format!(
                "backward: loss is not finite ({})",
                v.data[0]
            )));
        }
        self.backward_seeded(loss, Tensor::full(&v.shape, T::one()))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        check_same_shape("backward_seeded", self.value(root), &seed)?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.data);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let slot = grads[var.0]
                .get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Gather { input, index } => acc(*input, &mut |gi| {
                for (&gv, i) in g.iter().zip(index) {
                    if let Some(i) = *i {
                        gi[i] = gi[i] + gv;
                    }
                }
            }),
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (_, w, cin) = hwc("conv2d", &x.shape).unwrap();
                let (kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[3]);
                let (oh, ow) = (node.value.shape[0], node.value.shape[1]);
                let (sh, sw) = *stride;
                acc(*input, &mut |gx| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &g[(oy * ow + ox) * cout..][..cout];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let base = ((oy * sh + ky) * w + ox * sw + kx) * cin;
                                    let ks = &k.data[(ky * kw + kx) * cin * cout..][..cin * cout];
                                    for ci in 0..cin {
                                        let kr = &ks[ci * cout..][..cout];
                                        let s: T = go.iter().zip(kr).map(|(&a, &b)| a * b).sum();
                                        gx[base + ci] = gx[base + ci] + s;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &g[(oy * ow + ox) * cout..][..cout];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let base = ((oy * sh + ky) * w + ox * sw + kx) * cin;
                                    let gks = &mut gk[(ky * kw + kx) * cin * cout..][..cin * cout];
                                    for ci in 0..cin {
                                        let xv = x.data[base + ci];
                                        for (gkv, &gov) in
                                            gks[ci * cout..][..cout].iter_mut().zip(go)
                                        {
                                            *gkv = *gkv + xv * gov;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AddBias { input, bias } => {
                acc(*input, &mut |gi| {
                    gi.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b)
                });
                let c = self.value(*bias).numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Relu { input } => {
                let x = &self.value(*input).data;
                acc(*input, &mut |gi| {
                    for ((a, &gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *a = *a + gv;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |gi| {
                for (&gv, &i) in g.iter().zip(argmax) {
                    gi[i] = gi[i] + gv;
                }
            }),
            Op::MeanRows { input } => {
                let h = self.value(*input).shape[0];
                let inv = T::one() / T::of(h as f64);
                acc(*input, &mut |gi| {
                    for row in gi.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * inv);
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (fan_in, wout) = (wt.shape[0], wt.shape[1]);
                acc(*input, &mut |gi| {
                    for (gr, go) in gi.chunks_mut(fan_in).zip(g.chunks(wout)) {
                        for (i, gv) in gr.iter_mut().enumerate() {
                            let s: T = wt.data[i * wout..][..wout]
                                .iter()
                                .zip(go)
                                .map(|(&a, &b)| a * b)
                                .sum();
                            *gv = *gv + s;
                        }
                    }
                });
                acc(*weight, &mut |gw| {
                    for (xr, go) in x.data.chunks(fan_in).zip(g.chunks(wout)) {
                        for (i, &xv) in xr.iter().enumerate() {
                            for (a, &b) in gw[i * wout..][..wout].iter_mut().zip(go) {
                                *a = *a + xv * b;
                            }
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for go in g.chunks(wout) {
                        gb.iter_mut().zip(go).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(p, &q)| *p = *p + q)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(p, &q)| *p = *p + q)
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(p, &q)| *p = *p + q)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(p, &q)| *p = *p - q)
                });
            }
            Op::Mul { a, b } => {
                let (x, y) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |ga| {
                    for ((p, &q), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *p = *p + q * yv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((p, &q), &xv) in gb.iter_mut().zip(g).zip(x) {
                        *p = *p + q * xv;
                    }
                });
            }
            Op::Scale { input, factor } => acc(*input, &mut |gi| {
                gi.iter_mut()
                    .zip(g)
                    .for_each(|(p, &q)| *p = *p + q * *factor)
            }),
            Op::AddScalar { input } => acc(*input, &mut |gi| {
                gi.iter_mut().zip(g).for_each(|(p, &q)| *p = *p + q)
            }),
            Op::Exp { input } => {
                let y = &node.value.data;
                acc(*input, &mut |gi| {
                    for ((p, &q), &yv) in gi.iter_mut().zip(g).zip(y) {
                        *p = *p + q * yv;
                    }
                });
            }
            Op::Log { input } => {
                let x = &self.value(*input).data;
                acc(*input, &mut |gi| {
                    for ((p, &q), &xv) in gi.iter_mut().zip(g).zip(x) {
                        *p = *p + q / xv;
                    }
                });
            }
            Op::Sum { input } => acc(*input, &mut |gi| gi.iter_mut().for_each(|p| *p = *p + g[0])),
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).numel();
                    let part = &g[offset..offset + n];
                    acc(v, &mut |gi| {
                        gi.iter_mut().zip(part).for_each(|(p, &q)| *p = *p + q)
                    });
                    offset += n;
                }
            }
            Op::LogSumExp { input } => {
                let x = &self.value(*input).data;
                let out = node.value.data[0];
                acc(*input, &mut |gi| {
                    for (p, &xv) in gi.iter_mut().zip(x) {
                        *p = *p + g[0] * (xv - out).exp();
                    }
                });
            }
            Op::Dot { input, weights } => acc(*input, &mut |gi| {
                gi.iter_mut()
                    .zip(weights)
                    .for_each(|(p, &q)| *p = *p + g[0] * q)
            }),
            Op::L2Distance { a, b } => {
                let (x, y) = (&self.value(*a).data, &self.value(*b).data);
                let n = node.value.data[0];
                if n > T::zero() {
                    let s = g[0] / n;
                    acc(*a, &mut |ga| {
                        for ((p, &xv), &yv) in ga.iter_mut().zip(x).zip(y) {
                            *p = *p + s * (xv - yv);
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((p, &xv), &yv) in gb.iter_mut().zip(x).zip(y) {
                            *p = *p - s * (xv - yv);
                        }
                    });
                }
            }
            Op::RollingL2 { a, b } => {
                let (x, y) = (&self.value(*a).data, &self.value(*b).data);
                let (h, w, d) = rows_width_depth("rolling_l2", &self.value(*a).shape).unwrap();
                let norms = &node.value.data;
                let mut ga = vec![T::zero(); x.len()];
                let mut gb = vec![T::zero(); y.len()];
                for k in 0..w {
                    if norms[k] <= T::zero() || g[k] == T::zero() {
                        continue;
                    }
                    let s = g[k] / norms[k];
                    for r in 0..h {
                        for j in 0..w {
                            let src = (r * w + (j + k) % w) * d;
                            let dst = (r * w + j) * d;
                            for c in 0..d {
                                let diff = s * (x[src + c] - y[dst + c]);
                                ga[src + c] = ga[src + c] + diff;
                                gb[dst + c] = gb[dst + c] - diff;
                            }
                        }
                    }
                }
                acc(*a, &mut |gi| {
                    gi.iter_mut().zip(&ga).for_each(|(p, &q)| *p = *p + q)
                });
                acc(*b, &mut |gi| {
                    gi.iter_mut().zip(&gb).for_each(|(p, &q)| *p = *p + q)
                });
            }
            Op::Normalize { input, norm } => {
                if *norm > T::zero() {
                    let y = &node.value.data;
                    let proj: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    acc(*input, &mut |gi| {
                        for ((p, &q), &yv) in gi.iter_mut().zip(g).zip(y) {
                            *p = *p + (q - yv * proj) / *norm;
                        }
                    });
                }
            }
        }
    }
}

/// `‖shift_k(a) − b‖²` for flattened `h × w × d` maps.
pub(crate) fn rolled_sq_dist<T: Real>(
    a: &[T],
    b: &[T],
    h: usize,
    w: usize,
    d: usize,
    k: usize,
) -> T {
    let mut s = T::zero();
    for r in 0..h {
        for j in 0..w {
            let src = &a[(r * w + (j + k) % w) * d..][..d];
            let dst = &b[(r * w + j) * d..][..d];
            for (&p, &q) in src.iter().zip(dst) {
                s = s + (p - q) * (p - q);
            }
        }
    }
    s
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences with step `h`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe.clone().with_grad(false));
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_grad(true));
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.data_or_zeros(v);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::omni::{HorizontalPad, VerticalPad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    const CIRC: Padding = Padding {
        horizontal: HorizontalPad::Circular,
        vertical: VerticalPad::Zero,
    };

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn circular_conv_wraps_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4, 1], &[1., 2., 3., 4.]));
        let k = tape.leaf(t(&[1, 3, 1, 1], &[1., 1., 1.]));
        let y = tape.conv2d(x, k, (1, 1), CIRC).unwrap();
        assert_eq!(tape.value(y).data(), &[7., 6., 9., 8.]);
    }

    #[test]
    fn identity_kernel_is_identity_for_any_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&[4, 6, 2], &mut rng);
        let mut kernel = Tensor::zeros(&[3, 3, 2, 2]);
        for c in 0..2 {
            kernel.data_mut()[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0;
        }
        for horizontal in [HorizontalPad::Circular, HorizontalPad::Zero] {
            for vertical in [VerticalPad::Zero, VerticalPad::PoleWrap] {
                let mut tape = Tape::new();
                let x = tape.leaf(input.clone());
                let k = tape.leaf(kernel.clone());
                let y = tape
                    .conv2d(
                        x,
                        k,
                        (1, 1),
                        Padding {
                            horizontal,
                            vertical,
                        },
                    )
                    .unwrap();
                assert_eq!(tape.value(y), &input);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_stride() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[4, 6, 1]));
        let k2 = tape.leaf(Tensor::zeros(&[2, 2, 1, 1]));
        assert!(tape.conv2d(x, k2, (1, 1), CIRC).is_err());
        let k3 = tape.leaf(Tensor::zeros(&[3, 3, 1, 1]));
        assert!(tape.conv2d(x, k3, (1, 4), CIRC).is_err());
        let kc = tape.leaf(Tensor::zeros(&[3, 3, 2, 1]));
        assert!(matches!(
            tape.conv2d(x, kc, (1, 1), CIRC),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_and_maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);

        let p = tape.leaf(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let q = tape.maxpool2d(p, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(q).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(q).data(), &[4.]);
    }

    #[test]
    fn dense_matches_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5, 7], &mut rng);
        let w = random(&[7, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(x.clone()),
            tape.leaf(w.clone()),
            tape.leaf(b.clone()),
        );
        let y = tape.dense(xv, wv, bv).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[5, 3]);
        for n in 0..5 {
            for o in 0..3 {
                let mut expect = b.data()[o];
                for i in 0..7 {
                    expect += x.data()[n * 7 + i] * w.data()[i * 3 + o];
                }
                assert!((out.data()[n * 3 + o] - expect).abs() <= 1e-6);
            }
        }
        let bad = tape.leaf(random(&[6, 3], &mut rng));
        assert!(tape.dense(xv, bad, bv).is_err());
    }

    #[test]
    fn l2_distance_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[3., 0.]));
        let b = tape.leaf(t(&[2], &[0., 4.]));
        let d = tape.l2_distance(a, b).unwrap();
        assert_eq!(tape.value(d).item(), 5.0);
        let z = tape.l2_distance(a, a).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let c = tape.leaf(t(&[3], &[0., 0., 0.]));
        assert!(tape.l2_distance(a, c).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (p, q) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
            let mut tape = Tape::new();
            let (pv, qv) = (tape.leaf(p.clone()), tape.leaf(q.clone()));
            let d = tape.l2_distance(pv, qv).unwrap();
            let mut ss = 0.0;
            for i in 0..12 {
                ss += (p.data()[i] - q.data()[i]).powi(2);
            }
            assert!((tape.value(d).item() - ss.sqrt()).abs() <= 1e-9);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 3, 4]).with_grad(true));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[1.0]);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_norm() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3., 4.]).with_grad(true));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let d = tape.l2_distance(x, zero).unwrap();
        let g = tape.backward(d).unwrap().get(x).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3., 4.]).with_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3., 4.]).with_grad(true));
        let c = tape.constant(t(&[2], &[1., 1.]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = Tensor::from_fn(&[6], |_| rng.gen_range(0.5..2.0));
            let other = random(&[6], &mut rng);
            let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = finite_diff_check(
                |tape, x| {
                    let c = tape.constant(other.clone());
                    let a = tape.mul(x, c)?;
                    let b = tape.sub(a, x)?;
                    let e = tape.exp(b);
                    let l = tape.ln(x);
                    let s = tape.add(e, l)?;
                    let r = tape.relu(s);
                    let q = tape.square(r);
                    let q = tape.normalize(q);
                    let n = tape.scale(q, 0.3);
                    let m = tape.add_scalar(n, -0.2);
                    let cat = tape.concat(&[m, x])?;
                    let lse = tape.logsumexp(cat);
                    let dot = tape.dot_const(m, weights.clone())?;
                    let tot = tape.concat(&[lse, dot])?;
                    Ok(tape.sum(tot))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "err {err}");
        }
    }

    #[test]
    fn conv_pool_dense_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for round in 0..20 {
            let x = random(&[4, 8, 2], &mut rng);
            let kernel = random(&[3, 3, 2, 3], &mut rng);
            let bias = random(&[3], &mut rng);
            let dw = random(&[3, 2], &mut rng);
            let db = random(&[2], &mut rng);
            let vertical = if round % 2 == 0 {
                VerticalPad::PoleWrap
            } else {
                VerticalPad::Zero
            };
            let padding = Padding {
                horizontal: HorizontalPad::Circular,
                vertical,
            };
            let net = |tape: &mut Tape<f64>, x: Var, k: Var| -> Result<Var> {
                let b = tape.constant(bias.clone());
                let c = tape.conv2d(x, k, (1, 1), padding)?;
                let c = tape.add_bias(c, b)?;
                let r = tape.relu(c);
                let p = tape.maxpool2d(r, (2, 2), (2, 2))?;
                let m = tape.mean_rows(p)?;
                let (w, bb) = (tape.constant(dw.clone()), tape.constant(db.clone()));
                let o = tape.dense(m, w, bb)?;
                let z = tape.constant(Tensor::zeros(tape.value(o).shape()));
                tape.l2_distance(o, z)
            };
            let kc = kernel.clone();
            let err_x = finite_diff_check(
                |tape, x| {
                    let k = tape.constant(kc.clone());
                    net(tape, x, k)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let xc = x.clone();
            let err_k = finite_diff_check(
                |tape, k| {
                    let x = tape.constant(xc.clone());
                    net(tape, x, k)
                },
                &kernel,
                1e-5,
            )
            .unwrap();
            assert!(err_x <= 1e-4 && err_k <= 1e-4, "{err_x} {err_k}");
        }
    }

    #[test]
    fn rolling_l2_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random(&[2, 5, 3], &mut rng);
            let b = random(&[2, 5, 3], &mut rng);
            let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = finite_diff_check(
                |tape, a| {
                    let b = tape.constant(b.clone());
                    let r = tape.rolling_l2(a, b)?;
                    tape.dot_const(r, weights.clone())
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::from_fn(&[8, 16, 3], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f32>::from_fn(&[3, 3, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let run = || {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
            let y = tape.conv2d(xv, kv, (2, 2), CIRC).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[4, 8, 4]);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
