//! Wengert-tape reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and leaves
//! a gradient on every node that (transitively) depends on a leaf created with
//! `requires_grad = true`.
//!
//! A graph is single-threaded by construction. Build one graph per sample (or
//! per batch) and drop it after the gradients have been read out.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Returns one gradient (or `None`) per input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Upsample2(Var),
    Gdn {
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
        norm: Vec<T>,
    },
    PowerNormalize {
        x: Var,
        sum_sq: T,
    },
    ComplexScale {
        x: Var,
        re: T,
        im: T,
    },
    Mse(Var, Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Lower bound applied to GDN `beta` so the normalizer never vanishes.
pub const GDN_BETA_FLOOR: f64 = 1e-6;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    flops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate work (counted as 2 FLOPs per MAC) performed by
    /// matmul, convolution and GDN nodes so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b), op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_rank(2, "matmul")?;
        vb.ensure_rank(2, "matmul")?;
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        if vb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let bd = vb.data();
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_rank(2, "transpose")?;
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let d = vx.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([n, m], out)?, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Columns `start..start + len` of a 2D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_rank(2, "slice_cols")?;
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        if start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([m, len], data)?, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let m = self.shape(*first).first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            v.ensure_rank(2, "concat_cols")?;
            if v.shape()[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.shape()[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[1];
                out.extend_from_slice(&v.data()[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([m, total], out)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i] = table.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= vt.len()) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range for {} elements",
                vt.len()
            )));
        }
        let data = index.iter().map(|&i| vt.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, rg, Op::Gather { table, index }))
    }

    /// Softmax over the last axis with max subtraction. NaN inputs propagate.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim().max(1);
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Softmax(x))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped `[C]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let cn = T::of(c as f64);
        let rows = vx.len() / c.max(1);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    /// 2D cross-correlation of `x: [H, W, Cin]` with `kernel: [k, k, Cin, Cout]`,
    /// zero padding `k / 2`, stride 1 or 2. Output is `[ceil(H/s), ceil(W/s), Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        vx.ensure_rank(3, "conv2d")?;
        vk.ensure_rank(4, "conv2d")?;
        let geo = ConvGeometry::new(vx.shape(), vk.shape(), stride)?;
        let out = conv2d_forward(vx.data(), vk.data(), &geo);
        self.flops += geo.flops();
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::new([geo.ho, geo.wo, geo.cout], out)?,
            rg,
            Op::Conv2d { x, kernel, stride },
        ))
    }

    /// Nearest-neighbour x2 upsampling of `[H, W, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_rank(3, "upsample2")?;
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let d = vx.data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&d[src..src + c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([2 * h, 2 * w, c], out)?, rg, Op::Upsample2(x)))
    }

    /// Generalized divisive normalization over the last (channel) axis:
    /// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`, or the product form
    /// when `inverse` is set. `beta` is floored at [`GDN_BETA_FLOOR`] and
    /// `gamma` at zero.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(TensorError::ShapeMismatch {
                op: "gdn",
                lhs: vx.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let floor = T::of(GDN_BETA_FLOOR);
        let beta_eff: Vec<T> = self.value(beta).data().iter().map(|&b| b.max(floor)).collect();
        let gamma_eff: Vec<T> = self.value(gamma).data().iter().map(|&g| g.max(T::zero())).collect();
        let mut norm = Vec::with_capacity(vx.len());
        let mut out = Vec::with_capacity(vx.len());
        let mut sq = vec![T::zero(); c];
        for row in vx.data().chunks(c) {
            for (s, &v) in sq.iter_mut().zip(row) {
                *s = v * v;
            }
            for i in 0..c {
                let g = &gamma_eff[i * c..(i + 1) * c];
                let acc = g.iter().zip(&sq).fold(beta_eff[i], |a, (&gij, &s)| a + gij * s);
                let n = acc.sqrt();
                norm.push(n);
                out.push(if inverse { row[i] * n } else { row[i] / n });
            }
        }
        let flops = 2 * (vx.len() * c) as u64;
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.flops += flops;
        let rg = self.rg(&[x, beta, gamma]);
        Ok(self.push(
            value,
            rg,
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
                norm,
            },
        ))
    }

    /// Treats the flat data as interleaved complex pairs and rescales so the
    /// mean complex power is one: `x * sqrt(S / sum x^2)` with `S = len / 2`.
    /// An all-zero input yields zeros.
    pub fn power_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() || vx.len() % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "power_normalize needs an even, non-zero element count, got {}",
                vx.len()
            )));
        }
        let sum_sq: T = vx.data().iter().map(|&v| v * v).sum();
        let value = if sum_sq > T::zero() {
            let s = T::from_usize(vx.len() / 2).unwrap();
            let c = (s / sum_sq).sqrt();
            vx.map(|v| v * c)
        } else {
            Tensor::zeros(vx.shape().to_vec())
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::PowerNormalize { x, sum_sq }))
    }

    /// Multiplies interleaved complex pairs by the constant `re + j im`.
    pub fn complex_scale(&mut self, x: Var, re: T, im: T) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() % 2 != 0 {
            return Err(TensorError::Invalid("complex_scale needs interleaved pairs".into()));
        }
        let mut out = vx.data().to_vec();
        for pair in out.chunks_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = re * a - im * b;
            pair[1] = im * a + re * b;
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::ComplexScale { x, re, im }))
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::from_usize(p.len().max(1)).unwrap();
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), rg, Op::Mse(pred, target)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Back-propagates from a scalar `output`. Gradients accumulate, so calling
    /// backward twice on the same graph adds the second pass on top.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalar(out_shape.to_vec()));
        }
        let seed = Tensor::ones(out_shape.to_vec());
        self.backward_with(output, seed)
    }

    /// Back-propagates an arbitrary upstream gradient from `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        self.value(output).ensure_same_shape(&seed, "backward")?;
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        pending[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(gout) = pending[i].take() else { continue };
            backprop_node(&self.nodes, i, &gout, &mut pending);
            match &mut self.grads[i] {
                Some(g) => add_into(g.data_mut(), gout.data()),
                slot => *slot = Some(gout),
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Value and derivative of tanh-approximated GELU.
fn gelu<T: Scalar>(v: T) -> (T, T) {
    let half = T::of(0.5);
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let inner = c * (v + a * v * v * v);
    let t = inner.tanh();
    let y = half * v * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * v * v);
    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * dinner;
    (y, dy)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], stride: usize) -> Result<Self> {
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (k, k2, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d needs an odd square kernel, got {ks:?}"
            )));
        }
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn flops(&self) -> u64 {
        2 * (self.ho * self.wo * self.k * self.k * self.cin * self.cout) as u64
    }

    /// Input coordinate for output `o` and kernel tap `a`, if inside the image.
    #[inline]
    fn src(&self, o: usize, a: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + a) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let o = (oy * g.wo + ox) * g.cout;
            let orow = &mut out[o..o + g.cout];
            for a in 0..g.k {
                let Some(iy) = g.src(oy, a, g.h) else { continue };
                for b in 0..g.k {
                    let Some(ix) = g.src(ox, b, g.w) else { continue };
                    let xi = (iy * g.w + ix) * g.cin;
                    for ci in 0..g.cin {
                        let xv = x[xi + ci];
                        let kr = ((a * g.k + b) * g.cin + ci) * g.cout;
                        for (ov, &kv) in orow.iter_mut().zip(&k[kr..kr + g.cout]) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, gout: &Tensor<T>, pending: &mut [Option<Tensor<T>>]) {
    let node = &nodes[i];
    let g = gout.data();
    let val = |v: Var| &nodes[v.0].value;
    let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
        if !nodes[v.0].requires_grad {
            return;
        }
        let buf = pending[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
        f(buf.data_mut());
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let (ad, bd) = (va.data(), vb.data());
            acc(*a, &mut |da| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                    }
                }
            });
            acc(*b, &mut |db| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(*a, &mut |d| add_into(d, g));
            acc(*b, &mut |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(*a, &mut |d| add_into(d, g));
            acc(*b, &mut |d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(*a, &mut |d| {
                for ((x, &gv), &bv) in d.iter_mut().zip(g).zip(vb) {
                    *x += gv * bv;
                }
            });
            acc(*b, &mut |d| {
                for ((x, &gv), &av) in d.iter_mut().zip(g).zip(va) {
                    *x += gv * av;
                }
            });
        }
        Op::Scale(x, c) => acc(*x, &mut |d| {
            for (a, &gv) in d.iter_mut().zip(g) {
                *a += gv * *c;
            }
        }),
        Op::AddBias(x, bias) => {
            acc(*x, &mut |d| add_into(d, g));
            let c = val(*bias).len();
            acc(*bias, &mut |d| {
                for row in g.chunks(c) {
                    add_into(d, row);
                }
            });
        }
        Op::Transpose(x) => {
            let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
            acc(*x, &mut |d| {
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] += g[c * m + r];
                    }
                }
            });
        }
        Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
        Op::SliceCols { x, start } => {
            let n = val(*x).shape()[1];
            let len = gout.shape()[1];
            acc(*x, &mut |d| {
                for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                    add_into(&mut drow[*start..*start + len], grow);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = gout.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let n = val(p).shape()[1];
                acc(p, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(total)) {
                        add_into(drow, &grow[offset..offset + n]);
                    }
                });
                offset += n;
            }
        }
        Op::Gather { table, index } => acc(*table, &mut |d| {
            for (&ix, &gv) in index.iter().zip(g) {
                d[ix] += gv;
            }
        }),
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.last_dim().max(1);
            acc(*x, &mut |d| {
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = val(*gain).len();
            let gd = val(*gain).data();
            let cn = T::of(c as f64);
            acc(*x, &mut |d| {
                for (r, ((drow, grow), hrow)) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let dh = grow[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                    }
                    mean_dh /= cn;
                    mean_dh_h /= cn;
                    for j in 0..c {
                        let dh = grow[j] * gd[j];
                        drow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            });
            acc(*gain, &mut |d| {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        d[j] += grow[j] * hrow[j];
                    }
                }
            });
            acc(*bias, &mut |d| {
                for grow in g.chunks(c) {
                    add_into(d, grow);
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            acc(*x, &mut |d| {
                for ((a, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *a += gv;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            acc(*x, &mut |d| {
                for ((a, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *a += gv * yv * (T::one() - yv);
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            acc(*x, &mut |d| {
                for ((a, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                    *a += gv * gelu(v).1;
                }
            });
        }
        Op::Conv2d { x, kernel, stride } => {
            let (vx, vk) = (val(*x), val(*kernel));
            let geo = ConvGeometry::new(vx.shape(), vk.shape(), *stride).expect("validated in forward");
            let (xd, kd) = (vx.data(), vk.data());
            acc(*x, &mut |dx| {
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let o = (oy * geo.wo + ox) * geo.cout;
                        let grow = &g[o..o + geo.cout];
                        for a in 0..geo.k {
                            let Some(iy) = geo.src(oy, a, geo.h) else { continue };
                            for b in 0..geo.k {
                                let Some(ix) = geo.src(ox, b, geo.w) else { continue };
                                let xi = (iy * geo.w + ix) * geo.cin;
                                for ci in 0..geo.cin {
                                    let kr = ((a * geo.k + b) * geo.cin + ci) * geo.cout;
                                    dx[xi + ci] += grow
                                        .iter()
                                        .zip(&kd[kr..kr + geo.cout])
                                        .fold(T::zero(), |s, (&gv, &kv)| s + gv * kv);
                                }
                            }
                        }
                    }
                }
            });
            acc(*kernel, &mut |dk| {
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let o = (oy * geo.wo + ox) * geo.cout;
                        let grow = &g[o..o + geo.cout];
                        for a in 0..geo.k {
                            let Some(iy) = geo.src(oy, a, geo.h) else { continue };
                            for b in 0..geo.k {
                                let Some(ix) = geo.src(ox, b, geo.w) else { continue };
                                let xi = (iy * geo.w + ix) * geo.cin;
                                for ci in 0..geo.cin {
                                    let xv = xd[xi + ci];
                                    let kr = ((a * geo.k + b) * geo.cin + ci) * geo.cout;
                                    for (d, &gv) in dk[kr..kr + geo.cout].iter_mut().zip(grow) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Upsample2(x) => {
            let s = val(*x).shape();
            let (w, c) = (s[1], s[2]);
            let wo = 2 * w;
            acc(*x, &mut |d| {
                for (p, grow) in g.chunks(c).enumerate() {
                    let (y, xx) = (p / wo, p % wo);
                    let src = ((y / 2) * w + xx / 2) * c;
                    add_into(&mut d[src..src + c], grow);
                }
            });
        }
        Op::Gdn {
            x,
            beta,
            gamma,
            inverse,
            norm,
        } => {
            let vx = val(*x);
            let c = vx.last_dim();
            let xd = vx.data();
            let floor = T::of(GDN_BETA_FLOOR);
            let gamma_raw = val(*gamma).data();
            let beta_raw = val(*beta).data();
            let gamma_eff: Vec<T> = gamma_raw.iter().map(|&v| v.max(T::zero())).collect();
            // u_i = e * g_i * x_i * n_i^(e-2), e = -1 (GDN) or +1 (IGDN).
            let u: Vec<T> = xd
                .iter()
                .zip(g)
                .zip(norm)
                .map(
                    |((&xv, &gv), &n)| {
                        if *inverse {
                            gv * xv / n
                        } else {
                            -gv * xv / (n * n * n)
                        }
                    },
                )
                .collect();
            acc(*x, &mut |dx| {
                for (p, ((drow, xrow), (grow, nrow))) in dx
                    .chunks_mut(c)
                    .zip(xd.chunks(c))
                    .zip(g.chunks(c).zip(norm.chunks(c)))
                    .enumerate()
                {
                    let urow = &u[p * c..(p + 1) * c];
                    for j in 0..c {
                        let direct = if *inverse { grow[j] * nrow[j] } else { grow[j] / nrow[j] };
                        let mut cross = T::zero();
                        for i in 0..c {
                            cross += gamma_eff[i * c + j] * urow[i];
                        }
                        drow[j] += direct + xrow[j] * cross;
                    }
                }
            });
            let half = T::of(0.5);
            acc(*beta, &mut |db| {
                for urow in u.chunks(c) {
                    for i in 0..c {
                        if beta_raw[i] >= floor {
                            db[i] += half * urow[i];
                        }
                    }
                }
            });
            acc(*gamma, &mut |dg| {
                for (urow, xrow) in u.chunks(c).zip(xd.chunks(c)) {
                    for i in 0..c {
                        for j in 0..c {
                            if gamma_raw[i * c + j] >= T::zero() {
                                dg[i * c + j] += half * urow[i] * xrow[j] * xrow[j];
                            }
                        }
                    }
                }
            });
        }
        Op::PowerNormalize { x, sum_sq } => {
            if *sum_sq > T::zero() {
                let xd = val(*x).data();
                let s = T::from_usize(xd.len() / 2).unwrap();
                let c = (s / *sum_sq).sqrt();
                let dot = xd.iter().zip(g).fold(T::zero(), |a, (&xv, &gv)| a + xv * gv);
                acc(*x, &mut |d| {
                    for ((a, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *a += c * gv - c * xv * dot / *sum_sq;
                    }
                });
            }
        }
        Op::ComplexScale { x, re, im } => acc(*x, &mut |d| {
            // Adjoint of multiplication by h is multiplication by conj(h).
            for (dp, gp) in d.chunks_mut(2).zip(g.chunks(2)) {
                dp[0] += *re * gp[0] + *im * gp[1];
                dp[1] += -*im * gp[0] + *re * gp[1];
            }
        }),
        Op::Mse(p, t) => {
            let (pd, td) = (val(*p).data(), val(*t).data());
            let scale = g[0] * T::of(2.0) / T::from_usize(pd.len().max(1)).unwrap();
            acc(*p, &mut |d| {
                for ((a, &pv), &tv) in d.iter_mut().zip(pd).zip(td) {
                    *a += scale * (pv - tv);
                }
            });
            acc(*t, &mut |d| {
                for ((a, &pv), &tv) in d.iter_mut().zip(pd).zip(td) {
                    *a -= scale * (pv - tv);
                }
            });
        }
        Op::Sum(x) => acc(*x, &mut |d| {
            for a in d.iter_mut() {
                *a += g[0];
            }
        }),
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let grads = op.backward(&vals, &node.value, gout);
            for (&v, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    acc(v, &mut |d| add_into(d, gi.data()));
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
