//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding the forward value and a backward
//! recipe. Nodes are appended after their inputs, so the tape order is a
//! topological order and the backward pass is a single reverse sweep.

use crate::scalar::{cast, Scalar};
use crate::tensor::{Result, TensorBase, TensorError};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Zero-padding mode for 2-D convolution (stride 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by kernel-1.
    Valid,
    /// Output keeps the input's spatial size; kernel must be odd.
    Same,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    RsubScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, T),
    Clamp01(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    Matmul(usize, usize),
    Transpose2(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
    Diag(usize),
    RepeatScalar(usize),
    FlattenBchw(usize),
    UnflattenBchw(usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, padding: Padding },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    Upsample2(usize),
}

struct Node<T: Scalar> {
    value: TensorBase<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording tape for one forward/backward pass.
pub struct TapeBase<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for TapeBase<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> TapeBase<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add a leaf; gradients accumulate on it when `requires_grad` is set.
    pub fn leaf(&mut self, value: TensorBase<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: TensorBase<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, value: T) -> Var {
        self.constant(TensorBase::scalar(value))
    }

    pub fn value(&self, var: Var) -> &TensorBase<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `var`.
    pub fn grad(&self, var: Var) -> Option<TensorBase<T>> {
        let node = &self.nodes[var.0];
        node.grad.as_ref().map(|g| {
            TensorBase::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape")
        })
    }

    fn push(&mut self, value: TensorBase<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push_like(a, data, self.any_grad(&[a, b]), Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push_like(a, data, self.any_grad(&[a, b]), Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push_like(a, data, self.any_grad(&[a, b]), Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        if self.data(b).iter().any(|v| *v == T::zero()) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        Ok(self.push_like(a, data, self.any_grad(&[a, b]), Op::Div(a.0, b.0)))
    }

    // ---- scalar ops ----

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let data = map(self.data(a), |x| x + c);
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let data = map(self.data(a), |x| x * c);
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::MulScalar(a.0, c))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, a: Var, c: T) -> Var {
        let data = map(self.data(a), |x| c - x);
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::RsubScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Var {
        let data = map(self.data(a), |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let data = map(self.data(a), |x| one / (one + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = map(self.data(a), |x| x.exp());
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|v| *v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "log of non-positive value".into(),
            });
        }
        let data = map(self.data(a), |x| x.ln());
        let rg = self.requires_grad(a);
        Ok(self.push_like(a, data, rg, Op::Log(a.0)))
    }

    /// Elementwise `a^p` for a fixed exponent.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        let fractional = p.fract() != T::zero();
        for &v in self.data(a) {
            if fractional && v < T::zero() {
                return Err(TensorError::Domain {
                    op: "powf",
                    msg: "fractional power of negative base".into(),
                });
            }
            if p < T::zero() && v == T::zero() {
                return Err(TensorError::Domain {
                    op: "powf",
                    msg: "negative power of zero".into(),
                });
            }
        }
        let data = map(self.data(a), |x| x.powf(p));
        let rg = self.requires_grad(a);
        Ok(self.push_like(a, data, rg, Op::Powf(a.0, p)))
    }

    /// Clamp into `[0, 1]`; gradient passes only where the input already lay inside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let one = T::one();
        let data = map(self.data(a), |x| x.max(T::zero()).min(one));
        let rg = self.requires_grad(a);
        self.push_like(a, data, rg, Op::Clamp01(a.0))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        self.push(TensorBase::scalar(total), rg, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: self.shape(a).to_vec(),
                msg: "mean of empty tensor".into(),
            });
        }
        let total = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::scalar(total / cast::<T>(n as f64)),
            rg,
            Op::Mean(a.0),
        ))
    }

    fn axis_split(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op,
                shape: shape.to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split("sum_axis", a, axis)?;
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] = dst[i] + src[base + i];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(shape, out)?,
            rg,
            Op::SumAxis { input: a.0, axis },
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (_, len, _) = self.axis_split("mean_axis", a, axis)?;
        if len == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape: self.shape(a).to_vec(),
                msg: "mean over empty axis".into(),
            });
        }
        let summed = self.sum_axis(a, axis)?;
        let scale = T::one() / cast::<T>(len as f64);
        let data = map(self.data(summed), |x| x * scale);
        let rg = self.requires_grad(a);
        let shape = self.shape(summed).to_vec();
        Ok(self.push(
            TensorBase::from_vec(shape, data)?,
            rg,
            Op::MeanAxis { input: a.0, axis },
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            TensorBase::from_vec(vec![m, n], data)?,
            rg,
            Op::Matmul(a.0, b.0),
        ))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose2",
                shape: shape.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let data = transpose_raw(self.data(a), r, c);
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![c, r], data)?,
            rg,
            Op::Transpose2(a.0),
        ))
    }

    /// Dense square matrix with `a` on the diagonal.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "diag",
                shape: shape.to_vec(),
                msg: "expected rank 1".into(),
            });
        }
        let n = shape[0];
        let src = self.data(a);
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = src[i];
        }
        let rg = self.requires_grad(a);
        Ok(self.push(TensorBase::from_vec(vec![n, n], data)?, rg, Op::Diag(a.0)))
    }

    /// Repeat a rank-0 scalar into a length-`n` vector.
    pub fn repeat_scalar(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "repeat_scalar",
                shape: self.shape(a).to_vec(),
                msg: "expected a single element".into(),
            });
        }
        let v = self.data(a)[0];
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![n], vec![v; n])?,
            rg,
            Op::RepeatScalar(a.0),
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::Reshape(a.0)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.data(v);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            TensorBase::from_vec(shape, data)?,
            rg,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Gather rows of a rank-2 tensor by index list.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "index_select",
                shape: shape.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfBounds { index: ix, len: rows });
            }
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            data.extend_from_slice(&src[ix * cols..(ix + 1) * cols]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![indices.len(), cols], data)?,
            rg,
            Op::IndexSelect {
                input: a.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// `(B, C, H, W)` feature map to `(B*H*W, C)` vertex matrix,
    /// batch-major then row then column.
    pub fn flatten_bchw(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "flatten_bchw",
                shape: shape.to_vec(),
                msg: "expected rank 4".into(),
            });
        }
        let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let src = self.data(a);
        let mut data = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let vertex = (bi * h + y) * w + x;
                        data[vertex * c + ci] = src[((bi * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![b * h * w, c], data)?,
            rg,
            Op::FlattenBchw(a.0),
        ))
    }

    /// Inverse of [`flatten_bchw`](Self::flatten_bchw).
    pub fn unflatten_bchw(&mut self, a: Var, dims: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = dims;
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != b * h * w || shape[1] != c {
            return Err(TensorError::ShapeMismatch {
                op: "unflatten_bchw",
                lhs: shape.to_vec(),
                rhs: vec![b * h * w, c],
            });
        }
        let src = self.data(a);
        let mut data = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let vertex = (bi * h + y) * w + x;
                        data[((bi * c + ci) * h + y) * w + x] = src[vertex * c + ci];
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![b, c, h, w], data)?,
            rg,
            Op::UnflattenBchw(a.0),
        ))
    }

    // ---- convolution / pooling ----

    /// 2-D convolution, stride 1. Input `(B, Cin, H, W)`, weight
    /// `(Cout, Cin, kh, kw)`, optional bias `(Cout)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin != wcin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::InvalidShape {
                        op: "conv2d",
                        shape: sw,
                        msg: "same padding requires odd kernel".into(),
                    });
                }
                (kh / 2, kw / 2)
            }
        };
        let oh = (h + 2 * ph).checked_sub(kh - 1).filter(|&v| v > 0).ok_or(
            TensorError::InvalidShape {
                op: "conv2d",
                shape: si.clone(),
                msg: "kernel larger than padded input".into(),
            },
        )?;
        let ow = (w + 2 * pw).checked_sub(kw - 1).filter(|&v| v > 0).ok_or(
            TensorError::InvalidShape {
                op: "conv2d",
                shape: si.clone(),
                msg: "kernel larger than padded input".into(),
            },
        )?;
        if let Some(bv) = bias {
            let sb = self.shape(bv);
            if sb != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sb.to_vec(),
                    rhs: vec![cout],
                });
            }
        }

        let mut out = vec![T::zero(); b * cout * oh * ow];
        if let Some(bv) = bias {
            let bd = self.data(bv);
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * oh * ow;
                    let val = bd[co];
                    for v in &mut out[base..base + oh * ow] {
                        *v = val;
                    }
                }
            }
        }
        conv2d_accumulate(
            self.data(input),
            self.data(weight),
            &mut out,
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ph,
            pw,
            oh,
            ow,
        );
        let mut vars = vec![input, weight];
        if let Some(bv) = bias {
            vars.push(bv);
        }
        let rg = self.any_grad(&vars);
        Ok(self.push(
            TensorBase::from_vec(vec![b, cout, oh, ow], out)?,
            rg,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|v| v.0),
                padding,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2",
                shape,
                msg: "expected rank 4 with even spatial dims".into(),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(a);
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best_idx = in_base + (2 * y) * w + 2 * x;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * y + dy) * w + (2 * x + dx);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + y * ow + x] = best;
                    argmax[out_base + y * ow + x] = best_idx;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![b, c, oh, ow], out)?,
            rg,
            Op::MaxPool2 { input: a.0, argmax },
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "upsample2",
                shape,
                msg: "expected rank 4".into(),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data(a);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for y in 0..h {
                for x in 0..w {
                    let v = src[in_base + y * w + x];
                    for dy in 0..2 {
                        let row = out_base + (2 * y + dy) * ow + 2 * x;
                        out[row] = v;
                        out[row + 1] = v;
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            TensorBase::from_vec(vec![b, c, oh, ow], out)?,
            rg,
            Op::Upsample2(a.0),
        ))
    }

    fn push_like(&mut self, like: Var, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        let shape = self.shape(like).to_vec();
        self.push(
            TensorBase::from_vec(shape, data).expect("shape preserved"),
            requires_grad,
            op,
        )
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates gradients on every node
    /// that requires them; gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked leaf; nothing to do.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = T::one();
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn take_out_grad(&self, id: usize) -> Vec<T> {
        self.nodes[id].grad.as_ref().expect("tracked node has grad").clone()
    }

    fn add_grad(&mut self, id: usize, delta: &[T]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = self.nodes[id].grad.as_mut().expect("tracked node has grad");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    fn add_grad_at(&mut self, id: usize, index: usize, delta: T) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = self.nodes[id].grad.as_mut().expect("tracked node has grad");
        g[index] = g[index] + delta;
    }

    fn backprop_node(&mut self, id: usize) {
        // Ops are dispatched on a cloned output gradient; inputs accumulate.
        let dz = self.take_out_grad(id);
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, &dz);
                self.add_grad(*b, &dz);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, &dz);
                let neg = map(&dz, |v| -v);
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip_map(&dz, self.nodes[*b].value.data(), |g, y| g * y);
                let db = zip_map(&dz, self.nodes[*a].value.data(), |g, x| g * x);
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Div(a, b) => {
                let bd = self.nodes[*b].value.data();
                let ad = self.nodes[*a].value.data();
                let da: Vec<T> = dz.iter().zip(bd).map(|(&g, &y)| g / y).collect();
                let db: Vec<T> = dz
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::AddScalar(a) => self.add_grad(*a, &dz),
            Op::MulScalar(a, c) => {
                let da = map(&dz, |g| g * *c);
                self.add_grad(*a, &da);
            }
            Op::RsubScalar(a) => {
                let da = map(&dz, |g| -g);
                self.add_grad(*a, &da);
            }
            Op::Relu(a) => {
                let da = zip_map(&dz, self.nodes[*a].value.data(), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                });
                self.add_grad(*a, &da);
            }
            Op::Sigmoid(a) => {
                let da = zip_map(&dz, self.nodes[id].value.data(), |g, s| {
                    g * s * (T::one() - s)
                });
                self.add_grad(*a, &da);
            }
            Op::Exp(a) => {
                let da = zip_map(&dz, self.nodes[id].value.data(), |g, e| g * e);
                self.add_grad(*a, &da);
            }
            Op::Log(a) => {
                let da = zip_map(&dz, self.nodes[*a].value.data(), |g, x| g / x);
                self.add_grad(*a, &da);
            }
            Op::Powf(a, p) => {
                let pm1 = *p - T::one();
                let da = zip_map(&dz, self.nodes[*a].value.data(), |g, x| {
                    g * *p * x.powf(pm1)
                });
                self.add_grad(*a, &da);
            }
            Op::Clamp01(a) => {
                let da = zip_map(&dz, self.nodes[*a].value.data(), |g, x| {
                    if x >= T::zero() && x <= T::one() {
                        g
                    } else {
                        T::zero()
                    }
                });
                self.add_grad(*a, &da);
            }
            Op::Sum(a) => {
                let g = dz[0];
                let da = vec![g; self.nodes[*a].value.numel()];
                self.add_grad(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let g = dz[0] / cast::<T>(n as f64);
                let da = vec![g; n];
                self.add_grad(*a, &da);
            }
            Op::SumAxis { input, axis } => {
                self.backprop_axis_reduce(*input, *axis, &dz, T::one());
            }
            Op::MeanAxis { input, axis } => {
                let len = self.nodes[*input].value.shape()[*axis];
                let scale = T::one() / cast::<T>(len as f64);
                self.backprop_axis_reduce(*input, *axis, &dz, scale);
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bd = self.nodes[*b].value.data();
                let ad = self.nodes[*a].value.data();
                // dA = dZ . B^T ; dB = A^T . dZ
                let bt = transpose_raw(bd, k, n);
                let da = matmul_raw(&dz, &bt, m, n, k);
                let at = transpose_raw(ad, m, k);
                let db = matmul_raw(&at, &dz, k, m, n);
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Transpose2(a) => {
                let s_out = self.nodes[id].value.shape();
                let (r, c) = (s_out[0], s_out[1]);
                let da = transpose_raw(&dz, r, c);
                self.add_grad(*a, &da);
            }
            Op::Reshape(a) => self.add_grad(*a, &dz),
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &inp in inputs {
                    let len = self.nodes[inp].value.shape()[*axis];
                    let mut da = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * len * inner;
                        da[dst_base..dst_base + len * inner]
                            .copy_from_slice(&dz[src_base..src_base + len * inner]);
                    }
                    self.add_grad(inp, &da);
                    offset += len;
                }
            }
            Op::IndexSelect { input, indices } => {
                let cols = self.nodes[*input].value.shape()[1];
                for (row, &ix) in indices.iter().enumerate() {
                    for c in 0..cols {
                        self.add_grad_at(*input, ix * cols + c, dz[row * cols + c]);
                    }
                }
            }
            Op::Diag(a) => {
                let n = self.nodes[*a].value.numel();
                let mut da = vec![T::zero(); n];
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv = dz[i * n + i];
                }
                self.add_grad(*a, &da);
            }
            Op::RepeatScalar(a) => {
                let total = dz.iter().fold(T::zero(), |acc, &v| acc + v);
                self.add_grad(*a, &[total]);
            }
            Op::FlattenBchw(a) => {
                let s = self.nodes[*a].value.shape();
                let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
                let mut da = vec![T::zero(); b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let vertex = (bi * h + y) * w + x;
                                da[((bi * c + ci) * h + y) * w + x] = dz[vertex * c + ci];
                            }
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::UnflattenBchw(a) => {
                let s_out = self.nodes[id].value.shape();
                let [b, c, h, w] = [s_out[0], s_out[1], s_out[2], s_out[3]];
                let mut da = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let vertex = (bi * h + y) * w + x;
                                da[vertex * c + ci] = dz[((bi * c + ci) * h + y) * w + x];
                            }
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                self.backprop_conv2d(id, *input, *weight, *bias, *padding, &dz);
            }
            Op::MaxPool2 { input, argmax } => {
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    self.add_grad_at(*input, in_idx, dz[out_idx]);
                }
            }
            Op::Upsample2(a) => {
                let s = self.nodes[*a].value.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ow = 2 * w;
                let mut da = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let in_base = bc * h * w;
                    let out_base = bc * (2 * h) * ow;
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = T::zero();
                            for dy in 0..2 {
                                let row = out_base + (2 * y + dy) * ow + 2 * x;
                                acc = acc + dz[row] + dz[row + 1];
                            }
                            da[in_base + y * w + x] = acc;
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
        }
        self.nodes[id].op = op;
    }

    fn backprop_axis_reduce(&mut self, input: usize, axis: usize, dz: &[T], scale: T) {
        let shape = self.nodes[input].value.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut da = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let gsrc = &dz[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    da[base + i] = gsrc[i] * scale;
                }
            }
        }
        self.add_grad(input, &da);
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &mut self,
        out_id: usize,
        input: usize,
        weight: usize,
        bias: Option<usize>,
        padding: Padding,
        dz: &[T],
    ) {
        let si = self.nodes[input].value.shape().to_vec();
        let sw = self.nodes[weight].value.shape().to_vec();
        let so = self.nodes[out_id].value.shape().to_vec();
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (oh, ow) = (so[2], so[3]);
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (kh / 2, kw / 2),
        };

        if let Some(bv) = bias {
            if self.nodes[bv].requires_grad {
                let mut db = vec![T::zero(); cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let base = (bi * cout + co) * oh * ow;
                        let mut acc = T::zero();
                        for v in &dz[base..base + oh * ow] {
                            acc = acc + *v;
                        }
                        db[co] = db[co] + acc;
                    }
                }
                self.add_grad(bv, &db);
            }
        }

        if self.nodes[weight].requires_grad {
            let xin = self.nodes[input].value.data();
            let mut dw = vec![T::zero(); cout * cin * kh * kw];
            for bi in 0..b {
                for co in 0..cout {
                    let dz_base = (bi * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let x_base = (bi * cin + ci) * h * w;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = T::zero();
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < ph || iy - ph >= h {
                                        continue;
                                    }
                                    let x_row = x_base + (iy - ph) * w;
                                    let dz_row = dz_base + oy * ow;
                                    for ox in 0..ow {
                                        let ix = ox + kx;
                                        if ix < pw || ix - pw >= w {
                                            continue;
                                        }
                                        acc = acc + xin[x_row + (ix - pw)] * dz[dz_row + ox];
                                    }
                                }
                                let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                dw[widx] = dw[widx] + acc;
                            }
                        }
                    }
                }
            }
            self.add_grad(weight, &dw);
        }

        if self.nodes[input].requires_grad {
            let wdat = self.nodes[weight].value.data();
            let mut dx = vec![T::zero(); b * cin * h * w];
            for bi in 0..b {
                for co in 0..cout {
                    let dz_base = (bi * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let x_base = (bi * cin + ci) * h * w;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                                if wv == T::zero() {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < ph || iy - ph >= h {
                                        continue;
                                    }
                                    let x_row = x_base + (iy - ph) * w;
                                    let dz_row = dz_base + oy * ow;
                                    for ox in 0..ow {
                                        let ix = ox + kx;
                                        if ix < pw || ix - pw >= w {
                                            continue;
                                        }
                                        dx[x_row + (ix - pw)] = dx[x_row + (ix - pw)] + wv * dz[dz_row + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            self.add_grad(input, &dx);
        }
    }
}

fn map<T: Scalar>(a: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    a.iter().map(|&x| f(x)).collect()
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `(m,k) . (k,n)` row-major matrix product.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_accumulate<T: Scalar>(
    input: &[T],
    weight: &[T],
    out: &mut [T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) {
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * h * w;
                let w_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[w_base + ky * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let in_row = in_base + (iy - ph) * w;
                            let out_row = out_base + oy * ow;
                            for ox in 0..ow {
                                let ix = ox + kx;
                                if ix < pw || ix - pw >= w {
                                    continue;
                                }
                                out[out_row + ox] = out[out_row + ox] + wv * input[in_row + (ix - pw)];
                            }
                        }
                    }
                }
            }
        }
    }
}
