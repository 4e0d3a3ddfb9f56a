//! Reverse-mode differentiation over dense tensors.
//!
//! Every primitive pushes one node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes from the loss back to the
//! first leaf, visiting each node once and accumulating adjoints.

use rand::Rng;

use super::kernels::{self, ConvGeometry, Padding};
use super::tensor::Tensor;
use crate::error::{dim_err, param_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    MulConst(Var, Tensor),
    AddScalar(Var, Var),
    AddRowVec(Var, Var),
    AddColVec(Var, Var),
    MatMul(Var, Var, [usize; 3]),
    Affine {
        w: Var,
        x: Var,
        b: Var,
        dims: [usize; 3],
    },
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Conv1d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    Row(Var, usize),
    Column(Var, usize),
    StackRows(Vec<Var>),
    StackCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    LogSumExp(Var),
    LogSumExpAxis(Var, usize),
    LogMatMul(Var, Var, [usize; 3]),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// View a rank-1 or rank-2 tensor as a matrix; rank-1 becomes a row when
/// `as_row` is set, a column otherwise.
fn mat_dims(t: &Tensor, as_row: bool) -> Result<(usize, usize)> {
    match *t.shape() {
        [n] if as_row => Ok((1, n)),
        [n] => Ok((n, 1)),
        [r, c] => Ok((r, c)),
        _ => dim_err(format!("expected vector or matrix, got {:?}", t.shape())),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_len(x, y, what)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::ScaleShift(x, scale))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale_shift(x, -1.0, 0.0)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        same_len(xv, &c, "mul_const")?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(x, c)))
    }

    /// Adds a single-element variable to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("add_scalar expects a single-element operand");
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e + sv);
        Ok(self.push(v, Op::AddScalar(x, s)))
    }

    /// `out[i,j] = x[i,j] + v[j]`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(v).len() != c {
            return dim_err(format!("add_row_vec: {c} columns vs vector of {}", self.value(v).len()));
        }
        let vv = self.value(v).data();
        let mut out = self.value(x).clone();
        for (k, e) in out.data_mut().iter_mut().enumerate() {
            *e += vv[k % c];
        }
        debug_assert_eq!(out.len(), r * c);
        Ok(self.push(out, Op::AddRowVec(x, v)))
    }

    /// `out[i,j] = x[i,j] + v[i]`.
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(v).len() != r {
            return dim_err(format!("add_col_vec: {r} rows vs vector of {}", self.value(v).len()));
        }
        let vv = self.value(v).data();
        let mut out = self.value(x).clone();
        for (k, e) in out.data_mut().iter_mut().enumerate() {
            *e += vv[k / c];
        }
        Ok(self.push(out, Op::AddColVec(x, v)))
    }

    /// Matrix product; a rank-1 left operand is a row vector, a rank-1
    /// right operand a column vector, and the result keeps that rank.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = mat_dims(self.value(a), true)?;
        let (q2, r) = mat_dims(self.value(b), false)?;
        if q != q2 {
            return dim_err(format!(
                "matmul: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), p, q, r);
        let shape = match (self.value(a).rank(), self.value(b).rank()) {
            (1, _) => vec![r],
            (_, 1) => vec![p],
            _ => vec![p, r],
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::MatMul(a, b, [p, q, r])))
    }

    /// `W x + b` where `x` is `[d]` or `[d×m]` and `b` is added to every column.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (k, d) = self.value(w).dims2()?;
        let (d2, m) = mat_dims(self.value(x), false)?;
        if d != d2 || self.value(b).len() != k {
            return dim_err(format!(
                "affine: W {:?}, x {:?}, b {:?}",
                self.shape(w),
                self.shape(x),
                self.shape(b)
            ));
        }
        let mut data = kernels::matmul(self.value(w).data(), self.value(x).data(), k, d, m);
        let bv = self.value(b).data();
        for (i, row) in data.chunks_mut(m).enumerate() {
            row.iter_mut().for_each(|e| *e += bv[i]);
        }
        let shape = if self.value(x).rank() == 1 {
            vec![k]
        } else {
            vec![k, m]
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Affine { w, x, b, dims: [k, d, m] }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training, or at rate 0, `x` is returned unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return param_err(format!("dropout rate {rate} outside [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(shape, mask)?)
    }

    /// 1D convolution of `x: [c_in × t]` with `k: [c_out × c_in × w]` and bias `[c_out]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (c_in, t_in) = self.value(x).dims2()?;
        let geom = match *self.shape(k) {
            [c_out, kc, w] if kc == c_in => ConvGeometry::new(c_in, t_in, c_out, w, stride, padding)?,
            _ => {
                return dim_err(format!(
                    "conv1d: kernels {:?} do not match input channels {c_in}",
                    self.shape(k)
                ))
            }
        };
        if self.value(b).len() != geom.c_out {
            return dim_err(format!("conv1d: bias of {} for {} kernels", self.value(b).len(), geom.c_out));
        }
        let data = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let v = Tensor::new([geom.c_out, geom.t_out], data)?;
        Ok(self.push(v, Op::Conv1d { x, k, geom, b }))
    }

    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        if window == 1 {
            return Ok(x);
        }
        let (data, argmax) = kernels::maxpool_forward(self.value(x).data(), c, t, window)?;
        let v = Tensor::new([c, t / window], data)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn avgpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        if window == 1 {
            return Ok(x);
        }
        let data = kernels::avgpool_forward(self.value(x).data(), c, t, window)?;
        let v = Tensor::new([c, t / window], data)?;
        Ok(self.push(v, Op::AvgPool { x, window }))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, _) = self.value(x).dims2()?;
        if i >= r {
            return dim_err(format!("row {i} of {r}"));
        }
        let v = Tensor::vector(self.value(x).row(i).to_vec());
        Ok(self.push(v, Op::Row(x, i)))
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if j >= c {
            return dim_err(format!("column {j} of {c}"));
        }
        let xv = self.value(x);
        let v = Tensor::vector((0..r).map(|i| xv.at2(i, j)).collect());
        Ok(self.push(v, Op::Column(x, j)))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::EmptySequence);
        };
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.value(r).len() != n {
                return dim_err("stack_rows: ragged rows");
            }
            data.extend_from_slice(self.value(r).data());
        }
        let v = Tensor::new([rows.len(), n], data)?;
        Ok(self.push(v, Op::StackRows(rows.to_vec())))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let Some(&first) = cols.first() else {
            return Err(Error::EmptySequence);
        };
        let n = self.value(first).len();
        let m = cols.len();
        let mut data = vec![0.0; n * m];
        for (j, &c) in cols.iter().enumerate() {
            let cv = self.value(c);
            if cv.len() != n {
                return dim_err("stack_cols: ragged columns");
            }
            for (i, &e) in cv.data().iter().enumerate() {
                data[i * m + j] = e;
            }
        }
        let v = Tensor::new([n, m], data)?;
        Ok(self.push(v, Op::StackCols(cols.to_vec())))
    }

    /// Selects entries by flat row-major index into a vector.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return dim_err(format!("gather index {bad} out of {}", xv.len()));
        }
        let v = Tensor::vector(indices.iter().map(|&i| xv.data()[i]).collect());
        Ok(self.push(v, Op::Gather(x, indices)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `Σ_i c_i x_i` for a constant weight tensor `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let y = self.mul_const(x, c)?;
        Ok(self.sum(y))
    }

    /// Stable log-sum-exp over every entry.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(kernels::log_sum_exp(self.value(x).data()));
        self.push(v, Op::LogSumExp(x))
    }

    /// Stable log-sum-exp of a matrix along `axis` (0 reduces rows, 1 reduces columns).
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let out = match axis {
            0 => (0..c)
                .map(|j| kernels::log_sum_exp(&(0..r).map(|i| xv.at2(i, j)).collect::<Vec<_>>()))
                .collect(),
            1 => (0..r).map(|i| kernels::log_sum_exp(xv.row(i))).collect(),
            _ => return dim_err(format!("axis {axis} out of range for a matrix")),
        };
        Ok(self.push(Tensor::vector(out), Op::LogSumExpAxis(x, axis)))
    }

    /// Log-semiring matrix product `C[p,r] = ln Σ_q exp(A[p,q] + B[q,r])`,
    /// with the same rank-1 conventions as [`Tape::matmul`].
    pub fn log_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = mat_dims(self.value(a), true)?;
        let (q2, r) = mat_dims(self.value(b), false)?;
        if q != q2 {
            return dim_err(format!(
                "log_matmul: {:?} ⊗ {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = kernels::log_matmul(self.value(a).data(), self.value(b).data(), p, q, r);
        let shape = match (self.value(a).rank(), self.value(b).rank()) {
            (1, _) => vec![r],
            (_, 1) => vec![p],
            _ => vec![p, r],
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::LogMatMul(a, b, [p, q, r])))
    }

    /// Propagates adjoints from the single-element `loss` back to every
    /// node recorded before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|node| node.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| -> Result<()> {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                None => *slot = Some(Tensor::new(self.shape(v).to_vec(), data)?),
            }
            Ok(())
        };
        let xval = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec())?;
                acc(*b, gd.to_vec())?;
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec())?;
                acc(*b, gd.iter().map(|e| -e).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (xval(*a), xval(*b));
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect())?;
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect())?;
            }
            Op::ScaleShift(x, s) => acc(*x, gd.iter().map(|e| e * s).collect())?,
            Op::MulConst(x, c) => acc(*x, gd.iter().zip(c.data()).map(|(g, c)| g * c).collect())?,
            Op::AddScalar(x, s) => {
                acc(*x, gd.to_vec())?;
                acc(*s, vec![g.sum()])?;
            }
            Op::AddRowVec(x, v) => {
                let c = self.value(*v).len();
                let mut dv = vec![0.0; c];
                for (k, e) in gd.iter().enumerate() {
                    dv[k % c] += e;
                }
                acc(*x, gd.to_vec())?;
                acc(*v, dv)?;
            }
            Op::AddColVec(x, v) => {
                let r = self.value(*v).len();
                let c = gd.len() / r;
                let dv = gd.chunks(c).map(|row| row.iter().sum()).collect();
                acc(*x, gd.to_vec())?;
                acc(*v, dv)?;
            }
            Op::MatMul(a, b, [p, q, r]) => {
                let (da, db) = kernels::matmul_backward(xval(*a), xval(*b), gd, *p, *q, *r);
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Affine { w, x, b, dims: [k, d, m] } => {
                let (dw, dx) = kernels::matmul_backward(xval(*w), xval(*x), gd, *k, *d, *m);
                let dbias = gd.chunks(*m).map(|row| row.iter().sum()).collect();
                acc(*w, dw)?;
                acc(*x, dx)?;
                acc(*b, dbias)?;
            }
            Op::Transpose(x) => acc(*x, g.transpose()?.into_data())?,
            Op::Reshape(x) => acc(*x, gd.to_vec())?,
            Op::Sigmoid(x) => {
                acc(*x, gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect())?
            }
            Op::Tanh(x) => acc(*x, gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect())?,
            Op::Relu(x) => acc(
                *x,
                gd.iter()
                    .zip(xval(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )?,
            Op::Exp(x) => acc(*x, gd.iter().zip(y.data()).map(|(g, e)| g * e).collect())?,
            Op::Log(x) => acc(*x, gd.iter().zip(xval(*x)).map(|(g, v)| g / v).collect())?,
            Op::Conv1d { x, k, geom, b } => {
                let (dx, dk, db) = kernels::conv1d_backward(xval(*x), xval(*k), gd, geom);
                acc(*x, dx)?;
                acc(*k, dk)?;
                acc(*b, db)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &e) in argmax.iter().zip(gd) {
                    dx[src] += e;
                }
                acc(*x, dx)?;
            }
            Op::AvgPool { x, window } => {
                let (c, t) = self.value(*x).dims2()?;
                let t_out = t / window;
                let scale = 1.0 / *window as f64;
                let mut dx = vec![0.0; c * t];
                for ch in 0..c {
                    for o in 0..t_out {
                        let e = gd[ch * t_out + o] * scale;
                        let start = ch * t + o * window;
                        dx[start..start + window].iter_mut().for_each(|d| *d = e);
                    }
                }
                acc(*x, dx)?;
            }
            Op::Row(x, i) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                dx[i * c..(i + 1) * c].copy_from_slice(gd);
                acc(*x, dx)?;
            }
            Op::Column(x, j) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for (i, &e) in gd.iter().enumerate() {
                    dx[i * c + j] = e;
                }
                acc(*x, dx)?;
            }
            Op::StackRows(rows) => {
                let n = gd.len() / rows.len();
                for (chunk, &r) in gd.chunks(n).zip(rows) {
                    acc(r, chunk.to_vec())?;
                }
            }
            Op::StackCols(cols) => {
                let m = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    acc(c, gd.iter().skip(j).step_by(m).copied().collect())?;
                }
            }
            Op::Gather(x, indices) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &e) in indices.iter().zip(gd) {
                    dx[i] += e;
                }
                acc(*x, dx)?;
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).len()])?,
            Op::LogSumExp(x) => {
                let lse = y.item();
                acc(*x, xval(*x).iter().map(|v| gd[0] * (v - lse).exp()).collect())?
            }
            Op::LogSumExpAxis(x, axis) => {
                let xv = self.value(*x);
                let (_, c) = xv.dims2()?;
                let dx = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let o = if *axis == 0 { k % c } else { k / c };
                        gd[o] * (v - y.data()[o]).exp()
                    })
                    .collect();
                acc(*x, dx)?;
            }
            Op::LogMatMul(a, b, [p, q, r]) => {
                let (da, db) =
                    kernels::log_matmul_backward(xval(*a), xval(*b), y.data(), gd, *p, *q, *r);
                acc(*a, da)?;
                acc(*b, db)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_adjoint_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(x).item(), 1.0);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -1.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, -2.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 2], vec![5.0, 5.0]).unwrap());
        let y = tape.maxpool1d(x, 2).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0]);
    }
}
