use super::{numel, strides, Backward, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Unary element-wise

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Atan,
    Square,
    Abs,
    AddScalar(f64),
    MulScalar(f64),
    ClampMin(f64),
}

struct Unary {
    input: Tensor,
    kind: UnaryKind,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryKind {
    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Atan => x.atan(),
            UnaryKind::Square => x * x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::AddScalar(c) => x + c,
            UnaryKind::MulScalar(c) => x * c,
            UnaryKind::ClampMin(lo) => x.max(lo),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Atan => 1.0 / (1.0 + x * x),
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::AddScalar(_) => 1.0,
            UnaryKind::MulScalar(c) => c,
            UnaryKind::ClampMin(lo) => {
                if x > lo {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Backward for Unary {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn grads(&self, out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = self
            .input
            .data()
            .iter()
            .zip(out.data())
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

fn unary(input: &Tensor, kind: UnaryKind) -> Tensor {
    let data = input.data().iter().map(|&x| kind.eval(x)).collect();
    Tensor::from_op(
        input.shape().to_vec(),
        data,
        Unary {
            input: input.clone(),
            kind,
        },
    )
}

impl Tensor {
    pub fn neg(&self) -> Tensor {
        unary(self, UnaryKind::Neg)
    }
    pub fn exp(&self) -> Tensor {
        unary(self, UnaryKind::Exp)
    }
    pub fn ln(&self) -> Tensor {
        unary(self, UnaryKind::Log)
    }
    pub fn sqrt(&self) -> Tensor {
        unary(self, UnaryKind::Sqrt)
    }
    pub fn sigmoid(&self) -> Tensor {
        unary(self, UnaryKind::Sigmoid)
    }
    /// x·σ(x)
    pub fn silu(&self) -> Tensor {
        unary(self, UnaryKind::Silu)
    }
    pub fn relu(&self) -> Tensor {
        unary(self, UnaryKind::Relu)
    }
    /// ln(1 + eˣ), computed without overflow.
    pub fn softplus(&self) -> Tensor {
        unary(self, UnaryKind::Softplus)
    }
    pub fn atan(&self) -> Tensor {
        unary(self, UnaryKind::Atan)
    }
    pub fn square(&self) -> Tensor {
        unary(self, UnaryKind::Square)
    }
    pub fn abs(&self) -> Tensor {
        unary(self, UnaryKind::Abs)
    }
    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, UnaryKind::AddScalar(c))
    }
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, UnaryKind::MulScalar(c))
    }
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        unary(self, UnaryKind::ClampMin(lo))
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}

pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}

// ---------------------------------------------------------------------------
// Binary element-wise with trailing-dimension broadcasting

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

struct Binary {
    a: Tensor,
    b: Tensor,
    kind: BinaryKind,
    // Source index of each output element; `None` when shapes already agree.
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

/// Output shape under numpy-style trailing broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let src_strides = strides(src);
    // Stride of each output axis in the source, zero where broadcast.
    let mut s = vec![0usize; n];
    for i in 0..n {
        if i + src.len() >= n {
            let j = i + src.len() - n;
            if src[j] != 1 {
                s[i] = src_strides[j];
            }
        }
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            offset += s[ax];
            if idx[ax] < out[ax] {
                break;
            }
            offset -= s[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl BinaryKind {
    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
            BinaryKind::Max => a.max(b),
            BinaryKind::Min => a.min(b),
        }
    }

    /// (∂/∂a, ∂/∂b); ties in max/min route to `a`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => (1.0 / b, -a / (b * b)),
            BinaryKind::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinaryKind::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

impl Backward for Binary {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn grads(&self, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (ad, bd) = (self.a.data(), self.b.data());
        let mut ga = needs[0].then(|| vec![0.0; ad.len()]);
        let mut gb = needs[1].then(|| vec![0.0; bd.len()]);
        for (i, &g) in grad.iter().enumerate() {
            let ia = self.a_map.as_ref().map_or(i, |m| m[i]);
            let ib = self.b_map.as_ref().map_or(i, |m| m[i]);
            let (pa, pb) = self.kind.partials(ad[ia], bd[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += g * pa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += g * pb;
            }
        }
        vec![ga, gb]
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind, name: &'static str) -> Result<Tensor> {
    let out_shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?
    };
    let a_map = (a.shape() != out_shape.as_slice()).then(|| broadcast_map(a.shape(), &out_shape));
    let b_map = (b.shape() != out_shape.as_slice()).then(|| broadcast_map(b.shape(), &out_shape));
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&a_map, &b_map) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| kind.eval(x, y)).collect(),
        _ => (0..numel(&out_shape))
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                kind.eval(ad[ia], bd[ib])
            })
            .collect(),
    };
    Ok(Tensor::from_op(
        out_shape,
        data,
        Binary {
            a: a.clone(),
            b: b.clone(),
            kind,
            a_map,
            b_map,
        },
    ))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Add, "add")
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Sub, "sub")
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Mul, "mul")
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Div, "div")
    }
    /// Element-wise maximum; on ties the gradient goes to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Max, "maximum")
    }
    /// Element-wise minimum; on ties the gradient goes to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryKind::Min, "minimum")
    }
}

// ---------------------------------------------------------------------------
// Reductions

struct SumAll {
    input: Tensor,
    scale: f64,
}

impl Backward for SumAll {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; self.input.numel()])]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduce {
    Mean,
    Max,
}

/// Reduction over the middle axis of an `[outer, len, inner]` view.
struct AxisReduce {
    input: Tensor,
    outer: usize,
    len: usize,
    inner: usize,
    kind: Reduce,
    // Winning position along the axis for each output element (max only).
    argmax: Vec<usize>,
}

impl Backward for AxisReduce {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.input.numel()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let go = grad[o * self.inner + i];
                match self.kind {
                    Reduce::Mean => {
                        let share = go / self.len as f64;
                        for k in 0..self.len {
                            g[(o * self.len + k) * self.inner + i] += share;
                        }
                    }
                    Reduce::Max => {
                        let k = self.argmax[o * self.inner + i];
                        g[(o * self.len + k) * self.inner + i] += go;
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

fn axis_reduce(input: &Tensor, axis: usize, keepdim: bool, kind: Reduce) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if len == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot reduce over empty axis {axis} of shape {shape:?}"
        )));
    }
    let x = input.data();
    let mut out = vec![0.0; outer * inner];
    let mut argmax = Vec::new();
    if kind == Reduce::Max {
        argmax = vec![0; outer * inner];
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| x[(o * len + k) * inner + i];
            match kind {
                Reduce::Mean => {
                    let s: f64 = (0..len).map(at).sum();
                    out[o * inner + i] = s / len as f64;
                }
                Reduce::Max => {
                    // First occurrence wins on ties.
                    let mut best = 0;
                    for k in 1..len {
                        if at(k) > at(best) {
                            best = k;
                        }
                    }
                    out[o * inner + i] = at(best);
                    argmax[o * inner + i] = best;
                }
            }
        }
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        AxisReduce {
            input: input.clone(),
            outer,
            len,
            inner,
            kind,
            argmax,
        },
    ))
}

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            SumAll {
                input: self.clone(),
                scale: 1.0,
            },
        )
    }

    /// Mean of all elements. The mean of an empty tensor is 0.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let s: f64 = self.data().iter().sum::<f64>() * scale;
        Tensor::from_op(
            vec![1],
            vec![s],
            SumAll {
                input: self.clone(),
                scale,
            },
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        axis_reduce(self, axis, keepdim, Reduce::Mean)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        axis_reduce(self, axis, keepdim, Reduce::Max)
    }
}

fn spatial_view(input: &Tensor, name: &str) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "{name} expects an N,C,H,W tensor, got {s:?}"
        )));
    }
    if s[2] * s[3] == 0 {
        return Err(Error::InvalidArgument(format!(
            "{name}: zero-sized spatial extent in {s:?}"
        )));
    }
    input.reshape(&[s[0], s[1], s[2] * s[3]])
}

/// Per-channel mean over H×W: `N,C,H,W → N,C`.
pub fn pool_global_avg(input: &Tensor) -> Result<Tensor> {
    spatial_view(input, "pool_global_avg")?.mean_axis(2, false)
}

/// Per-channel maximum over H×W: `N,C,H,W → N,C`. Gradient lands on the first
/// maximal element in row-major order.
pub fn pool_global_max(input: &Tensor) -> Result<Tensor> {
    spatial_view(input, "pool_global_max")?.max_axis(2, false)
}

// ---------------------------------------------------------------------------
// Softmax

struct Softmax {
    input: Tensor,
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for Softmax {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        let mut g = vec![0.0; y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let idx = |k: usize| (o * self.len + k) * self.inner + i;
                let dot: f64 = (0..self.len).map(|k| grad[idx(k)] * y[idx(k)]).sum();
                for k in 0..self.len {
                    g[idx(k)] = y[idx(k)] * (grad[idx(k)] - dot);
                }
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[idx(k)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            y,
            Softmax {
                input: self.clone(),
                outer,
                len,
                inner,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Structural ops

struct Reshape {
    input: Tensor,
}

impl Backward for Reshape {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Concat {
    inputs: Vec<Tensor>,
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

impl Backward for Concat {
    fn inputs(&self) -> Vec<Tensor> {
        self.inputs.clone()
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.lens.iter().sum();
        let mut start = 0;
        let mut result = Vec::with_capacity(self.inputs.len());
        for (t, (&len, &need)) in self.inputs.iter().zip(self.lens.iter().zip(needs)) {
            if need {
                let mut g = vec![0.0; t.numel()];
                let chunk = len * self.inner;
                for o in 0..self.outer {
                    let src = (o * total + start) * self.inner;
                    g[o * chunk..(o + 1) * chunk].copy_from_slice(&grad[src..src + chunk]);
                }
                result.push(Some(g));
            } else {
                result.push(None);
            }
            start += len;
        }
        result
    }
}

struct Gather {
    input: Tensor,
    indices: Vec<usize>,
}

impl Backward for Gather {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.input.numel()];
        for (&i, &go) in self.indices.iter().zip(grad) {
            g[i] += go;
        }
        vec![Some(g)]
    }
}

struct Linear {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
}

impl Backward for Linear {
    fn inputs(&self) -> Vec<Tensor> {
        let mut v = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.b {
            v.push(b.clone());
        }
        v
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, fin) = (self.x.shape()[0], self.x.shape()[1]);
        let fout = self.w.shape()[0];
        let (x, w) = (self.x.data(), self.w.data());
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; n * fin];
            for r in 0..n {
                for o in 0..fout {
                    let go = grad[r * fout + o];
                    for i in 0..fin {
                        gx[r * fin + i] += go * w[o * fin + i];
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; fout * fin];
            for r in 0..n {
                for o in 0..fout {
                    let go = grad[r * fout + o];
                    for i in 0..fin {
                        gw[o * fin + i] += go * x[r * fin + i];
                    }
                }
            }
            gw
        });
        let mut out = vec![gx, gw];
        if self.b.is_some() {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; fout];
                for r in 0..n {
                    for o in 0..fout {
                        gb[o] += grad[r * fout + o];
                    }
                }
                gb
            }));
        }
        out
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Reshape { input: self.clone() },
        ))
    }

    /// Flat-index selection into a rank-1 result.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                self.numel()
            )));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op(
            vec![indices.len()],
            data,
            Gather {
                input: self.clone(),
                indices: indices.to_vec(),
            },
        ))
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::InvalidArgument(format!(
            "concat axis {axis} out of range for {base:?}"
        )));
    }
    for t in &inputs[1..] {
        let s = t.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &len) in inputs.iter().zip(&lens) {
            let chunk = len * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        shape,
        data,
        Concat {
            inputs: inputs.to_vec(),
            outer,
            inner,
            lens,
        },
    ))
}

/// Affine map `x·Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("linear", xs, ws));
    }
    if let Some(b) = b {
        if b.shape() != [ws[0]] {
            return Err(Error::shape("linear bias", ws, b.shape()));
        }
    }
    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        for o in 0..fout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..fin {
                acc += xd[r * fin + i] * wd[o * fin + i];
            }
            out[r * fout + o] = acc;
        }
    }
    Ok(Tensor::from_op(
        vec![n, fout],
        out,
        Linear {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Random permutation of values at least 0.05 apart, so max-type ops stay
    /// away from ties under finite-difference perturbation.
    fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        use rand::seq::SliceRandom;
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
        v.shuffle(r);
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let t = Tensor::new(&[2], vec![-800.0, 800.0]).unwrap().sigmoid();
        assert_eq!(t.data(), &[0.0, 1.0]);
        let sp = Tensor::new(&[2], vec![-800.0, 800.0]).unwrap().softplus();
        assert_eq!(sp.data(), &[0.0, 800.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[2, 3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[4], &[2, 3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn broadcast_values() {
        let a = Tensor::new(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let s = Tensor::new(&[2, 2, 1, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let y = a.mul(&s).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 20.0, 30.0, 400.0, 500.0, 6000.0, 7000.0]);
    }

    #[test]
    fn softmax_over_single_channel_is_one() {
        let mut r = rng(1);
        let x = Tensor::randn(&[2, 1, 3, 3], 2.0, &mut r);
        let y = x.softmax(1).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn global_pools_constant_channels() {
        let mut data = vec![2.0; 16];
        data.extend(vec![-1.0; 16]);
        let x = Tensor::new(&[1, 2, 4, 4], data).unwrap();
        assert_eq!(pool_global_avg(&x).unwrap().data(), &[2.0, -1.0]);
        assert_eq!(pool_global_max(&x).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn global_pools_single_pixel_identity() {
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.3, -4.0, 7.5]).unwrap();
        assert_eq!(pool_global_avg(&x).unwrap().data(), x.data());
        assert_eq!(pool_global_max(&x).unwrap().data(), x.data());
    }

    #[test]
    fn global_avg_matches_flat_sum() {
        let mut r = rng(7);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let got = pool_global_avg(&x).unwrap();
        for nc in 0..6 {
            let s: f64 = x.data()[nc * 16..(nc + 1) * 16].iter().sum();
            assert!((got.data()[nc] - s / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn global_max_matches_scan_and_routes_to_one_hot() {
        let mut r = rng(8);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let got = pool_global_max(&x).unwrap();
        for nc in 0..6 {
            let mut best = f64::NEG_INFINITY;
            for &v in &x.data()[nc * 16..(nc + 1) * 16] {
                if v > best {
                    best = v;
                }
            }
            assert_eq!(got.data()[nc], best);
        }

        let mut data = vec![0.0; 9];
        data[4] = 5.0;
        let x = Tensor::new(&[1, 1, 3, 3], data).unwrap().requires_grad_();
        let m = pool_global_max(&x).unwrap();
        assert_eq!(m.item(), 5.0);
        m.sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(g[4], 1.0);
    }

    #[test]
    fn max_ties_route_to_first_occurrence() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 3.0, 3.0]).unwrap().requires_grad_();
        pool_global_max(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pools_reject_empty_spatial() {
        let x = Tensor::zeros(&[1, 2, 0, 3]);
        assert!(pool_global_avg(&x).is_err());
        assert!(pool_global_max(&x).is_err());
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(concat(&[c, bad], 1).is_err());
    }

    #[test]
    fn gradcheck_unary_ops() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let x = Tensor::randn(&[3, 4], 1.5, &mut r);
            let pos = Tensor::rand_uniform(&[3, 4], 0.2, 3.0, &mut r);
            let w = Tensor::randn(&[3, 4], 1.0, &mut r);
            let weighted = |t: Tensor| t.mul(&w).unwrap().sum();
            let checks: Vec<(&str, GradCheck)> = vec![
                ("sigmoid", check_gradients(|v| weighted(v[0].sigmoid()), &[x.clone()])),
                ("silu", check_gradients(|v| weighted(v[0].silu()), &[x.clone()])),
                ("softplus", check_gradients(|v| weighted(v[0].softplus()), &[x.clone()])),
                ("exp", check_gradients(|v| weighted(v[0].exp()), &[x.clone()])),
                ("atan", check_gradients(|v| weighted(v[0].atan()), &[x.clone()])),
                ("square", check_gradients(|v| weighted(v[0].square()), &[x.clone()])),
                ("ln", check_gradients(|v| weighted(v[0].ln()), &[pos.clone()])),
                ("sqrt", check_gradients(|v| weighted(v[0].sqrt()), &[pos.clone()])),
            ];
            for (name, c) in checks {
                assert!(c.max_rel_error < 1e-4, "{name} seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn gradcheck_binary_broadcast() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
            let b = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r);
            let bs = separated(&[2, 3, 1, 1], &mut r);
            let a = Tensor::new(a.shape(), a.data().iter().enumerate().map(|(i, v)| {
                // keep |a - b| > 0.01 so max/min stay differentiable
                let bv = bs.data()[i / 4];
                if (v - bv).abs() < 0.01 { bv + 0.5 } else { *v }
            }).collect()).unwrap();
            let den = Tensor::rand_uniform(&[2, 3, 1, 1], 0.5, 2.0, &mut r);
            for (name, c) in [
                ("add", check_gradients(|v| v[0].add(&v[1]).unwrap().square().sum(), &[a.clone(), b.clone()])),
                ("sub", check_gradients(|v| v[0].sub(&v[1]).unwrap().square().sum(), &[a.clone(), b.clone()])),
                ("mul", check_gradients(|v| v[0].mul(&v[1]).unwrap().sum(), &[a.clone(), b.clone()])),
                ("div", check_gradients(|v| v[0].div(&v[1]).unwrap().sum(), &[a.clone(), den.clone()])),
                ("max", check_gradients(|v| v[0].maximum(&v[1]).unwrap().square().sum(), &[a.clone(), bs.clone()])),
                ("min", check_gradients(|v| v[0].minimum(&v[1]).unwrap().square().sum(), &[a.clone(), bs.clone()])),
            ] {
                assert!(c.max_rel_error < 1e-4, "{name} seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        let mut r = rng(3);
        let a = Tensor::randn(&[5], 1.0, &mut r).requires_grad_();
        let b = Tensor::randn(&[5], 1.0, &mut r);
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), b.to_vec());
    }

    #[test]
    fn gradcheck_reductions_softmax_linear_concat() {
        for seed in 0..5 {
            let mut r = rng(200 + seed);
            let x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
            let w4 = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
            let w2 = Tensor::randn(&[2, 3], 1.0, &mut r);
            let lw = Tensor::randn(&[4, 3], 1.0, &mut r);
            let lb = Tensor::randn(&[4], 1.0, &mut r);
            let y = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut r);
            let xs = separated(&[2, 3, 3, 3], &mut r);
            for (name, c) in [
                ("gap", check_gradients(|v| pool_global_avg(&v[0]).unwrap().mul(&w2).unwrap().sum(), &[x.clone()])),
                ("gmp", check_gradients(|v| pool_global_max(&v[0]).unwrap().mul(&w2).unwrap().sum(), &[xs.clone()])),
                ("mean_axis", check_gradients(|v| v[0].mean_axis(1, true).unwrap().square().sum(), &[x.clone()])),
                ("max_axis", check_gradients(|v| v[0].max_axis(1, true).unwrap().square().sum(), &[xs.clone()])),
                ("softmax_c", check_gradients(|v| v[0].softmax(1).unwrap().mul(&w4).unwrap().sum(), &[x.clone()])),
                ("softmax_last", check_gradients(|v| v[0].softmax(3).unwrap().mul(&w4).unwrap().sum(), &[x.clone()])),
                ("linear", check_gradients(
                    |v| linear(&v[0], &v[1], Some(&v[2])).unwrap().sigmoid().sum(),
                    &[w2.clone(), lw.clone(), lb.clone()],
                )),
                ("concat", check_gradients(
                    |v| concat(&[v[0].clone(), v[1].clone()], 1).unwrap().square().mean(),
                    &[x.clone(), y.clone()],
                )),
                ("gather", check_gradients(|v| v[0].gather(&[0, 5, 5, 17]).unwrap().square().sum(), &[x.clone()])),
            ] {
                assert!(c.max_rel_error < 1e-4, "{name} seed {seed}: {c:?}");
            }
        }
    }
}
