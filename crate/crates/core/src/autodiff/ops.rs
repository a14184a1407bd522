//! Forward and backward kernels for every primitive.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The closed set of differentiable primitives.
///
/// `Add`, `Sub` and `Mul` accept a right operand whose shape is a trailing
/// suffix of the left operand's shape (bias-style broadcasting).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    /// `[m,k]·[k,n]`, `[k]·[k,n]` or `[m,k]·[k]`.
    MatMul,
    /// Input `[H,W,C]`, kernel `[KH,KW,C,O]`, zero padding on every side.
    Conv2d { stride: usize, pad: usize },
    /// Mean over every axis except the last: `[.., C] -> [C]`.
    MeanPool,
    /// Elementwise max across same-shape inputs; ties go to the lowest index.
    MaxN,
    Log,
    Sigmoid,
    Tanh,
    /// `x^p` for strictly positive `x`.
    Powf(f64),
    Dot,
    Sum,
    SquaredNorm,
    /// Concatenate along axis 0.
    Concat,
    Reshape(Vec<usize>),
    /// Select rows of a `[V,E]` table.
    GatherRows(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MeanPool => "mean_pool",
            Primitive::MaxN => "max_n",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Powf(_) => "powf",
            Primitive::Dot => "dot",
            Primitive::Sum => "sum",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::Concat => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::GatherRows(_) => "gather_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::Dot => Some(2),
            Primitive::MaxN | Primitive::Concat => None,
            _ => Some(1),
        }
    }

    /// Evaluate the primitive without recording anything.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return Err(Error::Invalid(format!("{name} takes {n} inputs, got {}", inputs.len())))
            }
            None if inputs.is_empty() => {
                return Err(Error::Invalid(format!("{name} needs at least one input")))
            }
            _ => {}
        }
        match self {
            Primitive::Add => broadcast_binary(name, inputs[0], inputs[1], |a, b| a + b),
            Primitive::Sub => broadcast_binary(name, inputs[0], inputs[1], |a, b| a - b),
            Primitive::Mul => broadcast_binary(name, inputs[0], inputs[1], |a, b| a * b),
            Primitive::ScalarMul(c) => Ok(inputs[0].map(|x| c * x)),
            Primitive::AddScalar(c) => Ok(inputs[0].map(|x| c + x)),
            Primitive::MatMul => matmul_forward(inputs[0], inputs[1]),
            Primitive::Conv2d { stride, pad } => conv2d_forward(inputs[0], inputs[1], *stride, *pad),
            Primitive::MeanPool => mean_pool_forward(inputs[0]),
            Primitive::MaxN => max_n_forward(inputs),
            Primitive::Log => {
                let x = inputs[0];
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: name, detail: format!("log of {bad}") });
                }
                Ok(x.map(f64::ln))
            }
            Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Primitive::Tanh => Ok(inputs[0].map(f64::tanh)),
            Primitive::Powf(p) => {
                let x = inputs[0];
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: name, detail: format!("powf of {bad}") });
                }
                Ok(x.map(|v| v.powf(*p)))
            }
            Primitive::Dot => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 1 || a.shape() != b.shape() {
                    return Err(Error::shape(name, &[a.shape(), b.shape()]));
                }
                Ok(Tensor::scalar(dot(a.data(), b.data())))
            }
            Primitive::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            Primitive::SquaredNorm => {
                Ok(Tensor::scalar(inputs[0].data().iter().map(|x| x * x).sum()))
            }
            Primitive::Concat => concat_forward(inputs),
            Primitive::Reshape(shape) => inputs[0].clone().reshape(shape),
            Primitive::GatherRows(rows) => gather_forward(inputs[0], rows),
        }
    }

    /// Vector-Jacobian products. `needs[i]` marks which input gradients to form.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Primitive::Add => {
                let b = inputs[1];
                vec![
                    want(0).then(|| grad.clone()),
                    want(1).then(|| reduce_to(grad, b.shape())),
                ]
            }
            Primitive::Sub => {
                let b = inputs[1];
                vec![
                    want(0).then(|| grad.clone()),
                    want(1).then(|| reduce_to(grad, b.shape()).map(|x| -x)),
                ]
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bl = b.len();
                let ga = want(0).then(|| {
                    let data = grad
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * b.data()[i % bl])
                        .collect();
                    Tensor::new(a.shape().to_vec(), data).expect("mul grad")
                });
                let gb = want(1).then(|| {
                    let mut out = vec![0.0; bl];
                    for (i, (g, x)) in grad.data().iter().zip(a.data()).enumerate() {
                        out[i % bl] += g * x;
                    }
                    Tensor::new(b.shape().to_vec(), out).expect("mul grad")
                });
                vec![ga, gb]
            }
            Primitive::ScalarMul(c) => vec![Some(grad.map(|g| c * g))],
            Primitive::AddScalar(_) => vec![Some(grad.clone())],
            Primitive::MatMul => matmul_backward(inputs[0], inputs[1], grad, want(0), want(1)),
            Primitive::Conv2d { stride, pad } => {
                conv2d_backward(inputs[0], inputs[1], grad, *stride, *pad, want(0), want(1))
            }
            Primitive::MeanPool => {
                let x = inputs[0];
                let c = *x.shape().last().unwrap();
                let positions = (x.len() / c) as f64;
                let data = (0..x.len()).map(|i| grad.data()[i % c] / positions).collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }
            Primitive::MaxN => {
                let n = output.len();
                let mut grads: Vec<Option<Tensor>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| want(i).then(|| Tensor::zeros(t.shape())))
                    .collect();
                for p in 0..n {
                    let winner = argmax_at(inputs, p);
                    if let Some(g) = grads[winner].as_mut() {
                        g.data_mut()[p] = grad.data()[p];
                    }
                }
                grads
            }
            Primitive::Log => vec![Some(zip_map(grad, inputs[0], |g, x| g / x))],
            Primitive::Sigmoid => vec![Some(zip_map(grad, output, |g, s| g * s * (1.0 - s)))],
            Primitive::Tanh => vec![Some(zip_map(grad, output, |g, t| g * (1.0 - t * t)))],
            Primitive::Powf(p) => {
                vec![Some(zip_map(grad, inputs[0], |g, x| g * p * x.powf(p - 1.0)))]
            }
            Primitive::Dot => {
                let g = grad.item();
                vec![
                    want(0).then(|| inputs[1].map(|x| g * x)),
                    want(1).then(|| inputs[0].map(|x| g * x)),
                ]
            }
            Primitive::Sum => vec![Some(Tensor::full(inputs[0].shape(), grad.item()))],
            Primitive::SquaredNorm => {
                let g = grad.item();
                vec![Some(inputs[0].map(|x| 2.0 * g * x))]
            }
            Primitive::Concat => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let part = &grad.data()[offset..offset + t.len()];
                        offset += t.len();
                        want(i).then(|| Tensor::new(t.shape().to_vec(), part.to_vec()).unwrap())
                    })
                    .collect()
            }
            Primitive::Reshape(_) => {
                vec![Some(grad.clone().reshape(inputs[0].shape()).expect("reshape grad"))]
            }
            Primitive::GatherRows(rows) => {
                let table = inputs[0];
                let e = table.shape()[1];
                let mut out = Tensor::zeros(table.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut out.data_mut()[r * e..(r + 1) * e];
                    for (d, g) in dst.iter_mut().zip(&grad.data()[k * e..(k + 1) * e]) {
                        *d += g;
                    }
                }
                vec![Some(out)]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if !is_suffix(a.shape(), b.shape()) || b.is_empty() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    let bl = b.len();
    let bd = b.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sum a broadcast gradient back down to the right operand's shape.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if n == grad.len() {
        return grad.clone().reshape(shape).unwrap();
    }
    let mut out = vec![0.0; n];
    for (i, g) in grad.data().iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let bad = || Error::shape("matmul", &[a.shape(), b.shape()]);
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n, vec![*m, *n])),
        ([k], [k2, n]) if k == k2 => Ok((1, *k, *n, vec![*n])),
        ([m, k], [k2]) if k == k2 => Ok((*m, *k, 1, vec![*m])),
        _ => Err(bad()),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
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
    Tensor::new(shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Vec<Option<Tensor>> {
    let (m, k, n, _) = matmul_dims(a, b).expect("shapes checked in forward");
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let ga = need_a.then(|| {
        // dA[i,p] = sum_j G[i,j] B[p,j]
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let grow = &gd[i * n..(i + 1) * n];
            for p in 0..k {
                out[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
            }
        }
        Tensor::new(a.shape().to_vec(), out).unwrap()
    });
    let gb = need_b.then(|| {
        // dB[p,j] = sum_i A[i,p] G[i,j]
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let grow = &gd[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &g) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
        Tensor::new(b.shape().to_vec(), out).unwrap()
    });
    vec![ga, gb]
}

struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    o: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let bad = || Error::shape("conv2d", &[x.shape(), k.shape()]);
    let (&[h, w, c], &[kh, kw, kc, o]) = (x.shape(), k.shape()) else {
        return Err(bad());
    };
    if c != kc || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(bad());
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { h, w, c, kh, kw, o, oh, ow })
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, k, stride, pad)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; g.oh * g.ow * g.o];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let dst = &mut out[(oy * g.ow + ox) * g.o..(oy * g.ow + ox + 1) * g.o];
            for ky in 0..g.kh {
                let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < g.w) else {
                        continue;
                    };
                    let src = &xd[(iy * g.w + ix) * g.c..(iy * g.w + ix + 1) * g.c];
                    for (ci, &v) in src.iter().enumerate() {
                        let krow = &kd[((ky * g.kw + kx) * g.c + ci) * g.o..][..g.o];
                        for (d, &kv) in dst.iter_mut().zip(krow) {
                            *d += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.o], out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_k: bool,
) -> Vec<Option<Tensor>> {
    let g = conv_geom(x, k, stride, pad).expect("shapes checked in forward");
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = need_x.then(|| vec![0.0; xd.len()]);
    let mut gk = need_k.then(|| vec![0.0; kd.len()]);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gout = &gd[(oy * g.ow + ox) * g.o..(oy * g.ow + ox + 1) * g.o];
            for ky in 0..g.kh {
                let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < g.w) else {
                        continue;
                    };
                    let base = (iy * g.w + ix) * g.c;
                    for ci in 0..g.c {
                        let koff = ((ky * g.kw + kx) * g.c + ci) * g.o;
                        if let Some(gx) = gx.as_mut() {
                            gx[base + ci] += dot(gout, &kd[koff..koff + g.o]);
                        }
                        if let Some(gk) = gk.as_mut() {
                            let v = xd[base + ci];
                            for (d, &gv) in gk[koff..koff + g.o].iter_mut().zip(gout) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    vec![
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        gk.map(|d| Tensor::new(k.shape().to_vec(), d).unwrap()),
    ]
}

fn mean_pool_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || x.is_empty() {
        return Err(Error::shape("mean_pool", &[x.shape()]));
    }
    let c = *x.shape().last().unwrap();
    let positions = x.len() / c;
    let mut out = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= positions as f64;
    }
    Ok(Tensor::vector(out))
}

fn argmax_at(inputs: &[&Tensor], p: usize) -> usize {
    let mut best = 0;
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.data()[p] > inputs[best].data()[p] {
            best = i;
        }
    }
    best
}

fn max_n_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let shape = inputs[0].shape();
    if inputs.iter().any(|t| t.shape() != shape) {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        return Err(Error::shape("max_n", &shapes));
    }
    let data = (0..inputs[0].len()).map(|p| inputs[argmax_at(inputs, p)].data()[p]).collect();
    Tensor::new(shape.to_vec(), data)
}

fn concat_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0].shape();
    if first.is_empty() {
        return Err(Error::shape("concat", &[first]));
    }
    let tail = &first[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for t in inputs {
        if t.rank() != first.len() || &t.shape()[1..] != tail {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            return Err(Error::shape("concat", &shapes));
        }
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

fn gather_forward(table: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let &[v, e] = table.shape() else {
        return Err(Error::shape("gather_rows", &[table.shape()]));
    };
    let mut data = Vec::with_capacity(rows.len() * e);
    for &r in rows {
        if r >= v {
            return Err(Error::Invalid(format!("gather_rows: row {r} out of {v}")));
        }
        data.extend_from_slice(&table.data()[r * e..(r + 1) * e]);
    }
    Tensor::new(vec![rows.len(), e], data)
}
