use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{broadcast_shapes, broadcast_strides, for_each_index, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to the arguments of `log` and to divisor magnitudes.
pub const NUMERIC_FLOOR: f64 = 1e-12;

/// Primitive operations understood by the tape.
///
/// Broadcasting rules:
/// - `Add`, `Sub`, `Mul`, `Div`, `Mask`: shapes are right-aligned and any
///   extent of 1 (or missing leading axis) expands to the other operand.
/// - `Matmul`: operands have rank >= 2; the last two axes contract as
///   `[n, k] x [k, m] -> [n, m]` and the leading (batch) axes broadcast as
///   above.
/// - `ConcatLastDim`: all leading axes must match exactly.
/// - `Mask`: the second input is treated as a constant gate; no gradient
///   flows into it.
/// - every other primitive is unary and shape-preserving except the
///   reductions (`Sum`, `Mean` produce a scalar, `SumAxis` drops one axis,
///   `LogSumExpLastDim` drops the last axis) and the view ops (`Reshape`,
///   `Slice`).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Neg,
    Sin,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp { lo: f64, hi: f64 },
    SoftmaxLastDim,
    LogSumExpLastDim,
    ConcatLastDim,
    Mask,
    Sum,
    Mean,
    SumAxis(usize),
    Reshape(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Matmul => "matmul",
            Primitive::Neg => "neg",
            Primitive::Sin => "sin",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Clamp { .. } => "clamp",
            Primitive::SoftmaxLastDim => "softmax",
            Primitive::LogSumExpLastDim => "logsumexp",
            Primitive::ConcatLastDim => "concat",
            Primitive::Mask => "mask",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Reshape(_) => "reshape",
            Primitive::Slice { .. } => "slice",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Matmul
            | Primitive::Mask => Some(2),
            Primitive::ConcatLastDim => None,
            _ => Some(1),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_divisor(b: f64) -> f64 {
    if b.abs() >= NUMERIC_FLOOR {
        b
    } else if b < 0.0 {
        -NUMERIC_FLOOR
    } else {
        NUMERIC_FLOOR
    }
}

fn unary_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let values = x.values().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), values).expect("shape preserved")
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), values);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut values = vec![0.0; out_shape.iter().product()];
    let (av, bv) = (a.values(), b.values());
    for_each_index(&out_shape, [&sa, &sb], |flat, [oa, ob]| {
        values[flat] = f(av[oa], bv[ob]);
    });
    Tensor::new(out_shape, values)
}

/// Per-operand gradients of a broadcasting binary op, reduced to each
/// operand's shape. `da`/`db` map (a, b, upstream) to the local adjoints.
fn binary_backward(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    grad: &[f64],
    need: [bool; 2],
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> [Option<Vec<f64>>; 2] {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut ga = need[0].then(|| vec![0.0; a.len()]);
    let mut gb = need[1].then(|| vec![0.0; b.len()]);
    let (av, bv) = (a.values(), b.values());
    for_each_index(out_shape, [&sa, &sb], |flat, [oa, ob]| {
        let g = grad[flat];
        if let Some(ga) = ga.as_mut() {
            ga[oa] += da(av[oa], bv[ob], g);
        }
        if let Some(gb) = gb.as_mut() {
            gb[ob] += db(av[oa], bv[ob], g);
        }
    });
    [ga, gb]
}

struct MatmulPlan {
    n: usize,
    k: usize,
    m: usize,
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn matmul_plan(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(err());
    }
    let (n, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, m) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(err());
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let batch = broadcast_shapes(ba, bb).ok_or_else(err)?;
    let sa = broadcast_strides(ba, &batch)
        .into_iter()
        .map(|s| s * n * k)
        .collect();
    let sb = broadcast_strides(bb, &batch)
        .into_iter()
        .map(|s| s * k * m)
        .collect();
    Ok(MatmulPlan {
        n,
        k,
        m,
        batch,
        sa,
        sb,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a, b)?;
    let mut shape = p.batch.clone();
    shape.extend([p.n, p.m]);
    let mut out = vec![0.0; shape.iter().product()];
    let (av, bv) = (a.values(), b.values());
    let block = p.n * p.m;
    for_each_index(&p.batch, [&p.sa, &p.sb], |bi, [oa, ob]| {
        let c = &mut out[bi * block..(bi + 1) * block];
        for i in 0..p.n {
            for l in 0..p.k {
                let x = av[oa + i * p.k + l];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[ob + l * p.m..ob + (l + 1) * p.m];
                for (cj, &bj) in c[i * p.m..(i + 1) * p.m].iter_mut().zip(row) {
                    *cj += x * bj;
                }
            }
        }
    });
    Tensor::new(shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &[f64],
    need: [bool; 2],
) -> [Option<Vec<f64>>; 2] {
    let p = matmul_plan(a, b).expect("validated in forward");
    let mut ga = need[0].then(|| vec![0.0; a.len()]);
    let mut gb = need[1].then(|| vec![0.0; b.len()]);
    let (av, bv) = (a.values(), b.values());
    let block = p.n * p.m;
    for_each_index(&p.batch, [&p.sa, &p.sb], |bi, [oa, ob]| {
        let g = &grad[bi * block..(bi + 1) * block];
        if let Some(ga) = ga.as_mut() {
            // dA = dC . B^T
            for i in 0..p.n {
                for l in 0..p.k {
                    let row = &bv[ob + l * p.m..ob + (l + 1) * p.m];
                    let s: f64 = g[i * p.m..(i + 1) * p.m]
                        .iter()
                        .zip(row)
                        .map(|(x, y)| x * y)
                        .sum();
                    ga[oa + i * p.k + l] += s;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            // dB = A^T . dC
            for i in 0..p.n {
                for l in 0..p.k {
                    let x = av[oa + i * p.k + l];
                    if x == 0.0 {
                        continue;
                    }
                    let dst = &mut gb[ob + l * p.m..ob + (l + 1) * p.m];
                    for (d, &gj) in dst.iter_mut().zip(&g[i * p.m..(i + 1) * p.m]) {
                        *d += x * gj;
                    }
                }
            }
        }
    });
    [ga, gb]
}

fn last_dim(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let d = last_dim(x, "softmax")?;
    let mut out = x.values().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn concat_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if first.rank() == 0 {
        return Err(Error::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        });
    }
    let lead = &first.shape()[..first.rank() - 1];
    for t in inputs {
        if t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (t, &w) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.values()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

fn slice_bounds(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Evaluates one primitive on detached values.
pub fn forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} expects {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
    }
    let x = inputs[0];
    let out = match kind {
        Primitive::Add => binary_broadcast("add", x, inputs[1], |a, b| a + b)?,
        Primitive::Sub => binary_broadcast("sub", x, inputs[1], |a, b| a - b)?,
        Primitive::Mul => binary_broadcast("mul", x, inputs[1], |a, b| a * b)?,
        Primitive::Mask => binary_broadcast("mask", x, inputs[1], |a, b| a * b)?,
        Primitive::Div => binary_broadcast("div", x, inputs[1], |a, b| a / clamp_divisor(b))?,
        Primitive::Matmul => matmul_forward(x, inputs[1])?,
        Primitive::Neg => unary_map(x, |v| -v),
        Primitive::Sin => unary_map(x, f64::sin),
        Primitive::Sigmoid => unary_map(x, sigmoid),
        Primitive::Tanh => unary_map(x, f64::tanh),
        Primitive::Relu => unary_map(x, |v| v.max(0.0)),
        Primitive::Exp => unary_map(x, f64::exp),
        Primitive::Log => unary_map(x, |v| v.max(NUMERIC_FLOOR).ln()),
        Primitive::Abs => unary_map(x, f64::abs),
        Primitive::Square => unary_map(x, |v| v * v),
        Primitive::Scale(c) => unary_map(x, |v| c * v),
        Primitive::Offset(c) => unary_map(x, |v| v + c),
        Primitive::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
            }
            unary_map(x, |v| v.clamp(*lo, *hi))
        }
        Primitive::SoftmaxLastDim => softmax_rows(x)?,
        Primitive::LogSumExpLastDim => {
            let d = last_dim(x, "logsumexp")?;
            let values = x
                .values()
                .chunks(d)
                .map(|row| {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), values)?
        }
        Primitive::ConcatLastDim => concat_forward(inputs)?,
        Primitive::Sum => Tensor::scalar(x.values().iter().sum()),
        Primitive::Mean => {
            if x.is_empty() {
                return Err(Error::InvalidArgument("mean of empty tensor".into()));
            }
            Tensor::scalar(x.values().iter().sum::<f64>() / x.len() as f64)
        }
        Primitive::SumAxis(axis) => {
            if *axis >= x.rank() {
                return Err(Error::Shape {
                    op: "sum_axis",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*axis],
                });
            }
            let (outer, extent, inner) = slice_bounds(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            let v = x.values();
            for o in 0..outer {
                for e in 0..extent {
                    let src = &v[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)?
        }
        Primitive::Reshape(shape) => x.reshaped(shape)?,
        Primitive::Slice { axis, start, len } => {
            if *axis >= x.rank() || start + len > x.shape()[*axis] {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*axis, *start, *len],
                });
            }
            let (outer, extent, inner) = slice_bounds(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&x.values()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)?
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { op: kind.name() });
    }
    Ok(out)
}

fn unary_grad(x: &Tensor, y: &Tensor, g: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.values()
        .iter()
        .zip(y.values())
        .zip(g)
        .map(|((&xv, &yv), &gv)| gv * f(xv, yv))
        .collect()
}

/// Adjoints of one primitive: for each input, `Some(grad)` when `need[i]`.
fn backward_primitive(
    kind: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let x = inputs[0];
    let single = |v: Vec<f64>| vec![need[0].then_some(v)];
    match kind {
        Primitive::Add => binary_backward(
            x,
            inputs[1],
            out.shape(),
            g,
            [need[0], need[1]],
            |_, _, g| g,
            |_, _, g| g,
        )
        .into(),
        Primitive::Sub => binary_backward(
            x,
            inputs[1],
            out.shape(),
            g,
            [need[0], need[1]],
            |_, _, g| g,
            |_, _, g| -g,
        )
        .into(),
        Primitive::Mul => binary_backward(
            x,
            inputs[1],
            out.shape(),
            g,
            [need[0], need[1]],
            |_, b, g| g * b,
            |a, _, g| g * a,
        )
        .into(),
        Primitive::Mask => {
            let [ga, _] = binary_backward(
                x,
                inputs[1],
                out.shape(),
                g,
                [need[0], false],
                |_, b, g| g * b,
                |_, _, _| 0.0,
            );
            vec![ga, None]
        }
        Primitive::Div => binary_backward(
            x,
            inputs[1],
            out.shape(),
            g,
            [need[0], need[1]],
            |_, b, g| g / clamp_divisor(b),
            |a, b, g| {
                if b.abs() < NUMERIC_FLOOR {
                    0.0
                } else {
                    -g * a / (b * b)
                }
            },
        )
        .into(),
        Primitive::Matmul => matmul_backward(x, inputs[1], g, [need[0], need[1]]).into(),
        Primitive::Neg => single(g.iter().map(|v| -v).collect()),
        Primitive::Sin => single(unary_grad(x, out, g, |xv, _| xv.cos())),
        Primitive::Sigmoid => single(unary_grad(x, out, g, |_, y| y * (1.0 - y))),
        Primitive::Tanh => single(unary_grad(x, out, g, |_, y| 1.0 - y * y)),
        Primitive::Relu => single(unary_grad(x, out, g, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })),
        Primitive::Exp => single(unary_grad(x, out, g, |_, y| y)),
        Primitive::Log => single(unary_grad(x, out, g, |xv, _| {
            if xv > NUMERIC_FLOOR {
                1.0 / xv
            } else {
                0.0
            }
        })),
        Primitive::Abs => single(unary_grad(x, out, g, |xv, _| {
            if xv > 0.0 {
                1.0
            } else if xv < 0.0 {
                -1.0
            } else {
                0.0
            }
        })),
        Primitive::Square => single(unary_grad(x, out, g, |xv, _| 2.0 * xv)),
        Primitive::Scale(c) => single(g.iter().map(|v| c * v).collect()),
        Primitive::Offset(_) => single(g.to_vec()),
        Primitive::Clamp { lo, hi } => single(unary_grad(x, out, g, |xv, _| {
            if xv >= *lo && xv <= *hi {
                1.0
            } else {
                0.0
            }
        })),
        Primitive::SoftmaxLastDim => {
            let d = *out.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(d).zip(out.values().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((dv, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            single(gx)
        }
        Primitive::LogSumExpLastDim => {
            let d = *x.shape().last().unwrap();
            let sm = softmax_rows(x).expect("validated in forward");
            let mut gx = vec![0.0; x.len()];
            for ((dst, sr), &gv) in gx.chunks_mut(d).zip(sm.values().chunks(d)).zip(g) {
                for (dv, &s) in dst.iter_mut().zip(sr) {
                    *dv = gv * s;
                }
            }
            single(gx)
        }
        Primitive::ConcatLastDim => {
            let total = *out.shape().last().unwrap();
            let rows = out.len() / total.max(1);
            let mut start = 0;
            inputs
                .iter()
                .zip(need)
                .map(|(t, &n)| {
                    let w = *t.shape().last().unwrap();
                    let grad = n.then(|| {
                        let mut buf = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            buf.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        buf
                    });
                    start += w;
                    grad
                })
                .collect()
        }
        Primitive::Sum => single(vec![g[0]; x.len()]),
        Primitive::Mean => single(vec![g[0] / x.len() as f64; x.len()]),
        Primitive::SumAxis(axis) => {
            let (outer, extent, inner) = slice_bounds(x.shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for e in 0..extent {
                    gx[(o * extent + e) * inner..(o * extent + e + 1) * inner]
                        .copy_from_slice(src);
                }
            }
            single(gx)
        }
        Primitive::Reshape(_) => single(g.to_vec()),
        Primitive::Slice { axis, start, len } => {
            let (outer, extent, inner) = slice_bounds(x.shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            single(gx)
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Option<(Primitive, Vec<usize>)>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Ordered record of primitive applications for one backward pass.
///
/// Entries are appended as operations run, so every input of entry `i` is an
/// entry `< i`. A tape is single-threaded and is consumed by
/// [`Tape::backward`].
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("entries", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Option<(Primitive, Vec<usize>)>, requires_grad: bool) -> Var {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            value,
        }
    }

    /// Registers a trainable leaf.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    /// Registers a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn input(&self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, None, rg)
    }

    fn check_owned(&self, v: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &v.tape.inner) {
            return Err(Error::Tape("value belongs to a different tape".into()));
        }
        Ok(())
    }

    /// Applies `kind` to `inputs` and records the result.
    pub fn apply(&self, kind: Primitive, inputs: &[&Var]) -> Result<Var> {
        if self.inner.borrow().consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        for v in inputs {
            self.check_owned(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| v.value.as_ref()).collect();
        let out = forward(&kind, &values)?;
        let requires_grad = {
            let inner = self.inner.borrow();
            match kind {
                Primitive::Mask => inner.nodes[inputs[0].id].requires_grad,
                _ => inputs.iter().any(|v| inner.nodes[v.id].requires_grad),
            }
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(out, Some((kind, ids)), requires_grad))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        self.check_owned(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some((kind, ids)) = &node.op {
                let need: Vec<bool> = ids.iter().map(|&i| nodes[i].requires_grad).collect();
                if need.iter().any(|&n| n) {
                    let inputs: Vec<&Tensor> = ids.iter().map(|&i| nodes[i].value.as_ref()).collect();
                    let local = backward_primitive(kind, &inputs, &node.value, &g, &need);
                    for (&src, adj) in ids.iter().zip(local) {
                        let Some(adj) = adj else { continue };
                        match grads[src].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&adj).for_each(|(a, b)| *a += b),
                            None => grads[src] = Some(adj),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaves = nodes
            .iter()
            .map(|n| n.op.is_none() && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaves,
            tape: Rc::downgrade(&self.inner),
        })
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
    tape: std::rc::Weak<RefCell<TapeInner>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss, `None` if `v` is not from this tape or is a
    /// constant.
    pub fn get(&self, v: &Var) -> Option<Tensor> {
        let same = self
            .tape
            .upgrade()
            .is_some_and(|t| Rc::ptr_eq(&t, &v.tape.inner));
        if !same || v.id >= self.grads.len() {
            return None;
        }
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).ok(),
            None if self.leaves[v.id] => Some(Tensor::zeros(&shape)),
            None => None,
        }
    }

    /// Writes the gradient of `v` into `target.grad`.
    pub fn assign(&self, v: &Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .ok_or_else(|| Error::Tape("no gradient for value".into()))?;
        if g.shape() != target.shape() {
            return Err(Error::Shape {
                op: "assign_grad",
                lhs: target.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        target.set_grad(g.into_values())
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn unary(&self, kind: Primitive) -> Result<Var> {
        self.tape.apply(kind, &[self])
    }

    fn binary(&self, kind: Primitive, other: &Var) -> Result<Var> {
        self.tape.apply(kind, &[self, other])
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(Primitive::Add, other)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(Primitive::Sub, other)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(Primitive::Mul, other)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(Primitive::Div, other)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.binary(Primitive::Matmul, other)
    }

    /// Elementwise product with a constant gate.
    pub fn mask(&self, gate: &Var) -> Result<Var> {
        self.binary(Primitive::Mask, gate)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Primitive::Neg)
    }

    pub fn sin(&self) -> Result<Var> {
        self.unary(Primitive::Sin)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(Primitive::Tanh)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Primitive::Relu)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Primitive::Exp)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(Primitive::Log)
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary(Primitive::Abs)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary(Primitive::Square)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Primitive::Scale(c))
    }

    pub fn offset(&self, c: f64) -> Result<Var> {
        self.unary(Primitive::Offset(c))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Primitive::Clamp { lo, hi })
    }

    pub fn softmax(&self) -> Result<Var> {
        self.unary(Primitive::SoftmaxLastDim)
    }

    pub fn logsumexp(&self) -> Result<Var> {
        self.unary(Primitive::LogSumExpLastDim)
    }

    pub fn sum(&self) -> Result<Var> {
        self.unary(Primitive::Sum)
    }

    pub fn mean(&self) -> Result<Var> {
        self.unary(Primitive::Mean)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.unary(Primitive::SumAxis(axis))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        self.unary(Primitive::Reshape(shape.to_vec()))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(Primitive::Slice { axis, start, len })
    }

    /// Concatenates along the last axis.
    pub fn concat(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let refs: Vec<&Var> = parts.iter().collect();
        first.tape.apply(Primitive::ConcatLastDim, &refs)
    }
}
