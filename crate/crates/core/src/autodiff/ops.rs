//! Forward kernels for the primitive set.

use alloc::format;
use alloc::vec;

use super::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn shape_err(node: usize, op: &Op, detail: alloc::string::String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn broadcast(
    node: usize,
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 && (a.numel() > 1 || a.shape().len() >= b.shape().len()) {
        let y = b.item();
        let data = a.data().iter().map(|&x| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.numel() == 1 {
        let x = a.item();
        let data = b.data().iter().map(|&y| f(x, y)).collect();
        return Tensor::new(b.shape().to_vec(), data);
    }
    Err(shape_err(
        node,
        op,
        format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
    ))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("map preserves shape")
}

fn last_axis(node: usize, op: &Op, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(node, op, format!("expected 1-D or 2-D input, got {s:?}"))),
    }
}

fn softmax_rows(a: &Tensor, rows: usize, cols: usize, log: bool) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
        let lz = libm::log(z);
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = if log {
                x - m - lz
            } else {
                libm::exp(x - m) / z
            };
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("softmax preserves shape")
}

pub(super) fn matmul(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return None;
    };
    let (m, k, n) = (*m, *k, *n);
    if k != *k2 {
        return None;
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Some(Tensor::new(vec![m, n], out).expect("matmul output shape"))
}

/// Evaluates `op` given access to the values of earlier nodes.
pub(super) fn evaluate<'a>(
    op: &Op,
    node: usize,
    get: impl Fn(Var) -> &'a Tensor,
) -> Result<Tensor> {
    for p in op.parents() {
        if p.0 >= node {
            return Err(shape_err(node, op, format!("parent {} is not earlier", p.0)));
        }
    }
    let out = match op {
        Op::Leaf(_) => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => broadcast(node, op, get(*a), get(*b), |x, y| x + y)?,
        Op::Sub(a, b) => broadcast(node, op, get(*a), get(*b), |x, y| x - y)?,
        Op::Mul(a, b) => broadcast(node, op, get(*a), get(*b), |x, y| x * y)?,
        Op::Div(a, b) => broadcast(node, op, get(*a), get(*b), |x, y| x / y)?,
        Op::Neg(a) => map(get(*a), |x| -x),
        Op::MatMul(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            matmul(ta, tb).ok_or_else(|| {
                shape_err(
                    node,
                    op,
                    format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
                )
            })?
        }
        Op::Transpose(a) => {
            let t = get(*a);
            let [r, c] = t.shape() else {
                return Err(shape_err(node, op, format!("expected 2-D, got {:?}", t.shape())));
            };
            let (r, c) = (*r, *c);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        }
        Op::Reshape(a, shape) => {
            let t = get(*a);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(shape_err(
                    node,
                    op,
                    format!("cannot reshape {:?} to {shape:?}", t.shape()),
                ));
            }
            Tensor::new(shape.clone(), t.data().to_vec())?
        }
        Op::Relu(a) => map(get(*a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh(a) => map(get(*a), libm::tanh),
        Op::Exp(a) => map(get(*a), libm::exp),
        Op::Log(a) => map(get(*a), libm::log),
        Op::Softmax(a) | Op::LogSoftmax(a) => {
            let t = get(*a);
            let (rows, cols) = last_axis(node, op, t)?;
            softmax_rows(t, rows, cols, matches!(op, Op::LogSoftmax(_)))
        }
        Op::Sum(a) => Tensor::scalar(get(*a).data().iter().sum()),
        Op::Mean(a) => {
            let t = get(*a);
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        }
        Op::MaxReduce(a) => Tensor::scalar(
            get(*a)
                .data()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        ),
        Op::Clip(a, lo, hi) => map(get(*a), |x| x.clamp(*lo, *hi)),
        Op::Sign(a) => map(get(*a), sign),
        Op::StepMask(a) => map(get(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::ClipMask(a, lo, hi) => map(get(*a), |x| {
            if x >= *lo && x <= *hi {
                1.0
            } else {
                0.0
            }
        }),
        Op::ArgmaxMask(a) => {
            let t = get(*a);
            let mut best = 0;
            for (i, &x) in t.data().iter().enumerate() {
                if x > t.data()[best] {
                    best = i;
                }
            }
            let mut out = vec![0.0; t.numel()];
            out[best] = 1.0;
            Tensor::new(t.shape().to_vec(), out)?
        }
        Op::Slice { src, start, shape } => {
            let t = get(*src);
            let len = shape.iter().product::<usize>();
            if start + len > t.numel() {
                return Err(shape_err(
                    node,
                    op,
                    format!("window {start}..{} exceeds {} values", start + len, t.numel()),
                ));
            }
            Tensor::new(shape.clone(), t.data()[*start..start + len].to_vec())?
        }
        Op::Scatter { src, start, len } => {
            let t = get(*src);
            if start + t.numel() > *len {
                return Err(shape_err(
                    node,
                    op,
                    format!("{} values at {start} exceed length {len}", t.numel()),
                ));
            }
            let mut out = vec![0.0; *len];
            out[*start..start + t.numel()].copy_from_slice(t.data());
            Tensor::new(vec![*len], out)?
        }
    };
    Ok(out)
}

/// `sign(0) = 0`; NaN maps to 0 as well.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
