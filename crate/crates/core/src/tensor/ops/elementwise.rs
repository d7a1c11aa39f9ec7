use super::{same_shape, unary};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Scalar, Tensor, Var};

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return broadcast_binary(a, b, BinaryOp::Add);
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::new(a.shape(), data)?;
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return broadcast_binary(a, b, BinaryOp::Sub);
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::new(a.shape(), data)?;
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
    ))
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return broadcast_binary(a, b, BinaryOp::Mul);
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::new(a.shape(), data)?;
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, p, _| {
            let ga = g.iter().zip(p[1].data()).map(|(&g, &y)| g * y).collect();
            let gb = g.iter().zip(p[0].data()).map(|(&g, &x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn neg<T: Scalar>(x: &Var<T>) -> Var<T> {
    scale(x, -T::one())
}

pub fn scale<T: Scalar>(x: &Var<T>, factor: T) -> Var<T> {
    unary(x, |v| v * factor, move |g, _, _| g * factor)
}

pub fn add_scalar<T: Scalar>(x: &Var<T>, c: T) -> Var<T> {
    unary(x, |v| v + c, |g, _, _| g)
}

/// `|x|`, with the subgradient at zero taken as 0.
pub fn abs<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(x, |v| v.abs(), |g, x, _| g * sign(x))
}

/// NaN passes through so a poisoned activation still reaches the loss.
pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(
        x,
        |v| if v > T::zero() || v.is_nan() { v } else { T::zero() },
        |g, x, _| if x > T::zero() { g } else { T::zero() },
    )
}

/// Exact GELU, `x·Φ(x)` with the error-function form of the normal CDF.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(x, gelu_scalar, |g, x, _| g * gelu_grad_scalar(x))
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).fast_erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).fast_erf());
    let pdf = (-(x * x) * half).fast_exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn exp<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(x, |v| v.exp(), |g, _, y| g * y)
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Maps every output flat index to the operand's flat index.
fn broadcast_map(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - operand.len();
    let op_strides = strides_of(operand);
    let mut eff = vec![0; out.len()];
    for i in 0..operand.len() {
        if operand[i] != 1 {
            eff[pad + i] = op_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_binary<T: Scalar>(a: &Var<T>, b: &Var<T>, op: BinaryOp) -> Result<Var<T>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    };
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(name, a.shape(), b.shape()))?;
    let ma = broadcast_map(a.shape(), &shape);
    let mb = broadcast_map(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data: Vec<T> = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| match op {
            BinaryOp::Add => da[i] + db[j],
            BinaryOp::Sub => da[i] - db[j],
            BinaryOp::Mul => da[i] * db[j],
        })
        .collect();
    let out = Tensor::new(&shape, data)?;
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let mut ga = vec![T::zero(); p[0].value().len()];
            let mut gb = vec![T::zero(); p[1].value().len()];
            for (k, &gk) in g.iter().enumerate() {
                let (i, j) = (ma[k], mb[k]);
                match op {
                    BinaryOp::Add => {
                        ga[i] += gk;
                        gb[j] += gk;
                    }
                    BinaryOp::Sub => {
                        ga[i] += gk;
                        gb[j] -= gk;
                    }
                    BinaryOp::Mul => {
                        ga[i] += gk * p[1].data()[j];
                        gb[j] += gk * p[0].data()[i];
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Elementwise add requiring identical shapes (no broadcasting).
pub fn add_same<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b)?;
    add(a, b)
}
