//! Differentiable primitives. Each op computes its forward value eagerly and
//! records a vector-Jacobian product when any input requires a gradient.

mod attention;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod resize;
mod shape;
mod softmax;

pub use attention::multi_head_attention;
pub use conv::{conv2d, conv_output_size, max_pool2d, Conv2dSpec};
pub use elementwise::{abs, add, add_same, add_scalar, exp, gelu, mul, neg, relu, scale, sub};
pub use linalg::{bmm, linear, matmul};
pub use loss::cross_entropy_from_probs;
pub use norm::{batch_norm2d, layer_norm, BatchStats};
pub use resize::{bilinear_resize, ResizeWeights};
pub use shape::{concat, mean, narrow, permute, reshape, sum, sum_axis};
pub use softmax::softmax;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub(crate) fn unary<T: Scalar>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T, T) -> T + Send + Sync + 'static,
) -> Var<T> {
    let out = x.value().map(f);
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, p, y| {
            let gx = g
                .iter()
                .zip(p[0].data())
                .zip(y.data())
                .map(|((&g, &x), &y)| df(g, x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) counts.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn expect_rank<T: Scalar>(op: &'static str, x: &Tensor<T>, rank: usize) -> Result<()> {
    if x.ndim() != rank {
        return Err(Error::contract(format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}
