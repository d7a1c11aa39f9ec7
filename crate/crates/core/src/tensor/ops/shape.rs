use super::axis_split;
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Scalar, Tensor, Var};

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let out = x.value().clone().reshape(shape)?;
    Ok(Var::from_op(out, vec![x.clone()], Box::new(|g, _, _| vec![Some(g.to_vec())])))
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 || total == 0 {
        return (out_shape, data.to_vec());
    }
    if rank >= 2 && axes[..rank - 2].iter().enumerate().all(|(i, &a)| a == i) && axes[rank - 2] == rank - 1 {
        let (r, c) = (shape[rank - 2], shape[rank - 1]);
        out.resize(total, T::zero());
        for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
            transpose_into(src, dst, r, c);
        }
        return (out_shape, out);
    }
    // Innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    for _ in 0..total / inner {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Writes the transpose of row-major `rows×cols` `src` into `dst`, in tiles.
fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::contract(format!("permute axes {axes:?} invalid for shape {:?}", x.shape())));
    }
    let (out_shape, data) = permute_data(x.data(), x.shape(), axes);
    let mut inverse = vec![0; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let out_shape_b = out_shape.clone();
    Ok(Var::from_op(
        Tensor::new(&out_shape, data)?,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let (_, back) = permute_data(g, &out_shape_b, &inverse);
            vec![Some(back)]
        }),
    ))
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
    let base = first.shape().to_vec();
    axis_split("concat", &base, axis)?;
    for x in xs {
        let s = x.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::dim("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let extents: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total_axis: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for (x, &e) in xs.iter().zip(&extents) {
            data.extend_from_slice(&x.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total_axis;
    Ok(Var::from_op(
        Tensor::new(&shape, data)?,
        xs.to_vec(),
        Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    gi.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Takes `len` entries of `axis` starting at `start`.
pub fn narrow<T: Scalar>(x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let (outer, n, inner) = axis_split("narrow", x.shape(), axis)?;
    if start + len > n || len == 0 {
        return Err(Error::contract(format!(
            "narrow [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let off = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[off..off + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Var::from_op(
        Tensor::new(&shape, data)?,
        vec![x.clone()],
        Box::new(move |g, p, _| {
            let mut gx = vec![T::zero(); p[0].value().len()];
            for o in 0..outer {
                let off = (o * n + start) * inner;
                gx[off..off + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Sum of all entries, as a one-element tensor.
pub fn sum<T: Scalar>(x: &Var<T>) -> Var<T> {
    let total = x.data().iter().copied().sum();
    let n = x.value().len();
    Var::from_op(Tensor::scalar(total), vec![x.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
}

pub fn mean<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = x.value().len();
    super::scale(&sum(x), T::one() / T::of(n as f64))
}

/// Sums over `axis`, keeping it with extent 1.
pub fn sum_axis<T: Scalar>(x: &Var<T>, axis: usize) -> Result<Var<T>> {
    let (outer, n, inner) = axis_split("sum_axis", x.shape(), axis)?;
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &x.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
            for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Var::from_op(
        Tensor::new(&shape, data)?,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }),
    ))
}
