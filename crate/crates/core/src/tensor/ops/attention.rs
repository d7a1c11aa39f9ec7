use crate::error::{Error, Result};
use crate::tensor::{gemm_ex, MatRef, Scalar, Tensor, Var};

/// Scaled dot-product attention over packed heads.
///
/// `q[B, n_q, h·d]`, `k[B, n_k, h·d]`, `v[B, n_k, h·d]`; head `j` owns
/// columns `j·d..(j+1)·d`. Each head computes `softmax(Q Kᵀ / √d) V` with
/// the softmax over the key index, and the head outputs are written back
/// into the same packed layout.
pub fn multi_head_attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::contract(format!(
            "attention expects rank-3 operands, got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::dim("attention q/k", sq, sk));
    }
    if sk != sv {
        return Err(Error::dim("attention k/v", sk, sv));
    }
    let width = sq[2];
    if heads == 0 || width % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not divide width {width}")));
    }
    let (batch, nq, nk, d) = (sq[0], sq[1], sk[1], width / heads);
    let scale = T::one() / T::of(d as f64).sqrt();

    // Only each row's max and normalizer are kept; the backward pass
    // rebuilds the attention weights slice by slice from them, which keeps
    // the working set to one `n_q × n_k` buffer.
    let slices = batch * heads;
    let mut row_max = vec![T::zero(); slices * nq];
    let mut row_inv = vec![T::zero(); slices * nq];
    let mut a = vec![T::zero(); nq * nk];
    let mut out = vec![T::zero(); batch * nq * width];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let slice = b * heads + h;
            let qh = MatRef::strided(&qd[b * nq * width + h * d..], nq, d, width);
            let kh = MatRef::strided(&kd[b * nk * width + h * d..], nk, d, width);
            let vh = MatRef::strided(&vd[b * nk * width + h * d..], nk, d, width);
            gemm_ex(scale, qh, kh.t(), T::zero(), &mut a, nk);
            for (r, row) in a.chunks_mut(nk).enumerate() {
                let (m, inv) = softmax_row(row);
                row_max[slice * nq + r] = m;
                row_inv[slice * nq + r] = inv;
            }
            gemm_ex(T::one(), MatRef::new(&a, nq, nk), vh, T::zero(), &mut out[b * nq * width + h * d..], width);
        }
    }

    Ok(Var::from_op(
        Tensor::new(&[batch, nq, width], out)?,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, p, _| {
            let (qd, kd, vd) = (p[0].data(), p[1].data(), p[2].data());
            let mut gq = vec![T::zero(); qd.len()];
            let mut gk = vec![T::zero(); kd.len()];
            let mut gv = vec![T::zero(); vd.len()];
            let mut a = vec![T::zero(); nq * nk];
            let mut ds = vec![T::zero(); nq * nk];
            for b in 0..batch {
                for h in 0..heads {
                    let slice = b * heads + h;
                    let qoff = b * nq * width + h * d;
                    let koff = b * nk * width + h * d;
                    let go = MatRef::strided(&g[qoff..], nq, d, width);
                    let qh = MatRef::strided(&qd[qoff..], nq, d, width);
                    let kh = MatRef::strided(&kd[koff..], nk, d, width);
                    let vh = MatRef::strided(&vd[koff..], nk, d, width);
                    gemm_ex(scale, qh, kh.t(), T::zero(), &mut a, nk);
                    for (r, row) in a.chunks_mut(nk).enumerate() {
                        let (m, inv) = (row_max[slice * nq + r], row_inv[slice * nq + r]);
                        for x in row.iter_mut() {
                            *x = (*x - m).fast_exp() * inv;
                        }
                    }
                    // dA = dO·Vᵀ, then the softmax Jacobian row by row.
                    gemm_ex(T::one(), go, vh.t(), T::zero(), &mut ds, nk);
                    for (drow, arow) in ds.chunks_mut(nk).zip(a.chunks(nk)) {
                        let dot = lane_dot(drow, arow);
                        for (x, &y) in drow.iter_mut().zip(arow) {
                            *x = y * (*x - dot);
                        }
                    }
                    let dsr = MatRef::new(&ds, nq, nk);
                    gemm_ex(scale, dsr, kh, T::zero(), &mut gq[qoff..], width);
                    gemm_ex(scale, dsr.t(), qh, T::zero(), &mut gk[koff..], width);
                    gemm_ex(T::one(), MatRef::new(&a, nq, nk).t(), go, T::zero(), &mut gv[koff..], width);
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    ))
}

/// In-place softmax of one contiguous row; returns the row max and the
/// reciprocal normalizer so the weights can be rebuilt exactly.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for x in row.iter_mut() {
        *x = (*x - max).fast_exp();
    }
    let inv = T::one() / lane_sum(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
    (max, inv)
}

/// Sum with eight independent accumulators so the loop vectorizes. The
/// association order is fixed, so results are reproducible.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        total += v;
    }
    total
}

/// Dot product with the same fixed association as [`lane_sum`].
pub(crate) fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let cx = xs.chunks_exact(8);
    let cy = ys.chunks_exact(8);
    let (tx, ty) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&a, &b) in tx.iter().zip(ty) {
        total += a * b;
    }
    total
}
