use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, Var};

/// `[m,k] · [k,n] → [m,n]`.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, T::zero());
    Ok(Var::from_op(
        Tensor::new(&[m, n], out)?,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let ga = p[0].requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(MatRef::new(g, m, n), MatRef::new(p[1].data(), k, n).t(), &mut ga, T::zero());
                ga
            });
            let gb = p[1].requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(MatRef::new(p[0].data(), m, k).t(), MatRef::new(g, m, n), &mut gb, T::zero());
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Batched matmul `[B,m,k] · [B,k,n] → [B,m,n]`.
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::dim("bmm", sa, sb));
    }
    let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            &mut out[i * m * n..(i + 1) * m * n],
            T::zero(),
        );
    }
    Ok(Var::from_op(
        Tensor::new(&[batch, m, n], out)?,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let ga = p[0].requires_grad().then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    gemm(
                        MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                        MatRef::new(&p[1].data()[i * k * n..(i + 1) * k * n], k, n).t(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        T::zero(),
                    );
                }
                ga
            });
            let gb = p[1].requires_grad().then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    gemm(
                        MatRef::new(&p[0].data()[i * m * k..(i + 1) * m * k], m, k).t(),
                        MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        T::zero(),
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Affine map over the last axis: `x[..., in] · w[in, out] (+ bias[out])`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
        return Err(Error::dim("linear", sx, sw));
    }
    let (fan_in, fan_out) = (sw[0], sw[1]);
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(Error::dim("linear bias", b.shape(), &[fan_out]));
        }
    }
    let rows = x.value().len() / fan_in;
    let mut out = vec![T::zero(); rows * fan_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(fan_out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(MatRef::new(x.data(), rows, fan_in), MatRef::new(w.data(), fan_in, fan_out), &mut out, beta);
    let mut shape = sx.to_vec();
    *shape.last_mut().unwrap() = fan_out;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(
        Tensor::new(&shape, out)?,
        parents,
        Box::new(move |g, p, _| {
            let gx = p[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); rows * fan_in];
                gemm(MatRef::new(g, rows, fan_out), MatRef::new(p[1].data(), fan_in, fan_out).t(), &mut gx, T::zero());
                gx
            });
            let gw = p[1].requires_grad().then(|| {
                let mut gw = vec![T::zero(); fan_in * fan_out];
                gemm(MatRef::new(p[0].data(), rows, fan_in).t(), MatRef::new(g, rows, fan_out), &mut gw, T::zero());
                gw
            });
            let mut grads = vec![gx, gw];
            if p.len() == 3 {
                let mut gb = vec![T::zero(); fan_out];
                for row in g.chunks(fan_out) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}
