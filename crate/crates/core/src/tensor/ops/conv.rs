use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    // Output columns whose input column is inside the image.
                    let (lo, hi) = self.valid_range(kj, self.w, self.ow);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (i, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[start + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Range `[lo, hi)` of output positions `o` with `0 <= o·s + k − p < n`.
    fn valid_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride).min(out);
        let hi = if n + self.pad > k {
            ((n + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.oh * self.ow;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_range(kj, self.w, self.ow);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let start = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in line[lo..hi].iter().enumerate() {
                                dst[start + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x[B,Cin,H,W]` with `kernel[Cout,Cin,kh,kw]`.
pub fn conv2d<T: Scalar>(x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
    expect_rank("conv2d", x.value(), 4)?;
    expect_rank("conv2d kernel", kernel.value(), 4)?;
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs[1] != ks[1] {
        return Err(Error::dim("conv2d", xs, ks));
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, kh, spec.stride, spec.padding),
        conv_output_size(w, kw, spec.stride, spec.padding),
    ) else {
        return Err(Error::dim("conv2d", xs, ks));
    };
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("conv2d bias", b.shape(), &[cout]));
        }
    }
    let geo = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride: spec.stride,
        pad: spec.padding,
    };
    let k = cin * kh * kw;
    let p = oh * ow;
    let mut out = vec![T::zero(); batch * cout * p];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..batch {
        let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        let mut beta = T::zero();
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_mut(p).zip(bias.data()) {
                row.fill(bv);
            }
            beta = T::one();
        }
        let colref = if geo.is_pointwise() {
            MatRef::new(xb, k, p)
        } else {
            geo.im2col(xb, &mut cols);
            MatRef::new(&cols, k, p)
        };
        gemm(MatRef::new(kernel.data(), cout, k), colref, ob, beta);
    }
    let mut parents = vec![x.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(
        Tensor::new(&[batch, cout, oh, ow], out)?,
        parents,
        Box::new(move |g, parents, _| {
            let (xv, kv) = (&parents[0], &parents[1]);
            let mut gx = xv.requires_grad().then(|| vec![T::zero(); batch * cin * h * w]);
            let mut gk = kv.requires_grad().then(|| vec![T::zero(); cout * k]);
            let mut cols = vec![T::zero(); k * p];
            for b in 0..batch {
                let xb = &xv.data()[b * cin * h * w..(b + 1) * cin * h * w];
                let gb = &g[b * cout * p..(b + 1) * cout * p];
                if let Some(gk) = gk.as_mut() {
                    let colref = if geo.is_pointwise() {
                        MatRef::new(xb, k, p)
                    } else {
                        geo.im2col(xb, &mut cols);
                        MatRef::new(&cols, k, p)
                    };
                    gemm(MatRef::new(gb, cout, p), colref.t(), gk, T::one());
                }
                if let Some(gx) = gx.as_mut() {
                    let dxb = &mut gx[b * cin * h * w..(b + 1) * cin * h * w];
                    let kref = MatRef::new(kv.data(), cout, k).t();
                    if geo.is_pointwise() {
                        gemm(kref, MatRef::new(gb, cout, p), dxb, T::zero());
                    } else {
                        gemm(kref, MatRef::new(gb, cout, p), &mut cols, T::zero());
                        geo.col2im(&cols, dxb);
                    }
                }
            }
            let mut grads = vec![gx, gk];
            if parents.len() == 3 {
                let mut gbias = vec![T::zero(); cout];
                for b in 0..batch {
                    for (c, acc) in gbias.iter_mut().enumerate() {
                        *acc += g[(b * cout + c) * p..(b * cout + c + 1) * p].iter().copied().sum();
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        }),
    ))
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Scalar>(x: &Var<T>, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
    expect_rank("max_pool2d", x.value(), 4)?;
    let s = x.shape();
    let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, kernel, stride, padding),
        conv_output_size(w, kernel, stride, padding),
    ) else {
        return Err(Error::contract(format!("max_pool2d kernel {kernel} does not fit {s:?}")));
    };
    let src = x.data();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(batch * c * oh * ow);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if src[at] > best || best_at == usize::MAX || src[at].is_nan() {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    let n_in = src.len();
    Ok(Var::from_op(
        Tensor::new(&[batch, c, oh, ow], out)?,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); n_in];
            for (&at, &gv) in arg.iter().zip(g) {
                gx[at] += gv;
            }
            vec![Some(gx)]
        }),
    ))
}
