use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// One-axis interpolation table: for each output index, the two source
/// indices and the weight of the second.
#[derive(Clone, Debug)]
pub struct ResizeWeights {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeWeights {
    /// Half-pixel centers: `src = (dst + 0.5)·(n_in/n_out) − 0.5`, clamped.
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for d in 0..n_out {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            lo.push(i0);
            hi.push((i0 + 1).min(n_in - 1));
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
pub fn bilinear_resize<T: Scalar>(x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
    expect_rank("bilinear_resize", x.value(), 4)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("bilinear_resize target must be at least 1×1"));
    }
    let s = x.shape().to_vec();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if h == out_h && w == out_w {
        return Ok(Var::from_op(x.value().clone(), vec![x.clone()], Box::new(|g, _, _| vec![Some(g.to_vec())])));
    }
    let ry = ResizeWeights::new(h, out_h);
    let rx = ResizeWeights::new(w, out_w);
    let fy: Vec<T> = ry.frac.iter().map(|&f| T::of(f)).collect();
    let fx: Vec<T> = rx.frac.iter().map(|&f| T::of(f)).collect();
    let src = x.data();
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let ip = &src[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (r0, r1, ly) = (&ip[ry.lo[oy] * w..][..w], &ip[ry.hi[oy] * w..][..w], fy[oy]);
            for ox in 0..out_w {
                let (c0, c1, lx) = (rx.lo[ox], rx.hi[ox], fx[ox]);
                let top = r0[c0] + (r0[c1] - r0[c0]) * lx;
                let bot = r1[c0] + (r1[c1] - r1[c0]) * lx;
                op[oy * out_w + ox] = top + (bot - top) * ly;
            }
        }
    }
    let mut shape = s;
    shape[2] = out_h;
    shape[3] = out_w;
    Ok(Var::from_op(
        Tensor::new(&shape, out)?,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dp = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1, ly) = (ry.lo[oy], ry.hi[oy], fy[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, lx) = (rx.lo[ox], rx.hi[ox], fx[ox]);
                        let gv = gp[oy * out_w + ox];
                        let top = gv * (T::one() - ly);
                        let bot = gv * ly;
                        dp[y0 * w + x0] += top * (T::one() - lx);
                        dp[y0 * w + x1] += top * lx;
                        dp[y1 * w + x0] += bot * (T::one() - lx);
                        dp[y1 * w + x1] += bot * lx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
