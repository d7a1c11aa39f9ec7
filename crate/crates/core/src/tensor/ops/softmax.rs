use super::attention::softmax_row;
use super::axis_split;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, Var};

/// Softmax over `axis`, evaluated with max subtraction.
pub fn softmax<T: Scalar>(x: &Var<T>, axis: usize) -> Result<Var<T>> {
    let (outer, n, inner) = axis_split("softmax", x.shape(), axis)?;
    let src = x.data();
    let mut out = src.to_vec();
    if inner == 1 {
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
    } else {
        for o in 0..outer {
            let block = &mut out[o * n * inner..(o + 1) * n * inner];
            let mut max = vec![T::neg_infinity(); inner];
            for row in block.chunks(inner) {
                for (m, &v) in max.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            let mut total = vec![T::zero(); inner];
            for row in block.chunks_mut(inner) {
                for ((v, &m), t) in row.iter_mut().zip(&max).zip(total.iter_mut()) {
                    *v = (*v - m).fast_exp();
                    *t += *v;
                }
            }
            for t in total.iter_mut() {
                *t = T::one() / *t;
            }
            for row in block.chunks_mut(inner) {
                for (v, &t) in row.iter_mut().zip(&total) {
                    *v *= t;
                }
            }
        }
    }
    Ok(Var::from_op(
        Tensor::new(x.shape(), out)?,
        vec![x.clone()],
        Box::new(move |g, _, y| {
            let y = y.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                let at = o * n * inner;
                let (gb, yb) = (&g[at..at + n * inner], &y[at..at + n * inner]);
                let mut dot = vec![T::zero(); inner];
                for (grow, yrow) in gb.chunks(inner).zip(yb.chunks(inner)) {
                    for ((d, &gv), &yv) in dot.iter_mut().zip(grow).zip(yrow) {
                        *d += gv * yv;
                    }
                }
                let out = &mut gx[at..at + n * inner];
                for ((orow, grow), yrow) in out.chunks_mut(inner).zip(gb.chunks(inner)).zip(yb.chunks(inner)) {
                    for (((o, &gv), &yv), &d) in orow.iter_mut().zip(grow).zip(yrow).zip(&dot) {
                        *o = yv * (gv - d);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn constant_slice_is_uniform() {
        let x = Var::constant(Tensor::<f64>::full(&[2, 5], 3.0));
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn invalid_axis_is_dimension_error() {
        let x = Var::constant(Tensor::<f64>::zeros(&[2, 5]));
        assert!(matches!(softmax(&x, 2), Err(Error::Axis { .. })));
    }

    proptest! {
        #[test]
        fn slices_normalized_and_shift_invariant(
            vals in proptest::collection::vec(-20.0f64..20.0, 12),
            c in -50.0f64..50.0,
            axis in 0usize..3,
        ) {
            let x = Tensor::from_f64(&[2, 3, 2], &vals).unwrap();
            let y = softmax(&Var::constant(x.clone()), axis).unwrap();
            let (outer, n, inner) = axis_split("t", &[2, 3, 2], axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n).map(|a| y.data()[(o * n + a) * inner + i]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
            prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let shifted = softmax(&Var::constant(x.map(|v| v + c)), axis).unwrap();
            prop_assert!(y.value().max_abs_diff(shifted.value()) < 1e-9);
        }
    }
}
