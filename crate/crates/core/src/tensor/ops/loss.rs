use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Probability floor applied before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over pixels of `−ln P[true class]` for `probs[B,K,H,W]`.
pub fn cross_entropy_from_probs<T: Scalar>(probs: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    expect_rank("cross_entropy", probs.value(), 4)?;
    let s = probs.shape();
    let (batch, classes, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != batch * hw {
        return Err(Error::dim("cross_entropy", s, &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    let n = batch * hw;
    let floor = T::of(PROB_FLOOR);
    let p = probs.data();
    let picked = |i: usize| {
        let (b, pix) = (i / hw, i % hw);
        (b * classes + labels[i] as usize) * hw + pix
    };
    let mut total = T::zero();
    for i in 0..n {
        let v = p[picked(i)];
        // `max` would turn NaN into the floor and hide it.
        total -= if v.is_nan() { v } else { v.max(floor).ln() };
    }
    let loss = total / T::of(n as f64);
    let labels = labels.to_vec();
    Ok(Var::from_op(
        Tensor::scalar(loss),
        vec![probs.clone()],
        Box::new(move |g, parents, _| {
            let p = parents[0].data();
            let mut gp = vec![T::zero(); p.len()];
            let scale = g[0] / T::of(n as f64);
            for (i, &l) in labels.iter().enumerate() {
                let (b, pix) = (i / hw, i % hw);
                let at = (b * classes + l as usize) * hw + pix;
                if p[at] > floor {
                    gp[at] = -scale / p[at];
                }
            }
            vec![Some(gp)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(change: &[f64]) -> Var<f64> {
        let mut data: Vec<f64> = change.iter().map(|c| 1.0 - c).collect();
        data.extend_from_slice(change);
        Var::constant(Tensor::from_f64(&[1, 2, 2, change.len() / 2], &data).unwrap())
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = cross_entropy_from_probs(&probs(&[1.0, 0.0, 0.0, 1.0]), &[1, 0, 0, 1]).unwrap();
        assert_eq!(l.data()[0], 0.0);
    }

    #[test]
    fn uniform_prediction_is_ln2() {
        let l = cross_entropy_from_probs(&probs(&[0.5; 4]), &[1, 0, 0, 1]).unwrap();
        assert!((l.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mixed_case_matches_per_pixel_sum() {
        let change = [0.9, 0.2, 0.6, 0.35];
        let labels = [1u8, 0, 0, 1];
        let l = cross_entropy_from_probs(&probs(&change), &labels).unwrap();
        let oracle: f64 = change
            .iter()
            .zip(labels)
            .map(|(&c, y)| -(if y == 1 { c } else { 1.0 - c }).ln())
            .sum::<f64>()
            / 4.0;
        assert!((l.data()[0] - oracle).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        assert!(matches!(cross_entropy_from_probs(&probs(&[0.5; 4]), &[0, 2, 0, 1]), Err(Error::Data(_))));
    }
}
