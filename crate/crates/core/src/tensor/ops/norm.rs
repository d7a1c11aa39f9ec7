use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of values per channel.
    pub count: usize,
}

/// Batch normalization over `[B,C,H,W]`.
///
/// With `running = None` the batch statistics normalize the input and are
/// returned so the caller can update its running estimates; otherwise the
/// given `(mean, var)` are used and the op is affine in `x`.
pub fn batch_norm2d<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    expect_rank("batch_norm2d", x.value(), 4)?;
    let s = x.shape();
    let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batch_norm2d", s, gamma.shape()));
    }
    let count = batch * hw;
    let src = x.data();
    let at = move |b: usize, ch: usize| (b * c + ch) * hw;

    let (mean, var, stats) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::dim("batch_norm2d running stats", s, &[m.len()]));
            }
            (m.to_vec(), v.to_vec(), None)
        }
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..batch {
                    acc += src[at(b, ch)..at(b, ch) + hw].iter().copied().sum();
                }
                let mu = acc / T::of(count as f64);
                let mut sq = T::zero();
                for b in 0..batch {
                    for &v in &src[at(b, ch)..at(b, ch) + hw] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::of(count as f64);
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for ch in 0..c {
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            let i0 = at(b, ch);
            for i in i0..i0 + hw {
                let n = (src[i] - mean[ch]) * inv_std[ch];
                xhat[i] = n;
                out[i] = g * n + bt;
            }
        }
    }
    let training = stats.is_some();
    let y = Var::from_op(
        Tensor::new(s, out)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| {
            let gamma = p[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..batch {
                for ch in 0..c {
                    let i0 = at(b, ch);
                    for i in i0..i0 + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            let nf = T::of(count as f64);
            for ch in 0..c {
                let scale = gamma[ch] * inv_std[ch];
                for b in 0..batch {
                    let i0 = at(b, ch);
                    for i in i0..i0 + hw {
                        dx[i] = if training {
                            scale * (g[i] - dbeta[ch] / nf - xhat[i] * dgamma[ch] / nf)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    );
    Ok((y, stats))
}

/// Normalizes each vector along the last axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
    let s = x.shape();
    let Some(&width) = s.last() else {
        return Err(Error::contract("layer_norm of a rank-0 tensor"));
    };
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(Error::dim("layer_norm", s, gamma.shape()));
    }
    let rows = x.value().len() / width;
    let src = x.data();
    let mut xhat = vec![T::zero(); src.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); src.len()];
    let wf = T::of(width as f64);
    for r in 0..rows {
        let row = &src[r * width..(r + 1) * width];
        let mu = row.iter().copied().sum::<T>() / wf;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / wf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..width {
            let n = (row[j] - mu) * is;
            xhat[r * width + j] = n;
            out[r * width + j] = gamma.data()[j] * n + beta.data()[j];
        }
    }
    Ok(Var::from_op(
        Tensor::new(s, out)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| {
            let gamma = p[1].data();
            let mut dgamma = vec![T::zero(); width];
            let mut dbeta = vec![T::zero(); width];
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gr = &g[r * width..(r + 1) * width];
                let xr = &xhat[r * width..(r + 1) * width];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..width {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    let d = gr[j] * gamma[j];
                    sum_d += d;
                    sum_dx += d * xr[j];
                }
                for j in 0..width {
                    let d = gr[j] * gamma[j];
                    dx[r * width + j] = inv_std[r] * (d - sum_d / wf - xr[j] * sum_dx / wf);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Var<f64>, Var<f64>) {
        (Var::constant(Tensor::ones(&[c])), Var::constant(Tensor::zeros(&[c])))
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        // The ε in the denominator scales values by (1+ε)^(-1/2); inputs are
        // kept small so that factor stays under the 1e-6 tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Var::constant(Tensor::<f64>::rand_uniform(&[2, 3, 4, 4], -0.1, 0.1, &mut rng));
        let (g, b) = affine(3);
        let (y, stats) = batch_norm2d(&x, &g, &b, Some((&[0.0; 3], &[1.0; 3])), 1e-5).unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(x.value()) < 1e-6);
    }

    #[test]
    fn train_mode_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Var::constant(Tensor::<f64>::randn(&[4, 2, 5, 5], 3.0, &mut rng).map(|v| v + 7.0));
        let (g, b) = affine(2);
        let (y, _) = batch_norm2d(&x, &g, &b, None, 1e-5).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..25).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 2 + ch) * 25 + i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_mode_matches_two_pass_oracle() {
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = Var::constant(Tensor::from_f64(&[2, 2, 2, 2], &vals).unwrap());
        let g = Var::constant(Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap());
        let b = Var::constant(Tensor::from_f64(&[2], &[0.25, 1.0]).unwrap());
        let (y, stats) = batch_norm2d(&x, &g, &b, None, 1e-5).unwrap();
        let stats = stats.unwrap();
        for ch in 0..2 {
            let idx: Vec<usize> = (0..2).flat_map(|n| (0..4).map(move |i| (n * 2 + ch) * 4 + i)).collect();
            let mean = idx.iter().map(|&i| vals[i]).sum::<f64>() / 8.0;
            let var = idx.iter().map(|&i| (vals[i] - mean).powi(2)).sum::<f64>() / 8.0;
            assert!((stats.mean[ch] - mean).abs() < 1e-12);
            assert!((stats.var[ch] - var).abs() < 1e-12);
            for &i in &idx {
                let expect = g.data()[ch] * (vals[i] - mean) / (var + 1e-5).sqrt() + b.data()[ch];
                assert!((y.data()[i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Var::constant(Tensor::<f64>::full(&[2, 4], 3.5));
        let (g, b) = affine(4);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_matches_closed_form() {
        let vals = [0.5, -1.25, 2.0, 3.0];
        let x = Var::constant(Tensor::<f64>::from_f64(&[1, 4], &vals).unwrap());
        let (g, b) = affine(4);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mu = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
        for (o, v) in y.data().iter().zip(vals) {
            assert!((o - (v - mu) / (var + 1e-5).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_random_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Var::constant(Tensor::<f64>::randn(&[6, 32], 2.0, &mut rng));
        let (g, b) = affine(32);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for row in y.data().chunks(32) {
            let m = row.iter().sum::<f64>() / 32.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
