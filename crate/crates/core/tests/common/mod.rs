//! Plain-`f64` reference arithmetic, independent of the engine's kernels.
#![allow(dead_code)]

pub mod grad_suite;

use bitcd::tensor::{Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(data.len(), rows * cols);
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

/// `(x − μ) / √(σ² + ε)` per row, then `γ·x + β`.
pub fn layer_norm_rows(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, x)| (x - mu) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

/// Maclaurin series; accurate to ~1e-12 for |x| < 5.
pub fn erf(x: f64) -> f64 {
    if x.abs() > 5.5 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `softmax(Q Kᵀ / √d) V` for one head.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let scores: Mat = matmul(q, &transpose(k)).iter().map(|r| r.iter().map(|x| x / d.sqrt()).collect()).collect();
    matmul(&softmax_rows(&scores), v)
}

/// Columns `lo..hi` of every row.
pub fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].clone()).collect()).collect()
}

pub fn weights(t: &Tensor<f64>) -> Mat {
    let s = t.shape();
    mat(s[0], s[1], t.data())
}

pub fn to_var(shape: &[usize], data: &[f64]) -> Var<f64> {
    Var::constant(Tensor::new(shape, data.to_vec()).unwrap())
}

pub fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= tol, "index {i}: {a} vs {e} (tol {tol})");
    }
}

/// Deterministic pseudo-random values in [-1, 1).
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Direct-summation cross-correlation on one `[C, H, W]` image with
/// kernel `[Cout, Cin, k, k]`, zero padding.
pub fn conv2d_ref(x: &[f64], (c, h, w): (usize, usize, usize), kernel: &[f64], cout: usize, k: usize, pad: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = ((y + dy) as isize - pad as isize, (xx + dx) as isize - pad as isize);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += kernel[((o * c + i) * k + dy) * k + dx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}
