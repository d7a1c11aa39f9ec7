//! Image outputs: change masks, token attention heatmaps and per-stage
//! feature maps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::head::ChangeMask;
use crate::model::{ChangeDetector, Prediction};
use crate::nn::Mode;
use crate::tensor::ops;
use crate::tensor::{no_grad, Scalar, Tensor, Var};
use crate::train::make_batch;

/// Blue → cyan → green → yellow → red, piecewise linear in four equal
/// segments. Every output lies on one edge of the RGB cube so
/// [`jet_inverse`] can undo it.
pub fn jet(t: f64) -> [u8; 3] {
    let s = 4.0 * t.clamp(0.0, 1.0);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match s {
        s if s < 1.0 => [0, q(s), 255],
        s if s < 2.0 => [0, 255, q(2.0 - s)],
        s if s < 3.0 => [q(s - 2.0), 255, 0],
        s => [255, q(4.0 - s), 0],
    }
}

/// Position on the [`jet`] ramp of a color the ramp produced.
pub fn jet_inverse([r, g, b]: [u8; 3]) -> f64 {
    let f = |v: u8| v as f64 / 255.0;
    if r == 0 && b == 255 {
        f(g) / 4.0
    } else if r == 0 && g == 255 {
        (2.0 - f(b)) / 4.0
    } else if b == 0 && g == 255 {
        (2.0 + f(r)) / 4.0
    } else {
        (4.0 - f(g)) / 4.0
    }
}

/// Scales to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn gray_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `values` in `[0, 1]` as an 8-bit grayscale image.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([gray_u8(values[y as usize * width + x as usize])]));
    img.save(path).map_err(save_err(path))
}

/// Writes `values` in `[0, 1]` through the [`jet`] ramp.
pub fn write_heatmap(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(jet(values[y as usize * width + x as usize])));
    img.save(path).map_err(save_err(path))
}

/// One mask plane as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &ChangeMask, b: usize) -> Result<()> {
    let plane = mask.plane(b);
    let w = mask.width;
    let img = GrayImage::from_fn(w as u32, mask.height as u32, |x, y| Luma([plane[y as usize * w + x as usize] * 255]));
    img.save(path).map_err(save_err(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn forward_pair<T: Scalar>(model: &ChangeDetector<T>, pair: &SamplePair) -> Result<Prediction<T>> {
    let _guard = no_grad();
    let batch = make_batch::<T>(std::slice::from_ref(pair))?;
    model.forward(&Var::constant(batch.t1), &Var::constant(batch.t2), Mode::Eval)
}

/// Plane `c` of sample 0 of a `[B, C, H, W]` tensor, as `f64`.
fn plane<T: Scalar>(t: &Tensor<T>, c: usize) -> Vec<f64> {
    let s = t.shape();
    let hw = s[2] * s[3];
    t.data()[c * hw..(c + 1) * hw].iter().map(|v| v.as_f64()).collect()
}

/// A written heatmap and the normalized values it encodes.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// For each temporal and token: the spatial attention column, upsampled
/// to the input extent, min-max normalized and color mapped. Files are
/// `tokens_t{1,2}_{l}.png`.
pub fn visualize_tokens<T: Scalar>(model: &ChangeDetector<T>, pair: &SamplePair, out_dir: &Path) -> Result<Vec<Heatmap>> {
    let pred = forward_pair(model, pair)?;
    let (a1, a2) = pred
        .transformer
        .attention
        .as_ref()
        .ok_or_else(|| Error::contract("token visualization needs the tokenizer enabled"))?;
    ensure_dir(out_dir)?;
    let (_, _, fh, fw) = pred.features.0.dims();
    let (h, w) = (pair.height(), pair.width());
    let mut out = Vec::new();
    for (t, attention) in [(1, a1), (2, a2)] {
        // [1, HW, L] → [1, L, h, w] so each token is one plane.
        let l = attention.shape()[2];
        let maps = ops::reshape(&ops::permute(attention, &[0, 2, 1])?, &[1, l, fh, fw])?;
        let up = ops::bilinear_resize(&maps, h, w)?;
        for token in 0..l {
            let values = min_max_normalize(&plane(up.value(), token));
            let path = out_dir.join(format!("tokens_t{t}_{token}.png"));
            write_heatmap(&path, h, w, &values)?;
            out.push(Heatmap {
                path,
                height: h,
                width: w,
                values,
            });
        }
    }
    Ok(out)
}

/// A written grayscale image and the values it encodes.
#[derive(Clone, Debug)]
pub struct FeatureImage {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Grayscale dumps of the first `channels` channels of, per temporal, the
/// backbone map `x`, the refined map `xnew` and their difference `delta`;
/// then the difference image `fdi` and the change probability `prob`.
/// Everything is min-max normalized per image except `prob`, which is
/// written as probability × 255.
pub fn visualize_features<T: Scalar>(
    model: &ChangeDetector<T>,
    pair: &SamplePair,
    channels: usize,
    out_dir: &Path,
) -> Result<Vec<FeatureImage>> {
    let pred = forward_pair(model, pair)?;
    ensure_dir(out_dir)?;
    let c = pred.features.0.dims().1;
    let k = channels.min(c);
    let mut out = Vec::new();
    let mut emit = |name: String, h: usize, w: usize, values: Vec<f64>| -> Result<()> {
        let path = out_dir.join(name);
        write_gray(&path, h, w, &values)?;
        out.push(FeatureImage {
            path,
            height: h,
            width: w,
            values,
        });
        Ok(())
    };
    let refined = [&pred.transformer.refined.0, &pred.transformer.refined.1];
    for (t, (x, xn)) in [&pred.features.0, &pred.features.1].into_iter().zip(refined).enumerate() {
        let (_, _, h, w) = x.dims();
        let delta = ops::sub(&xn.values, &x.values)?;
        for ch in 0..k {
            emit(format!("t{}_x_c{ch}.png", t + 1), h, w, min_max_normalize(&plane(x.values.value(), ch)))?;
            emit(format!("t{}_xnew_c{ch}.png", t + 1), h, w, min_max_normalize(&plane(xn.values.value(), ch)))?;
            emit(format!("t{}_delta_c{ch}.png", t + 1), h, w, min_max_normalize(&plane(delta.value(), ch)))?;
        }
    }
    let (h, w) = (pair.height(), pair.width());
    for ch in 0..k {
        emit(format!("fdi_c{ch}.png"), h, w, min_max_normalize(&plane(pred.difference.value(), ch)))?;
    }
    emit("prob.png".into(), h, w, plane(pred.probs.value(), 1))?;
    Ok(out)
}

/// Number of files [`visualize_features`] writes for `channels` channels.
pub fn feature_file_count(channels: usize) -> usize {
    7 * channels + 1
}
