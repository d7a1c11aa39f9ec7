//! Bitemporal datasets: directory ingestion, patch cropping, augmentation
//! and a synthetic generator that writes the same on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Channel-planar `[C, H, W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "raster {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Two co-registered images and their binary change label.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub t1: Raster,
    pub t2: Raster,
    /// Row-major `H × W`, 1 = change.
    pub label: Vec<u8>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, t1: Raster, t2: Raster, label: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if t1.channels != 3 || t2.channels != 3 {
            return Err(Error::Data(format!("{id}: images must have 3 channels")));
        }
        if (t1.height, t1.width) != (t2.height, t2.width) || label.len() != t1.height * t1.width {
            return Err(Error::Data(format!("{id}: images and label differ in extent")));
        }
        if label.iter().any(|&l| l > 1) {
            return Err(Error::Data(format!("{id}: label values must be 0 or 1")));
        }
        Ok(Self { id, t1, t2, label })
    }

    pub fn height(&self) -> usize {
        self.t1.height
    }

    pub fn width(&self) -> usize {
        self.t1.width
    }

    pub fn change_fraction(&self) -> f64 {
        self.label.iter().map(|&l| l as usize).sum::<usize>() as f64 / self.label.len().max(1) as f64
    }
}

/// Ordered sample identifiers of one split directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub split: String,
    /// The split directory holding `A/`, `B/` and `label/`.
    pub dir: PathBuf,
    pub ids: Vec<String>,
}

const SUBDIRS: [&str; 3] = ["A", "B", "label"];

fn list_files(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Indexes `root/<split>/{A,B,label}`. Every file must exist in all three
/// subdirectories; a missing or absent split directory gives an empty index.
pub fn index_dataset(root: &Path, split: &str) -> Result<DatasetIndex> {
    let dir = root.join(split);
    let lists: Vec<Vec<String>> = SUBDIRS.iter().map(|s| list_files(&dir.join(s))).collect::<Result<_>>()?;
    let mut ids: Vec<String> = lists.iter().flatten().cloned().collect();
    ids.sort();
    ids.dedup();
    for id in &ids {
        for (sub, list) in SUBDIRS.iter().zip(&lists) {
            if list.binary_search(id).is_err() {
                return Err(Error::Ingestion {
                    id: id.clone(),
                    reason: format!("no counterpart in {}/", sub),
                });
            }
        }
    }
    Ok(DatasetIndex {
        split: split.to_string(),
        dir,
        ids,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decodes sample `i`; any nonzero label pixel counts as change.
    pub fn load(&self, i: usize) -> Result<SamplePair> {
        let id = &self.ids[i];
        let t1 = Raster::from_rgb(&open_image(&self.dir.join("A").join(id))?.to_rgb8());
        let t2 = Raster::from_rgb(&open_image(&self.dir.join("B").join(id))?.to_rgb8());
        let label_img = open_image(&self.dir.join("label").join(id))?.to_luma8();
        let label: Vec<u8> = label_img.pixels().map(|p| u8::from(p[0] != 0)).collect();
        let same = (t1.height, t1.width) == (t2.height, t2.width)
            && (label_img.height() as usize, label_img.width() as usize) == (t1.height, t1.width);
        if !same {
            return Err(Error::Ingestion {
                id: id.clone(),
                reason: "A, B and label differ in extent".into(),
            });
        }
        SamplePair::new(id.clone(), t1, t2, label)
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Writes a pair in the `A/`, `B/`, `label/` layout under `dir`.
pub fn write_sample(dir: &Path, pair: &SamplePair) -> Result<()> {
    for s in SUBDIRS {
        let sub = dir.join(s);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let save_err = |path: PathBuf| move |source| Error::Image { path, source };
    let a = dir.join("A").join(&pair.id);
    pair.t1.to_rgb().save(&a).map_err(save_err(a.clone()))?;
    let b = dir.join("B").join(&pair.id);
    pair.t2.to_rgb().save(&b).map_err(save_err(b.clone()))?;
    let l = dir.join("label").join(&pair.id);
    let (w, h) = (pair.width() as u32, pair.height() as u32);
    let img = GrayImage::from_fn(w, h, |x, y| image::Luma([pair.label[(y * w + x) as usize] * 255]));
    img.save(&l).map_err(save_err(l.clone()))?;
    Ok(())
}

fn crop_raster(r: &Raster, y0: usize, x0: usize, size: usize) -> Raster {
    let mut data = Vec::with_capacity(r.channels * size * size);
    for c in 0..r.channels {
        for y in y0..y0 + size {
            let row = (c * r.height + y) * r.width;
            data.extend_from_slice(&r.data[row + x0..row + x0 + size]);
        }
    }
    Raster {
        channels: r.channels,
        height: size,
        width: size,
        data,
    }
}

/// Non-overlapping `size × size` tiles on a floor grid; leftover border
/// pixels are dropped. Tile ids append `_r{row}_c{col}`.
pub fn crop_patches(pair: &SamplePair, size: usize) -> Result<Vec<SamplePair>> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || h < size || w < size {
        return Err(Error::Data(format!("{}: {h}×{w} image is smaller than patch size {size}", pair.id)));
    }
    let (stem, ext) = match pair.id.rsplit_once('.') {
        Some((s, e)) => (s.to_string(), format!(".{e}")),
        None => (pair.id.clone(), String::new()),
    };
    let mut out = Vec::new();
    for r in 0..h / size {
        for c in 0..w / size {
            let (y0, x0) = (r * size, c * size);
            let mut label = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                label.extend_from_slice(&pair.label[y * w + x0..y * w + x0 + size]);
            }
            out.push(SamplePair {
                id: format!("{stem}_r{r}_c{c}{ext}"),
                t1: crop_raster(&pair.t1, y0, x0, size),
                t2: crop_raster(&pair.t2, y0, x0, size),
                label,
            });
        }
    }
    Ok(out)
}

/// Probabilities and magnitudes of the training augmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    pub rescale: f64,
    pub blur: f64,
    pub scale_range: (f64, f64),
    pub max_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rescale: 0.5,
            blur: 0.5,
            scale_range: (0.8, 1.25),
            max_sigma: 1.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rescale: 0.0,
            blur: 0.0,
            ..Self::default()
        }
    }
}

/// Source-coordinate map shared by all three rasters of a pair.
trait Remap {
    fn src(&self, y: usize, x: usize) -> (usize, usize);
}

struct Flip {
    h: usize,
    w: usize,
    horizontal: bool,
}

impl Remap for Flip {
    fn src(&self, y: usize, x: usize) -> (usize, usize) {
        if self.horizontal {
            (y, self.w - 1 - x)
        } else {
            (self.h - 1 - y, x)
        }
    }
}

fn remap_raster(r: &Raster, map: &dyn Remap) -> Raster {
    let mut out = r.clone();
    for c in 0..r.channels {
        for y in 0..r.height {
            for x in 0..r.width {
                let (sy, sx) = map.src(y, x);
                out.data[(c * r.height + y) * r.width + x] = r.at(c, sy, sx);
            }
        }
    }
    out
}

fn remap_label(l: &[u8], w: usize, h: usize, map: &dyn Remap) -> Vec<u8> {
    let mut out = vec![0; l.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map.src(y, x);
            out[y * w + x] = l[sy * w + sx];
        }
    }
    out
}

/// Mirrors the pair horizontally or vertically.
pub fn flip(pair: &SamplePair, horizontal: bool) -> SamplePair {
    let (h, w) = (pair.height(), pair.width());
    let map = Flip { h, w, horizontal };
    SamplePair {
        id: pair.id.clone(),
        t1: remap_raster(&pair.t1, &map),
        t2: remap_raster(&pair.t2, &map),
        label: remap_label(&pair.label, w, h, &map),
    }
}

/// Reflects index `i` into `[0, n)` (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Half-pixel bilinear sample of plane `c` of `r` at output size `(oh, ow)`.
fn resize_raster(r: &Raster, oh: usize, ow: usize) -> Raster {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, r.height, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, r.width, ow)).collect();
    let mut data = Vec::with_capacity(r.channels * oh * ow);
    for c in 0..r.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = r.at(c, y0, x0) * (1.0 - fx) + r.at(c, y0, x1) * fx;
                let bot = r.at(c, y1, x0) * (1.0 - fx) + r.at(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Raster {
        channels: r.channels,
        height: oh,
        width: ow,
        data,
    }
}

fn resize_label_nearest(l: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let near = |dst: usize, n_in: usize, n_out: usize| (((dst as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = near(y, h, oh);
        for x in 0..ow {
            out.push(l[sy * w + near(x, w, ow)]);
        }
    }
    out
}

/// Places a `sh × sw` image into `h × w`: a crop at `offset` when larger, a
/// reflect-padded canvas with the image at `offset` when smaller.
struct Window {
    sh: usize,
    sw: usize,
    oy: usize,
    ox: usize,
    grow_y: bool,
    grow_x: bool,
}

impl Remap for Window {
    fn src(&self, y: usize, x: usize) -> (usize, usize) {
        let sy = if self.grow_y {
            y + self.oy
        } else {
            reflect(y as isize - self.oy as isize, self.sh)
        };
        let sx = if self.grow_x {
            x + self.ox
        } else {
            reflect(x as isize - self.ox as isize, self.sw)
        };
        (sy, sx)
    }
}

fn window_raster(r: &Raster, h: usize, w: usize, win: &Window) -> Raster {
    let mut data = Vec::with_capacity(r.channels * h * w);
    for c in 0..r.channels {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = win.src(y, x);
                data.push(r.at(c, sy, sx));
            }
        }
    }
    Raster {
        channels: r.channels,
        height: h,
        width: w,
        data,
    }
}

/// Uniform rescale by `scale`, then crop or reflect-pad back to the original
/// extent with the window offset drawn from `rng`.
pub fn rescale<R: Rng + ?Sized>(pair: &SamplePair, scale: f64, rng: &mut R) -> SamplePair {
    let (h, w) = (pair.height(), pair.width());
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let t1 = resize_raster(&pair.t1, sh, sw);
    let t2 = resize_raster(&pair.t2, sh, sw);
    let label = resize_label_nearest(&pair.label, h, w, sh, sw);
    let pick = |rng: &mut R, a: usize, b: usize| rng.random_range(0..=a.abs_diff(b));
    let win = Window {
        sh,
        sw,
        oy: pick(rng, sh, h),
        ox: pick(rng, sw, w),
        grow_y: sh >= h,
        grow_x: sw >= w,
    };
    let mut lab = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = win.src(y, x);
            lab.push(label[sy * sw + sx]);
        }
    }
    SamplePair {
        id: pair.id.clone(),
        t1: window_raster(&t1, h, w, &win),
        t2: window_raster(&t2, h, w, &win),
        label: lab,
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    if sigma < 1e-3 {
        return r.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (r.height, r.width);
    let mut out = r.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..r.channels {
        let src = r.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * src[y * w + reflect(x as isize + k as isize - radius, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Random flips, rescale-and-crop and blur, each applied independently
/// with its configured probability. Geometry is shared by both images and
/// the label; blur touches the images only.
pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, cfg: &AugmentConfig, rng: &mut R) -> SamplePair {
    let mut p = pair.clone();
    if rng.random_bool(cfg.hflip) {
        p = flip(&p, true);
    }
    if rng.random_bool(cfg.vflip) {
        p = flip(&p, false);
    }
    if rng.random_bool(cfg.rescale) {
        let s = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        p = rescale(&p, s, rng);
    }
    if rng.random_bool(cfg.blur) {
        let sigma = rng.random_range(0.0..=cfg.max_sigma);
        p.t1 = gaussian_blur(&p.t1, sigma);
        p.t2 = gaussian_blur(&p.t2, sigma);
    }
    p
}

/// Maps `[0, 1]` pixels to the network input range with mean 0.5, std 0.5.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) / 0.5
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Objects present in both images.
    pub static_objects: (usize, usize),
    /// Objects added or removed between the two images.
    pub changed_objects: (usize, usize),
    /// Object side length as a fraction of the image side.
    pub object_extent: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            static_objects: (2, 4),
            changed_objects: (1, 4),
            object_extent: (0.12, 0.26),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    color: [f32; 3],
}

impl Object {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.h || x >= self.x0 + self.w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cy = (y - self.y0) as f64 + 0.5 - self.h as f64 / 2.0;
                let cx = (x - self.x0) as f64 + 0.5 - self.w as f64 / 2.0;
                (cy / (self.h as f64 / 2.0)).powi(2) + (cx / (self.w as f64 / 2.0)).powi(2) <= 1.0
            }
        }
    }

    fn overlaps(&self, o: &Object, margin: usize) -> bool {
        self.y0 < o.y0 + o.h + margin
            && o.y0 < self.y0 + self.h + margin
            && self.x0 < o.x0 + o.w + margin
            && o.x0 < self.x0 + self.w + margin
    }
}

fn random_object<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Object {
    let n = cfg.size as f64;
    let side = |rng: &mut R| ((rng.random_range(cfg.object_extent.0..=cfg.object_extent.1) * n).round() as usize).clamp(2, cfg.size);
    let (h, w) = (side(rng), side(rng));
    // Roofs: bright, saturated or gray tones distinct from the terrain.
    let palette = [[0.85, 0.35, 0.30], [0.80, 0.80, 0.78], [0.35, 0.45, 0.80], [0.90, 0.75, 0.40]];
    let base = palette[rng.random_range(0..palette.len())];
    let jitter = rng.random_range(-0.06..0.06);
    Object {
        shape: if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
        y0: rng.random_range(0..=cfg.size - h),
        x0: rng.random_range(0..=cfg.size - w),
        h,
        w,
        color: base.map(|c: f32| (c + jitter).clamp(0.0, 1.0)),
    }
}

/// Terrain shared by both dates: a base tone plus low-frequency waves.
fn terrain<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Raster {
    let base = [rng.random_range(0.25..0.45), rng.random_range(0.35..0.55), rng.random_range(0.20..0.35)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let mut r = Raster::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
            let t: f64 = waves
                .iter()
                .map(|&(a, b, ph, amp)| amp * (std::f64::consts::TAU * (a * fy + b * fx) + ph).sin())
                .sum();
            for (c, &b) in base.iter().enumerate() {
                r.data[(c * size + y) * size + x] = (b + t) as f32;
            }
        }
    }
    r
}

/// Global brightness shift, per-channel gain and pixel noise: appearance
/// changes that carry no change label.
fn photometric<R: Rng + ?Sized>(r: &mut Raster, rng: &mut R) {
    let shift = rng.random_range(-0.12..0.12);
    let gains = [rng.random_range(0.85..1.15), rng.random_range(0.85..1.15), rng.random_range(0.85..1.15)];
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    for (c, gain) in gains.into_iter().enumerate() {
        for v in r.plane_mut(c) {
            *v = (*v * gain + shift + noise.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
}

fn paint(r: &mut Raster, objects: &[Object]) {
    let n = r.width;
    for o in objects {
        for y in o.y0..o.y0 + o.h {
            for x in o.x0..o.x0 + o.w {
                if o.covers(y, x) {
                    for c in 0..3 {
                        r.data[(c * r.height + y) * n + x] = o.color[c];
                    }
                }
            }
        }
    }
}

/// One synthetic pair. Objects never overlap, so the label is exactly the
/// union of the added and removed footprints.
pub fn synth_pair<R: Rng + ?Sized>(id: impl Into<String>, cfg: &SynthConfig, rng: &mut R) -> Result<SamplePair> {
    if cfg.size == 0 || !cfg.size.is_multiple_of(4) {
        return Err(Error::contract(format!("synthetic size {} must be a positive multiple of 4", cfg.size)));
    }
    let n_static = rng.random_range(cfg.static_objects.0..=cfg.static_objects.1);
    let n_changed = rng.random_range(cfg.changed_objects.0..=cfg.changed_objects.1);
    let mut placed: Vec<Object> = Vec::new();
    let margin = (cfg.size / 32).max(1);
    let mut attempts = 0;
    while placed.len() < n_static + n_changed && attempts < 200 {
        attempts += 1;
        let o = random_object(cfg, rng);
        if placed.iter().all(|p| !p.overlaps(&o, margin)) {
            placed.push(o);
        }
    }
    let changed_count = placed.len().saturating_sub(n_static).min(n_changed);
    let (statics, changed) = placed.split_at(placed.len() - changed_count);
    let mut before: Vec<Object> = statics.to_vec();
    let mut after: Vec<Object> = statics.to_vec();
    for o in changed {
        if rng.random_bool(0.5) {
            before.push(*o);
        } else {
            after.push(*o);
        }
    }
    let ground = terrain(cfg.size, rng);
    let (mut t1, mut t2) = (ground.clone(), ground);
    paint(&mut t1, &before);
    paint(&mut t2, &after);
    photometric(&mut t1, rng);
    photometric(&mut t2, rng);
    let mut label = vec![0u8; cfg.size * cfg.size];
    for o in changed {
        for y in o.y0..o.y0 + o.h {
            for x in o.x0..o.x0 + o.w {
                if o.covers(y, x) {
                    label[y * cfg.size + x] = 1;
                }
            }
        }
    }
    SamplePair::new(id, t1, t2, label)
}

/// Generates `n` pairs with a generator seeded by `seed`.
pub fn synth_samples(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SamplePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_pair(format!("{i:05}.png"), cfg, &mut rng)).collect()
}

/// Writes `n` synthetic pairs to `root/<split>/{A,B,label}`.
pub fn synth_generate(root: &Path, split: &str, n: usize, cfg: &SynthConfig, seed: u64) -> Result<DatasetIndex> {
    let dir = root.join(split);
    for pair in synth_samples(n, cfg, seed)? {
        write_sample(&dir, &pair)?;
    }
    index_dataset(root, split)
}

/// Deterministic reordering of `0..n`.
pub fn shuffled_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Patches of an indexed split, cut on demand. Every image must share the
/// extent of the first one.
#[derive(Clone, Debug)]
pub struct PatchIndex {
    pub index: DatasetIndex,
    pub size: usize,
    pub grid: (usize, usize),
}

impl PatchIndex {
    pub fn new(index: DatasetIndex, size: usize) -> Result<Self> {
        let grid = if index.is_empty() {
            (0, 0)
        } else {
            let first = index.load(0)?;
            if size == 0 || first.height() < size || first.width() < size {
                return Err(Error::Data(format!(
                    "{}: {}×{} image is smaller than patch size {size}",
                    first.id,
                    first.height(),
                    first.width()
                )));
            }
            (first.height() / size, first.width() / size)
        };
        Ok(Self { index, size, grid })
    }

    pub fn len(&self) -> usize {
        self.index.len() * self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, i: usize) -> Result<SamplePair> {
        let per_image = self.grid.0 * self.grid.1;
        let pair = self.index.load(i / per_image)?;
        if (pair.height() / self.size, pair.width() / self.size) != self.grid {
            return Err(Error::Ingestion {
                id: pair.id,
                reason: "extent differs from the first image of the split".into(),
            });
        }
        let mut tiles = crop_patches(&pair, self.size)?;
        Ok(tiles.swap_remove(i % per_image))
    }
}
