//! Image/mask containers and the spatial and intensity preprocessing steps:
//! resizing, center cropping, quarter-turn rotation, flips, grid distortion,
//! z-score and min-max normalization, and the seeded augmentation pipeline.
//!
//! Every spatial op is applied to the image and its mask together.
//! Images are interpolated bilinearly, masks by nearest neighbour, so no
//! new labels ever appear in a mask.

mod augment;

pub use augment::{augment, AugmentConfig, Transform, TransformSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

use rand::Rng as _;
use rand::SeedableRng;

/// Row-major `H×W×C` image (channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: T) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the border.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [T]) {
        let (y0, y1, fy) = bracket(y, self.height);
        let (x0, x1, fx) = bracket(x, self.width);
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = lerp(self.get(y0, x0, c), self.get(y0, x1, c), fx);
            let bottom = lerp(self.get(y1, x0, c), self.get(y1, x1, c), fx);
            *o = lerp(top, bottom, fy);
        }
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a + (b − a)·t`; exact when `a == b`.
#[inline]
pub(crate) fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Integer neighbours and fraction of a continuous coordinate in `0..len`.
#[inline]
pub(crate) fn bracket(v: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let v = v.clamp(0.0, max);
    let lo = v.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, v - lo)
}

/// Row-major `H×W` label map of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Mask {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Sorted distinct labels present.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.data.iter().for_each(|&l| seen[l as usize] = true);
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// An image with its segmentation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Image<T>,
    pub mask: Mask,
    pub id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Image<T>, mask: Mask, id: impl Into<String>) -> Result<Self> {
        if image.height != mask.height || image.width != mask.width {
            return Err(Error::Shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    /// Checks every mask label is below `num_classes`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.mask.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::Config(format!(
                "sample {} has label {l} but only {num_classes} classes are configured",
                self.id
            ))),
            None => Ok(()),
        }
    }

    fn with_parts(&self, image: Image<T>, mask: Mask) -> Self {
        Sample {
            image,
            mask,
            id: self.id.clone(),
        }
    }
}

/// Rebuilds image and mask with a coordinate map `dst (y, x) → src (y, x)`
/// over a destination of `height×width`.
fn remap<T: Scalar>(
    s: &Sample<T>,
    height: usize,
    width: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Sample<T> {
    let c = s.image.channels;
    let mut img = Vec::with_capacity(height * width * c);
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = src(y, x);
            img.extend_from_slice(s.image.pixel(sy, sx));
            mask.push(s.mask.get(sy, sx));
        }
    }
    s.with_parts(
        Image {
            height,
            width,
            channels: c,
            data: img,
        },
        Mask {
            height,
            width,
            data: mask,
        },
    )
}

/// Resizes to `r×r`: bilinear for the image, nearest for the mask, with
/// pixel centers aligned (`src = (dst + 0.5)·scale − 0.5`).
pub fn resize_sample<T: Scalar>(s: &Sample<T>, r: usize) -> Result<Sample<T>> {
    if r == 0 {
        return Err(Error::Config("resize target must be >= 1".into()));
    }
    if s.image.height == r && s.image.width == r {
        return Ok(s.clone());
    }
    let sy = s.image.height as f64 / r as f64;
    let sx = s.image.width as f64 / r as f64;
    let c = s.image.channels;
    let mut img = vec![T::zero(); r * r * c];
    let mut mask = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let off = (y * r + x) * c;
            s.image.sample_bilinear(fy, fx, &mut img[off..off + c]);
            let ny = (((y as f64 + 0.5) * sy).floor() as usize).min(s.mask.height - 1);
            let nx = (((x as f64 + 0.5) * sx).floor() as usize).min(s.mask.width - 1);
            mask[y * r + x] = s.mask.get(ny, nx);
        }
    }
    Ok(s.with_parts(Image::new(r, r, c, img)?, Mask::new(r, r, mask)?))
}

/// Centered `h×w` window at offsets `⌊(H−h)/2⌋, ⌊(W−w)/2⌋`.
pub fn crop_center<T: Scalar>(s: &Sample<T>, h: usize, w: usize) -> Result<Sample<T>> {
    let (sh, sw) = (s.image.height, s.image.width);
    if h == 0 || w == 0 || h > sh || w > sw {
        return Err(Error::Bounds(format!(
            "cannot crop {h}x{w} out of a {sh}x{sw} image"
        )));
    }
    let (oy, ox) = ((sh - h) / 2, (sw - w) / 2);
    Ok(remap(s, h, w, |y, x| (y + oy, x + ox)))
}

/// Counter-clockwise rotation by `k` quarter turns. One turn maps input
/// `(i, j)` to output `(W−1−j, i)`; odd `k` swaps the extents.
pub fn rot90<T: Scalar>(s: &Sample<T>, k: u8) -> Sample<T> {
    let mut out = s.clone();
    for _ in 0..k % 4 {
        let (h, w) = (out.image.height, out.image.width);
        out = remap(&out, w, h, |r, c| (c, w - 1 - r));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror columns (left ↔ right).
    Horizontal,
    /// Mirror rows (top ↔ bottom).
    Vertical,
}

pub fn flip<T: Scalar>(s: &Sample<T>, axis: FlipAxis) -> Sample<T> {
    let (h, w) = (s.image.height, s.image.width);
    match axis {
        FlipAxis::Horizontal => remap(s, h, w, |y, x| (y, w - 1 - x)),
        FlipAxis::Vertical => remap(s, h, w, |y, x| (h - 1 - y, x)),
    }
}

/// Grid points along one axis: `cells` steps, each scaled by an independent
/// uniform factor in `[1−d, 1+d]`, cumulated and rescaled to span `0..=len−1`.
fn distorted_axis(len: usize, cells: usize, d: f64, rng: &mut Rng) -> Vec<f64> {
    let steps: Vec<f64> = (0..cells).map(|_| 1.0 + rng.random_range(-d..=d)).collect();
    let total: f64 = steps.iter().sum();
    let span = (len - 1) as f64;
    let mut points = Vec::with_capacity(cells + 1);
    let mut acc = 0.0;
    points.push(0.0);
    for s in &steps {
        acc += s;
        points.push(acc / total * span);
    }
    points[cells] = span;
    points
}

/// Maps a destination coordinate on the uniform grid into the distorted grid.
fn warp(v: usize, len: usize, points: &[f64]) -> f64 {
    let cells = points.len() - 1;
    if len == 1 {
        return 0.0;
    }
    let cell_len = (len - 1) as f64 / cells as f64;
    let pos = v as f64 / cell_len;
    let cell = (pos.floor() as usize).min(cells - 1);
    let t = pos - cell as f64;
    points[cell] + t * (points[cell + 1] - points[cell])
}

/// Grid distortion with `cells` cells per axis and magnitude `d ∈ [0, 1)`.
/// The image is resampled bilinearly, the mask by nearest neighbour.
/// `d = 0` is the identity.
pub fn grid_distortion<T: Scalar>(
    s: &Sample<T>,
    cells: usize,
    d: f64,
    seed: u64,
) -> Result<Sample<T>> {
    if cells == 0 {
        return Err(Error::Config(
            "grid distortion needs at least one cell".into(),
        ));
    }
    if !(0.0..1.0).contains(&d) {
        return Err(Error::Config(format!(
            "grid distortion magnitude must be in [0, 1), got {d}"
        )));
    }
    if d == 0.0 {
        return Ok(s.clone());
    }
    let mut rng = Rng::seed_from_u64(seed);
    let (h, w, c) = (s.image.height, s.image.width, s.image.channels);
    let ys = distorted_axis(h, cells, d, &mut rng);
    let xs = distorted_axis(w, cells, d, &mut rng);
    let src_y: Vec<f64> = (0..h).map(|y| warp(y, h, &ys)).collect();
    let src_x: Vec<f64> = (0..w).map(|x| warp(x, w, &xs)).collect();
    let mut img = vec![T::zero(); h * w * c];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let off = (y * w + x) * c;
            s.image
                .sample_bilinear(src_y[y], src_x[x], &mut img[off..off + c]);
            let ny = (src_y[y].round() as usize).min(h - 1);
            let nx = (src_x[x].round() as usize).min(w - 1);
            mask[y * w + x] = s.mask.get(ny, nx);
        }
    }
    Ok(s.with_parts(Image::new(h, w, c, img)?, Mask::new(h, w, mask)?))
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    /// Population statistics over all pixels of all `images`.
    pub fn from_images<T: Scalar>(images: &[&Image<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("statistics of an empty image set".into()))?;
        let c = first.channels;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for img in images {
            if img.channels != c {
                return Err(Error::dim("norm_stats", &[c], &[img.channels]));
            }
            for px in img.data.chunks_exact(c) {
                px.iter().zip(&mut sum).for_each(|(v, s)| *s += v.as_f64());
            }
            count += img.height * img.width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for img in images {
            for px in img.data.chunks_exact(c) {
                for ((v, s), m) in px.iter().zip(&mut sq).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
        }
        Ok(NormStats {
            mean,
            std: sq.iter().map(|s| (s / count as f64).sqrt()).collect(),
            eps: 1e-8,
        })
    }
}

/// `(I − μ) / max(σ, eps)` per channel.
pub fn normalize_zscore<T: Scalar>(image: &Image<T>, stats: &NormStats) -> Result<Image<T>> {
    if stats.mean.len() != image.channels || stats.std.len() != image.channels {
        return Err(Error::dim(
            "normalize_zscore",
            &[image.channels],
            &[stats.mean.len()],
        ));
    }
    if !(stats.eps > 0.0) {
        return Err(Error::Config("normalization eps must be > 0".into()));
    }
    let mean: Vec<T> = stats.mean.iter().map(|&m| T::lit(m)).collect();
    let denom: Vec<T> = stats
        .std
        .iter()
        .map(|&s| T::lit(s.max(stats.eps)))
        .collect();
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(image.channels) {
        for ((v, &m), &d) in px.iter_mut().zip(&mean).zip(&denom) {
            *v = (*v - m) / d;
        }
    }
    Ok(out)
}

/// `(I − min) / (max − min)` over the whole image; constant input maps to zeros.
pub fn normalize_minmax<T: Scalar>(image: &Image<T>) -> Image<T> {
    let lo = image.data.iter().copied().fold(T::infinity(), T::min);
    let hi = image.data.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return image.map(|_| T::zero());
    }
    image.map(|v| ((v - lo) / range).min(T::one()).max(T::zero()))
}

/// Intensity normalization applied before the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    None,
    #[default]
    MinMax,
    ZScore {
        stats: NormStats,
    },
}

impl Normalization {
    pub fn apply<T: Scalar>(&self, image: &Image<T>) -> Result<Image<T>> {
        match self {
            Normalization::None => Ok(image.clone()),
            Normalization::MinMax => Ok(normalize_minmax(image)),
            Normalization::ZScore { stats } => normalize_zscore(image, stats),
        }
    }
}
