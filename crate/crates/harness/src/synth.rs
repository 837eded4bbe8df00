//! Synthetic segmentation data: bright ellipses and rectangles on a dark,
//! noisy background.

use mapunetr_core::rng::{stream, Purpose};
use mapunetr_core::{Image, Mask, Sample, Scalar};
use rand::Rng as _;

use crate::error::{HarnessError, Result};

pub const MIN_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Ellipse,
    Rect,
}

/// An axis-aligned shape in continuous pixel coordinates; pixel `(y, x)` is
/// sampled at its centre `(y + 0.5, x + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    /// Half extents (semi-axes for ellipses).
    pub ry: f64,
    pub rx: f64,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

/// 8-bit quantized value in `[0, 1]`.
fn q8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One sample together with the shapes that produced its mask.
pub fn synth_sample<T: Scalar>(size: usize, seed: u64, index: usize) -> (Sample<T>, Vec<Shape>) {
    let mut rng = stream(seed.wrapping_add((index as u64) << 32), Purpose::Synth);
    let s = size as f64;
    let count = rng.random_range(1..=2);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let ry = rng.random_range(s / 10.0..s / 4.0);
            let rx = rng.random_range(s / 10.0..s / 4.0);
            let shape = Shape {
                kind: if rng.random::<bool>() {
                    ShapeKind::Ellipse
                } else {
                    ShapeKind::Rect
                },
                cy: rng.random_range(ry..s - ry),
                cx: rng.random_range(rx..s - rx),
                ry,
                rx,
            };
            let base = rng.random_range(0.65..0.95);
            let tint = [0, 1, 2].map(|_| base + rng.random_range(-0.05..0.05));
            (shape, tint)
        })
        .collect();

    let mut img = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let texture = 0.04 * ((x as f64 * 0.7).sin() + (y as f64 * 0.45).cos());
            let hit = shapes.iter().rev().find(|(sh, _)| sh.contains(y, x));
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                let v = match hit {
                    Some((_, tint)) => tint[c] + noise,
                    None => 0.12 + texture + noise,
                };
                img.push(T::lit(q8(v)));
            }
            mask.push(u8::from(hit.is_some()));
        }
    }
    let sample = Sample::new(
        Image::new(size, size, 3, img).expect("extents match"),
        Mask::new(size, size, mask).expect("extents match"),
        format!("{index:04}"),
    )
    .expect("extents match");
    (sample, shapes.into_iter().map(|(sh, _)| sh).collect())
}

pub fn synth_dataset<T: Scalar>(n: usize, size: usize, seed: u64) -> Result<Vec<Sample<T>>> {
    if n == 0 {
        return Err(HarnessError::Config("synth needs n >= 1".into()));
    }
    if size < MIN_SIZE {
        return Err(HarnessError::Config(format!(
            "synth size must be >= {MIN_SIZE}, got {size}"
        )));
    }
    Ok((0..n).map(|i| synth_sample(size, seed, i).0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_follow_shapes() {
        for i in 0..20 {
            let (s, shapes) = synth_sample::<f64>(32, 11, i);
            for y in 0..32 {
                for x in 0..32 {
                    let inside = shapes.iter().any(|sh| sh.contains(y, x));
                    assert_eq!(s.mask.get(y, x) == 1, inside);
                }
            }
            assert!(s.mask.data.contains(&1));
        }
    }

    #[test]
    fn values_are_8bit_levels() {
        let (s, _) = synth_sample::<f64>(16, 3, 0);
        for &v in &s.image.data {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn rejects_small_or_empty() {
        assert!(synth_dataset::<f32>(0, 64, 0).is_err());
        assert!(synth_dataset::<f32>(1, 8, 0).is_err());
    }
}
