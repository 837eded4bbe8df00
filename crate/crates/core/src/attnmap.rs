//! Saliency maps from encoder attention.
//!
//! Pipeline: reduce heads (or roll out across layers) to one score per token,
//! lay the scores on the patch grid, upsample bilinearly to the image and
//! min-max normalize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::preprocess::{bracket, lerp, Image};
use crate::scalar::Scalar;

/// How the per-token scores were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SingleLayer { layer: usize },
    Rollout,
}

/// Which side of the attention matrix is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Column means: how much each token is attended to.
    #[default]
    Received,
    /// The head-averaged attention row of one query token.
    Emitted { query: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSource {
    pub method: Method,
    pub reduction: Reduction,
}

/// `H × W` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source: MapSource,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Head-averaged `N × N` attention matrix.
pub fn head_mean_matrix<T: Scalar>(rec: &AttentionRecord<T>) -> Vec<f64> {
    let nn = rec.tokens * rec.tokens;
    let mut m = vec![0.0; nn];
    for h in 0..rec.heads {
        for (acc, v) in m.iter_mut().zip(rec.head(h)) {
            *acc += v.as_f64();
        }
    }
    let inv = 1.0 / rec.heads as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

fn column_means(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in m.chunks_exact(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Mean attention received per token, averaged over heads.
pub fn head_mean_map<T: Scalar>(rec: &AttentionRecord<T>) -> Vec<f64> {
    column_means(&head_mean_matrix(rec), rec.tokens)
}

/// Attention emitted by `query`, averaged over heads.
pub fn head_mean_emitted<T: Scalar>(rec: &AttentionRecord<T>, query: usize) -> Result<Vec<f64>> {
    if query >= rec.tokens {
        return Err(Error::Bounds(format!(
            "query token {query} out of range 0..{}",
            rec.tokens
        )));
    }
    let n = rec.tokens;
    let m = head_mean_matrix(rec);
    Ok(m[query * n..(query + 1) * n].to_vec())
}

pub fn reduce<T: Scalar>(rec: &AttentionRecord<T>, reduction: Reduction) -> Result<Vec<f64>> {
    match reduction {
        Reduction::Received => Ok(head_mean_map(rec)),
        Reduction::Emitted { query } => head_mean_emitted(rec, query),
    }
}

/// `M ← rownorm((Ā + I) / 2) · M` over the layers, starting from the identity.
pub fn rollout_matrix<T: Scalar>(records: &[AttentionRecord<T>]) -> Result<Vec<f64>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("rollout over zero layers".into()))?;
    let n = first.tokens;
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    for rec in records {
        if rec.tokens != n {
            return Err(Error::Shape(format!(
                "layer {} has {} tokens, expected {n}",
                rec.layer, rec.tokens
            )));
        }
        let mut a = head_mean_matrix(rec);
        for (i, row) in a.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v *= 0.5);
            row[i] += 0.5;
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += aik * m[k * n + j];
                }
            }
        }
        m = next;
    }
    Ok(m)
}

pub fn rollout<T: Scalar>(records: &[AttentionRecord<T>]) -> Result<Vec<f64>> {
    let n = records.first().map_or(0, |r| r.tokens);
    Ok(column_means(&rollout_matrix(records)?, n))
}

/// Scores laid on the `rows × cols` grid and bilinearly upsampled to
/// `height × width` with half-pixel alignment; no normalization.
pub fn upsample_scores(
    scores: &[f64],
    grid: (usize, usize),
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || scores.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} scores cannot fill a {rows}x{cols} patch grid",
            scores.len()
        )));
    }
    let g = Image::new(rows, cols, 1, scores.to_vec())?;
    let (sy, sx) = (rows as f64 / height as f64, cols as f64 / width as f64);
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let gy = (y as f64 + 0.5) * sy - 0.5;
            let gx = (x as f64 + 0.5) * sx - 0.5;
            g.sample_bilinear(gy, gx, &mut out[y * width + x..y * width + x + 1]);
        }
    }
    Ok(out)
}

/// Continuous-coordinate value of the same interpolant used by
/// [`upsample_scores`].
pub fn grid_value_at(scores: &[f64], grid: (usize, usize), gy: f64, gx: f64) -> f64 {
    let (y0, y1, fy) = bracket(gy, grid.0);
    let (x0, x1, fx) = bracket(gx, grid.1);
    let at = |y: usize, x: usize| scores[y * grid.1 + x];
    lerp(
        lerp(at(y0, x0), at(y0, x1), fx),
        lerp(at(y1, x0), at(y1, x1), fx),
        fy,
    )
}

/// `(v − min) / (max − min)`; constant input maps to zeros.
pub fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
}

pub fn to_heatmap(
    scores: &[f64],
    extents: (usize, usize),
    patch: usize,
    source: MapSource,
) -> Result<SaliencyMap> {
    let (h, w) = extents;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            patch,
        });
    }
    let mut values = upsample_scores(scores, (h / patch, w / patch), h, w)?;
    min_max(&mut values);
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
        source,
    })
}

/// Color ramp stops: 0 → black, 0.5 → `(0.85, 0.25, 0.0)`, 1 → `(1.0, 1.0, 0.7)`.
/// Each channel is non-decreasing in `v`.
pub const RAMP: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [0.85, 0.25, 0.0], [1.0, 1.0, 0.7]];

pub fn colorize(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let (lo, hi, t) = if v <= 0.5 {
        (RAMP[0], RAMP[1], v * 2.0)
    } else {
        (RAMP[1], RAMP[2], (v - 0.5) * 2.0)
    };
    [0, 1, 2].map(|c| lo[c] + (hi[c] - lo[c]) * t)
}

/// Single-channel image of the map values.
pub fn grayscale(map: &SaliencyMap) -> Image<f64> {
    Image::new(map.height, map.width, 1, map.values.clone()).expect("map extents are consistent")
}

pub fn colorized(map: &SaliencyMap) -> Image<f64> {
    let data = map.values.iter().flat_map(|&v| colorize(v)).collect();
    Image::new(map.height, map.width, 3, data).expect("map extents are consistent")
}

/// `(1 − α)·image + α·colorize(map)`, RGB output. Grayscale inputs are
/// replicated across channels; image values are clamped to `[0, 1]` first.
pub fn overlay<T: Scalar>(map: &SaliencyMap, image: &Image<T>, alpha: f64) -> Result<Image<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "overlay alpha must be in [0, 1], got {alpha}"
        )));
    }
    if (image.height, image.width) != (map.height, map.width) {
        return Err(Error::dim(
            "overlay",
            &[map.height, map.width],
            &[image.height, image.width],
        ));
    }
    if image.channels != 1 && image.channels != 3 {
        return Err(Error::Shape(format!(
            "overlay needs 1 or 3 channels, got {}",
            image.channels
        )));
    }
    let mut data = Vec::with_capacity(map.values.len() * 3);
    for (i, &v) in map.values.iter().enumerate() {
        let px = &image.data[i * image.channels..(i + 1) * image.channels];
        let color = colorize(v);
        for (c, &col) in color.iter().enumerate() {
            let base = px[c % image.channels].as_f64().clamp(0.0, 1.0);
            data.push(((1.0 - alpha) * base + alpha * col).clamp(0.0, 1.0));
        }
    }
    Image::new(map.height, map.width, 3, data)
}
