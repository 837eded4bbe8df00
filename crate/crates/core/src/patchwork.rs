//! Image ↔ token sequence conversion.
//!
//! Patches are enumerated row-major over the patch grid, so token `t` sits
//! at grid cell `(t / cols, t % cols)`. Inside a patch, values are flattened
//! in (row, column, channel) order.

use crate::error::{Error, Result};
use crate::preprocess::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `N × L` raw token matrix cut from an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<T> {
    /// Row-major `n_patches × token_len`.
    pub tokens: Vec<T>,
    pub n_patches: usize,
    pub token_len: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn token(&self, t: usize) -> &[T] {
        &self.tokens[t * self.token_len..(t + 1) * self.token_len]
    }

    /// Grid cell `(row, col)` of token `t`.
    pub fn cell(&self, t: usize) -> (usize, usize) {
        (t / self.grid.1, t % self.grid.1)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.n_patches, self.token_len], self.tokens.clone())
            .expect("patch sequence extents are consistent")
    }
}

/// Square `p×p` patches.
pub fn patchify<T: Scalar>(image: &Image<T>, p: usize) -> Result<PatchSequence<T>> {
    patchify_rect(image, p, p)
}

/// `ph×pw` patches; both must divide the matching image extent.
pub fn patchify_rect<T: Scalar>(
    image: &Image<T>,
    ph: usize,
    pw: usize,
) -> Result<PatchSequence<T>> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            patch: if ph == pw { ph } else { ph.max(pw) },
        });
    }
    let (rows, cols) = (h / ph, w / pw);
    let token_len = ph * pw * c;
    let mut tokens = Vec::with_capacity(rows * cols * token_len);
    for gr in 0..rows {
        for gc in 0..cols {
            for y in gr * ph..(gr + 1) * ph {
                let start = image.index(y, gc * pw, 0);
                tokens.extend_from_slice(&image.data[start..start + pw * c]);
            }
        }
    }
    Ok(PatchSequence {
        tokens,
        n_patches: rows * cols,
        token_len,
        grid: (rows, cols),
        patch_h: ph,
        patch_w: pw,
        channels: c,
    })
}

/// Exact inverse of [`patchify_rect`].
pub fn unpatchify<T: Scalar>(seq: &PatchSequence<T>, h: usize, w: usize) -> Result<Image<T>> {
    let (ph, pw, c) = (seq.patch_h, seq.patch_w, seq.channels);
    let consistent = h * w == seq.n_patches * ph * pw
        && h.is_multiple_of(ph)
        && w.is_multiple_of(pw)
        && (h / ph, w / pw) == seq.grid
        && seq.token_len == ph * pw * c
        && seq.tokens.len() == seq.n_patches * seq.token_len;
    if !consistent {
        return Err(Error::Shape(format!(
            "{} tokens of {ph}x{pw}x{c} cannot tile a {h}x{w} image",
            seq.n_patches
        )));
    }
    let mut data = vec![T::zero(); h * w * c];
    let cols = seq.grid.1;
    for t in 0..seq.n_patches {
        let (gr, gc) = (t / cols, t % cols);
        let tok = seq.token(t);
        for dy in 0..ph {
            let dst = ((gr * ph + dy) * w + gc * pw) * c;
            data[dst..dst + pw * c].copy_from_slice(&tok[dy * pw * c..(dy + 1) * pw * c]);
        }
    }
    Image::new(h, w, c, data)
}

/// `tokens · W_E + pos`: `[N, L] · [L, D] + [N, D]`.
pub fn embed_tokens<T: Scalar>(
    tokens: &Tensor<T>,
    projection: &Tensor<T>,
    positions: &Tensor<T>,
) -> Result<Tensor<T>> {
    let projected = tokens.matmul(projection)?;
    if projected.shape() != positions.shape() {
        return Err(Error::dim(
            "embed_tokens",
            projected.shape(),
            positions.shape(),
        ));
    }
    projected.add(positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image<f64> {
        Image::new(h, w, c, (0..h * w * c).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn token_count_for_256_image_patch_16() {
        let img = Image::filled(256, 256, 3, 0.5f32);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.n_patches, 256);
        assert_eq!(seq.token_len, 768);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = ramp(16, 16, 1);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.n_patches, 1);
        assert_eq!(seq.tokens, img.data);
    }

    #[test]
    fn first_token_indices() {
        let seq = patchify(&ramp(4, 4, 1), 2).unwrap();
        assert_eq!(seq.token(0), &[0., 1., 4., 5.]);
        assert_eq!(seq.token(1), &[2., 3., 6., 7.]);
        assert_eq!(seq.cell(3), (1, 1));
    }

    #[test]
    fn divisibility_error_names_extents() {
        let err = patchify(&ramp(6, 8, 1), 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("6x8") && msg.contains('4'), "{msg}");
    }

    #[test]
    fn token_one_is_top_right_block() {
        // 4 tokens of a 2×2 grid; fill token 1 with ones.
        let mut seq = patchify(&Image::filled(4, 4, 1, 0.0f64), 2).unwrap();
        seq.tokens[4..8].iter_mut().for_each(|v| *v = 1.0);
        let img = unpatchify(&seq, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = y < 2 && x >= 2;
                assert_eq!(img.get(y, x, 0), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_token_unpatchify() {
        let img = ramp(3, 3, 2);
        let seq = patchify(&img, 3).unwrap();
        assert_eq!(unpatchify(&seq, 3, 3).unwrap(), img);
    }

    #[test]
    fn inconsistent_unpatchify_extents() {
        let seq = patchify(&ramp(4, 4, 1), 2).unwrap();
        assert!(unpatchify(&seq, 2, 8).is_err());
        assert!(unpatchify(&seq, 8, 8).is_err());
    }

    #[test]
    fn rectangular_patches_roundtrip() {
        let img = ramp(6, 8, 2);
        let seq = patchify_rect(&img, 3, 4).unwrap();
        assert_eq!(seq.grid, (2, 2));
        assert_eq!(unpatchify(&seq, 6, 8).unwrap(), img);
    }

    #[test]
    fn embedding_examples() {
        let tokens = Tensor::<f64>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[2., 3., 5., 7.]).unwrap();
        let pos = Tensor::<f64>::zeros(&[1, 2]);
        assert_eq!(
            embed_tokens(&tokens, &w, &pos).unwrap().to_vec(),
            vec![2., 3.]
        );

        let pos = Tensor::<f64>::from_f64(&[1, 2], &[0.25, -0.5]).unwrap();
        let zero = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(
            embed_tokens(&tokens, &zero, &pos).unwrap().to_vec(),
            pos.to_vec()
        );

        let bad_pos = Tensor::<f64>::zeros(&[2, 2]);
        assert!(embed_tokens(&tokens, &w, &bad_pos).is_err());
    }
}
