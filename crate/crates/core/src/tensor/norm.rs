//! Batch and layer normalization.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Parameters and running statistics of one batch-norm layer, `C` entries each.
/// `gamma`/`beta` are trainable; the running statistics are not.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    /// γ = 1, β = 0, running mean 0, running variance 1, eps 1e-5, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batch normalization of a `[B, C, ...]` tensor, per channel over the
    /// batch and all trailing axes.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into the running statistics with
    /// weight `momentum`. Infer mode uses the running statistics.
    pub fn batch_norm(&self, bn: &BatchNormState<T>, mode: Mode) -> Result<Self> {
        if !(bn.eps > 0.0) {
            return Err(Error::Config(format!(
                "batch norm eps must be > 0, got {}",
                bn.eps
            )));
        }
        if !(0.0..=1.0).contains(&bn.momentum) {
            return Err(Error::Config(format!(
                "batch norm momentum must be in [0, 1], got {}",
                bn.momentum
            )));
        }
        if self.ndim() < 2 {
            return Err(Error::Shape(format!(
                "batch_norm needs [B, C, ...], got {:?}",
                self.shape()
            )));
        }
        let (batch, channels) = (self.shape()[0], self.shape()[1]);
        let spatial: usize = self.shape()[2..].iter().product();
        for p in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
            if p.shape() != [channels] {
                return Err(Error::dim("batch_norm", self.shape(), p.shape()));
            }
        }
        let count = batch * spatial;
        let eps = T::lit(bn.eps);
        let at = move |b: usize, c: usize| (b * channels + c) * spatial;

        let x = self.data();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let n = T::from_usize_lossy(count);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += x[at(b, c)..at(b, c) + spatial].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &x[at(b, c)..at(b, c) + spatial] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = sq / n;
                }
                let mom = T::lit(bn.momentum);
                let unbias = if count > 1 {
                    n / T::from_usize_lossy(count - 1)
                } else {
                    T::one()
                };
                {
                    let mut rm = bn.running_mean.data_mut();
                    let mut rv = bn.running_var.data_mut();
                    for c in 0..channels {
                        rm[c] = (T::one() - mom) * rm[c] + mom * mean[c];
                        rv[c] = (T::one() - mom) * rv[c] + mom * var[c] * unbias;
                    }
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Infer => {
                let mean = bn.running_mean.to_vec();
                let inv_std: Vec<T> = bn
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };

        let (gamma, beta) = (bn.gamma.to_vec(), bn.beta.to_vec());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let r = at(b, c)..at(b, c) + spatial;
                for ((h, o), &v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&x[r])
                {
                    *h = (v - mean[c]) * inv_std[c];
                    *o = gamma[c] * *h + beta[c];
                }
            }
        }
        drop(x);

        Ok(Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), bn.gamma.clone(), bn.beta.clone()],
            Box::new(move |_, _, g| {
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let r = at(b, c)..at(b, c) + spatial;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[c] += gv * h;
                            dbeta[c] += gv;
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let n = T::from_usize_lossy(count);
                for c in 0..channels {
                    let scale = gamma[c] * inv_std[c];
                    for b in 0..batch {
                        let r = at(b, c)..at(b, c) + spatial;
                        for ((d, &gv), &h) in
                            dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r])
                        {
                            *d = match mode {
                                // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                                Mode::Train => scale * (gv - dbeta[c] / n - h * dgamma[c] / n),
                                Mode::Infer => scale * gv,
                            };
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Layer normalization over the last axis with per-feature `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "layer norm eps must be > 0, got {eps}"
            )));
        }
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim("layer_norm", self.shape(), gamma.shape()));
        }
        let eps = T::lit(eps);
        let n = T::from_usize_lossy(d);
        let x = self.data();
        let (gv, bv) = (gamma.to_vec(), beta.to_vec());
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, _, g| {
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = inv_std[r] * (dh - sum_dh / n - hr[j] * sum_dh_h / n);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}
