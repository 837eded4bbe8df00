use super::ops::split_axis;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis`, computed as `exp(x - max) / Σ exp(x - max)`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::Bounds(format!(
                "softmax axis {axis} for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |a: usize| base + a * inner;
                let max = (0..len)
                    .map(|a| out[idx(a)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (out[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |_, y, g| {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len)
                            .map(|a| y[base + a * inner] * g[base + a * inner])
                            .sum();
                        for a in 0..len {
                            let k = base + a * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&x| x.max(T::zero())).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, y, g| {
                let gx = y
                    .iter()
                    .zip(g)
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Self {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let x = inputs[0].data();
                let three = T::lit(3.0);
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let th = (c * (x + a * x * x * x)).tanh();
                        let sech2 = T::one() - th * th;
                        let d = half * (T::one() + th)
                            + half * x * sech2 * c * (T::one() + three * a * x * x);
                        g * d
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn ln2_logit_gives_thirds() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 2f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn middle_axis_normalizes_columns() {
        // [2, 3, 2]: sums over axis 1 must be 1 for each (outer, inner) pair.
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let y = Tensor::<f64>::from_f64(&[2, 3, 2], &v)
            .unwrap()
            .softmax(1)
            .unwrap()
            .to_vec();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|a| y[o * 6 + a * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::<f32>::from_f64(&[3], &[1000.0, 1000.0, -1000.0]).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relu_clamps() {
        let x = Tensor::<f64>::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let y = x.gelu().to_vec();
        assert_eq!(y[0], 0.0);
        // tanh-approximation values
        assert!((y[1] - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((y[2] + 0.158_808_009_391_723_2).abs() < 1e-12);
    }
}
