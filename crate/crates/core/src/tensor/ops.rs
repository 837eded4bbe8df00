//! Elementwise, reduction and layout ops.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Splits `shape` around `axis` into (outer, axis extent, inner) sizes.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    fn zip_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "add")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "sub")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "mul")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let ga = g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    /// Adds a length-`n` vector to every row of a tensor whose last extent is `n`.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let n = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [n] {
            return Err(Error::dim("add_row", self.shape(), bias.shape()));
        }
        let data = {
            let (x, b) = (self.data(), bias.data());
            let mut out = x.clone();
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(o, &b)| *o += b);
            }
            out
        };
        Ok(Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, _, g| {
                let mut gb = vec![T::zero(); n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize_lossy(self.numel());
        self.sum().scale(T::one() / n)
    }

    /// Same values, new extents.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let &[m, n] = self.shape() else {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape()
            )));
        };
        let data = transpose_buf(&self.data(), m, n);
        Ok(Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(transpose_buf(g, n, m))]),
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::Bounds(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let data = {
            let x = self.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
            out
        };
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut gx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(Error::Bounds(format!(
                "concat axis {axis} for rank {}",
                first.ndim()
            )));
        }
        for p in &parts[1..] {
            let compatible = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (g, &e) in guards.iter().zip(&extents) {
                    data.extend_from_slice(&g[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |_, _, g| {
                let mut grads: Vec<Vec<T>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &e) in grads.iter_mut().zip(&extents) {
                        gp.extend_from_slice(&g[offset..offset + e * inner]);
                        offset += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let lifted = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::concat(&lifted, 0)
    }

    /// Item `index` of the leading axis, with that axis removed.
    pub fn select(&self, index: usize) -> Result<Self> {
        if self.ndim() < 2 {
            return Err(Error::Shape(format!(
                "select needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        self.narrow(0, index, 1)?.reshape(&self.shape()[1..])
    }
}

pub(crate) fn transpose_buf<T: Copy>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(x[i * n + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let err = t(&[2], &[1.0, 2.0])
            .add(&t(&[3], &[1.0, 2.0, 3.0]))
            .unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let x = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        assert_eq!(a.to_vec(), vec![0., 3.]);
        assert_eq!(b.to_vec(), vec![1., 2., 4., 5.]);
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(x.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn concat_grads_route_back() {
        let a = t(&[1, 2], &[1., 2.]).requires_grad();
        let b = t(&[1, 1], &[3.]).requires_grad();
        let w = t(&[1, 3], &[10., 20., 30.]);
        let y = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        y.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![10., 20.]);
        assert_eq!(b.grad().unwrap(), vec![30.]);
    }

    #[test]
    fn transpose_roundtrip() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let xt = x.transpose().unwrap();
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(xt.transpose().unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn stack_and_select() {
        let a = t(&[2], &[1., 2.]);
        let b = t(&[2], &[3., 4.]);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.select(1).unwrap().to_vec(), vec![3., 4.]);
    }

    #[test]
    fn add_row_broadcasts() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]).requires_grad();
        let b = t(&[2], &[10., 20.]).requires_grad();
        let y = x.add_row(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11., 22., 13., 24.]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2., 2.]);
    }
}
