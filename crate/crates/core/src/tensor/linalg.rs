use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            c_row.iter_mut().zip(b_row).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c.push(a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum());
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            c[i * n..(i + 1) * n]
                .iter_mut()
                .zip(b_row)
                .for_each(|(c, &b)| *c += av * b);
        }
    }
    c
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        };
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut data = vec![T::zero(); m * n];
        gemm_acc(&self.data(), &other.data(), &mut data, m, k, n);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |inputs, _, g| {
                let ga = inputs[0]
                    .requires_grad_flag()
                    .then(|| gemm_nt(g, &inputs[1].data(), m, n, k));
                let gb = inputs[1]
                    .requires_grad_flag()
                    .then(|| gemm_tn(&inputs[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }
}
