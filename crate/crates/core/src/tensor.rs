//! Dense row-major tensors.
//!
//! Training and gradient checks run in 64-bit floats throughout; checkpoints
//! quantize to 32-bit on disk (see `checkpoint`).

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count for a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Column count for a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// out += a * b, where a is (n, k) and b is (k, m).
pub fn matmul_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), &[n, m]);
    let bd = b.data();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a * b^T, where a is (n, k) and b is (m, k).
pub fn matmul_nt_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let n = a.rows();
    let m = b.rows();
    debug_assert_eq!(a.cols(), b.cols());
    debug_assert_eq!(out.shape(), &[n, m]);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            orow[j] += acc;
        }
    }
}

/// out += a^T * b, where a is (k, n) and b is (k, m).
pub fn matmul_tn_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (k, n) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), &[n, m]);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut c = Tensor::zeros(&[2, 2]);
        matmul_acc(&mut c, &a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);

        // a * b == a * (b^T)^T via matmul_nt with b transposed by hand
        let bt = t(&[2, 3], &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let mut c2 = Tensor::zeros(&[2, 2]);
        matmul_nt_acc(&mut c2, &a, &bt);
        assert_eq!(c2.data(), c.data());

        // a * b == (a^T)^T * b via matmul_tn with a transposed by hand
        let at = t(&[3, 2], &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut c3 = Tensor::zeros(&[2, 2]);
        matmul_tn_acc(&mut c3, &at, &b);
        assert_eq!(c3.data(), c.data());
    }
}
