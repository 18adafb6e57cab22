use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Row-major 2-D array of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::Shape { op: "from_vec", a: [rows, cols], b: [data.len(), 1] });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NeuralError> {
        if self.cols != other.rows {
            return Err(NeuralError::Shape { op: "matmul", a: self.shape(), b: other.shape() });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(false, false, self, other, &mut out, 0.0);
        Ok(out)
    }

    /// Rows stacked vertically; all inputs share a column count.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor, NeuralError> {
        let cols = parts.first().map(|t| t.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(NeuralError::Shape { op: "vstack", a: [rows, cols], b: p.shape() });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor { rows, cols, data })
    }
}

/// `c = op(a) op(b) + beta c`, where op transposes when the flag is set.
pub(crate) fn gemm(ta: bool, tb: bool, a: &Tensor, b: &Tensor, c: &mut Tensor, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(c.shape(), [m, n]);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of the stated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data, vec![58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transposed_gemm() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut c = Tensor::zeros(3, 3);
        gemm(true, false, &a, &a, &mut c, 0.0);
        assert_eq!(c.data, vec![17., 22., 27., 22., 29., 36., 27., 36., 45.]);
        let mut d = Tensor::zeros(2, 2);
        gemm(false, true, &a, &a, &mut d, 0.0);
        assert_eq!(d.data, vec![14., 32., 32., 77.]);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
