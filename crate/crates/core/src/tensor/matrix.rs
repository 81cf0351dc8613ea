//! Row-major dense matrix over f64. Column vectors are n-by-1 matrices.
//!
//! Every product routine fixes its summation order (unrolled four-way
//! accumulators for dot products, ascending k otherwise), so repeated runs
//! over identical inputs are bit-identical.

/// Dense row-major matrix. Shape invariants are enforced by assertions:
/// mismatched dimensions are programmer errors, not runtime conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "from_vec: wrong element count");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector (n-by-1).
    pub fn column(data: Vec<f64>) -> Self {
        Matrix {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// 1-by-1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert!(self.same_shape(other), "add_assign: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Matrix, c: f64) {
        assert!(self.same_shape(other), "add_scaled_assign: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self * x` for a column vector x.
    pub fn matvec(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.cols, x.rows, "matvec: inner dimension mismatch");
        assert_eq!(x.cols, 1, "matvec: x must be a column vector");
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            out.push(dot(self.row(r), &x.data));
        }
        Matrix::column(out)
    }

    /// `self^T * g` for a column vector g, without materializing the
    /// transpose.
    pub fn transpose_matvec(&self, g: &Matrix) -> Matrix {
        assert_eq!(self.rows, g.rows, "transpose_matvec: dimension mismatch");
        assert_eq!(g.cols, 1, "transpose_matvec: g must be a column vector");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let gr = g.data[r];
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
        Matrix::column(out)
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul: inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        out
    }

    /// `self * b^T`.
    pub fn matmul_nt(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.cols, "matmul_nt: dimension mismatch");
        Matrix::from_fn(self.rows, b.rows, |i, j| dot(self.row(i), b.row(j)))
    }

    /// `self^T * b`.
    pub fn matmul_tn(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.rows, b.rows, "matmul_tn: dimension mismatch");
        let mut out = Matrix::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (i, &aki) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                    *o += aki * bkj;
                }
            }
        }
        out
    }

    /// `self += g * x^T` for column vectors g, x (gradient of a linear map).
    pub fn add_outer_assign(&mut self, g: &Matrix, x: &Matrix) {
        assert_eq!(g.cols, 1, "add_outer_assign: g must be a column vector");
        assert_eq!(x.cols, 1, "add_outer_assign: x must be a column vector");
        assert_eq!(self.rows, g.rows, "add_outer_assign: row mismatch");
        assert_eq!(self.cols, x.rows, "add_outer_assign: col mismatch");
        for i in 0..self.rows {
            let gi = g.data[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &xj) in row.iter_mut().zip(&x.data) {
                *o += gi * xj;
            }
        }
    }
}

/// Four-way unrolled dot product with a fixed summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_matvec_agree_with_definition() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = Matrix::column(vec![1.0, 0.5, -1.0]);
        let y = w.matvec(&x);
        assert_eq!(y.as_slice(), &[-1.0, 0.5]);

        let g = Matrix::column(vec![2.0, -1.0]);
        let back = w.transpose_matvec(&g);
        assert_eq!(back.as_slice(), &[-2.0, -1.0, 0.0]);
    }

    #[test]
    fn matmul_variants_are_consistent() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[58.0, 64.0, 139.0, 154.0]);

        // a * b == a * (b^T)^T
        let bt = Matrix::from_fn(2, 3, |i, j| b.get(j, i));
        assert_eq!(a.matmul_nt(&bt), ab);

        // a^T * a via matmul_tn matches the explicit transpose product
        let at = Matrix::from_fn(3, 2, |i, j| a.get(j, i));
        assert_eq!(a.matmul_tn(&a), at.matmul(&a));
    }

    #[test]
    fn outer_accumulation() {
        let mut m = Matrix::zeros(2, 3);
        let g = Matrix::column(vec![1.0, -2.0]);
        let x = Matrix::column(vec![3.0, 0.0, 1.0]);
        m.add_outer_assign(&g, &x);
        m.add_outer_assign(&g, &x);
        assert_eq!(m.as_slice(), &[6.0, 0.0, 2.0, -12.0, 0.0, -4.0]);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 21.0);
    }
}
