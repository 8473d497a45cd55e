//! Row-major dense matrix with the handful of kernels the networks need.
//! Inner loops run over contiguous rows so the compiler can vectorize them.

use super::scalar::Scalar;
use rand::Rng;

#[derive(Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Builds from a row-major flat buffer; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in matrix literal");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Uniform init on [-bound, bound].
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::from_f64(rng.gen_range(-bound..=bound)));
        }
        Matrix { rows, cols, data }
    }

    /// Glorot-uniform init, the default for weight matrices.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, bound, rng)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, &v) in row.iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    /// self * rhs.
    pub fn matmul(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(
            &self.data, self.rows, self.cols, &rhs.data, rhs.cols, &mut out.data,
        );
        out
    }

    /// self^T * rhs, without materializing the transpose. Register-blocked
    /// over 2 output rows x 32 output columns, one pass over the shared rows
    /// per block; leftovers fall back to row-wise accumulation.
    pub fn matmul_tn(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.rows, rhs.rows,
            "matmul_tn shape mismatch: ({}x{})^T * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        const TILE: usize = 32;
        let (rows, a_cols, b_cols) = (self.rows, self.cols, rhs.cols);
        let a = &self.data;
        let b = &rhs.data;
        let mut out = Matrix::zeros(a_cols, b_cols);
        let mut j = 0;
        while j + TILE <= b_cols {
            let mut k = 0;
            while k + 2 <= a_cols {
                let mut acc0 = [S::zero(); TILE];
                let mut acc1 = [S::zero(); TILE];
                for i in 0..rows {
                    let bt: &[S; TILE] = b[i * b_cols + j..i * b_cols + j + TILE]
                        .try_into()
                        .unwrap();
                    let (a0, a1) = (a[i * a_cols + k], a[i * a_cols + k + 1]);
                    for t in 0..TILE {
                        acc0[t] += a0 * bt[t];
                        acc1[t] += a1 * bt[t];
                    }
                }
                out.data[k * b_cols + j..k * b_cols + j + TILE].copy_from_slice(&acc0);
                out.data[(k + 1) * b_cols + j..(k + 1) * b_cols + j + TILE]
                    .copy_from_slice(&acc1);
                k += 2;
            }
            if k < a_cols {
                let mut acc = [S::zero(); TILE];
                for i in 0..rows {
                    let bt: &[S; TILE] = b[i * b_cols + j..i * b_cols + j + TILE]
                        .try_into()
                        .unwrap();
                    let a0 = a[i * a_cols + k];
                    for t in 0..TILE {
                        acc[t] += a0 * bt[t];
                    }
                }
                out.data[k * b_cols + j..k * b_cols + j + TILE].copy_from_slice(&acc);
            }
            j += TILE;
        }
        if j < b_cols {
            let rest = b_cols - j;
            for i in 0..rows {
                let arow = self.row(i);
                let brow = &b[i * b_cols + j..i * b_cols + j + rest];
                for (k, &av) in arow.iter().enumerate() {
                    let orow = &mut out.data[k * b_cols + j..k * b_cols + j + rest];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        out
    }

    /// self * rhs^T.
    pub fn matmul_nt(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_nt shape mismatch: {}x{} * ({}x{})^T",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let rt = rhs.transpose();
        self.matmul(&rt)
    }

    pub fn add_assign(&mut self, other: &Matrix<S>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &Matrix<S>) {
        assert_eq!(self.shape(), other.shape(), "sub_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// self += s * other.
    pub fn add_scaled(&mut self, other: &Matrix<S>, s: S) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Adds `bias` (a 1 x cols row vector) to every row.
    pub fn add_bias_row(&mut self, bias: &Matrix<S>) {
        assert_eq!(bias.rows, 1, "bias must be a row vector");
        assert_eq!(bias.cols, self.cols, "bias width mismatch");
        for i in 0..self.rows {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (a, &b) in row.iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
    }

    /// Column sums as a 1 x cols row vector.
    pub fn col_sums(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            let row = self.row(i);
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn squared_sum(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Copies `src` into rows [at, at + src.rows).
    pub fn set_rows(&mut self, at: usize, src: &Matrix<S>) {
        assert_eq!(src.cols, self.cols, "set_rows width mismatch");
        assert!(at + src.rows <= self.rows, "set_rows out of bounds");
        self.data[at * self.cols..(at + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    /// Copies rows [at, at + n) out into a new matrix.
    pub fn slice_rows(&self, at: usize, n: usize) -> Matrix<S> {
        assert!(at + n <= self.rows, "slice_rows out of bounds");
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[at * self.cols..(at + n) * self.cols].to_vec(),
        }
    }

    /// Copies columns [at, at + n) out into a new matrix.
    pub fn slice_cols(&self, at: usize, n: usize) -> Matrix<S> {
        assert!(at + n <= self.cols, "slice_cols out of bounds");
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let src = &self.row(i)[at..at + n];
            out.row_mut(i).copy_from_slice(src);
        }
        out
    }

    /// Writes `src` into columns [at, at + src.cols).
    pub fn set_cols(&mut self, at: usize, src: &Matrix<S>) {
        assert_eq!(src.rows, self.rows, "set_cols row count mismatch");
        assert!(at + src.cols <= self.cols, "set_cols out of bounds");
        for i in 0..self.rows {
            let dst_start = i * self.cols + at;
            self.data[dst_start..dst_start + src.cols].copy_from_slice(src.row(i));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| Scalar::to_f32(v)).collect()
    }

    pub fn from_f32_slice(rows: usize, cols: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), rows * cols, "f32 buffer length mismatch");
        Matrix {
            rows,
            cols,
            data: data.iter().map(|&v| S::from_f32(v)).collect(),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Matrix<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// C += A * B over raw row-major buffers. Column tiles of B are accumulated
/// in fixed-size register blocks, two rows of A at a time; leftover columns
/// fall back to a plain (i, k, j) loop over contiguous rows of B and C.
pub fn matmul_into<S: Scalar>(
    a: &[S],
    a_rows: usize,
    a_cols: usize,
    b: &[S],
    b_cols: usize,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), a_rows * a_cols);
    debug_assert_eq!(b.len(), a_cols * b_cols);
    debug_assert_eq!(c.len(), a_rows * b_cols);
    const TILE: usize = 32;
    let mut j = 0;
    while j + TILE <= b_cols {
        let mut i = 0;
        while i + 2 <= a_rows {
            let r0 = &a[i * a_cols..(i + 1) * a_cols];
            let r1 = &a[(i + 1) * a_cols..(i + 2) * a_cols];
            let mut acc0 = [S::zero(); TILE];
            let mut acc1 = [S::zero(); TILE];
            for k in 0..a_cols {
                let bt: &[S; TILE] = b[k * b_cols + j..k * b_cols + j + TILE]
                    .try_into()
                    .unwrap();
                let (a0, a1) = (r0[k], r1[k]);
                for t in 0..TILE {
                    acc0[t] += a0 * bt[t];
                    acc1[t] += a1 * bt[t];
                }
            }
            for t in 0..TILE {
                c[i * b_cols + j + t] += acc0[t];
            }
            for t in 0..TILE {
                c[(i + 1) * b_cols + j + t] += acc1[t];
            }
            i += 2;
        }
        if i < a_rows {
            let r0 = &a[i * a_cols..(i + 1) * a_cols];
            let mut acc = [S::zero(); TILE];
            for k in 0..a_cols {
                let bt: &[S; TILE] = b[k * b_cols + j..k * b_cols + j + TILE]
                    .try_into()
                    .unwrap();
                let a0 = r0[k];
                for t in 0..TILE {
                    acc[t] += a0 * bt[t];
                }
            }
            for t in 0..TILE {
                c[i * b_cols + j + t] += acc[t];
            }
        }
        j += TILE;
    }
    if j < b_cols {
        let rest = b_cols - j;
        for i in 0..a_rows {
            let arow = &a[i * a_cols..(i + 1) * a_cols];
            let crow = &mut c[i * b_cols + j..i * b_cols + j + rest];
            for (k, &av) in arow.iter().enumerate() {
                let brow = &b[k * b_cols + j..k * b_cols + j + rest];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}
