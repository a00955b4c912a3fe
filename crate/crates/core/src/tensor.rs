//! Dense row-major matrices and vectors plus the handful of kernels every
//! mixer is built from.
//!
//! Flattening is row-major everywhere: `flatten_row_major(x)[i * cols + j] == x[(i, j)]`,
//! and `reshape` is its exact inverse.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};

/// Default epsilon for [`rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

/// Dense 2-D array of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense 1-D array of `f64`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return dim_err(format!("row {i} has {} entries, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return dim_err(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// `self · v` with `v` as a column vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return dim_err(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok(Vector((0..self.rows).map(|i| dot(self.row(i), v)).collect()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return dim_err(format!("vector add of lengths {} and {}", self.len(), other.len()));
        }
        Ok(Vector(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect()))
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (self.iter().map(|v| v * v).sum::<f64>() / self.len() as f64).sqrt()
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return dim_err(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn flatten_row_major(x: &Matrix) -> Vector {
    Vector(x.data.clone())
}

pub fn reshape(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return dim_err(format!("cannot reshape length {} into {rows}x{cols}", v.len()));
    }
    Ok(Matrix { rows, cols, data: v.to_vec() })
}

/// Splits `v` into `parts` contiguous chunks of equal length.
pub fn split_even(v: &[f64], parts: usize) -> Result<Vec<Vector>> {
    if parts == 0 || v.len() % parts != 0 {
        return dim_err(format!("length {} is not divisible into {parts} parts", v.len()));
    }
    let chunk = v.len() / parts;
    Ok(v.chunks(chunk.max(1)).take(parts).map(|c| Vector(c.to_vec())).collect())
}

pub fn concat(parts: &[Vector]) -> Vector {
    Vector(parts.iter().flat_map(|p| p.iter().copied()).collect())
}

/// Standard Kronecker product: block `(i, j)` of the result is `a[(i, j)] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (br, bc) = b.shape();
    Matrix::from_fn(a.rows * br, a.cols * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

/// Kronecker product with a distinct right factor per block column:
/// block `(i, j)` of the result is `g[(i, j)] · blocks[j]`.
pub fn generalized_kron(g: &Matrix, blocks: &[Matrix]) -> Result<Matrix> {
    if !g.is_square() || g.rows != blocks.len() {
        return dim_err(format!(
            "global matrix {}x{} needs {} square blocks, got {}",
            g.rows,
            g.cols,
            g.rows,
            blocks.len()
        ));
    }
    let side = blocks.first().map_or(0, |b| b.rows);
    if let Some((j, b)) = blocks.iter().enumerate().find(|(_, b)| b.shape() != (side, side)) {
        return dim_err(format!("block {j} is {}x{}, expected {side}x{side}", b.rows, b.cols));
    }
    let n = g.rows * side;
    Ok(Matrix::from_fn(n, n, |r, c| {
        let (i, j) = (r / side, c / side);
        g[(i, j)] * blocks[j][(r % side, c % side)]
    }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return dim_err("softmax of an empty matrix");
    }
    let mut out = x.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `v / sqrt(mean(v²) + eps)`, no learned gain. An all-zero input maps to zero.
pub fn rms_norm(v: &[f64], eps: f64) -> Result<Vector> {
    if v.is_empty() {
        return dim_err("rms_norm of an empty vector");
    }
    if eps <= 0.0 {
        return Err(Error::Precondition(format!("rms_norm eps must be positive, got {eps}")));
    }
    let inv = rms_scale(v, eps);
    Ok(v.iter().map(|x| x * inv).collect())
}

pub(crate) fn rms_scale(v: &[f64], eps: f64) -> f64 {
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    1.0 / (ms + eps).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return dim_err("swish of an empty vector");
    }
    Ok(v.iter().map(|&x| swish_scalar(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);

        let l = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let r = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        assert_eq!(matmul(&l, &r).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = Matrix::random_normal(4, 4, 1.0, &mut rng);
            let b = Matrix::random_normal(4, 4, 1.0, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            let slow = triple_loop(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("by 2x3"), "{msg}");
    }

    #[test]
    fn flatten_worked_example_layout() {
        let x = Matrix::from_fn(2, 6, |i, j| (i * 6 + j + 1) as f64);
        let flat = flatten_row_major(&x);
        assert_eq!(flat.as_slice(), &(1..=12).map(|v| v as f64).collect::<Vec<_>>()[..]);
        assert_eq!(reshape(&flat, 2, 6).unwrap(), x);
        assert_eq!(flatten_row_major(&Matrix::filled(1, 1, 3.5)).as_slice(), &[3.5]);
    }

    #[test]
    fn reshape_length_mismatch() {
        assert!(matches!(reshape(&[1.0, 2.0, 3.0], 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_into_blocks() {
        let v: Vec<f64> = (1..=12).map(|v| v as f64).collect();
        let parts = split_even(&v, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0].as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(parts[3].as_slice(), &[10.0, 11.0, 12.0]);
        assert_eq!(split_even(&v, 1).unwrap(), vec![Vector::new(v.clone())]);
        assert!(split_even(&v, 5).is_err());
        assert!(split_even(&v, 0).is_err());
    }

    #[test]
    fn kron_identity_and_definition() {
        assert_eq!(kron(&Matrix::identity(2), &Matrix::identity(3)), Matrix::identity(6));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::random_normal(2, 2, 1.0, &mut rng);
        let b = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let k = kron(&a, &b);
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    for q in 0..3 {
                        assert_eq!(k[(i * 3 + p, j * 3 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
    }

    #[test]
    fn generalized_kron_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let z = Matrix::random_normal(2, 2, 1.0, &mut rng);
        assert_eq!(generalized_kron(&g, &[z.clone(), z.clone(), z.clone()]).unwrap(), kron(&g, &z));

        let blocks: Vec<Matrix> = (0..3).map(|_| Matrix::random_normal(2, 2, 1.0, &mut rng)).collect();
        let m = generalized_kron(&g, &blocks).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m[(r, c)], g[(r / 2, c / 2)] * blocks[c / 2][(r % 2, c % 2)]);
            }
        }

        let g2 = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let w1 = Matrix::identity(2);
        let w2 = Matrix::filled(2, 2, 1.0);
        let m = generalized_kron(&g2, &[w1, w2]).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0, 2.0, 2.0]);
        assert_eq!(m.row(3), &[0.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn generalized_kron_rejects_ragged_blocks() {
        let g = Matrix::identity(2);
        assert!(generalized_kron(&g, &[Matrix::identity(2), Matrix::identity(3)]).is_err());
        assert!(generalized_kron(&g, &[Matrix::identity(2)]).is_err());
    }

    #[test]
    fn softmax_norm_swish() {
        let s = softmax_rows(&Matrix::filled(2, 4, 3.0)).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(softmax_rows(&Matrix::zeros(0, 0)).is_err());

        let unit = [1.0, -1.0, 1.0, -1.0];
        let n = rms_norm(&unit, RMS_EPS).unwrap();
        for (a, b) in n.iter().zip(unit) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(rms_norm(&[0.0; 3], RMS_EPS).unwrap().as_slice(), &[0.0; 3]);
        assert!(rms_norm(&[], RMS_EPS).is_err());

        for x in [-2.0f64, 0.0, 3.0] {
            let oracle = x / (1.0 + (-x).exp());
            assert!((swish_scalar(x) - oracle).abs() < 1e-15);
        }
        assert_eq!(swish_scalar(0.0), 0.0);
        assert!((swish_scalar(40.0) - 40.0).abs() < 1e-12);
        assert!(swish(&[]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_reshape_split_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::random_normal(rows, cols, 1.0, &mut rng);
            let flat = flatten_row_major(&x);
            prop_assert_eq!(&reshape(&flat, rows, cols).unwrap(), &x);
            prop_assert_eq!(concat(&split_even(&flat, rows).unwrap()), flat);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::random_normal(3, 5, 3.0, &mut rng);
            let s = softmax_rows(&x).unwrap();
            for i in 0..3 {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn kron_vec_identity(seed in any::<u64>()) {
            // (A ⊗ B) flatten(X) == flatten(A X Bᵀ) for row-major flatten
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_normal(3, 3, 1.0, &mut rng);
            let b = Matrix::random_normal(2, 2, 1.0, &mut rng);
            let x = Matrix::random_normal(3, 2, 1.0, &mut rng);
            let lhs = kron(&a, &b).matvec(&flatten_row_major(&x)).unwrap();
            let rhs = matmul(&matmul(&a, &x).unwrap(), &b.transpose()).unwrap();
            for (p, q) in lhs.iter().zip(rhs.data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
