//! Dense row-major `f64` matrices and the handful of kernels the model needs.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Diagonal matrix with the given entries.
    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero, and a 0-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply ({}x{})ᵀ by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            axpy(s, r, &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(s, &other.data, &mut self.data);
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Dimension(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        for i in 0..self.rows {
            for (x, &b) in self.row_mut(i).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            axpy(1.0, r, &mut out);
        }
        out
    }

    /// Copy with rows reordered so that row `i` of the result is row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(order.len(), self.cols);
        for (i, &src) in order.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (o, &j) in out.row_mut(i).iter_mut().zip(cols) {
                *o = src[j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Sum of squared entries.
pub fn frobenius_sq(m: &Matrix) -> f64 {
    dot(m.as_slice(), m.as_slice())
}

/// Euclidean norm of every row.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(norm2).collect()
}

/// Orthonormalizes `vectors` by modified Gram–Schmidt with one
/// re-orthogonalization pass. Fails when the input is rank deficient.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (idx, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "vector {idx} has length {}, expected {dim}",
                v.len()
            )));
        }
        check_finite(v)?;
        let original = norm2(v);
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
            }
        }
        let n = norm2(&w);
        if original == 0.0 || n <= 1e-10 * original {
            return Err(Error::InvalidInput(format!(
                "rank-deficient basis: vector {idx} is (numerically) dependent on the previous ones"
            )));
        }
        w.iter_mut().for_each(|x| *x /= n);
        basis.push(w);
    }
    Ok(basis)
}

/// Result of [`pca_top2`].
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// n×2 projections of the centered points.
    pub coords: Matrix,
    /// Sample-covariance eigenvalues for the two components, non-increasing.
    pub explained_variance: [f64; 2],
    /// The two unit principal directions (zero vectors when the variance is zero).
    pub components: [Vec<f64>; 2],
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 10_000;

/// Top-two principal components by power iteration with deflation.
///
/// Iteration starts from the first basis vector; if the iterate collapses it is
/// re-seeded with the next basis vector, then with the all-ones direction.
pub fn pca_top2(points: &Matrix) -> Result<Pca2> {
    let (n, dim) = points.shape();
    if n < 2 || dim == 0 {
        return Err(Error::InvalidInput(format!(
            "pca needs at least 2 points of dimension >= 1, got {n}x{dim}"
        )));
    }
    let mean: Vec<f64> = points
        .column_sums()
        .into_iter()
        .map(|s| s / n as f64)
        .collect();
    let mut centered = points.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let denom = (n - 1) as f64;

    // Covariance-vector products, explicit when the covariance is small,
    // implicit through the data otherwise.
    let explicit_cov = if dim <= n {
        Some(centered.t_matmul(&centered)?.scale(1.0 / denom))
    } else {
        None
    };
    let apply_cov = |v: &[f64]| -> Vec<f64> {
        match &explicit_cov {
            Some(c) => c.mul_vec(v).expect("square covariance"),
            None => {
                let xv = centered.mul_vec(v).expect("matching dim");
                let mut out = centered.t_mul_vec(&xv).expect("matching rows");
                out.iter_mut().for_each(|x| *x /= denom);
                out
            }
        }
    };

    let scale = centered
        .as_slice()
        .iter()
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    let floor = 1e-14 * scale * scale;

    let (v1, l1) = power_iterate(dim, &apply_cov, &[], floor);
    let deflated: Vec<Vec<f64>> = if l1 > 0.0 { vec![v1.clone()] } else { vec![] };
    let (v2, l2) = if l1 > 0.0 {
        power_iterate(dim, &apply_cov, &deflated, floor)
    } else {
        (vec![0.0; dim], 0.0)
    };

    let mut coords = Matrix::zeros(n, 2);
    for i in 0..n {
        let r = centered.row(i);
        coords[(i, 0)] = dot(r, &v1);
        coords[(i, 1)] = dot(r, &v2);
    }
    Ok(Pca2 {
        coords,
        explained_variance: [l1, l2.min(l1)],
        components: [v1, v2],
    })
}

fn power_iterate(
    dim: usize,
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    orthogonal_to: &[Vec<f64>],
    floor: f64,
) -> (Vec<f64>, f64) {
    let project_out = |w: &mut Vec<f64>| {
        for q in orthogonal_to {
            let c = dot(q, w);
            axpy(-c, q, w);
        }
    };
    let seeds = (0..dim)
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            e
        })
        .chain(std::iter::once(vec![1.0; dim]));

    for seed in seeds {
        let mut v = seed;
        project_out(&mut v);
        let n0 = norm2(&v);
        if n0 < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n0);

        let mut collapsed = false;
        for _ in 0..PCA_MAX_ITER {
            let mut w = apply(&v);
            project_out(&mut w);
            let nw = norm2(&w);
            if nw <= floor.max(f64::MIN_POSITIVE) {
                collapsed = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let change = v
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            v = w;
            if change < PCA_TOL {
                break;
            }
        }
        if collapsed {
            continue;
        }
        // Rayleigh quotient is the better eigenvalue estimate.
        let mut av = apply(&v);
        project_out(&mut av);
        let lambda = dot(&v, &av).max(0.0);
        orient(&mut v);
        return (v, lambda);
    }
    (vec![0.0; dim], 0.0)
}

/// Fixes the sign so the largest-magnitude entry is positive.
fn orient(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &swap).unwrap(), m(&[&[2.0, 1.0], &[4.0, 3.0]]));
        let bad = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&bad, &Matrix::zeros(2, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 6, 3);
        let tn = a.t_matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&b).unwrap()) < 1e-14);
        let nt = a.matmul_t(&c).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn frobenius_and_row_norm_examples() {
        assert_eq!(frobenius_sq(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_sq(&Matrix::identity(2)), 2.0);
        let m34 = m(&[&[3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(frobenius_sq(&m34), 25.0);
        assert_eq!(row_norms(&m34), vec![5.0, 0.0]);
        assert_eq!(row_norms(&Matrix::identity(3)), vec![1.0; 3]);
        assert_eq!(row_norms(&Matrix::zeros(2, 4)), vec![0.0; 2]);
    }

    #[test]
    fn permutation_matrices_are_exactly_orthogonal() {
        let perm = [2usize, 0, 3, 1];
        let mut r = Matrix::zeros(4, 4);
        for (i, &j) in perm.iter().enumerate() {
            r[(i, j)] = 1.0;
        }
        let rrt = r.matmul_t(&r).unwrap();
        assert_eq!(frobenius_sq(&rrt.sub(&Matrix::identity(4)).unwrap()), 0.0);
    }

    #[test]
    fn pca_collinear_points() {
        let pts = m(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[-3.0, -3.0]]);
        let p = pca_top2(&pts).unwrap();
        assert!(p.explained_variance[1].abs() < 1e-9);
        assert!(p.explained_variance[0] > 0.0);
    }

    #[test]
    fn pca_two_symmetric_points() {
        let pts = m(&[&[3.0, 4.0], &[-3.0, -4.0]]);
        let p = pca_top2(&pts).unwrap();
        assert!((p.coords[(0, 0)].abs() - 5.0).abs() < 1e-12);
        assert!((p.coords[(0, 0)] + p.coords[(1, 0)]).abs() < 1e-12);
        assert!(p.coords[(0, 1)].abs() < 1e-12 && p.coords[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn pca_identical_points_is_zero() {
        let pts = Matrix::filled(5, 3, 1.5);
        let p = pca_top2(&pts).unwrap();
        assert_eq!(p.explained_variance, [0.0, 0.0]);
        assert!(p.coords.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pca_axis_aligned_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sds = [3.0, 1.0, 0.1];
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                sds.iter()
                    .map(|&s| Normal::new(0.0, s).unwrap().sample(&mut rng))
                    .collect()
            })
            .collect();
        let pts = Matrix::from_rows(&rows).unwrap();
        let p = pca_top2(&pts).unwrap();
        let angle = p.components[0][0].abs().min(1.0).acos();
        assert!(angle < 0.1, "angle {angle}");
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn orthonormalize_detects_dependence() {
        let basis = orthonormalize(&[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(dot(&basis[0], &basis[1]).abs() < 1e-15);
        assert!((norm2(&basis[1]) - 1.0).abs() < 1e-15);
        assert!(orthonormalize(&[vec![1.0, 2.0], vec![2.0, 4.0]]).is_err());
        assert!(orthonormalize(&[vec![0.0, 0.0]]).is_err());
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }
}
