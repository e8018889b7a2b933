//! Dense matrices and third-order tensors with the multilinear primitives
//! used throughout the decoupling pipeline.
//!
//! Everything is stored row-major in `f64`. Mode-n unfoldings follow the
//! Kolda–Bader fiber ordering: the columns of the mode-n unfolding are the
//! mode-n fibers, enumerated with earlier tensor indices varying fastest.
//! At the sizes this crate targets (thousands of operating points, a handful
//! of inputs/outputs) dense storage is both simpler and faster than any
//! sparse alternative.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from nested row vectors. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if cols == 0 {
            return Err(Error::InvalidArgument("matrix needs at least one column".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch("ragged rows in matrix literal".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// y = A·x for a vector x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimensions");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// AᵀA.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..self.cols {
                    g[(a, b)] += ra * r[b];
                }
            }
        }
        g
    }

    /// Frobenius norm. The squared entries are accumulated in a canonical
    /// (sorted) order so that any rearrangement of the same entries — e.g.
    /// an unfolding of a tensor — yields the bit-identical value.
    pub fn frobenius(&self) -> f64 {
        canonical_norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().cloned())
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Sum of squares accumulated in ascending order of magnitude; permutation
/// invariant by construction.
fn canonical_norm(data: &[f64]) -> f64 {
    let mut sq: Vec<f64> = data.iter().map(|x| x * x).collect();
    sq.sort_unstable_by(|a, b| a.total_cmp(b));
    sq.iter().sum::<f64>().sqrt()
}

/// Dense third-order tensor of stacked Jacobians, `n_out x n_in x n_points`.
///
/// Entry `(o, l, k)` is ∂f_o/∂p_l at operating point k. Storage is slice
/// major: point k's `n_out x n_in` slice is contiguous and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n_out: usize,
    n_in: usize,
    n_points: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n_out: usize, n_in: usize, n_points: usize) -> Self {
        assert!(n_out >= 1 && n_in >= 1 && n_points >= 1);
        Tensor3 { n_out, n_in, n_points, data: vec![0.0; n_out * n_in * n_points] }
    }

    pub fn from_fn(
        n_out: usize,
        n_in: usize,
        n_points: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor3::zeros(n_out, n_in, n_points);
        for k in 0..n_points {
            for o in 0..n_out {
                for l in 0..n_in {
                    t[(o, l, k)] = f(o, l, k);
                }
            }
        }
        t
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes matrix `slice` as the Jacobian at point k.
    pub fn set_slice(&mut self, k: usize, slice: &Matrix) {
        assert_eq!((slice.rows(), slice.cols()), (self.n_out, self.n_in));
        let base = k * self.n_out * self.n_in;
        self.data[base..base + self.n_out * self.n_in].copy_from_slice(slice.data());
    }

    pub fn slice(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.n_out, self.n_in, |o, l| self[(o, l, k)])
    }

    /// Mode-n unfolding (Kolda convention).
    ///
    /// mode 1: `n_out x (n_in * n_points)`, column index `l + k*n_in`;
    /// mode 2: `n_in x (n_out * n_points)`, column index `o + k*n_out`;
    /// mode 3: `n_points x (n_out * n_in)`, column index `o + l*n_out`.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let (n, m, np) = (self.n_out, self.n_in, self.n_points);
        match mode {
            1 => Ok(Matrix::from_fn(n, m * np, |o, c| self[(o, c % m, c / m)])),
            2 => Ok(Matrix::from_fn(m, n * np, |l, c| self[(c % n, l, c / n)])),
            3 => Ok(Matrix::from_fn(np, n * m, |k, c| self[(c % n, c / n, k)])),
            _ => Err(Error::InvalidArgument(format!("unfolding mode must be 1, 2 or 3, got {mode}"))),
        }
    }

    /// Inverse of [`Tensor3::unfold`] for the given mode and target shape.
    pub fn fold(mat: &Matrix, mode: usize, n_out: usize, n_in: usize, n_points: usize) -> Result<Tensor3> {
        let expect = match mode {
            1 => (n_out, n_in * n_points),
            2 => (n_in, n_out * n_points),
            3 => (n_points, n_out * n_in),
            _ => return Err(Error::InvalidArgument(format!("unfolding mode must be 1, 2 or 3, got {mode}"))),
        };
        if (mat.rows(), mat.cols()) != expect {
            return Err(Error::DimensionMismatch(format!(
                "mode-{mode} unfolding of a {n_out}x{n_in}x{n_points} tensor is {}x{}, got {}x{}",
                expect.0,
                expect.1,
                mat.rows(),
                mat.cols()
            )));
        }
        let t = match mode {
            1 => Tensor3::from_fn(n_out, n_in, n_points, |o, l, k| mat[(o, l + k * n_in)]),
            2 => Tensor3::from_fn(n_out, n_in, n_points, |o, l, k| mat[(l, o + k * n_out)]),
            _ => Tensor3::from_fn(n_out, n_in, n_points, |o, l, k| mat[(k, o + l * n_out)]),
        };
        Ok(t)
    }

    pub fn sub(&self, other: &Tensor3) -> Tensor3 {
        assert_eq!(
            (self.n_out, self.n_in, self.n_points),
            (other.n_out, other.n_in, other.n_points)
        );
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor3 { n_out: self.n_out, n_in: self.n_in, n_points: self.n_points, data }
    }

    /// Frobenius norm; same canonical accumulation as [`Matrix::frobenius`],
    /// so it agrees bit-exactly with the norm of any unfolding.
    pub fn frobenius(&self) -> f64 {
        canonical_norm(&self.data)
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    #[inline]
    fn index(&self, (o, l, k): (usize, usize, usize)) -> &f64 {
        &self.data[(k * self.n_out + o) * self.n_in + l]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor3 {
    #[inline]
    fn index_mut(&mut self, (o, l, k): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(k * self.n_out + o) * self.n_in + l]
    }
}

/// Khatri-Rao (column-wise Kronecker) product. Column j of the result is
/// `a[:,j] ⊗ b[:,j]`, so the result has `a.rows * b.rows` rows.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols());
    for j in 0..a.cols() {
        for ia in 0..a.rows() {
            let av = a[(ia, j)];
            for ib in 0..b.rows() {
                out[(ia * b.rows() + ib, j)] = av * b[(ib, j)];
            }
        }
    }
    Ok(out)
}

/// Rank-r reconstruction `t[o,l,k] = Σ_i w[o,i] v[l,i] h[k,i]`.
pub fn reconstruct(w: &Matrix, v: &Matrix, h: &Matrix) -> Result<Tensor3> {
    let r = w.cols();
    if v.cols() != r || h.cols() != r {
        return Err(Error::DimensionMismatch(format!(
            "factor column counts differ: {} / {} / {}",
            w.cols(),
            v.cols(),
            h.cols()
        )));
    }
    let mut t = Tensor3::zeros(w.rows(), v.rows(), h.rows());
    for k in 0..h.rows() {
        for o in 0..w.rows() {
            for l in 0..v.rows() {
                let mut s = 0.0;
                for i in 0..r {
                    s += w[(o, i)] * v[(l, i)] * h[(k, i)];
                }
                t[(o, l, k)] = s;
            }
        }
    }
    Ok(t)
}

/// Moore-Penrose pseudoinverse via SVD. Singular values below
/// `sigma_max * max(rows, cols) * f64::EPSILON` are treated as zero.
pub fn pinv(a: &Matrix) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(Error::NonFinite("pinv input".into()));
    }
    let m = a.to_nalgebra();
    let svd = m.try_svd(true, true, f64::EPSILON, 10_000).ok_or(Error::SvdFailed)?;
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * a.rows().max(a.cols()) as f64 * f64::EPSILON;
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    // pinv = V Σ⁺ Uᵀ
    let k = svd.singular_values.len();
    let mut out = Matrix::zeros(a.cols(), a.rows());
    for s in 0..k {
        let sv = svd.singular_values[s];
        if sv <= tol || sv == 0.0 {
            continue;
        }
        let inv = 1.0 / sv;
        for i in 0..a.cols() {
            let vis = vt[(s, i)];
            if vis == 0.0 {
                continue;
            }
            for j in 0..a.rows() {
                out[(i, j)] += vis * inv * u[(j, s)];
            }
        }
    }
    Ok(out)
}

/// Solves the symmetric positive semi-definite system `A x = b` by Cholesky,
/// escalating a small relative ridge until the factorization succeeds.
/// The ridge keeps rank-deficient systems (which are consistent by
/// construction here) close to their minimum-norm solution.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), a.cols());
    assert_eq!(a.rows(), b.len());
    let n = a.rows();
    let maxdiag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)].abs())).max(f64::MIN_POSITIVE);
    let base = a.to_nalgebra();
    let rhs = nalgebra::DVector::from_column_slice(b);
    for &eps in &[0.0, 1e-12, 1e-9, 1e-6] {
        let mut m = base.clone();
        if eps > 0.0 {
            for i in 0..n {
                m[(i, i)] += eps * maxdiag;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(m) {
            let x = chol.solve(&rhs);
            return Ok(x.iter().cloned().collect());
        }
    }
    Err(Error::Numerical("Cholesky failed on a PSD system even with ridge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_fn(rows, cols, |_, _| normal(&mut rng))
    }

    #[test]
    fn unfold_degenerate_dims() {
        let mut t = Tensor3::zeros(1, 1, 1);
        t[(0, 0, 0)] = 5.0;
        for mode in 1..=3 {
            let u = t.unfold(mode).unwrap();
            assert_eq!((u.rows(), u.cols()), (1, 1));
            assert_eq!(u[(0, 0)], 5.0);
        }
        assert!(t.unfold(4).is_err());
        assert!(t.unfold(0).is_err());
    }

    #[test]
    fn unfold_matches_rank_one_structure() {
        // Oracle: build both the tensor and the factor products elementwise
        // from the rank-one definition.
        let w = random_matrix(3, 1, 11);
        let v = random_matrix(4, 1, 12);
        let h = random_matrix(5, 1, 13);
        let t = Tensor3::from_fn(3, 4, 5, |o, l, k| w[(o, 0)] * v[(l, 0)] * h[(k, 0)]);

        let u1 = t.unfold(1).unwrap();
        let p1 = w.matmul(&khatri_rao(&h, &v).unwrap().transpose());
        assert!(u1.sub(&p1).frobenius() / p1.frobenius() < 1e-12);

        let u2 = t.unfold(2).unwrap();
        let p2 = v.matmul(&khatri_rao(&h, &w).unwrap().transpose());
        assert!(u2.sub(&p2).frobenius() / p2.frobenius() < 1e-12);

        let u3 = t.unfold(3).unwrap();
        let p3 = h.matmul(&khatri_rao(&v, &w).unwrap().transpose());
        assert!(u3.sub(&p3).frobenius() / p3.frobenius() < 1e-12);
    }

    #[test]
    fn unfold_fold_round_trip() {
        let mut rng = seeded(7);
        let t = Tensor3::from_fn(2, 3, 4, |_, _, _| rng.gen::<f64>());
        for mode in 1..=3 {
            let u = t.unfold(mode).unwrap();
            let back = Tensor3::fold(&u, mode, 2, 3, 4).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn khatri_rao_hand_example() {
        // Column-wise Kronecker products computed by hand.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let k = khatri_rao(&a, &b).unwrap();
        let expect = Matrix::from_rows(&[
            vec![0.0, 2.0],
            vec![1.0, 0.0],
            vec![0.0, 4.0],
            vec![3.0, 0.0],
        ])
        .unwrap();
        assert_eq!(k, expect);
    }

    #[test]
    fn khatri_rao_ones_identity() {
        let a = random_matrix(4, 3, 5);
        let ones = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(khatri_rao(&a, &ones).unwrap(), a);
        let bad = Matrix::zeros(2, 2);
        assert!(khatri_rao(&a, &bad).is_err());
    }

    #[test]
    fn gram_hadamard_identity() {
        // (A⊙B)ᵀ(A⊙B) == (AᵀA)*(BᵀB), evaluated both ways.
        let a = random_matrix(6, 3, 21);
        let b = random_matrix(6, 3, 22);
        let kr = khatri_rao(&a, &b).unwrap();
        let left = kr.gram();
        let right = a.gram().hadamard(&b.gram());
        let denom = right.frobenius().max(1e-300);
        assert!(left.sub(&right).frobenius() / denom < 1e-12);
    }

    #[test]
    fn reconstruct_trivials() {
        let ones2 = Matrix::from_fn(2, 1, |_, _| 1.0);
        let t = reconstruct(&ones2, &ones2, &ones2).unwrap();
        assert!(t.data().iter().all(|&x| x == 1.0));

        let zeros = Matrix::zeros(2, 1);
        let tz = reconstruct(&ones2, &ones2, &zeros).unwrap();
        assert!(tz.data().iter().all(|&x| x == 0.0));

        let wrong = Matrix::zeros(2, 2);
        assert!(reconstruct(&ones2, &wrong, &ones2).is_err());
    }

    #[test]
    fn pinv_identity_and_rank_deficient() {
        let eye = Matrix::identity(3);
        let p = pinv(&eye).unwrap();
        assert!(p.sub(&eye).frobenius() < 1e-14);

        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = pinv(&a).unwrap();
        assert!(p.sub(&a).frobenius() < 1e-14);
    }

    #[test]
    fn pinv_penrose_on_tall_matrix() {
        let a = random_matrix(8, 3, 33);
        let p = pinv(&a).unwrap();
        let apa = a.matmul(&p).matmul(&a);
        assert!(apa.sub(&a).frobenius() / a.frobenius() < 1e-10);
    }

    #[test]
    fn frobenius_values() {
        let t = Tensor3::zeros(2, 2, 2);
        assert_eq!(t.frobenius(), 0.0);
        let one = Matrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(one.frobenius(), 3.0);
        let ones = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert_eq!(ones.frobenius(), 2.0);
    }

    #[test]
    fn frobenius_matches_unfoldings_exactly() {
        let mut rng = seeded(99);
        let t = Tensor3::from_fn(3, 4, 7, |_, _, _| normal(&mut rng) * 10.0_f64.powi(rng.gen_range(-6..6)));
        let f = t.frobenius();
        for mode in 1..=3 {
            assert_eq!(t.unfold(mode).unwrap().frobenius(), f, "mode {mode}");
        }
    }

    #[test]
    fn solve_spd_recovers_solution() {
        let a = random_matrix(12, 6, 44);
        let gram = a.gram();
        let x_true: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b = gram.matvec(&x_true);
        let x = solve_spd(&gram, &b).unwrap();
        let err: f64 = x.iter().zip(&x_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err < 1e-8, "err {err}");
    }
}
