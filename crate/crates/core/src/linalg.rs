//! Dense complex matrices and the Hermitian eigensolver wrapper.

use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Dense complex matrix stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from column-major data.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn col(&self, j: usize) -> &[Complex64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [Complex64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![ZERO; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            for (yi, &a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        y
    }

    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermitian_defect(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0f64;
        for j in 0..self.cols {
            for i in 0..=j {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.cols).all(|j| (0..self.rows).all(|i| i == j || self[(i, j)] == ZERO))
    }

    fn to_faer(&self) -> Mat<Complex64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    fn from_faer(m: faer::MatRef<'_, Complex64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// `self^H * other`.
    pub fn adjoint_mul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.rows, other.rows, "inner dimensions differ");
        let (a, b) = (self.to_faer(), other.to_faer());
        Self::from_faer((a.adjoint() * &b).as_ref())
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[j * self.rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[j * self.rows + i]
    }
}

/// Full eigensystem of a Hermitian matrix, eigenvalues ascending, eigenvectors in columns.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

/// Diagonalizes a Hermitian matrix.
///
/// Each eigenvector is rotated so that its largest-magnitude component is real
/// and positive. Components whose magnitude is within a relative `1e-9` of the
/// maximum count as ties, and the lowest index among them wins.
pub fn eigh(h: &CMatrix) -> Result<Eigh> {
    let dim = h.rows();
    if dim != h.cols() {
        return Err(Error::InvalidArgument(format!("eigh needs a square matrix, got {}x{}", dim, h.cols())));
    }
    if dim == 0 {
        return Ok(Eigh { values: Vec::new(), vectors: CMatrix::zeros(0, 0) });
    }
    if h.is_diagonal() {
        return Ok(diagonal_eigh(h));
    }

    let evd = h
        .to_faer()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::EigenSolver { dim, reason: format!("{e:?}") })?;
    let s = evd.S().column_vector();
    let values: Vec<f64> = (0..dim).map(|i| s[i].re).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenSolver { dim, reason: "non-finite eigenvalue".into() });
    }
    let mut vectors = CMatrix::from_faer(evd.U());
    for j in 0..dim {
        fix_phase(vectors.col_mut(j));
    }
    Ok(Eigh { values, vectors })
}

fn diagonal_eigh(h: &CMatrix) -> Eigh {
    let dim = h.rows();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| h[(a, a)].re.total_cmp(&h[(b, b)].re));
    let values = order.iter().map(|&i| h[(i, i)].re).collect();
    let mut vectors = CMatrix::zeros(dim, dim);
    for (k, &i) in order.iter().enumerate() {
        vectors[(i, k)] = Complex64::new(1.0, 0.0);
    }
    Eigh { values, vectors }
}

/// Rotates `v` by a global phase so its dominant component is real positive.
pub fn fix_phase(v: &mut [Complex64]) {
    let max = v.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    if max == 0.0 {
        return;
    }
    let pivot = v.iter().position(|z| z.norm() >= max * (1.0 - 1e-9)).unwrap_or(0);
    let rot = v[pivot].conj() / v[pivot].norm();
    for z in v.iter_mut() {
        *z *= rot;
    }
    v[pivot] = Complex64::new(v[pivot].norm(), 0.0);
}

/// Verification figures for an eigendecomposition.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EighCheck {
    /// max over pairs of `||H v - e v||`
    pub max_residual: f64,
    /// max entry of `|V^H V - 1|`
    pub max_orthogonality_defect: f64,
}

/// Computes residuals and orthonormality defects independently of the solver.
pub fn verify_eigh(h: &CMatrix, eig: &Eigh) -> EighCheck {
    let dim = h.rows();
    if dim == 0 {
        return EighCheck { max_residual: 0.0, max_orthogonality_defect: 0.0 };
    }
    let hf = h.to_faer();
    let vf = eig.vectors.to_faer();
    let hv = &hf * &vf;
    let mut max_residual = 0.0f64;
    for j in 0..dim {
        let e = eig.values[j];
        let r: f64 = (0..dim).map(|i| (hv[(i, j)] - vf[(i, j)] * e).norm_sqr()).sum();
        max_residual = max_residual.max(r.sqrt());
    }
    let gram = vf.adjoint() * &vf;
    let mut max_orthogonality_defect = 0.0f64;
    for j in 0..dim {
        for i in 0..dim {
            let target = if i == j { 1.0 } else { 0.0 };
            max_orthogonality_defect = max_orthogonality_defect.max((gram[(i, j)] - target).norm());
        }
    }
    EighCheck { max_residual, max_orthogonality_defect }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_by_two_hermitian() {
        // [[1, i], [-i, 1]] has eigenvalues 0 and 2
        let h = CMatrix::from_fn(2, 2, |i, j| match (i, j) {
            (0, 1) => c(0.0, 1.0),
            (1, 0) => c(0.0, -1.0),
            _ => c(1.0, 0.0),
        });
        let e = eigh(&h).unwrap();
        assert!((e.values[0] - 0.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        let chk = verify_eigh(&h, &e);
        assert!(chk.max_residual < 1e-13);
        assert!(chk.max_orthogonality_defect < 1e-13);
        for j in 0..2 {
            let col = e.vectors.col(j);
            let pivot = col.iter().position(|z| z.im == 0.0 && z.re > 0.0);
            assert!(pivot.is_some());
        }
    }

    #[test]
    fn diagonal_matrices_give_coordinate_vectors() {
        let d = [3.0, 1.0, 2.0, 1.0];
        let h = CMatrix::from_fn(4, 4, |i, j| if i == j { c(d[i], 0.0) } else { c(0.0, 0.0) });
        let e = eigh(&h).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 2.0, 3.0]);
        // stable: the first 1.0 (index 1) comes before the second (index 3)
        assert_eq!(e.vectors[(1, 0)], c(1.0, 0.0));
        assert_eq!(e.vectors[(3, 1)], c(1.0, 0.0));
        assert_eq!(e.vectors[(2, 2)], c(1.0, 0.0));
        assert_eq!(e.vectors[(0, 3)], c(1.0, 0.0));
    }

    #[test]
    fn fix_phase_is_idempotent() {
        let mut v = vec![c(0.1, 0.2), c(-0.5, 0.5), c(0.3, 0.0)];
        fix_phase(&mut v);
        let once = v.clone();
        fix_phase(&mut v);
        assert_eq!(once, v);
        assert!(v[1].im == 0.0 && v[1].re > 0.0);
    }

    #[test]
    fn hermitian_defect_detects_asymmetry() {
        let mut h = CMatrix::identity(3);
        assert_eq!(h.hermitian_defect(), 0.0);
        h[(0, 2)] = c(0.0, 1e-3);
        assert!((h.hermitian_defect() - 1e-3).abs() < 1e-15);
    }
}
