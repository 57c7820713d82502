//! Confined planar rotor `H = -d^2/dq^2 + (u/2)(1 + cos q)` on the Fourier basis
//! `chi_j(q) = e^{ijq} / sqrt(2 pi)`, `|j| <= j_max`.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};
use crate::linalg::{self, CMatrix, EighCheck};

/// Plane-wave basis truncated at `|j| <= j_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierBasis {
    j_max: usize,
}

impl FourierBasis {
    pub fn new(j_max: usize) -> Result<Self> {
        if j_max < 1 {
            return Err(Error::InvalidArgument("j_max must be at least 1".into()));
        }
        Ok(Self { j_max })
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn dim(&self) -> usize {
        2 * self.j_max + 1
    }

    /// Fourier index of basis position `idx`.
    pub fn j(&self, idx: usize) -> i64 {
        idx as i64 - self.j_max as i64
    }

    pub fn index(&self, j: i64) -> Option<usize> {
        let idx = j + self.j_max as i64;
        (0..self.dim() as i64).contains(&idx).then_some(idx as usize)
    }
}

impl Default for FourierBasis {
    fn default() -> Self {
        Self { j_max: 20 }
    }
}

/// Matrix of the confined rotor Hamiltonian over the Fourier indices.
///
/// `<chi_j| cos q |chi_{j±1}> = 1/2`, so the potential adds `u/2` on the
/// diagonal and `u/4` on the first off-diagonals.
pub fn build_rotor_hamiltonian(u: f64, basis: &FourierBasis) -> Result<CMatrix> {
    if !(u >= 0.0) {
        return Err(Error::InvalidArgument(format!("barrier height must be >= 0, got {u}")));
    }
    let dim = basis.dim();
    Ok(CMatrix::from_fn(dim, dim, |a, b| {
        let (ja, jb) = (basis.j(a), basis.j(b));
        let re = if a == b {
            (ja * ja) as f64 + 0.5 * u
        } else if (ja - jb).abs() == 1 {
            0.25 * u
        } else {
            0.0
        };
        Complex64::new(re, 0.0)
    }))
}

/// Eigenvalues and Fourier coefficients of the single rotor.
#[derive(Debug, Clone)]
pub struct RotorSpectrum {
    u: f64,
    basis: FourierBasis,
    energies: Vec<f64>,
    /// `coeffs[m][idx]` is the coefficient of `chi_{j(idx)}` in level `m`.
    coeffs: Vec<Vec<Complex64>>,
    kept: usize,
    check: EighCheck,
}

/// Default number of levels exposed for tensor products.
pub const DEFAULT_KEPT_LEVELS: usize = 10;

pub fn diagonalize_rotor(h: &CMatrix, basis: FourierBasis, u: f64) -> Result<RotorSpectrum> {
    if h.rows() != basis.dim() {
        return Err(Error::InvalidArgument(format!(
            "matrix dimension {} does not match basis dimension {}",
            h.rows(),
            basis.dim()
        )));
    }
    let eig = if u > 0.0 && is_reflection_symmetric(h, &basis) { parity_eigh(h, &basis)? } else { linalg::eigh(h)? };
    let check = linalg::verify_eigh(h, &eig);
    if check.max_residual > 1e-8 || check.max_orthogonality_defect > 1e-10 {
        return Err(Error::EigenVerification {
            dim: h.rows(),
            residual: check.max_residual,
            orthogonality: check.max_orthogonality_defect,
        });
    }
    let coeffs = (0..basis.dim()).map(|m| eig.vectors.col(m).to_vec()).collect();
    Ok(RotorSpectrum {
        u,
        basis,
        energies: eig.values,
        coeffs,
        kept: DEFAULT_KEPT_LEVELS.min(basis.dim()),
        check,
    })
}

fn is_reflection_symmetric(h: &CMatrix, basis: &FourierBasis) -> bool {
    let dim = basis.dim();
    (0..dim).all(|a| (0..dim).all(|b| h[(a, b)] == h[(dim - 1 - a, dim - 1 - b)] && h[(a, b)].im == 0.0))
}

/// Diagonalizes the even and odd sectors separately, so each eigenvector is
/// exactly real with `c_{-j} = +-c_j` bitwise and paired plane waves cancel
/// exactly on evaluation.
fn parity_eigh(h: &CMatrix, basis: &FourierBasis) -> Result<linalg::Eigh> {
    let jm = basis.j_max() as i64;
    let at = |j: i64| basis.index(j).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    // even sector: chi_0 and (chi_j + chi_-j)/sqrt 2; odd sector: (chi_j - chi_-j)/sqrt 2
    let even_vec = |j: i64| -> Vec<(usize, f64)> { if j == 0 { vec![(at(0), 1.0)] } else { vec![(at(j), r), (at(-j), r)] } };
    let odd_vec = |j: i64| -> Vec<(usize, f64)> { vec![(at(j), r), (at(-j), -r)] };
    let project = |vecs: &dyn Fn(i64) -> Vec<(usize, f64)>, js: &[i64]| {
        CMatrix::from_fn(js.len(), js.len(), |x, y| {
            let mut acc = 0.0;
            for &(a, wa) in &vecs(js[x]) {
                for &(b, wb) in &vecs(js[y]) {
                    acc += wa * wb * h[(a, b)].re;
                }
            }
            Complex64::new(acc, 0.0)
        })
    };
    let even_js: Vec<i64> = (0..=jm).collect();
    let odd_js: Vec<i64> = (1..=jm).collect();
    let even = linalg::eigh(&project(&even_vec, &even_js))?;
    let odd = linalg::eigh(&project(&odd_vec, &odd_js))?;

    let dim = basis.dim();
    let mut pairs: Vec<(f64, Vec<Complex64>)> = Vec::with_capacity(dim);
    for (eig, sign, js) in [(&even, 1.0, &even_js), (&odd, -1.0, &odd_js)] {
        for k in 0..js.len() {
            let mut v = vec![Complex64::new(0.0, 0.0); dim];
            for (x, &j) in js.iter().enumerate() {
                let a = eig.vectors[(x, k)].re;
                if j == 0 {
                    v[at(0)] = Complex64::new(a, 0.0);
                } else {
                    let c = a * r;
                    v[at(j)] = Complex64::new(c, 0.0);
                    v[at(-j)] = Complex64::new(sign * c, 0.0);
                }
            }
            linalg::fix_phase(&mut v);
            pairs.push((eig.values[k], v));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values = pairs.iter().map(|p| p.0).collect();
    let mut vectors = CMatrix::zeros(dim, dim);
    for (k, (_, v)) in pairs.into_iter().enumerate() {
        vectors.col_mut(k).copy_from_slice(&v);
    }
    Ok(linalg::Eigh { values, vectors })
}

impl RotorSpectrum {
    /// Builds and diagonalizes the confined rotor in one go.
    pub fn solve(u: f64, j_max: usize) -> Result<Self> {
        let basis = FourierBasis::new(j_max)?;
        let h = build_rotor_hamiltonian(u, &basis)?;
        diagonalize_rotor(&h, basis, u)
    }

    /// Free rotor expressed directly in its momentum eigenbasis, levels ordered
    /// `j = 0, 1, -1, 2, -2, ...`. Unlike [`RotorSpectrum::solve`] with `u = 0`,
    /// every level is a single plane wave.
    pub fn plane_waves(j_max: usize) -> Result<Self> {
        let basis = FourierBasis::new(j_max)?;
        let mut js = vec![0i64];
        for j in 1..=j_max as i64 {
            js.push(j);
            js.push(-j);
        }
        let energies = js.iter().map(|&j| (j * j) as f64).collect();
        let coeffs = js
            .iter()
            .map(|&j| {
                let mut v = vec![Complex64::new(0.0, 0.0); basis.dim()];
                v[basis.index(j).unwrap()] = Complex64::new(1.0, 0.0);
                v
            })
            .collect();
        Ok(Self {
            u: 0.0,
            basis,
            energies,
            coeffs,
            kept: DEFAULT_KEPT_LEVELS.min(basis.dim()),
            check: EighCheck { max_residual: 0.0, max_orthogonality_defect: 0.0 },
        })
    }

    /// Restricts the levels offered to tensor products.
    pub fn with_kept_levels(mut self, kept: usize) -> Result<Self> {
        if kept == 0 || kept > self.energies.len() {
            return Err(Error::InvalidArgument(format!(
                "kept levels must be in 1..={}, got {kept}",
                self.energies.len()
            )));
        }
        self.kept = kept;
        Ok(self)
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn basis(&self) -> FourierBasis {
        self.basis
    }

    pub fn kept_levels(&self) -> usize {
        self.kept
    }

    /// All `2 j_max + 1` eigenvalues, ascending.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn energy(&self, m: usize) -> f64 {
        self.energies[m]
    }

    pub fn coefficients(&self, m: usize) -> &[Complex64] {
        &self.coeffs[m]
    }

    pub fn check(&self) -> EighCheck {
        self.check
    }

    /// Harmonic approximation `(m + 1/2) sqrt(u)` from `u (q - pi)^2 / 4`.
    pub fn harmonic_reference(&self, m: usize) -> f64 {
        (m as f64 + 0.5) * self.u.sqrt()
    }

    /// Value and derivative of `phi_m` at `q`.
    pub fn eval(&self, m: usize, q: f64) -> Result<(Complex64, Complex64)> {
        if m >= self.energies.len() {
            return Err(Error::LevelOutOfRange { level: m, available: self.energies.len() });
        }
        let mut value = [Complex64::new(0.0, 0.0)];
        let mut deriv = [Complex64::new(0.0, 0.0)];
        self.accumulate(q, m..m + 1, &mut value, &mut deriv);
        Ok((value[0], deriv[0]))
    }

    /// Fills `values[m]` and `derivs[m]` for the first `values.len()` levels at `q`.
    ///
    /// This is the hot path of field evaluation: one `cis` per Fourier index,
    /// shared by all levels.
    pub fn eval_levels(&self, q: f64, values: &mut [Complex64], derivs: &mut [Complex64]) {
        let levels = values.len();
        debug_assert!(levels <= self.energies.len() && derivs.len() == levels);
        self.accumulate(q, 0..levels, values, derivs);
    }

    /// Sums `+j` and `-j` terms pairwise before accumulating, so states of
    /// definite parity come out exactly real or exactly imaginary.
    fn accumulate(&self, q: f64, levels: std::ops::Range<usize>, values: &mut [Complex64], derivs: &mut [Complex64]) {
        let zero = Complex64::new(0.0, 0.0);
        values.iter_mut().for_each(|v| *v = zero);
        derivs.iter_mut().for_each(|v| *v = zero);
        let norm = (2.0 * PI).sqrt().recip();
        let i0 = self.basis.index(0).unwrap();
        for (slot, m) in levels.clone().enumerate() {
            values[slot] = self.coeffs[m][i0] * norm;
        }
        for j in 1..=self.basis.j_max() as i64 {
            let (ip, im) = (self.basis.index(j).unwrap(), self.basis.index(-j).unwrap());
            let wave = Complex64::cis(j as f64 * q) * norm;
            let back = wave.conj();
            let jf = Complex64::new(0.0, j as f64);
            for (slot, m) in levels.clone().enumerate() {
                let (cp, cm) = (self.coeffs[m][ip], self.coeffs[m][im]);
                values[slot] += cp * wave + cm * back;
                derivs[slot] += jf * (cp * wave - cm * back);
            }
        }
    }

    /// `<phi_m| e^{i s q} |phi_m'>` for the kept levels, row-major `kept x kept`.
    ///
    /// Exact within the truncated basis; zero once `|s| > 2 j_max`.
    pub fn shift_matrix(&self, s: i64) -> Vec<Complex64> {
        let k = self.kept;
        let mut out = vec![Complex64::new(0.0, 0.0); k * k];
        for m in 0..k {
            for mp in 0..k {
                let mut acc = Complex64::new(0.0, 0.0);
                for (idx, &c) in self.coeffs[mp].iter().enumerate() {
                    if let Some(target) = self.basis.index(self.basis.j(idx) + s) {
                        acc += self.coeffs[m][target].conj() * c;
                    }
                }
                out[m * k + mp] = acc;
            }
        }
        out
    }

    /// Writes `(m, energy, harmonic)` rows.
    pub fn write_levels_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let rows = (0..self.energies.len()).map(|m| {
            vec![m.to_string(), self.energies[m].to_string(), self.harmonic_reference(m).to_string()]
        });
        io::write_csv(path, header, &["m", "energy", "harmonic_reference"], rows)
    }

    /// Writes `(m, j, Re c, Im c)` rows.
    pub fn write_coefficients_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let rows = (0..self.energies.len()).flat_map(|m| {
            (0..self.basis.dim()).map(move |idx| {
                let c = self.coeffs[m][idx];
                vec![m.to_string(), self.basis.j(idx).to_string(), c.re.to_string(), c.im.to_string()]
            })
        });
        io::write_csv(path, header, &["m", "j", "re", "im"], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_I: [f64; 10] =
        [8.597, 25.664, 42.472, 59.015, 75.286, 91.278, 106.982, 122.390, 137.491, 152.275];
    const TABLE_I_HARMONIC: [f64; 10] =
        [8.660, 25.981, 43.301, 60.622, 77.942, 95.263, 112.583, 129.904, 147.224, 164.545];

    fn reference() -> RotorSpectrum {
        RotorSpectrum::solve(300.0, 20).unwrap()
    }

    #[test]
    fn hamiltonian_structure() {
        let basis = FourierBasis::new(3).unwrap();
        let h = build_rotor_hamiltonian(8.0, &basis).unwrap();
        let i0 = basis.index(0).unwrap();
        let i1 = basis.index(1).unwrap();
        assert_eq!(h[(i0, i0)].re, 4.0);
        assert_eq!(h[(i0, i1)].re, 2.0);
        assert_eq!(h[(i1, i1)].re, 5.0);
        assert_eq!(h[(i0, basis.index(2).unwrap())].re, 0.0);
        assert_eq!(h.hermitian_defect(), 0.0);
        assert!(build_rotor_hamiltonian(-1.0, &basis).is_err());
        assert!(FourierBasis::new(0).is_err());
    }

    #[test]
    fn cos_matrix_element_by_quadrature() {
        // <chi_0| cos q |chi_1> = 1/2
        let n = 64;
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..n {
            let q = 2.0 * PI * k as f64 / n as f64;
            acc += Complex64::cis(q) * q.cos() / (2.0 * PI);
        }
        acc *= 2.0 * PI / n as f64;
        assert!((acc.re - 0.5).abs() < 1e-14 && acc.im.abs() < 1e-14);
    }

    #[test]
    fn free_rotor_levels() {
        let spec = RotorSpectrum::solve(0.0, 6).unwrap();
        let expected = [0.0, 1.0, 1.0, 4.0, 4.0, 9.0, 9.0, 16.0, 16.0];
        for (e, x) in spec.energies().iter().zip(expected) {
            assert_eq!(*e, x);
        }
    }

    #[test]
    fn table_one_levels() {
        let spec = reference();
        for m in 0..10 {
            assert!((spec.energy(m) - TABLE_I[m]).abs() <= 1e-3, "m={m}: {}", spec.energy(m));
            assert!((spec.harmonic_reference(m) - TABLE_I_HARMONIC[m]).abs() <= 1e-3);
        }
    }

    #[test]
    fn spectrum_invariants() {
        let spec = reference();
        assert!(spec.energies().windows(2).all(|w| w[0] <= w[1]));
        assert!(spec.check().max_residual <= 1e-8);
        assert!(spec.check().max_orthogonality_defect <= 1e-10);
    }

    #[test]
    fn normalization_by_quadrature() {
        let spec = reference();
        let n = 10_000;
        let h = 2.0 * PI / n as f64;
        for m in 0..10 {
            let s: f64 = (0..n).map(|k| spec.eval(m, k as f64 * h).unwrap().0.norm_sqr()).sum::<f64>() * h;
            assert!((s - 1.0).abs() <= 1e-8, "m={m}: {s}");
        }
    }

    #[test]
    fn ground_state_peaks_at_minimum() {
        let spec = reference();
        let n = 2000;
        let (best, _) = (0..n)
            .map(|k| {
                let q = 2.0 * PI * k as f64 / n as f64;
                (q, spec.eval(0, q).unwrap().0.norm_sqr())
            })
            .fold((0.0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!((best - PI).abs() < 2.0 * PI / n as f64);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let spec = reference();
        let h = 1e-6;
        for m in 0..10 {
            for &q in &[2.1, 2.9, PI, 3.4, 4.0] {
                let (_, d) = spec.eval(m, q).unwrap();
                let fd = (spec.eval(m, q + h).unwrap().0 - spec.eval(m, q - h).unwrap().0) / (2.0 * h);
                let scale = d.norm().max(1e-3);
                assert!((d - fd).norm() / scale <= 1e-6, "m={m} q={q}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn eval_levels_matches_eval() {
        let spec = reference();
        let mut v = vec![Complex64::new(0.0, 0.0); 10];
        let mut d = v.clone();
        spec.eval_levels(2.7, &mut v, &mut d);
        for m in 0..10 {
            let (a, b) = spec.eval(m, 2.7).unwrap();
            assert!((a - v[m]).norm() < 1e-13 && (b - d[m]).norm() < 1e-12);
        }
        assert!(matches!(spec.eval(41, 0.0), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn densities_symmetric_about_minimum() {
        let spec = reference();
        for m in 0..10 {
            for &x in &[0.1, 0.5, 1.0, 2.0, 3.0] {
                let a = spec.eval(m, PI + x).unwrap().0.norm_sqr();
                let b = spec.eval(m, PI - x).unwrap().0.norm_sqr();
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn basis_truncation_converged() {
        let small = RotorSpectrum::solve(300.0, 20).unwrap();
        let large = RotorSpectrum::solve(300.0, 30).unwrap();
        for m in 0..10 {
            let rel = (small.energy(m) - large.energy(m)).abs() / large.energy(m);
            assert!(rel < 1e-6, "m={m}: {rel}");
        }
    }

    #[test]
    fn shift_matrix_identities() {
        let spec = reference();
        let k = spec.kept_levels();
        // s = 0 is the overlap matrix
        let id = spec.shift_matrix(0);
        for m in 0..k {
            for mp in 0..k {
                let t = if m == mp { 1.0 } else { 0.0 };
                assert!((id[m * k + mp] - t).norm() < 1e-12);
            }
        }
        // e^{-isq} is the adjoint of e^{isq}
        let p = spec.shift_matrix(3);
        let n = spec.shift_matrix(-3);
        for m in 0..k {
            for mp in 0..k {
                assert!((p[m * k + mp] - n[mp * k + m].conj()).norm() < 1e-13);
            }
        }
        assert!(spec.shift_matrix(41).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn plane_waves_are_momentum_states() {
        let spec = RotorSpectrum::plane_waves(4).unwrap();
        assert_eq!(&spec.energies()[..5], &[0.0, 1.0, 1.0, 4.0, 4.0]);
        let (v, d) = spec.eval(1, 0.3).unwrap();
        assert!((d - v * Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }
}
