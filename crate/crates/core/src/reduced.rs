//! Reduced density matrix of one rotor, its averages, marginal densities and
//! fluctuation bounds.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};
use crate::linalg::{self, CMatrix};
use crate::many_body::ProductBasis;
use crate::rotor::RotorSpectrum;
use crate::seeds::SeedTree;
use crate::state::{sample_rpse, ActiveModel, PureState};

/// Partial-trace bookkeeping for one rotor of a product basis.
///
/// Basis states sharing their environment levels form a group; within a group
/// states differ only in the subsystem level.
#[derive(Debug, Clone)]
pub struct Subsystem {
    index: usize,
    levels: usize,
    /// `(subsystem level, basis index)` per environment configuration.
    groups: Vec<Vec<(usize, usize)>>,
}

impl Subsystem {
    /// `levels = None` uses the highest level present in the basis plus one.
    pub fn new(basis: &ProductBasis, index: usize, levels: Option<usize>) -> Result<Self> {
        if index >= basis.rotor_count() {
            return Err(Error::InvalidArgument(format!(
                "subsystem {index} out of range for {} rotors",
                basis.rotor_count()
            )));
        }
        let used = (0..basis.len()).map(|l| basis.levels(l)[index] as usize + 1).max().unwrap_or(1);
        let levels = levels.unwrap_or(used);
        if levels < used {
            return Err(Error::LevelOutOfRange { level: used - 1, available: levels });
        }
        let mut slot: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
        for l in 0..basis.len() {
            let mut env = basis.levels(l).to_vec();
            let m = env.remove(index) as usize;
            let g = *slot.entry(env).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push((m, l));
        }
        Ok(Self { index, levels, groups })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn environment_count(&self) -> usize {
        self.groups.len()
    }

    /// `sigma_{mm'} = sum_e d_(m,e) conj(d_(m',e))`.
    pub fn partial_trace(&self, d: &[Complex64], tag: RdmTag) -> ReducedDensityMatrix {
        let m = self.levels;
        let mut data = vec![Complex64::new(0.0, 0.0); m * m];
        for g in &self.groups {
            for &(a, la) in g {
                for &(b, lb) in g {
                    data[a * m + b] += d[la] * d[lb].conj();
                }
            }
        }
        ReducedDensityMatrix::from_raw(m, data, tag)
    }

    /// Matrix of `a (x) 1` between all pairs of basis states, applied to columns of `u`.
    fn lift(&self, a: &CMatrix, u: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(u.rows(), u.cols());
        for g in &self.groups {
            for &(m, l) in g {
                for &(mp, lp) in g {
                    let amp = a[(m, mp)];
                    if amp.norm() == 0.0 {
                        continue;
                    }
                    for k in 0..u.cols() {
                        out[(l, k)] += amp * u[(lp, k)];
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RdmTag {
    Time(f64),
    Equilibrium,
    EnsembleAverage,
    Canonical { beta: f64 },
}

impl std::fmt::Display for RdmTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RdmTag::Time(t) => write!(f, "{t}"),
            RdmTag::Equilibrium => write!(f, "equilibrium"),
            RdmTag::EnsembleAverage => write!(f, "ensemble-average"),
            RdmTag::Canonical { beta } => write!(f, "canonical({beta})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDensityMatrix {
    levels: usize,
    /// Row-major `levels x levels`.
    data: Vec<Complex64>,
    tag: RdmTag,
}

/// Structural figures of a density matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdmCheck {
    pub hermitian_defect: f64,
    pub trace_defect: f64,
    pub min_eigenvalue: f64,
}

impl RdmCheck {
    pub fn passes(&self) -> bool {
        self.hermitian_defect <= 1e-12 && self.trace_defect <= 1e-12 && self.min_eigenvalue >= -1e-10
    }
}

impl ReducedDensityMatrix {
    pub fn from_raw(levels: usize, data: Vec<Complex64>, tag: RdmTag) -> Self {
        assert_eq!(data.len(), levels * levels);
        Self { levels, data, tag }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn tag(&self) -> RdmTag {
        self.tag
    }

    pub fn get(&self, m: usize, mp: usize) -> Complex64 {
        self.data[m * self.levels + mp]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.levels).map(|m| self.get(m, m).re).collect()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.levels).map(|m| self.get(m, m)).sum()
    }

    pub fn to_matrix(&self) -> CMatrix {
        CMatrix::from_fn(self.levels, self.levels, |i, j| self.get(i, j))
    }

    pub fn check(&self) -> Result<RdmCheck> {
        let hermitian_defect = self.to_matrix().hermitian_defect();
        let trace_defect = (self.trace() - 1.0).norm();
        // symmetrize so the solver sees an exactly Hermitian matrix
        let sym = CMatrix::from_fn(self.levels, self.levels, |i, j| (self.get(i, j) + self.get(j, i).conj()) * 0.5);
        let min_eigenvalue = linalg::eigh(&sym)?.values[0];
        Ok(RdmCheck { hermitian_defect, trace_defect, min_eigenvalue })
    }

    /// `max |sigma_mm'| / min(sigma_mm, sigma_m'm')` over `m != m'`, skipping empty diagonals.
    pub fn max_relative_offdiagonal(&self) -> f64 {
        let d = self.diagonal();
        let mut worst = 0.0f64;
        for m in 0..self.levels {
            for mp in 0..self.levels {
                let floor = d[m].min(d[mp]);
                if m != mp && floor > 0.0 {
                    worst = worst.max(self.get(m, mp).norm() / floor);
                }
            }
        }
        worst
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `Tr(a sigma)`, real part.
    pub fn expectation(&self, a: &CMatrix) -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..self.levels {
            for mp in 0..self.levels {
                acc += a[(m, mp)] * self.get(mp, m);
            }
        }
        acc.re
    }

    /// Sum of `weights[i] * rdms[i]`.
    pub fn weighted_sum(rdms: &[Self], weights: &[f64], tag: RdmTag) -> Self {
        let levels = rdms[0].levels;
        let mut data = vec![Complex64::new(0.0, 0.0); levels * levels];
        for (r, &w) in rdms.iter().zip(weights) {
            for (x, y) in data.iter_mut().zip(&r.data) {
                *x += y * w;
            }
        }
        Self { levels, data, tag }
    }
}

pub fn rdm_at(model: &ActiveModel, sub: &Subsystem, state: &PureState, time: f64) -> ReducedDensityMatrix {
    sub.partial_trace(&state.product_amplitudes_at(model, time), RdmTag::Time(time))
}

/// Partial traces of every active eigenprojector `|E_k><E_k|`.
#[derive(Debug, Clone)]
pub struct EigenRdms {
    rdms: Vec<ReducedDensityMatrix>,
}

impl EigenRdms {
    pub fn new(model: &ActiveModel, sub: &Subsystem) -> Self {
        let v = model.spectrum().vectors();
        let rdms = (0..model.dim()).map(|k| sub.partial_trace(v.col(k), RdmTag::Equilibrium)).collect();
        Self { rdms }
    }

    pub fn get(&self, k: usize) -> &ReducedDensityMatrix {
        &self.rdms[k]
    }

    /// `sum_k P_k Tr_E |E_k><E_k|`; phases never enter.
    pub fn equilibrium(&self, populations: &[f64]) -> ReducedDensityMatrix {
        ReducedDensityMatrix::weighted_sum(&self.rdms, populations, RdmTag::Equilibrium)
    }

    /// RPSE average, using `<P_k> = 1/N`.
    pub fn ensemble_average(&self) -> ReducedDensityMatrix {
        let n = self.rdms.len();
        ReducedDensityMatrix::weighted_sum(&self.rdms, &vec![1.0 / n as f64; n], RdmTag::EnsembleAverage)
    }
}

pub fn equilibrium_rdm(model: &ActiveModel, sub: &Subsystem, state: &PureState) -> ReducedDensityMatrix {
    EigenRdms::new(model, sub).equilibrium(&state.populations)
}

pub fn ensemble_average_rdm(model: &ActiveModel, sub: &Subsystem) -> ReducedDensityMatrix {
    EigenRdms::new(model, sub).ensemble_average()
}

/// Diagonal `exp(-beta eps_m) / Z` over the lowest `levels` single-rotor levels.
pub fn canonical_rdm(rotor: &RotorSpectrum, beta: f64, levels: usize) -> Result<ReducedDensityMatrix> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if levels == 0 || levels > rotor.energies().len() {
        return Err(Error::LevelOutOfRange { level: levels, available: rotor.energies().len() });
    }
    let e0 = rotor.energy(0);
    let w: Vec<f64> = (0..levels).map(|m| (-beta * (rotor.energy(m) - e0)).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut data = vec![Complex64::new(0.0, 0.0); levels * levels];
    for m in 0..levels {
        data[m * levels + m] = Complex64::new(w[m] / z, 0.0);
    }
    Ok(ReducedDensityMatrix::from_raw(levels, data, RdmTag::Canonical { beta }))
}

/// Density of the subsystem coordinate on a uniform grid of `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDistribution {
    pub q: Vec<f64>,
    pub density: Vec<f64>,
    pub tag: RdmTag,
}

impl MarginalDistribution {
    /// Riemann sum of the density.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * (2.0 * PI / self.q.len() as f64)
    }

    pub fn min_density(&self) -> f64 {
        self.density.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let header = header.clone().with("tag", self.tag);
        io::write_csv(
            path,
            &header,
            &["q", "density"],
            self.q.iter().zip(&self.density).map(|(q, p)| vec![q.to_string(), p.to_string()]),
        )
    }
}

/// `p(q) = sum_{mm'} sigma_{mm'} phi_m(q) conj(phi_m'(q))` at the centres `q_i = 2 pi (i + 1/2) / points`
/// of `points` equal bins, the grid used by occupancy histograms.
///
/// Returns the density and the largest imaginary residue.
pub fn marginal(rdm: &ReducedDensityMatrix, rotor: &RotorSpectrum, points: usize) -> Result<(MarginalDistribution, f64)> {
    let m = rdm.levels();
    if m > rotor.energies().len() {
        return Err(Error::LevelOutOfRange { level: m - 1, available: rotor.energies().len() });
    }
    if points == 0 {
        return Err(Error::InvalidArgument("marginal grid needs at least one point".into()));
    }
    let mut phi = vec![Complex64::new(0.0, 0.0); m];
    let mut dphi = vec![Complex64::new(0.0, 0.0); m];
    let mut q = Vec::with_capacity(points);
    let mut density = Vec::with_capacity(points);
    let mut max_imag = 0.0f64;
    for i in 0..points {
        let x = 2.0 * PI * (i as f64 + 0.5) / points as f64;
        rotor.eval_levels(x, &mut phi, &mut dphi);
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..m {
            for b in 0..m {
                acc += rdm.get(a, b) * phi[a] * phi[b].conj();
            }
        }
        max_imag = max_imag.max(acc.im.abs());
        q.push(x);
        density.push(acc.re);
    }
    Ok((MarginalDistribution { q, density, tag: rdm.tag() }, max_imag))
}

/// Projector onto subsystem level `m`.
pub fn level_projector(levels: usize, m: usize) -> Result<CMatrix> {
    if m >= levels {
        return Err(Error::LevelOutOfRange { level: m, available: levels });
    }
    let mut a = CMatrix::zeros(levels, levels);
    a[(m, m)] = Complex64::new(1.0, 0.0);
    Ok(a)
}

/// Indicator of the coordinate window `[lo, hi]` in the level basis, exact within the Fourier basis.
pub fn window_observable(rotor: &RotorSpectrum, levels: usize, lo: f64, hi: f64) -> Result<CMatrix> {
    if !(hi > lo) || hi - lo > 2.0 * PI {
        return Err(Error::InvalidArgument(format!("window [{lo}, {hi}] must be non-empty and at most 2 pi wide")));
    }
    let basis = rotor.basis();
    let dim = basis.dim();
    // (1/2 pi) int_lo^hi e^{i k q} dq for k = j' - j
    let kernel = |k: i64| -> Complex64 {
        if k == 0 {
            Complex64::new((hi - lo) / (2.0 * PI), 0.0)
        } else {
            let kf = k as f64;
            (Complex64::cis(kf * hi) - Complex64::cis(kf * lo)) / Complex64::new(0.0, 2.0 * PI * kf)
        }
    };
    Ok(CMatrix::from_fn(levels, levels, |m, mp| {
        let (cm, cmp) = (rotor.coefficients(m), rotor.coefficients(mp));
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..dim {
            for b in 0..dim {
                acc += cm[a].conj() * cmp[b] * kernel(basis.j(b) - basis.j(a));
            }
        }
        acc
    }))
}

/// `D_2 / (N + 1)` with `D_2 = sum_k (lambda_k - D_1)^2` and `D_1` the spectral mean.
///
/// An upper bound on the full-space time-plus-ensemble variance; the exact
/// ensemble value carries an extra `1/dim`.
pub fn full_space_bound(eigenvalues: &[f64], n: usize) -> f64 {
    let dim = eigenvalues.len() as f64;
    let d1 = eigenvalues.iter().sum::<f64>() / dim;
    let d2: f64 = eigenvalues.iter().map(|l| (l - d1).powi(2)).sum();
    d2 / (n as f64 + 1.0)
}

/// Time and ensemble fluctuations of `a(t) = Tr(a sigma(t))` against their bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub active_dim: usize,
    /// Variance of `a(t)` over the supplied time grid for the given state.
    pub state_time_variance: f64,
    /// Infinite-time variance for the given state, `sum_{k != k'} P_k P_k' |A_kk'|^2`.
    pub state_time_variance_exact: f64,
    /// RPSE average of the infinite-time variance.
    pub ensemble_time_variance: f64,
    /// RPSE variance of the time average `sum_k P_k A_kk`.
    pub typicality_variance: f64,
    /// `ensemble_time_variance + typicality_variance`.
    pub lhs: f64,
    /// Monte-Carlo estimate of `lhs` from independent draws.
    pub lhs_monte_carlo: f64,
    pub draws: usize,
    /// `[Tr(a^2 <sigma>) - Tr(a <sigma>)^2] / (N + 1)`.
    pub bound: f64,
    pub passes: bool,
}

/// Evaluates the fluctuation inequality for subsystem observable `a`.
pub fn fluctuation_bound_check(
    model: &ActiveModel,
    sub: &Subsystem,
    state: &PureState,
    a: &CMatrix,
    times: &[f64],
    seeds: &SeedTree,
    draws: usize,
) -> Result<FluctuationReport> {
    let m = sub.levels();
    if a.rows() != m || a.cols() != m {
        return Err(Error::InvalidArgument(format!("observable must be {m}x{m}")));
    }
    if a.hermitian_defect() > 1e-12 {
        return Err(Error::InvalidArgument("observable must be Hermitian".into()));
    }
    let n = model.dim();
    let nf = n as f64;

    // A = U^H (a (x) 1) U on the active block
    let full = model.spectrum().vectors();
    let u = CMatrix::from_fn(full.rows(), n, |l, k| full[(l, k)]);
    let big_a = u.adjoint_mul(&sub.lift(a, &u));

    let series: Vec<f64> = times.iter().map(|&t| rdm_at(model, sub, state, t).expectation(a)).collect();
    let state_time_variance = variance(&series);

    let offdiag_weighted = |p: &[f64]| {
        let mut acc = 0.0;
        for k in 0..n {
            for kp in 0..n {
                if k != kp {
                    acc += p[k] * p[kp] * big_a[(k, kp)].norm_sqr();
                }
            }
        }
        acc
    };
    let state_time_variance_exact = offdiag_weighted(&state.populations);

    let mut offdiag = 0.0;
    for k in 0..n {
        for kp in 0..n {
            if k != kp {
                offdiag += big_a[(k, kp)].norm_sqr();
            }
        }
    }
    let ensemble_time_variance = offdiag / (nf * (nf + 1.0));
    let diag: Vec<f64> = (0..n).map(|k| big_a[(k, k)].re).collect();
    let mean_diag = diag.iter().sum::<f64>() / nf;
    let mean_sq_diag = diag.iter().map(|x| x * x).sum::<f64>() / nf;
    let typicality_variance = (mean_sq_diag - mean_diag * mean_diag) / (nf + 1.0);
    let lhs = ensemble_time_variance + typicality_variance;

    let mut time_vars = Vec::with_capacity(draws);
    let mut averages = Vec::with_capacity(draws);
    for i in 0..draws {
        let (p, _) = sample_rpse(n, &mut seeds.rng(&format!("fluctuation/{i}")))?;
        time_vars.push(offdiag_weighted(&p));
        averages.push(p.iter().zip(&diag).map(|(p, d)| p * d).sum::<f64>());
    }
    let lhs_monte_carlo =
        if draws > 1 { time_vars.iter().sum::<f64>() / draws as f64 + variance(&averages) } else { f64::NAN };

    let avg = EigenRdms::new(model, sub).ensemble_average().to_matrix();
    let a2 = CMatrix::from_fn(m, m, |i, j| (0..m).map(|k| a[(i, k)] * a[(k, j)]).sum());
    let tr = |x: &CMatrix| -> f64 { (0..m).map(|i| (0..m).map(|k| x[(i, k)] * avg[(k, i)]).sum::<Complex64>().re).sum() };
    let bound = (tr(&a2) - tr(a).powi(2)) / (nf + 1.0);

    Ok(FluctuationReport {
        active_dim: n,
        state_time_variance,
        state_time_variance_exact,
        ensemble_time_variance,
        typicality_variance,
        lhs,
        lhs_monte_carlo,
        draws,
        bound,
        passes: lhs <= bound * (1.0 + 1e-12) + 1e-15,
    })
}

fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64
}

/// Writes `(tag, m, m', re, im)` rows for a sequence of density matrices.
pub fn write_rdm_csv(path: &Path, header: &CsvHeader, rdms: &[ReducedDensityMatrix]) -> Result<()> {
    let rows = rdms.iter().flat_map(|r| {
        (0..r.levels()).flat_map(move |m| {
            (0..r.levels()).map(move |mp| {
                let z = r.get(m, mp);
                vec![r.tag().to_string(), m.to_string(), mp.to_string(), z.re.to_string(), z.im.to_string()]
            })
        })
    });
    io::write_csv(path, header, &["tau", "m", "m_prime", "re", "im"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::many_body::{assemble_hamiltonian, build_product_basis, diagonalize_full, Cutoff};
    use crate::potential::PotentialSet;
    use std::sync::Arc;

    fn model(n: usize, cap: usize, kept: usize, sigma: f64) -> ActiveModel {
        let rotor = Arc::new(RotorSpectrum::solve(30.0, 6).unwrap().with_kept_levels(kept).unwrap());
        let basis = build_product_basis(n, rotor, Cutoff::Polyad(cap)).unwrap();
        let pots = PotentialSet::generate(n, 8, sigma, &SeedTree::new(12)).unwrap();
        let h = assemble_hamiltonian(&basis, &pots).unwrap();
        let spec = Arc::new(diagonalize_full(basis, &h).unwrap());
        let dim = spec.dim();
        ActiveModel::with_dim(spec, dim).unwrap()
    }

    #[test]
    fn single_product_state_is_pure_level() {
        let m = model(2, 2, 3, 0.0);
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let target = m.basis().position(&[2, 0]).unwrap();
        let mut d = vec![Complex64::new(0.0, 0.0); m.basis().len()];
        d[target] = Complex64::new(0.0, 1.0);
        let r = sub.partial_trace(&d, RdmTag::Time(0.0));
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == 2 && b == 2 { 1.0 } else { 0.0 };
                assert_eq!(r.get(a, b), Complex64::new(expect, 0.0));
            }
        }
    }

    #[test]
    fn brute_force_partial_trace() {
        let m = model(2, 2, 3, 1.0);
        let state = PureState::rpse(&m, &SeedTree::new(1), "rpse/0").unwrap();
        let d = state.product_amplitudes_at(&m, 0.3);
        for index in 0..2 {
            let sub = Subsystem::new(m.basis(), index, Some(3)).unwrap();
            let r = sub.partial_trace(&d, RdmTag::Time(0.3));
            // embed into the full 3x3 product space and trace out the other rotor
            let mut full = [[Complex64::new(0.0, 0.0); 9]; 9];
            let emb = |l: usize| {
                let lv = m.basis().levels(l);
                lv[0] as usize * 3 + lv[1] as usize
            };
            for x in 0..d.len() {
                for y in 0..d.len() {
                    full[emb(x)][emb(y)] = d[x] * d[y].conj();
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for e in 0..3 {
                        let (i, j) = if index == 0 { (a * 3 + e, b * 3 + e) } else { (e * 3 + a, e * 3 + b) };
                        acc += full[i][j];
                    }
                    assert!((acc - r.get(a, b)).norm() < 1e-12);
                }
            }
            assert!(r.check().unwrap().passes());
        }
    }

    #[test]
    fn equilibrium_ignores_phases() {
        let m = model(2, 3, 4, 1.0);
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let a = PureState::rpse(&m, &SeedTree::new(1), "rpse/0").unwrap();
        let mut b = PureState::rpse(&m, &SeedTree::new(2), "rpse/0").unwrap();
        b.populations = a.populations.clone();
        assert_ne!(a.phases, b.phases);
        assert_eq!(equilibrium_rdm(&m, &sub, &a), equilibrium_rdm(&m, &sub, &b));
    }

    #[test]
    fn time_average_approaches_equilibrium() {
        let m = model(2, 3, 4, 1.0);
        assert!(m.spectrum().eigenvalues_distinct());
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let s = PureState::rpse(&m, &SeedTree::new(7), "rpse/0").unwrap();
        let eq = equilibrium_rdm(&m, &sub, &s);
        let dt = 0.01;
        let mut distances = Vec::new();
        let mut acc: Vec<ReducedDensityMatrix> = Vec::new();
        let mut window = 200;
        for i in 0..6400 {
            acc.push(rdm_at(&m, &sub, &s, i as f64 * dt));
            if acc.len() == window {
                let w = vec![1.0 / window as f64; window];
                distances.push(ReducedDensityMatrix::weighted_sum(&acc, &w, RdmTag::Equilibrium).frobenius_distance(&eq));
                window *= 2;
            }
        }
        assert!(distances.last().unwrap() < &0.01, "{distances:?}");
        assert!(distances.last().unwrap() < &distances[0]);
    }

    #[test]
    fn ensemble_average_matches_monte_carlo() {
        let m = model(2, 3, 4, 1.0);
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let eig = EigenRdms::new(&m, &sub);
        let avg = eig.ensemble_average();
        let draws = 200;
        let samples: Vec<ReducedDensityMatrix> = (0..draws)
            .map(|i| {
                let (p, _) = sample_rpse(m.dim(), &mut SeedTree::new(3).rng(&format!("rpse/{i}"))).unwrap();
                eig.equilibrium(&p)
            })
            .collect();
        let lv = sub.levels();
        for a in 0..lv {
            for b in 0..lv {
                let xs: Vec<Complex64> = samples.iter().map(|s| s.get(a, b)).collect();
                let mean: Complex64 = xs.iter().sum::<Complex64>() / draws as f64;
                let var = xs.iter().map(|x| (x - mean).norm_sqr()).sum::<f64>() / (draws - 1) as f64;
                let se = (var / draws as f64).sqrt();
                assert!((mean - avg.get(a, b)).norm() <= 3.0 * se + 1e-14, "({a},{b})");
            }
        }
        assert!(avg.check().unwrap().passes());
        let one = ActiveModel::with_dim(m.spectrum().clone(), 1).unwrap();
        assert_eq!(ensemble_average_rdm(&one, &sub), {
            let mut g = eig.get(0).clone();
            g.tag = RdmTag::EnsembleAverage;
            g
        });
    }

    #[test]
    fn canonical_form() {
        let rotor = RotorSpectrum::solve(300.0, 20).unwrap();
        let r = canonical_rdm(&rotor, 0.0376, 7).unwrap();
        let d = r.diagonal();
        for (x, y) in d.iter().zip([0.475, 0.250, 0.133, 0.0712, 0.0386, 0.0211, 0.0117]) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
        assert!((d[1] / d[0] - (-0.0376 * (rotor.energy(1) - rotor.energy(0))).exp()).abs() < 1e-15);
        let flat = canonical_rdm(&rotor, 1e-12, 5).unwrap();
        assert!(flat.diagonal().iter().all(|x| (x - 0.2).abs() < 1e-9));
        assert!(canonical_rdm(&rotor, 0.0, 5).is_err());
    }

    #[test]
    fn marginal_of_pure_level() {
        let rotor = RotorSpectrum::solve(300.0, 20).unwrap();
        let r = canonical_rdm(&rotor, 1e3, 3).unwrap();
        let (p, imag) = marginal(&r, &rotor, 10_000).unwrap();
        assert!(imag <= 1e-12);
        assert!((p.integral() - 1.0).abs() < 1e-8);
        for (q, v) in p.q.iter().zip(&p.density).step_by(97) {
            let phi = rotor.eval(0, *q).unwrap().0;
            assert!((v - phi.norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn window_observable_is_a_partial_identity() {
        let rotor = RotorSpectrum::solve(300.0, 20).unwrap();
        let whole = window_observable(&rotor, 5, 0.0, 2.0 * PI).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((whole[(i, j)] - expect).norm() < 1e-12);
            }
        }
        let w = window_observable(&rotor, 5, 2.5, 3.0).unwrap();
        assert!(w.hermitian_defect() < 1e-14);
        // <phi_0|chi|phi_0> against midpoint quadrature
        let steps = 20_000;
        let h = 0.5 / steps as f64;
        let quad: f64 = (0..steps).map(|i| rotor.eval(0, 2.5 + (i as f64 + 0.5) * h).unwrap().0.norm_sqr() * h).sum();
        assert!((w[(0, 0)].re - quad).abs() < 1e-8);
    }

    #[test]
    fn two_level_full_space_bound() {
        assert_eq!(full_space_bound(&[0.0, 1.0], 2), 1.0 / 6.0);
    }

    #[test]
    fn identity_observable_has_no_fluctuations() {
        let m = model(2, 3, 4, 1.0);
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let s = PureState::rpse(&m, &SeedTree::new(7), "rpse/0").unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let r = fluctuation_bound_check(&m, &sub, &s, &CMatrix::identity(sub.levels()), &times, &SeedTree::new(1), 10)
            .unwrap();
        assert!(r.state_time_variance < 1e-28 && r.lhs.abs() < 1e-14 && r.bound.abs() < 1e-14);
        assert!(r.passes);
    }

    #[test]
    fn fluctuation_terms_agree_with_direct_evaluation() {
        let m = model(3, 2, 3, 1.0);
        let sub = Subsystem::new(m.basis(), 0, None).unwrap();
        let s = PureState::rpse(&m, &SeedTree::new(7), "rpse/0").unwrap();
        let a = level_projector(sub.levels(), 0).unwrap();
        let times: Vec<f64> = (0..40_000).map(|i| i as f64 * 0.0137).collect();
        let r = fluctuation_bound_check(&m, &sub, &s, &a, &times, &SeedTree::new(1), 4000).unwrap();
        assert!(r.passes, "{r:?}");
        assert!(r.lhs <= r.bound * (1.0 + 1e-12), "{r:?}");
        assert!((r.state_time_variance / r.state_time_variance_exact - 1.0).abs() < 0.05, "{r:?}");
        assert!((r.lhs_monte_carlo / r.lhs - 1.0).abs() < 0.1, "{r:?}");

        // a proper subspace makes the inequality strict
        let small = ActiveModel::with_dim(m.spectrum().clone(), 4).unwrap();
        let s = PureState::rpse(&small, &SeedTree::new(7), "rpse/0").unwrap();
        let r = fluctuation_bound_check(&small, &sub, &s, &a, &times[..100], &SeedTree::new(1), 10).unwrap();
        assert!(r.passes && r.lhs < r.bound - 1e-6, "{r:?}");
    }
}
