//! Coupled-rotor Hamiltonian on the product basis of single-rotor eigenstates.
//!
//! Product states `|l> = |phi_{l_1}> ... |phi_{l_n}>` are kept when their
//! zero-order energy lies below a truncation cutoff (or their polyad number
//! `P = sum l_i` below a cap), ordered by ascending zero-order energy. The
//! random interaction is evaluated exactly within the truncated basis from
//! the single-rotor matrices `<phi_m| e^{isq} |phi_m'>`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, EighCheck};
use crate::potential::{PotentialSet, RandomPotential};
use crate::rotor::RotorSpectrum;
use crate::seeds::SeedTree;

/// Criterion selecting product states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    /// Keep `E_l^(0) < cutoff`.
    Energy(f64),
    /// Keep `P(l) <= cap`.
    Polyad(usize),
}

#[derive(Debug, Clone)]
pub struct ProductBasis {
    rotor: Arc<RotorSpectrum>,
    n: usize,
    /// `n` level indices per state, flattened.
    levels: Vec<u8>,
    energies: Vec<f64>,
    polyads: Vec<usize>,
}

pub fn build_product_basis(n: usize, rotor: Arc<RotorSpectrum>, cutoff: Cutoff) -> Result<ProductBasis> {
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one rotor".into()));
    }
    let kept = rotor.kept_levels();
    if kept > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("at most 255 kept levels, got {kept}")));
    }
    let eps = &rotor.energies()[..kept];

    let mut states: Vec<(f64, Vec<u8>)> = Vec::new();
    let mut current = vec![0u8; n];
    enumerate(eps, cutoff, 0, 0.0, 0, &mut current, &mut states);
    if states.is_empty() {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff:?} admits no product state")));
    }
    states.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let mut levels = Vec::with_capacity(states.len() * n);
    let mut energies = Vec::with_capacity(states.len());
    let mut polyads = Vec::with_capacity(states.len());
    for (e, l) in states {
        polyads.push(l.iter().map(|&x| x as usize).sum());
        energies.push(e);
        levels.extend_from_slice(&l);
    }
    Ok(ProductBasis { rotor, n, levels, energies, polyads })
}

fn enumerate(
    eps: &[f64],
    cutoff: Cutoff,
    pos: usize,
    partial: f64,
    partial_p: usize,
    current: &mut Vec<u8>,
    out: &mut Vec<(f64, Vec<u8>)>,
) {
    let n = current.len();
    if pos == n {
        let e = zero_order_energy(eps, current);
        let keep = match cutoff {
            Cutoff::Energy(c) => e < c,
            Cutoff::Polyad(cap) => partial_p <= cap,
        };
        if keep {
            out.push((e, current.clone()));
        }
        return;
    }
    let remaining = (n - pos - 1) as f64;
    for (m, &em) in eps.iter().enumerate() {
        let admissible = match cutoff {
            Cutoff::Energy(c) => partial + em + remaining * eps[0] < c,
            Cutoff::Polyad(cap) => partial_p + m <= cap,
        };
        if !admissible {
            // levels ascend, so every later m fails too
            break;
        }
        current[pos] = m as u8;
        enumerate(eps, cutoff, pos + 1, partial + em, partial_p + m, current, out);
    }
}

/// Sum of level energies taken in a canonical order, so permuted tuples get
/// bit-identical energies.
fn zero_order_energy(eps: &[f64], levels: &[u8]) -> f64 {
    let mut sorted = levels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().map(|&m| eps[m as usize]).sum()
}

impl ProductBasis {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn rotor_count(&self) -> usize {
        self.n
    }

    pub fn rotor(&self) -> &Arc<RotorSpectrum> {
        &self.rotor
    }

    pub fn levels(&self, idx: usize) -> &[u8] {
        &self.levels[idx * self.n..(idx + 1) * self.n]
    }

    pub fn energy(&self, idx: usize) -> f64 {
        self.energies[idx]
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn polyad(&self, idx: usize) -> usize {
        self.polyads[idx]
    }

    pub fn max_polyad(&self) -> usize {
        self.polyads.iter().copied().max().unwrap_or(0)
    }

    /// Highest single-rotor level appearing in any state, plus one.
    pub fn levels_used(&self) -> usize {
        self.levels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn position(&self, levels: &[u8]) -> Option<usize> {
        (0..self.len()).find(|&i| self.levels(i) == levels)
    }

    /// `(P, count, cumulative count)` for every polyad present.
    pub fn polyad_census(&self) -> Vec<(usize, usize, usize)> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &p in &self.polyads {
            *counts.entry(p).or_default() += 1;
        }
        let mut cumulative = 0;
        counts
            .into_iter()
            .map(|(p, c)| {
                cumulative += c;
                (p, c, cumulative)
            })
            .collect()
    }
}

/// Per-rotor matrices of the random interaction on the kept single-rotor levels.
struct InteractionTables {
    kept: usize,
    /// `one_body[i]`, row-major `kept x kept`.
    one_body: Vec<Vec<Complex64>>,
    /// `pairs[(i, j)]` for `i < j`, indexed `[(a * kept + b) * kept^2 + (a' * kept + b')]`.
    pairs: Vec<Vec<Complex64>>,
    n: usize,
}

impl InteractionTables {
    fn new(rotor: &RotorSpectrum, pots: &PotentialSet) -> Self {
        let kept = rotor.kept_levels();
        let n = pots.rotor_count();
        let max_l = pots.iter().map(RandomPotential::l_max).max().unwrap_or(0) as i64;
        let reach = max_l.min(2 * rotor.basis().j_max() as i64);
        let shifts: Vec<(i64, Vec<Complex64>)> = (-reach..=reach).map(|s| (s, rotor.shift_matrix(s))).collect();
        let shift = |s: i64| &shifts[(s + reach) as usize].1;

        let one_body = (0..n)
            .map(|i| {
                let pot = pots.one_body(i);
                let mut a = vec![Complex64::new(0.0, 0.0); kept * kept];
                for &(s, ref m) in &shifts {
                    let v = pot.component(s);
                    if v.norm() == 0.0 {
                        continue;
                    }
                    for (x, y) in a.iter_mut().zip(m) {
                        *x += v * y;
                    }
                }
                a
            })
            .collect();

        let k2 = kept * kept;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let pot = pots.pair(i, j);
                let mut b = vec![Complex64::new(0.0, 0.0); k2 * k2];
                for s in -reach..=reach {
                    let v = pot.component(s);
                    if v.norm() == 0.0 {
                        continue;
                    }
                    // e^{is(q_i - q_j)} = e^{is q_i} e^{-is q_j}
                    let (mi, mj) = (shift(s), shift(-s));
                    for a in 0..kept {
                        for ap in 0..kept {
                            let va = v * mi[a * kept + ap];
                            if va.norm() == 0.0 {
                                continue;
                            }
                            for bb in 0..kept {
                                let row = (a * kept + bb) * k2;
                                for bp in 0..kept {
                                    b[row + ap * kept + bp] += va * mj[bb * kept + bp];
                                }
                            }
                        }
                    }
                }
                pairs.push(b);
            }
        }
        Self { kept, one_body, pairs, n }
    }

    fn pair(&self, i: usize, j: usize, a: u8, b: u8, ap: u8, bp: u8) -> Complex64 {
        let k = self.kept;
        let idx = i * (2 * self.n - i - 1) / 2 + (j - i - 1);
        self.pairs[idx][(a as usize * k + b as usize) * k * k + ap as usize * k + bp as usize]
    }

    fn one(&self, i: usize, a: u8, ap: u8) -> Complex64 {
        self.one_body[i][a as usize * self.kept + ap as usize]
    }

    fn element(&self, l: &[u8], lp: &[u8], zero_order: f64) -> Complex64 {
        let n = self.n;
        let mut diff = [0usize; 2];
        let mut nd = 0;
        for i in 0..n {
            if l[i] != lp[i] {
                if nd == 2 {
                    return Complex64::new(0.0, 0.0);
                }
                diff[nd] = i;
                nd += 1;
            }
        }
        match nd {
            0 => {
                let mut acc = Complex64::new(zero_order, 0.0);
                for i in 0..n {
                    acc += self.one(i, l[i], l[i]);
                    for j in i + 1..n {
                        acc += self.pair(i, j, l[i], l[j], l[i], l[j]);
                    }
                }
                acc
            }
            1 => {
                let i = diff[0];
                let mut acc = self.one(i, l[i], lp[i]);
                for j in 0..n {
                    if j < i {
                        acc += self.pair(j, i, l[j], l[i], l[j], lp[i]);
                    } else if j > i {
                        acc += self.pair(i, j, l[i], l[j], lp[i], l[j]);
                    }
                }
                acc
            }
            _ => {
                let (i, j) = (diff[0], diff[1]);
                self.pair(i, j, l[i], l[j], lp[i], lp[j])
            }
        }
    }
}

/// Matrix of `H^(0) + V^(r)` over `basis`.
pub fn assemble_hamiltonian(basis: &ProductBasis, pots: &PotentialSet) -> Result<CMatrix> {
    if pots.rotor_count() != basis.rotor_count() {
        return Err(Error::PotentialMismatch(format!(
            "basis has {} rotors, potential set has {}",
            basis.rotor_count(),
            pots.rotor_count()
        )));
    }
    let tables = InteractionTables::new(basis.rotor(), pots);
    let dim = basis.len();
    let upper: Vec<Vec<Complex64>> = (0..dim)
        .into_par_iter()
        .map(|c| {
            let lc = basis.levels(c);
            (0..=c)
                .map(|r| {
                    let e0 = if r == c { basis.energy(c) } else { 0.0 };
                    tables.element(basis.levels(r), lc, e0)
                })
                .collect()
        })
        .collect();
    let mut h = CMatrix::zeros(dim, dim);
    for (c, col) in upper.into_iter().enumerate() {
        for (r, v) in col.into_iter().enumerate() {
            if r == c {
                h[(r, c)] = Complex64::new(v.re, 0.0);
            } else {
                h[(r, c)] = v;
                h[(c, r)] = v.conj();
            }
        }
    }
    Ok(h)
}

/// Eigenpairs of the truncated coupled Hamiltonian.
#[derive(Debug, Clone)]
pub struct ManyBodySpectrum {
    basis: ProductBasis,
    energies: Vec<f64>,
    /// Column `k` holds `<l|E_k>`.
    vectors: CMatrix,
    check: EighCheck,
    min_gap: f64,
}

/// Eigenvalues closer than this are treated as coincident.
pub const DISTINCTNESS_TOLERANCE: f64 = 1e-10;

pub fn diagonalize_full(basis: ProductBasis, h: &CMatrix) -> Result<ManyBodySpectrum> {
    if h.rows() != basis.len() {
        return Err(Error::InvalidArgument(format!(
            "Hamiltonian dimension {} does not match basis size {}",
            h.rows(),
            basis.len()
        )));
    }
    let eig = linalg::eigh(h)?;
    let check = linalg::verify_eigh(h, &eig);
    ManyBodySpectrum::from_parts(basis, eig.values, eig.vectors, check)
}

impl ManyBodySpectrum {
    /// Reassembles a spectrum, e.g. from a cache, re-checking the stored verification figures.
    pub fn from_parts(basis: ProductBasis, energies: Vec<f64>, vectors: CMatrix, check: EighCheck) -> Result<Self> {
        let dim = basis.len();
        if energies.len() != dim || vectors.rows() != dim || vectors.cols() != dim {
            return Err(Error::InvalidArgument("spectrum shape does not match basis".into()));
        }
        if check.max_residual > 1e-8 || check.max_orthogonality_defect > 1e-10 {
            return Err(Error::EigenVerification {
                dim,
                residual: check.max_residual,
                orthogonality: check.max_orthogonality_defect,
            });
        }
        let min_gap = energies.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        Ok(Self { basis, energies, vectors, check, min_gap })
    }

    pub fn basis(&self) -> &ProductBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn vectors(&self) -> &CMatrix {
        &self.vectors
    }

    pub fn check(&self) -> EighCheck {
        self.check
    }

    /// Smallest adjacent eigenvalue gap.
    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }

    /// Whether all eigenvalues are pairwise distinct, the proxy used for rational independence.
    pub fn eigenvalues_distinct(&self) -> bool {
        self.min_gap > DISTINCTNESS_TOLERANCE
    }

    /// Smallest adjacent gap between eigenstates assigned to the same polyad.
    pub fn min_gap_within_polyads(&self) -> f64 {
        let labels = self.eigen_polyads();
        let mut by_p: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (k, &p) in labels.iter().enumerate() {
            by_p.entry(p).or_default().push(self.energies[k]);
        }
        by_p.values()
            .flat_map(|v| v.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    /// Polyad carrying the largest weight of each eigenvector.
    pub fn eigen_polyads(&self) -> Vec<usize> {
        let pmax = self.basis.max_polyad();
        (0..self.dim())
            .map(|k| {
                let mut w = vec![0.0; pmax + 1];
                for (l, z) in self.vectors.col(k).iter().enumerate() {
                    w[self.basis.polyad(l)] += z.norm_sqr();
                }
                w.iter().enumerate().fold((0, -1.0), |acc, (p, &x)| if x > acc.1 { (p, x) } else { acc }).0
            })
            .collect()
    }
}

/// Maximum relative eigenvalue shift per polyad between two truncations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyadShift {
    pub polyad: usize,
    pub compared: usize,
    pub max_relative_shift: f64,
}

/// Compares two spectra of the same model at different cutoffs. Eigenvalues
/// are grouped by dominant polyad and matched in ascending order within each group.
pub fn truncation_audit(small: &ManyBodySpectrum, large: &ManyBodySpectrum) -> Vec<PolyadShift> {
    let group = |s: &ManyBodySpectrum| {
        let mut g: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (k, p) in s.eigen_polyads().into_iter().enumerate() {
            g.entry(p).or_default().push(s.energies()[k]);
        }
        g
    };
    let (gs, gl) = (group(small), group(large));
    gs.iter()
        .map(|(&p, es)| {
            let el = gl.get(&p).map(Vec::as_slice).unwrap_or(&[]);
            let compared = es.len().min(el.len());
            let max_relative_shift = es
                .iter()
                .zip(el)
                .map(|(a, b)| if a == b { 0.0 } else { ((a - b) / b).abs() })
                .fold(0.0, f64::max);
            PolyadShift { polyad: p, compared, max_relative_shift }
        })
        .collect()
}

/// Span of the eigenstates below `e_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveSpace {
    pub e_max: f64,
    pub dim: usize,
}

pub fn select_active_space(spec: &ManyBodySpectrum, e_max: f64) -> Result<ActiveSpace> {
    let e = spec.energies();
    let (lowest, highest) = (e[0], e[e.len() - 1]);
    if let Some(index) = e.iter().position(|&x| (x - e_max).abs() <= DISTINCTNESS_TOLERANCE) {
        return Err(Error::ActiveSpaceCollision { e_max, eigenvalue: e[index], index });
    }
    let dim = e.iter().take_while(|&&x| x < e_max).count();
    if dim == 0 || dim == e.len() {
        return Err(Error::ActiveSpaceOutOfRange { e_max, lowest, highest });
    }
    Ok(ActiveSpace { e_max, dim })
}

/// Everything that determines the coupled Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub u: f64,
    pub j_max: usize,
    pub kept_levels: usize,
    pub sigma_v: f64,
    pub l_max: usize,
    pub master_seed: u64,
    pub cutoff: Cutoff,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            n: 6,
            u: 300.0,
            j_max: 20,
            kept_levels: 10,
            sigma_v: 1.0,
            l_max: 100,
            master_seed: 2024,
            cutoff: Cutoff::Energy(154.0),
        }
    }
}

impl ModelParams {
    pub fn rotor(&self) -> Result<Arc<RotorSpectrum>> {
        Ok(Arc::new(RotorSpectrum::solve(self.u, self.j_max)?.with_kept_levels(self.kept_levels)?))
    }

    pub fn potentials(&self) -> Result<PotentialSet> {
        PotentialSet::generate(self.n, self.l_max, self.sigma_v, &SeedTree::new(self.master_seed))
    }

    pub fn basis(&self) -> Result<ProductBasis> {
        build_product_basis(self.n, self.rotor()?, self.cutoff)
    }

    /// Runs the whole pipeline: rotor, potentials, basis, assembly, diagonalization.
    pub fn build(&self) -> Result<ManyBodySpectrum> {
        let basis = self.basis()?;
        let pots = self.potentials()?;
        let h = assemble_hamiltonian(&basis, &pots)?;
        diagonalize_full(basis, &h)
    }
}
