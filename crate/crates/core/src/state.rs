//! Random pure states on the active space and their exact time evolution.
//!
//! `c_k(t) = sqrt(P_k) exp(-i alpha_k(t))` with `alpha_k(t) = alpha_k(0) + 2 pi E_k t`;
//! product-basis amplitudes follow as `d = U c`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::many_body::{select_active_space, ActiveSpace, ManyBodySpectrum, ProductBasis};
use crate::seeds::SeedTree;
use crate::units::{self, PHASE_FACTOR};

/// The lowest `N` eigenstates of a spectrum, with the eigenvector block laid
/// out for fast products.
#[derive(Debug, Clone)]
pub struct ActiveModel {
    spectrum: Arc<ManyBodySpectrum>,
    space: ActiveSpace,
    /// `U[l, k]` split into parts, row-major `basis_len x N`.
    u_re: Vec<f64>,
    u_im: Vec<f64>,
}

impl ActiveModel {
    pub fn new(spectrum: Arc<ManyBodySpectrum>, e_max: f64) -> Result<Self> {
        let space = select_active_space(&spectrum, e_max)?;
        Ok(Self::with_space(spectrum, space))
    }

    /// Uses the first `dim` eigenstates regardless of an energy cutoff.
    pub fn with_dim(spectrum: Arc<ManyBodySpectrum>, dim: usize) -> Result<Self> {
        if dim == 0 || dim > spectrum.dim() {
            return Err(Error::InvalidArgument(format!("active dimension must be in 1..={}", spectrum.dim())));
        }
        let e_max = spectrum.energies().get(dim).copied().unwrap_or(f64::INFINITY);
        Ok(Self::with_space(spectrum, ActiveSpace { e_max, dim }))
    }

    fn with_space(spectrum: Arc<ManyBodySpectrum>, space: ActiveSpace) -> Self {
        let rows = spectrum.basis().len();
        let n = space.dim;
        let mut u_re = vec![0.0; rows * n];
        let mut u_im = vec![0.0; rows * n];
        let v = spectrum.vectors();
        for k in 0..n {
            for (l, z) in v.col(k).iter().enumerate() {
                u_re[l * n + k] = z.re;
                u_im[l * n + k] = z.im;
            }
        }
        Self { spectrum, space, u_re, u_im }
    }

    pub fn spectrum(&self) -> &Arc<ManyBodySpectrum> {
        &self.spectrum
    }

    pub fn basis(&self) -> &ProductBasis {
        self.spectrum.basis()
    }

    pub fn space(&self) -> ActiveSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn energies(&self) -> &[f64] {
        &self.spectrum.energies()[..self.space.dim]
    }

    /// `<l|E_k>`.
    pub fn vector_element(&self, l: usize, k: usize) -> Complex64 {
        let i = l * self.space.dim + k;
        Complex64::new(self.u_re[i], self.u_im[i])
    }

    /// Digest of the active energies and eigenvectors, tying state files to a spectrum.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.space.dim as u64).to_le_bytes());
        h.update((self.basis().len() as u64).to_le_bytes());
        for e in self.energies() {
            h.update(e.to_bits().to_le_bytes());
        }
        for (a, b) in self.u_re.iter().zip(&self.u_im) {
            h.update(a.to_bits().to_le_bytes());
            h.update(b.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `d = U c` into split buffers of length `basis_len`.
    pub fn product_amplitudes_into(&self, c: &[Complex64], d_re: &mut [f64], d_im: &mut [f64]) {
        let n = self.space.dim;
        debug_assert_eq!(c.len(), n);
        let c_re: Vec<f64> = c.iter().map(|z| z.re).collect();
        let c_im: Vec<f64> = c.iter().map(|z| z.im).collect();
        for l in 0..d_re.len() {
            let (ur, ui) = (&self.u_re[l * n..(l + 1) * n], &self.u_im[l * n..(l + 1) * n]);
            let (mut re, mut im) = (0.0, 0.0);
            for k in 0..n {
                re += ur[k] * c_re[k] - ui[k] * c_im[k];
                im += ur[k] * c_im[k] + ui[k] * c_re[k];
            }
            d_re[l] = re;
            d_im[l] = im;
        }
    }

    pub fn product_amplitudes(&self, c: &[Complex64]) -> Vec<Complex64> {
        let rows = self.basis().len();
        let (mut re, mut im) = (vec![0.0; rows], vec![0.0; rows]);
        self.product_amplitudes_into(c, &mut re, &mut im);
        re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect()
    }
}

/// Flat-simplex populations and uniform phases for an `n`-state space.
pub fn sample_rpse<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("active dimension must be at least 1".into()));
    }
    let mut p: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    let phases = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    Ok((p, phases))
}

/// Populations and initial phases of a pure state on the active space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PureState {
    pub active_hash: String,
    pub master_seed: Option<u64>,
    pub stream: Option<String>,
    pub populations: Vec<f64>,
    pub phases: Vec<f64>,
}

impl PureState {
    pub fn new(active_hash: impl Into<String>, populations: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if populations.is_empty() || populations.len() != phases.len() {
            return Err(Error::InvalidArgument("populations and phases must be non-empty and equally long".into()));
        }
        if populations.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument("populations must be non-negative".into()));
        }
        let total: f64 = populations.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("populations sum to {total}")));
        }
        Ok(Self { active_hash: active_hash.into(), master_seed: None, stream: None, populations, phases })
    }

    /// RPSE draw from the named stream of `seeds`.
    pub fn rpse(model: &ActiveModel, seeds: &SeedTree, stream: &str) -> Result<Self> {
        let (populations, phases) = sample_rpse(model.dim(), &mut seeds.rng(stream))?;
        Ok(Self {
            active_hash: model.hash(),
            master_seed: Some(seeds.master()),
            stream: Some(stream.to_string()),
            populations,
            phases,
        })
    }

    /// All weight on eigenstate `k`, zero phase.
    pub fn eigenstate(model: &ActiveModel, k: usize) -> Result<Self> {
        if k >= model.dim() {
            return Err(Error::LevelOutOfRange { level: k, available: model.dim() });
        }
        let mut p = vec![0.0; model.dim()];
        p[k] = 1.0;
        Self::new(model.hash(), p, vec![0.0; model.dim()])
    }

    pub fn dim(&self) -> usize {
        self.populations.len()
    }

    /// `alpha_k(t)`, wrapped to `[0, 2 pi)`.
    pub fn phases_at(&self, energies: &[f64], time: f64) -> Vec<f64> {
        self.phases.iter().zip(energies).map(|(&a, &e)| units::wrap_angle(a + PHASE_FACTOR * e * time)).collect()
    }

    pub fn coefficients_at(&self, energies: &[f64], time: f64) -> Vec<Complex64> {
        self.phases_at(energies, time)
            .into_iter()
            .zip(&self.populations)
            .map(|(a, &p)| Complex64::from_polar(p.sqrt(), -a))
            .collect()
    }

    /// The same state with its clock moved forward by `time`.
    pub fn advanced(&self, energies: &[f64], time: f64) -> Self {
        Self { phases: self.phases_at(energies, time), ..self.clone() }
    }

    pub fn product_amplitudes_at(&self, model: &ActiveModel, time: f64) -> Vec<Complex64> {
        model.product_amplitudes(&self.coefficients_at(model.energies(), time))
    }

    /// Fails unless the state was drawn for `model`.
    pub fn check_model(&self, model: &ActiveModel, path: &Path) -> Result<()> {
        if self.dim() != model.dim() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("state has {} populations, active space has {}", self.dim(), model.dim()),
            });
        }
        io::require_hash(path, &model.hash(), Some(&self.active_hash))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = io::read_json(path)?;
        Self::new(s.active_hash.clone(), s.populations.clone(), s.phases.clone())
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(s)
    }
}
