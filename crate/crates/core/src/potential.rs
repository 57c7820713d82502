//! Random periodic potentials built from white Gaussian node values and
//! smoothed into a truncated Fourier series.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};
use crate::seeds::SeedTree;

/// Which term of the random interaction a profile belongs to. Rotor indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PotentialKind {
    OneBody(usize),
    /// Acts on `q_i - q_j` with `i < j`.
    Pair(usize, usize),
}

impl PotentialKind {
    pub fn stream_name(&self) -> String {
        match self {
            Self::OneBody(i) => format!("one-body/{i}"),
            Self::Pair(i, j) => format!("pair/{i},{j}"),
        }
    }
}

impl fmt::Display for PotentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.stream_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomPotential {
    l_max: usize,
    sigma: f64,
    kind: PotentialKind,
    master_seed: Option<u64>,
    /// `components[l + l_max]`, with the zero component pinned to 0.
    components: Vec<Complex64>,
    /// Raw node draws `V_k`; absent for imported profiles.
    nodes: Option<Vec<f64>>,
}

/// Node angle `theta_k = 2 pi k / (2L + 1)`.
pub fn node_angle(k: usize, l_max: usize) -> f64 {
    2.0 * PI * k as f64 / (2 * l_max + 1) as f64
}

/// Draws one profile from a named stream of `seeds`.
pub fn generate_profile(l_max: usize, sigma: f64, seeds: &SeedTree, kind: PotentialKind) -> Result<RandomPotential> {
    let mut rng = seeds.rng(&kind.stream_name());
    let mut pot = generate_profile_with(l_max, sigma, &mut rng, kind)?;
    pot.master_seed = Some(seeds.master());
    Ok(pot)
}

pub fn generate_profile_with<R: Rng + ?Sized>(
    l_max: usize,
    sigma: f64,
    rng: &mut R,
    kind: PotentialKind,
) -> Result<RandomPotential> {
    if l_max < 1 {
        return Err(Error::InvalidArgument("L must be at least 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_V must be >= 0, got {sigma}")));
    }
    let count = 2 * l_max + 1;
    let nodes: Vec<f64> = (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        })
        .collect();

    let mut components = vec![Complex64::new(0.0, 0.0); count];
    for l in 1..=l_max {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &v) in nodes.iter().enumerate() {
            // reduce l*k modulo the node count before forming the angle
            let r = (l * k) % count;
            acc += v * Complex64::cis(-2.0 * PI * r as f64 / count as f64);
        }
        acc /= count as f64;
        components[l_max + l] = acc;
        components[l_max - l] = acc.conj();
    }
    Ok(RandomPotential { l_max, sigma, kind, master_seed: None, components, nodes: Some(nodes) })
}

impl RandomPotential {
    /// Profile from explicit components `V_l`, `l = -L..=L`. The conjugate
    /// symmetry and the zero mean are enforced from the `l > 0` half.
    pub fn from_components(kind: PotentialKind, sigma: f64, components: &[Complex64]) -> Result<Self> {
        if components.len() < 3 || components.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!("need 2L+1 >= 3 components, got {}", components.len())));
        }
        let l_max = components.len() / 2;
        let mut c = components.to_vec();
        c[l_max] = Complex64::new(0.0, 0.0);
        for l in 1..=l_max {
            c[l_max - l] = c[l_max + l].conj();
        }
        Ok(Self { l_max, sigma, kind, master_seed: None, components: c, nodes: None })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn master_seed(&self) -> Option<u64> {
        self.master_seed
    }

    pub fn nodes(&self) -> Option<&[f64]> {
        self.nodes.as_deref()
    }

    /// Fourier component `V_l`; zero outside `|l| <= L`.
    pub fn component(&self, l: i64) -> Complex64 {
        let idx = l + self.l_max as i64;
        if (0..self.components.len() as i64).contains(&idx) {
            self.components[idx as usize]
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    pub fn components(&self) -> &[Complex64] {
        &self.components
    }

    /// `V(theta)`, real by conjugate symmetry.
    pub fn eval(&self, theta: f64) -> f64 {
        let mut acc = 0.0;
        for l in 1..=self.l_max {
            acc += (self.components[self.l_max + l] * Complex64::cis(l as f64 * theta)).re;
        }
        2.0 * acc
    }

    /// Full complex sum over `-L..=L`, exposing the imaginary residue.
    pub fn eval_complex(&self, theta: f64) -> Complex64 {
        (0..self.components.len())
            .map(|idx| self.components[idx] * Complex64::cis((idx as i64 - self.l_max as i64) as f64 * theta))
            .sum()
    }

    pub fn write_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let mut header = header.clone().with("kind", self.kind).with("sigma_v", self.sigma);
        if let Some(seed) = self.master_seed {
            header = header.with("master_seed", seed);
        }
        let rows = self.components.iter().enumerate().map(|(idx, c)| {
            vec![(idx as i64 - self.l_max as i64).to_string(), c.re.to_string(), c.im.to_string()]
        });
        io::write_csv(path, &header, &["l", "re", "im"], rows)
    }

    pub fn read_csv(path: &Path, kind: PotentialKind) -> Result<Self> {
        let t = io::read_csv(path)?;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let sigma = t.meta("sigma_v").map(|s| io::parse_f64(path, s)).transpose()?.unwrap_or(f64::NAN);
        let mut entries = Vec::with_capacity(t.records.len());
        for rec in &t.records {
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 columns, got {}", rec.len())));
            }
            let l: i64 = rec[0].trim().parse().map_err(|_| bad(format!("bad index {:?}", &rec[0])))?;
            entries.push((l, Complex64::new(io::parse_f64(path, &rec[1])?, io::parse_f64(path, &rec[2])?)));
        }
        let l_max = entries.iter().map(|(l, _)| l.unsigned_abs() as usize).max().unwrap_or(0);
        let mut comps = vec![Complex64::new(0.0, 0.0); 2 * l_max + 1];
        for (l, c) in entries {
            comps[(l + l_max as i64) as usize] = c;
        }
        let mut pot = Self::from_components(kind, sigma, &comps)?;
        pot.master_seed = t.meta("master_seed").and_then(|s| s.parse().ok());
        Ok(pot)
    }
}

/// One profile per rotor and one per unordered rotor pair.
#[derive(Debug, Clone)]
pub struct PotentialSet {
    n: usize,
    one_body: Vec<RandomPotential>,
    /// Row-major over `i < j`.
    pairs: Vec<RandomPotential>,
}

impl PotentialSet {
    pub fn generate(n: usize, l_max: usize, sigma: f64, seeds: &SeedTree) -> Result<Self> {
        let one_body =
            (0..n).map(|i| generate_profile(l_max, sigma, seeds, PotentialKind::OneBody(i))).collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(generate_profile(l_max, sigma, seeds, PotentialKind::Pair(i, j))?);
            }
        }
        Ok(Self { n, one_body, pairs })
    }

    pub fn from_parts(n: usize, one_body: Vec<RandomPotential>, pairs: Vec<RandomPotential>) -> Result<Self> {
        if one_body.len() != n || pairs.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::PotentialMismatch(format!(
                "{n} rotors need {n} one-body and {} pair profiles, got {} and {}",
                n * n.saturating_sub(1) / 2,
                one_body.len(),
                pairs.len()
            )));
        }
        Ok(Self { n, one_body, pairs })
    }

    /// All-zero set.
    pub fn zero(n: usize, l_max: usize) -> Self {
        let zeros = vec![Complex64::new(0.0, 0.0); 2 * l_max.max(1) + 1];
        let one_body =
            (0..n).map(|i| RandomPotential::from_components(PotentialKind::OneBody(i), 0.0, &zeros).unwrap()).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(RandomPotential::from_components(PotentialKind::Pair(i, j), 0.0, &zeros).unwrap());
            }
        }
        Self { n, one_body, pairs }
    }

    pub fn rotor_count(&self) -> usize {
        self.n
    }

    pub fn one_body(&self, i: usize) -> &RandomPotential {
        &self.one_body[i]
    }

    /// Profile acting on `q_i - q_j`, `i < j`.
    pub fn pair(&self, i: usize, j: usize) -> &RandomPotential {
        assert!(i < j && j < self.n);
        &self.pairs[pair_index(self.n, i, j)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RandomPotential> {
        self.one_body.iter().chain(self.pairs.iter())
    }
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    // rows 0..i hold (n-1) + (n-2) + ... + (n-i) pairs
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}
