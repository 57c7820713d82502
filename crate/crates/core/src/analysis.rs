//! Single-trajectory statistics: occupancy histograms, autocorrelation,
//! conditional distributions and distances between densities.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};

const TWO_PI: f64 = 2.0 * PI;

/// Bin of `q` among `bins` equal intervals of `[0, 2 pi)`.
pub fn bin_of(q: f64, bins: usize) -> usize {
    let b = (q.rem_euclid(TWO_PI) / TWO_PI * bins as f64) as usize;
    b.min(bins - 1)
}

/// Occupancy counts over equal intervals of `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        for &q in samples {
            counts[bin_of(q, bins)] += 1;
        }
        Ok(Self { counts, total: samples.len() as u64 })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_width(&self) -> f64 {
        TWO_PI / self.bins() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins()).map(|b| (b as f64 + 0.5) * self.bin_width()).collect()
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// Fractions divided by the bin width.
    pub fn density(&self) -> Vec<f64> {
        let w = self.bin_width();
        self.fractions().into_iter().map(|f| f / w).collect()
    }

    /// Cumulative fractions at the right edge of each bin, from integer counts.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / self.total as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let header = header.clone().with("samples", self.total);
        let rows = self
            .centers()
            .into_iter()
            .zip(self.density())
            .zip(&self.counts)
            .map(|((q, d), c)| vec![q.to_string(), d.to_string(), c.to_string()]);
        io::write_csv(path, &header, &["q", "w", "count"], rows)
    }
}

/// Largest difference between two cumulative distributions on a common grid.
pub fn cdf_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "grids differ");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Running sums of a density given on bins of width `dq`.
pub fn density_cdf(density: &[f64], dq: f64) -> Vec<f64> {
    let mut acc = 0.0;
    density
        .iter()
        .map(|p| {
            acc += p * dq;
            acc
        })
        .collect()
}

/// Histogram plus the half-versus-full convergence figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub histogram: Histogram,
    /// CDF sup-distance between the first-half and full-record histograms.
    pub half_record_distance: f64,
    pub converged: bool,
}

/// Threshold on [`HistogramReport::half_record_distance`].
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.02;

pub fn histogram_with_convergence(samples: &[f64], bins: usize, threshold: f64) -> Result<HistogramReport> {
    let full = Histogram::new(samples, bins)?;
    let half = Histogram::new(&samples[..samples.len().div_ceil(2)], bins)?;
    let half_record_distance = cdf_distance(&full.cdf(), &half.cdf());
    Ok(HistogramReport { histogram: full, half_record_distance, converged: half_record_distance <= threshold })
}

/// `(1/2) sum |p - w| dq` for densities on a common grid.
pub fn total_variation(p: &[f64], w: &[f64], dq: f64) -> Result<f64> {
    if p.len() != w.len() {
        return Err(Error::InvalidArgument(format!("grids differ: {} vs {} points", p.len(), w.len())));
    }
    Ok(0.5 * p.iter().zip(w).map(|(a, b)| (a - b).abs()).sum::<f64>() * dq)
}

/// Averages a density over groups of `factor` adjacent bins.
pub fn coarsen(density: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || density.len() % factor != 0 {
        return Err(Error::InvalidArgument(format!("{} bins do not split into groups of {factor}", density.len())));
    }
    Ok(density.chunks(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect())
}

/// Number of consecutive samples that jump by more than `pi`, i.e. wrap around the circle.
pub fn count_wraps(samples: &[f64]) -> usize {
    samples.windows(2).filter(|w| (w[1] - w[0]).abs() > PI).count()
}

/// Autocorrelation of a scalar record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
}

impl CorrelationCurve {
    pub fn g0(&self) -> f64 {
        self.values[0]
    }

    /// First lag with `|G| < fraction * G(0)`.
    pub fn first_crossing(&self, fraction: f64) -> Option<f64> {
        let g0 = self.g0();
        self.values.iter().position(|g| g.abs() < fraction * g0).map(|i| self.lags[i])
    }

    /// Lag after which `|G|` stays below `fraction * G(0)` for the rest of the curve.
    pub fn settling_time(&self, fraction: f64) -> Option<f64> {
        let g0 = self.g0();
        let last_above = self.values.iter().rposition(|g| g.abs() >= fraction * g0)?;
        self.lags.get(last_above + 1).copied()
    }

    /// Largest `|G(tau)| / G(0)` over lags `tau >= from`.
    pub fn max_relative_beyond(&self, from: f64) -> f64 {
        let g0 = self.g0();
        self.lags
            .iter()
            .zip(&self.values)
            .filter(|(l, _)| **l >= from)
            .map(|(_, g)| g.abs() / g0)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let rows = self.lags.iter().zip(&self.values).map(|(l, g)| vec![l.to_string(), g.to_string()]);
        io::write_csv(path, header, &["tau", "G"], rows)
    }
}

/// `G(k s) = (1/M) sum_j dQ_j dQ_{j + k s}` with `dQ` relative to the full-record mean,
/// `M = len - k s`, for `k = 0..=max_lag / s`, where `s = lag_stride` samples.
pub fn autocorrelation(samples: &[f64], interval: f64, max_lag: usize, lag_stride: usize) -> Result<CorrelationCurve> {
    if samples.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if lag_stride == 0 || max_lag >= samples.len() {
        return Err(Error::InvalidArgument(format!(
            "need lag stride >= 1 and max lag below the record length {} (got {max_lag})",
            samples.len()
        )));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let dq: Vec<f64> = samples.iter().map(|q| q - mean).collect();
    let mut lags = Vec::new();
    let mut values = Vec::new();
    for lag in (0..=max_lag).step_by(lag_stride) {
        let m = dq.len() - lag;
        let g = dq[..m].iter().zip(&dq[lag..]).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        lags.push(lag as f64 * interval);
        values.push(g);
    }
    Ok(CorrelationCurve { lags, values })
}

/// Empirical transition counts between coarse bins at a fixed lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditionals {
    pub lag: usize,
    pub source_bins: usize,
    pub target_bins: usize,
    /// Row-major `source_bins x target_bins`.
    pub counts: Vec<u64>,
    pub min_samples: u64,
}

impl Conditionals {
    pub fn row_total(&self, s: usize) -> u64 {
        self.row(s).iter().sum()
    }

    pub fn row(&self, s: usize) -> &[u64] {
        &self.counts[s * self.target_bins..(s + 1) * self.target_bins]
    }

    pub fn adequately_sampled(&self, s: usize) -> bool {
        self.row_total(s) >= self.min_samples
    }

    /// Conditional fractions of row `s`; `None` for an empty row.
    pub fn row_fractions(&self, s: usize) -> Option<Vec<f64>> {
        let total = self.row_total(s);
        (total > 0).then(|| self.row(s).iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Row-stochastic matrix with empty rows left at zero.
    pub fn kernel(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.counts.len()];
        for s in 0..self.source_bins {
            if let Some(f) = self.row_fractions(s) {
                k[s * self.target_bins..(s + 1) * self.target_bins].copy_from_slice(&f);
            }
        }
        k
    }

    /// CDF sup-distance of each adequately sampled row from `reference` fractions.
    pub fn distances_from(&self, reference: &[f64]) -> Vec<(usize, f64)> {
        let ref_cdf = running_sum(reference);
        (0..self.source_bins)
            .filter(|&s| self.adequately_sampled(s))
            .map(|s| (s, cdf_distance(&running_sum(&self.row_fractions(s).unwrap()), &ref_cdf)))
            .collect()
    }

    pub fn flagged_rows(&self) -> Vec<usize> {
        (0..self.source_bins).filter(|&s| !self.adequately_sampled(s)).collect()
    }
}

fn running_sum(x: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    x.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Distribution of `Q(t + lag)` given `Q(t)` in each source bin.
pub fn conditional_distribution(
    samples: &[f64],
    lag: usize,
    source_bins: usize,
    target_bins: usize,
    min_samples: u64,
) -> Result<Conditionals> {
    if lag >= samples.len() {
        return Err(Error::InvalidArgument(format!("lag {lag} exceeds record length {}", samples.len())));
    }
    if source_bins == 0 || target_bins == 0 {
        return Err(Error::InvalidArgument("bin counts must be positive".into()));
    }
    let mut counts = vec![0u64; source_bins * target_bins];
    for j in 0..samples.len() - lag {
        let s = bin_of(samples[j], source_bins);
        let t = bin_of(samples[j + lag], target_bins);
        counts[s * target_bins + t] += 1;
    }
    Ok(Conditionals { lag, source_bins, target_bins, counts, min_samples })
}

/// Chapman-Kolmogorov discrepancy at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChapmanKolmogorov {
    pub lag: usize,
    /// Max over adequately sampled rows of the CDF sup-distance between `K(2 lag)` and `K(lag)^2`.
    pub residual: f64,
    pub rows_compared: usize,
}

pub fn chapman_kolmogorov_check(samples: &[f64], lag: usize, bins: usize, min_samples: u64) -> Result<ChapmanKolmogorov> {
    let one = conditional_distribution(samples, lag, bins, bins, min_samples)?;
    let two = conditional_distribution(samples, 2 * lag, bins, bins, min_samples)?;
    let k = one.kernel();
    let mut residual = 0.0f64;
    let mut rows_compared = 0;
    for s in 0..bins {
        if !(one.adequately_sampled(s) && two.adequately_sampled(s)) {
            continue;
        }
        let mut composed = vec![0.0; bins];
        for mid in 0..bins {
            let w = k[s * bins + mid];
            if w == 0.0 {
                continue;
            }
            for t in 0..bins {
                composed[t] += w * k[mid * bins + t];
            }
        }
        let direct = two.row_fractions(s).unwrap();
        residual = residual.max(cdf_distance(&running_sum(&composed), &running_sum(&direct)));
        rows_compared += 1;
    }
    Ok(ChapmanKolmogorov { lag, residual, rows_compared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn frozen_record_fills_one_bin() {
        let h = Histogram::new(&vec![PI; 1000], 10_000).unwrap();
        let b = bin_of(PI, 10_000);
        assert_eq!(h.counts()[b], 1000);
        assert_eq!(h.counts().iter().sum::<u64>(), 1000);
        assert!((h.density().iter().sum::<f64>() * h.bin_width() - 1.0).abs() < 1e-12);
        assert_eq!(*h.cdf().last().unwrap(), 1.0);
    }

    #[test]
    fn uniform_samples_give_flat_histogram() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let n = 200_000;
        let bins = 100;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..TWO_PI)).collect();
        let h = Histogram::new(&xs, bins).unwrap();
        let p = 1.0 / bins as f64;
        let band = 4.0 * (n as f64 * p * (1.0 - p)).sqrt();
        for &c in h.counts() {
            assert!((c as f64 - n as f64 * p).abs() <= band, "count {c}");
        }
        let r = histogram_with_convergence(&xs, bins, DEFAULT_CONVERGENCE_THRESHOLD).unwrap();
        assert!(r.converged);
    }

    #[test]
    fn drifting_record_is_not_converged() {
        let xs: Vec<f64> = (0..10_000).map(|i| 1.0 + 4.0 * i as f64 / 10_000.0).collect();
        let r = histogram_with_convergence(&xs, 100, DEFAULT_CONVERGENCE_THRESHOLD).unwrap();
        assert!(!r.converged && r.half_record_distance > 0.2);
    }

    #[test]
    fn constant_signal_has_zero_correlation() {
        let c = autocorrelation(&vec![2.5; 500], 0.01, 100, 1).unwrap();
        assert!(c.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn white_noise_correlation() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 100_000;
        let v: f64 = 0.09;
        let xs: Vec<f64> = (0..n).map(|_| PI + v.sqrt() * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
        let c = autocorrelation(&xs, 0.01, 50, 1).unwrap();
        // sample variance error ~ v sqrt(2/n), lagged products ~ v / sqrt(n)
        assert!((c.g0() - v).abs() < 4.0 * v * (2.0 / n as f64).sqrt());
        for &g in &c.values[1..] {
            assert!(g.abs() < 4.0 * v / (n as f64).sqrt(), "{g}");
        }
        assert_eq!(c.lags[3], 0.03);
        assert_eq!(c.first_crossing(0.2), Some(0.01));
    }

    #[test]
    fn damped_oscillation_times() {
        // G(t) = cos(w t) exp(-t / 4) sampled every 0.01
        let lags: Vec<f64> = (0..3000).map(|i| i as f64 * 0.01).collect();
        let values = lags.iter().map(|t| (20.0 * t).cos() * (-t / 4.0).exp()).collect();
        let c = CorrelationCurve { lags, values };
        assert!(c.first_crossing(0.2).unwrap() < 0.1);
        let settle = c.settling_time(0.2).unwrap();
        assert!((settle - 4.0 * 5f64.ln()).abs() < 0.2, "{settle}");
        assert!(c.max_relative_beyond(10.0) < 0.2);
    }

    #[test]
    fn total_variation_cases() {
        let bins = 1000;
        let dq = TWO_PI / bins as f64;
        let uniform = vec![1.0 / TWO_PI; bins];
        let half: Vec<f64> = (0..bins).map(|i| if i < bins / 2 { 1.0 / PI } else { 0.0 }).collect();
        let other: Vec<f64> = (0..bins).map(|i| if i >= bins / 2 { 1.0 / PI } else { 0.0 }).collect();
        assert_eq!(total_variation(&uniform, &uniform, dq).unwrap(), 0.0);
        assert!((total_variation(&half, &other, dq).unwrap() - 1.0).abs() < 1e-12);
        assert!((total_variation(&uniform, &half, dq).unwrap() - 0.5).abs() < 1e-12);
        assert!(total_variation(&uniform, &half[..10], dq).is_err());
        let coarse = coarsen(&half, 10).unwrap();
        assert!((total_variation(&coarsen(&uniform, 10).unwrap(), &coarse, dq * 10.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wraps_are_counted() {
        assert_eq!(count_wraps(&[3.0, 3.1, 3.2]), 0);
        assert_eq!(count_wraps(&[6.2, 0.05, 6.25, 1.0]), 3);
    }

    /// Chain on 4 states placed at bin centres of a 4-bin grid.
    fn markov_chain(steps: usize, seed: u64) -> (Vec<f64>, [[f64; 4]; 4]) {
        let k = [[0.7, 0.2, 0.1, 0.0], [0.1, 0.6, 0.2, 0.1], [0.0, 0.3, 0.5, 0.2], [0.2, 0.0, 0.3, 0.5]];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = 0usize;
        let mut xs = Vec::with_capacity(steps);
        for _ in 0..steps {
            xs.push((s as f64 + 0.5) * TWO_PI / 4.0);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (t, p) in k[s].iter().enumerate() {
                acc += p;
                if u < acc {
                    s = t;
                    break;
                }
            }
        }
        (xs, k)
    }

    #[test]
    fn recovers_markov_kernel() {
        let (xs, k) = markov_chain(200_000, 3);
        let c = conditional_distribution(&xs, 1, 4, 4, 100).unwrap();
        for s in 0..4 {
            let n = c.row_total(s) as f64;
            let f = c.row_fractions(s).unwrap();
            for t in 0..4 {
                let p = k[s][t];
                let se = (p * (1.0 - p) / n).sqrt();
                assert!((f[t] - p).abs() <= 4.0 * se + 1e-12, "({s},{t}) {} vs {p}", f[t]);
            }
        }
        assert!(c.flagged_rows().is_empty());
    }

    #[test]
    fn zero_lag_conditionals_are_diagonal() {
        let (xs, _) = markov_chain(10_000, 4);
        let c = conditional_distribution(&xs, 0, 4, 4, 10).unwrap();
        for s in 0..4 {
            let f = c.row_fractions(s).unwrap();
            assert_eq!(f[s], 1.0);
        }
    }

    #[test]
    fn markov_chain_passes_chapman_kolmogorov() {
        let (xs, _) = markov_chain(200_000, 5);
        let ck = chapman_kolmogorov_check(&xs, 1, 4, 100).unwrap();
        assert_eq!(ck.rows_compared, 4);
        assert!(ck.residual < 0.01, "{}", ck.residual);
    }

    #[test]
    fn periodic_signal_fails_chapman_kolmogorov() {
        // a deterministic rotation through the bins is itself Markov
        let xs: Vec<f64> = (0..30_000).map(|i| ((i % 4) as f64 + 0.5) * TWO_PI / 4.0).collect();
        let ck = chapman_kolmogorov_check(&xs, 1, 4, 100).unwrap();
        assert_eq!(ck.residual, 0.0);
        // a coarse view of a period-2 orbit inside one bin pair is non-Markov
        let ys: Vec<f64> = (0..30_000)
            .map(|i| match i % 4 {
                0 => 0.3,
                1 => 0.4,
                2 => 3.5,
                _ => 0.35,
            })
            .collect();
        let ck = chapman_kolmogorov_check(&ys, 1, 2, 100).unwrap();
        assert!(ck.residual > 0.2, "{}", ck.residual);
    }

    #[test]
    fn mixing_conditionals_approach_unconditional() {
        let (xs, _) = markov_chain(200_000, 6);
        let uncond = Histogram::new(&xs, 4).unwrap().fractions();
        let c = conditional_distribution(&xs, 30, 4, 4, 100).unwrap();
        assert!(c.distances_from(&uncond).iter().all(|(_, d)| *d < 0.02));
    }
}
