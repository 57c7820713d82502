//! End-to-end commands driven by one [`ExperimentConfig`].
//!
//! Every command computes its results in memory first and writes files only
//! once nothing can fail any more, so an error leaves no partial outputs.
//! Wall-clock figures go to `timing.json` alone; all other files are
//! bit-reproducible for a fixed config hash.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, ChapmanKolmogorov, CorrelationCurve, Histogram};
use crate::bohm::{integrate, BohmTrajectory, PilotWave, TrajectoryDiagnostics};
use crate::config::{per_record, ExperimentConfig};
use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};
use crate::linalg::{CMatrix, EighCheck};
use crate::many_body::{truncation_audit, ManyBodySpectrum, PolyadShift, ProductBasis};
use crate::potential::{PotentialKind, PotentialSet};
use crate::reduced::{
    canonical_rdm, equilibrium_rdm, fluctuation_bound_check, level_projector, marginal, rdm_at, window_observable,
    FluctuationReport, RdmCheck, ReducedDensityMatrix, Subsystem,
};
use crate::seeds::SeedTree;
use crate::state::{ActiveModel, PureState};

/// One named invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of a command: its checks and the files it wrote.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl Report {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self { command: command.into(), config_hash: cfg.hash(), ..Self::default() }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn merge(&mut self, other: Report) {
        self.checks.extend(other.checks);
        self.files.extend(other.files);
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Default)]
struct Timing {
    stages: Vec<(String, f64)>,
}

impl Timing {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push((stage.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let map: serde_json::Map<String, serde_json::Value> =
            self.stages.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        io::write_json(path, &map)
    }
}

fn header(cfg: &ExperimentConfig) -> CsvHeader {
    CsvHeader::new(cfg.hash())
}

// ---------------------------------------------------------------- spectrum cache

const CACHE_MAGIC: &[u8; 8] = b"RBSPEC01";

fn write_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Binary cache: magic, key, dimension, energies, column-major eigenvectors, verification figures.
pub fn write_spectrum_cache(path: &Path, key: &str, spec: &ManyBodySpectrum) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(key.len() as u64).to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    w.write_all(&(spec.dim() as u64).to_le_bytes())?;
    write_f64s(&mut w, spec.energies().iter().copied())?;
    write_f64s(&mut w, spec.vectors().as_slice().iter().flat_map(|z| [z.re, z.im]))?;
    let check = spec.check();
    write_f64s(&mut w, [check.max_residual, check.max_orthogonality_defect])?;
    w.flush()?;
    Ok(())
}

/// Reads a cache written for `key`; `Ok(None)` when the file belongs to another key.
pub fn read_spectrum_cache(path: &Path, key: &str, basis: ProductBasis) -> Result<Option<ManyBodySpectrum>> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated cache"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(bad("not a spectrum cache"));
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let key_len = u64_at(take(8)?) as usize;
    if take(key_len)? != key.as_bytes() {
        return Ok(None);
    }
    let dim = u64_at(take(8)?) as usize;
    if dim != basis.len() {
        return Err(bad("cache dimension does not match the basis"));
    }
    let mut f64s = |n: usize| -> Result<Vec<f64>> {
        let raw = take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let energies = f64s(dim)?;
    let flat = f64s(2 * dim * dim)?;
    let check = f64s(2)?;
    let data = flat.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
    let vectors = CMatrix::from_col_major(dim, dim, data);
    let check = EighCheck { max_residual: check[0], max_orthogonality_defect: check[1] };
    ManyBodySpectrum::from_parts(basis, energies, vectors, check).map(Some)
}

/// Loads the spectrum at cutoff `e_tr` from `cache`, rebuilding it on a key mismatch or when absent.
pub fn load_or_build_spectrum(cfg: &ExperimentConfig, e_tr: f64, cache: Option<&Path>) -> Result<Arc<ManyBodySpectrum>> {
    let params = cfg.model(e_tr);
    let key = cfg.spectrum_hash(e_tr);
    if let Some(path) = cache.filter(|p| p.exists()) {
        match read_spectrum_cache(path, &key, params.basis()?) {
            Ok(Some(spec)) => {
                log::info!("loaded spectrum cache {}", path.display());
                return Ok(Arc::new(spec));
            }
            Ok(None) => log::warn!("spectrum cache {} was built for another model; rebuilding", path.display()),
            Err(e) => log::warn!("spectrum cache {} unreadable ({e}); rebuilding", path.display()),
        }
    }
    let spec = params.build()?;
    if let Some(path) = cache {
        write_spectrum_cache(path, &key, &spec)?;
    }
    Ok(Arc::new(spec))
}

fn spectrum_cache_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir().join("spectrum").join(name)
}

/// Shared model objects of one config.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub model: ActiveModel,
    pub subsystem: Subsystem,
}

impl Context {
    /// Uses the spectrum cache under the output directory when `cached`.
    pub fn new(cfg: &ExperimentConfig, cached: bool) -> Result<Self> {
        cfg.validate()?;
        let path = spectrum_cache_path(cfg, "spectrum.bin");
        let spec = load_or_build_spectrum(cfg, cfg.e_tr, cached.then_some(path.as_path()))?;
        Self::from_spectrum(cfg, spec)
    }

    pub fn from_spectrum(cfg: &ExperimentConfig, spec: Arc<ManyBodySpectrum>) -> Result<Self> {
        let model = ActiveModel::new(spec, cfg.e_max)?;
        let subsystem = Subsystem::new(model.basis(), cfg.subsystem, cfg.subsystem_levels)?;
        Ok(Self { cfg: cfg.clone(), model, subsystem })
    }

    pub fn state(&self) -> Result<PureState> {
        PureState::rpse(&self.model, &SeedTree::new(self.cfg.master_seed), &self.cfg.state_stream)
    }
}

// ---------------------------------------------------------------- spectrum

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub polyad: usize,
    pub count: usize,
    pub cumulative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub config_hash: String,
    pub spectrum_hash: String,
    pub rotor_levels: Vec<f64>,
    pub harmonic_levels: Vec<f64>,
    pub basis_dim: usize,
    pub census: Vec<CensusRow>,
    pub max_residual: f64,
    pub max_orthogonality_defect: f64,
    pub min_gap: f64,
    pub active_dim: usize,
    /// Highest active and lowest inactive eigenvalue.
    pub active_edge: (f64, f64),
    pub active_min_gap: f64,
    pub audit: Option<Vec<PolyadShift>>,
    pub equilibrium_diagonal: Vec<f64>,
    pub canonical_diagonal: Vec<f64>,
    pub equilibrium_max_relative_offdiagonal: f64,
    pub equilibrium_check: RdmCheck,
}

/// Everything the spectrum command produces, before it is written.
pub struct SpectrumOutput {
    pub summary: SpectrumSummary,
    pub equilibrium: ReducedDensityMatrix,
    pub spectrum: Arc<ManyBodySpectrum>,
    pub audit_spectrum: Option<Arc<ManyBodySpectrum>>,
}

pub fn compute_spectrum(cfg: &ExperimentConfig, cached: bool) -> Result<SpectrumOutput> {
    cfg.validate()?;
    let cache = |name: &str| cached.then(|| spectrum_cache_path(cfg, name));
    let spectrum = load_or_build_spectrum(cfg, cfg.e_tr, cache("spectrum.bin").as_deref())?;
    let audit_spectrum = match cfg.e_tr_audit {
        Some(e) => Some(load_or_build_spectrum(cfg, e, cache("spectrum_audit.bin").as_deref())?),
        None => None,
    };
    let ctx = Context::from_spectrum(cfg, spectrum.clone())?;
    let rotor = spectrum.basis().rotor().clone();
    let state = ctx.state()?;
    let eq = equilibrium_rdm(&ctx.model, &ctx.subsystem, &state);
    let canonical = canonical_rdm(&rotor, cfg.canonical_beta, ctx.subsystem.levels())?;
    let energies = ctx.model.energies();
    let n_active = ctx.model.dim();
    let active_edge = (energies[n_active - 1], spectrum.energies()[n_active]);
    let active_min_gap = energies.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let check = spectrum.check();
    let summary = SpectrumSummary {
        config_hash: cfg.hash(),
        spectrum_hash: cfg.spectrum_hash(cfg.e_tr),
        rotor_levels: rotor.energies()[..rotor.kept_levels()].to_vec(),
        harmonic_levels: (0..rotor.kept_levels()).map(|m| rotor.harmonic_reference(m)).collect(),
        basis_dim: spectrum.dim(),
        census: spectrum
            .basis()
            .polyad_census()
            .into_iter()
            .map(|(polyad, count, cumulative)| CensusRow { polyad, count, cumulative })
            .collect(),
        max_residual: check.max_residual,
        max_orthogonality_defect: check.max_orthogonality_defect,
        min_gap: spectrum.min_gap(),
        active_dim: n_active,
        active_edge,
        active_min_gap,
        audit: audit_spectrum.as_ref().map(|big| truncation_audit(&spectrum, big)),
        equilibrium_diagonal: eq.diagonal(),
        canonical_diagonal: canonical.diagonal(),
        equilibrium_max_relative_offdiagonal: eq.max_relative_offdiagonal(),
        equilibrium_check: eq.check()?,
    };
    Ok(SpectrumOutput { summary, equilibrium: eq, spectrum, audit_spectrum })
}

fn write_eigenvalues(path: &Path, header: &CsvHeader, spec: &ManyBodySpectrum) -> Result<()> {
    let polyads = spec.eigen_polyads();
    let rows = spec.energies().iter().zip(polyads).enumerate().map(|(k, (e, p))| vec![k.to_string(), e.to_string(), p.to_string()]);
    io::write_csv(path, header, &["k", "energy", "polyad"], rows)
}

fn write_level_table(path: &Path, header: &CsvHeader, s: &SpectrumSummary) -> Result<()> {
    let rows = s
        .equilibrium_diagonal
        .iter()
        .zip(&s.canonical_diagonal)
        .enumerate()
        .map(|(m, (e, c))| vec![m.to_string(), e.to_string(), c.to_string()]);
    io::write_csv(path, header, &["m", "sigma_eq", "canonical"], rows)
}

fn spectrum_checks(report: &mut Report, s: &SpectrumSummary) {
    report.check(
        "eigendecomposition verified",
        s.max_residual <= 1e-8 && s.max_orthogonality_defect <= 1e-10,
        format!("residual {:e}, orthogonality {:e}", s.max_residual, s.max_orthogonality_defect),
    );
    report.check(
        "active eigenvalues distinct",
        s.active_min_gap > crate::many_body::DISTINCTNESS_TOLERANCE,
        format!("min gap {:e}", s.active_min_gap),
    );
    report.check(
        "equilibrium reduced density matrix valid",
        s.equilibrium_check.passes(),
        format!("{:?}", s.equilibrium_check),
    );
}

pub fn cmd_spectrum(cfg: &ExperimentConfig) -> Result<Report> {
    let mut timing = Timing::default();
    let out = timing.time("spectrum", || compute_spectrum(cfg, true))?;
    let dir = cfg.output_dir().join("spectrum");
    let h = header(cfg);
    let s = &out.summary;
    let mut report = Report::new("spectrum", cfg);
    spectrum_checks(&mut report, s);

    let rotor = out.spectrum.basis().rotor().clone();
    let files = [
        "rotor_levels.csv",
        "polyad_census.csv",
        "eigenvalues.csv",
        "level_populations.csv",
        "summary.json",
        "timing.json",
    ];
    rotor.write_levels_csv(&dir.join(files[0]), &h)?;
    let census = s.census.iter().map(|c| vec![c.polyad.to_string(), c.count.to_string(), c.cumulative.to_string()]);
    io::write_csv(&dir.join(files[1]), &h, &["polyad", "count", "cumulative"], census)?;
    write_eigenvalues(&dir.join(files[2]), &h, &out.spectrum)?;
    write_level_table(&dir.join(files[3]), &h.clone().with("beta", cfg.canonical_beta), s)?;
    io::write_json(&dir.join(files[4]), s)?;
    crate::reduced::write_rdm_csv(&dir.join("rdm_eq.csv"), &h, std::slice::from_ref(&out.equilibrium))?;
    report.files.extend(files[..5].iter().map(|f| dir.join(f)));
    report.files.push(dir.join("rdm_eq.csv"));
    if let (Some(audit), Some(big)) = (&s.audit, &out.audit_spectrum) {
        let rows = audit.iter().map(|a| vec![a.polyad.to_string(), a.compared.to_string(), a.max_relative_shift.to_string()]);
        io::write_csv(&dir.join("truncation_audit.csv"), &h, &["polyad", "compared", "max_relative_shift"], rows)?;
        write_eigenvalues(&dir.join("eigenvalues_audit.csv"), &h, big)?;
        report.files.push(dir.join("truncation_audit.csv"));
        report.files.push(dir.join("eigenvalues_audit.csv"));
    }
    timing.write(&dir.join(files[5]))?;
    Ok(report)
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub config_hash: String,
    pub state: PureState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub config_hash: String,
    pub trajectory: TrajectoryDiagnostics,
    /// `max |sum_l |d_l(t)|^2 - 1|` over the checked times.
    pub max_norm_defect: f64,
    pub wraps: Vec<usize>,
}

pub struct RunOutput {
    pub state: PureState,
    pub trajectory: BohmTrajectory,
    pub diagnostics: RunDiagnostics,
}

/// Largest deviation of `sum_l |d_l(t)|^2` from one over `times`.
pub fn norm_defect(model: &ActiveModel, state: &PureState, times: &[f64]) -> f64 {
    times
        .iter()
        .map(|&t| (state.product_amplitudes_at(model, t).iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn check_times(t_end: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count).map(|k| t_end * k as f64 / (count - 1) as f64).collect()
}

pub fn compute_run(ctx: &Context) -> Result<RunOutput> {
    let cfg = &ctx.cfg;
    let state = ctx.state()?;
    let mut pilot = PilotWave::with_guard(&ctx.model, &state, cfg.node_guard)?;
    let q0 = vec![cfg.initial_angle; cfg.n];
    let trajectory = integrate(&mut pilot, &q0, cfg.t_end, cfg.dt, cfg.record_stride)?;
    let wraps = (0..cfg.n).map(|i| analysis::count_wraps(&trajectory.coordinate(i))).collect();
    let diagnostics = RunDiagnostics {
        config_hash: cfg.hash(),
        trajectory: trajectory.diagnostics,
        max_norm_defect: norm_defect(&ctx.model, &state, &check_times(cfg.t_end, 11)),
        wraps,
    };
    Ok(RunOutput { state, trajectory, diagnostics })
}

fn run_checks(report: &mut Report, out: &RunOutput) {
    let d = &out.diagnostics;
    let total: f64 = out.state.populations.iter().sum();
    report.check("populations normalized", (total - 1.0).abs() <= 1e-12, format!("sum {total}"));
    report.check("amplitudes normalized", d.max_norm_defect <= 1e-12, format!("max defect {:e}", d.max_norm_defect));
    let t = &out.trajectory;
    let wrapped = (0..t.len()).all(|k| t.position(k).iter().all(|q| (0.0..2.0 * PI).contains(q)));
    report.check("trajectory wrapped and finite", wrapped, format!("{} records", t.len()));
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Report> {
    let mut timing = Timing::default();
    let ctx = timing.time("spectrum", || Context::new(cfg, true))?;
    let out = timing.time("trajectory", || compute_run(&ctx))?;
    let mut report = Report::new("run", cfg);
    run_checks(&mut report, &out);
    let dir = cfg.output_dir().join("run");
    let files = ["trajectory.csv", "state.json", "diagnostics.json"];
    out.trajectory.write_csv(&dir.join(files[0]), &header(cfg))?;
    io::write_json(&dir.join(files[1]), &StateFile { config_hash: cfg.hash(), state: out.state.clone() })?;
    io::write_json(&dir.join(files[2]), &out.diagnostics)?;
    // output_dir is left out so the file is identical wherever the run lands
    std::fs::write(dir.join("config.toml"), ExperimentConfig { output_dir: None, ..cfg.clone() }.to_toml())?;
    timing.write(&dir.join("timing.json"))?;
    report.files.extend(files.iter().map(|f| dir.join(f)));
    Ok(report)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub subsystem: usize,
    pub records: usize,
    pub record_interval: f64,
    pub g0: f64,
    pub correlation_time: Option<f64>,
    pub settling_time: Option<f64>,
    pub correlation_tail_from: f64,
    pub max_relative_correlation_tail: f64,
    pub burn_in: f64,
    pub burn_in_capped: bool,
    pub samples_used: usize,
    pub wraps: usize,
    pub histogram_half_record_distance: f64,
    pub histogram_converged: bool,
    /// On the `bins` grid.
    pub total_variation: f64,
    /// On a grid coarsened to at most 100 bins.
    pub total_variation_coarse: f64,
    pub coarse_bins: usize,
    pub marginal_integral: f64,
    pub marginal_max_imag: f64,
    pub histogram_integral: f64,
    pub conditional_lag: f64,
    pub conditional_rows_compared: usize,
    pub conditional_rows_flagged: usize,
    pub conditional_max_distance: f64,
    pub chapman_kolmogorov: ChapmanKolmogorov,
    pub equilibrium_diagonal: Vec<f64>,
    pub equilibrium_check: RdmCheck,
    pub equilibrium_max_relative_offdiagonal: f64,
    pub snapshot_checks: Vec<RdmCheck>,
    pub snapshot_integrals: Vec<f64>,
    pub max_norm_defect: f64,
    pub fluctuation_level0: FluctuationReport,
    pub fluctuation_window: FluctuationReport,
}

pub struct AnalysisOutput {
    pub summary: AnalysisSummary,
    pub histogram: Histogram,
    pub p_eq: Vec<f64>,
    pub correlation: CorrelationCurve,
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub conditional_distances: Vec<(usize, u64, Option<f64>)>,
    pub equilibrium: ReducedDensityMatrix,
}

pub fn compute_analysis(ctx: &Context, trajectory: &BohmTrajectory, state: &PureState) -> Result<AnalysisOutput> {
    let cfg = &ctx.cfg;
    if trajectory.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if trajectory.rotor_count() != cfg.n {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} rotors, config has {}",
            trajectory.rotor_count(),
            cfg.n
        )));
    }
    let interval = trajectory.record_interval();
    let series = trajectory.coordinate(cfg.subsystem);
    let len = series.len();

    // correlation over the full record
    let lag_stride = per_record(cfg.lag_step, interval, "lag_step")?;
    let mut max_lag = (cfg.max_lag / interval).round() as usize;
    if max_lag >= len {
        log::warn!("max lag {} exceeds the record; clamped", cfg.max_lag);
        max_lag = len.saturating_sub(1) / lag_stride * lag_stride;
    }
    let correlation = analysis::autocorrelation(&series, interval, max_lag, lag_stride)?;
    let correlation_time = correlation.first_crossing(cfg.correlation_fraction);
    let tau_c = correlation_time.unwrap_or(cfg.max_lag);

    // burn-in
    let wanted = (cfg.burn_in_correlation_times * tau_c / interval).ceil() as usize;
    let burn_in_capped = wanted > len / 2;
    let skip = wanted.min(len / 2);
    let kept = &series[skip..];

    let report = analysis::histogram_with_convergence(kept, cfg.bins, cfg.convergence_threshold)?;
    let histogram = report.histogram.clone();
    let dq = histogram.bin_width();
    let w = histogram.density();

    let rotor = ctx.model.basis().rotor().clone();
    let equilibrium = equilibrium_rdm(&ctx.model, &ctx.subsystem, state);
    let (p_eq, max_imag) = marginal(&equilibrium, &rotor, cfg.bins)?;
    let total_variation = analysis::total_variation(&p_eq.density, &w, dq)?;
    let coarse_bins = (1..=100).rev().find(|b| cfg.bins % b == 0).unwrap_or(1);
    let factor = cfg.bins / coarse_bins;
    let total_variation_coarse = analysis::total_variation(
        &analysis::coarsen(&p_eq.density, factor)?,
        &analysis::coarsen(&w, factor)?,
        dq * factor as f64,
    )?;

    // conditional relaxation at a multiple of tau_c
    let cond_lag = ((cfg.conditional_lag_correlation_times * tau_c / interval).round() as usize).max(1);
    let conditional_lag = cond_lag as f64 * interval;
    let (conditional_distances, rows_compared, rows_flagged, max_distance) = if cond_lag < kept.len() {
        let cond = analysis::conditional_distribution(
            kept,
            cond_lag,
            cfg.conditional_source_bins,
            cfg.conditional_target_bins,
            cfg.conditional_min_samples,
        )?;
        let target = Histogram::new(kept, cfg.conditional_target_bins)?.fractions();
        let d = cond.distances_from(&target);
        let rows: Vec<(usize, u64, Option<f64>)> = (0..cfg.conditional_source_bins)
            .map(|s| (s, cond.row_total(s), d.iter().find(|(r, _)| *r == s).map(|(_, x)| *x)))
            .collect();
        let max = d.iter().map(|(_, x)| *x).fold(0.0, f64::max);
        (rows, d.len(), cond.flagged_rows().len(), max)
    } else {
        (Vec::new(), 0, cfg.conditional_source_bins, f64::NAN)
    };

    let ck_lag = per_record(cfg.chapman_kolmogorov_lag, interval, "chapman_kolmogorov_lag")?;
    let chapman_kolmogorov = if 2 * ck_lag < kept.len() {
        analysis::chapman_kolmogorov_check(kept, ck_lag, cfg.chapman_kolmogorov_bins, cfg.conditional_min_samples)?
    } else {
        ChapmanKolmogorov { lag: ck_lag, residual: f64::NAN, rows_compared: 0 }
    };

    // quantum side
    let mut snapshots = Vec::new();
    let mut snapshot_checks = Vec::new();
    let mut snapshot_integrals = Vec::new();
    for &t in &cfg.snapshot_times {
        let rdm = rdm_at(&ctx.model, &ctx.subsystem, state, t);
        snapshot_checks.push(rdm.check()?);
        let (p, _) = marginal(&rdm, &rotor, cfg.bins)?;
        snapshot_integrals.push(p.integral());
        snapshots.push((t, p.density));
    }
    let mut times = check_times(cfg.t_end, 11);
    times.extend(&cfg.snapshot_times);
    let max_norm_defect = norm_defect(&ctx.model, state, &times);

    let levels = ctx.subsystem.levels();
    let seeds = SeedTree::new(cfg.master_seed);
    let fl_times = check_times(cfg.t_end.max(1.0), cfg.fluctuation_times);
    let fluctuation_level0 = fluctuation_bound_check(
        &ctx.model,
        &ctx.subsystem,
        state,
        &level_projector(levels, 0)?,
        &fl_times,
        &seeds,
        cfg.fluctuation_draws,
    )?;
    let window = window_observable(&rotor, levels, cfg.window[0], cfg.window[1])?;
    let fluctuation_window =
        fluctuation_bound_check(&ctx.model, &ctx.subsystem, state, &window, &fl_times, &seeds, cfg.fluctuation_draws)?;

    let summary = AnalysisSummary {
        config_hash: cfg.hash(),
        subsystem: cfg.subsystem,
        records: len,
        record_interval: interval,
        g0: correlation.g0(),
        correlation_time,
        settling_time: correlation.settling_time(cfg.correlation_fraction),
        correlation_tail_from: cfg.correlation_tail_from,
        max_relative_correlation_tail: correlation.max_relative_beyond(cfg.correlation_tail_from),
        burn_in: skip as f64 * interval,
        burn_in_capped,
        samples_used: kept.len(),
        wraps: analysis::count_wraps(&series),
        histogram_half_record_distance: report.half_record_distance,
        histogram_converged: report.converged,
        total_variation,
        total_variation_coarse,
        coarse_bins,
        marginal_integral: p_eq.integral(),
        marginal_max_imag: max_imag,
        histogram_integral: w.iter().sum::<f64>() * dq,
        conditional_lag,
        conditional_rows_compared: rows_compared,
        conditional_rows_flagged: rows_flagged,
        conditional_max_distance: max_distance,
        chapman_kolmogorov,
        equilibrium_diagonal: equilibrium.diagonal(),
        equilibrium_check: equilibrium.check()?,
        equilibrium_max_relative_offdiagonal: equilibrium.max_relative_offdiagonal(),
        snapshot_checks,
        snapshot_integrals,
        max_norm_defect,
        fluctuation_level0,
        fluctuation_window,
    };
    Ok(AnalysisOutput {
        summary,
        histogram,
        p_eq: p_eq.density,
        correlation,
        snapshots,
        conditional_distances,
        equilibrium,
    })
}

fn analysis_checks(report: &mut Report, s: &AnalysisSummary) {
    report.check("G(0) non-negative", s.g0 >= 0.0, format!("G(0) = {}", s.g0));
    report.check(
        "histogram normalized",
        (s.histogram_integral - 1.0).abs() <= 1e-12,
        format!("integral {}", s.histogram_integral),
    );
    let worst = s.snapshot_integrals.iter().chain([&s.marginal_integral]).map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    report.check("marginals normalized", worst <= 1e-8, format!("max |integral - 1| = {worst:e}"));
    let rdms_ok = s.equilibrium_check.passes() && s.snapshot_checks.iter().all(RdmCheck::passes);
    report.check("reduced density matrices valid", rdms_ok, format!("equilibrium {:?}", s.equilibrium_check));
    report.check("amplitudes normalized", s.max_norm_defect <= 1e-12, format!("max defect {:e}", s.max_norm_defect));
    for (name, f) in [("level-0 projector", &s.fluctuation_level0), ("window", &s.fluctuation_window)] {
        report.check(
            &format!("fluctuation bound ({name})"),
            f.passes,
            format!("lhs {:e} <= bound {:e}", f.lhs, f.bound),
        );
    }
}

fn write_analysis(dir: &Path, cfg: &ExperimentConfig, out: &AnalysisOutput) -> Result<Vec<PathBuf>> {
    let h = header(cfg).with("subsystem", cfg.subsystem);
    let s = &out.summary;
    let hist = out.histogram.clone();
    let centers = hist.centers();
    let names = ["histogram.csv", "marginal_eq.csv", "correlation.csv", "snapshots.csv", "conditionals.csv", "rdm_eq.csv", "summary.json"];
    hist.write_csv(&dir.join(names[0]), &h.clone().with("burn_in", s.burn_in))?;
    io::write_csv(
        &dir.join(names[1]),
        &h,
        &["q", "p_eq"],
        centers.iter().zip(&out.p_eq).map(|(q, p)| vec![q.to_string(), p.to_string()]),
    )?;
    out.correlation.write_csv(&dir.join(names[2]), &h)?;
    let mut cols = vec!["q".to_string()];
    cols.extend(out.snapshots.iter().map(|(t, _)| format!("t={t}")));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    io::write_csv(
        &dir.join(names[3]),
        &h,
        &cols,
        centers.iter().enumerate().map(|(i, q)| {
            let mut row = vec![q.to_string()];
            row.extend(out.snapshots.iter().map(|(_, p)| p[i].to_string()));
            row
        }),
    )?;
    io::write_csv(
        &dir.join(names[4]),
        &h.clone().with("lag", s.conditional_lag),
        &["source_bin", "samples", "sup_distance"],
        out.conditional_distances.iter().map(|(b, n, d)| {
            vec![b.to_string(), n.to_string(), d.map_or_else(|| "flagged".to_string(), |x| x.to_string())]
        }),
    )?;
    crate::reduced::write_rdm_csv(&dir.join(names[5]), &h, std::slice::from_ref(&out.equilibrium))?;
    io::write_json(&dir.join(names[6]), s)?;
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

/// Reads a run's outputs, refusing files stamped with another config hash.
pub fn load_run(cfg: &ExperimentConfig, trajectory: &Path, state: &Path, model: &ActiveModel) -> Result<(BohmTrajectory, PureState)> {
    let expected = cfg.hash();
    let (traj, table) = BohmTrajectory::read_csv(trajectory)?;
    io::require_hash(trajectory, &expected, table.config_hash())?;
    let file: StateFile = io::read_json(state)?;
    io::require_hash(state, &expected, Some(&file.config_hash))?;
    let st = PureState::new(file.state.active_hash.clone(), file.state.populations.clone(), file.state.phases.clone())
        .map(|_| file.state)
        .map_err(|e| Error::Format { path: state.to_path_buf(), reason: e.to_string() })?;
    st.check_model(model, state)?;
    Ok((traj, st))
}

pub fn cmd_analyze(cfg: &ExperimentConfig, trajectory: Option<&Path>, state: Option<&Path>) -> Result<Report> {
    let mut timing = Timing::default();
    let run_dir = cfg.output_dir().join("run");
    let traj_path = trajectory.map_or_else(|| run_dir.join("trajectory.csv"), Path::to_path_buf);
    let state_path = state.map_or_else(|| run_dir.join("state.json"), Path::to_path_buf);
    let ctx = timing.time("spectrum", || Context::new(cfg, true))?;
    let (traj, st) = load_run(cfg, &traj_path, &state_path, &ctx.model)?;
    let out = timing.time("analysis", || compute_analysis(&ctx, &traj, &st))?;
    let mut report = Report::new("analyze", cfg);
    analysis_checks(&mut report, &out.summary);
    let dir = cfg.output_dir().join("analysis");
    report.files = write_analysis(&dir, cfg, &out)?;
    timing.write(&dir.join("timing.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- reproduce

/// Artifacts that `reproduce` knows how to regenerate.
pub const ARTIFACTS: [&str; 9] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7", "table1", "table2"];

/// Single rotor with an active space of its two lowest levels.
pub fn counterexample_config(base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.n = 1;
    cfg.subsystem = 0;
    cfg.e_tr_audit = None;
    let spec = cfg.model(cfg.e_tr).build()?;
    let e = spec.energies();
    if e.len() < 3 {
        return Err(Error::Config("counterexample needs at least three single-rotor levels".into()));
    }
    cfg.e_max = 0.5 * (e[1] + e[2]);
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    /// Relative to the manifest's directory.
    pub files: Vec<PathBuf>,
}

fn profile_rows(pot: &crate::potential::RandomPotential, points: usize) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..points).map(move |i| {
        let q = 2.0 * PI * i as f64 / points as f64;
        vec![q.to_string(), pot.eval(q).to_string()]
    })
}

pub fn cmd_reproduce(artifact: &str, base: &ExperimentConfig) -> Result<Report> {
    if !ARTIFACTS.contains(&artifact) {
        return Err(Error::Config(format!("unknown artifact {artifact}; expected one of {ARTIFACTS:?}")));
    }
    let mut cfg = base.clone();
    let root = base.output_dir().join("reproduce").join(artifact);
    cfg.output_dir = Some(root.clone());
    match artifact {
        "fig5" => cfg.t_end = 5.0,
        "fig7" => cfg = ExperimentConfig { output_dir: Some(root.clone()), ..counterexample_config(base)? },
        _ => {}
    }
    let mut timing = Timing::default();
    let mut report = Report::new(&format!("reproduce {artifact}"), &cfg);
    let h = header(&cfg);
    match artifact {
        "table1" => {
            let rotor = cfg.model(cfg.e_tr).rotor()?;
            let path = root.join("table1.csv");
            rotor.write_levels_csv(&path, &h)?;
            report.files.push(path);
        }
        "fig1" => {
            let pot = crate::potential::generate_profile(
                cfg.l_max,
                cfg.sigma_v,
                &SeedTree::new(cfg.master_seed),
                PotentialKind::OneBody(0),
            )?;
            let path = root.join("fig1_potential.csv");
            let h = h.clone().with("master_seed", cfg.master_seed).with("stream", PotentialKind::OneBody(0).stream_name());
            io::write_csv(&path, &h, &["q", "V"], profile_rows(&pot, 2000))?;
            report.files.push(path);
        }
        "fig2" => {
            let rotor = cfg.model(cfg.e_tr).rotor()?;
            let k = rotor.kept_levels();
            let mut cols = vec!["q".to_string(), "confining".to_string()];
            cols.extend((0..k).map(|m| format!("m{m}")));
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            let path = root.join("fig2_levels.csv");
            let mut phi = vec![Complex64::new(0.0, 0.0); k];
            let mut dphi = phi.clone();
            let rows: Vec<Vec<String>> = (0..1000)
                .map(|i| {
                    let q = 2.0 * PI * i as f64 / 1000.0;
                    rotor.eval_levels(q, &mut phi, &mut dphi);
                    let mut row = vec![q.to_string(), (cfg.u * (1.0 + q.cos()) / 2.0).to_string()];
                    // squared modulus offset by the level energy
                    row.extend((0..k).map(|m| (phi[m].norm_sqr() + rotor.energy(m)).to_string()));
                    row
                })
                .collect();
            io::write_csv(&path, &h.clone().with("offset", "level energy"), &cols, rows)?;
            report.files.push(path);
        }
        "fig3" | "table2" => {
            let out = timing.time("spectrum", || compute_spectrum(&cfg, true))?;
            spectrum_checks(&mut report, &out.summary);
            if artifact == "fig3" {
                let a = root.join("fig3_eigenvalues.csv");
                write_eigenvalues(&a, &h.clone().with("e_tr", cfg.e_tr), &out.spectrum)?;
                report.files.push(a);
                if let Some(big) = &out.audit_spectrum {
                    let b = root.join("fig3_eigenvalues_audit.csv");
                    write_eigenvalues(&b, &h.clone().with("e_tr", cfg.e_tr_audit.unwrap_or(f64::NAN)), big)?;
                    report.files.push(b);
                }
            } else {
                let path = root.join("table2.csv");
                write_level_table(&path, &h.clone().with("beta", cfg.canonical_beta), &out.summary)?;
                report.files.push(path);
            }
        }
        "fig4" => {
            let ctx = timing.time("spectrum", || Context::new(&cfg, true))?;
            let state = ctx.state()?;
            let rotor = ctx.model.basis().rotor().clone();
            let eq = equilibrium_rdm(&ctx.model, &ctx.subsystem, &state);
            let points = 1000;
            let mut columns = vec![marginal(&eq, &rotor, points)?.0];
            for &t in &cfg.snapshot_times {
                columns.push(marginal(&rdm_at(&ctx.model, &ctx.subsystem, &state, t), &rotor, points)?.0);
            }
            let mut cols = vec!["q".to_string(), "p_eq".to_string()];
            cols.extend(cfg.snapshot_times.iter().map(|t| format!("t={t}")));
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            let path = root.join("fig4_marginals.csv");
            let rows = (0..points).map(|i| {
                let mut row = vec![columns[0].q[i].to_string()];
                row.extend(columns.iter().map(|c| c.density[i].to_string()));
                row
            });
            io::write_csv(&path, &h, &cols, rows)?;
            report.files.push(path);
        }
        "fig5" | "fig6" | "fig7" => {
            let ctx = timing.time("spectrum", || Context::new(&cfg, true))?;
            let run = timing.time("trajectory", || compute_run(&ctx))?;
            run_checks(&mut report, &run);
            let traj_path = root.join(format!("{artifact}_trajectory.csv"));
            run.trajectory.write_csv(&traj_path, &h)?;
            report.files.push(traj_path);
            if artifact != "fig5" {
                let out = timing.time("analysis", || compute_analysis(&ctx, &run.trajectory, &run.state))?;
                analysis_checks(&mut report, &out.summary);
                let centers = out.histogram.centers();
                let path = root.join(format!("{artifact}_densities.csv"));
                let w = out.histogram.density();
                io::write_csv(
                    &path,
                    &h.clone().with("total_variation", out.summary.total_variation),
                    &["q", "w", "p_eq"],
                    (0..centers.len()).map(|i| vec![centers[i].to_string(), w[i].to_string(), out.p_eq[i].to_string()]),
                )?;
                report.files.push(path);
                let corr = root.join(format!("{artifact}_correlation.csv"));
                out.correlation.write_csv(&corr, &h)?;
                report.files.push(corr);
                let summary = root.join("summary.json");
                io::write_json(&summary, &out.summary)?;
                report.files.push(summary);
            }
        }
        _ => unreachable!("artifact list checked above"),
    }
    let manifest = Manifest {
        artifact: artifact.into(),
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        config: ExperimentConfig { output_dir: None, ..cfg.clone() },
        files: report.files.iter().map(|f| f.strip_prefix(&root).unwrap_or(f).to_path_buf()).collect(),
    };
    let mpath = root.join("manifest.json");
    io::write_json(&mpath, &manifest)?;
    report.files.push(mpath);
    timing.write(&root.join("timing.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stream: String,
    pub config_hash: String,
    pub correlation_time: Option<f64>,
    pub total_variation: f64,
    pub total_variation_coarse: f64,
    pub chapman_kolmogorov_residual: f64,
    pub conditional_max_distance: f64,
    pub halved_steps: u64,
}

/// Runs and analyzes one trajectory per state stream, fanned out over worker threads.
pub fn cmd_sweep(base: &ExperimentConfig, streams: &[String]) -> Result<Report> {
    let spec = load_or_build_spectrum(base, base.e_tr, Some(&spectrum_cache_path(base, "spectrum.bin")))?;
    let root = base.output_dir().join("sweep");
    let results: Vec<Result<(SweepRow, Report)>> = streams
        .par_iter()
        .map(|stream| {
            let mut cfg = base.clone();
            cfg.state_stream = stream.clone();
            let dir = root.join(stream.replace('/', "_"));
            cfg.output_dir = Some(dir.clone());
            let ctx = Context::from_spectrum(&cfg, spec.clone())?;
            let run = compute_run(&ctx)?;
            let out = compute_analysis(&ctx, &run.trajectory, &run.state)?;
            let mut report = Report::new("sweep", &cfg);
            run_checks(&mut report, &run);
            analysis_checks(&mut report, &out.summary);
            for c in &mut report.checks {
                c.name = format!("{stream}: {}", c.name);
            }
            run.trajectory.write_csv(&dir.join("trajectory.csv"), &header(&cfg))?;
            report.files.push(dir.join("trajectory.csv"));
            report.files.extend(write_analysis(&dir, &cfg, &out)?);
            let s = &out.summary;
            let row = SweepRow {
                stream: stream.clone(),
                config_hash: cfg.hash(),
                correlation_time: s.correlation_time,
                total_variation: s.total_variation,
                total_variation_coarse: s.total_variation_coarse,
                chapman_kolmogorov_residual: s.chapman_kolmogorov.residual,
                conditional_max_distance: s.conditional_max_distance,
                halved_steps: run.diagnostics.trajectory.halved_steps,
            };
            Ok((row, report))
        })
        .collect();
    let mut report = Report::new("sweep", base);
    let mut rows = Vec::new();
    for r in results {
        let (row, sub) = r?;
        rows.push(row);
        report.merge(sub);
    }
    let path = root.join("sweep.csv");
    let opt = |x: Option<f64>| x.map_or_else(|| "none".to_string(), |v| v.to_string());
    io::write_csv(
        &path,
        &header(base),
        &["stream", "config_hash", "tau_c", "tv", "tv_coarse", "ck_residual", "conditional_max", "halved_steps"],
        rows.iter().map(|r| {
            vec![
                r.stream.clone(),
                r.config_hash.clone(),
                opt(r.correlation_time),
                r.total_variation.to_string(),
                r.total_variation_coarse.to_string(),
                r.chapman_kolmogorov_residual.to_string(),
                r.conditional_max_distance.to_string(),
                r.halved_steps.to_string(),
            ]
        }),
    )?;
    report.files.push(path);
    Ok(report)
}

/// Potentials of a config, for callers that need the random profiles themselves.
pub fn potentials(cfg: &ExperimentConfig) -> Result<PotentialSet> {
    cfg.model(cfg.e_tr).potentials()
}
