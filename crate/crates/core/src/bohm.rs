//! Pilot-wave field evaluation and Bohm trajectory integration.
//!
//! `v_i = 4 pi Im(d_i Psi / Psi)` in radians per time unit. Trajectories use
//! classic fixed-step RK4 on a uniform grid `t_k = k dt`; a stage that lands
//! on or near a node, as judged by the [`NodeGuard`], triggers recursive
//! halving of that step only.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CsvHeader};
use crate::many_body::ProductBasis;
use crate::rotor::RotorSpectrum;
use crate::state::{ActiveModel, PureState};
use crate::units::{wrap_angle, VELOCITY_FACTOR};

/// Default [`NodeGuard::interference_floor`].
pub const DEFAULT_INTERFERENCE_FLOOR: f64 = 1e-12;
/// Default [`NodeGuard::max_stage_angle`] in radians.
pub const DEFAULT_MAX_STAGE_ANGLE: f64 = 0.3;
/// Maximum recursive halvings of one grid step.
pub const MAX_HALVING_DEPTH: u32 = 20;

/// When a stage counts as too close to a node, forcing the step to be halved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeGuard {
    /// `|Psi|^2 < interference_floor * M^2` with `M = sum_l |d_l prod_i phi_{l_i}|`: the terms cancel.
    pub interference_floor: f64,
    /// Optional floor on `|Psi|^2` in units of the mean density `(2 pi)^-n`.
    pub density_floor: Option<f64>,
    /// Largest angle one stage may move any rotor, `h max_i |v_i|`.
    /// Velocities grow like the inverse distance to a node.
    pub max_stage_angle: Option<f64>,
}

impl Default for NodeGuard {
    fn default() -> Self {
        Self {
            interference_floor: DEFAULT_INTERFERENCE_FLOOR,
            density_floor: None,
            max_stage_angle: Some(DEFAULT_MAX_STAGE_ANGLE),
        }
    }
}

impl NodeGuard {
    /// Only the density criteria, no limit on the stage angle.
    pub fn density_only(interference_floor: f64, density_floor: Option<f64>) -> Self {
        Self { interference_floor, density_floor, max_stage_angle: None }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.interference_floor >= 0.0
            && self.density_floor.map_or(true, |f| f >= 0.0)
            && self.max_stage_angle.map_or(true, |a| a > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid node guard {self:?}")))
        }
    }

    pub fn is_node(&self, sample: &FieldSample, rotors: usize) -> bool {
        let rho = sample.density();
        if rho == 0.0 || !(rho >= self.interference_floor * sample.magnitude * sample.magnitude) {
            return true;
        }
        self.density_floor.is_some_and(|f| rho < f * (2.0 * PI).powi(-(rotors as i32)))
    }

    /// True when a stage of length `h` would move some rotor further than allowed.
    pub fn overshoots(&self, h: f64, velocities: &[f64]) -> bool {
        self.max_stage_angle.is_some_and(|cap| {
            let vmax = velocities.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            !(h.abs() * vmax <= cap)
        })
    }
}

/// `Psi` and its per-rotor derivatives at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub psi: Complex64,
    pub grad: Vec<Complex64>,
    /// `sum_l |d_l prod_i phi_{l_i}|`, an upper bound on `|Psi|`.
    pub magnitude: f64,
}

impl FieldSample {
    pub fn density(&self) -> f64 {
        self.psi.norm_sqr()
    }

    /// `|Psi|^2 / magnitude^2`, in `[0, 1]`; small only under destructive interference.
    pub fn interference_ratio(&self) -> f64 {
        if self.magnitude == 0.0 {
            return 0.0;
        }
        self.density() / (self.magnitude * self.magnitude)
    }

    /// `4 pi Im(grad_i conj(Psi)) / |Psi|^2`, unguarded.
    pub fn velocities(&self) -> Vec<f64> {
        let rho = self.density();
        self.grad.iter().map(|g| VELOCITY_FACTOR * (g * self.psi.conj()).im / rho).collect()
    }
}

/// Evaluates `Psi(Q) = sum_l d_l prod_i phi_{l_i}(Q_i)` from per-rotor level tables.
#[derive(Debug, Clone)]
pub struct FieldEvaluator<'a> {
    basis: &'a ProductBasis,
    rotor: &'a RotorSpectrum,
    n: usize,
    kept: usize,
    phi: Vec<Complex64>,
    dphi: Vec<Complex64>,
    prefix: Vec<Complex64>,
}

impl<'a> FieldEvaluator<'a> {
    pub fn new(basis: &'a ProductBasis) -> Self {
        let rotor: &RotorSpectrum = basis.rotor();
        let n = basis.rotor_count();
        let kept = basis.levels_used().max(1);
        let zero = Complex64::new(0.0, 0.0);
        Self {
            basis,
            rotor,
            n,
            kept,
            phi: vec![zero; n * kept],
            dphi: vec![zero; n * kept],
            prefix: vec![zero; n + 1],
        }
    }

    pub fn eval(&mut self, d_re: &[f64], d_im: &[f64], q: &[f64]) -> FieldSample {
        let (n, kept) = (self.n, self.kept);
        assert_eq!(q.len(), n);
        for i in 0..n {
            let (v, dv) = (&mut self.phi[i * kept..(i + 1) * kept], &mut self.dphi[i * kept..(i + 1) * kept]);
            self.rotor.eval_levels(q[i], v, dv);
        }
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let mut psi = zero;
        let mut magnitude = 0.0;
        let mut grad = vec![zero; n];
        for l in 0..self.basis.len() {
            let d = Complex64::new(d_re[l], d_im[l]);
            if d == zero {
                continue;
            }
            let levels = self.basis.levels(l);
            self.prefix[0] = d;
            for i in 0..n {
                self.prefix[i + 1] = self.prefix[i] * self.phi[i * kept + levels[i] as usize];
            }
            psi += self.prefix[n];
            magnitude += self.prefix[n].norm();
            let mut suffix = one;
            for i in (0..n).rev() {
                let m = i * kept + levels[i] as usize;
                grad[i] += self.prefix[i] * self.dphi[m] * suffix;
                suffix *= self.phi[m];
            }
        }
        FieldSample { psi, grad, magnitude }
    }
}

/// Product-basis amplitudes at one time, keyed by the time's bits.
#[derive(Debug, Clone)]
struct CachedAmplitudes {
    time: u64,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// The time-dependent pilot wave of one pure state.
#[derive(Debug)]
pub struct PilotWave<'a> {
    model: &'a ActiveModel,
    state: &'a PureState,
    evaluator: FieldEvaluator<'a>,
    /// Three slots cover the stage times of consecutive RK4 steps.
    cache: Vec<CachedAmplitudes>,
    next_slot: usize,
    guard: NodeGuard,
    amplitude_evaluations: u64,
}

impl<'a> PilotWave<'a> {
    pub fn new(model: &'a ActiveModel, state: &'a PureState) -> Result<Self> {
        Self::with_guard(model, state, NodeGuard::default())
    }

    pub fn with_guard(model: &'a ActiveModel, state: &'a PureState, guard: NodeGuard) -> Result<Self> {
        if state.dim() != model.dim() {
            return Err(Error::InvalidArgument(format!(
                "state has {} populations, active space has {}",
                state.dim(),
                model.dim()
            )));
        }
        guard.validate()?;
        Ok(Self {
            model,
            state,
            evaluator: FieldEvaluator::new(model.basis()),
            cache: Vec::with_capacity(3),
            next_slot: 0,
            guard,
            amplitude_evaluations: 0,
        })
    }

    pub fn rotor_count(&self) -> usize {
        self.model.basis().rotor_count()
    }

    pub fn guard(&self) -> NodeGuard {
        self.guard
    }

    /// Number of `d = U c` products computed so far.
    pub fn amplitude_evaluations(&self) -> u64 {
        self.amplitude_evaluations
    }

    fn amplitudes(&mut self, time: f64) -> usize {
        let key = time.to_bits();
        if let Some(i) = self.cache.iter().position(|c| c.time == key) {
            return i;
        }
        let rows = self.model.basis().len();
        let c = self.state.coefficients_at(self.model.energies(), time);
        let slot = if self.cache.len() < 3 {
            self.cache.push(CachedAmplitudes { time: key, re: vec![0.0; rows], im: vec![0.0; rows] });
            self.cache.len() - 1
        } else {
            let s = self.next_slot;
            self.next_slot = (self.next_slot + 1) % 3;
            self.cache[s].time = key;
            s
        };
        let entry = &mut self.cache[slot];
        self.model.product_amplitudes_into(&c, &mut entry.re, &mut entry.im);
        self.amplitude_evaluations += 1;
        slot
    }

    pub fn field(&mut self, q: &[f64], time: f64) -> FieldSample {
        let slot = self.amplitudes(time);
        let entry = &self.cache[slot];
        self.evaluator.eval(&entry.re, &entry.im, q)
    }

    /// Guarded velocities and the sample they came from; errors with `NodeProximity` at a node.
    pub fn velocity(&mut self, q: &[f64], time: f64) -> Result<(Vec<f64>, FieldSample)> {
        let f = self.field(q, time);
        if self.guard.is_node(&f, q.len()) {
            return Err(Error::NodeProximity { density: f.density(), time, position: q.to_vec() });
        }
        Ok((f.velocities(), f))
    }
}

/// Counters collected while integrating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub steps: u64,
    pub dt: f64,
    pub guard: NodeGuard,
    /// Smallest `|Psi|^2` seen at any stage that passed the guard.
    pub min_density: f64,
    /// `min_density` in units of the mean density `(2 pi)^-n`.
    pub min_relative_density: f64,
    /// Smallest [`FieldSample::interference_ratio`] seen at any stage that passed the guard.
    pub min_interference_ratio: f64,
    pub halved_steps: u64,
    pub max_halving_depth: u32,
    pub amplitude_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BohmTrajectory {
    n: usize,
    dt: f64,
    stride: usize,
    times: Vec<f64>,
    /// `n` wrapped angles per record.
    positions: Vec<f64>,
    pub diagnostics: TrajectoryDiagnostics,
}

impl BohmTrajectory {
    pub fn rotor_count(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time between records.
    pub fn record_interval(&self) -> f64 {
        self.dt * self.stride as f64
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.n..(k + 1) * self.n]
    }

    /// Record of rotor `i` over time.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.positions.iter().skip(i).step_by(self.n).copied().collect()
    }

    pub fn write_csv(&self, path: &Path, header: &CsvHeader) -> Result<()> {
        let mut columns = vec!["tau".to_string()];
        columns.extend((1..=self.n).map(|i| format!("q{i}")));
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        let header = header.clone().with("dt", self.dt).with("record_stride", self.stride);
        io::write_csv(
            path,
            &header,
            &cols,
            (0..self.len()).map(|k| {
                let mut row = vec![self.times[k].to_string()];
                row.extend(self.position(k).iter().map(f64::to_string));
                row
            }),
        )
    }

    pub fn read_csv(path: &Path) -> Result<(Self, io::CsvTable)> {
        let table = io::read_csv(path)?;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        let n = table.columns.len().checked_sub(1).filter(|&n| n > 0).ok_or_else(|| bad("no coordinate columns"))?;
        let dt = io::parse_f64(path, table.meta("dt").ok_or_else(|| bad("missing dt"))?)?;
        let stride: usize =
            table.meta("record_stride").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing record_stride"))?;
        let mut times = Vec::with_capacity(table.records.len());
        let mut positions = Vec::with_capacity(table.records.len() * n);
        for rec in &table.records {
            times.push(io::parse_f64(path, &rec[0])?);
            for i in 0..n {
                positions.push(io::parse_f64(path, &rec[i + 1])?);
            }
        }
        if times.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let diagnostics = TrajectoryDiagnostics {
            steps: ((times.len() - 1) * stride) as u64,
            dt,
            guard: NodeGuard::default(),
            min_density: f64::NAN,
            min_relative_density: f64::NAN,
            min_interference_ratio: f64::NAN,
            halved_steps: 0,
            max_halving_depth: 0,
            amplitude_evaluations: 0,
        };
        Ok((Self { n, dt, stride, times, positions, diagnostics }, table))
    }
}

struct Stepper<'p, 'a> {
    pilot: &'p mut PilotWave<'a>,
    min_density: f64,
    min_ratio: f64,
    halved_steps: u64,
    max_depth: u32,
}

impl Stepper<'_, '_> {
    fn velocity(&mut self, q: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
        let (v, f) = self.pilot.velocity(q, t)?;
        if self.pilot.guard.overshoots(h, &v) {
            return Err(Error::NodeProximity { density: f.density(), time: t, position: q.to_vec() });
        }
        self.min_density = self.min_density.min(f.density());
        self.min_ratio = self.min_ratio.min(f.interference_ratio());
        Ok(v)
    }

    /// One RK4 step from `t0` to `t1`, stage times `t0`, `mid`, `t1` supplied exactly.
    fn rk4(&mut self, q: &[f64], t0: f64, mid: f64, t1: f64) -> Result<Vec<f64>> {
        let h = t1 - t0;
        let shifted = |k: &[f64], s: f64| q.iter().zip(k).map(|(q, k)| q + s * k).collect::<Vec<_>>();
        let k1 = self.velocity(q, t0, h)?;
        let k2 = self.velocity(&shifted(&k1, h / 2.0), mid, h)?;
        let k3 = self.velocity(&shifted(&k2, h / 2.0), mid, h)?;
        let k4 = self.velocity(&shifted(&k3, h), t1, h)?;
        Ok((0..q.len()).map(|i| q[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
    }

    /// Advances over `[t0, t1]`, splitting into halves while a node is too close.
    fn advance(&mut self, q: &[f64], t0: f64, t1: f64, depth: u32) -> Result<Vec<f64>> {
        let mid = 0.5 * (t0 + t1);
        match self.rk4(q, t0, mid, t1) {
            Ok(next) => Ok(next),
            Err(Error::NodeProximity { density, time, position }) => {
                if depth >= MAX_HALVING_DEPTH {
                    log::error!("node unresolved at t={time}, q={position:?}, density={density:e}");
                    return Err(Error::NodeUnresolvable { depth, time, position, density });
                }
                if depth == 0 {
                    self.halved_steps += 1;
                }
                self.max_depth = self.max_depth.max(depth + 1);
                log::debug!("halving step at t={t0} (depth {})", depth + 1);
                let half = self.advance(q, t0, mid, depth + 1)?;
                self.advance(&half, mid, t1, depth + 1)
            }
            Err(e) => Err(e),
        }
    }
}

/// Integrates `dQ/dt = v(Q, t)` from `q0` at `t = 0` to `t_end`, recording every `stride` steps.
pub fn integrate(pilot: &mut PilotWave<'_>, q0: &[f64], t_end: f64, dt: f64, stride: usize) -> Result<BohmTrajectory> {
    let n = pilot.rotor_count();
    if q0.len() != n {
        return Err(Error::InvalidArgument(format!("initial configuration needs {n} angles, got {}", q0.len())));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) || stride == 0 {
        return Err(Error::InvalidArgument(format!("need dt > 0, t_end >= 0, stride >= 1 (dt={dt}, t_end={t_end})")));
    }
    let steps_f = t_end / dt;
    let steps = steps_f.round() as u64;
    if (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(Error::InvalidArgument(format!("t_end={t_end} is not a multiple of dt={dt}")));
    }

    let mut q: Vec<f64> = q0.iter().map(|&x| wrap_angle(x)).collect();
    let records = steps as usize / stride + 1;
    let mut times = Vec::with_capacity(records);
    let mut positions = Vec::with_capacity(records * n);
    times.push(0.0);
    positions.extend_from_slice(&q);

    let guard = pilot.guard();
    let mut stepper =
        Stepper { pilot, min_density: f64::INFINITY, min_ratio: f64::INFINITY, halved_steps: 0, max_depth: 0 };
    for k in 0..steps {
        let (t0, t1) = (k as f64 * dt, (k + 1) as f64 * dt);
        q = stepper.advance(&q, t0, t1, 0)?.into_iter().map(wrap_angle).collect();
        if (k + 1) % stride as u64 == 0 {
            times.push(t1);
            positions.extend_from_slice(&q);
        }
    }
    let mean_density = (2.0 * PI).powi(-(n as i32));
    let diagnostics = TrajectoryDiagnostics {
        steps,
        dt,
        guard,
        min_density: stepper.min_density,
        min_relative_density: stepper.min_density / mean_density,
        min_interference_ratio: stepper.min_ratio,
        halved_steps: stepper.halved_steps,
        max_halving_depth: stepper.max_depth,
        amplitude_evaluations: stepper.pilot.amplitude_evaluations(),
    };
    Ok(BohmTrajectory { n, dt, stride, times, positions, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::many_body::{assemble_hamiltonian, build_product_basis, diagonalize_full, Cutoff};
    use crate::potential::PotentialSet;
    use crate::seeds::SeedTree;
    use std::sync::Arc;

    fn active(rotor: RotorSpectrum, n: usize, cap: usize, sigma: f64, dim: Option<usize>) -> ActiveModel {
        let basis = build_product_basis(n, Arc::new(rotor), Cutoff::Polyad(cap)).unwrap();
        let pots = PotentialSet::generate(n, 12, sigma, &SeedTree::new(31)).unwrap();
        let h = assemble_hamiltonian(&basis, &pots).unwrap();
        let spec = Arc::new(diagonalize_full(basis, &h).unwrap());
        let dim = dim.unwrap_or(spec.dim());
        ActiveModel::with_dim(spec, dim).unwrap()
    }

    fn coupled() -> ActiveModel {
        active(RotorSpectrum::solve(300.0, 20).unwrap().with_kept_levels(4).unwrap(), 3, 3, 1.0, Some(12))
    }

    #[test]
    fn single_product_state_factorizes() {
        let m = coupled();
        let basis = m.basis();
        let target = basis.position(&[1, 0, 2]).unwrap();
        let mut d_re = vec![0.0; basis.len()];
        let d_im = vec![0.0; basis.len()];
        d_re[target] = 1.0;
        let q = [2.9, 3.3, 3.1];
        let f = FieldEvaluator::new(basis).eval(&d_re, &d_im, &q);
        let rotor = basis.rotor();
        let (p, dp): (Vec<_>, Vec<_>) =
            [1usize, 0, 2].iter().zip(q).map(|(&m, x)| rotor.eval(m, x).unwrap()).unzip();
        assert!((f.psi - p[0] * p[1] * p[2]).norm() < 1e-13);
        assert!((f.grad[0] - dp[0] * p[1] * p[2]).norm() < 1e-12);
        assert!((f.grad[1] - p[0] * dp[1] * p[2]).norm() < 1e-12);
        assert!((f.grad[2] - p[0] * p[1] * dp[2]).norm() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let mut pilot = PilotWave::new(&m, &s).unwrap();
        let q = [3.0, 3.2, 2.8];
        let t = 0.37;
        let f = pilot.field(&q, t);
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = q;
            let mut minus = q;
            plus[i] += h;
            minus[i] -= h;
            let fd = (pilot.field(&plus, t).psi - pilot.field(&minus, t).psi) / (2.0 * h);
            assert!((fd - f.grad[i]).norm() <= 1e-5 * f.grad[i].norm(), "rotor {i}");
        }
    }

    #[test]
    fn velocity_ignores_global_phase_and_norm() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let c = s.coefficients_at(m.energies(), 0.2);
        let q = [3.0, 3.2, 2.8];
        let eval = |c: &[Complex64]| {
            let d = m.product_amplitudes(c);
            let re: Vec<f64> = d.iter().map(|z| z.re).collect();
            let im: Vec<f64> = d.iter().map(|z| z.im).collect();
            FieldEvaluator::new(m.basis()).eval(&re, &im, &q).velocities()
        };
        let base = eval(&c);
        // multiplication by i and by 2 are exact, so velocities agree bitwise
        let rotated: Vec<Complex64> = c.iter().map(|z| z * Complex64::new(0.0, 1.0)).collect();
        let scaled: Vec<Complex64> = c.iter().map(|z| z * 2.0).collect();
        assert_eq!(eval(&rotated), base);
        assert_eq!(eval(&scaled), base);
        let generic: Vec<Complex64> = c.iter().map(|z| z * Complex64::cis(0.731)).collect();
        for (a, b) in eval(&generic).iter().zip(&base) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    fn free_rotor() -> ActiveModel {
        let rotor = RotorSpectrum::plane_waves(6).unwrap().with_kept_levels(5).unwrap();
        active(rotor, 1, 4, 0.0, None)
    }

    #[test]
    fn free_rotor_moves_ballistically() {
        let m = free_rotor();
        // levels are ordered j = 0, 1, -1, 2, -2
        for (level, j) in [(1usize, 1.0f64), (2, -1.0), (3, 2.0)] {
            let k = (0..m.dim()).find(|&k| m.spectrum().vectors()[(level, k)].norm() == 1.0).unwrap();
            let s = PureState::eigenstate(&m, k).unwrap();
            let mut pilot = PilotWave::new(&m, &s).unwrap();
            let (v, _) = pilot.velocity(&[1.0], 0.0).unwrap();
            assert!((v[0] - 4.0 * PI * j).abs() < 1e-12);
            let q0 = 0.4;
            let traj = integrate(&mut pilot, &[q0], 10.0, 0.01, 1).unwrap();
            for (t, q) in traj.times().iter().zip(traj.coordinate(0)) {
                let exact = wrap_angle(q0 + 4.0 * PI * j * t);
                let diff = (q - exact).abs();
                assert!(diff.min(2.0 * PI - diff) < 1e-10, "t={t}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn real_eigenstate_is_frozen() {
        let m = active(RotorSpectrum::solve(300.0, 20).unwrap().with_kept_levels(3).unwrap(), 2, 2, 0.0, None);
        for k in 0..m.dim() {
            let s = PureState::eigenstate(&m, k).unwrap();
            let mut pilot = PilotWave::new(&m, &s).unwrap();
            let q0 = [3.0, 3.4];
            let traj = integrate(&mut pilot, &q0, 1.0, 0.01, 10).unwrap();
            for r in 0..traj.len() {
                for (a, b) in traj.position(r).iter().zip(q0) {
                    assert!((a - b).abs() <= 1e-14, "state {k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn integration_is_deterministic_and_uniform() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let guard = NodeGuard::density_only(DEFAULT_INTERFERENCE_FLOOR, None);
        let run = || integrate(&mut PilotWave::with_guard(&m, &s, guard).unwrap(), &[PI; 3], 2.0, 0.01, 5).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 41);
        for (k, t) in a.times().iter().enumerate() {
            assert_eq!(*t, (5 * k) as f64 * 0.01);
        }
        assert!(a.positions.iter().all(|q| (0.0..2.0 * PI).contains(q)));
        // t, t + h/2 and t + h are shared between stages and steps
        assert_eq!(a.diagnostics.amplitude_evaluations, 2 * 200 + 1);
    }

    #[test]
    fn fourth_order_convergence() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let end = |dt: f64| {
            let t = integrate(&mut PilotWave::new(&m, &s).unwrap(), &[PI; 3], 0.04, dt, 1).unwrap();
            t.position(t.len() - 1).to_vec()
        };
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let ends: Vec<Vec<f64>> = [0.004, 0.002, 0.001, 0.0005, 0.00025, 0.000125].iter().map(|&h| end(h)).collect();
        let d: Vec<f64> = ends.windows(2).map(|w| dist(&w[0], &w[1])).collect();
        let ratio = d[3] / d[4];
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn node_guard_halves_then_gives_up() {
        // an absurd mean-density floor forces halving everywhere
        let m = active(RotorSpectrum::solve(300.0, 20).unwrap(), 1, 1, 0.0, None);
        let s = PureState::new(m.hash(), vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let mut pilot = PilotWave::with_guard(&m, &s, NodeGuard::density_only(0.0, Some(1e6))).unwrap();
        let err = integrate(&mut pilot, &[PI], 0.01, 0.01, 1).unwrap_err();
        assert!(matches!(err, Error::NodeUnresolvable { depth: MAX_HALVING_DEPTH, .. }), "{err:?}");
        let guard = NodeGuard::density_only(DEFAULT_INTERFERENCE_FLOOR, None);
        let mut pilot = PilotWave::with_guard(&m, &s, guard).unwrap();
        let t = integrate(&mut pilot, &[PI + 0.1], 0.1, 0.01, 1).unwrap();
        assert_eq!(t.diagnostics.halved_steps, 0);
        assert!(t.diagnostics.min_density > 0.0);
        assert!(t.diagnostics.min_interference_ratio > 0.0 && t.diagnostics.min_interference_ratio <= 1.0);
    }

    #[test]
    fn stage_angle_cap_tracks_the_fine_step_solution() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let run = |guard: NodeGuard, dt: f64| {
            let t = integrate(&mut PilotWave::with_guard(&m, &s, guard).unwrap(), &[PI; 3], 0.4, dt, 1).unwrap();
            (t.position(t.len() - 1).to_vec(), t.diagnostics)
        };
        let loose = NodeGuard::density_only(DEFAULT_INTERFERENCE_FLOOR, None);
        let (exact, _) = run(loose, 1e-5);
        let capped = NodeGuard { max_stage_angle: Some(0.02), ..NodeGuard::default() };
        let (coarse, diag) = run(capped, 0.02);
        assert!(diag.halved_steps > 0 && diag.max_halving_depth > 0);
        let dist = |x: &[f64]| {
            x.iter().zip(&exact).map(|(p, q)| (p - q).abs().min(2.0 * PI - (p - q).abs())).fold(0.0, f64::max)
        };
        let (plain, _) = run(loose, 0.02);
        assert!(dist(&coarse) < 1e-4, "capped {}", dist(&coarse));
        assert!(dist(&coarse) < dist(&plain), "capped {} plain {}", dist(&coarse), dist(&plain));
    }

    #[test]
    fn interference_guard_separates_nodes_from_tails() {
        let m = active(RotorSpectrum::solve(300.0, 20).unwrap(), 1, 1, 0.0, None);
        // the phase of level 1 is chosen so that Psi(q, 0) is real; it then changes sign
        let rotor = m.basis().rotor();
        let (p0, _) = rotor.eval(0, PI + 0.3).unwrap();
        let (p1, _) = rotor.eval(1, PI + 0.3).unwrap();
        let s = PureState::new(m.hash(), vec![0.5, 0.5], vec![p0.arg(), p1.arg()]).unwrap();
        let mut pilot = PilotWave::new(&m, &s).unwrap();
        let re = |p: &mut PilotWave, q: f64| p.field(&[q], 0.0).psi.re;
        // level 1 is positive right of the well, so the node sits to the left
        let grid: Vec<f64> = (0..400).map(|k| PI - 0.005 * k as f64).collect();
        let k = grid.windows(2).position(|w| re(&mut pilot, w[0]) * re(&mut pilot, w[1]) < 0.0).unwrap();
        let (mut lo, mut hi) = (grid[k], grid[k + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if re(&mut pilot, lo) * re(&mut pilot, mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let node = pilot.field(&[lo], 0.0);
        assert!(node.interference_ratio() < 1e-12, "q={lo} {node:?}");
        assert!(matches!(pilot.velocity(&[lo], 0.0), Err(Error::NodeProximity { .. })));

        // deep in the barrier a lone eigenstate is tiny but free of cancellation
        let g = PureState::eigenstate(&m, 0).unwrap();
        let mut tail = PilotWave::new(&m, &g).unwrap();
        let (_, f) = tail.velocity(&[0.05], 0.0).unwrap();
        assert!(f.density() < 1e-12 / (2.0 * PI));
        assert_eq!(f.interference_ratio(), 1.0);
        let mut strict = PilotWave::with_guard(&m, &g, NodeGuard::density_only(0.0, Some(1e-12))).unwrap();
        assert!(strict.velocity(&[0.05], 0.0).is_err());
    }

    #[test]
    fn two_level_velocity_is_phase_gradient() {
        let m = active(RotorSpectrum::solve(300.0, 20).unwrap(), 1, 1, 0.0, None);
        let s = PureState::new(m.hash(), vec![0.6, 0.4], vec![0.3, 1.1]).unwrap();
        let mut pilot = PilotWave::new(&m, &s).unwrap();
        let t = 0.013;
        let h = 1e-6;
        for &q in &[2.7, 3.0, 3.3, 3.6] {
            let (v, _) = pilot.velocity(&[q], t).unwrap();
            let dphase = (pilot.field(&[q + h], t).psi / pilot.field(&[q - h], t).psi).arg() / (2.0 * h);
            assert!((v[0] - 4.0 * PI * dphase).abs() <= 1e-5 * v[0].abs().max(1.0), "q={q}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = coupled();
        let s = PureState::rpse(&m, &SeedTree::new(4), "rpse/0").unwrap();
        let t = integrate(&mut PilotWave::new(&m, &s).unwrap(), &[PI; 3], 0.5, 0.01, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        t.write_csv(&path, &CsvHeader::new("h")).unwrap();
        let (back, table) = BohmTrajectory::read_csv(&path).unwrap();
        assert_eq!(table.config_hash(), Some("h"));
        assert_eq!(back.times, t.times);
        assert_eq!(back.positions, t.positions);
        assert_eq!(back.record_interval(), t.record_interval());
    }
}
