//! Experiment configuration: one flat key-value file (TOML, or JSON) drives a run.
//!
//! The config hash covers every field except `output_dir`, so moving outputs
//! does not change their provenance stamp.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bohm::NodeGuard;
use crate::error::{Error, Result};
use crate::many_body::{Cutoff, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of rotors.
    pub n: usize,
    /// Barrier height of `u (1 + cos q) / 2`.
    pub u: f64,
    /// Plane waves `|j| <= j_max` per rotor.
    pub j_max: usize,
    /// Single-rotor levels entering product states.
    pub kept_levels: usize,
    pub sigma_v: f64,
    /// Random potentials carry `2 L + 1` Fourier components.
    pub l_max: usize,
    pub master_seed: u64,
    /// Zero-order energy cutoff of the product basis.
    pub e_tr: f64,
    /// Larger cutoff for the truncation audit; `None` skips the audit.
    pub e_tr_audit: Option<f64>,
    /// Active-space energy cutoff.
    pub e_max: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Record every `record_stride` steps.
    pub record_stride: usize,
    /// Initial angle of every rotor.
    pub initial_angle: f64,
    /// Seed stream of the random pure state.
    pub state_stream: String,
    pub node_guard: NodeGuard,
    pub subsystem: usize,
    /// Subsystem levels kept in reduced density matrices; `None` uses every level in the basis.
    pub subsystem_levels: Option<usize>,
    /// Histogram and marginal grid.
    pub bins: usize,
    pub convergence_threshold: f64,
    /// `tau_c` is the first lag with `|G| < correlation_fraction G(0)`.
    pub correlation_fraction: f64,
    /// Longest lag of `G`, in time units.
    pub max_lag: f64,
    /// Spacing of evaluated lags, in time units; a multiple of the record interval.
    pub lag_step: f64,
    /// `|G| / G(0)` is reported as a maximum over lags from here on, in time units.
    pub correlation_tail_from: f64,
    /// Discarded prefix, in correlation times.
    pub burn_in_correlation_times: f64,
    pub conditional_source_bins: usize,
    pub conditional_target_bins: usize,
    pub conditional_min_samples: u64,
    /// Lag of the conditional-relaxation check, in correlation times.
    pub conditional_lag_correlation_times: f64,
    /// Lag of the Chapman-Kolmogorov check, in time units.
    pub chapman_kolmogorov_lag: f64,
    pub chapman_kolmogorov_bins: usize,
    /// Times of the `p(q, t)` snapshots.
    pub snapshot_times: Vec<f64>,
    /// Canonical comparison column of the level populations.
    pub canonical_beta: f64,
    /// Window observable `[lo, hi]` for the fluctuation report.
    pub window: [f64; 2],
    pub fluctuation_draws: usize,
    /// Times sampled for the per-state fluctuation series.
    pub fluctuation_times: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 6,
            u: 300.0,
            j_max: 20,
            kept_levels: 10,
            sigma_v: 1.0,
            l_max: 100,
            master_seed: 2024,
            e_tr: 154.0,
            e_tr_audit: Some(171.0),
            e_max: 139.0,
            dt: 0.01,
            t_end: 2000.0,
            record_stride: 1,
            initial_angle: PI,
            state_stream: "rpse/0".into(),
            node_guard: NodeGuard::default(),
            subsystem: 0,
            subsystem_levels: None,
            bins: 10_000,
            convergence_threshold: 0.02,
            correlation_fraction: 0.2,
            max_lag: 50.0,
            lag_step: 0.05,
            correlation_tail_from: 10.0,
            burn_in_correlation_times: 10.0,
            conditional_source_bins: 50,
            conditional_target_bins: 200,
            conditional_min_samples: 100,
            conditional_lag_correlation_times: 5.0,
            chapman_kolmogorov_lag: 1.0,
            chapman_kolmogorov_bins: 20,
            snapshot_times: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            canonical_beta: 0.0376,
            window: [PI - 0.5, PI + 0.5],
            fluctuation_draws: 200,
            fluctuation_times: 400,
            output_dir: None,
        }
    }
}

fn hash_json(value: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so the text is canonical
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one field from its textual value, parsed as a TOML value
    /// (bare strings are accepted for string fields).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let (head, rest) = key.split_once('.').map_or((key, None), |(h, r)| (h, Some(r)));
        match rest {
            None => {
                table.insert(head.to_string(), parsed);
            }
            Some(field) => {
                let entry = table.entry(head.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
                let inner = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{head} is not a table")))?;
                inner.insert(field.to_string(), parsed);
            }
        }
        let next: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if self.kept_levels == 0 || self.kept_levels > 2 * self.j_max + 1 {
            return fail(format!("kept_levels must lie in 1..={}", 2 * self.j_max + 1));
        }
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || self.record_stride == 0 {
            return fail("need dt > 0, t_end >= 0 and record_stride >= 1".into());
        }
        let steps = self.t_end / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return fail(format!("t_end = {} is not a multiple of dt = {}", self.t_end, self.dt));
        }
        // TOML integers are signed 64-bit
        if self.master_seed > i64::MAX as u64 {
            return fail(format!("master_seed must not exceed {}", i64::MAX));
        }
        if self.subsystem >= self.n {
            return fail(format!("subsystem {} out of range for {} rotors", self.subsystem, self.n));
        }
        if self.bins == 0 || self.conditional_source_bins == 0 || self.conditional_target_bins == 0 {
            return fail("bin counts must be positive".into());
        }
        if self.chapman_kolmogorov_bins == 0 {
            return fail("chapman_kolmogorov_bins must be positive".into());
        }
        if !(self.correlation_fraction > 0.0 && self.correlation_fraction < 1.0) {
            return fail("correlation_fraction must lie in (0, 1)".into());
        }
        if !(self.max_lag > 0.0 && self.lag_step > 0.0) {
            return fail("max_lag and lag_step must be positive".into());
        }
        if !(self.window[0] < self.window[1]) {
            return fail("window must satisfy lo < hi".into());
        }
        if let Some(a) = self.e_tr_audit {
            if !(a > self.e_tr) {
                return fail(format!("e_tr_audit = {a} must exceed e_tr = {}", self.e_tr));
            }
        }
        Ok(())
    }

    /// Hash of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        hash_json(&v)
    }

    /// Hash of the fields that determine the many-body spectrum at cutoff `e_tr`.
    pub fn spectrum_hash(&self, e_tr: f64) -> String {
        let v = serde_json::json!({
            "n": self.n,
            "u": self.u,
            "j_max": self.j_max,
            "kept_levels": self.kept_levels,
            "sigma_v": self.sigma_v,
            "l_max": self.l_max,
            "master_seed": self.master_seed,
            "e_tr": e_tr,
        });
        hash_json(&v)
    }

    pub fn model(&self, e_tr: f64) -> ModelParams {
        ModelParams {
            n: self.n,
            u: self.u,
            j_max: self.j_max,
            kept_levels: self.kept_levels,
            sigma_v: self.sigma_v,
            l_max: self.l_max,
            master_seed: self.master_seed,
            cutoff: Cutoff::Energy(e_tr),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Samples per lag step.
    pub fn lag_stride(&self) -> Result<usize> {
        per_record(self.lag_step, self.record_interval(), "lag_step")
    }

    pub fn record_interval(&self) -> f64 {
        self.dt * self.record_stride as f64
    }
}

/// `span` as a whole number of record intervals.
pub fn per_record(span: f64, interval: f64, what: &str) -> Result<usize> {
    let k = span / interval;
    if k < 0.5 || (k - k.round()).abs() > 1e-6 * k {
        return Err(Error::Config(format!("{what} = {span} is not a positive multiple of the record interval {interval}")));
    }
    Ok(k.round() as usize)
}
