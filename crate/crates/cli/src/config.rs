//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use koopman_core::basis::Backend;
use koopman_core::dynamics::{FlowSpec, ObservationMap};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory receiving CSVs and the manifest.
    pub output_dir: PathBuf,
    /// Reuse fitted kernels and bases across runs.
    #[serde(default = "yes")]
    pub cache: bool,
    /// Cache location; defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Seed for initial conditions that are not given explicitly.
    #[serde(default)]
    pub seed: u64,
    /// Required unless the trajectory is read from a file.
    #[serde(default)]
    pub flow: Option<FlowSpec>,
    pub trajectory: TrajectorySection,
    #[serde(default = "identity")]
    pub observation: ObservationMap,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub kernel: KernelSection,
    pub basis: BasisSection,
    pub tau: TauGrid,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub eigenfunctions: EigenfunctionSection,
    #[serde(default)]
    pub forecast: Option<ForecastSection>,
}

fn yes() -> bool {
    true
}

fn identity() -> ObservationMap {
    ObservationMap::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub n: usize,
    pub dt: f64,
    /// Initial state; drawn from `seed` when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Defaults to `n`.
    #[serde(default)]
    pub spinup_samples: Option<usize>,
    #[serde(default = "ten")]
    pub integrator_substeps: usize,
    /// CSV of states (header row, one sample per line) used instead of
    /// integrating `flow`. The first `n` rows are read.
    #[serde(default)]
    pub input_csv: Option<PathBuf>,
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Number of delays `Q`; 1 means no delay embedding.
    #[serde(default)]
    pub delays: Option<usize>,
}

impl EmbeddingSection {
    pub fn q(&self) -> usize {
        self.delays.unwrap_or(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub k_nn: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_tilde: Option<f64>,
    #[serde(default)]
    pub m_tilde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub l: usize,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub lanczos_tol: Option<f64>,
}

/// Geometric grid of `count` values from `min` to `max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauGrid {
    pub min: f64,
    pub max: f64,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

impl TauGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let last = self.count - 1;
        let ratio = self.max / self.min;
        (0..self.count)
            .map(|k| match k {
                0 => self.min,
                k if k == last => self.max,
                k => self.min * ratio.powf(k as f64 / last as f64),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "yes")]
    pub project_constants: bool,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            project_constants: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenfunctionSection {
    /// Ranks to export (0 is the constant mode, then ascending energy).
    #[serde(default)]
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    /// Observed components to forecast, named `x1`, `x2`, ...
    pub observables: Vec<String>,
    /// Projection truncation; defaults to `L`.
    #[serde(default)]
    pub l_prime: Option<usize>,
    /// Lead time used by the `forecast` subcommand; defaults to the first
    /// grid value.
    #[serde(default)]
    pub tau: Option<f64>,
    pub max_lead: f64,
    /// Lead-time spacing in samples.
    #[serde(default = "one")]
    pub lead_stride: usize,
    /// Verification samples; defaults to `trajectory.n`.
    #[serde(default)]
    pub n_hat: Option<usize>,
    #[serde(default)]
    pub verification_x0: Option<Vec<f64>>,
    /// CSV of verification states, used instead of integrating `flow`.
    #[serde(default)]
    pub verification_csv: Option<PathBuf>,
    /// Seeds whose full forecast trajectories are exported.
    #[serde(default)]
    pub export_seeds: Vec<usize>,
}

impl ForecastSection {
    /// Index of the observed component named `name`.
    pub fn component(name: &str, dim: usize) -> Option<usize> {
        let k: usize = name.strip_prefix('x')?.parse().ok()?;
        (1..=dim).contains(&k).then_some(k - 1)
    }
}

fn fail(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Reads and validates a config; relative paths inside it resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.cache_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.trajectory.input_csv.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.forecast.as_mut().and_then(|f| f.verification_csv.as_mut()) {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.flow.map(|f| f.dim())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.trajectory;
        let q = self.embedding.q();
        if q == 0 {
            return Err(fail("embedding.delays", "must be at least 1"));
        }
        if t.n < 3 + q - 1 {
            return Err(fail(
                "trajectory.n",
                format!("need at least 3 samples after delay embedding for finite differences, got N = {}", t.n),
            ));
        }
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return Err(fail("trajectory.dt", "must be positive"));
        }
        if t.integrator_substeps == 0 {
            return Err(fail("trajectory.integrator_substeps", "must be at least 1"));
        }
        match (&self.flow, &t.input_csv) {
            (None, None) => return Err(fail("flow", "required unless trajectory.input_csv is set")),
            (Some(flow), _) => {
                flow.validate().map_err(|e| fail("flow", e))?;
                if let Some(x0) = &t.x0 {
                    if x0.len() != flow.dim() {
                        return Err(fail("trajectory.x0", format!("expected {} values", flow.dim())));
                    }
                }
            }
            _ => {}
        }
        if let ObservationMap::TorusEmbedding { radius, .. } = self.observation {
            if !matches!(self.flow, Some(FlowSpec::Torus { .. }) | None) {
                return Err(fail("observation", "torus_embedding requires the torus flow"));
            }
            if !(radius > 0.0 && radius < 1.0) {
                return Err(fail("observation.radius", "must lie in (0, 1)"));
            }
        }
        let n_emb = t.n - q + 1;
        if let Some(k) = self.kernel.k_nn {
            if k == 0 || k > n_emb {
                return Err(fail("kernel.k_nn", format!("need 1 <= k_nn <= {n_emb}")));
            }
        }
        for (name, v) in [
            ("kernel.epsilon", self.kernel.epsilon),
            ("kernel.epsilon_tilde", self.kernel.epsilon_tilde),
            ("kernel.m_tilde", self.kernel.m_tilde),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(fail(name, "must be positive"));
                }
            }
        }
        if self.basis.l == 0 || self.basis.l > n_emb {
            return Err(fail("basis.l", format!("need 1 <= L <= {n_emb}")));
        }
        let g = &self.tau;
        if !(g.min > 0.0 && g.max >= g.min && g.max.is_finite()) || g.count == 0 {
            return Err(fail("tau", "need 0 < min <= max and count >= 1"));
        }
        if g.count > 1 && g.max == g.min {
            return Err(fail("tau", "a grid with count > 1 needs max > min"));
        }
        if self.eigenfunctions.ranks.iter().any(|&r| r >= self.basis.l) {
            return Err(fail("eigenfunctions.ranks", format!("ranks must be below L = {}", self.basis.l)));
        }
        if let Some(f) = &self.forecast {
            self.validate_forecast(f, n_emb)?;
        }
        Ok(())
    }

    fn validate_forecast(&self, f: &ForecastSection, n_emb: usize) -> Result<(), CliError> {
        if f.observables.is_empty() {
            return Err(fail("forecast.observables", "list at least one observable"));
        }
        let dim = self.data_dim();
        for name in &f.observables {
            if let Some(dim) = dim {
                if ForecastSection::component(name, dim).is_none() {
                    return Err(fail("forecast.observables", format!("unknown observable `{name}` (x1..x{dim})")));
                }
            }
        }
        if let Some(lp) = f.l_prime {
            if lp == 0 || lp > self.basis.l {
                return Err(fail("forecast.l_prime", format!("need 1 <= L' <= L = {}", self.basis.l)));
            }
        }
        if let Some(tau) = f.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(fail("forecast.tau", "must be positive"));
            }
        }
        if !(f.max_lead >= 0.0 && f.max_lead.is_finite()) || f.lead_stride == 0 {
            return Err(fail("forecast", "need max_lead >= 0 and lead_stride >= 1"));
        }
        let n_hat = f.n_hat.unwrap_or(self.trajectory.n);
        let steps = self.max_lead_steps();
        let q = self.embedding.q();
        if n_hat < q || n_hat - q + 1 <= steps {
            return Err(fail(
                "forecast.n_hat",
                format!("{n_hat} verification samples cannot cover {steps} lead steps"),
            ));
        }
        if f.verification_csv.is_none() && self.flow.is_none() {
            return Err(fail("forecast.verification_csv", "required when no flow is configured"));
        }
        let seeds = n_hat - q + 1 - steps;
        if let Some(&s) = f.export_seeds.iter().find(|&&s| s >= seeds) {
            return Err(fail("forecast.export_seeds", format!("seed {s} exceeds the {seeds} available seeds")));
        }
        let _ = n_emb;
        Ok(())
    }

    /// Dimension of the observed (possibly delay-embedded) data, if known
    /// without reading input files.
    pub fn data_dim(&self) -> Option<usize> {
        let base = self.observation.output_dim(self.state_dim()?);
        Some(base * self.embedding.q())
    }

    pub fn max_lead_steps(&self) -> usize {
        self.forecast
            .as_ref()
            .map(|f| (f.max_lead / self.trajectory.dt).round() as usize)
            .unwrap_or(0)
    }
}
