//! Stages shared by the subcommands: data, fit (cached), spectra, forecasts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use koopman_core::basis::{eigenbasis, nystrom_eval, BasisOptions, EigenBasis};
use koopman_core::dynamics::{delay_embed, observe_states, trajectory, FlowSpec, ObservedSeries, TrajectoryConfig};
use koopman_core::forecast::{lead_steps, pointwise_modes, predict_many, project_observable, verify, ForecastModel};
use koopman_core::generator::{spectrum, GeneratorOptions, GeneratorSpectrum};
use koopman_core::kernel::{BandwidthOverrides, KernelConfig, KernelModel};
use koopman_core::linalg::LanczosOptions;
use koopman_core::{DMatrix, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ForecastSection};
use crate::output::CsvTable;

/// Wall-clock seconds per stage, in execution order.
#[derive(Default, Serialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Initial conditions, drawn from the seed when not configured. The
/// training draw always comes first so both are stable under edits to the
/// other.
pub fn resolve_initial_conditions(cfg: &mut ExperimentConfig) {
    let Some(flow) = cfg.flow else { return };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = draw_state(&flow, &mut rng);
    let verif = draw_state(&flow, &mut rng);
    cfg.trajectory.x0.get_or_insert(train);
    if cfg.trajectory.spinup_samples.is_none() {
        cfg.trajectory.spinup_samples = Some(cfg.trajectory.n);
    }
    if let Some(f) = cfg.forecast.as_mut() {
        if f.verification_csv.is_none() {
            f.verification_x0.get_or_insert(verif);
        }
    }
}

fn draw_state(flow: &FlowSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    match flow {
        FlowSpec::Torus { .. } => vec![u(0.0, std::f64::consts::TAU), u(0.0, std::f64::consts::TAU)],
        FlowSpec::Lorenz63 { .. } => vec![u(-10.0, 10.0), u(-10.0, 10.0), u(10.0, 40.0)],
        FlowSpec::Rossler { .. } => vec![u(-5.0, 5.0), u(-5.0, 5.0), u(0.0, 1.0)],
    }
}

/// States from a CSV with a header row; the first `n` rows are used.
pub fn read_states_csv(path: &Path, n: Option<usize>) -> anyhow::Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        if n.is_some_and(|n| rows.len() == n) {
            break;
        }
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(anyhow!("{}: row {} has {} columns, expected {}", path.display(), i + 1, row.len(), first.len()));
            }
        }
        rows.push(row);
    }
    if let Some(n) = n {
        if rows.len() < n {
            return Err(anyhow!("{}: need {n} rows, found {}", path.display(), rows.len()));
        }
    }
    let m = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || m == 0 {
        return Err(anyhow!("{}: no data rows", path.display()));
    }
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]))
}

/// Trajectory (integrated or read), observed and delay-embedded.
fn series(cfg: &ExperimentConfig, x0: Option<&Vec<f64>>, csv: Option<&PathBuf>, n: usize) -> anyhow::Result<ObservedSeries> {
    let states = match csv {
        Some(path) => read_states_csv(path, Some(n))?,
        None => {
            let flow = cfg.flow.ok_or_else(|| anyhow!("no flow configured"))?;
            let t = &cfg.trajectory;
            let tc = TrajectoryConfig {
                x0: x0.cloned().ok_or_else(|| anyhow!("initial condition unresolved"))?,
                n,
                dt: t.dt,
                spinup_samples: t.spinup_samples.unwrap_or(t.n),
                integrator_substeps: t.integrator_substeps,
            };
            trajectory(&flow, &tc)?.states
        }
    };
    let observed = observe_states(&cfg.observation, &states)?;
    Ok(delay_embed(&observed, cfg.embedding.q())?)
}

pub fn training_data(cfg: &ExperimentConfig) -> anyhow::Result<ObservedSeries> {
    series(cfg, cfg.trajectory.x0.as_ref(), cfg.trajectory.input_csv.as_ref(), cfg.trajectory.n).context("training data")
}

pub fn verification_data(cfg: &ExperimentConfig, f: &ForecastSection) -> anyhow::Result<ObservedSeries> {
    let n = f.n_hat.unwrap_or(cfg.trajectory.n);
    series(cfg, f.verification_x0.as_ref(), f.verification_csv.as_ref(), n).context("verification data")
}

/// Everything downstream stages need from the kernel and basis fit.
#[derive(Serialize, Deserialize)]
pub struct FitBundle {
    pub model: KernelModel,
    pub basis: EigenBasis,
    pub markov_residual: f64,
}

#[derive(Serialize)]
pub struct CacheInfo {
    pub enabled: bool,
    pub key: String,
    pub path: PathBuf,
    pub hit: bool,
}

/// Content hash of everything that determines the fit.
pub fn cache_key(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    let input_digest = match &cfg.trajectory.input_csv {
        Some(p) => {
            let mut bytes = Vec::new();
            File::open(p)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .with_context(|| format!("reading {}", p.display()))?;
            Some(hex::encode(Sha256::digest(&bytes)))
        }
        None => None,
    };
    let upstream = serde_json::json!({
        "format": "fit-v1",
        "core": env!("CARGO_PKG_VERSION"),
        "flow": cfg.flow,
        "trajectory": cfg.trajectory,
        "input_digest": input_digest,
        "observation": cfg.observation,
        "embedding": cfg.embedding,
        "kernel": cfg.kernel,
        "basis": cfg.basis,
    });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&upstream)?)))
}

pub fn kernel_config(cfg: &ExperimentConfig) -> KernelConfig {
    KernelConfig {
        k_nn: cfg.kernel.k_nn,
        overrides: BandwidthOverrides {
            epsilon: cfg.kernel.epsilon,
            epsilon_tilde: cfg.kernel.epsilon_tilde,
            m_tilde: cfg.kernel.m_tilde,
        },
    }
}

fn basis_options(cfg: &ExperimentConfig) -> BasisOptions {
    let mut lanczos = LanczosOptions::default();
    if let Some(tol) = cfg.basis.lanczos_tol {
        lanczos.tol = tol;
    }
    BasisOptions {
        backend: cfg.basis.backend,
        lanczos,
    }
}

/// Fits the kernel and basis, or loads them from the cache.
pub fn fit(cfg: &ExperimentConfig, train: &ObservedSeries, timings: &mut Timings) -> anyhow::Result<(FitBundle, CacheInfo)> {
    let key = cache_key(cfg)?;
    let path = cfg.cache_dir().join(format!("{key}.bin"));
    if cfg.cache && path.exists() {
        let loaded = timings.time("fit_cached", || -> anyhow::Result<FitBundle> {
            let reader = BufReader::new(File::open(&path)?);
            Ok(bincode::deserialize_from(reader)?)
        });
        match loaded {
            Ok(bundle) => {
                log::info!("fit: loaded from cache {}", path.display());
                return Ok((bundle, CacheInfo { enabled: true, key, path, hit: true }));
            }
            Err(e) => log::warn!("fit: ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let (model, kf) = timings.time("kernel", || KernelModel::fit(&train.values, &kernel_config(cfg))).context("kernel")?;
    let markov_residual = kf.markov_residual();
    let basis = timings
        .time("basis", || eigenbasis(&kf, cfg.basis.l, &basis_options(cfg)))
        .context("basis")?;
    drop(kf);
    let bundle = FitBundle {
        model,
        basis,
        markov_residual,
    };
    if cfg.cache {
        std::fs::create_dir_all(cfg.cache_dir())?;
        let tmp = path.with_extension("tmp");
        {
            let writer = BufWriter::new(File::create(&tmp)?);
            bincode::serialize_into(writer, &bundle)?;
        }
        std::fs::rename(&tmp, &path)?;
    }
    Ok((bundle, CacheInfo { enabled: cfg.cache, key, path, hit: false }))
}

pub fn generator_options(cfg: &ExperimentConfig) -> GeneratorOptions {
    GeneratorOptions {
        project_constants: cfg.generator.project_constants,
    }
}

pub fn spectrum_for(cfg: &ExperimentConfig, fit: &FitBundle, tau: f64) -> anyhow::Result<GeneratorSpectrum> {
    spectrum(&fit.basis, tau, cfg.trajectory.dt, &generator_options(cfg)).with_context(|| format!("spectrum at tau = {tau:e}"))
}

/// Rows `(j, omega, dirichlet, tau)` in ranking order; `j` is the rank.
pub fn spectrum_table(spec: &GeneratorSpectrum) -> CsvTable {
    let mut t = CsvTable::new(&["j", "omega", "dirichlet", "tau"]);
    for (rank, &m) in spec.order.iter().enumerate() {
        t.push_row(vec![rank.to_string(), crate::output::num(spec.omega[m]), crate::output::num(spec.dirichlet[m]), crate::output::num(spec.tau)]);
    }
    t
}

/// Eigenfunction values at the training samples: `Ψ = Φ Λ^{1/2}` there.
pub fn training_modes(fit: &FitBundle, spec: &GeneratorSpectrum) -> DMatrix<C64> {
    let b = &fit.basis;
    let mut psi = b.phi.clone();
    for (mut col, &l) in psi.column_iter_mut().zip(&b.lambda) {
        col *= l.sqrt();
    }
    pointwise_modes(&psi, b, spec)
}

pub fn eigenfunction_table(z: &DMatrix<C64>, spec: &GeneratorSpectrum, rank: usize, dt: f64) -> CsvTable {
    let m = spec.order[rank];
    let mut t = CsvTable::new(&["sample_index", "t", "re_zeta", "im_zeta"]);
    for (i, v) in z.column(m).iter().enumerate() {
        t.push_row(vec![i.to_string(), crate::output::num(i as f64 * dt), crate::output::num(v.re), crate::output::num(v.im)]);
    }
    t
}

/// Forecast products for one observable at one `τ`.
pub struct ForecastOutput {
    pub skill: CsvTable,
    pub trajectories: CsvTable,
    pub epsilon: Vec<f64>,
}

pub struct Verification {
    pub data: ObservedSeries,
    pub psi: DMatrix<f64>,
}

pub fn verification(cfg: &ExperimentConfig, f: &ForecastSection, fit: &FitBundle) -> anyhow::Result<Verification> {
    let data = verification_data(cfg, f)?;
    let psi = nystrom_eval(&data.values, &fit.model, &fit.basis).context("out-of-sample basis evaluation")?;
    Ok(Verification { data, psi })
}

pub fn forecast_observable(
    cfg: &ExperimentConfig,
    f: &ForecastSection,
    fit: &FitBundle,
    spec: &GeneratorSpectrum,
    train: &ObservedSeries,
    verif: &Verification,
    z: &DMatrix<C64>,
    name: &str,
) -> anyhow::Result<ForecastOutput> {
    let k = ForecastSection::component(name, train.dim()).ok_or_else(|| anyhow!("unknown observable `{name}`"))?;
    let l_prime = f.l_prime.unwrap_or(fit.basis.len()).min(fit.basis.len());
    let c = project_observable(&train.component(k), &fit.basis, l_prime)?;
    let model = ForecastModel::new(c, l_prime, &fit.basis, spec)?;
    let steps = lead_steps(cfg.max_lead_steps(), f.lead_stride);
    let truth = verif.data.component(k);
    let dt = cfg.trajectory.dt;
    let res = verify(&model, z, &truth, &steps, dt)?;

    let mut skill = CsvTable::new(&["lead_time", "epsilon"]);
    for (t, e) in res.lead_times.iter().zip(&res.epsilon) {
        skill.push_row(vec![crate::output::num(*t), crate::output::num(*e)]);
    }
    let mut trajectories = CsvTable::new(&["seed_index", "lead_time", "truth", "prediction"]);
    if !f.export_seeds.is_empty() {
        let rows = DMatrix::from_fn(f.export_seeds.len(), z.ncols(), |r, c| z[(f.export_seeds[r], c)]);
        let times: Vec<f64> = steps.iter().map(|&s| s as f64 * dt).collect();
        let pred = predict_many(&model, &rows, &times);
        for (r, &seed) in f.export_seeds.iter().enumerate() {
            for (col, &s) in steps.iter().enumerate() {
                trajectories.push_row(vec![
                    seed.to_string(),
                    crate::output::num(times[col]),
                    crate::output::num(truth[seed + s]),
                    crate::output::num(pred[(r, col)]),
                ]);
            }
        }
    }
    Ok(ForecastOutput {
        skill,
        trajectories,
        epsilon: res.epsilon,
    })
}

/// Kernel and basis summary for the manifest.
pub fn fit_summary(fit: &FitBundle, cfg: &ExperimentConfig) -> BTreeMap<&'static str, serde_json::Value> {
    let bw = &fit.model.bandwidth;
    let b = &fit.basis;
    BTreeMap::from([
        ("k_nn", serde_json::json!(fit.model.k_nn)),
        ("epsilon", serde_json::json!(bw.epsilon)),
        ("epsilon_tilde", serde_json::json!(bw.epsilon_tilde)),
        ("m_tilde", serde_json::json!(bw.m_tilde)),
        ("markov_residual", serde_json::json!(fit.markov_residual)),
        ("l_requested", serde_json::json!(cfg.basis.l)),
        ("l", serde_json::json!(b.len())),
        ("lambda_first", serde_json::json!(b.lambda.first())),
        ("lambda_last", serde_json::json!(b.lambda.last())),
        ("backend", serde_json::json!(cfg.basis.backend)),
    ])
}
