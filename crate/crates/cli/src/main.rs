//! `koopman`: experiment runner for the koopman-core pipeline.
//!
//! Exit codes: 0 success, 1 invalid input (config, points file, thread
//! count), 2 pipeline failure.

mod config;
mod output;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopman_core::forecast::{lead_steps, pointwise_modes, predict_many, project_observable, ForecastModel};
use koopman_core::{par, DMatrix};
use serde_json::json;

use config::{ExperimentConfig, ForecastSection};
use output::{num, Artifacts, CsvTable};
use pipeline::Timings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

#[derive(Parser)]
#[command(name = "koopman", version, about = "Koopman generator spectra and forecasts from trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, then write spectra, eigenfunctions and forecasts for every tau.
    Run { config: PathBuf },
    /// Write one combined spectrum table across the tau grid.
    SweepTau { config: PathBuf },
    /// Forecast skill at a single tau (`forecast.tau`, else the grid minimum).
    Forecast { config: PathBuf },
    /// Evaluate eigenfunctions and forecasts at user-supplied states.
    Eval {
        config: PathBuf,
        /// CSV with a header row and one state per line.
        #[arg(long)]
        at: PathBuf,
        /// Defaults to `forecast.tau`, else the grid minimum.
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("KOOPMAN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("KOOPMAN_THREADS must be a positive integer, got `{value}`")))?;
    par::set_threads(n).map_err(|e| CliError::Runtime(anyhow::anyhow!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config } => run(&config),
        Command::SweepTau { config } => sweep_tau(&config),
        Command::Forecast { config } => forecast(&config),
        Command::Eval { config, at, tau } => eval(&config, &at, tau),
    }
}

/// Data and fit, shared by all subcommands.
struct Prepared {
    cfg: ExperimentConfig,
    train: koopman_core::dynamics::ObservedSeries,
    fit: pipeline::FitBundle,
    cache: pipeline::CacheInfo,
    timings: Timings,
    artifacts: Artifacts,
}

fn prepare(path: &Path) -> Result<Prepared, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    pipeline::resolve_initial_conditions(&mut cfg);
    let mut timings = Timings::default();
    let artifacts = Artifacts::new(&cfg.output_dir)?;
    let train = timings.time("data", || pipeline::training_data(&cfg))?;
    let (fit, cache) = pipeline::fit(&cfg, &train, &mut timings)?;
    let l = fit.basis.len();
    if let Some(f) = cfg.forecast.as_mut() {
        f.l_prime = Some(f.l_prime.unwrap_or(l).min(l));
    }
    cfg.embedding.delays = Some(cfg.embedding.q());
    if cfg.kernel.k_nn.is_none() {
        cfg.kernel.k_nn = Some(fit.model.k_nn);
    }
    Ok(Prepared {
        cfg,
        train,
        fit,
        cache,
        timings,
        artifacts,
    })
}

fn manifest(p: &Prepared, command: &str, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "execution_mode": par::MODE,
        "threads": par::threads(),
        "config": p.cfg,
        "data": { "n": p.train.len(), "dim": p.train.dim() },
        "fit": pipeline::fit_summary(&p.fit, &p.cfg),
        "cache": p.cache,
        "outputs": p.artifacts.files,
        "timings_s": p.timings.0,
        "results": extra,
    })
}

fn forecast_section(cfg: &ExperimentConfig) -> Result<ForecastSection, CliError> {
    cfg.forecast
        .clone()
        .ok_or_else(|| CliError::Validation("this command needs a [forecast] section".into()))
}

fn run(path: &Path) -> Result<(), CliError> {
    let mut p = prepare(path)?;
    let cfg = p.cfg.clone();
    let verif = match &cfg.forecast {
        Some(f) => Some(p.timings.time("verification", || pipeline::verification(&cfg, f, &p.fit))?),
        None => None,
    };
    let mut per_tau = Vec::new();
    for (k, tau) in cfg.tau.values().into_iter().enumerate() {
        let spec = p.timings.time(&format!("spectrum_tau{k:02}"), || pipeline::spectrum_for(&cfg, &p.fit, tau))?;
        p.artifacts.write(&format!("spectrum_tau{k:02}.csv"), &pipeline::spectrum_table(&spec))?;
        if !cfg.eigenfunctions.ranks.is_empty() {
            let z = pipeline::training_modes(&p.fit, &spec);
            for &r in &cfg.eigenfunctions.ranks {
                if r < spec.len() {
                    let t = pipeline::eigenfunction_table(&z, &spec, r, cfg.trajectory.dt);
                    p.artifacts.write(&format!("eigenfunction_tau{k:02}_j{r}.csv"), &t)?;
                }
            }
        }
        let mut skill = serde_json::Map::new();
        if let (Some(f), Some(v)) = (&cfg.forecast, &verif) {
            let z = pointwise_modes(&v.psi, &p.fit.basis, &spec);
            for name in &f.observables {
                let out = p.timings.time(&format!("forecast_tau{k:02}_{name}"), || {
                    pipeline::forecast_observable(&cfg, f, &p.fit, &spec, &p.train, v, &z, name)
                })?;
                p.artifacts.write(&format!("forecast_tau{k:02}_{name}.csv"), &out.skill)?;
                if out.trajectories.len() > 0 {
                    p.artifacts.write(&format!("trajectory_tau{k:02}_{name}.csv"), &out.trajectories)?;
                }
                skill.insert(name.clone(), json!({ "epsilon_last": out.epsilon.last() }));
            }
        }
        let lowest: Vec<f64> = spec.positive_modes().take(5).map(|j| spec.omega[j]).collect();
        log::info!("tau = {tau:.3e}: lowest-energy positive frequencies {lowest:.4?}");
        per_tau.push(json!({ "index": k, "tau": tau, "lowest_positive_frequencies": lowest, "forecast": skill }));
    }
    let m = manifest(&p, "run", json!({ "tau": per_tau }));
    p.artifacts.write_manifest("manifest_run.json", &m)?;
    Ok(())
}

fn sweep_tau(path: &Path) -> Result<(), CliError> {
    let mut p = prepare(path)?;
    let cfg = p.cfg.clone();
    let mut table = CsvTable::new(&["tau", "j", "omega", "dirichlet"]);
    let mut failures = Vec::new();
    let start = std::time::Instant::now();
    for tau in cfg.tau.values() {
        match pipeline::spectrum_for(&cfg, &p.fit, tau) {
            Ok(spec) => {
                for (rank, &m) in spec.order.iter().enumerate() {
                    table.push_row(vec![num(tau), rank.to_string(), num(spec.omega[m]), num(spec.dirichlet[m])]);
                }
            }
            Err(e) => {
                log::warn!("sweep: {e:#}");
                failures.push(json!({ "tau": tau, "error": format!("{e:#}") }));
            }
        }
    }
    p.timings.0.push(("sweep".into(), start.elapsed().as_secs_f64()));
    p.artifacts.write("tau_sweep.csv", &table)?;
    let m = manifest(&p, "sweep-tau", json!({ "taus": cfg.tau.values(), "failures": failures }));
    p.artifacts.write_manifest("manifest_sweep_tau.json", &m)?;
    Ok(())
}

fn single_tau(cfg: &ExperimentConfig, explicit: Option<f64>) -> Result<f64, CliError> {
    let tau = explicit
        .or_else(|| cfg.forecast.as_ref().and_then(|f| f.tau))
        .unwrap_or(cfg.tau.min);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CliError::Validation(format!("tau must be positive, got {tau}")));
    }
    Ok(tau)
}

fn forecast(path: &Path) -> Result<(), CliError> {
    let mut p = prepare(path)?;
    let cfg = p.cfg.clone();
    let f = forecast_section(&cfg)?;
    let tau = single_tau(&cfg, None)?;
    let verif = p.timings.time("verification", || pipeline::verification(&cfg, &f, &p.fit))?;
    let spec = p.timings.time("spectrum", || pipeline::spectrum_for(&cfg, &p.fit, tau))?;
    let z = pointwise_modes(&verif.psi, &p.fit.basis, &spec);
    let mut skill = serde_json::Map::new();
    for name in &f.observables {
        let out = p.timings.time(&format!("forecast_{name}"), || {
            pipeline::forecast_observable(&cfg, &f, &p.fit, &spec, &p.train, &verif, &z, name)
        })?;
        p.artifacts.write(&format!("forecast_{name}.csv"), &out.skill)?;
        if out.trajectories.len() > 0 {
            p.artifacts.write(&format!("trajectory_{name}.csv"), &out.trajectories)?;
        }
        skill.insert(name.clone(), json!({ "epsilon": out.epsilon }));
    }
    let m = manifest(&p, "forecast", json!({ "tau": tau, "forecast": skill }));
    p.artifacts.write_manifest("manifest_forecast.json", &m)?;
    Ok(())
}

/// Query points in data space; state-space points are observed first when
/// no delay embedding is configured.
fn query_points(cfg: &ExperimentConfig, raw: DMatrix<f64>, data_dim: usize) -> Result<DMatrix<f64>, CliError> {
    if raw.ncols() == data_dim {
        return Ok(raw);
    }
    if let Some(sd) = cfg.state_dim() {
        if raw.ncols() == sd && cfg.embedding.q() == 1 {
            let obs = koopman_core::dynamics::observe_states(&cfg.observation, &raw)
                .map_err(|e| CliError::Validation(format!("points: {e}")))?;
            return Ok(obs.values);
        }
    }
    Err(CliError::Validation(format!(
        "points have {} columns; expected {data_dim} (data space){}",
        raw.ncols(),
        cfg.state_dim().map(|d| format!(" or {d} (state space)")).unwrap_or_default()
    )))
}

fn eval(path: &Path, at: &Path, tau: Option<f64>) -> Result<(), CliError> {
    let cfg0 = ExperimentConfig::load(path)?;
    let tau = single_tau(&cfg0, tau)?;
    let raw = pipeline::read_states_csv(at, None).map_err(|e| CliError::Validation(format!("{e:#}")))?;
    let mut p = prepare(path)?;
    let cfg = p.cfg.clone();
    let points = query_points(&cfg, raw, p.train.dim())?;
    let psi = p.timings.time("nystrom", || {
        koopman_core::basis::nystrom_eval(&points, &p.fit.model, &p.fit.basis)
    });
    let psi = psi.map_err(|e| CliError::Runtime(anyhow::Error::from(e).context("out-of-sample evaluation")))?;
    let spec = pipeline::spectrum_for(&cfg, &p.fit, tau)?;
    let z = pointwise_modes(&psi, &p.fit.basis, &spec);

    let ranks: Vec<usize> = if cfg.eigenfunctions.ranks.is_empty() {
        (0..spec.len().min(10)).collect()
    } else {
        cfg.eigenfunctions.ranks.clone()
    };
    let mut table = CsvTable::new(&["point_index", "j", "omega", "re_zeta", "im_zeta"]);
    for i in 0..z.nrows() {
        for &r in ranks.iter().filter(|&&r| r < spec.len()) {
            let m = spec.order[r];
            table.push_row(vec![i.to_string(), r.to_string(), num(spec.omega[m]), num(z[(i, m)].re), num(z[(i, m)].im)]);
        }
    }
    p.artifacts.write("eval_eigenfunctions.csv", &table)?;

    if let Some(f) = &cfg.forecast {
        let steps = lead_steps(cfg.max_lead_steps(), f.lead_stride);
        let times: Vec<f64> = steps.iter().map(|&s| s as f64 * cfg.trajectory.dt).collect();
        let mut table = CsvTable::new(&["point_index", "observable", "lead_time", "prediction"]);
        for name in &f.observables {
            let k = ForecastSection::component(name, p.train.dim())
                .ok_or_else(|| CliError::Validation(format!("unknown observable `{name}`")))?;
            let lp = f.l_prime.unwrap_or(p.fit.basis.len());
            let c = project_observable(&p.train.component(k), &p.fit.basis, lp).map_err(anyhow::Error::from)?;
            let model = ForecastModel::new(c, lp, &p.fit.basis, &spec).map_err(anyhow::Error::from)?;
            let pred = predict_many(&model, &z, &times);
            for i in 0..z.nrows() {
                for (c, t) in times.iter().enumerate() {
                    table.push_row(vec![i.to_string(), name.clone(), num(*t), num(pred[(i, c)])]);
                }
            }
        }
        p.artifacts.write("eval_forecast.csv", &table)?;
    }
    let m = manifest(&p, "eval", json!({ "tau": tau, "points": at, "n_points": z.nrows() }));
    p.artifacts.write_manifest("manifest_eval.json", &m)?;
    Ok(())
}
