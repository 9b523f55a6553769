//! Benchmark flows, observation maps, and delay embedding.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One of the three benchmark flows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSpec {
    /// Linear rotation on the 2-torus with frequencies in rad/time.
    Torus { alpha1: f64, alpha2: f64 },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
}

impl FlowSpec {
    /// Rotation with frequencies `1` and `sqrt(30)`.
    pub fn torus_standard() -> Self {
        FlowSpec::Torus {
            alpha1: 1.0,
            alpha2: 30f64.sqrt(),
        }
    }

    pub fn lorenz63_standard() -> Self {
        FlowSpec::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn rossler_standard() -> Self {
        FlowSpec::Rossler {
            a: 0.1,
            b: 0.1,
            c: 14.0,
        }
    }

    /// State-space dimension.
    pub fn dim(&self) -> usize {
        match self {
            FlowSpec::Torus { .. } => 2,
            _ => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params: &[f64] = match self {
            FlowSpec::Torus { alpha1, alpha2 } => {
                if !(*alpha1 > 0.0 && *alpha2 > 0.0) {
                    return Err(invalid("alpha", "torus frequencies must be strictly positive"));
                }
                &[*alpha1, *alpha2]
            }
            FlowSpec::Lorenz63 { sigma, rho, beta } => &[*sigma, *rho, *beta],
            FlowSpec::Rossler { a, b, c } => &[*a, *b, *c],
        };
        if params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(invalid("flow", "parameters must be finite"))
        }
    }
}

/// Sampling parameters for a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub x0: Vec<f64>,
    pub n: usize,
    pub dt: f64,
    /// Number of `dt` intervals integrated and discarded before sampling.
    /// Ignored by the analytic torus flow.
    pub spinup_samples: usize,
    /// Fixed RK4 steps per sampling interval.
    pub integrator_substeps: usize,
}

impl TrajectoryConfig {
    /// Defaults: spinup of `n` samples, 10 RK4 substeps.
    pub fn new(x0: Vec<f64>, n: usize, dt: f64) -> Self {
        Self {
            x0,
            n,
            dt,
            spinup_samples: n,
            integrator_substeps: 10,
        }
    }

    pub fn validate(&self, flow: &FlowSpec) -> Result<()> {
        if self.n < 2 {
            return Err(invalid("n", format!("need at least 2 samples, got {}", self.n)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.integrator_substeps == 0 {
            return Err(invalid("integrator_substeps", "must be at least 1"));
        }
        if self.x0.len() != flow.dim() {
            return Err(Error::DimensionMismatch {
                expected: flow.dim(),
                got: self.x0.len(),
            });
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(invalid("x0", "initial state must be finite"));
        }
        Ok(())
    }
}

/// Time-ordered states, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

/// Values of an observation map along a trajectory, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    pub values: DMatrix<f64>,
}

impl ObservedSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Column `k` as a vector.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.column(k).iter().copied().collect()
    }
}

fn field3(flow: &FlowSpec, s: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = s;
    match *flow {
        FlowSpec::Lorenz63 { sigma, rho, beta } => {
            [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
        }
        FlowSpec::Rossler { a, b, c } => [-y - z, x + a * y, b + z * (x - c)],
        FlowSpec::Torus { .. } => unreachable!("torus has no vector field"),
    }
}

/// Vector field of the Lorenz 63 or Rössler flow at `state`.
pub fn vector_field(flow: &FlowSpec, state: &[f64]) -> Result<[f64; 3]> {
    if matches!(flow, FlowSpec::Torus { .. }) {
        return Err(Error::TorusHasNoVectorField);
    }
    let s: [f64; 3] = state.try_into().map_err(|_| Error::DimensionMismatch {
        expected: 3,
        got: state.len(),
    })?;
    Ok(field3(flow, s))
}

fn rk4_step(flow: &FlowSpec, s: [f64; 3], h: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
    let k1 = field3(flow, s);
    let k2 = field3(flow, add(s, k1, h / 2.0));
    let k3 = field3(flow, add(s, k2, h / 2.0));
    let k4 = field3(flow, add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Integrates Lorenz 63 or Rössler with fixed-step classical RK4.
///
/// `spinup_samples * dt` time units are discarded first; the returned
/// trajectory holds `n` states spaced `dt` apart.
pub fn integrate(flow: &FlowSpec, cfg: &TrajectoryConfig) -> Result<Trajectory> {
    flow.validate()?;
    if matches!(flow, FlowSpec::Torus { .. }) {
        return Err(Error::TorusHasNoVectorField);
    }
    cfg.validate(flow)?;
    let h = cfg.dt / cfg.integrator_substeps as f64;
    let mut s: [f64; 3] = [cfg.x0[0], cfg.x0[1], cfg.x0[2]];
    let mut step = 0usize;
    let mut advance = |s: &mut [f64; 3]| -> Result<()> {
        for _ in 0..cfg.integrator_substeps {
            *s = rk4_step(flow, *s, h);
            step += 1;
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::BlowUp { step });
            }
        }
        Ok(())
    };
    for _ in 0..cfg.spinup_samples {
        advance(&mut s)?;
    }
    let mut states = DMatrix::zeros(cfg.n, 3);
    for n in 0..cfg.n {
        if n > 0 {
            advance(&mut s)?;
        }
        for k in 0..3 {
            states[(n, k)] = s[k];
        }
    }
    Ok(Trajectory { states, dt: cfg.dt })
}

/// Samples the torus rotation analytically; angles live in `[0, 2π)`.
pub fn torus_trajectory(flow: &FlowSpec, cfg: &TrajectoryConfig) -> Result<Trajectory> {
    flow.validate()?;
    let FlowSpec::Torus { alpha1, alpha2 } = *flow else {
        return Err(invalid("flow", "torus_trajectory requires the torus flow"));
    };
    cfg.validate(flow)?;
    let mut states = DMatrix::zeros(cfg.n, 2);
    for n in 0..cfg.n {
        let t = n as f64 * cfg.dt;
        states[(n, 0)] = wrap_angle(cfg.x0[0] + alpha1 * t);
        states[(n, 1)] = wrap_angle(cfg.x0[1] + alpha2 * t);
    }
    Ok(Trajectory { states, dt: cfg.dt })
}

fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid may round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Dispatches to [`torus_trajectory`] or [`integrate`].
pub fn trajectory(flow: &FlowSpec, cfg: &TrajectoryConfig) -> Result<Trajectory> {
    match flow {
        FlowSpec::Torus { .. } => torus_trajectory(flow, cfg),
        _ => integrate(flow, cfg),
    }
}

/// Observation map from state space into data space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum ObservationMap {
    /// Embedding of the 2-torus in R³ with tube radius `radius`.
    ///
    /// With `standard == false` the components are
    /// `((1 + R cos θ1) cos θ1, (1 + R cos θ2) sin θ1, sin θ2)`; with
    /// `standard == true` both radial factors use `cos θ2`.
    TorusEmbedding { radius: f64, standard: bool },
    Identity,
}

impl ObservationMap {
    pub fn torus_default() -> Self {
        ObservationMap::TorusEmbedding {
            radius: 0.5,
            standard: false,
        }
    }

    /// Output dimension for a state of dimension `state_dim`.
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            ObservationMap::TorusEmbedding { .. } => 3,
            ObservationMap::Identity => state_dim,
        }
    }

    /// Applies the map to a single state.
    pub fn apply(&self, state: &[f64]) -> Result<Vec<f64>> {
        match *self {
            ObservationMap::Identity => Ok(state.to_vec()),
            ObservationMap::TorusEmbedding { radius, standard } => {
                if state.len() != 2 {
                    return Err(Error::DimensionMismatch {
                        expected: 2,
                        got: state.len(),
                    });
                }
                let (t1, t2) = (state[0], state[1]);
                let first_radial = if standard { t2 } else { t1 };
                Ok(vec![
                    (1.0 + radius * first_radial.cos()) * t1.cos(),
                    (1.0 + radius * t2.cos()) * t1.sin(),
                    t2.sin(),
                ])
            }
        }
    }
}

/// Applies `map` to every state of `traj`.
pub fn observe(map: &ObservationMap, traj: &Trajectory) -> Result<ObservedSeries> {
    observe_states(map, &traj.states)
}

/// Applies `map` to every row of `states`.
pub fn observe_states(map: &ObservationMap, states: &DMatrix<f64>) -> Result<ObservedSeries> {
    let n = states.nrows();
    let m = map.output_dim(states.ncols());
    let mut values = DMatrix::zeros(n, m);
    let mut row = vec![0.0; states.ncols()];
    for i in 0..n {
        for (k, r) in row.iter_mut().enumerate() {
            *r = states[(i, k)];
        }
        let y = map.apply(&row)?;
        for (k, v) in y.into_iter().enumerate() {
            values[(i, k)] = v;
        }
    }
    Ok(ObservedSeries { values })
}

/// Delay-coordinate map with `q` lags.
///
/// Row `r` of the output is `(y[r+q-1], y[r+q-2], ..., y[r])`, newest first,
/// so the output has `N - q + 1` rows of dimension `m * q`.
pub fn delay_embed(series: &ObservedSeries, q: usize) -> Result<ObservedSeries> {
    let n = series.len();
    if q == 0 || q > n {
        return Err(invalid("delays", format!("need 1 <= Q <= N = {n}, got {q}")));
    }
    let m = series.dim();
    let rows = n - q + 1;
    let mut values = DMatrix::zeros(rows, m * q);
    for r in 0..rows {
        for lag in 0..q {
            let src = r + q - 1 - lag;
            for k in 0..m {
                values[(r, lag * m + k)] = series.values[(src, k)];
            }
        }
    }
    Ok(ObservedSeries { values })
}
