//! Observable projection, evolution under `exp(tW)`, and forecast skill.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::EigenBasis;
use crate::error::{invalid, Error, Result};
use crate::generator::{eigenfunction_eval, scale_psi, GeneratorSpectrum};
use crate::C64;

/// Basis coefficients `c_j = φ_jᵀ f / λ_j^{1/2}` for `j < L'`, zero beyond.
pub fn project_observable(f: &[f64], basis: &EigenBasis, l_prime: usize) -> Result<Vec<f64>> {
    if f.len() != basis.n() {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: f.len(),
        });
    }
    if l_prime == 0 || l_prime > basis.len() {
        return Err(invalid("l_prime", format!("need 1 <= L' <= L = {}, got {l_prime}", basis.len())));
    }
    let fv = nalgebra::DVector::from_column_slice(f);
    let mut c = vec![0.0; basis.len()];
    for (j, cj) in c.iter_mut().enumerate().take(l_prime) {
        let lam = basis.lambda[j];
        if !(lam > 0.0) {
            return Err(Error::NonPositiveEigenvalue { index: j, value: lam });
        }
        *cj = basis.phi.column(j).dot(&fv) / lam.sqrt();
    }
    Ok(c)
}

/// A projected observable expressed in generator eigencoordinates.
///
/// With `b_j = c_j sqrt(λ_j / λ_τ,j)` and `a = Ξᴴ b`, the prediction at lead
/// time `t` is `Re[(Ψ_τ Ξ) diag(e^{iωt}) a]`; at `t = 0` this is the Nyström
/// extension `Σ c_j ψ_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub c: Vec<f64>,
    pub l_prime: usize,
    pub omega: Vec<f64>,
    pub a: Vec<C64>,
}

impl ForecastModel {
    pub fn new(c: Vec<f64>, l_prime: usize, basis: &EigenBasis, spectrum: &GeneratorSpectrum) -> Result<Self> {
        let l = basis.len();
        if c.len() != l || spectrum.len() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                got: if c.len() != l { c.len() } else { spectrum.len() },
            });
        }
        let tau = spectrum.tau;
        let mut b = nalgebra::DVector::<C64>::zeros(l);
        for j in 0..l {
            if c[j] == 0.0 {
                continue;
            }
            // sqrt(λ/λ_τ) = exp((ln λ − τ(1 − 1/λ)) / 2)
            let lam = basis.lambda[j];
            let factor = (0.5 * (lam.ln() - tau * (1.0 - 1.0 / lam))).exp();
            let v = c[j] * factor;
            if !v.is_finite() {
                return Err(invalid(
                    "tau",
                    format!("coefficient {j} overflows after RKHS rescaling (lambda = {lam:e})"),
                ));
            }
            b[j] = C64::new(v, 0.0);
        }
        let a = spectrum.xi.ad_mul(&b);
        Ok(Self {
            c,
            l_prime,
            omega: spectrum.omega.clone(),
            a: a.iter().copied().collect(),
        })
    }

    /// Eigencoordinates advanced to time `t`: `e^{iω_j t} a_j`.
    pub fn phases(&self, t: f64) -> Vec<C64> {
        self.omega
            .iter()
            .zip(&self.a)
            .map(|(&w, &a)| C64::from_polar(1.0, w * t) * a)
            .collect()
    }
}

/// Eigenfunction values `Z = Ψ_τ Ξ` from raw Nyström values `psi`.
pub fn pointwise_modes(psi: &DMatrix<f64>, basis: &EigenBasis, spectrum: &GeneratorSpectrum) -> DMatrix<C64> {
    eigenfunction_eval(&scale_psi(psi, &basis.lambda, &spectrum.scaling), &spectrum.xi)
}

/// Complex predictions at every row of `z`, one column per lead time.
pub fn predict_many_complex(model: &ForecastModel, z: &DMatrix<C64>, times: &[f64]) -> DMatrix<C64> {
    let l = model.a.len();
    let mut phases = DMatrix::<C64>::zeros(l, times.len());
    for (k, &t) in times.iter().enumerate() {
        phases.set_column(k, &nalgebra::DVector::from_vec(model.phases(t)));
    }
    z * phases
}

/// Real part of [`predict_many_complex`]; logs the largest imaginary
/// residual relative to the prediction scale.
pub fn predict_many(model: &ForecastModel, z: &DMatrix<C64>, times: &[f64]) -> DMatrix<f64> {
    let full = predict_many_complex(model, z, times);
    let re = full.map(|v| v.re);
    let im = full.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    let scale = re.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    log::debug!("forecast: max imaginary part {im:e} (prediction max {scale:e})");
    re
}

/// Prediction at a single lead time.
pub fn predict(model: &ForecastModel, z: &DMatrix<C64>, t: f64) -> Vec<f64> {
    predict_many(model, z, &[t]).column(0).iter().copied().collect()
}

/// Normalized error `‖truth_t − pred_t‖ / ‖truth_t‖` per lead time, with
/// one row per lead time.
pub fn error_metric(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if truth.shape() != pred.shape() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    (0..truth.nrows())
        .map(|t| {
            let norm = truth.row(t).norm();
            if norm == 0.0 {
                return Err(Error::ZeroNormTruth { index: t });
            }
            Ok((truth.row(t) - pred.row(t)).norm() / norm)
        })
        .collect()
}

/// Forecast skill over a verification trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub lead_times: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Lead steps `0, stride, 2·stride, …` up to `max_steps`.
pub fn lead_steps(max_steps: usize, stride: usize) -> Vec<usize> {
    (0..=max_steps).step_by(stride.max(1)).collect()
}

/// Scores forecasts issued from every verification sample `n` that has a
/// truth value at `n + max(steps)`.
///
/// `z` holds the eigenfunction values at the verification samples and
/// `truth` the observable along the same samples.
pub fn verify(
    model: &ForecastModel,
    z: &DMatrix<C64>,
    truth: &[f64],
    steps: &[usize],
    dt: f64,
) -> Result<ForecastResult> {
    let n_hat = truth.len();
    if z.nrows() != n_hat {
        return Err(Error::DimensionMismatch {
            expected: n_hat,
            got: z.nrows(),
        });
    }
    let k_max = steps.iter().copied().max().unwrap_or(0);
    if k_max >= n_hat {
        return Err(invalid("max_lead", format!("{k_max} steps exceed the {n_hat}-sample verification set")));
    }
    let seeds = n_hat - k_max;
    let zs = z.rows(0, seeds).clone_owned();
    let mut epsilon = Vec::with_capacity(steps.len());
    // Bound the N̂ x T prediction block held in memory at once.
    let chunk = (4_000_000 / seeds.max(1)).max(1);
    for block in steps.chunks(chunk) {
        let times: Vec<f64> = block.iter().map(|&k| k as f64 * dt).collect();
        let pred = predict_many(model, &zs, &times).transpose();
        let actual = DMatrix::from_fn(block.len(), seeds, |r, n| truth[n + block[r]]);
        epsilon.extend(error_metric(&actual, &pred)?);
    }
    Ok(ForecastResult {
        lead_times: steps.iter().map(|&k| k as f64 * dt).collect(),
        epsilon,
    })
}
