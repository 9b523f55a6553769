//! Compactified generator matrix, its spectrum, and Dirichlet energies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{rkhs_scaling, EigenBasis, RkhsScaling};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::C64;

/// Relative tolerance on the symmetric part of the assembled `W`.
pub const SKEW_TOLERANCE: f64 = 1e-10;
/// Modes with `(ω Δt)²` above `1 - NYQUIST_MARGIN` get infinite energy.
pub const NYQUIST_MARGIN: f64 = 1e-9;

/// Central-difference approximation of the time derivative along a sampled
/// trajectory: a skew-symmetric tridiagonal `N x N` matrix.
///
/// Interior rows are `(-1, 0, 1) / (2Δt)`; couplings that involve the first
/// or last sample are halved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceOp {
    pub n: usize,
    pub dt: f64,
}

/// Builds the finite-difference operator for `n` samples spaced `dt`.
pub fn fd_matrix(n: usize, dt: f64) -> Result<FiniteDifferenceOp> {
    if n < 3 {
        return Err(invalid("n", format!("finite differences need at least 3 samples, got {n}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    Ok(FiniteDifferenceOp { n, dt })
}

impl FiniteDifferenceOp {
    /// Entry `V[i][i+1]`; `V[i+1][i]` is its negative.
    pub fn upper(&self, i: usize) -> f64 {
        let s = if i == 0 || i + 2 == self.n { 0.5 } else { 1.0 };
        s / (2.0 * self.dt)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n - 1 {
            let s = self.upper(i);
            y[i] += s * x[i + 1];
            y[i + 1] -= s * x[i];
        }
        y
    }

    /// `V X` for an `N x L` matrix `X`.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for (xc, mut yc) in x.column_iter().zip(y.column_iter_mut()) {
            let xs = xc.as_slice();
            let ys = yc.as_mut_slice();
            for i in 0..self.n - 1 {
                let s = self.upper(i);
                ys[i] += s * xs[i + 1];
                ys[i + 1] -= s * xs[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n - 1 {
            v[(i, i + 1)] = self.upper(i);
            v[(i + 1, i)] = -self.upper(i);
        }
        v
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Options for assembling `W`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    /// Replace `V` by `P V P`, where `P` removes the sample mean, so that
    /// constants are annihilated exactly. The tridiagonal scheme alone maps
    /// constants to a nonzero vector supported on the first and last two
    /// samples, which couples the constant mode to the rest of the spectrum
    /// at order `1 / (N Δt)`.
    pub project_constants: bool,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            project_constants: true,
        }
    }
}

/// `W = Λ_τ^{1/2} Φᵀ V Φ Λ_τ^{1/2}`, exactly skew-symmetrized.
///
/// Fails if the symmetric part before symmetrization exceeds `1e-10 ‖W‖_max`
/// plus a roundoff floor of `N ε / Δt`.
pub fn generator_matrix(
    basis: &EigenBasis,
    scaling: &RkhsScaling,
    fd: &FiniteDifferenceOp,
    opts: &GeneratorOptions,
) -> Result<DMatrix<f64>> {
    let l = basis.len();
    if scaling.lambda_tau.len() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: scaling.lambda_tau.len(),
        });
    }
    if fd.n != basis.n() {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: fd.n,
        });
    }
    let mut w = if opts.project_constants {
        let mut phi = basis.phi.clone();
        for mut col in phi.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        phi.tr_mul(&fd.apply_matrix(&phi))
    } else {
        basis.phi.tr_mul(&fd.apply_matrix(&basis.phi))
    };
    let half: Vec<f64> = scaling.lambda_tau.iter().map(|v| v.sqrt()).collect();
    for j in 0..l {
        for i in 0..l {
            w[(i, j)] *= half[i] * half[j];
        }
    }
    let residual = max_abs(&(&w + w.transpose()));
    let bound = SKEW_TOLERANCE * max_abs(&w) + fd.n as f64 * f64::EPSILON / fd.dt;
    log::debug!("generator: symmetric residual {residual:e} (bound {bound:e})");
    if residual > bound {
        return Err(Error::NotSkew { residual, bound });
    }
    Ok((&w - w.transpose()) * 0.5)
}

/// Eigendecomposition `W ξ_j = i ω_j ξ_j` of a real skew-symmetric matrix via
/// the Hermitian matrix `iW`.
///
/// Frequencies come out in descending order. Each eigenvector is unit-norm
/// with its largest-magnitude component real and positive.
pub fn eig_skew(w: &DMatrix<f64>) -> (Vec<f64>, DMatrix<C64>) {
    let h = w.map(|v| C64::new(0.0, v));
    let (mu, mut xi) = linalg::hermitian_eigen(h);
    let omega = mu.iter().map(|m| -m).collect();
    for mut col in xi.column_iter_mut() {
        fix_phase(&mut col);
    }
    (omega, xi)
}

/// Rotates a complex vector so its largest-magnitude entry (first one on
/// ties) is real and positive.
fn fix_phase<S>(col: &mut nalgebra::Matrix<C64, nalgebra::Dyn, nalgebra::U1, S>)
where
    S: nalgebra::StorageMut<C64, nalgebra::Dyn, nalgebra::U1>,
{
    let mut best = 0;
    for k in 1..col.len() {
        if col[k].norm() > col[best].norm() {
            best = k;
        }
    }
    let pivot = col[best];
    if pivot.norm() > 0.0 {
        *col *= pivot.conj() / pivot.norm();
    }
}

/// Frequencies with `|ω| Δt` below this are treated as zero.
pub const ZERO_FREQUENCY: f64 = 1e-10;

/// Within the cluster of zero frequencies, rotates the eigenvectors so that
/// one of them is the normalized projection of `e_0` (the constant function)
/// and the rest span its orthogonal complement in the cluster.
///
/// A skew matrix of even size has an even number of zero eigenvalues, so the
/// constant mode generally comes paired with another null vector and the
/// eigensolver may return any rotation of the two.
pub fn isolate_constant_mode(omega: &[f64], xi: &mut DMatrix<C64>, dt: f64) {
    let cluster: Vec<usize> = (0..omega.len())
        .filter(|&j| omega[j].abs() * dt < ZERO_FREQUENCY)
        .collect();
    if cluster.len() < 2 {
        return;
    }
    let m = cluster.len();
    let x = DMatrix::from_fn(xi.nrows(), m, |r, c| xi[(r, cluster[c])]);
    // Coefficients of the projection of e_0 onto span(x).
    let p = nalgebra::DVector::from_fn(m, |c, _| x[(0, c)].conj());
    let pn = p.norm();
    if pn == 0.0 {
        return;
    }
    let mut u = DMatrix::<C64>::zeros(m, m);
    u.set_column(0, &(p / C64::new(pn, 0.0)));
    let mut filled = 1;
    for e in 0..m {
        if filled == m {
            break;
        }
        let mut v = nalgebra::DVector::<C64>::zeros(m);
        v[e] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for k in 0..filled {
                let proj = u.column(k).dotc(&v);
                v -= u.column(k) * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            u.set_column(filled, &(v / C64::new(norm, 0.0)));
            filled += 1;
        }
    }
    let rotated = x * u;
    for (c, &j) in cluster.iter().enumerate() {
        let mut col = rotated.column(c).clone_owned();
        fix_phase(&mut col);
        xi.set_column(j, &col);
    }
}

/// Frequency-adjusted Dirichlet energies
/// `(Σ|ξ|² λ_τ/λ / Σ|ξ|² λ_τ − 1) / (1 − (ω Δt)²)`.
///
/// Negative roundoff is clamped to 0. Modes at the Nyquist limit, or with a
/// vanishing denominator, get `+∞`.
pub fn dirichlet_energy(xi: &DMatrix<C64>, lambda: &[f64], lambda_tau: &[f64], omega: &[f64], dt: f64) -> Vec<f64> {
    let ratio: Vec<f64> = lambda
        .iter()
        .zip(lambda_tau)
        .map(|(&l, &lt)| if lt == 0.0 { 0.0 } else { (lt.ln() - l.ln()).exp() })
        .collect();
    xi.column_iter()
        .zip(omega)
        .map(|(col, &w)| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..col.len() {
                let p = col[k].norm_sqr();
                num += p * ratio[k];
                den += p * lambda_tau[k];
            }
            let nyquist = (w * dt).powi(2);
            if den == 0.0 || nyquist > 1.0 - NYQUIST_MARGIN {
                return f64::INFINITY;
            }
            (num / den - 1.0).max(0.0) / (1.0 - nyquist)
        })
        .collect()
}

/// Unadjusted Dirichlet energy `Σ|c_j|²/λ_j / Σ|c_j|² − 1` of a function with
/// basis coefficients `c`.
pub fn raw_dirichlet_energy(c: &[C64], lambda: &[f64]) -> f64 {
    let (num, den) = c
        .iter()
        .zip(lambda)
        .fold((0.0, 0.0), |(n, d), (ci, l)| (n + ci.norm_sqr() / l, d + ci.norm_sqr()));
    num / den - 1.0
}

/// Spectrum of `W` for one value of `τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpectrum {
    pub tau: f64,
    pub dt: f64,
    pub scaling: RkhsScaling,
    pub omega: Vec<f64>,
    pub xi: DMatrix<C64>,
    pub dirichlet: Vec<f64>,
    /// Mode indices, constant mode first, then ascending energy, infinite
    /// energies last.
    pub order: Vec<usize>,
    pub constant_mode: usize,
}

impl GeneratorSpectrum {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Modes with `ω Δt` above [`ZERO_FREQUENCY`], in ranking order.
    pub fn positive_modes(&self) -> impl Iterator<Item = usize> + '_ {
        self.order
            .iter()
            .copied()
            .filter(|&j| self.omega[j] * self.dt >= ZERO_FREQUENCY)
    }
}

/// Identifies the constant mode and ranks the rest by energy.
pub fn rank_modes(xi: &DMatrix<C64>, dirichlet: &[f64]) -> (usize, Vec<usize>) {
    let l = dirichlet.len();
    let mut constant = 0;
    for j in 1..l {
        if xi[(0, j)].norm() > xi[(0, constant)].norm() {
            constant = j;
        }
    }
    let mut rest: Vec<usize> = (0..l).filter(|&j| j != constant).collect();
    rest.sort_by(|&a, &b| dirichlet[a].total_cmp(&dirichlet[b]).then(a.cmp(&b)));
    let mut order = Vec::with_capacity(l);
    order.push(constant);
    order.extend(rest);
    (constant, order)
}

/// Builds `W` for `τ`, diagonalizes it and ranks the modes.
pub fn spectrum(basis: &EigenBasis, tau: f64, dt: f64, opts: &GeneratorOptions) -> Result<GeneratorSpectrum> {
    let scaling = rkhs_scaling(&basis.lambda, tau)?;
    let fd = fd_matrix(basis.n(), dt)?;
    let w = generator_matrix(basis, &scaling, &fd, opts)?;
    let (omega, mut xi) = eig_skew(&w);
    isolate_constant_mode(&omega, &mut xi, dt);
    let dirichlet = dirichlet_energy(&xi, &basis.lambda, &scaling.lambda_tau, &omega, dt);
    let (constant_mode, order) = rank_modes(&xi, &dirichlet);
    Ok(GeneratorSpectrum {
        tau,
        dt,
        scaling,
        omega,
        xi,
        dirichlet,
        order,
        constant_mode,
    })
}

/// Scales Nyström values `ψ_j` to `ψ_{τ,j} = sqrt(λ_τ,j / λ_j) ψ_j`.
pub fn scale_psi(psi: &DMatrix<f64>, lambda: &[f64], scaling: &RkhsScaling) -> DMatrix<f64> {
    let f = scaling.basis_factors(lambda);
    let mut out = psi.clone();
    for (mut col, fj) in out.column_iter_mut().zip(f) {
        col *= fj;
    }
    out
}

/// Eigenfunction values `ζ_j = Ψ_τ ξ_j` at the rows of `psi_tau`.
pub fn eigenfunction_eval(psi_tau: &DMatrix<f64>, xi: &DMatrix<C64>) -> DMatrix<C64> {
    psi_tau.map(|v| C64::new(v, 0.0)) * xi
}
