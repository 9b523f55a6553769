//! Data-driven eigenbasis of the Markov operator `G = K̃ K̃ᵀ`, the RKHS
//! eigenvalue scaling, and Nyström extension to new points.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::{KernelFactor, KernelModel};
use crate::linalg::{self, LanczosOptions};
use crate::par;
use crate::sparse::CsrMatrix;

/// Modes with `λ_j / λ_0` at or below this are truncated with a warning.
pub const TRUNCATION_RATIO: f64 = 1e-12;
/// Largest problem size the automatic backend solves densely.
pub const DENSE_LIMIT: usize = 2000;

/// Eigensolver used by [`eigenbasis`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dense for `N <= 2000`, Lanczos otherwise.
    #[default]
    Auto,
    Lanczos,
    Dense,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BasisOptions {
    pub backend: Backend,
    pub lanczos: LanczosOptions,
}

/// Leading eigenpairs of `G`: `λ_j = σ_j²`, left singular vectors `φ_j` of
/// `K̃` (unit 2-norm) and right singular vectors `γ_j = K̃ᵀ φ_j / σ_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenBasis {
    pub lambda: Vec<f64>,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// Right degree vector of the kernel, needed for Nyström evaluation.
    pub q: Vec<f64>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    /// The leading `l` modes.
    pub fn truncated(&self, l: usize) -> Result<Self> {
        if l == 0 || l > self.len() {
            return Err(invalid("l", format!("need 1 <= L <= {}, got {l}", self.len())));
        }
        Ok(Self {
            lambda: self.lambda[..l].to_vec(),
            phi: self.phi.columns(0, l).clone_owned(),
            gamma: self.gamma.columns(0, l).clone_owned(),
            q: self.q.clone(),
        })
    }
}

/// Row-major view helpers for sparse block products on column-major blocks.
fn to_row_major(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

fn from_row_major(data: Vec<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(nrows, ncols, &data)
}

/// Applies `K̃` and `K̃ᵀ` to blocks without materializing `K̃ᵀ` when the
/// underlying kernel is symmetric.
struct Operator<'a> {
    kf: &'a KernelFactor,
    transpose: Option<CsrMatrix>,
    pre: Vec<f64>,
    post: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(kf: &'a KernelFactor) -> Self {
        // With K symmetric, K̃ᵀ = Q^{-1/2} D K̃ Q^{1/2} D⁻¹.
        let pre = kf.q.iter().zip(&kf.d).map(|(q, d)| q.sqrt() / d).collect();
        let post = kf.q.iter().zip(&kf.d).map(|(q, d)| d / q.sqrt()).collect();
        let transpose = (!kf.symmetric).then(|| kf.k_tilde.transpose());
        Self {
            kf,
            transpose,
            pre,
            post,
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, b) = x.shape();
        from_row_major(self.kf.k_tilde.mul_block(&to_row_major(x), b), n, b)
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, b) = x.shape();
        if let Some(t) = &self.transpose {
            return from_row_major(t.mul_block(&to_row_major(x), b), n, b);
        }
        let mut scaled = x.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.pre[i];
        }
        let mut y = self.apply(&scaled);
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row *= self.post[i];
        }
        y
    }
}

/// Computes the `l` largest eigenpairs of `G = K̃ K̃ᵀ`.
///
/// Eigenvectors get a fixed sign (first significant entry positive). Fails
/// with [`Error::RankDeficient`] if a requested eigenvalue is at or below
/// machine epsilon relative to `λ_0`; modes between that and
/// [`TRUNCATION_RATIO`] are dropped with a warning.
pub fn eigenbasis(kf: &KernelFactor, l: usize, opts: &BasisOptions) -> Result<EigenBasis> {
    let n = kf.n();
    if l == 0 || l > n {
        return Err(invalid("l", format!("need 1 <= L <= N = {n}, got {l}")));
    }
    let op = Operator::new(kf);
    let dense = match opts.backend {
        Backend::Auto => n <= DENSE_LIMIT,
        Backend::Dense => true,
        Backend::Lanczos => false,
    };
    let (lambda, mut phi) = if dense {
        let kt = kf.k_tilde.to_dense();
        let g = &kt * kt.transpose();
        let (vals, vecs) = linalg::sym_eigen_desc(g);
        (vals[..l].to_vec(), vecs.columns(0, l).clone_owned())
    } else {
        linalg::block_lanczos(n, l, |x| op.apply(&op.apply_transpose(x)), &opts.lanczos)?
    };

    let top = lambda[0];
    if !(top > 0.0) {
        return Err(Error::RankDeficient { index: 0, value: top });
    }
    if let Some(j) = lambda.iter().position(|&v| v <= f64::EPSILON * top) {
        return Err(Error::RankDeficient {
            index: j,
            value: lambda[j] / top,
        });
    }
    let keep = lambda
        .iter()
        .position(|&v| v <= TRUNCATION_RATIO * top)
        .unwrap_or(l);
    if keep < l {
        log::warn!(
            "truncating eigenbasis from {l} to {keep} modes: lambda_{keep}/lambda_0 = {:e}",
            lambda[keep] / top
        );
    }
    let lambda = lambda[..keep].to_vec();
    let mut phi = phi.columns_mut(0, keep).clone_owned();
    linalg::fix_column_signs(&mut phi);

    let mut gamma = op.apply_transpose(&phi);
    for (mut col, &lam) in gamma.column_iter_mut().zip(&lambda) {
        col /= lam.sqrt();
    }
    Ok(EigenBasis {
        lambda,
        phi,
        gamma,
        q: kf.q.clone(),
    })
}

/// Eigenvalues of the heat-like semigroup `λ_τ = exp(τ (1 − 1/λ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RkhsScaling {
    pub tau: f64,
    pub lambda_tau: Vec<f64>,
}

impl RkhsScaling {
    /// `sqrt(λ_τ / λ)`, the factor mapping `ψ_j` to `ψ_{τ,j}`, computed in
    /// log space.
    pub fn basis_factors(&self, lambda: &[f64]) -> Vec<f64> {
        lambda
            .iter()
            .map(|&l| (0.5 * (self.tau * (1.0 - 1.0 / l) - l.ln())).exp())
            .collect()
    }
}

/// Applies `λ ↦ exp(τ (1 − 1/λ))` elementwise.
///
/// Eigenvalues must lie in `(0, 1]`; values up to `1 + 1e-8` are accepted
/// to absorb roundoff in `λ_0`.
pub fn rkhs_scaling(lambda: &[f64], tau: f64) -> Result<RkhsScaling> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid("tau", format!("must be positive and finite, got {tau}")));
    }
    let mut lambda_tau = Vec::with_capacity(lambda.len());
    for (j, &l) in lambda.iter().enumerate() {
        if !(l > 0.0) {
            return Err(Error::NonPositiveEigenvalue { index: j, value: l });
        }
        if l > 1.0 + 1e-8 {
            return Err(invalid("lambda", format!("eigenvalue {j} is {l}, above 1")));
        }
        lambda_tau.push((tau * (1.0 - 1.0 / l)).exp());
    }
    Ok(RkhsScaling { tau, lambda_tau })
}

/// Values of `ψ_j = K̄ γ_j` at query points, with
/// `K̄ = D̂⁻¹ K̂ Q^{-1/2}` built from the training kernel model.
///
/// Returns an `N̂ x L` matrix. On the training points column `j` equals
/// `λ_j^{1/2} φ_j`.
pub fn nystrom_eval(query: &DMatrix<f64>, model: &KernelModel, basis: &EigenBasis) -> Result<DMatrix<f64>> {
    if basis.n() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: basis.n(),
        });
    }
    let k_hat = model.query_kernel(query)?;
    let d_hat = k_hat.row_sums();
    let inv_sqrt_q: Vec<f64> = basis.q.iter().map(|v| 1.0 / v.sqrt()).collect();
    let l = basis.len();
    // Γ row-major so each kernel entry touches one contiguous row.
    let gamma_rows = to_row_major(&basis.gamma);
    let mut out = vec![0.0; query.nrows() * l];
    par::for_each_row_mut(&mut out, l, |r, acc| {
        let (cols, vals) = k_hat.row(r);
        let inv_d = 1.0 / d_hat[r];
        for (&c, &v) in cols.iter().zip(vals) {
            let c = c as usize;
            let w = v * (inv_d * inv_sqrt_q[c]);
            for (a, g) in acc.iter_mut().zip(&gamma_rows[c * l..(c + 1) * l]) {
                *a += w * g;
            }
        }
    });
    Ok(from_row_major(out, query.nrows(), l))
}
