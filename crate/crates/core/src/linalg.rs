//! Dense and iterative symmetric eigensolvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::C64;

/// Eigenpairs of a real symmetric matrix, eigenvalues in descending order.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Eigenpairs of a complex Hermitian matrix, eigenvalues in ascending order.
pub fn hermitian_eigen(h: DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = h.nrows();
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Flips the sign of each column so that its first entry exceeding
/// `1e-12 * max|entry|` is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let scale = col.amax();
        if let Some(&first) = col.iter().find(|v| v.abs() > 1e-12 * scale) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Tuning knobs for [`block_lanczos`].
#[derive(Clone, Debug, PartialEq)]
pub struct LanczosOptions {
    pub block_size: usize,
    /// Largest Krylov dimension before giving up; clamped to the problem size.
    pub max_dim: Option<usize>,
    /// Convergence threshold on `||A y - θ y||` relative to the largest
    /// Ritz value.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            block_size: 16,
            max_dim: None,
            tol: 1e-10,
            seed: 0x5eed,
        }
    }
}

/// Subtracts the projection of `w` onto the first `k` columns of `v`, twice,
/// and returns the accumulated coefficients.
fn reorthogonalize(v: &DMatrix<f64>, k: usize, w: &mut DMatrix<f64>) -> DMatrix<f64> {
    let basis = v.columns(0, k);
    let mut total = DMatrix::zeros(k, w.ncols());
    for _ in 0..2 {
        let c = basis.tr_mul(w);
        w.gemm(-1.0, &basis, &c, 1.0);
        total += c;
    }
    total
}

/// Orthonormalizes the columns of `w` in place against each other (after
/// they have been orthogonalized against `v[:, ..k]`). Returns the upper
/// triangular factor; columns that collapse are replaced by fresh random
/// directions with a zero diagonal entry in the factor.
fn orthonormalize_block(
    v: &DMatrix<f64>,
    k: usize,
    w: &mut DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let b = w.ncols();
    let n = w.nrows();
    let mut r = DMatrix::zeros(b, b);
    for j in 0..b {
        let before = w.column(j).norm();
        for _ in 0..2 {
            for i in 0..j {
                let c = w.column(i).dot(&w.column(j));
                r[(i, j)] += c;
                let ci = w.column(i).clone_owned();
                w.column_mut(j).axpy(-c, &ci, 1.0);
            }
        }
        let norm = w.column(j).norm();
        if norm > 1e-10 * before.max(f64::MIN_POSITIVE) && norm > 0.0 {
            r[(j, j)] = norm;
            w.column_mut(j).unscale_mut(norm);
            continue;
        }
        // The image lies in the span already built; keep its coefficients
        // and continue with a fresh random direction.
        let fresh = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        w.set_column(j, &fresh);
        let mut col = w.columns(j, 1).clone_owned();
        reorthogonalize(v, k, &mut col);
        for _ in 0..2 {
            for i in 0..j {
                let c = w.column(i).dot(&col.column(0));
                let ci = w.column(i).clone_owned();
                col.column_mut(0).axpy(-c, &ci, 1.0);
            }
        }
        let norm = col.norm();
        w.set_column(j, &(col.column(0) / norm));
    }
    r
}

/// Leading `nev` eigenpairs of a symmetric positive semidefinite operator of
/// size `n`, by block Lanczos with full reorthogonalization.
///
/// `apply` maps an `n x b` block to its image. Eigenvalues are returned in
/// descending order with unit-norm eigenvectors as columns.
pub fn block_lanczos<F>(
    n: usize,
    nev: usize,
    apply: F,
    opts: &LanczosOptions,
) -> Result<(Vec<f64>, DMatrix<f64>)>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    assert!(nev >= 1 && nev <= n, "need 1 <= nev <= n");
    let b = opts.block_size.clamp(1, n);
    let capacity = opts
        .max_dim
        .unwrap_or_else(|| (4 * nev).max(nev + 400))
        .clamp(b, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut v = DMatrix::<f64>::zeros(n, capacity);
    let mut h = DMatrix::<f64>::zeros(capacity, capacity);

    let mut start = DMatrix::from_fn(n, b, |_, _| rng.random_range(-1.0..1.0));
    orthonormalize_block(&v, 0, &mut start, &mut rng);
    v.columns_mut(0, b).copy_from(&start);

    let mut m = b;
    let mut last_check = 0;
    let check_every = (nev / 2).max(4 * b);
    loop {
        let cur = m - b;
        let mut w = apply(&v.columns(cur, b).clone_owned());
        let coeffs = reorthogonalize(&v, m, &mut w);
        h.view_mut((0, cur), (m, b)).copy_from(&coeffs);

        let can_extend = m + b <= capacity;
        let due = m >= nev + b && m - last_check >= check_every;
        if (m >= nev && !can_extend) || due {
            last_check = m;
            let hm = h.view((0, 0), (m, m));
            let sym = (&hm + hm.transpose()) * 0.5;
            let (theta, s) = sym_eigen_desc(sym);
            let scale = theta[0].abs().max(f64::MIN_POSITIVE);
            // A y - θ y = w s_last for the Ritz vector y = V s, where w is
            // the orthogonalized image of the newest block.
            let res = &w * s.view((cur, 0), (b, nev));
            let converged = (0..nev)
                .take_while(|&i| res.column(i).norm() <= opts.tol * scale)
                .count();
            log::debug!("block lanczos: dim {m}, {converged}/{nev} converged");
            if converged == nev {
                let ritz = v.columns(0, m) * s.columns(0, nev);
                return Ok((theta[..nev].to_vec(), ritz));
            }
            if !can_extend {
                return Err(Error::SvdNotConverged {
                    wanted: nev,
                    converged,
                    iterations: m,
                });
            }
        }
        if !can_extend {
            return Err(Error::SvdNotConverged {
                wanted: nev,
                converged: 0,
                iterations: m,
            });
        }
        let r = orthonormalize_block(&v, m, &mut w, &mut rng);
        v.columns_mut(m, b).copy_from(&w);
        h.view_mut((m, cur), (b, b)).copy_from(&r);
        m += b;
    }
}
