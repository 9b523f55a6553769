//! kNN distances, the variable-bandwidth Gaussian kernel, and bistochastic
//! normalization.
//!
//! The kernel between data points `y` and `y'` is
//! `exp(-d²(y, y') / (ε σ(y) σ(y')))` with `σ = ρ^{-1/m̃}` built from a
//! Gaussian density estimate `ρ`. Only entries on the symmetrized kNN graph
//! are kept.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::sparse::CsrMatrix;

/// Kernel values below this are dropped from the sparse pattern.
pub const UNDERFLOW: f64 = 1e-300;

/// Number of points in the autotuning grid.
const GRID_POINTS: usize = 100;
/// Cap on the number of squared distances scanned per autotuning pass.
const AUTOTUNE_SAMPLE: usize = 1 << 20;

/// Default neighbor count: about 8% of the data, at least 500, at most `n`.
pub fn default_k_nn(n: usize) -> usize {
    let frac = (0.08 * n as f64).ceil() as usize;
    n.min(frac.max(500))
}

/// Row-major copy of an `n x m` point matrix.
fn row_major(points: &DMatrix<f64>) -> Vec<f64> {
    let (n, m) = points.shape();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        out.extend(points.row(i).iter());
    }
    out
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn by_distance(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(d², index)` pairs of `cand`, sorted ascending.
fn smallest(mut cand: Vec<(f64, u32)>, k: usize) -> Vec<(f64, u32)> {
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_distance);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance);
    cand
}

/// Exact k-nearest-neighbor lists, one row per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDistances {
    n: usize,
    k_nn: usize,
    idx: Vec<u32>,
    d2: Vec<f64>,
}

impl SparseDistances {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    /// Neighbor indices and squared distances of point `i`, ascending by
    /// distance. The point itself comes first.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = i * self.k_nn..(i + 1) * self.k_nn;
        (&self.idx[r.clone()], &self.d2[r])
    }

    /// Squared distance from point `i` to its farthest retained neighbor.
    pub fn radius2(&self, i: usize) -> f64 {
        self.d2[(i + 1) * self.k_nn - 1]
    }

    pub fn radii2(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.radius2(i)).collect()
    }

    /// Union of the kNN pattern and its transpose, with squared distances as
    /// values.
    pub fn symmetrized(&self) -> CsrMatrix {
        let n = self.n;
        // Reverse edges j -> i for every i listing j, skipping those already
        // present in row j.
        let mut sorted_rows: Vec<Vec<u32>> = par::map_range(n, |i| {
            let mut r = self.row(i).0.to_vec();
            r.sort_unstable();
            r
        });
        let mut extra: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            let (cols, d2) = self.row(i);
            for (&j, &d) in cols.iter().zip(d2) {
                if sorted_rows[j as usize].binary_search(&(i as u32)).is_err() {
                    extra[j as usize].push((i as u32, d));
                }
            }
        }
        sorted_rows.clear();
        let rows = extra
            .into_iter()
            .enumerate()
            .map(|(i, mut row)| {
                let (cols, d2) = self.row(i);
                row.extend(cols.iter().copied().zip(d2.iter().copied()));
                row
            })
            .collect();
        CsrMatrix::from_rows(n, rows)
    }
}

/// Brute-force exact kNN over the rows of `points`.
///
/// Every row starts with the point itself at distance 0; the remaining
/// neighbors are ordered by distance with ties broken by lower index.
pub fn pairwise_knn(points: &DMatrix<f64>, k_nn: usize) -> Result<SparseDistances> {
    let n = points.nrows();
    if k_nn > n {
        return Err(Error::TooManyNeighbors { k_nn, n });
    }
    if k_nn == 0 {
        return Err(invalid("k_nn", "must be at least 1"));
    }
    let m = points.ncols();
    let flat = row_major(points);
    let rows = par::map_range(n, |i| {
        let yi = &flat[i * m..(i + 1) * m];
        let cand = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(yi, &flat[j * m..(j + 1) * m]), j as u32))
            .collect();
        let mut row = Vec::with_capacity(k_nn);
        row.push((0.0, i as u32));
        row.extend(smallest(cand, k_nn - 1));
        row
    });
    let mut idx = Vec::with_capacity(n * k_nn);
    let mut d2 = Vec::with_capacity(n * k_nn);
    for row in rows {
        for (d, j) in row {
            idx.push(j);
            d2.push(d);
        }
    }
    Ok(SparseDistances { n, k_nn, idx, d2 })
}

/// Gaussian density estimate with bandwidth `ε̃` in dimension `m̃`, summed
/// over retained neighbors.
pub fn density_estimate(dists: &SparseDistances, epsilon_tilde: f64, m_tilde: f64) -> Result<Vec<f64>> {
    check_positive("epsilon_tilde", epsilon_tilde)?;
    check_positive("m_tilde", m_tilde)?;
    let n = dists.n();
    Ok(par::map_range(n, |i| {
        density_from(dists.row(i).1, n, epsilon_tilde, m_tilde)
    }))
}

fn density_from(d2: &[f64], n: usize, epsilon_tilde: f64, m_tilde: f64) -> f64 {
    let sum: f64 = d2.iter().map(|d| (-d / epsilon_tilde).exp()).sum();
    (PI * epsilon_tilde).powf(-m_tilde / 2.0) * sum / n as f64
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

/// Result of a bandwidth scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autotune {
    pub epsilon: f64,
    /// Twice the maximal log-log slope of the kernel sum.
    pub dimension: f64,
}

/// Picks the bandwidth maximizing `d log T / d log ε`, where
/// `T(ε) = Σ exp(-d²/ε)` over the given squared distances.
///
/// The scan covers 100 geometrically spaced values in
/// `[1e-4, 1e4] × median(nonzero d²)`.
pub fn autotune_values(d2: &[f64]) -> Result<Autotune> {
    let mut nonzero: Vec<f64> = d2.iter().copied().filter(|&d| d > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateGeometry("all points coincide".into()));
    }
    let (lo, hi) = nonzero
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if hi - lo <= 1e-12 * hi {
        return Err(Error::DegenerateGeometry(
            "all nonzero pairwise distances are equal".into(),
        ));
    }
    let mid = nonzero.len() / 2;
    let (_, median, _) = nonzero.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;

    let log_eps: Vec<f64> = (0..GRID_POINTS)
        .map(|k| (median * 10f64.powf(-4.0 + 8.0 * k as f64 / (GRID_POINTS - 1) as f64)).ln())
        .collect();
    let log_t: Vec<f64> = par::map_range(GRID_POINTS, |k| {
        let inv = (-log_eps[k]).exp();
        d2.iter().map(|d| (-d * inv).exp()).sum::<f64>().ln()
    });
    let (best, slope) = (0..GRID_POINTS - 1)
        .map(|k| (k, (log_t[k + 1] - log_t[k]) / (log_eps[k + 1] - log_eps[k])))
        .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
    Ok(Autotune {
        epsilon: (0.5 * (log_eps[best] + log_eps[best + 1])).exp(),
        dimension: 2.0 * slope,
    })
}

/// Retained squared distances, optionally transformed, from a strided subset
/// of rows so at most about [`AUTOTUNE_SAMPLE`] values are scanned.
fn sampled_values(dists: &SparseDistances, f: impl Fn(usize, u32, f64) -> f64) -> Vec<f64> {
    let total = dists.n() * dists.k_nn();
    let stride = total.div_ceil(AUTOTUNE_SAMPLE).max(1);
    let mut out = Vec::with_capacity(total / stride + dists.k_nn());
    for i in (0..dists.n()).step_by(stride) {
        let (cols, d2) = dists.row(i);
        out.extend(cols.iter().zip(d2).map(|(&j, &d)| f(i, j, d)));
    }
    out
}

/// Autotunes on the raw retained squared distances.
pub fn autotune_bandwidth(dists: &SparseDistances) -> Result<Autotune> {
    autotune_values(&sampled_values(dists, |_, _, d| d))
}

/// Manual overrides for the autotuned quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthOverrides {
    pub epsilon: Option<f64>,
    pub epsilon_tilde: Option<f64>,
    pub m_tilde: Option<f64>,
}

/// Bandwidth parameters and the per-point bandwidth function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    pub epsilon: f64,
    pub epsilon_tilde: f64,
    pub m_tilde: f64,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BandwidthModel {
    /// Fits `ε̃` and `m̃` on raw distances, then `ε` on the bandwidth-scaled
    /// distances `d² / (σ_i σ_j)`. Any override skips the corresponding
    /// scan.
    pub fn fit(dists: &SparseDistances, overrides: &BandwidthOverrides) -> Result<Self> {
        let (epsilon_tilde, m_tilde) = match (overrides.epsilon_tilde, overrides.m_tilde) {
            (Some(e), Some(m)) => (e, m),
            (e, m) => {
                let tuned = autotune_bandwidth(dists)?;
                (e.unwrap_or(tuned.epsilon), m.unwrap_or(tuned.dimension))
            }
        };
        let rho = density_estimate(dists, epsilon_tilde, m_tilde)?;
        let sigma = bandwidth_function(&rho, m_tilde)?;
        let epsilon = match overrides.epsilon {
            Some(e) => e,
            None => {
                let scaled = sampled_values(dists, |i, j, d| d / (sigma[i] * sigma[j as usize]));
                autotune_values(&scaled)?.epsilon
            }
        };
        check_positive("epsilon", epsilon)?;
        Ok(Self {
            epsilon,
            epsilon_tilde,
            m_tilde,
            rho,
            sigma,
        })
    }

    /// Builds a model with fixed `ε` and `σ ≡ 1`, i.e. a plain Gaussian
    /// kernel.
    pub fn fixed(epsilon: f64, n: usize) -> Self {
        Self {
            epsilon,
            epsilon_tilde: 1.0,
            m_tilde: 1.0,
            rho: vec![1.0; n],
            sigma: vec![1.0; n],
        }
    }

    /// Density and bandwidth at an out-of-sample point from its kNN squared
    /// distances to the training set of size `n`.
    pub fn sigma_at(&self, knn_d2: &[f64], n: usize) -> f64 {
        let rho = density_from(knn_d2, n, self.epsilon_tilde, self.m_tilde);
        rho.powf(-1.0 / self.m_tilde)
    }
}

/// `σ = ρ^{-1/m̃}`; fails on non-positive or non-finite densities.
pub fn bandwidth_function(rho: &[f64], m_tilde: f64) -> Result<Vec<f64>> {
    rho.iter()
        .enumerate()
        .map(|(i, &r)| {
            let s = r.powf(-1.0 / m_tilde);
            if r > 0.0 && s.is_finite() && s > 0.0 {
                Ok(s)
            } else {
                Err(Error::DegenerateGeometry(format!(
                    "density {r:e} at point {i} gives no usable bandwidth"
                )))
            }
        })
        .collect()
}

/// Kernel value; shared by training and query evaluation so both round
/// identically.
#[inline]
fn kappa(d2: f64, epsilon: f64, si: f64, sj: f64) -> f64 {
    (-d2 / (epsilon * (si * sj))).exp()
}

/// `K_ij = κ(y_i, y_j) / N` on the symmetrized kNN pattern, with underflowed
/// entries dropped.
pub fn vb_kernel(dists: &SparseDistances, bw: &BandwidthModel) -> Result<CsrMatrix> {
    let n = dists.n();
    if bw.sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bw.sigma.len(),
        });
    }
    if let Some(i) = bw.sigma.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid("sigma", format!("entry {i} is not strictly positive")));
    }
    let mut k = dists.symmetrized();
    let inv_n = 1.0 / n as f64;
    let (eps, sigma) = (bw.epsilon, &bw.sigma);
    k.map_values(|i, j, d2| {
        let v = kappa(d2, eps, sigma[i], sigma[j]);
        if v < UNDERFLOW {
            0.0
        } else {
            v * inv_n
        }
    });
    k.retain(|v| v > 0.0);
    Ok(k)
}

/// Normalized kernel `K̃ = D⁻¹ K Q^{-1/2}` with `d = K 1` and `q = K D⁻¹ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFactor {
    pub k_tilde: CsrMatrix,
    pub d: Vec<f64>,
    pub q: Vec<f64>,
    /// Whether the unnormalized kernel was exactly symmetric, which lets
    /// `K̃ᵀ` be applied without storing it.
    pub symmetric: bool,
}

impl KernelFactor {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// `K̃ᵀ x`.
    pub fn tr_apply(&self, x: &[f64]) -> Vec<f64> {
        self.k_tilde.tr_mul_vec(x)
    }

    /// `‖K̃ (K̃ᵀ 1) − 1‖_∞`, the departure of `G = K̃ K̃ᵀ` from a Markov
    /// operator.
    pub fn markov_residual(&self) -> f64 {
        let ones = vec![1.0; self.n()];
        let g1 = self.k_tilde.mul_vec(&self.tr_apply(&ones));
        g1.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()))
    }
}

/// Bistochastic normalization of a nonnegative kernel matrix.
pub fn bistochastic_normalize(k: CsrMatrix) -> Result<KernelFactor> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            got: k.ncols(),
        });
    }
    let d = k.row_sums();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroRowSum { index: i });
    }
    let inv_d: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    // Column sums of D⁻¹K; for a symmetric kernel the row product is the same.
    let symmetric = k.symmetry_violation(0.0).is_none();
    let q = if symmetric {
        k.mul_vec(&inv_d)
    } else {
        k.tr_mul_vec(&inv_d)
    };
    if let Some(i) = q.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroRowSum { index: i });
    }
    let inv_sqrt_q: Vec<f64> = q.iter().map(|v| 1.0 / v.sqrt()).collect();
    let k_tilde = k.into_scaled(&inv_d, &inv_sqrt_q);
    Ok(KernelFactor {
        k_tilde,
        d,
        q,
        symmetric,
    })
}

/// Kernel settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Neighbors per point; `None` uses [`default_k_nn`].
    pub k_nn: Option<usize>,
    pub overrides: BandwidthOverrides,
}

/// Everything needed to evaluate the kernel between new points and the
/// training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    /// Training points, row-major.
    points: Vec<f64>,
    dim: usize,
    pub k_nn: usize,
    /// Squared distance from each training point to its farthest retained
    /// neighbor.
    pub radii2: Vec<f64>,
    pub bandwidth: BandwidthModel,
}

impl KernelModel {
    /// Runs kNN, bandwidth fitting, kernel assembly and normalization.
    pub fn fit(points: &DMatrix<f64>, cfg: &KernelConfig) -> Result<(Self, KernelFactor)> {
        let n = points.nrows();
        if n < 2 {
            return Err(invalid("n", "need at least 2 points"));
        }
        let k_nn = cfg.k_nn.unwrap_or_else(|| default_k_nn(n));
        let dists = pairwise_knn(points, k_nn)?;
        let bandwidth = BandwidthModel::fit(&dists, &cfg.overrides)?;
        log::info!(
            "bandwidth: epsilon={:.6e} epsilon_tilde={:.6e} m_tilde={:.4}",
            bandwidth.epsilon,
            bandwidth.epsilon_tilde,
            bandwidth.m_tilde
        );
        let kernel = vb_kernel(&dists, &bandwidth)?;
        let radii2 = dists.radii2();
        drop(dists);
        let factor = bistochastic_normalize(kernel)?;
        let model = Self {
            points: row_major(points),
            dim: points.ncols(),
            k_nn,
            radii2,
            bandwidth,
        };
        Ok((model, factor))
    }

    pub fn n(&self) -> usize {
        self.radii2.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Unnormalized kernel rows `κ(query, y_j) / N` against the training
    /// set.
    ///
    /// A training point is kept for a query if it is among the query's
    /// `k_nn` nearest neighbors or the query lies within that point's own
    /// neighbor radius. On training points this reproduces the symmetrized
    /// training pattern. The query bandwidth comes from the training density
    /// model evaluated at the query's kNN distances.
    pub fn query_kernel(&self, query: &DMatrix<f64>) -> Result<CsrMatrix> {
        if query.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.ncols(),
            });
        }
        let n = self.n();
        let flat = row_major(query);
        let bw = &self.bandwidth;
        let inv_n = 1.0 / n as f64;
        let rows = par::map_range(query.nrows(), |r| {
            let y = &flat[r * self.dim..(r + 1) * self.dim];
            let d2: Vec<f64> = (0..n).map(|j| dist2(y, self.point(j))).collect();
            let knn = smallest(
                d2.iter().enumerate().map(|(j, &d)| (d, j as u32)).collect(),
                self.k_nn,
            );
            let knn_d2: Vec<f64> = knn.iter().map(|p| p.0).collect();
            let sq = bw.sigma_at(&knn_d2, n);
            if !sq.is_finite() {
                // Density underflowed: no usable bandwidth, so the row is empty.
                return Vec::new();
            }
            let mut keep = vec![false; n];
            for &(_, j) in &knn {
                keep[j as usize] = true;
            }
            (0..n)
                .filter(|&j| keep[j] || d2[j] <= self.radii2[j])
                .filter_map(|j| {
                    let v = kappa(d2[j], bw.epsilon, sq, bw.sigma[j]);
                    (v >= UNDERFLOW).then_some((j as u32, v * inv_n))
                })
                .collect::<Vec<_>>()
        });
        let k = CsrMatrix::from_rows(n, rows);
        if let Some(i) = k.row_sums().iter().position(|&s| !(s > 0.0)) {
            return Err(Error::FarQuery { index: i });
        }
        Ok(k)
    }
}
