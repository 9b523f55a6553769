//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Runs at desk scale (N = 16000) and takes a few minutes in release-like
//! test builds. Exits with status 0 regardless of the outcome unless
//! `KOOPMAN_ACCEPTANCE_STRICT=1` is set, in which case any FAIL exits 1.

use std::f64::consts::TAU;
use std::time::Instant;

use koopman_core::basis::{eigenbasis, nystrom_eval, rkhs_scaling, Backend, BasisOptions, EigenBasis};
use koopman_core::dynamics::{observe, trajectory, FlowSpec, ObservationMap, ObservedSeries, TrajectoryConfig};
use koopman_core::forecast::{lead_steps, pointwise_modes, project_observable, verify, ForecastModel, ForecastResult};
use koopman_core::generator::{fd_matrix, generator_matrix, spectrum, GeneratorOptions, GeneratorSpectrum};
use koopman_core::kernel::{KernelConfig, KernelModel};
use koopman_core::linalg::sym_eigen_desc;
use koopman_core::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
            println!("PASS {name}: {detail}");
        } else {
            self.failed += 1;
            println!("FAIL {name}: {detail}");
        }
    }
}

struct Fit {
    model: KernelModel,
    basis: EigenBasis,
    markov: f64,
    dt: f64,
}

fn series(flow: FlowSpec, map: ObservationMap, x0: Vec<f64>, n: usize, dt: f64) -> ObservedSeries {
    let traj = trajectory(&flow, &TrajectoryConfig::new(x0, n, dt)).expect("trajectory");
    observe(&map, &traj).expect("observe")
}

fn fit(train: &ObservedSeries, dt: f64, l: usize) -> Fit {
    let start = Instant::now();
    let (model, kf) = KernelModel::fit(&train.values, &KernelConfig::default()).expect("kernel");
    let markov = kf.markov_residual();
    let basis = eigenbasis(&kf, l, &BasisOptions::default()).expect("eigenbasis");
    eprintln!("  fitted N={} L={} in {:.1?}", train.len(), basis.len(), start.elapsed());
    Fit {
        model,
        basis,
        markov,
        dt,
    }
}

fn skill(fit: &Fit, spec: &GeneratorSpectrum, verif: &ObservedSeries, component: usize, steps: &[usize]) -> ForecastResult {
    let train_f: Vec<f64> = fit.model_component(component);
    let c = project_observable(&train_f, &fit.basis, fit.basis.len()).expect("project");
    let model = ForecastModel::new(c, fit.basis.len(), &fit.basis, spec).expect("model");
    let psi = nystrom_eval(&verif.values, &fit.model, &fit.basis).expect("nystrom");
    let z = pointwise_modes(&psi, &fit.basis, spec);
    verify(&model, &z, &verif.component(component), steps, fit.dt).expect("verify")
}

impl Fit {
    fn model_component(&self, k: usize) -> Vec<f64> {
        (0..self.model.n()).map(|i| self.model.point(i)[k]).collect()
    }
}

fn mean_over(res: &ForecastResult, lo: f64, hi: f64) -> f64 {
    let vals: Vec<f64> = res
        .lead_times
        .iter()
        .zip(&res.epsilon)
        .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
        .map(|(_, e)| *e)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn at_time(res: &ForecastResult, t: f64) -> f64 {
    let k = res
        .lead_times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .unwrap()
        .0;
    res.epsilon[k]
}

/// Least-squares line through `(x, y)`: returns `(slope, r²)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}

/// Structural checks shared by every fitted spectrum.
fn skew_checks(fit: &Fit, spec: &GeneratorSpectrum) -> (f64, f64, usize) {
    let scaling = rkhs_scaling(&fit.basis.lambda, spec.tau).unwrap();
    let fd = fd_matrix(fit.basis.n(), fit.dt).unwrap();
    let w = generator_matrix(&fit.basis, &scaling, &fd, &GeneratorOptions::default()).unwrap();
    let skew = (&w + w.transpose()).amax();
    let mut sorted = spec.omega.clone();
    sorted.sort_by(f64::total_cmp);
    let l = sorted.len();
    let asym = (0..l).map(|i| (sorted[i] + sorted[l - 1 - i]).abs()).fold(0.0, f64::max);
    let constants = (0..l)
        .filter(|&j| spec.omega[j].abs() * spec.dt < 1e-10 && spec.dirichlet[j] <= 1e-6)
        .count();
    (skew, asym, constants)
}

fn main() {
    let started = Instant::now();
    let mut report = Report { passed: 0, failed: 0 };
    let tau = 1e-5;
    let gen_opts = GeneratorOptions::default();

    // Torus: the injective embedding (both radial factors use cos θ2).
    eprintln!("torus");
    let torus_dt = TAU / 500.0;
    let torus_map = ObservationMap::TorusEmbedding {
        radius: 0.5,
        standard: true,
    };
    let torus_train = series(FlowSpec::torus_standard(), torus_map, vec![0.0, 0.0], 16000, torus_dt);
    let torus = fit(&torus_train, torus_dt, 300);
    let torus100 = Fit {
        basis: torus.basis.truncated(100).unwrap(),
        model: torus.model.clone(),
        markov: torus.markov,
        dt: torus_dt,
    };
    let spec100 = spectrum(&torus100.basis, tau, torus_dt, &gen_opts).unwrap();
    let lowest: Vec<f64> = spec100.positive_modes().take(3).map(|j| spec100.omega[j]).collect();
    let targets = [1.0, 30f64.sqrt(), 2.0 + 30f64.sqrt()];
    let ok = lowest.len() == 3
        && lowest
            .iter()
            .zip(&targets)
            .all(|(w, t)| (w - t).abs() <= 0.02 * t);
    let ranked: Vec<String> = spec100
        .positive_modes()
        .take(8)
        .map(|j| format!("{:.4}", spec100.omega[j]))
        .collect();
    report.check(
        "torus_eigenfrequencies",
        ok,
        format!(
            "three lowest-energy positive frequencies {:?} vs {:?} (2%); first eight by energy: [{}]",
            lowest.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>(),
            targets.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>(),
            ranked.join(", ")
        ),
    );

    let spec300 = spectrum(&torus.basis, tau, torus_dt, &gen_opts).unwrap();
    let torus_verif = series(FlowSpec::torus_standard(), torus_map, vec![1.0, 2.0], 16000, torus_dt);
    let max_steps = (20.0 / torus_dt).ceil() as usize;
    let res = skill(&torus, &spec300, &torus_verif, 0, &lead_steps(max_steps, 8));
    let worst = res.epsilon.iter().copied().fold(0.0, f64::max);
    let (slope, r2) = linear_fit(&res.lead_times, &res.epsilon);
    report.check(
        "torus_forecast_skill",
        worst <= 0.2 && slope > 0.0 && r2 >= 0.9,
        format!(
            "max eps on [0, {:.2}] = {worst:.4} (<= 0.2); eps(0) = {:.4}, eps(end) = {:.4}; linear fit slope {slope:.3e}, r2 {r2:.3} (>= 0.9)",
            res.lead_times.last().unwrap(),
            res.epsilon[0],
            res.epsilon.last().unwrap()
        ),
    );

    // Lorenz 63.
    eprintln!("lorenz63");
    let l63_dt = 0.01;
    let l63 = FlowSpec::lorenz63_standard();
    let l63_train = series(l63, ObservationMap::Identity, vec![1.0, 1.0, 1.0], 16000, l63_dt);
    let l63_fit = fit(&l63_train, l63_dt, 300);
    let l63_spec = spectrum(&l63_fit.basis, tau, l63_dt, &gen_opts).unwrap();
    let l63_verif = series(l63, ObservationMap::Identity, vec![-5.0, 3.0, 30.0], 16000, l63_dt);
    let steps = lead_steps(500, 5);
    let f1 = skill(&l63_fit, &l63_spec, &l63_verif, 0, &steps);
    let f3 = skill(&l63_fit, &l63_spec, &l63_verif, 2, &steps);
    let (early, mid, late) = (mean_over(&f1, 0.0, 0.5), mean_over(&f1, 0.5, 1.0), mean_over(&f1, 4.0, 5.0));
    let (e1, e3) = (at_time(&f1, 2.0), at_time(&f3, 2.0));
    report.check(
        "l63_forecast_behavior",
        early < mid && (1.1..=1.6).contains(&late) && e3 < e1,
        format!(
            "F1 mean eps [0,0.5] = {early:.3} < [0.5,1] = {mid:.3}; plateau mean eps [4,5] = {late:.3} in [1.1, 1.6]; eps(2): F3 {e3:.3} < F1 {e1:.3}"
        ),
    );

    // Rössler.
    eprintln!("rossler");
    let ros_dt = 0.04;
    let ros_train = series(FlowSpec::rossler_standard(), ObservationMap::Identity, vec![1.0, 1.0, 0.0], 16000, ros_dt);
    let ros_fit = fit(&ros_train, ros_dt, 300);
    let ros_spec = spectrum(&ros_fit.basis, tau, ros_dt, &gen_opts).unwrap();
    let low: Vec<f64> = ros_spec.positive_modes().take(20).map(|j| ros_spec.omega[j]).collect();
    let base = low.iter().copied().find(|w| (0.8..=1.25).contains(w));
    let near = |target: f64| low.iter().copied().find(|w| (w - target).abs() <= 0.05 * target);
    let (h2, h3) = match base {
        Some(a) => (near(2.0 * a), near(3.0 * a)),
        None => (None, None),
    };
    report.check(
        "rossler_spectrum_structure",
        base.is_some() && h2.is_some() && h3.is_some(),
        format!(
            "base {base:.4?}, 2x match {h2:.4?}, 3x match {h3:.4?} among 20 lowest-energy positive frequencies [{}]",
            low.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    // Small problem shared by the dense checks.
    let small_dt = 0.05;
    let small = series(l63, ObservationMap::Identity, vec![1.0, 1.0, 1.0], 200, small_dt);
    let (small_model, small_kf) = KernelModel::fit(&small.values, &KernelConfig::default()).unwrap();

    let dense_markov = small_kf.markov_residual();
    let sparse = [("torus", torus.markov), ("l63", l63_fit.markov), ("rossler", ros_fit.markov)];
    let worst_sparse = sparse.iter().map(|p| p.1).fold(0.0, f64::max);
    report.check(
        "markov_property",
        worst_sparse <= 1e-6 && dense_markov <= 1e-10,
        format!(
            "kNN kernels {} (<= 1e-6); dense N=200 kernel {dense_markov:.2e} (<= 1e-10)",
            sparse.iter().map(|(n, v)| format!("{n} {v:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let mut skew_ok = true;
    let mut details = Vec::new();
    for (name, f, s) in [
        ("torus L=100", &torus100, &spec100),
        ("torus L=300", &torus, &spec300),
        ("l63", &l63_fit, &l63_spec),
        ("rossler", &ros_fit, &ros_spec),
    ] {
        let (skew, asym, constants) = skew_checks(f, s);
        skew_ok &= skew == 0.0 && asym <= 1e-10 && constants == 1;
        details.push(format!("{name}: |W+W^T| {skew:.1e}, asym {asym:.1e}, constant modes {constants}"));
    }
    report.check("skew_adjointness", skew_ok, details.join("; "));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_semigroup = 0.0f64;
    for _ in 0..10000 {
        let lambda = [1.0 - rng.random::<f64>()];
        let (t1, t2) = (10.0 * (1.0 - rng.random::<f64>()), 10.0 * (1.0 - rng.random::<f64>()));
        let a = rkhs_scaling(&lambda, t1 + t2).unwrap().lambda_tau[0];
        let b = rkhs_scaling(&lambda, t1).unwrap().lambda_tau[0] * rkhs_scaling(&lambda, t2).unwrap().lambda_tau[0];
        worst_semigroup = worst_semigroup.max((a - b).abs());
    }
    report.check(
        "semigroup_law",
        worst_semigroup <= 1e-14,
        format!("max |lambda_(t1+t2) - lambda_t1 lambda_t2| = {worst_semigroup:.2e} over 10000 draws (<= 1e-14)"),
    );

    // Dense oracles at N = 200.
    let l_small = 20;
    let lanczos = eigenbasis(
        &small_kf,
        l_small,
        &BasisOptions {
            backend: Backend::Lanczos,
            ..Default::default()
        },
    )
    .unwrap();
    let kt = small_kf.k_tilde.to_dense();
    let (g_vals, g_vecs) = sym_eigen_desc(&kt * kt.transpose());
    let eig_err = (0..l_small).map(|j| (lanczos.lambda[j] - g_vals[j]).abs()).fold(0.0, f64::max);
    let overlap = lanczos.phi.tr_mul(&g_vecs.columns(0, l_small));
    let sv = overlap.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    let sin_angle = (1.0 - smin * smin).max(0.0).sqrt();

    let l_pred = 40;
    let small_basis = eigenbasis(&small_kf, l_pred, &BasisOptions::default()).unwrap();
    let small_spec = spectrum(&small_basis, 1e-3, small_dt, &gen_opts).unwrap();
    let f: Vec<f64> = small.component(0);
    let c = project_observable(&f, &small_basis, l_pred).unwrap();
    let fmodel = ForecastModel::new(c.clone(), l_pred, &small_basis, &small_spec).unwrap();
    let psi = nystrom_eval(&small.values, &small_model, &small_basis).unwrap();
    let z = pointwise_modes(&psi, &small_basis, &small_spec);
    // Oracle: W from an explicit dense V with the mean projected out, then
    // expm(tW) applied to the RKHS coefficients.
    let n_small = small.len();
    let mut v = DMatrix::<f64>::zeros(n_small, n_small);
    for i in 0..n_small - 1 {
        let s = if i == 0 || i == n_small - 2 { 0.5 } else { 1.0 } / (2.0 * small_dt);
        v[(i, i + 1)] = s;
        v[(i + 1, i)] = -s;
    }
    let centering = DMatrix::<f64>::identity(n_small, n_small) - DMatrix::from_element(n_small, n_small, 1.0 / n_small as f64);
    let lt: Vec<f64> = small_basis.lambda.iter().map(|&l| (1e-3 * (1.0 - 1.0 / l)).exp()).collect();
    let half = DMatrix::from_diagonal(&DVector::from_iterator(l_pred, lt.iter().map(|x| x.sqrt())));
    let w_oracle = &half * small_basis.phi.transpose() * &centering * &v * &centering * &small_basis.phi * &half;
    let psi_tau = DMatrix::from_fn(n_small, l_pred, |i, j| psi[(i, j)] * (lt[j] / small_basis.lambda[j]).sqrt());
    let b = DVector::from_iterator(l_pred, (0..l_pred).map(|j| c[j] * (small_basis.lambda[j] / lt[j]).sqrt()));
    let mut pred_err = 0.0f64;
    for t in [0.1, 1.0, 10.0] {
        let oracle = &psi_tau * ((&w_oracle * t).exp() * &b);
        let ours = koopman_core::forecast::predict(&fmodel, &z, t);
        let scale = oracle.amax();
        let err = (0..n_small).map(|i| (ours[i] - oracle[i]).abs()).fold(0.0, f64::max) / scale;
        pred_err = pred_err.max(err);
    }
    report.check(
        "dense_oracle_equivalence",
        eig_err <= 1e-8 && sin_angle <= 1e-6 && pred_err <= 1e-8,
        format!(
            "N=200 L={l_small}: eigenvalue err {eig_err:.2e} (<= 1e-8), subspace sin angle {sin_angle:.2e} (<= 1e-6); predict vs expm (L={l_pred}, t in {{0.1, 1, 10}}) rel err {pred_err:.2e} (<= 1e-8)"
        ),
    );

    let psi_train = nystrom_eval(&torus_train.values, &torus.model, &torus.basis).unwrap();
    let mut nys = 0.0f64;
    for j in 0..torus.basis.len() {
        let phi = torus.basis.phi.column(j);
        let sig = torus.basis.lambda[j].sqrt();
        let err = (0..phi.len()).map(|i| (psi_train[(i, j)] - sig * phi[i]).abs()).fold(0.0, f64::max);
        nys = nys.max(err / phi.amax());
    }
    report.check(
        "nystrom_consistency",
        nys <= 1e-6,
        format!("torus N=16000 L=300 in-sample max_j |psi_j - lambda_j^1/2 phi_j|_inf / |phi_j|_inf = {nys:.2e} (<= 1e-6)"),
    );

    let mut fd_ok = true;
    let mut fd_detail = Vec::new();
    for (omega, dt) in [(1.0, 0.01), (5.0, 0.01), (20.0, 0.01), (1.0, 0.1)] {
        let n = 1000;
        let op = fd_matrix(n, dt).unwrap();
        let samples: Vec<f64> = (0..n).map(|k| (omega * k as f64 * dt).sin()).collect();
        let d = op.apply(&samples);
        let bound = (omega * dt).powi(2) * omega / 4.0;
        // Rows 2..N-3 carry the full (-1, 0, 1) stencil; rows 1 and N-2
        // share a half-weighted entry with the boundary rows.
        let worst = (2..n - 2)
            .map(|k| (d[k] - omega * (omega * k as f64 * dt).cos()).abs())
            .fold(0.0, f64::max);
        fd_ok &= worst <= bound;
        fd_detail.push(format!("omega {omega} dt {dt}: {worst:.2e} <= {bound:.2e}"));
    }
    report.check("finite_difference_accuracy", fd_ok, fd_detail.join("; "));

    println!(
        "acceptance: {} passed, {} failed in {:.1?}",
        report.passed,
        report.failed,
        started.elapsed()
    );
    let strict = std::env::var("KOOPMAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && report.failed > 0 {
        std::process::exit(1);
    }
}
