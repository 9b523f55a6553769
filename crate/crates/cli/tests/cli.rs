use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
output_dir = "out"
cache_dir = "cache"
seed = 7

[flow]
kind = "lorenz63"
sigma = 10.0
rho = 28.0
beta = 2.6666666666666665

[trajectory]
n = 600
dt = 0.01

[basis]
l = 20

[tau]
min = 1e-4
max = 1e-3
count = 2

[eigenfunctions]
ranks = [1, 2]

[forecast]
observables = ["x1"]
max_lead = 0.2
lead_stride = 5
n_hat = 200
export_seeds = [0]
"#;

fn koopman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopman"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KOOPMAN_THREADS")
        .output()
        .expect("spawn koopman")
}

fn setup(body: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, body).unwrap();
    (dir, cfg)
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn manifest(p: &Path) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Header check plus `{:.16e}` formatting of every numeric field.
fn check_csv(text: &str, header: &str) -> usize {
    assert!(!text.contains('\r'));
    assert!(text.ends_with('\n'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(header));
    let mut rows = 0;
    for line in lines {
        for field in line.split(',') {
            if let Some((mantissa, _)) = field.split_once('e') {
                let digits = mantissa.trim_start_matches('-').split_once('.').map(|(_, d)| d.len());
                assert_eq!(digits, Some(16), "field {field}");
                field.parse::<f64>().unwrap();
            }
        }
        rows += 1;
    }
    rows
}

#[test]
fn run_writes_tables_and_reuses_cache() {
    let (dir, cfg) = setup(SMALL);
    let out_dir = dir.path().join("out");
    assert_ok(&koopman(&["run", arg(&cfg)]));

    let spec = read(&out_dir.join("spectrum_tau00.csv"));
    assert_eq!(check_csv(&spec, "j,omega,dirichlet,tau"), 20);
    let first: Vec<f64> = spec.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!(first[1].abs() < 1e-10 && first[2].abs() < 1e-12, "constant mode {first:?}");
    let ef = read(&out_dir.join("eigenfunction_tau01_j2.csv"));
    assert_eq!(check_csv(&ef, "sample_index,t,re_zeta,im_zeta"), 600);
    let fc = read(&out_dir.join("forecast_tau00_x1.csv"));
    assert_eq!(check_csv(&fc, "lead_time,epsilon"), 5);
    let tr = read(&out_dir.join("trajectory_tau00_x1.csv"));
    assert_eq!(check_csv(&tr, "seed_index,lead_time,truth,prediction"), 5);

    let m = manifest(&out_dir.join("manifest_run.json"));
    assert_eq!(m["command"], "run");
    assert_eq!(m["cache"]["hit"], false);
    assert!(m["config"]["kernel"]["k_nn"].as_u64().unwrap() > 1);
    assert_eq!(m["results"]["tau"].as_array().unwrap().len(), 2);

    let snapshot: Vec<(String, String)> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            let f = f.as_str().unwrap().to_string();
            let text = read(&out_dir.join(&f));
            (f, text)
        })
        .collect();
    assert_ok(&koopman(&["run", arg(&cfg)]));
    assert_eq!(manifest(&out_dir.join("manifest_run.json"))["cache"]["hit"], true);
    for (f, text) in &snapshot {
        assert_eq!(&read(&out_dir.join(f)), text, "{f} changed on cached rerun");
    }

    // A fresh fit without the cache gives the same bytes.
    let uncached = SMALL.replace("output_dir = \"out\"", "output_dir = \"out2\"\ncache = false");
    fs::write(&cfg, uncached).unwrap();
    assert_ok(&koopman(&["run", arg(&cfg)]));
    for (f, text) in &snapshot {
        assert_eq!(&read(&dir.path().join("out2").join(f)), text, "{f} differs without cache");
    }
}

#[test]
fn sweep_matches_run_spectrum() {
    let body = SMALL.replace("max = 1e-3\ncount = 2", "max = 1e-4\ncount = 1");
    let (dir, cfg) = setup(&body);
    let out_dir = dir.path().join("out");
    assert_ok(&koopman(&["run", arg(&cfg)]));
    assert_ok(&koopman(&["sweep-tau", arg(&cfg)]));
    let sweep = read(&out_dir.join("tau_sweep.csv"));
    assert_eq!(check_csv(&sweep, "tau,j,omega,dirichlet"), 20);
    let spec = read(&out_dir.join("spectrum_tau00.csv"));
    for (a, b) in sweep.lines().skip(1).zip(spec.lines().skip(1)) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        assert_eq!((a[1], a[2], a[3], a[0]), (b[0], b[1], b[2], b[3]));
    }
    let m = manifest(&out_dir.join("manifest_sweep_tau.json"));
    assert_eq!(m["cache"]["hit"], true);
    assert!(m["results"]["failures"].as_array().unwrap().is_empty());
}

#[test]
fn forecast_and_eval() {
    let (dir, cfg) = setup(SMALL);
    let out_dir = dir.path().join("out");
    assert_ok(&koopman(&["forecast", arg(&cfg)]));
    let fc = read(&out_dir.join("forecast_x1.csv"));
    assert_eq!(check_csv(&fc, "lead_time,epsilon"), 5);
    let eps: Vec<f64> = fc
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(eps.iter().all(|e| e.is_finite() && *e >= 0.0));
    assert!(eps[0] < 0.5, "zero-lead error {}", eps[0]);
    assert_eq!(manifest(&out_dir.join("manifest_forecast.json"))["results"]["tau"], 1e-4);

    // Two states near the attractor's wings.
    let pts = dir.path().join("points.csv");
    fs::write(&pts, "x,y,z\n-5.0,-7.0,20.0\n5.0,7.0,22.0\n").unwrap();
    assert_ok(&koopman(&["eval", arg(&cfg), "--at", arg(&pts), "--tau", "1e-3"]));
    let ef = read(&out_dir.join("eval_eigenfunctions.csv"));
    assert_eq!(check_csv(&ef, "point_index,j,omega,re_zeta,im_zeta"), 4);
    let ev = read(&out_dir.join("eval_forecast.csv"));
    assert_eq!(check_csv(&ev, "point_index,observable,lead_time,prediction"), 10);
    assert_eq!(manifest(&out_dir.join("manifest_eval.json"))["results"]["n_points"], 2);

    fs::write(&pts, "x,y,z\n1e6,1e6,1e6\n").unwrap();
    let far = koopman(&["eval", arg(&cfg), "--at", arg(&pts)]);
    assert_eq!(far.status.code(), Some(2), "{}", String::from_utf8_lossy(&far.stderr));

    fs::write(&pts, "x,y\n1.0,2.0\n").unwrap();
    assert_eq!(koopman(&["eval", arg(&cfg), "--at", arg(&pts)]).status.code(), Some(1));
}

#[test]
fn invalid_inputs_exit_one() {
    let (dir, cfg) = setup(&SMALL.replace("n = 600", "n = 2"));
    let out = koopman(&["run", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid input"));
    assert!(!dir.path().join("out").exists());

    let missing = dir.path().join("nope.toml");
    assert_eq!(koopman(&["run", arg(&missing)]).status.code(), Some(1));

    fs::write(&cfg, SMALL.replace("seed = 7", "seed = 7\nbogus = 1")).unwrap();
    assert_eq!(koopman(&["run", arg(&cfg)]).status.code(), Some(1));

    fs::write(&cfg, SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_koopman"))
        .args(["run", arg(&cfg)])
        .env("KOOPMAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trajectory_from_csv() {
    let (dir, cfg) = setup(SMALL);
    let mut csv = String::from("a,b\n");
    for i in 0..400 {
        let t = std::f64::consts::TAU * i as f64 / 100.0;
        csv.push_str(&format!("{},{}\n", t.cos(), t.sin()));
    }
    fs::write(dir.path().join("circle.csv"), csv).unwrap();
    let body = r#"
output_dir = "circle_out"
cache_dir = "cache"

[trajectory]
n = 400
dt = 0.06283185307179587
input_csv = "circle.csv"

[kernel]
k_nn = 40

[basis]
l = 10

[tau]
min = 1e-4
max = 1e-4
"#;
    fs::write(&cfg, body).unwrap();
    assert_ok(&koopman(&["run", arg(&cfg)]));
    let spec = read(&dir.path().join("circle_out/spectrum_tau00.csv"));
    assert_eq!(check_csv(&spec, "j,omega,dirichlet,tau"), 10);
    // Uniform rotation at unit speed: the leading nonconstant pair sits at ±1.
    let omega: f64 = spec.lines().nth(2).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((omega.abs() - 1.0).abs() < 0.05, "omega {omega}");
}
