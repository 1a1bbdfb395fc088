use std::path::Path;
use std::process::{Command, Output};

fn lyapem(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lyapem"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn lyapem")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 7
n = 120
trials = 3
prior_sigmas = [0.1, 0.05]
"#;

#[test]
fn reproduce_fig1_writes_result_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    let o = lyapem(&["reproduce-fig1", "--seed", "42", "--out", "runs/"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs = dir.path().join("runs");
    assert!(runs.join("result.json").is_file());
    assert!(runs.join("rates.csv").is_file());
    assert!(stdout(&o).contains("sigma=0.05 median_mu1="));
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn missing_config_exits_one_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = lyapem(&["run-em", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
    assert!(!dir.path().join("lyapem-out").exists());
}

#[test]
fn classify_fig1_is_exponentially_stable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fig1.toml"), "seed = 42\n").unwrap();
    let o = lyapem(&["classify", "--config", "fig1.toml", "--sigma", "0.05", "--out", "c"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("verdict ExponentiallyStable rho_hat "), "{line}");
    let rho: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!((rho - 0.31).abs() <= 0.1, "rho_hat {rho}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/stability.json")).unwrap()).unwrap();
    for key in ["verdict", "rho_hat", "mu_hat", "evidence"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn check_conditions_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = lyapem(&["check-conditions", "--config", "small.toml", "--out", "k"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("descent_by_divergence=pass"), "{}", stdout(&o));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("k/conditions.json")).unwrap()).unwrap();
    let arr = results.as_array().unwrap();
    assert_eq!(arr.len(), 5);
    assert!(arr.iter().all(|r| r.get("violations").is_some()));
}

#[test]
fn same_argv_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let a = lyapem(&["reproduce-fig1", "--config", "small.toml", "--out", "a"], dir.path());
    let b = lyapem(&["reproduce-fig1", "--config", "small.toml", "--out", "b"], dir.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    for f in ["result.json", "rates.csv", "trajectories/σ0.05_t2.csv"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn verify_only_adds_a_section() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let plain = lyapem(&["run-em", "--config", "small.toml", "--sigma", "0.05", "--out", "p"], dir.path());
    let checked = lyapem(
        &["run-em", "--config", "small.toml", "--sigma", "0.05", "--out", "v", "--verify"],
        dir.path(),
    );
    assert_eq!(plain.status.code(), Some(0), "{}", stderr(&plain));
    assert_eq!(checked.status.code(), Some(0), "{}", stderr(&checked));
    assert_eq!(stdout(&plain), stdout(&checked));
    for f in ["result.json", "rates.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("p").join(f)).unwrap(),
            std::fs::read(dir.path().join("v").join(f)).unwrap()
        );
    }
    assert!(!dir.path().join("p/verification.json").exists());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verification.json")).unwrap()).unwrap();
    let entry = &v[0];
    assert!(entry["m_step_max_abs_diff"].as_f64().unwrap() < 1e-4);
    assert!(entry["terminal_gradient_norm"].as_f64().unwrap() < 1e-4);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let cfg = lyapem(&["gen-data", "--config", "small.toml", "--out", "cfg", "--trials", "1"], dir.path());
    let flag = lyapem(
        &["gen-data", "--config", "small.toml", "--seed", "7", "--out", "flag", "--trials", "1"],
        dir.path(),
    );
    let other = lyapem(
        &["gen-data", "--config", "small.toml", "--seed", "8", "--out", "other", "--trials", "1"],
        dir.path(),
    );
    for o in [&cfg, &flag, &other] {
        assert_eq!(o.status.code(), Some(0), "{}", stderr(o));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("data_t0.csv")).unwrap();
    assert_eq!(read("cfg"), read("flag"));
    assert_ne!(read("cfg"), read("other"));
    assert!(!dir.path().join("cfg/data_t1.csv").exists());
}

#[test]
fn run_em_accepts_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let g = lyapem(&["gen-data", "--config", "small.toml", "--out", "g"], dir.path());
    assert_eq!(g.status.code(), Some(0));
    let o = lyapem(
        &["run-em", "--config", "small.toml", "--data", "g/data_t0.csv", "--out", "r", "--quiet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let sampled = lyapem(&["run-em", "--config", "small.toml", "--out", "s", "--quiet"], dir.path());
    assert_eq!(sampled.status.code(), Some(0));
    // Trial 0 sampled the same data file, and prior draws do not depend on the data.
    let rows = |d: &str| -> Vec<String> {
        let csv = std::fs::read_to_string(dir.path().join(d).join("rates.csv")).unwrap();
        csv.lines().skip(1).map(String::from).collect()
    };
    let (from_file, from_seed) = (rows("r"), rows("s"));
    assert_eq!(from_file.len(), 3);
    assert_eq!(from_file[0], from_seed[0]);
    assert_ne!(from_file[1], from_seed[1]);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lyapem(&["reproduce-fig1", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(lyapem(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(lyapem(&["classify", "--sigma", "-1"], dir.path()).status.code(), Some(1));

    std::fs::write(dir.path().join("bad.toml"), "n = 100\nnonsense = 3\n").unwrap();
    let o = lyapem(&["reproduce-fig1", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.json"), r#"{"weights": [0.5, 0.6]}"#).unwrap();
    let o = lyapem(&["reproduce-fig1", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("weights"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_lyapem"))
        .args(["gen-data", "--out", "x"])
        .current_dir(dir.path())
        .env("LYAPEM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LYAPEM_THREADS"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = lyapem(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("reproduce-fig1"));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // One EM step leaves no ratios to estimate a rate from.
    let cfg = "n = 50\ntrials = 2\n[stop]\nmax_iters = 1\n";
    std::fs::write(dir.path().join("short.toml"), cfg).unwrap();
    let o = lyapem(&["run-em", "--config", "short.toml", "--out", "n"], dir.path());
    assert_eq!(o.status.code(), Some(2), "stdout {} stderr {}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("2 of 2 trials failed"), "{}", stderr(&o));
    // Partial results are still written.
    assert!(dir.path().join("n/result.json").is_file());
}
