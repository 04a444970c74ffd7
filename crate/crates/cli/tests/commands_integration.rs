//! Command-level behavior: verdicts, artifacts, determinism, exit codes.

use std::fs;
use std::process::Command;

use slowfast_cli::commands::{cmd_check, cmd_filter, cmd_simulate, load_config};
use slowfast_cli::config::{
    EpsilonSpec, MuSpec, NonlinSpec, OperatorSpec, ScenarioConfig, StateSpec,
};

/// A small coupled scenario that runs in well under a second.
fn small_config(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::thermoelastic();
    cfg.system.slow = OperatorSpec::WaveLadder {
        modes: 2,
        gamma: 1.0,
        lambda: slowfast_cli::config::LambdaLadder::Square,
    };
    cfg.system.fast = OperatorSpec::DiagonalLadder {
        modes: 2,
        kappa: 2.0,
        lambda: slowfast_cli::config::LambdaLadder::Square,
    };
    cfg.system.f = NonlinSpec::SineSaturating {
        amp: 0.25,
        coupled: true,
    };
    cfg.system.g = NonlinSpec::SineSaturating {
        amp: 0.25,
        coupled: true,
    };
    cfg.scales.epsilon = EpsilonSpec::One(0.1);
    cfg.scales.horizon_t = 1.0;
    cfg.filter.dim3 = 2;
    cfg.filter.particles = 60;
    cfg.filter.replications = 2;
    cfg.filter.t_list = vec![0.5];
    cfg.initial.y0 = StateSpec::Unit(1.0);
    cfg.run.seed = seed;
    cfg
}

#[test]
fn check_passes_for_the_builtin_scenario() {
    let cfg = ScenarioConfig::thermoelastic();
    let dir = tempfile::tempdir().unwrap();
    let rep = cmd_check(&cfg, Some(dir.path())).unwrap();
    assert!(rep.pass);
    assert!(dir.path().join("check_report.json").exists());
}

#[test]
fn check_fails_when_dissipation_is_below_the_coupling() {
    let mut cfg = ScenarioConfig::thermoelastic();
    cfg.system.fast = OperatorSpec::DiagonalLadder {
        modes: 16,
        kappa: 0.4,
        lambda: slowfast_cli::config::LambdaLadder::Square,
    };
    cfg.scales.mu = MuSpec::Value(0.3);
    let rep = cmd_check(&cfg, None).unwrap();
    assert!(!rep.pass);
}

#[test]
fn simulate_reports_fast_gap_decay() {
    let cfg = small_config(11);
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_simulate(&cfg, dir.path()).unwrap();
    // attraction at least as fast as 0.8 mu / eps
    let mu = 0.5 * (2.0 - 0.25 * std::f64::consts::SQRT_2);
    assert!(
        summary.gap_slope <= -0.8 * mu / 0.1,
        "slope {}",
        summary.gap_slope
    );
    for f in ["full.csv", "reduced.csv", "gap.csv", "truth_path.bin", "summary.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn simulate_decoupled_gap_decays_at_the_fast_rate() {
    let mut cfg = small_config(12);
    cfg.system.f = NonlinSpec::Zero;
    cfg.system.g = NonlinSpec::Zero;
    cfg.system.fast = OperatorSpec::Diagonal {
        entries: vec![-2.0, -2.0],
    };
    cfg.scales.mu = MuSpec::Value(0.5);
    cfg.initial.y0 = StateSpec::List(vec![0.5, -0.4]);
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_simulate(&cfg, dir.path()).unwrap();
    let want = -2.0 / 0.1;
    assert!(
        (summary.gap_slope - want).abs() <= 0.2 * want.abs(),
        "slope {} vs {want}",
        summary.gap_slope
    );
}

#[test]
fn simulate_is_bitwise_reproducible() {
    let cfg = small_config(13);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, d1.path()).unwrap();
    cmd_simulate(&cfg, d2.path()).unwrap();
    for f in ["full.csv", "reduced.csv", "gap.csv", "truth_path.bin"] {
        let a = fs::read(d1.path().join(f)).unwrap();
        let b = fs::read(d2.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn filter_artifacts_are_deterministic_across_thread_counts() {
    // one worker vs several must produce identical CSV bytes
    let cfg = small_config(14);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let p2 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    p1.install(|| cmd_filter(&cfg, d1.path()).unwrap());
    p2.install(|| cmd_filter(&cfg, d2.path()).unwrap());
    for f in [
        "filter_full.csv",
        "filter_reduced.csv",
        "scaling_table.csv",
    ] {
        let a = fs::read(d1.path().join(f)).unwrap();
        let b = fs::read(d2.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs across thread counts");
    }
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_slowfast");
    let dir = tempfile::tempdir().unwrap();
    // built-in scenario passes the gate
    let ok = Command::new(exe)
        .args(["check", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    // hypothesis violation exits 2
    let bad = r#"
[system]
slow = { kind = "wave-ladder", modes = 2, gamma = 1.0 }
fast = { kind = "diagonal-ladder", modes = 2, kappa = 0.4 }
f = { kind = "sine-saturating", amp = 0.5, coupled = true }
g = { kind = "sine-saturating", amp = 0.5, coupled = true }
sigma1 = 0.3
sigma2 = 0.3
cov1 = { scale = 1.0, decay = 2.0 }
cov2 = { scale = 1.0, decay = 2.0 }

[scales]
epsilon = 0.05
mu = 0.2
horizon_t = 1.0

[filter]
h = { kind = "sine-of-slow" }
dim3 = 2
particles = 10
t_list = [0.5]

[run]
seed = 1
"#;
    let bad_path = dir.path().join("bad.toml");
    fs::write(&bad_path, bad).unwrap();
    let failed = Command::new(exe)
        .args(["check", "--config"])
        .arg(&bad_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(failed.status.code(), Some(2), "{failed:?}");

    // malformed config exits 1 and names the problem
    let broken_path = dir.path().join("broken.toml");
    fs::write(&broken_path, "[system]\nnot_a_field = 1\n").unwrap();
    let broken = Command::new(exe)
        .args(["check", "--config"])
        .arg(&broken_path)
        .output()
        .unwrap();
    assert_eq!(broken.status.code(), Some(1));
}

#[test]
fn config_loading_resolves_builtin_and_files() {
    let builtin = load_config(None).unwrap();
    let named = load_config(Some("thermoelastic")).unwrap();
    assert_eq!(builtin, named);
    assert!(load_config(Some("/nonexistent/path.toml")).is_err());
}

#[test]
fn shipped_config_file_matches_the_builtin() {
    let text = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/thermoelastic.toml"
    ))
    .unwrap();
    let parsed = ScenarioConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, ScenarioConfig::thermoelastic());
}
