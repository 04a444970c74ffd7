//! The `check`, `simulate`, and `filter` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use slowfast_core::error::Error as CoreError;
use slowfast_core::filtering::{
    epsilon_scaling_experiment, generate_observation, run_filter, substream,
    verify_martingale_bounds, FilterMode, MartingaleReport, ScalingTable, STREAM_TRUTH,
};
use slowfast_core::manifold::TrackedManifold;
use slowfast_core::noise::align;
use slowfast_core::record::write_noise_path;
use slowfast_core::sim::{integrate_full, integrate_reduced};
use slowfast_core::stats::linear_fit;

use crate::config::ScenarioConfig;
use crate::manifest::{build_manifest, RunManifest};
use crate::scenario::{build_scenario, build_system, check_config, CheckReport};

/// Marker for the dedicated exit code of a failed hypothesis gate.
#[derive(Debug)]
pub struct HypothesisFailed;

impl std::fmt::Display for HypothesisFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "hypothesis check failed")
    }
}

impl std::error::Error for HypothesisFailed {}

/// Exit codes: 0 pass, 2 hypothesis failure, 3 numerical divergence,
/// 4 filter degeneracy, 1 anything else.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<HypothesisFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Divergence { .. }) => 3,
        Some(CoreError::Degeneracy { .. }) => 4,
        _ => 1,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_check(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<CheckReport> {
    let report = check_config(cfg)?;
    println!(
        "H1 semigroup bounds: {} (worst ratio {:.3e}, norms: {} euclidean / {} energy)",
        pass_str(report.hypotheses.h1.pass),
        report.hypotheses.h1.worst_ratio,
        report
            .hypotheses
            .h1
            .block_norms
            .iter()
            .filter(|n| **n == slowfast_core::spectral::NormUsed::Euclidean)
            .count(),
        report
            .hypotheses
            .h1
            .block_norms
            .iter()
            .filter(|n| **n == slowfast_core::spectral::NormUsed::BlockEnergy)
            .count(),
    );
    println!(
        "H2 fast dissipation: {} (realized rate {:.6}, gamma2 = {:.6})",
        pass_str(report.hypotheses.h2.pass),
        report.hypotheses.h2.realized_rate,
        report.gamma2
    );
    println!(
        "H3 Lipschitz probes: {} (F ratio {:.6} / declared {:.6}, G ratio {:.6})",
        pass_str(report.hypotheses.h3.pass),
        report.hypotheses.h3.ratio_f,
        report.lipschitz,
        report.hypotheses.h3.ratio_g
    );
    println!(
        "H4 + window: {} (gamma2 = {:.6} > L = {:.6}, mu = {:.6}, eps0 = {})",
        pass_str(report.hypotheses.window.pass && report.hypotheses.window.gamma2_gap),
        report.gamma2,
        report.lipschitz,
        report.mu,
        if report.epsilon0.is_finite() {
            format!("{:.6}", report.epsilon0)
        } else {
            "unconstrained".to_string()
        }
    );
    for ev in &report.per_epsilon {
        println!(
            "  eps = {:<8} M = {:<10} admissible: {}",
            ev.epsilon,
            ev.contraction_m
                .map(|m| format!("{m:.6}"))
                .unwrap_or_else(|| "-".into()),
            pass_str(ev.admissible)
        );
    }
    println!(
        "H5 observation bounds: {} (sup {:.4} <= C_h {:.4}, lip {:.4} <= {:.4})",
        pass_str(report.h5.pass),
        report.h5.sup_observed,
        report.h5.c_h,
        report.h5.lip_observed,
        report.h5.h_lip
    );
    println!("overall: {}", pass_str(report.pass));
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_json(&dir.join("check_report.json"), &report)?;
    }
    Ok(report)
}

fn pass_str(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub gap_initial: f64,
    pub gap_final: f64,
    /// Long-run plateau of the gap (median of the trailing fifth).
    pub gap_floor: f64,
    /// Fitted slope of `ln ||z - z~||` over the attraction window.
    pub gap_slope: f64,
    pub fit_window: f64,
    pub contraction_m: f64,
    pub manifold_sweeps: u64,
    pub outputs: Vec<String>,
}

pub fn cmd_simulate(cfg: &ScenarioConfig, out_dir: &Path) -> Result<SimulateSummary> {
    let report = check_config(cfg)?;
    if !report.pass {
        bail!(HypothesisFailed);
    }
    ensure_dir(out_dir)?;
    let eps = cfg.scales.epsilon.list()[0];
    let sc = build_scenario(cfg, eps)?;
    let dt = sc.stepper.dt;
    let dt_obs = dt * sc.obs_coarsen as f64;
    let horizon = (cfg.scales.horizon_t / dt_obs).ceil() * dt_obs;

    let truth_path = sc.sample_truth_path(horizon, substream(sc.seed, STREAM_TRUTH, 0))?;
    let view = truth_path.view();
    let full = integrate_full(&sc.stepper, &sc.x0, &sc.y0, view, 0.0, horizon)?;
    let mut tracker = TrackedManifold::new(&sc.stepper, view, sc.manifold_cfg)?;
    let reduced = integrate_reduced(&sc.stepper, &sc.x0, &mut tracker, view, 0.0, horizon)?;

    // gap time series and attraction slope over [0, min(T, 20 eps)];
    // the fit covers the decay phase only: the long-run plateau is the
    // first-order discretization mismatch between the two integrators, not
    // part of the attraction rate
    let mut gaps = Vec::with_capacity(full.n_points());
    for k in 0..full.n_points() {
        gaps.push(full.gap_to(&reduced, k));
    }
    let tail_start = full.n_points() * 4 / 5;
    let mut tail: Vec<f64> = gaps[tail_start..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gap_floor = tail.get(tail.len() / 2).copied().unwrap_or(0.0);
    let fit_window = (20.0 * eps).min(horizon);
    let fit_end = (align(fit_window, dt).unwrap_or(0)).max(1) as usize;
    let mut ts = Vec::new();
    let mut ln_gap = Vec::new();
    for k in 0..=fit_end.min(full.n_points() - 1) {
        if gaps[k] > 10.0 * gap_floor && gaps[k] > 0.0 {
            ts.push(full.time(k));
            ln_gap.push(gaps[k].ln());
        }
    }
    if ts.len() < 5 {
        ts.clear();
        ln_gap.clear();
        for k in 0..=fit_end.min(full.n_points() - 1) {
            if gaps[k] > 0.0 {
                ts.push(full.time(k));
                ln_gap.push(gaps[k].ln());
            }
        }
    }
    let (slope, _, _) = linear_fit(&ts, &ln_gap);

    let mut outputs = Vec::new();
    {
        let mut w = fs::File::create(out_dir.join("full.csv"))?;
        full.write_csv(&mut w)?;
        outputs.push("full.csv".into());
        let mut w = fs::File::create(out_dir.join("reduced.csv"))?;
        reduced.write_csv(&mut w)?;
        outputs.push("reduced.csv".into());
        let mut w = std::io::BufWriter::new(fs::File::create(out_dir.join("gap.csv"))?);
        writeln!(w, "t,gap")?;
        for k in 0..full.n_points() {
            writeln!(w, "{},{}", full.time(k), gaps[k])?;
        }
        outputs.push("gap.csv".into());
        let mut w = fs::File::create(out_dir.join("truth_path.bin"))?;
        write_noise_path(&mut w, &truth_path)?;
        outputs.push("truth_path.bin".into());
    }

    let m = sc.stepper.params.contraction_constant()?;
    let summary = SimulateSummary {
        epsilon: eps,
        dt,
        horizon,
        gap_initial: gaps[0],
        gap_final: *gaps.last().unwrap(),
        gap_floor,
        gap_slope: slope,
        fit_window,
        contraction_m: m,
        manifold_sweeps: tracker.total_sweeps,
        outputs: outputs.clone(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    let built = build_system(cfg)?;
    let mut manifest_outputs = outputs.clone();
    manifest_outputs.push("summary.json".into());
    let manifest: RunManifest = build_manifest(cfg, &built, manifest_outputs);
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "simulate: eps = {eps}, gap {:.3e} -> {:.3e}, slope {:.3} (target <= {:.3})",
        summary.gap_initial,
        summary.gap_final,
        summary.gap_slope,
        -0.8 * sc.stepper.params.mu / eps
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterSummary {
    pub table: ScalingTable,
    pub martingale: MartingaleReport,
    pub outputs: Vec<String>,
}

pub fn cmd_filter(cfg: &ScenarioConfig, out_dir: &Path) -> Result<FilterSummary> {
    let report = check_config(cfg)?;
    if !report.pass {
        bail!(HypothesisFailed);
    }
    ensure_dir(out_dir)?;
    let eps_list = cfg.scales.epsilon.list();
    let mut outputs = Vec::new();

    // time series at the first scale ratio, over the experiment horizon
    let sc = build_scenario(cfg, eps_list[0])?;
    let dt_obs = sc.stepper.dt * sc.obs_coarsen as f64;
    let t_max = cfg.filter.t_list.iter().cloned().fold(0.0, f64::max);
    let horizon = (t_max / dt_obs).ceil() * dt_obs;
    let n_obs = (horizon / dt_obs).round() as usize;
    let stride = (n_obs / 24).max(1);
    let emit_times: Vec<f64> = (1..=n_obs)
        .filter(|k| k % stride == 0 || *k == n_obs)
        .map(|k| k as f64 * dt_obs)
        .collect();
    let ns = substream(sc.seed, 0xeb5, 0);
    let truth_path = sc.sample_truth_path(horizon, substream(ns, STREAM_TRUTH, 0))?;
    let truth = integrate_full(&sc.stepper, &sc.x0, &sc.y0, truth_path.view(), 0.0, horizon)?;
    let obs = generate_observation(&truth, &sc.obs, truth_path.view(), sc.obs_coarsen)?;
    for (mode, name) in [
        (FilterMode::Full, "filter_full.csv"),
        (FilterMode::Reduced, "filter_reduced.csv"),
    ] {
        let run = run_filter(&sc, &obs, mode, cfg.filter.particles, ns, &emit_times)?;
        let mut w = std::io::BufWriter::new(fs::File::create(out_dir.join(name))?);
        write!(w, "t")?;
        for i in 0..sc.dict.len() {
            write!(w, ",pi_phi{}", i + 1)?;
        }
        writeln!(w, ",rho1,ess")?;
        for est in &run.estimates {
            write!(w, "{}", est.t)?;
            for v in &est.pi {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", est.log_rho1.exp(), est.ess)?;
        }
        outputs.push(name.to_string());
    }

    // Lemma-style martingale report at the first scale ratio
    let t_mart = (1.0f64 / dt_obs).round().max(1.0) * dt_obs;
    let martingale = verify_martingale_bounds(&sc, t_mart, cfg.filter.p, 2000, 80, 256, 0x11a)?;
    write_json(&out_dir.join("martingale_report.json"), &martingale)?;
    outputs.push("martingale_report.json".into());

    // scale-ratio sweep
    let table = epsilon_scaling_experiment(
        |e| {
            build_scenario(cfg, e)
                .map_err(|err| slowfast_core::error::Error::Domain(err.to_string()))
        },
        &eps_list,
        &cfg.filter.t_list,
        cfg.filter.p,
        cfg.filter.particles,
        cfg.filter.replications,
    )?;
    {
        let mut w = std::io::BufWriter::new(fs::File::create(out_dir.join("scaling_table.csv"))?);
        writeln!(
            w,
            "eps,t,mean_d,se_d,mean_p_phi1,se_p_phi1,n_ok,n_degenerate"
        )?;
        for r in &table.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.eps, r.t, r.mean_d, r.se_d, r.mean_p_phi1, r.se_p_phi1, r.n_ok, r.n_degenerate
            )?;
        }
        outputs.push("scaling_table.csv".into());
    }
    write_json(&out_dir.join("scaling_table.json"), &table)?;
    outputs.push("scaling_table.json".into());

    let built = build_system(cfg)?;
    let mut manifest_outputs = outputs.clone();
    manifest_outputs.push("scaling_table.json".into());
    let manifest = build_manifest(cfg, &built, manifest_outputs);
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    println!(
        "filter: {} rows, exponent(d) = {:.3}, exponent(p-moment) = {:.3}, envelope R^2 = {:.3}",
        table.rows.len(),
        table.exponent_d,
        table.exponent_p,
        table.envelope_r2
    );
    println!(
        "martingale: E[Gamma] = {:.4} +- {:.4} ({}), inverse moment {:.4e} <= {:.4e} ({})",
        martingale.mean_gamma,
        martingale.se_gamma,
        pass_str(martingale.gamma_pass),
        martingale.inv_moment,
        martingale.inv_bound,
        pass_str(martingale.inv_pass)
    );
    Ok(FilterSummary {
        table,
        martingale,
        outputs,
    })
}

/// Resolves `--config`: a path, or the name of a built-in scenario.
pub fn load_config(arg: Option<&str>) -> Result<ScenarioConfig> {
    match arg {
        None => Ok(ScenarioConfig::thermoelastic()),
        Some("thermoelastic") => Ok(ScenarioConfig::thermoelastic()),
        Some(path) => {
            let text = fs::read_to_string(PathBuf::from(path))
                .with_context(|| format!("reading config {path}"))?;
            ScenarioConfig::from_toml(&text)
        }
    }
}
