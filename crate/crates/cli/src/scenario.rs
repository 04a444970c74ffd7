//! Builds core model objects from a [`ScenarioConfig`].

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use slowfast_core::filtering::{ObsKind, ObservationModel, Scenario, TestDictionary};
use slowfast_core::manifold::ManifoldCfg;
use slowfast_core::noise::CovarianceSpec;
use slowfast_core::sim::SystemModel;
use slowfast_core::spectral::{
    check_hypotheses, compute_contraction_constant, compute_epsilon0, Block, HypothesisReport,
    NonlinKind, Nonlinearity, SpaceName, SpaceSpec, SpectralOperator, SystemParams,
};

use crate::config::{MuSpec, NonlinSpec, ObsSpec, OperatorSpec, ScenarioConfig};

pub struct BuiltSystem {
    pub a: SpectralOperator,
    pub b: SpectralOperator,
    pub f: Nonlinearity,
    pub g: Nonlinearity,
    pub obs: ObservationModel,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
    pub mu: f64,
}

fn build_operator(spec: &OperatorSpec, name: SpaceName) -> Result<SpectralOperator> {
    match spec {
        OperatorSpec::WaveLadder {
            modes,
            gamma,
            lambda,
        } => {
            if *modes == 0 {
                bail!("wave ladder needs at least one mode");
            }
            let sp = Arc::new(SpaceSpec::new(name, vec![2; *modes])?);
            let blocks = (1..=*modes)
                .map(|k| {
                    let l = lambda.value(k);
                    Block::Two([[0.0, l], [-l, -*gamma]])
                })
                .collect();
            Ok(SpectralOperator::new(sp, blocks)?)
        }
        OperatorSpec::DiagonalLadder {
            modes,
            kappa,
            lambda,
        } => {
            if *modes == 0 {
                bail!("diagonal ladder needs at least one mode");
            }
            let entries = (1..=*modes).map(|k| -kappa * lambda.value(k)).collect();
            let sp = Arc::new(SpaceSpec::diagonal(name, *modes)?);
            Ok(SpectralOperator::diagonal(sp, entries)?)
        }
        OperatorSpec::Diagonal { entries } => {
            if entries.is_empty() {
                bail!("diagonal operator needs entries");
            }
            let sp = Arc::new(SpaceSpec::diagonal(name, entries.len())?);
            Ok(SpectralOperator::diagonal(sp, entries.clone())?)
        }
    }
}

fn build_nonlinearity(spec: &NonlinSpec) -> Result<Nonlinearity> {
    Ok(match spec {
        NonlinSpec::Zero => Nonlinearity::zero(),
        NonlinSpec::LinearCoupling { gain } => {
            Nonlinearity::new(NonlinKind::LinearCoupling { gain: *gain })?
        }
        NonlinSpec::SineSaturating { amp, coupled } => Nonlinearity::new(NonlinKind::Sine {
            amp: *amp,
            coupled: *coupled,
        })?,
        NonlinSpec::UserTable { xs, ys } => Nonlinearity::new(NonlinKind::Table {
            xs: xs.clone(),
            ys: ys.clone(),
        })?,
    })
}

/// Derived backward growth rate of the slow semigroup.
fn derived_gamma1(spec: &OperatorSpec) -> f64 {
    match spec {
        OperatorSpec::WaveLadder { gamma, .. } => *gamma,
        OperatorSpec::DiagonalLadder { kappa, lambda, modes } => {
            (1..=*modes).map(|k| kappa * lambda.value(k)).fold(0.0, f64::max)
        }
        OperatorSpec::Diagonal { entries } => entries.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// Realized fast dissipation rate `min |entry|` (may be nonpositive for
/// inadmissible configs; the checker reports that as an H2 failure).
fn derived_gamma2(spec: &OperatorSpec) -> f64 {
    match spec {
        OperatorSpec::WaveLadder { .. } => f64::NAN,
        OperatorSpec::DiagonalLadder { kappa, lambda, modes } => (1..=*modes)
            .map(|k| kappa * lambda.value(k))
            .fold(f64::INFINITY, f64::min),
        OperatorSpec::Diagonal { entries } => {
            entries.iter().map(|v| -v).fold(f64::INFINITY, f64::min)
        }
    }
}

pub fn build_system(cfg: &ScenarioConfig) -> Result<BuiltSystem> {
    let a = build_operator(&cfg.system.slow, SpaceName::H1).context("slow operator")?;
    let b = build_operator(&cfg.system.fast, SpaceName::H2).context("fast operator")?;
    let f = build_nonlinearity(&cfg.system.f).context("nonlinearity f")?;
    let g = build_nonlinearity(&cfg.system.g).context("nonlinearity g")?;
    let obs = ObservationModel::new(
        match &cfg.filter.h {
            ObsSpec::SineOfSlow => ObsKind::SineOfSlow,
            ObsSpec::BoundedLinear { gain, clip } => ObsKind::BoundedLinear {
                gain: *gain,
                clip: *clip,
            },
            ObsSpec::UserTable { xs, ys } => ObsKind::Table {
                xs: xs.clone(),
                ys: ys.clone(),
            },
        },
        cfg.filter.dim3,
    )?;
    let gamma1 = cfg
        .system
        .gamma1
        .unwrap_or_else(|| derived_gamma1(&cfg.system.slow));
    let gamma2 = derived_gamma2(&cfg.system.fast);
    let lipschitz = f.declared_lipschitz.max(g.declared_lipschitz);
    let mu = match cfg.scales.mu {
        MuSpec::Value(v) => v,
        MuSpec::Auto(_) => SystemParams::default_mu(gamma2, lipschitz),
    };
    Ok(BuiltSystem {
        a,
        b,
        f,
        g,
        obs,
        gamma1,
        gamma2,
        lipschitz,
        mu,
    })
}

pub fn system_params(cfg: &ScenarioConfig, built: &BuiltSystem, eps: f64) -> SystemParams {
    SystemParams {
        epsilon: eps,
        sigma1: cfg.system.sigma1,
        sigma2: cfg.system.sigma2,
        gamma1: built.gamma1,
        gamma2: built.gamma2,
        lipschitz: built.lipschitz,
        mu: built.mu,
        horizon_t: cfg.scales.horizon_t,
        c_h: built.obs.c_h,
        h_lip: built.obs.h_lip,
    }
}

/// Builds the full scenario bundle at one scale ratio.
pub fn build_scenario(cfg: &ScenarioConfig, eps: f64) -> Result<Scenario> {
    let built = build_system(cfg)?;
    let params = system_params(cfg, &built, eps);
    let model = SystemModel::new(
        built.a.clone(),
        built.b.clone(),
        built.f.clone(),
        built.g.clone(),
        params,
    )?;
    let dt = eps / cfg.scales.oversample_fast as f64;
    let stepper = model.stepper(dt)?;
    let dim1 = model.dim1();
    let dim2 = model.dim2();
    let x0 = cfg
        .initial
        .x0
        .realize(dim1)
        .map_err(anyhow::Error::msg)
        .context("initial x0")?;
    let y0 = cfg
        .initial
        .y0
        .realize(dim2)
        .map_err(anyhow::Error::msg)
        .context("initial y0")?;
    Ok(Scenario {
        model,
        stepper,
        cov1: CovarianceSpec::power_decay(dim1, cfg.system.cov1.scale, cfg.system.cov1.decay)?,
        cov2: CovarianceSpec::power_decay(dim2, cfg.system.cov2.scale, cfg.system.cov2.decay)?,
        obs: built.obs,
        dict: TestDictionary::default_for_dim(dim1, cfg.filter.dict_size, cfg.filter.dict_scale)?,
        manifold_cfg: ManifoldCfg {
            tol: cfg.manifold.tol,
            t_back_factor: cfg.manifold.t_back_factor,
            max_iter: cfg.manifold.max_iter,
        },
        obs_coarsen: cfg.filter.obs_coarsen,
        x0,
        y0,
        seed: cfg.run.seed,
    })
}

/// Aggregated verdicts for `cmd_check`.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub hypotheses: HypothesisReport,
    pub h5: slowfast_core::filtering::H5Verdict,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
    pub mu: f64,
    pub epsilon0: f64,
    pub per_epsilon: Vec<EpsilonVerdict>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonVerdict {
    pub epsilon: f64,
    pub contraction_m: Option<f64>,
    pub admissible: bool,
}

pub fn check_config(cfg: &ScenarioConfig) -> Result<CheckReport> {
    let built = build_system(cfg)?;
    let eps_list = cfg.scales.epsilon.list();
    let first = eps_list[0];
    let params = system_params(cfg, &built, first);
    let hypotheses = check_hypotheses(&built.a, &built.b, &built.f, &built.g, &params);
    let h5 = built.obs.verify_bounds(
        built.a.space.dim,
        built.b.space.dim,
        slowfast_core::spectral::DEFAULT_PROBES,
        cfg.run.seed ^ 0x48_35,
    );
    let eps0 = compute_epsilon0(built.lipschitz, built.gamma1, built.gamma2, built.mu)
        .unwrap_or(f64::NAN);
    let mut per_epsilon = Vec::new();
    let mut all_adm = true;
    for &e in &eps_list {
        let m = compute_contraction_constant(e, built.lipschitz, built.gamma1, built.gamma2, built.mu)
            .ok();
        let admissible = eps0.is_finite() && e < eps0 || eps0.is_infinite();
        all_adm &= admissible && m.map(|m| m < 1.0).unwrap_or(false);
        per_epsilon.push(EpsilonVerdict {
            epsilon: e,
            contraction_m: m,
            admissible,
        });
    }
    let pass = hypotheses.pass() && h5.pass && all_adm;
    Ok(CheckReport {
        hypotheses,
        h5,
        gamma1: built.gamma1,
        gamma2: built.gamma2,
        lipschitz: built.lipschitz,
        mu: built.mu,
        epsilon0: eps0,
        per_epsilon,
        pass,
    })
}
