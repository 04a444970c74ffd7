//! Run manifests: enough provenance to reproduce every CSV bitwise.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::scenario::BuiltSystem;
use slowfast_core::spectral::{compute_contraction_constant, compute_epsilon0};

#[derive(Debug, Clone, Serialize)]
pub struct DerivedConstants {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
    pub mu: f64,
    pub epsilon0: f64,
    pub contraction_m_per_eps: Vec<(f64, Option<f64>)>,
    pub manifold_lip_bound_per_eps: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    pub derived: DerivedConstants,
    pub created_unix: u64,
    pub outputs: Vec<String>,
}

pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let canonical = toml::to_string_pretty(cfg).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_manifest(
    cfg: &ScenarioConfig,
    built: &BuiltSystem,
    outputs: Vec<String>,
) -> RunManifest {
    let eps_list = cfg.scales.epsilon.list();
    let eps0 = compute_epsilon0(built.lipschitz, built.gamma1, built.gamma2, built.mu)
        .unwrap_or(f64::NAN);
    let mut ms = Vec::new();
    let mut lips = Vec::new();
    for &e in &eps_list {
        let m =
            compute_contraction_constant(e, built.lipschitz, built.gamma1, built.gamma2, built.mu)
                .ok();
        let lip = m.and_then(|m| {
            if m < 1.0 {
                Some(built.lipschitz / ((built.gamma2 - built.mu) * (1.0 - m)))
            } else {
                None
            }
        });
        ms.push((e, m));
        lips.push((e, lip));
    }
    RunManifest {
        config_hash: config_hash(cfg),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.run.seed,
        derived: DerivedConstants {
            gamma1: built.gamma1,
            gamma2: built.gamma2,
            lipschitz: built.lipschitz,
            mu: built.mu,
            epsilon0: eps0,
            contraction_m_per_eps: ms,
            manifold_lip_bound_per_eps: lips,
        },
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs,
    }
}
