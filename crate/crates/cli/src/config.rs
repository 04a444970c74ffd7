//! Scenario configuration: human-readable TOML with a strict schema.
//! Unknown keys are rejected so that typos in scale parameters cannot
//! silently invalidate the hypothesis checks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemBlock,
    pub scales: ScalesBlock,
    #[serde(default)]
    pub manifold: ManifoldBlock,
    pub filter: FilterBlock,
    #[serde(default)]
    pub initial: InitialBlock,
    pub run: RunBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub slow: OperatorSpec,
    pub fast: OperatorSpec,
    pub f: NonlinSpec,
    pub g: NonlinSpec,
    pub sigma1: f64,
    pub sigma2: f64,
    pub cov1: CovSpec,
    pub cov2: CovSpec,
    /// Backward growth rate of the slow semigroup; derived from the
    /// operator when omitted.
    #[serde(default)]
    pub gamma1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    /// Second-order modes in energy coordinates: blocks
    /// `[[0, lambda_k], [-lambda_k, -gamma]]`, `lambda_k` from the ladder.
    WaveLadder {
        modes: usize,
        gamma: f64,
        #[serde(default)]
        lambda: LambdaLadder,
    },
    /// Diagonal entries `-kappa * lambda_k`.
    DiagonalLadder {
        modes: usize,
        kappa: f64,
        #[serde(default)]
        lambda: LambdaLadder,
    },
    /// Explicit diagonal entries.
    Diagonal { entries: Vec<f64> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaLadder {
    /// `lambda_k = k^2` (Dirichlet Laplacian mode ladder).
    #[default]
    Square,
    /// `lambda_k = k`.
    Linear,
}

impl LambdaLadder {
    pub fn value(&self, k: usize) -> f64 {
        match self {
            LambdaLadder::Square => (k * k) as f64,
            LambdaLadder::Linear => k as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NonlinSpec {
    Zero,
    LinearCoupling {
        gain: f64,
    },
    SineSaturating {
        amp: f64,
        #[serde(default)]
        coupled: bool,
    },
    UserTable {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CovSpec {
    /// `k_i = scale * i^{-decay}` per retained scalar component.
    pub scale: f64,
    pub decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScalesBlock {
    pub epsilon: EpsilonSpec,
    #[serde(default)]
    pub mu: MuSpec,
    pub horizon_t: f64,
    #[serde(default = "default_oversample")]
    pub oversample_fast: u32,
}

fn default_oversample() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EpsilonSpec {
    One(f64),
    List(Vec<f64>),
}

impl EpsilonSpec {
    pub fn list(&self) -> Vec<f64> {
        match self {
            EpsilonSpec::One(e) => vec![*e],
            EpsilonSpec::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MuSpec {
    Value(f64),
    /// The literal string "auto": `(gamma2 - L) / 2`.
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl Default for MuSpec {
    fn default() -> Self {
        MuSpec::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifoldBlock {
    pub tol: f64,
    pub t_back_factor: f64,
    pub max_iter: usize,
}

impl Default for ManifoldBlock {
    fn default() -> Self {
        ManifoldBlock {
            tol: 1e-8,
            t_back_factor: 1.0,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FilterBlock {
    pub h: ObsSpec,
    pub dim3: usize,
    pub particles: usize,
    #[serde(default = "default_coarsen")]
    pub obs_coarsen: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_dict_size")]
    pub dict_size: usize,
    #[serde(default = "default_dict_scale")]
    pub dict_scale: f64,
    pub t_list: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

fn default_coarsen() -> usize {
    5
}
fn default_p() -> f64 {
    3.0
}
fn default_dict_size() -> usize {
    16
}
fn default_dict_scale() -> f64 {
    1.0
}
fn default_replications() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObsSpec {
    SineOfSlow,
    BoundedLinear { gain: f64, clip: f64 },
    UserTable { xs: Vec<f64>, ys: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    #[serde(default)]
    pub x0: StateSpec,
    #[serde(default)]
    pub y0: StateSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum StateSpec {
    /// The literal string "zeros".
    Zeros(ZerosTag),
    /// First coordinate set to the value, the rest zero.
    Unit(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum ZerosTag {
    #[serde(rename = "zeros")]
    Zeros,
}

impl Default for StateSpec {
    fn default() -> Self {
        StateSpec::Zeros(ZerosTag::Zeros)
    }
}

impl StateSpec {
    pub fn realize(&self, dim: usize) -> Result<Vec<f64>, String> {
        match self {
            StateSpec::Zeros(_) => Ok(vec![0.0; dim]),
            StateSpec::Unit(v) => {
                let mut out = vec![0.0; dim];
                out[0] = *v;
                Ok(out)
            }
            StateSpec::List(vs) => {
                if vs.len() != dim {
                    return Err(format!("state has {} entries, expected {dim}", vs.len()));
                }
                Ok(vs.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: String,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_out() -> String {
    "out".into()
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.basic_validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }

    pub fn basic_validate(&self) -> Result<(), String> {
        for e in self.scales.epsilon.list() {
            if !(e > 0.0) {
                return Err(format!("epsilon {e} must be positive"));
            }
        }
        if !(self.scales.horizon_t > 0.0) {
            return Err("horizon_t must be positive".into());
        }
        if !(self.manifold.tol > 0.0) || !(self.manifold.t_back_factor > 0.0) {
            return Err("manifold tolerances must be positive".into());
        }
        if self.filter.particles < 2 {
            return Err("need at least two particles".into());
        }
        if self.filter.t_list.is_empty() {
            return Err("filter t_list must not be empty".into());
        }
        if self.filter.dict_size < 8 {
            return Err("dictionary needs at least 8 entries".into());
        }
        Ok(())
    }

    /// The built-in thermoelastic scenario: coupled second-order (wave-type)
    /// slow modes and diffusive fast modes with sine interactions and a sine
    /// observation of the displacement coefficients.
    pub fn thermoelastic() -> Self {
        ScenarioConfig {
            system: SystemBlock {
                slow: OperatorSpec::WaveLadder {
                    modes: 16,
                    gamma: 1.0,
                    lambda: LambdaLadder::Square,
                },
                fast: OperatorSpec::DiagonalLadder {
                    modes: 16,
                    kappa: 2.0,
                    lambda: LambdaLadder::Square,
                },
                f: NonlinSpec::SineSaturating {
                    amp: 0.5,
                    coupled: true,
                },
                g: NonlinSpec::SineSaturating {
                    amp: 0.5,
                    coupled: true,
                },
                sigma1: 0.3,
                sigma2: 0.3,
                cov1: CovSpec {
                    scale: 1.0,
                    decay: 2.0,
                },
                cov2: CovSpec {
                    scale: 1.0,
                    decay: 2.0,
                },
                gamma1: None,
            },
            scales: ScalesBlock {
                epsilon: EpsilonSpec::One(0.05),
                mu: MuSpec::default(),
                horizon_t: 5.0,
                oversample_fast: 10,
            },
            manifold: ManifoldBlock::default(),
            filter: FilterBlock {
                h: ObsSpec::SineOfSlow,
                dim3: 8,
                particles: 500,
                obs_coarsen: 5,
                p: 3.0,
                dict_size: 16,
                dict_scale: 1.0,
                t_list: vec![1.0],
                replications: 8,
            },
            initial: InitialBlock {
                x0: StateSpec::Unit(1.0),
                y0: StateSpec::default(),
            },
            run: RunBlock {
                seed: 2024,
                out_dir: "out".into(),
                threads: None,
            },
        }
    }
}
