//! Nonlinear filtering of the slow component: observation generation,
//! exponential likelihood weights, independent-copy Monte-Carlo evaluation of
//! the full and reduced filters, their weighted test-function distance, and
//! the scale-ratio sweep.
//!
//! The unnormalized filter is realized by the standard independent-copy form
//! of the Kallianpur-Striebel formula: N fresh signal copies evolve under
//! their own noise substreams, each accumulating the log likelihood of the
//! common observation increments; normalized statistics use log-sum-exp.
//! No resampling: the weighted functional itself is the object under study.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{ManifoldCfg, TrackedManifold};
use crate::noise::{
    align, sample_path, CovarianceSpec, Grid, NoisePath, PathView,
};
use crate::sim::{integrate_full, ManifoldProvider, Stepper, SystemModel, Trajectory};
use crate::spectral::norm2;

/// Runs abort when the effective sample size falls below this fraction of N.
pub const ESS_FLOOR_FRAC: f64 = 0.01;

// ---------------------------------------------------------------------------
// Observation model
// ---------------------------------------------------------------------------

/// Registered observation functions; all act on the slow coefficients and
/// are bounded with known Lipschitz constants.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsKind {
    /// `h_i(x, y) = sin(x_i)`, i < dim3.
    SineOfSlow,
    /// `h_i(x, y) = gain * clamp(x_i, -clip, clip)`.
    BoundedLinear { gain: f64, clip: f64 },
    /// Componentwise piecewise-linear map of `x_i`, clamped outside.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub kind: ObsKind,
    pub dim3: usize,
    pub c_h: f64,
    pub h_lip: f64,
}

impl ObservationModel {
    pub fn new(kind: ObsKind, dim3: usize) -> Result<Self> {
        if dim3 == 0 {
            return Err(Error::Domain("observation needs dim3 >= 1".into()));
        }
        let (c_h, h_lip) = match &kind {
            ObsKind::SineOfSlow => ((dim3 as f64).sqrt(), 1.0),
            ObsKind::BoundedLinear { gain, clip } => {
                if !(*clip > 0.0) {
                    return Err(Error::Domain("clip bound must be positive".into()));
                }
                (gain.abs() * clip * (dim3 as f64).sqrt(), gain.abs())
            }
            ObsKind::Table { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() || xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Domain("bad observation table".into()));
                }
                let maxy = ys.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let mut lip = 0.0f64;
                for w in 0..xs.len() - 1 {
                    lip = lip.max(((ys[w + 1] - ys[w]) / (xs[w + 1] - xs[w])).abs());
                }
                (maxy * (dim3 as f64).sqrt(), lip)
            }
        };
        Ok(ObservationModel {
            kind,
            dim3,
            c_h,
            h_lip,
        })
    }

    /// Evaluates `h(x, y)` into `out` (all registered kinds read the slow
    /// argument only).
    #[inline]
    pub fn eval(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        match &self.kind {
            ObsKind::SineOfSlow => {
                for i in 0..self.dim3 {
                    out[i] = if i < x.len() { x[i].sin() } else { 0.0 };
                }
            }
            ObsKind::BoundedLinear { gain, clip } => {
                for i in 0..self.dim3 {
                    out[i] = if i < x.len() {
                        gain * x[i].clamp(-*clip, *clip)
                    } else {
                        0.0
                    };
                }
            }
            ObsKind::Table { xs, ys } => {
                for i in 0..self.dim3 {
                    out[i] = if i < x.len() {
                        table_eval(xs, ys, x[i])
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Probes the declared bound and Lipschitz constant.
    pub fn verify_bounds(&self, nx: usize, ny: usize, probes: usize, seed: u64) -> H5Verdict {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut x1 = vec![0.0; nx];
        let mut x2 = vec![0.0; nx];
        let y = vec![0.0; ny];
        let mut o1 = vec![0.0; self.dim3];
        let mut o2 = vec![0.0; self.dim3];
        let mut sup: f64 = 0.0;
        let mut lip: f64 = 0.0;
        for _ in 0..probes {
            for v in x1.iter_mut() {
                *v = rng.gen_range(-50.0..50.0);
            }
            for (v, w) in x2.iter_mut().zip(&x1) {
                *v = if rng.gen_bool(0.5) {
                    rng.gen_range(-50.0..50.0)
                } else {
                    w + rng.gen_range(-1e-3..1e-3)
                };
            }
            self.eval(&x1, &y, &mut o1);
            self.eval(&x2, &y, &mut o2);
            sup = sup.max(norm2(&o1));
            let dx: f64 = x1
                .iter()
                .zip(&x2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dx > 1e-14 {
                let dh: f64 = o1
                    .iter()
                    .zip(&o2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                lip = lip.max(dh / dx);
            }
        }
        let tol = 1.0 + 1e-6;
        H5Verdict {
            pass: sup <= self.c_h * tol && lip <= self.h_lip * tol,
            sup_observed: sup,
            lip_observed: lip,
            c_h: self.c_h,
            h_lip: self.h_lip,
        }
    }
}

fn table_eval(xs: &[f64], ys: &[f64], u: f64) -> f64 {
    if u <= xs[0] {
        return ys[0];
    }
    if u >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let j = match xs.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
        Ok(j) => return ys[j],
        Err(j) => j,
    };
    let w = (u - xs[j - 1]) / (xs[j] - xs[j - 1]);
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

#[derive(Debug, Clone, Serialize)]
pub struct H5Verdict {
    pub pass: bool,
    pub sup_observed: f64,
    pub lip_observed: f64,
    pub c_h: f64,
    pub h_lip: f64,
}

// ---------------------------------------------------------------------------
// Observation path
// ---------------------------------------------------------------------------

/// Observation increments on a coarsening of the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    /// Fine simulation step underlying the observation grid.
    pub dt: f64,
    /// Observation cells span `coarsen` fine cells.
    pub coarsen: usize,
    pub dim3: usize,
    /// Flat `n_obs x dim3` increments on `[0, T)`.
    pub increments: Vec<f64>,
    pub truth_seed: u64,
    pub truth_stream: u64,
}

impl ObservationPath {
    pub fn dt_obs(&self) -> f64 {
        self.dt * self.coarsen as f64
    }

    pub fn n_obs(&self) -> usize {
        self.increments.len() / self.dim3
    }

    pub fn increment(&self, m: usize) -> &[f64] {
        &self.increments[m * self.dim3..(m + 1) * self.dim3]
    }
}

/// `dr_m = sum of W3 increments over the coarse cell + h(truth at the cell
/// start) * dt_obs`.
pub fn generate_observation(
    truth: &Trajectory,
    obs: &ObservationModel,
    view: PathView<'_>,
    coarsen: usize,
) -> Result<ObservationPath> {
    if truth.start_cell != 0 {
        return Err(Error::GridMismatch(
            "observation requires a truth trajectory starting at t = 0".into(),
        ));
    }
    if coarsen == 0 {
        return Err(Error::Domain("coarsening factor must be >= 1".into()));
    }
    let n_sim = truth.n_points() - 1;
    if n_sim % coarsen != 0 {
        return Err(Error::GridMismatch(format!(
            "simulation steps {n_sim} not a multiple of the coarsening {coarsen}"
        )));
    }
    let n_obs = n_sim / coarsen;
    let dt_obs = truth.dt * coarsen as f64;
    let mut increments = Vec::with_capacity(n_obs * obs.dim3);
    let mut h = vec![0.0; obs.dim3];
    for m in 0..n_obs {
        let k = m * coarsen;
        obs.eval(truth.x_at(k), truth.y_at(k), &mut h);
        let mut dr: Vec<f64> = h.iter().map(|v| v * dt_obs).collect();
        for j in 0..coarsen {
            let w3 = view.w3((k + j) as i64)?;
            for (a, b) in dr.iter_mut().zip(w3) {
                *a += b;
            }
        }
        increments.extend_from_slice(&dr);
    }
    Ok(ObservationPath {
        dt: truth.dt,
        coarsen,
        dim3: obs.dim3,
        increments,
        truth_seed: truth.path_seed,
        truth_stream: truth.path_stream,
    })
}

/// One Kallianpur-Striebel log-weight increment:
/// `<h, dr> - 0.5 ||h||^2 dt` in the truncated H3 pairing.
#[inline]
pub fn ks_log_weight_step(h_val: &[f64], dr: &[f64], dt: f64) -> f64 {
    let mut dot = 0.0;
    let mut nsq = 0.0;
    for (h, r) in h_val.iter().zip(dr) {
        dot += h * r;
        nsq += h * h;
    }
    dot - 0.5 * nsq * dt
}

// ---------------------------------------------------------------------------
// Test-function dictionary and the weighted distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TestFnKind {
    /// `tanh(x_mode / scale)`.
    Single { mode: usize, scale: f64 },
    /// `tanh(x_m1/s1) * tanh(x_m2/s2)`.
    Product {
        m1: usize,
        s1: f64,
        m2: usize,
        s2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFn {
    pub kind: TestFnKind,
    pub sup: f64,
    pub lip: f64,
}

impl TestFn {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            TestFnKind::Single { mode, scale } => (x[mode] / scale).tanh(),
            TestFnKind::Product { m1, s1, m2, s2 } => (x[m1] / s1).tanh() * (x[m2] / s2).tanh(),
        }
    }
}

/// Finite slice of a countable algebra of bounded-Lipschitz functionals that
/// strongly separates points on the truncation: per-mode tanh coordinates
/// and their pairwise products, weighted `2^{-i}` in the distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestDictionary {
    pub fns: Vec<TestFn>,
}

impl TestDictionary {
    /// Default dictionary: 8 singles over the leading modes, then pairwise
    /// products up to `m` entries (m >= 8).
    pub fn default_for_dim(dim: usize, m: usize, scale: f64) -> Result<Self> {
        if m < 8 {
            return Err(Error::Domain("dictionary needs at least 8 entries".into()));
        }
        if dim == 0 || !(scale > 0.0) {
            return Err(Error::Domain("bad dictionary parameters".into()));
        }
        let mut fns = Vec::with_capacity(m);
        for i in 0..8.min(m) {
            fns.push(TestFn {
                kind: TestFnKind::Single {
                    mode: i % dim,
                    scale,
                },
                sup: 1.0,
                lip: 1.0 / scale,
            });
        }
        let mut a = 0usize;
        let mut b = 1usize;
        while fns.len() < m {
            fns.push(TestFn {
                kind: TestFnKind::Product {
                    m1: a % dim,
                    s1: scale,
                    m2: b % dim,
                    s2: scale,
                },
                sup: 1.0,
                lip: std::f64::consts::SQRT_2 / scale,
            });
            b += 1;
            if b > 4 {
                a += 1;
                b = a + 1;
            }
        }
        Ok(TestDictionary { fns })
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    /// Weight `2^{-i}` of the 1-based entry `i`.
    pub fn weight(&self, idx: usize) -> f64 {
        0.5f64.powi(idx as i32 + 1)
    }

    /// The combined bounded-Lipschitz norm `sup + Lip` of entry `idx`.
    pub fn phi_norm(&self, idx: usize) -> f64 {
        self.fns[idx].sup + self.fns[idx].lip
    }

    #[inline]
    pub fn eval_all(&self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.fns) {
            *o = f.eval(x);
        }
    }

    /// Upper bound on the truncated distance: `sum_i 2^{-i} 2 sup_i`.
    pub fn distance_bound(&self) -> f64 {
        self.fns
            .iter()
            .enumerate()
            .map(|(i, f)| self.weight(i) * 2.0 * f.sup)
            .sum()
    }

    /// Bound on the dictionary tail dropped by the truncation, for unit-sup
    /// entries: `sum_{i > m} 2^{-i} * 2 = 2^{1-m}`.
    pub fn tail_bound(&self) -> f64 {
        2.0f64.powi(1 - self.len() as i32)
    }
}

/// Point estimates of the normalized filter over the dictionary.
#[derive(Debug, Clone, Serialize)]
pub struct FilterEstimate {
    pub t: f64,
    /// `pi_t(phi_i)` per dictionary entry.
    pub pi: Vec<f64>,
    /// `log rho_t(1)`.
    pub log_rho1: f64,
    pub ess: f64,
}

/// Truncated weighted test-function distance between two estimates.
pub fn distance_d(a: &FilterEstimate, b: &FilterEstimate, dict: &TestDictionary) -> Result<f64> {
    if a.pi.len() != dict.len() || b.pi.len() != dict.len() {
        return Err(Error::DictionaryMismatch(format!(
            "estimates carry {} and {} values, dictionary has {}",
            a.pi.len(),
            b.pi.len(),
            dict.len()
        )));
    }
    Ok(a.pi
        .iter()
        .zip(&b.pi)
        .enumerate()
        .map(|(i, (x, y))| dict.weight(i) * (x - y).abs())
        .sum())
}

// ---------------------------------------------------------------------------
// Scenario bundle and particle filters
// ---------------------------------------------------------------------------

/// Everything needed to run one filtering experiment at a fixed scale ratio.
pub struct Scenario {
    pub model: SystemModel,
    pub stepper: Stepper,
    pub cov1: CovarianceSpec,
    pub cov2: CovarianceSpec,
    pub obs: ObservationModel,
    pub dict: TestDictionary,
    pub manifold_cfg: ManifoldCfg,
    pub obs_coarsen: usize,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub seed: u64,
}

/// Deterministic substream id from a namespace and indices.
pub fn substream(ns: u64, kind: u64, idx: u64) -> u64 {
    let mut h = ns
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .rotate_left(17)
        .wrapping_add(kind);
    h = h
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .rotate_left(31)
        .wrapping_add(idx);
    h.wrapping_mul(0x94d0_49bb_1331_11eb)
}

pub const STREAM_TRUTH: u64 = 1;
pub const STREAM_PARTICLE: u64 = 3;
pub const STREAM_REFOBS: u64 = 4;
pub const STREAM_REFSIG: u64 = 5;

impl Scenario {
    /// Grid holding enough backward history for manifold evaluations plus
    /// the simulation horizon, with the horizon aligned to the coarse grid.
    pub fn particle_grid(&self, t_end: f64) -> Result<Grid> {
        let dt = self.stepper.dt;
        let back = self.manifold_cfg.tracking_window_cells(&self.stepper)
            + self.manifold_cfg.spinup_cells(&self.stepper)
            + 2;
        let fine = align(t_end, dt)?;
        if fine <= 0 || (fine as usize) % self.obs_coarsen != 0 {
            return Err(Error::GridMismatch(format!(
                "horizon {t_end} is not a positive multiple of the observation step"
            )));
        }
        Grid::new(dt, -(back as f64) * dt, t_end)
    }

    pub fn sample_particle_path(&self, t_end: f64, stream: u64) -> Result<NoisePath> {
        Ok(sample_path(
            &self.cov1,
            &self.cov2,
            0,
            self.particle_grid(t_end)?,
            self.seed,
            stream,
        ))
    }

    pub fn sample_truth_path(&self, t_end: f64, stream: u64) -> Result<NoisePath> {
        Ok(sample_path(
            &self.cov1,
            &self.cov2,
            self.obs.dim3,
            self.particle_grid(t_end)?,
            self.seed,
            stream,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FilterMode {
    Full,
    Reduced,
}

/// Final-time weighted ensemble snapshot.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    /// Slow states at the final emission, flat `n x dim1`.
    pub particles: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub t_current: f64,
}

impl WeightedEnsemble {
    pub fn n(&self) -> usize {
        self.log_weights.len()
    }

    /// Normalized weights (sum to one).
    pub fn normalized_weights(&self) -> Vec<f64> {
        let mx = self
            .log_weights
            .iter()
            .fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub mode: FilterMode,
    pub estimates: Vec<FilterEstimate>,
    /// Weighted means of the slow coordinates at each emission.
    pub coord_mean: Vec<Vec<f64>>,
    /// Linearized standard errors of those means.
    pub coord_se: Vec<Vec<f64>>,
    pub ensemble: WeightedEnsemble,
    /// Digest of the particle states (observation-independent by design).
    pub particles_digest: u64,
    /// Total manifold fixed-point sweeps (reduced mode diagnostics).
    pub manifold_sweeps: u64,
}

struct ParticleResult {
    /// Per emission: log weight, phi values, slow state.
    emits: Vec<(f64, Vec<f64>, Vec<f64>)>,
    digest: u64,
    sweeps: u64,
}

/// Evolves N independent signal copies under fresh substreams and weights
/// them against the common observation increments; emits normalized
/// dictionary statistics at the requested times.
pub fn run_filter(
    sc: &Scenario,
    obs_path: &ObservationPath,
    mode: FilterMode,
    n_particles: usize,
    stream_ns: u64,
    emit_times: &[f64],
) -> Result<FilterRun> {
    if n_particles < 2 {
        return Err(Error::Domain("need at least two particles".into()));
    }
    let st = &sc.stepper;
    let dt = st.dt;
    if (obs_path.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::GridMismatch(
            "observation grid does not match the simulation grid".into(),
        ));
    }
    let coarsen = obs_path.coarsen;
    let dt_obs = obs_path.dt_obs();
    let mut emit_cells = Vec::with_capacity(emit_times.len());
    if emit_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("emission times must be strictly increasing".into()));
    }
    for &t in emit_times {
        let c = align(t, dt)?;
        if c < 0 || (c as usize) % coarsen != 0 || (c as usize) / coarsen > obs_path.n_obs() {
            return Err(Error::GridMismatch(format!(
                "emission time {t} not on the observation grid"
            )));
        }
        emit_cells.push(c);
    }
    let end_cell = *emit_cells.iter().max().unwrap_or(&0);
    if end_cell == 0 {
        return Err(Error::Domain("no emission times given".into()));
    }
    let t_end = end_cell as f64 * dt;

    let results: Result<Vec<ParticleResult>> = (0..n_particles)
        .into_par_iter()
        .map(|j| {
            let path = sc.sample_particle_path(t_end, substream(stream_ns, STREAM_PARTICLE, j as u64))?;
            let view = path.view();
            simulate_particle(sc, view, obs_path, mode, &emit_cells, end_cell, dt_obs)
        })
        .collect();
    let results = results?;

    let n_emit = emit_cells.len();
    let dim1 = st.dim1;
    let m = sc.dict.len();
    let mut estimates = Vec::with_capacity(n_emit);
    let mut coord_mean = Vec::with_capacity(n_emit);
    let mut coord_se = Vec::with_capacity(n_emit);
    let mut final_states = Vec::with_capacity(n_particles * dim1);
    let mut final_logw = Vec::with_capacity(n_particles);
    for (e, &cell) in emit_cells.iter().enumerate() {
        let logws: Vec<f64> = results.iter().map(|r| r.emits[e].0).collect();
        let mx = logws.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        if !mx.is_finite() {
            return Err(Error::Degeneracy {
                ess: 0.0,
                n: n_particles,
            });
        }
        let w: Vec<f64> = logws.iter().map(|l| (l - mx).exp()).collect();
        let wsum: f64 = w.iter().sum();
        let wsq: f64 = w.iter().map(|v| v * v).sum();
        let ess = wsum * wsum / wsq;
        if ess < ESS_FLOOR_FRAC * n_particles as f64 {
            return Err(Error::Degeneracy {
                ess,
                n: n_particles,
            });
        }
        let mut pi = vec![0.0; m];
        for (r, wj) in results.iter().zip(&w) {
            for (acc, phi) in pi.iter_mut().zip(&r.emits[e].1) {
                *acc += wj * phi;
            }
        }
        for v in pi.iter_mut() {
            *v /= wsum;
        }
        let mut mean = vec![0.0; dim1];
        for (r, wj) in results.iter().zip(&w) {
            for (acc, xi) in mean.iter_mut().zip(&r.emits[e].2) {
                *acc += wj * xi;
            }
        }
        for v in mean.iter_mut() {
            *v /= wsum;
        }
        let mut se = vec![0.0; dim1];
        for (r, wj) in results.iter().zip(&w) {
            for i in 0..dim1 {
                let d = r.emits[e].2[i] - mean[i];
                se[i] += wj * wj * d * d;
            }
        }
        for v in se.iter_mut() {
            *v = v.sqrt() / wsum;
        }
        estimates.push(FilterEstimate {
            t: cell as f64 * dt,
            pi,
            log_rho1: mx + (wsum / n_particles as f64).ln(),
            ess,
        });
        coord_mean.push(mean);
        coord_se.push(se);
        if e == n_emit - 1 {
            for (r, l) in results.iter().zip(&logws) {
                final_states.extend_from_slice(&r.emits[e].2);
                final_logw.push(*l);
            }
        }
    }
    let mut digest = 0u64;
    let mut sweeps = 0u64;
    for r in &results {
        digest = digest.rotate_left(1) ^ r.digest;
        sweeps += r.sweeps;
    }
    Ok(FilterRun {
        mode,
        estimates,
        coord_mean,
        coord_se,
        ensemble: WeightedEnsemble {
            particles: final_states,
            log_weights: final_logw,
            t_current: end_cell as f64 * dt,
        },
        particles_digest: digest,
        manifold_sweeps: sweeps,
    })
}

fn simulate_particle(
    sc: &Scenario,
    view: PathView<'_>,
    obs_path: &ObservationPath,
    mode: FilterMode,
    emit_cells: &[i64],
    end_cell: i64,
    dt_obs: f64,
) -> Result<ParticleResult> {
    let st = &sc.stepper;
    let dim1 = st.dim1;
    let dim2 = st.dim2;
    let coarsen = obs_path.coarsen as i64;
    let mut x = sc.x0.clone();
    let mut y = vec![0.0; dim2];
    let mut fbuf = vec![0.0; dim1];
    let mut gbuf = vec![0.0; dim2];
    let mut h = vec![0.0; sc.obs.dim3];
    let mut phis = vec![0.0; sc.dict.len()];
    let mut logw = 0.0;
    let mut emits = Vec::with_capacity(emit_cells.len());
    let mut tracker = match mode {
        FilterMode::Reduced => Some(TrackedManifold::new(st, view, sc.manifold_cfg)?),
        FilterMode::Full => {
            y.copy_from_slice(&sc.y0);
            None
        }
    };
    let guard = crate::sim::DIVERGENCE_FACTOR * (1.0 + crate::spectral::pair_norm(&sc.x0, &sc.y0));
    for cell in 0..=end_cell {
        if let Some(tr) = tracker.as_mut() {
            tr.fast_state(cell, &x, &mut y)?;
        }
        if emit_cells.contains(&cell) {
            sc.dict.eval_all(&x, &mut phis);
            emits.push((logw, phis.clone(), x.clone()));
        }
        if cell == end_cell {
            break;
        }
        if cell % coarsen == 0 {
            let m = (cell / coarsen) as usize;
            sc.obs.eval(&x, &y, &mut h);
            logw += ks_log_weight_step(&h, obs_path.increment(m), dt_obs);
        }
        match mode {
            FilterMode::Full => {
                st.step_full(&mut x, &mut y, view.w1(cell)?, view.w2(cell)?, &mut fbuf, &mut gbuf);
            }
            FilterMode::Reduced => {
                st.eval_f(&x, &y, &mut fbuf);
                st.slow_step(&mut x, &fbuf, view.w1(cell)?);
            }
        }
        let nrm = crate::spectral::pair_norm(&x, &y);
        if !nrm.is_finite() || nrm > guard {
            return Err(Error::Divergence {
                step: cell as usize,
                norm: nrm,
            });
        }
    }
    let mut digest = 0u64;
    for v in &x {
        digest = digest.rotate_left(7) ^ v.to_bits();
    }
    Ok(ParticleResult {
        emits,
        digest,
        sweeps: tracker.map(|t| t.total_sweeps).unwrap_or(0),
    })
}

// ---------------------------------------------------------------------------
// Martingale checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub mean_gamma: f64,
    pub se_gamma: f64,
    pub gamma_pass: bool,
    pub inv_moment: f64,
    pub inv_moment_rel_se: f64,
    pub inv_bound: f64,
    pub inv_pass: bool,
    pub p: f64,
}

/// Estimates `E[Gamma_T]` (expected 1) and the inverse moment
/// `E |rho_T(1)|^{-p}` under the reference measure, where the observation is
/// a fresh Brownian path; compares the latter against
/// `exp((p^2/2 + p/2) C_h^2 T)`.
pub fn verify_martingale_bounds(
    sc: &Scenario,
    t_end: f64,
    p: f64,
    n_gamma: usize,
    n_outer: usize,
    n_inner: usize,
    stream_ns: u64,
) -> Result<MartingaleReport> {
    if !(p > 0.0) {
        return Err(Error::Domain("p must be positive".into()));
    }
    let dt = sc.stepper.dt;
    let end_cell = align(t_end, dt)?;
    if end_cell <= 0 || (end_cell as usize) % sc.obs_coarsen != 0 {
        return Err(Error::GridMismatch(
            "horizon must be a positive multiple of the observation step".into(),
        ));
    }
    let n_obs = end_cell as usize / sc.obs_coarsen;
    let dt_obs = dt * sc.obs_coarsen as f64;

    // E[Gamma_T] over independent (signal, reference-observation) pairs
    let gammas: Result<Vec<f64>> = (0..n_gamma)
        .into_par_iter()
        .map(|j| {
            let sig = sc.sample_particle_path(t_end, substream(stream_ns, STREAM_REFSIG, j as u64))?;
            let obs = brownian_increments(
                sc.obs.dim3,
                n_obs,
                dt_obs,
                sc.seed,
                substream(stream_ns, STREAM_REFOBS, j as u64),
            );
            log_gamma_along(sc, sig.view(), &obs, end_cell, dt_obs).map(f64::exp)
        })
        .collect();
    let gammas = gammas?;
    let (mean_gamma, se_gamma) = crate::stats::mean_se(&gammas);
    let gamma_pass = (mean_gamma - 1.0).abs() <= 3.0 * se_gamma;

    // inverse moment of the filter normalization under fresh observations
    let invs: Result<Vec<f64>> = (0..n_outer)
        .into_par_iter()
        .map(|o| {
            let obs = brownian_increments(
                sc.obs.dim3,
                n_obs,
                dt_obs,
                sc.seed,
                substream(stream_ns, STREAM_REFOBS, 1_000_000 + o as u64),
            );
            let mut logws = Vec::with_capacity(n_inner);
            for j in 0..n_inner {
                let sig = sc.sample_particle_path(
                    t_end,
                    substream(stream_ns, STREAM_REFSIG, 1_000_000 + (o * n_inner + j) as u64),
                )?;
                logws.push(log_gamma_along(sc, sig.view(), &obs, end_cell, dt_obs)?);
            }
            let mx = logws.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mean: f64 =
                logws.iter().map(|l| (l - mx).exp()).sum::<f64>() / n_inner as f64;
            let log_rho = mx + mean.ln();
            Ok((-p * log_rho).exp())
        })
        .collect();
    let invs = invs?;
    let (inv_moment, inv_se) = crate::stats::mean_se(&invs);
    let inv_bound = ((p * p / 2.0 + p / 2.0) * sc.obs.c_h * sc.obs.c_h * t_end).exp();
    let rel_se = inv_se / inv_moment.max(f64::MIN_POSITIVE);
    let inv_pass = inv_moment <= inv_bound * (1.0 + 3.0 * rel_se);
    Ok(MartingaleReport {
        mean_gamma,
        se_gamma,
        gamma_pass,
        inv_moment,
        inv_moment_rel_se: rel_se,
        inv_bound,
        inv_pass,
        p,
    })
}

/// Gaussian increments with variance `dt` per component (a reference
/// Brownian observation path).
pub fn brownian_increments(dim: usize, n: usize, dt: f64, seed: u64, stream: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng =
        rand_chacha::ChaCha12Rng::from_seed(crate::noise::derive_key(seed ^ 0xb10c_ab1e, stream));
    let sd = dt.sqrt();
    (0..n * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * sd
        })
        .collect()
}

fn log_gamma_along(
    sc: &Scenario,
    view: PathView<'_>,
    obs_increments: &[f64],
    end_cell: i64,
    dt_obs: f64,
) -> Result<f64> {
    let st = &sc.stepper;
    let traj = integrate_full(st, &sc.x0, &sc.y0, view, 0.0, end_cell as f64 * st.dt)?;
    let mut h = vec![0.0; sc.obs.dim3];
    let mut logw = 0.0;
    let coarsen = sc.obs_coarsen;
    let n_obs = end_cell as usize / coarsen;
    for m in 0..n_obs {
        let k = m * coarsen;
        sc.obs.eval(traj.x_at(k), traj.y_at(k), &mut h);
        logw += ks_log_weight_step(&h, &obs_increments[m * sc.obs.dim3..(m + 1) * sc.obs.dim3], dt_obs);
    }
    Ok(logw)
}

// ---------------------------------------------------------------------------
// Diagonal discrete Kalman reference
// ---------------------------------------------------------------------------

/// Reference filter for the clipped-linear-Gaussian sub-case: diagonal slow
/// dynamics with a componentwise linear drift, no fast coupling, and a
/// linear observation of the leading coordinates. Runs scalar Kalman
/// recursions per observed mode against the same discrete-time model the
/// integrator realizes.
pub struct DiagonalKalman {
    /// Per-mode discrete transition over one fine step.
    pub a_d: Vec<f64>,
    /// Per-mode injected noise variance per fine step.
    pub q: Vec<f64>,
    pub gain: f64,
    pub dim_obs: usize,
    pub coarsen: usize,
    pub dt: f64,
}

impl DiagonalKalman {
    /// `entries`: slow generator diagonal; `slope`: linear drift slope;
    /// `k_var`: per-mode noise variances.
    pub fn new(
        entries: &[f64],
        slope: f64,
        sigma1: f64,
        k_var: &[f64],
        dt: f64,
        gain: f64,
        dim_obs: usize,
        coarsen: usize,
    ) -> Self {
        let a_d: Vec<f64> = entries
            .iter()
            .map(|&a| (a * dt).exp() + slope * dt * crate::spectral::phi1_scalar(a * dt))
            .collect();
        let q: Vec<f64> = entries
            .iter()
            .zip(k_var)
            .map(|(&a, &k)| sigma1 * sigma1 * crate::spectral::phi1_scalar(2.0 * a * dt) * k * dt)
            .collect();
        DiagonalKalman {
            a_d,
            q,
            gain,
            dim_obs,
            coarsen,
            dt,
        }
    }

    /// Posterior means of the observed coordinates at the emission cells.
    pub fn run(&self, x0: &[f64], obs: &ObservationPath, emit_cells: &[i64]) -> Vec<Vec<f64>> {
        let dt_obs = self.dt * self.coarsen as f64;
        let mut m: Vec<f64> = (0..self.dim_obs).map(|i| x0[i]).collect();
        let mut pv = vec![0.0f64; self.dim_obs];
        let end = *emit_cells.iter().max().unwrap_or(&0);
        let mut out = Vec::new();
        for cell in 0..=end {
            if emit_cells.contains(&cell) {
                out.push(m.clone());
            }
            if cell == end {
                break;
            }
            if cell % self.coarsen as i64 == 0 {
                let idx = (cell / self.coarsen as i64) as usize;
                let dr = obs.increment(idx);
                let hh = self.gain * dt_obs;
                for i in 0..self.dim_obs {
                    let s = hh * hh * pv[i] + dt_obs;
                    let k = pv[i] * hh / s;
                    m[i] += k * (dr[i] - hh * m[i]);
                    pv[i] *= 1.0 - k * hh;
                }
            }
            for i in 0..self.dim_obs {
                m[i] *= self.a_d[i];
                pv[i] = self.a_d[i] * self.a_d[i] * pv[i] + self.q[i];
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scale-ratio sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub t: f64,
    pub mean_d: f64,
    pub se_d: f64,
    /// Mean of `|pi(phi_1) - pi~(phi_1)|^p`.
    pub mean_p_phi1: f64,
    pub se_p_phi1: f64,
    pub n_ok: usize,
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub p: f64,
    pub mu: f64,
    /// Log-log slope of `mean_d` in eps at the largest t.
    pub exponent_d: f64,
    /// Log-log slope of the p-th moment at the largest t.
    pub exponent_p: f64,
    /// One-parameter envelope fit `c (e^{-4 mu t p / eps} + eps/(4 mu p))^{1/4}`
    /// to the p-th moment at the largest t, on log scale.
    pub envelope_c: f64,
    pub envelope_r2: f64,
    /// Diagnostic two-parameter (slope + intercept in log env) fit.
    pub envelope_r2_free: f64,
}

/// Theorem envelope value at `(eps, t)` for moment order `p`.
pub fn scaling_envelope(eps: f64, t: f64, mu: f64, p: f64) -> f64 {
    ((-4.0 * mu * t * p / eps).exp() + eps / (4.0 * mu * p)).powf(0.25)
}

/// Runs the full and reduced filters on common observations across the
/// scale-ratio list, measuring the test-function distance and the p-th
/// moment differences, and fits the scaling exponent and envelope at the
/// largest requested time.
pub fn epsilon_scaling_experiment<F>(
    make_scenario: F,
    eps_list: &[f64],
    t_list: &[f64],
    p: f64,
    n_particles: usize,
    replications: usize,
) -> Result<ScalingTable>
where
    F: Fn(f64) -> Result<Scenario>,
{
    if eps_list.is_empty() || t_list.is_empty() || replications == 0 {
        return Err(Error::Domain("empty scaling experiment".into()));
    }
    let t_max = t_list.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rows = Vec::new();
    let mut mu = f64::NAN;
    for &eps in eps_list {
        let sc = make_scenario(eps)?;
        mu = sc.stepper.params.mu;
        let eps0 = sc.stepper.params.epsilon0()?;
        if !(eps < eps0) {
            return Err(Error::Admissibility(format!(
                "eps = {eps} not below eps0 = {eps0}"
            )));
        }
        let mut d_samples: Vec<Vec<f64>> = vec![Vec::new(); t_list.len()];
        let mut p_samples: Vec<Vec<f64>> = vec![Vec::new(); t_list.len()];
        let mut n_degenerate = 0usize;
        for rep in 0..replications {
            let ns = substream(sc.seed, 0xeb5, rep as u64);
            let truth_path =
                sc.sample_truth_path(t_max, substream(ns, STREAM_TRUTH, 0))?;
            let truth = integrate_full(
                &sc.stepper,
                &sc.x0,
                &sc.y0,
                truth_path.view(),
                0.0,
                t_max,
            )?;
            let obs = generate_observation(&truth, &sc.obs, truth_path.view(), sc.obs_coarsen)?;
            let full = run_filter(&sc, &obs, FilterMode::Full, n_particles, ns, t_list);
            let reduced = run_filter(&sc, &obs, FilterMode::Reduced, n_particles, ns, t_list);
            match (full, reduced) {
                (Ok(f), Ok(r)) => {
                    for (i, _) in t_list.iter().enumerate() {
                        let d = distance_d(&f.estimates[i], &r.estimates[i], &sc.dict)?;
                        d_samples[i].push(d);
                        let dp =
                            (f.estimates[i].pi[0] - r.estimates[i].pi[0]).abs().powf(p);
                        p_samples[i].push(dp);
                    }
                }
                (Err(Error::Degeneracy { .. }), _) | (_, Err(Error::Degeneracy { .. })) => {
                    n_degenerate += 1;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        for (i, &t) in t_list.iter().enumerate() {
            let (mean_d, se_d) = crate::stats::mean_se(&d_samples[i]);
            let (mean_p, se_p) = crate::stats::mean_se(&p_samples[i]);
            rows.push(ScalingRow {
                eps,
                t,
                mean_d,
                se_d,
                mean_p_phi1: mean_p,
                se_p_phi1: se_p,
                n_ok: d_samples[i].len(),
                n_degenerate,
            });
        }
    }

    // fits at the largest t
    let at_tmax: Vec<&ScalingRow> = rows
        .iter()
        .filter(|r| (r.t - t_max).abs() < 1e-12)
        .collect();
    let ln_eps: Vec<f64> = at_tmax.iter().map(|r| r.eps.ln()).collect();
    let ln_d: Vec<f64> = at_tmax.iter().map(|r| r.mean_d.max(1e-300).ln()).collect();
    let ln_p: Vec<f64> = at_tmax
        .iter()
        .map(|r| r.mean_p_phi1.max(1e-300).ln())
        .collect();
    let (exponent_d, _, _) = crate::stats::linear_fit(&ln_eps, &ln_d);
    let (exponent_p, _, _) = crate::stats::linear_fit(&ln_eps, &ln_p);
    let ln_env: Vec<f64> = at_tmax
        .iter()
        .map(|r| scaling_envelope(r.eps, r.t, mu, p).ln())
        .collect();
    let log_c = ln_p
        .iter()
        .zip(&ln_env)
        .map(|(a, b)| a - b)
        .sum::<f64>()
        / ln_p.len() as f64;
    let pred: Vec<f64> = ln_env.iter().map(|e| log_c + e).collect();
    let envelope_r2 = crate::stats::r_squared_of_prediction(&ln_p, &pred);
    let (_, _, envelope_r2_free) = crate::stats::linear_fit(&ln_env, &ln_p);
    Ok(ScalingTable {
        rows,
        p,
        mu,
        exponent_d,
        exponent_p,
        envelope_c: log_c.exp(),
        envelope_r2,
        envelope_r2_free,
    })
}
