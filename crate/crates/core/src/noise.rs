//! Two-sided discretized Q-Wiener paths for (W1, W2), a one-sided truncated
//! cylindrical path for W3, the shift map `theta_t`, and exact per-mode
//! Ornstein-Uhlenbeck stochastic-convolution recursions.
//!
//! Increments are stored, not path values; the shift acts on increments by
//! integer index arithmetic, so the flow property `theta_{t+s} = theta_t o
//! theta_s` holds exactly at grid resolution. Sampling is keyed by
//! `(seed, stream_id, grid)` through a counter-derived ChaCha stream, so
//! particles can be generated in parallel with deterministic results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spectral::{phi1_scalar, Block, Mat2, SpectralOperator};

/// Uniform two-sided grid of cells `[k dt, (k+1) dt)`, `k_min <= 0 <= k_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dt: f64,
    pub k_min: i64,
    pub k_max: i64,
}

impl Grid {
    pub fn new(dt: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Domain(format!("grid step must be positive, got {dt}")));
        }
        if !(t_min <= 0.0 && t_max >= 0.0) {
            return Err(Error::Domain(
                "grid must satisfy t_min <= 0 <= t_max".into(),
            ));
        }
        let k_min = align(t_min, dt)?;
        let k_max = align(t_max, dt)?;
        if k_min >= k_max {
            return Err(Error::Domain("empty grid".into()));
        }
        Ok(Grid { dt, k_min, k_max })
    }

    pub fn t_min(&self) -> f64 {
        self.k_min as f64 * self.dt
    }

    pub fn t_max(&self) -> f64 {
        self.k_max as f64 * self.dt
    }

    pub fn n_cells(&self) -> usize {
        (self.k_max - self.k_min) as usize
    }
}

/// Nearest grid index of `t`, rejecting misaligned times.
pub fn align(t: f64, dt: f64) -> Result<i64> {
    let c = t / dt;
    let k = c.round();
    if (c - k).abs() > 1e-6 * c.abs().max(1.0) {
        return Err(Error::GridMismatch(format!(
            "time {t} is not a multiple of dt = {dt}"
        )));
    }
    Ok(k as i64)
}

/// Per-mode variances of a trace-class covariance operator.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub per_mode_variance: Vec<f64>,
}

impl CovarianceSpec {
    pub fn new(per_mode_variance: Vec<f64>) -> Result<Self> {
        if per_mode_variance.is_empty() {
            return Err(Error::Domain("covariance needs at least one mode".into()));
        }
        if per_mode_variance.iter().any(|&k| !(k > 0.0) || !k.is_finite()) {
            return Err(Error::Domain(
                "covariance variances must be positive and finite".into(),
            ));
        }
        Ok(CovarianceSpec { per_mode_variance })
    }

    /// `k_i = scale * i^{-decay}` over `dim` components (1-based index).
    pub fn power_decay(dim: usize, scale: f64, decay: f64) -> Result<Self> {
        CovarianceSpec::new(
            (1..=dim)
                .map(|i| scale * (i as f64).powf(-decay))
                .collect(),
        )
    }

    pub fn flat(dim: usize, k: f64) -> Result<Self> {
        CovarianceSpec::new(vec![k; dim])
    }

    pub fn trace(&self) -> f64 {
        self.per_mode_variance.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.per_mode_variance.len()
    }
}

/// Stored Gaussian increments for one realization of (W1, W2, W3).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub grid: Grid,
    pub dim1: usize,
    pub dim2: usize,
    pub dim3: usize,
    pub seed: u64,
    pub stream_id: u64,
    /// Cell-major increments, `n_cells x dim1`.
    pub inc1: Vec<f64>,
    /// Cell-major increments, `n_cells x dim2`.
    pub inc2: Vec<f64>,
    /// One-sided increments on cells `[0, k_max)`, `k_max x dim3`.
    pub inc3: Vec<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 32-byte ChaCha key derived from the master seed and a substream id.
pub fn derive_key(seed: u64, stream_id: u64) -> [u8; 32] {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut key = [0u8; 32];
    let a = splitmix64(&mut state);
    state ^= stream_id;
    let b = splitmix64(&mut state);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    key
}

/// Samples a path whose increments are independent centered Gaussians with
/// variance `k_i dt` per component (unit rate for W3). Deterministic in
/// `(seed, stream_id, grid)`.
pub fn sample_path(
    cov1: &CovarianceSpec,
    cov2: &CovarianceSpec,
    dim3: usize,
    grid: Grid,
    seed: u64,
    stream_id: u64,
) -> NoisePath {
    let dim1 = cov1.dim();
    let dim2 = cov2.dim();
    let n = grid.n_cells();
    let n3 = grid.k_max.max(0) as usize;
    let sqrt_dt = grid.dt.sqrt();
    let sd1: Vec<f64> = cov1
        .per_mode_variance
        .iter()
        .map(|k| (k * grid.dt).sqrt())
        .collect();
    let sd2: Vec<f64> = cov2
        .per_mode_variance
        .iter()
        .map(|k| (k * grid.dt).sqrt())
        .collect();

    let mut rng = ChaCha12Rng::from_seed(derive_key(seed, stream_id));
    let mut inc1 = Vec::with_capacity(n * dim1);
    let mut inc2 = Vec::with_capacity(n * dim2);
    for _ in 0..n {
        for sd in &sd1 {
            let z: f64 = rng.sample(StandardNormal);
            inc1.push(z * sd);
        }
        for sd in &sd2 {
            let z: f64 = rng.sample(StandardNormal);
            inc2.push(z * sd);
        }
    }
    let mut inc3 = Vec::with_capacity(n3 * dim3);
    for _ in 0..n3 {
        for _ in 0..dim3 {
            let z: f64 = rng.sample(StandardNormal);
            inc3.push(z * sqrt_dt);
        }
    }
    NoisePath {
        grid,
        dim1,
        dim2,
        dim3,
        seed,
        stream_id,
        inc1,
        inc2,
        inc3,
    }
}

impl NoisePath {
    pub fn view(&self) -> PathView<'_> {
        PathView {
            path: self,
            offset_cells: 0,
        }
    }

    fn cell_index(&self, cell: i64) -> Result<usize> {
        if cell < self.grid.k_min || cell >= self.grid.k_max {
            return Err(Error::WindowExhausted {
                needed_t: cell as f64 * self.grid.dt,
                have_min: self.grid.t_min(),
                have_max: self.grid.t_max(),
            });
        }
        Ok((cell - self.grid.k_min) as usize)
    }
}

/// Read-only window onto a path, shifted by a whole number of cells. The
/// shift by `s` maps the increment over `[a, a+dt)` to the base increment
/// over `[a+s, a+s+dt)`.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    pub path: &'a NoisePath,
    pub offset_cells: i64,
}

impl<'a> PathView<'a> {
    pub fn dt(&self) -> f64 {
        self.path.grid.dt
    }

    /// Shift by `s`, which must be a multiple of `dt`. Window bounds are
    /// enforced lazily at read time.
    pub fn shifted(&self, s: f64) -> Result<PathView<'a>> {
        let ds = align(s, self.dt())?;
        Ok(self.shifted_cells(ds))
    }

    pub fn shifted_cells(&self, ds: i64) -> PathView<'a> {
        PathView {
            path: self.path,
            offset_cells: self.offset_cells + ds,
        }
    }

    pub fn w1(&self, cell: i64) -> Result<&'a [f64]> {
        let i = self.path.cell_index(cell + self.offset_cells)?;
        let d = self.path.dim1;
        Ok(&self.path.inc1[i * d..(i + 1) * d])
    }

    pub fn w2(&self, cell: i64) -> Result<&'a [f64]> {
        let i = self.path.cell_index(cell + self.offset_cells)?;
        let d = self.path.dim2;
        Ok(&self.path.inc2[i * d..(i + 1) * d])
    }

    /// W3 increments exist on cells `[0, k_max)` of the base path only.
    pub fn w3(&self, cell: i64) -> Result<&'a [f64]> {
        let c = cell + self.offset_cells;
        if c < 0 || c >= self.path.grid.k_max {
            return Err(Error::WindowExhausted {
                needed_t: c as f64 * self.dt(),
                have_min: 0.0,
                have_max: self.path.grid.t_max(),
            });
        }
        let d = self.path.dim3;
        Ok(&self.path.inc3[c as usize * d..(c as usize + 1) * d])
    }

    /// Path value `W1(cell * dt)` (zero at cell 0 by construction).
    pub fn w1_value(&self, cell: i64) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.path.dim1];
        if cell >= 0 {
            for k in 0..cell {
                for (a, v) in acc.iter_mut().zip(self.w1(k)?) {
                    *a += v;
                }
            }
        } else {
            for k in cell..0 {
                for (a, v) in acc.iter_mut().zip(self.w1(k)?) {
                    *a -= v;
                }
            }
        }
        Ok(acc)
    }

    /// First cell (inclusive) readable through this view.
    pub fn first_cell(&self) -> i64 {
        self.path.grid.k_min - self.offset_cells
    }

    /// One past the last readable cell.
    pub fn end_cell(&self) -> i64 {
        self.path.grid.k_max - self.offset_cells
    }
}

// ---------------------------------------------------------------------------
// Exact per-step noise injection
// ---------------------------------------------------------------------------

/// Per-mode fast-noise recursion constants: one step of the stochastic
/// convolution is `v <- phi_i v + c_i * dW2_i` where `phi_i = e^{b_i dt/eps}`
/// and `c_i` carries `sigma2/sqrt(eps)` times the exact integrated-variance
/// rescaling `sqrt((1 - e^{2 b_i dt/eps}) / (-2 b_i dt/eps))`.
#[derive(Debug, Clone)]
pub struct FastNoise {
    pub phi: Vec<f64>,
    pub c: Vec<f64>,
}

impl FastNoise {
    pub fn new(b: &SpectralOperator, sigma2: f64, eps: f64, dt: f64) -> Result<Self> {
        let entries = b.diagonal_entries()?;
        let amp = sigma2 / eps.sqrt();
        let mut phi = Vec::with_capacity(entries.len());
        let mut c = Vec::with_capacity(entries.len());
        for &bi in &entries {
            let z = bi * dt / eps;
            phi.push(z.exp());
            c.push(amp * phi1_scalar(2.0 * z).sqrt());
        }
        Ok(FastNoise { phi, c })
    }

    #[inline]
    pub fn step(&self, state: &mut [f64], dw2: &[f64]) {
        for i in 0..state.len() {
            state[i] = self.phi[i] * state[i] + self.c[i] * dw2[i];
        }
    }
}

/// Per-block slow-noise recursion: scalar blocks use the exact-variance
/// rescaling, 2x2 blocks the left-point rule (increment propagated through
/// the step's semigroup factor).
#[derive(Debug, Clone)]
pub enum SlowNoiseBlock {
    Scalar { phi: f64, c: f64 },
    Mat { phi: Mat2, sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct SlowNoise {
    pub blocks: Vec<SlowNoiseBlock>,
    pub offsets: Vec<usize>,
}

impl SlowNoise {
    pub fn new(a: &SpectralOperator, sigma1: f64, dt: f64) -> Self {
        let offsets = a.space.block_offsets();
        let blocks = a
            .blocks
            .iter()
            .map(|blk| match blk {
                Block::One(v) => SlowNoiseBlock::Scalar {
                    phi: (v * dt).exp(),
                    c: sigma1 * phi1_scalar(2.0 * v * dt).sqrt(),
                },
                Block::Two(m) => SlowNoiseBlock::Mat {
                    phi: crate::spectral::expm2(m, dt),
                    sigma: sigma1,
                },
            })
            .collect();
        SlowNoise { blocks, offsets }
    }

    #[inline]
    pub fn step(&self, state: &mut [f64], dw1: &[f64]) {
        for (blk, &off) in self.blocks.iter().zip(&self.offsets) {
            match blk {
                SlowNoiseBlock::Scalar { phi, c } => {
                    state[off] = phi * state[off] + c * dw1[off];
                }
                SlowNoiseBlock::Mat { phi, sigma } => {
                    let u = [
                        state[off] + sigma * dw1[off],
                        state[off + 1] + sigma * dw1[off + 1],
                    ];
                    let r = crate::spectral::mat2_apply(phi, u);
                    state[off] = r[0];
                    state[off + 1] = r[1];
                }
            }
        }
    }
}

/// Truncated stochastic convolution
/// `int_{t-H}^{t} e^{(B/eps)(t-r)} (sigma2/sqrt(eps)) dW2(r)`
/// by the exact per-mode OU recursion, initialized at zero `horizon_cells`
/// before the evaluation cell.
pub fn ou_convolution(
    b: &SpectralOperator,
    sigma2: f64,
    eps: f64,
    view: PathView<'_>,
    t: f64,
    horizon_cells: usize,
) -> Result<Vec<f64>> {
    let t_cell = align(t, view.dt())?;
    let fast = FastNoise::new(b, sigma2, eps, view.dt())?;
    let mut state = vec![0.0; b.space.dim];
    let start = t_cell - horizon_cells as i64;
    for k in start..t_cell {
        fast.step(&mut state, view.w2(k)?);
    }
    Ok(state)
}

/// Stochastic convolution `int_{t_from}^{t_to} e^{A(t_to - r)} sigma1 dW1(r)`
/// by per-block exact (1x1) or left-point (2x2) recursion.
pub fn slow_convolution(
    a: &SpectralOperator,
    sigma1: f64,
    view: PathView<'_>,
    t_from: f64,
    t_to: f64,
) -> Result<Vec<f64>> {
    let from = align(t_from, view.dt())?;
    let to = align(t_to, view.dt())?;
    if from > to {
        return Err(Error::Domain("t_from must not exceed t_to".into()));
    }
    let slow = SlowNoise::new(a, sigma1, view.dt());
    let mut state = vec![0.0; a.space.dim];
    for k in from..to {
        slow.step(&mut state, view.w1(k)?);
    }
    Ok(state)
}

/// Backward truncation horizon `T_back = (eps/(gamma2-mu)) ln(1/tol)`: the
/// neglected tail of the fast convolution sits below `tol` in the weighted
/// backward norm.
pub fn backward_horizon(eps: f64, gamma2: f64, mu: f64, tol: f64) -> f64 {
    eps * (1.0 / tol).ln() / (gamma2 - mu)
}

/// Spin-up horizon for the stationary OU convolution itself: relative
/// initialization error `e^{-gamma2 T / eps} <= tol`.
pub fn ou_spinup_horizon(eps: f64, gamma2: f64, tol: f64) -> f64 {
    eps * (1.0 / tol).ln() / gamma2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{SpaceName, SpaceSpec};
    use std::sync::Arc;

    fn grid(dt: f64, t_min: f64, t_max: f64) -> Grid {
        Grid::new(dt, t_min, t_max).unwrap()
    }

    #[test]
    fn covariance_rejects_degenerate() {
        assert!(CovarianceSpec::new(vec![1.0, 0.0]).is_err());
        assert!(CovarianceSpec::new(vec![]).is_err());
        let c = CovarianceSpec::power_decay(3, 1.0, 2.0).unwrap();
        assert!((c.trace() - (1.0 + 0.25 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c1 = CovarianceSpec::flat(2, 1.0).unwrap();
        let c2 = CovarianceSpec::flat(1, 0.5).unwrap();
        let g = grid(0.1, -1.0, 1.0);
        let p1 = sample_path(&c1, &c2, 2, g, 42, 7);
        let p2 = sample_path(&c1, &c2, 2, g, 42, 7);
        assert_eq!(p1, p2);
        let p3 = sample_path(&c1, &c2, 2, g, 42, 8);
        assert_ne!(p1.inc1, p3.inc1);
    }

    #[test]
    fn gaussian_moments_of_w1() {
        // W1(1) has mean 0 and per-mode variance k_i
        let k = [0.8, 0.3];
        let c1 = CovarianceSpec::new(k.to_vec()).unwrap();
        let c2 = CovarianceSpec::flat(1, 1.0).unwrap();
        let g = grid(0.25, 0.0, 1.0);
        let n = 100_000usize;
        let mut mean = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for j in 0..n {
            let p = sample_path(&c1, &c2, 0, g, 5, j as u64);
            let w = p.view().w1_value(4).unwrap();
            for i in 0..2 {
                mean[i] += w[i];
                sq[i] += w[i] * w[i];
            }
        }
        for i in 0..2 {
            mean[i] /= n as f64;
            sq[i] /= n as f64;
            let se_mean = (k[i] / n as f64).sqrt();
            assert!(mean[i].abs() <= 3.0 * se_mean, "mode {i} mean {}", mean[i]);
            let var = sq[i] - mean[i] * mean[i];
            let se_var = k[i] * (2.0 / n as f64).sqrt();
            assert!((var - k[i]).abs() <= 3.0 * se_var, "mode {i} var {var}");
        }
    }

    #[test]
    fn shift_flow_property_and_indexing() {
        let c1 = CovarianceSpec::flat(1, 1.0).unwrap();
        let c2 = CovarianceSpec::flat(1, 1.0).unwrap();
        let g = grid(0.5, -4.0, 4.0);
        let p = sample_path(&c1, &c2, 1, g, 9, 0);
        let v = p.view();
        // theta_0 identity
        let v0 = v.shifted(0.0).unwrap();
        assert_eq!(v.w1(2).unwrap(), v0.w1(2).unwrap());
        // flow property: shift(shift(p, s), t) == shift(p, s + t)
        let a = v.shifted(1.0).unwrap().shifted(-2.5).unwrap();
        let b = v.shifted(-1.5).unwrap();
        for k in -2..3 {
            assert_eq!(a.w1(k).unwrap(), b.w1(k).unwrap());
            assert_eq!(a.w2(k).unwrap(), b.w2(k).unwrap());
        }
        // increment of shifted view on cell [0, dt) equals base on [s, s+dt)
        let s = 1.5;
        let vs = v.shifted(s).unwrap();
        assert_eq!(vs.w1(0).unwrap(), v.w1(3).unwrap());
        // misaligned shift rejected
        assert!(v.shifted(0.3).is_err());
        // reads outside the stored window name the extension
        assert!(matches!(
            v.w1(100),
            Err(Error::WindowExhausted { .. })
        ));
    }

    #[test]
    fn shifted_views_are_distributionally_brownian() {
        // mean/variance of W(1) read through a shifted window match the
        // unshifted law
        let k = 0.6;
        let c = CovarianceSpec::new(vec![k]).unwrap();
        let g = grid(0.25, -8.0, 8.0);
        let n = 40_000usize;
        let mut mean = 0.0f64;
        let mut sq = 0.0f64;
        for j in 0..n {
            let p = sample_path(&c, &c, 0, g, 31, j as u64);
            let v = p.view().shifted(3.25).unwrap();
            // increment of the shifted path over [0, 1): four cells
            let mut w = 0.0;
            for cell in 0..4 {
                w += v.w1(cell).unwrap()[0];
            }
            mean += w;
            sq += w * w;
        }
        mean /= n as f64;
        sq /= n as f64;
        let var = sq - mean * mean;
        assert!(mean.abs() <= 3.0 * (k / n as f64).sqrt(), "mean {mean}");
        assert!((var - k).abs() <= 3.0 * k * (2.0 / n as f64).sqrt(), "var {var}");
    }

    fn fast_op(entries: &[f64]) -> SpectralOperator {
        let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H2, entries.len()).unwrap());
        SpectralOperator::diagonal(sp, entries.to_vec()).unwrap()
    }

    #[test]
    fn ou_convolution_zero_noise() {
        let b = fast_op(&[-2.0]);
        let c = CovarianceSpec::flat(1, 1.0).unwrap();
        let g = grid(0.01, -1.0, 0.5);
        let p = sample_path(&c, &c, 0, g, 1, 1);
        let v = ou_convolution(&b, 0.0, 0.1, p.view(), 0.0, 50).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn ou_stationary_variance_matches_oracle() {
        // stationary variance sigma2^2 k / (2 b), independent of eps
        let bval = 2.0;
        let kvar = 0.7;
        let sigma2 = 0.9;
        let b = fast_op(&[-bval]);
        let c2 = CovarianceSpec::new(vec![kvar]).unwrap();
        let c1 = CovarianceSpec::flat(1, 1.0).unwrap();
        let n = 100_000usize;
        for &eps in &[0.1, 0.025] {
            let dt = eps / 10.0;
            let horizon = ou_spinup_horizon(eps, bval, 1e-10);
            let hc = (horizon / dt).ceil() as usize;
            let g = Grid::new(dt, -(hc as f64) * dt, dt).unwrap();
            let mut sq = 0.0;
            for j in 0..n {
                let p = sample_path(&c1, &c2, 0, g, 77, j as u64);
                let v = ou_convolution(&b, sigma2, eps, p.view(), 0.0, hc).unwrap();
                sq += v[0] * v[0];
            }
            let var = sq / n as f64;
            let target = sigma2 * sigma2 * kvar / (2.0 * bval);
            let se = target * (2.0 / n as f64).sqrt();
            assert!(
                (var - target).abs() <= 3.0 * se,
                "eps={eps}: var {var} vs {target}"
            );
        }
    }

    #[test]
    fn ou_truncation_tail_bound() {
        let bval = 2.0;
        let eps = 0.1;
        let sigma2 = 1.0;
        let b = fast_op(&[-bval]);
        let cov = CovarianceSpec::flat(1, 1.0).unwrap();
        let dt = 0.005f64;
        let t_back = 0.2f64;
        let hc = (t_back / dt).round() as usize;
        let g = Grid::new(dt, -2.0 * t_back - dt, dt).unwrap();
        let n = 50_000usize;
        let stationary = sigma2 * sigma2 / (2.0 * bval);
        let bound = (-2.0 * bval * t_back / eps).exp() * stationary;
        let mut diff_sq = 0.0;
        for j in 0..n {
            let p = sample_path(&cov, &cov, 0, g, 3, j as u64);
            let v1 = ou_convolution(&b, sigma2, eps, p.view(), 0.0, hc).unwrap();
            let v2 = ou_convolution(&b, sigma2, eps, p.view(), 0.0, 2 * hc).unwrap();
            let d = v1[0] - v2[0];
            diff_sq += d * d;
        }
        diff_sq /= n as f64;
        let se = bound * (2.0 / n as f64).sqrt();
        assert!(
            diff_sq <= bound * (1.0 + 3.0 * (2.0 / n as f64).sqrt()) + 3.0 * se,
            "tail second moment {diff_sq} vs bound {bound}"
        );
    }

    #[test]
    fn slow_convolution_zero_generator_sums_increments() {
        let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H1, 2).unwrap());
        let a = SpectralOperator::diagonal(sp, vec![0.0, 0.0]).unwrap();
        let cov = CovarianceSpec::flat(2, 1.0).unwrap();
        let g = grid(0.1, -1.0, 2.0);
        let p = sample_path(&cov, &cov, 0, g, 11, 0);
        let v = p.view();
        let conv = slow_convolution(&a, 0.7, v, 0.5, 1.5).unwrap();
        let w_to = v.w1_value(15).unwrap();
        let w_from = v.w1_value(5).unwrap();
        for i in 0..2 {
            assert!((conv[i] - 0.7 * (w_to[i] - w_from[i])).abs() < 1e-13);
        }
        // sigma = 0 trivial
        let z = slow_convolution(&a, 0.0, v, 0.0, 1.0).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn slow_convolution_variance_oracle() {
        // variance over [0, 1] of int e^{-a(1-r)} sigma dW: sigma^2 k (1-e^{-2a})/(2a)
        let aval = 1.3;
        let kvar = 0.6;
        let sigma = 0.8;
        let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H1, 1).unwrap());
        let a = SpectralOperator::diagonal(sp, vec![-aval]).unwrap();
        let cov = CovarianceSpec::new(vec![kvar]).unwrap();
        let cov2 = CovarianceSpec::flat(1, 1.0).unwrap();
        let g = grid(0.01, 0.0, 1.0);
        let n = 100_000usize;
        let mut sq = 0.0;
        for j in 0..n {
            let p = sample_path(&cov, &cov2, 0, g, 13, j as u64);
            let v = slow_convolution(&a, sigma, p.view(), 0.0, 1.0).unwrap();
            sq += v[0] * v[0];
        }
        let var = sq / n as f64;
        let target = sigma * sigma * kvar * (1.0 - (-2.0 * aval).exp()) / (2.0 * aval);
        let se = target * (2.0 / n as f64).sqrt();
        assert!((var - target).abs() <= 3.0 * se, "var {var} vs {target}");
    }

    #[test]
    fn ou_matches_fine_riemann_sum() {
        // strong check against brute-force quadrature on a 10x finer grid
        let bval = 1.0;
        let eps = 1.0;
        let sigma2 = 1.0;
        let dt_fine = 5e-5;
        let refine = 10usize;
        let dt = dt_fine * refine as f64;
        let t_end = 1.0;
        let cov = CovarianceSpec::flat(1, 1.0).unwrap();
        let gf = Grid::new(dt_fine, 0.0, t_end).unwrap();
        let fine = sample_path(&cov, &cov, 0, gf, 21, 4);
        let vf = fine.view();
        let n_fine = (t_end / dt_fine).round() as usize;
        // brute-force left-point Riemann sum on the fine grid
        let mut brute = 0.0;
        for k in 0..n_fine {
            let r = k as f64 * dt_fine;
            brute += (-(bval / eps) * (t_end - r)).exp() * (sigma2 / eps.sqrt())
                * vf.w1(k as i64).unwrap()[0];
        }
        let n_coarse = n_fine / refine;
        let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H2, 1).unwrap());
        let b = SpectralOperator::diagonal(sp, vec![-bval]).unwrap();
        // exact recursion driven by the aggregated W2 increments
        let ou = {
            let fastn = FastNoise::new(&b, sigma2, eps, dt).unwrap();
            let mut st = vec![0.0];
            for k in 0..n_coarse {
                let mut s2 = 0.0;
                for j in 0..refine {
                    s2 += vf.w1((k * refine + j) as i64).unwrap()[0];
                }
                fastn.step(&mut st, &[s2]);
            }
            st[0]
        };
        let scale = (sigma2 * sigma2 / (2.0 * bval)).sqrt();
        assert!(
            (ou - brute).abs() <= 1e-2 * scale.max(brute.abs()),
            "ou {ou} vs riemann {brute}"
        );
    }
}
