//! Truncated Hilbert spaces, block-diagonal generators with exact semigroups,
//! Lipschitz nonlinearities, and the hypothesis checker.
//!
//! Operators are restricted to block-diagonal form with blocks of size one or
//! two in an orthonormal mode basis, so every semigroup factor is available in
//! closed form. The fast generator `B` must be diagonal with negative entries;
//! the slow generator `A` may mix 1x1 and 2x2 blocks (wave-type modes).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Which truncated space a vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpaceName {
    H1,
    H2,
    H3,
}

impl fmt::Display for SpaceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceName::H1 => write!(f, "H1"),
            SpaceName::H2 => write!(f, "H2"),
            SpaceName::H3 => write!(f, "H3"),
        }
    }
}

/// A truncated Hilbert space: a number of retained coefficients together with
/// the block layout of its generator (blocks of size 1 or 2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpaceSpec {
    pub name: SpaceName,
    pub dim: usize,
    pub block_layout: Vec<usize>,
}

impl SpaceSpec {
    pub fn new(name: SpaceName, block_layout: Vec<usize>) -> Result<Self> {
        if block_layout.is_empty() {
            return Err(Error::Domain("space must have at least one block".into()));
        }
        if block_layout.iter().any(|&b| b != 1 && b != 2) {
            return Err(Error::Domain("block sizes must be 1 or 2".into()));
        }
        let dim = block_layout.iter().sum();
        Ok(SpaceSpec {
            name,
            dim,
            block_layout,
        })
    }

    /// Space with `dim` scalar modes (all blocks 1x1).
    pub fn diagonal(name: SpaceName, dim: usize) -> Result<Self> {
        SpaceSpec::new(name, vec![1; dim])
    }

    /// Offset of the first coefficient of each block.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.block_layout.len());
        let mut o = 0;
        for &b in &self.block_layout {
            offs.push(o);
            o += b;
        }
        offs
    }
}

/// Coefficient vector of an element of a truncated space. The norm is the
/// Euclidean norm of the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct HVector {
    pub space: Arc<SpaceSpec>,
    pub coeffs: Vec<f64>,
}

impl HVector {
    pub fn new(space: Arc<SpaceSpec>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.dim {
            return Err(Error::SpaceMismatch {
                expected: format!("{} (dim {})", space.name, space.dim),
                found: format!("vector of length {}", coeffs.len()),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite coefficient".into()));
        }
        Ok(HVector { space, coeffs })
    }

    pub fn zeros(space: Arc<SpaceSpec>) -> Self {
        let coeffs = vec![0.0; space.dim];
        HVector { space, coeffs }
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.coeffs)
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `H = H1 x H2` norm of a state pair: `||x|| + ||y||`.
pub fn pair_norm(x: &[f64], y: &[f64]) -> f64 {
    norm2(x) + norm2(y)
}

// ---------------------------------------------------------------------------
// 2x2 block matrix helpers (closed-form exponential, phi1, spectral norm)
// ---------------------------------------------------------------------------

pub type Mat2 = [[f64; 2]; 2];

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn mat2_apply(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

const MAT2_ID: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

/// Exact `exp(m * t)` for a 2x2 block, via the trace/traceless split.
pub fn expm2(m: &Mat2, t: f64) -> Mat2 {
    let a = m[0][0] * t;
    let b = m[0][1] * t;
    let c = m[1][0] * t;
    let d = m[1][1] * t;
    let half_tr = 0.5 * (a + d);
    let p = 0.5 * (a - d);
    // traceless part N = M*t - half_tr*I, with N^2 = delta * I
    let delta = p * p + b * c;
    let (ch, shc) = cosh_sinhc(delta);
    let e = half_tr.exp();
    [
        [e * (ch + shc * p), e * (shc * b)],
        [e * (shc * c), e * (ch - shc * p)],
    ]
}

/// Returns `(cosh(sqrt(delta)), sinh(sqrt(delta))/sqrt(delta))` with the
/// analytic continuation to `delta <= 0` (cos/sinc) and a series near zero.
fn cosh_sinhc(delta: f64) -> (f64, f64) {
    if delta.abs() < 1e-4 {
        // both functions are entire in delta; two series terms reach 1e-15
        let ch = 1.0 + delta / 2.0 + delta * delta / 24.0 + delta * delta * delta / 720.0;
        let shc = 1.0 + delta / 6.0 + delta * delta / 120.0 + delta * delta * delta / 5040.0;
        (ch, shc)
    } else if delta > 0.0 {
        let q = delta.sqrt();
        (q.cosh(), q.sinh() / q)
    } else {
        let q = (-delta).sqrt();
        (q.cos(), q.sin() / q)
    }
}

fn mat2_inf_norm(m: &Mat2) -> f64 {
    let r0 = m[0][0].abs() + m[0][1].abs();
    let r1 = m[1][0].abs() + m[1][1].abs();
    r0.max(r1)
}

/// `phi1(X) = X^{-1} (e^X - I)`, evaluated stably via scaling and squaring
/// with a power series at the bottom.
pub fn phi1_2x2(x: &Mat2) -> Mat2 {
    let nrm = mat2_inf_norm(x);
    if nrm <= 0.5 {
        // sum_{k>=0} X^k / (k+1)!
        let mut term = MAT2_ID;
        let mut acc = MAT2_ID;
        let mut fact = 1.0f64;
        for k in 1..=16 {
            term = mat2_mul(&term, x);
            fact *= (k + 1) as f64;
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += term[i][j] / fact;
                }
            }
        }
        acc
    } else {
        // phi1(X) = (I + e^{X/2}) phi1(X/2) / 2
        let half = [
            [x[0][0] * 0.5, x[0][1] * 0.5],
            [x[1][0] * 0.5, x[1][1] * 0.5],
        ];
        let ph = phi1_2x2(&half);
        let eh = expm2(&half, 1.0);
        let mut s = eh;
        s[0][0] += 1.0;
        s[1][1] += 1.0;
        let m = mat2_mul(&s, &ph);
        [
            [m[0][0] * 0.5, m[0][1] * 0.5],
            [m[1][0] * 0.5, m[1][1] * 0.5],
        ]
    }
}

/// Scalar `phi1(z) = (e^z - 1)/z` with a series near zero.
pub fn phi1_scalar(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// Exact spectral (operator) norm of a 2x2 matrix.
pub fn mat2_spectral_norm(m: &Mat2) -> f64 {
    let gxx = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let gyy = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let gxy = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let half_tr = 0.5 * (gxx + gyy);
    let det = gxx * gyy - gxy * gxy;
    let disc = (half_tr * half_tr - det).max(0.0);
    (half_tr + disc.sqrt()).max(0.0).sqrt()
}

fn mat2_inverse(m: &Mat2) -> Option<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

// ---------------------------------------------------------------------------
// Spectral operators
// ---------------------------------------------------------------------------

/// One generator block restricted to a mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    One(f64),
    Two(Mat2),
}

impl Block {
    pub fn size(&self) -> usize {
        match self {
            Block::One(_) => 1,
            Block::Two(_) => 2,
        }
    }
}

/// Block-diagonal generator with exact per-block semigroup.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperator {
    pub space: Arc<SpaceSpec>,
    pub blocks: Vec<Block>,
}

impl SpectralOperator {
    pub fn new(space: Arc<SpaceSpec>, blocks: Vec<Block>) -> Result<Self> {
        if blocks.len() != space.block_layout.len() {
            return Err(Error::SpaceMismatch {
                expected: format!("{} blocks", space.block_layout.len()),
                found: format!("{} blocks", blocks.len()),
            });
        }
        for (blk, &sz) in blocks.iter().zip(&space.block_layout) {
            if blk.size() != sz {
                return Err(Error::SpaceMismatch {
                    expected: format!("block of size {sz}"),
                    found: format!("block of size {}", blk.size()),
                });
            }
        }
        Ok(SpectralOperator { space, blocks })
    }

    /// Diagonal operator from per-mode entries.
    pub fn diagonal(space: Arc<SpaceSpec>, entries: Vec<f64>) -> Result<Self> {
        let blocks = entries.into_iter().map(Block::One).collect();
        SpectralOperator::new(space, blocks)
    }

    /// For the fast role: every block must be 1x1 with a negative entry.
    /// Returns the realized dissipation rate `min |entry|`.
    pub fn fast_dissipation_rate(&self) -> Result<f64> {
        let mut min_abs = f64::INFINITY;
        for blk in &self.blocks {
            match blk {
                Block::One(b) if *b < 0.0 => min_abs = min_abs.min(b.abs()),
                Block::One(b) => {
                    return Err(Error::Admissibility(format!(
                        "fast generator must be diagonal dissipative, found entry {b}"
                    )))
                }
                Block::Two(_) => {
                    return Err(Error::Admissibility(
                        "fast generator must have 1x1 blocks only".into(),
                    ))
                }
            }
        }
        Ok(min_abs)
    }

    /// Diagonal entries, assuming all blocks are 1x1.
    pub fn diagonal_entries(&self) -> Result<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::One(v) => Ok(*v),
                Block::Two(_) => Err(Error::Domain("operator is not diagonal".into())),
            })
            .collect()
    }
}

/// Applies `exp(op * t)` to `v`, exactly per block. Negative `t` is allowed
/// (backward integrals run through the inverse semigroup factors).
pub fn semigroup_apply(op: &SpectralOperator, t: f64, v: &HVector) -> Result<HVector> {
    if v.space != op.space {
        return Err(Error::SpaceMismatch {
            expected: format!("{}", op.space.name),
            found: format!("{}", v.space.name),
        });
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("non-finite time {t}")));
    }
    let mut out = vec![0.0; v.coeffs.len()];
    let mut off = 0;
    for blk in &op.blocks {
        match blk {
            Block::One(a) => {
                out[off] = (a * t).exp() * v.coeffs[off];
                off += 1;
            }
            Block::Two(m) => {
                let e = expm2(m, t);
                let r = mat2_apply(&e, [v.coeffs[off], v.coeffs[off + 1]]);
                out[off] = r[0];
                out[off + 1] = r[1];
                off += 2;
            }
        }
    }
    HVector::new(op.space.clone(), out)
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Whether a nonlinearity produces the slow drift (`F`, valued in H1) or the
/// fast drift (`G`, valued in H2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftRole {
    Slow,
    Fast,
}

/// Registered nonlinearity shapes. All kinds vanish at the origin.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinKind {
    Zero,
    /// Injects the leading coefficients of the other-space argument, scaled
    /// by `gain`: `F(x,y)_i = gain * y_i`, `G(x,y)_i = gain * x_i`.
    LinearCoupling { gain: f64 },
    /// Componentwise `amp * sin(x_i)` of the slow argument. With `coupled`,
    /// each slow block k feeds `amp * sin(sum of block coords + y_k)` into the
    /// last coordinate of the block (slow role) or into mode k (fast role).
    Sine { amp: f64, coupled: bool },
    /// Componentwise piecewise-linear map of the slow argument, clamped to
    /// the table range. The table must interpolate the origin exactly.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

/// A Lipschitz interaction function together with its declared constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    pub kind: NonlinKind,
    pub declared_lipschitz: f64,
}

impl Nonlinearity {
    pub fn new(kind: NonlinKind) -> Result<Self> {
        let lip = match &kind {
            NonlinKind::Zero => 0.0,
            NonlinKind::LinearCoupling { gain } => gain.abs(),
            NonlinKind::Sine { amp, coupled } => {
                if *coupled {
                    amp.abs() * std::f64::consts::SQRT_2
                } else {
                    amp.abs()
                }
            }
            NonlinKind::Table { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() {
                    return Err(Error::Domain("table needs >= 2 matching points".into()));
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Domain("table abscissae must increase".into()));
                }
                if !xs.iter().zip(ys).any(|(&x, &y)| x == 0.0 && y == 0.0) {
                    return Err(Error::Domain(
                        "table must contain the origin (0, 0) exactly".into(),
                    ));
                }
                let mut lip = 0.0f64;
                for w in 0..xs.len() - 1 {
                    lip = lip.max(((ys[w + 1] - ys[w]) / (xs[w + 1] - xs[w])).abs());
                }
                lip
            }
        };
        Ok(Nonlinearity {
            kind,
            declared_lipschitz: lip,
        })
    }

    pub fn zero() -> Self {
        Nonlinearity {
            kind: NonlinKind::Zero,
            declared_lipschitz: 0.0,
        }
    }

    /// Overrides the declared constant (the probe checker will flag a value
    /// below the realized ratio).
    pub fn with_declared_lipschitz(mut self, lip: f64) -> Self {
        self.declared_lipschitz = lip;
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, NonlinKind::Zero)
    }

    /// Evaluates the drift into `out`. `slow_offsets`/`slow_layout` describe
    /// the slow-space block structure (needed by the coupled sine).
    pub fn eval(
        &self,
        role: DriftRole,
        x: &[f64],
        y: &[f64],
        slow_offsets: &[usize],
        slow_layout: &[usize],
        out: &mut [f64],
    ) {
        out.fill(0.0);
        match &self.kind {
            NonlinKind::Zero => {}
            NonlinKind::LinearCoupling { gain } => {
                let src = match role {
                    DriftRole::Slow => y,
                    DriftRole::Fast => x,
                };
                let n = src.len().min(out.len());
                for i in 0..n {
                    out[i] = gain * src[i];
                }
            }
            NonlinKind::Sine { amp, coupled: false } => {
                let n = x.len().min(out.len());
                for i in 0..n {
                    out[i] = amp * x[i].sin();
                }
            }
            NonlinKind::Sine { amp, coupled: true } => {
                for (k, (&off, &sz)) in slow_offsets.iter().zip(slow_layout).enumerate() {
                    let mut u = 0.0;
                    for j in 0..sz {
                        u += x[off + j];
                    }
                    if k < y.len() {
                        u += y[k];
                    }
                    let val = amp * u.sin();
                    match role {
                        DriftRole::Slow => out[off + sz - 1] = val,
                        DriftRole::Fast => {
                            if k < out.len() {
                                out[k] = val;
                            }
                        }
                    }
                }
            }
            NonlinKind::Table { xs, ys } => {
                let n = x.len().min(out.len());
                for i in 0..n {
                    out[i] = table_eval(xs, ys, x[i]);
                }
            }
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

// ---------------------------------------------------------------------------
// System parameters and admissibility
// ---------------------------------------------------------------------------

/// Scalar parameters of the slow-fast system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemParams {
    pub epsilon: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
    pub mu: f64,
    pub horizon_t: f64,
    pub c_h: f64,
    pub h_lip: f64,
}

impl SystemParams {
    /// Default rate split of the admissible interval `(0, gamma2 - L)`.
    pub fn default_mu(gamma2: f64, lipschitz: f64) -> f64 {
        0.5 * (gamma2 - lipschitz)
    }

    pub fn contraction_constant(&self) -> Result<f64> {
        compute_contraction_constant(
            self.epsilon,
            self.lipschitz,
            self.gamma1,
            self.gamma2,
            self.mu,
        )
    }

    pub fn epsilon0(&self) -> Result<f64> {
        compute_epsilon0(self.lipschitz, self.gamma1, self.gamma2, self.mu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Admissibility("epsilon must be positive".into()));
        }
        if self.sigma1 == 0.0 || self.sigma2 == 0.0 {
            return Err(Error::Admissibility("noise intensities must be nonzero".into()));
        }
        if self.gamma1 < 0.0 {
            return Err(Error::Admissibility("gamma1 must be nonnegative".into()));
        }
        if !(self.gamma2 > self.lipschitz) {
            return Err(Error::Admissibility(format!(
                "dissipation gap violated: gamma2 = {} <= L = {}",
                self.gamma2, self.lipschitz
            )));
        }
        if !(self.mu > 0.0 && self.mu < self.gamma2 - self.lipschitz) {
            return Err(Error::Admissibility(format!(
                "mu = {} outside (0, gamma2 - L) = (0, {})",
                self.mu,
                self.gamma2 - self.lipschitz
            )));
        }
        let eps0 = self.epsilon0()?;
        if !(self.epsilon < eps0) {
            return Err(Error::Admissibility(format!(
                "epsilon = {} not strictly below epsilon0 = {}",
                self.epsilon, eps0
            )));
        }
        if !(self.horizon_t > 0.0) {
            return Err(Error::Admissibility("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Contraction constant `M = eps*L/(mu - eps*gamma1) + L/(gamma2 - mu)`.
pub fn compute_contraction_constant(
    epsilon: f64,
    lipschitz: f64,
    gamma1: f64,
    gamma2: f64,
    mu: f64,
) -> Result<f64> {
    if !(mu - epsilon * gamma1 > 0.0) {
        return Err(Error::Admissibility(format!(
            "fast-slow gap violated at this epsilon: mu = {mu} <= eps*gamma1 = {}",
            epsilon * gamma1
        )));
    }
    if !(mu < gamma2) {
        return Err(Error::Admissibility(format!(
            "mu = {mu} must be below gamma2 = {gamma2}"
        )));
    }
    Ok(epsilon * lipschitz / (mu - epsilon * gamma1) + lipschitz / (gamma2 - mu))
}

/// Supremum `eps0` of scale ratios with `M(eps) < 1`. With `c := 1 - L/(gamma2-mu)`,
/// `eps0 = c*mu / (L + c*gamma1)`; returns infinity when the coupling vanishes
/// and the slow semigroup is norm-preserving (report "unconstrained").
pub fn compute_epsilon0(lipschitz: f64, gamma1: f64, gamma2: f64, mu: f64) -> Result<f64> {
    if !(gamma2 > lipschitz) {
        return Err(Error::Admissibility(format!(
            "gamma2 = {gamma2} must exceed L = {lipschitz}"
        )));
    }
    if !(mu > 0.0 && mu < gamma2 - lipschitz) {
        return Err(Error::Admissibility(format!(
            "mu = {mu} outside (0, {})",
            gamma2 - lipschitz
        )));
    }
    let c = 1.0 - lipschitz / (gamma2 - mu);
    let denom = lipschitz + c * gamma1;
    if denom == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(c * mu / denom)
}

// ---------------------------------------------------------------------------
// Hypothesis checker
// ---------------------------------------------------------------------------

/// Norm in which a slow block satisfied the semigroup bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NormUsed {
    Euclidean,
    /// Equivalent per-block energy norm from the block's balanced (real
    /// Jordan) metric; the bounds are norm-equivalence statements, so the
    /// verdict reports which metric certified them.
    BlockEnergy,
}

#[derive(Debug, Clone, Serialize)]
pub struct H1Verdict {
    pub pass: bool,
    pub block_norms: Vec<NormUsed>,
    /// Worst ratio `||e^{At}|| / bound` observed over the grid (<= 1 passes).
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct H2Verdict {
    pub pass: bool,
    /// Realized dissipation `min |b_i|`; passes when >= gamma2.
    pub realized_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct H3Verdict {
    pub pass: bool,
    pub ratio_f: f64,
    pub ratio_g: f64,
    pub zero_anchor: bool,
    pub probes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowVerdict {
    pub pass: bool,
    pub gamma2_gap: bool,
    pub mu: f64,
    pub epsilon: f64,
    pub epsilon0: f64,
    pub contraction_m: Option<f64>,
}

/// One verdict per hypothesis; failures are verdicts, not errors.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub h1: H1Verdict,
    pub h2: H2Verdict,
    pub h3: H3Verdict,
    pub window: WindowVerdict,
}

impl HypothesisReport {
    pub fn pass(&self) -> bool {
        self.h1.pass && self.h2.pass && self.h3.pass && self.window.pass
    }
}

/// Default probe count for the Lipschitz checks.
pub const DEFAULT_PROBES: usize = 10_000;
/// Probe radius for Lipschitz checks.
pub const PROBE_RADIUS: f64 = 10.0;

pub fn check_hypotheses(
    a: &SpectralOperator,
    b: &SpectralOperator,
    f: &Nonlinearity,
    g: &Nonlinearity,
    params: &SystemParams,
) -> HypothesisReport {
    check_hypotheses_with(a, b, f, g, params, DEFAULT_PROBES, 0x5f3a_9c1d)
}

pub fn check_hypotheses_with(
    a: &SpectralOperator,
    b: &SpectralOperator,
    f: &Nonlinearity,
    g: &Nonlinearity,
    params: &SystemParams,
    probes: usize,
    probe_seed: u64,
) -> HypothesisReport {
    let h1 = check_h1(a, params.gamma1);
    let h2 = check_h2(b, params.gamma2);
    let h3 = check_h3(a, b, f, g, probes, probe_seed);

    let gamma2_gap = params.gamma2 > params.lipschitz;
    let eps0 = compute_epsilon0(params.lipschitz, params.gamma1, params.gamma2, params.mu);
    let (eps0_val, m_val, window_pass) = match eps0 {
        Ok(e0) => {
            let m = compute_contraction_constant(
                params.epsilon,
                params.lipschitz,
                params.gamma1,
                params.gamma2,
                params.mu,
            )
            .ok();
            let pass = gamma2_gap && params.epsilon < e0 && m.map(|m| m < 1.0).unwrap_or(false);
            (e0, m, pass)
        }
        Err(_) => (f64::NAN, None, false),
    };
    let window = WindowVerdict {
        pass: window_pass,
        gamma2_gap,
        mu: params.mu,
        epsilon: params.epsilon,
        epsilon0: eps0_val,
        contraction_m: m_val,
    };

    HypothesisReport { h1, h2, h3, window }
}

/// Grid of magnitudes at which the semigroup bounds are checked.
fn h1_grid() -> Vec<f64> {
    let mut g = Vec::new();
    let n = 25;
    for i in 0..n {
        let e = -3.0 + 4.0 * (i as f64) / ((n - 1) as f64); // 1e-3 ..= 1e1
        g.push(10f64.powf(e));
    }
    g
}

fn check_h1(a: &SpectralOperator, gamma1: f64) -> H1Verdict {
    let grid = h1_grid();
    let tol = 1.0 + 1e-9;
    let mut block_norms = Vec::with_capacity(a.blocks.len());
    let mut worst: f64 = 0.0;
    let mut pass = true;

    for blk in &a.blocks {
        match blk {
            Block::One(v) => {
                // exact norm e^{vt}: forward bound needs v <= 0, backward needs |v| <= gamma1
                let fwd = *v <= 1e-12;
                let bwd = -*v <= gamma1 + 1e-12;
                for &t in &grid {
                    worst = worst.max((v * t).exp() / 1.0_f64.min(f64::INFINITY));
                    worst = worst.max((-v * t).exp() / (gamma1 * t).exp());
                }
                if !(fwd && bwd) {
                    pass = false;
                }
                block_norms.push(NormUsed::Euclidean);
            }
            Block::Two(m) => {
                let mut euclid_ok = true;
                for &t in &grid {
                    let nf = mat2_spectral_norm(&expm2(m, t));
                    worst = worst.max(nf);
                    if nf > tol {
                        euclid_ok = false;
                    }
                    let nb = mat2_spectral_norm(&expm2(m, -t));
                    let bound = (gamma1 * t).exp();
                    worst = worst.max(nb / bound);
                    if nb > bound * tol {
                        euclid_ok = false;
                    }
                }
                if euclid_ok {
                    block_norms.push(NormUsed::Euclidean);
                } else {
                    match block_energy_metric(m) {
                        Some(tr) => {
                            let mut energy_ok = true;
                            for &t in &grid {
                                // norm of T^{-1} e^{mt} T in the transformed basis
                                let e = expm2(m, t);
                                let w = mat2_mul(&tr.inv, &mat2_mul(&e, &tr.fwd));
                                let nf = mat2_spectral_norm(&w);
                                if nf > tol {
                                    energy_ok = false;
                                }
                                let eb = expm2(m, -t);
                                let wb = mat2_mul(&tr.inv, &mat2_mul(&eb, &tr.fwd));
                                if mat2_spectral_norm(&wb) > (gamma1 * t).exp() * tol {
                                    energy_ok = false;
                                }
                            }
                            if !energy_ok {
                                pass = false;
                            }
                            block_norms.push(NormUsed::BlockEnergy);
                        }
                        None => {
                            pass = false;
                            block_norms.push(NormUsed::BlockEnergy);
                        }
                    }
                }
            }
        }
    }
    H1Verdict {
        pass,
        block_norms,
        worst_ratio: worst,
    }
}

struct BlockTransform {
    fwd: Mat2,
    inv: Mat2,
}

/// Balancing similarity for a 2x2 block: columns span the real Jordan basis,
/// in which the semigroup norm is governed by the eigenvalue real parts.
fn block_energy_metric(m: &Mat2) -> Option<BlockTransform> {
    let half_tr = 0.5 * (m[0][0] + m[1][1]);
    let p = 0.5 * (m[0][0] - m[1][1]);
    let delta = p * p + m[0][1] * m[1][0];
    let scale = mat2_inf_norm(m).max(1e-300);
    if delta < -1e-12 * scale * scale {
        // complex pair: real Jordan basis from Re/Im of an eigenvector
        let q = (-delta).sqrt();
        let (u, v) = if m[0][1].abs() >= m[1][0].abs() && m[0][1] != 0.0 {
            ([m[0][1], half_tr - m[0][0]], [0.0, q])
        } else if m[1][0] != 0.0 {
            ([half_tr - m[1][1], m[1][0]], [q, 0.0])
        } else {
            return None;
        };
        let fwd = [[u[0], v[0]], [u[1], v[1]]];
        let inv = mat2_inverse(&fwd)?;
        Some(BlockTransform { fwd, inv })
    } else if delta > 1e-12 * scale * scale {
        // real distinct eigenvalues: eigenvector basis
        let q = delta.sqrt();
        let l1 = half_tr + q;
        let l2 = half_tr - q;
        let evec = |l: f64| -> [f64; 2] {
            if m[0][1].abs() >= m[1][0].abs() && m[0][1] != 0.0 {
                [m[0][1], l - m[0][0]]
            } else if m[1][0] != 0.0 {
                [l - m[1][1], m[1][0]]
            } else {
                // already diagonal
                if (m[0][0] - l).abs() < (m[1][1] - l).abs() {
                    [1.0, 0.0]
                } else {
                    [0.0, 1.0]
                }
            }
        };
        let u = evec(l1);
        let v = evec(l2);
        let nu = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let nv = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let fwd = [[u[0] / nu, v[0] / nv], [u[1] / nu, v[1] / nv]];
        let inv = mat2_inverse(&fwd)?;
        Some(BlockTransform { fwd, inv })
    } else {
        // defective (or scalar) double eigenvalue `half_tr`; a scaled basis
        // dampens the nilpotent part when half_tr < 0
        let n = [
            [m[0][0] - half_tr, m[0][1]],
            [m[1][0], m[1][1] - half_tr],
        ];
        let nn = mat2_inf_norm(&n);
        if nn <= 1e-14 * scale {
            return Some(BlockTransform {
                fwd: MAT2_ID,
                inv: MAT2_ID,
            });
        }
        if half_tr >= 0.0 {
            return None;
        }
        let delta_scale = (-half_tr).min(1.0) * 0.5;
        // basis in which the nilpotent part has magnitude delta_scale
        let s = delta_scale / nn;
        let fwd = [[1.0, 0.0], [0.0, 1.0 / s]];
        let _ = fwd;
        // use columns (w, n w / delta_scale) for a generic w not in ker n
        let w = if n[0][0].abs() + n[1][0].abs() >= n[0][1].abs() + n[1][1].abs() {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        };
        let nw = mat2_apply(&n, w);
        let col2 = [nw[0] / delta_scale, nw[1] / delta_scale];
        let fwd = [[w[0], col2[0]], [w[1], col2[1]]];
        let inv = mat2_inverse(&fwd)?;
        Some(BlockTransform { fwd, inv })
    }
}

fn check_h2(b: &SpectralOperator, gamma2: f64) -> H2Verdict {
    match b.fast_dissipation_rate() {
        Ok(rate) => H2Verdict {
            pass: rate >= gamma2 - 1e-12,
            realized_rate: rate,
        },
        Err(_) => H2Verdict {
            pass: false,
            realized_rate: f64::NAN,
        },
    }
}

fn check_h3(
    a: &SpectralOperator,
    b: &SpectralOperator,
    f: &Nonlinearity,
    g: &Nonlinearity,
    probes: usize,
    seed: u64,
) -> H3Verdict {
    let nx = a.space.dim;
    let ny = b.space.dim;
    let offs = a.space.block_offsets();
    let layout = &a.space.block_layout;

    let zero_x = vec![0.0; nx];
    let zero_y = vec![0.0; ny];
    let mut out_f = vec![0.0; nx];
    let mut out_g = vec![0.0; ny];
    f.eval(DriftRole::Slow, &zero_x, &zero_y, &offs, layout, &mut out_f);
    g.eval(DriftRole::Fast, &zero_x, &zero_y, &offs, layout, &mut out_g);
    let zero_anchor = out_f.iter().all(|&v| v == 0.0) && out_g.iter().all(|&v| v == 0.0);

    let ratio_f = probe_lipschitz(f, DriftRole::Slow, nx, ny, &offs, layout, probes, seed);
    let ratio_g = probe_lipschitz(g, DriftRole::Fast, nx, ny, &offs, layout, probes, seed ^ 0x9e37);

    let tol = 1.0 + 1e-6;
    H3Verdict {
        pass: zero_anchor
            && ratio_f <= f.declared_lipschitz * tol + f64::EPSILON
            && ratio_g <= g.declared_lipschitz * tol + f64::EPSILON,
        ratio_f,
        ratio_g,
        zero_anchor,
        probes,
    }
}

/// Maximum difference ratio of a drift over random probe pairs, measured in
/// the product norm `||dx|| + ||dy||`.
pub fn probe_lipschitz(
    nl: &Nonlinearity,
    role: DriftRole,
    nx: usize,
    ny: usize,
    slow_offsets: &[usize],
    slow_layout: &[usize],
    pairs: usize,
    seed: u64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let out_dim = match role {
        DriftRole::Slow => nx,
        DriftRole::Fast => ny,
    };
    let mut x1 = vec![0.0; nx];
    let mut y1 = vec![0.0; ny];
    let mut x2 = vec![0.0; nx];
    let mut y2 = vec![0.0; ny];
    let mut o1 = vec![0.0; out_dim];
    let mut o2 = vec![0.0; out_dim];
    let mut worst = 0.0f64;
    for k in 0..pairs {
        for v in x1.iter_mut().chain(y1.iter_mut()) {
            *v = rng.gen_range(-PROBE_RADIUS..PROBE_RADIUS);
        }
        // mix global pairs, short-range pairs, and single-axis pairs near
        // the origin to catch local componentwise slopes
        match k % 3 {
            0 => {
                for v in x2.iter_mut().chain(y2.iter_mut()) {
                    *v = rng.gen_range(-PROBE_RADIUS..PROBE_RADIUS);
                }
            }
            1 => {
                let h = 10f64.powf(rng.gen_range(-6.0..-1.0));
                for (v, w) in x2.iter_mut().zip(&x1) {
                    *v = w + rng.gen_range(-h..h);
                }
                for (v, w) in y2.iter_mut().zip(&y1) {
                    *v = w + rng.gen_range(-h..h);
                }
            }
            _ => {
                let i = rng.gen_range(0..nx + ny);
                let base = rng.gen_range(-0.05..0.05);
                let h = 10f64.powf(rng.gen_range(-6.0..-2.0));
                if i < nx {
                    x1[i] = base;
                } else {
                    y1[i - nx] = base;
                }
                x2.copy_from_slice(&x1);
                y2.copy_from_slice(&y1);
                if i < nx {
                    x2[i] = base + h;
                } else {
                    y2[i - nx] = base + h;
                }
            }
        }
        nl.eval(role, &x1, &y1, slow_offsets, slow_layout, &mut o1);
        nl.eval(role, &x2, &y2, slow_offsets, slow_layout, &mut o2);
        let dx: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dy: f64 = y1
            .iter()
            .zip(&y2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = dx + dy;
        if denom < 1e-14 {
            continue;
        }
        let dout: f64 = o1
            .iter()
            .zip(&o2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(dout / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space1(dim: usize) -> Arc<SpaceSpec> {
        Arc::new(SpaceSpec::diagonal(SpaceName::H1, dim).unwrap())
    }

    #[test]
    fn space_invariants() {
        let s = SpaceSpec::new(SpaceName::H1, vec![2, 1, 2]).unwrap();
        assert_eq!(s.dim, 5);
        assert_eq!(s.block_offsets(), vec![0, 2, 3]);
        assert!(SpaceSpec::new(SpaceName::H1, vec![3]).is_err());
    }

    #[test]
    fn semigroup_identity_at_zero() {
        let sp = space1(3);
        let op = SpectralOperator::diagonal(sp.clone(), vec![-1.0, -2.0, -0.5]).unwrap();
        let v = HVector::new(sp, vec![1.0, -2.0, 3.0]).unwrap();
        let r = semigroup_apply(&op, 0.0, &v).unwrap();
        assert_eq!(r.coeffs, v.coeffs);
    }

    #[test]
    fn semigroup_scalar_decay() {
        let sp = space1(1);
        let op = SpectralOperator::diagonal(sp.clone(), vec![-2.0]).unwrap();
        let v = HVector::new(sp, vec![1.0]).unwrap();
        let r = semigroup_apply(&op, 1.0, &v).unwrap();
        // scalar exponential oracle
        assert!((r.coeffs[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((r.coeffs[0] - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn semigroup_rotation_block() {
        let sp = Arc::new(SpaceSpec::new(SpaceName::H1, vec![2]).unwrap());
        let op =
            SpectralOperator::new(sp.clone(), vec![Block::Two([[0.0, 1.0], [-1.0, 0.0]])]).unwrap();
        let v = HVector::new(sp, vec![1.0, 0.0]).unwrap();
        let r = semigroup_apply(&op, std::f64::consts::FRAC_PI_2, &v).unwrap();
        // rotation-matrix oracle: (cos(pi/2), -sin(pi/2)) = (0, -1)
        assert!(r.coeffs[0].abs() < 1e-15);
        assert!((r.coeffs[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn semigroup_mismatch_errors() {
        let sp = space1(2);
        let other = space1(3);
        let op = SpectralOperator::diagonal(sp, vec![-1.0, -1.0]).unwrap();
        let v = HVector::new(other, vec![0.0; 3]).unwrap();
        assert!(matches!(
            semigroup_apply(&op, 1.0, &v),
            Err(Error::SpaceMismatch { .. })
        ));
        let sp2 = space1(2);
        let v2 = HVector::new(sp2, vec![0.0; 2]).unwrap();
        assert!(matches!(
            semigroup_apply(&op_clone(), f64::NAN, &v2),
            Err(Error::Domain(_))
        ));

        fn op_clone() -> SpectralOperator {
            let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H1, 2).unwrap());
            SpectralOperator::diagonal(sp, vec![-1.0, -1.0]).unwrap()
        }
    }

    #[test]
    fn contraction_constant_examples() {
        // arithmetic on the closed formula
        let m = compute_contraction_constant(0.1, 0.5, 0.0, 2.0, 1.0).unwrap();
        assert!((m - 0.55).abs() < 1e-15);
        let m0 = compute_contraction_constant(0.1, 0.0, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(m0, 0.0);
        let m1 = compute_contraction_constant(0.5, 0.5, 1.0, 2.0, 1.0).unwrap();
        assert!((m1 - 1.0).abs() < 1e-15);
        assert!(compute_contraction_constant(2.0, 0.5, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn epsilon0_examples_and_bisection_oracle() {
        let e0 = compute_epsilon0(0.5, 0.0, 2.0, 1.0).unwrap();
        assert!((e0 - 1.0).abs() < 1e-12);
        let e1 = compute_epsilon0(0.5, 1.0, 2.0, 1.0).unwrap();
        assert!((e1 - 0.5).abs() < 1e-12);
        assert!(compute_epsilon0(0.0, 0.0, 2.0, 1.0).unwrap().is_infinite());
        assert!(compute_epsilon0(0.5, 0.0, 2.0, 1.8).is_err());

        // bisection oracle on M(eps) for a few parameter sets
        for &(l, g1, g2, mu) in &[
            (0.5, 0.0, 2.0, 1.0),
            (0.5, 1.0, 2.0, 1.0),
            (0.7071, 1.0, 2.0, 0.6464),
            (0.25, 0.3, 1.5, 0.9),
        ] {
            let e0 = compute_epsilon0(l, g1, g2, mu).unwrap();
            let mut lo = 0.0;
            let mut hi = if g1 > 0.0 { mu / g1 } else { 1e6 };
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let m = compute_contraction_constant(mid, l, g1, g2, mu);
                let contractive = matches!(m, Ok(v) if v < 1.0);
                if contractive {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!(
                (lo - e0).abs() <= 1e-9 * e0.max(1.0),
                "bisection {lo} vs closed form {e0}"
            );
        }
    }

    #[test]
    fn contraction_monotone_in_eps_and_unit_at_eps0() {
        let (l, g1, g2, mu) = (0.6, 0.8, 2.5, 1.0);
        let e0 = compute_epsilon0(l, g1, g2, mu).unwrap();
        let mut prev = 0.0;
        for i in 1..50 {
            let eps = e0 * (i as f64) / 50.0;
            let m = compute_contraction_constant(eps, l, g1, g2, mu).unwrap();
            assert!(m > prev);
            prev = m;
        }
        let m_end = compute_contraction_constant(e0, l, g1, g2, mu).unwrap();
        assert!((m_end - 1.0).abs() < 1e-9);
    }

    #[test]
    fn phi1_matches_finite_difference() {
        // quadrature oracle: phi1(X) = int_0^1 e^{Xs} ds by fine Riemann sum
        let x: Mat2 = [[0.3, 1.2], [-0.7, -0.9]];
        let n = 200_000;
        let mut acc = [[0.0; 2]; 2];
        for k in 0..n {
            let s = (k as f64 + 0.5) / n as f64;
            let e = expm2(&x, s);
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += e[i][j] / n as f64;
                }
            }
        }
        let p = phi1_2x2(&x);
        for i in 0..2 {
            for j in 0..2 {
                assert!((p[i][j] - acc[i][j]).abs() < 1e-9, "{:?} vs {:?}", p, acc);
            }
        }
        // scalar edge
        assert!((phi1_scalar(0.0) - 1.0).abs() < 1e-15);
        assert!((phi1_scalar(1e-9) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nonlinearity_zero_anchor_and_growth() {
        let sp = SpaceSpec::new(SpaceName::H1, vec![2, 2]).unwrap();
        let offs = sp.block_offsets();
        let f = Nonlinearity::new(NonlinKind::Sine {
            amp: 0.5,
            coupled: true,
        })
        .unwrap();
        assert!((f.declared_lipschitz - 0.5 * std::f64::consts::SQRT_2).abs() < 1e-15);
        let x = vec![0.0; 4];
        let y = vec![0.0; 2];
        let mut out = vec![0.0; 4];
        f.eval(DriftRole::Slow, &x, &y, &offs, &sp.block_layout, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));

        // linear growth bound ||F(x,y)|| <= L (||x|| + ||y||) on probes
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..500 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect();
            f.eval(DriftRole::Slow, &x, &y, &offs, &sp.block_layout, &mut out);
            let bound = f.declared_lipschitz * (norm2(&x) + norm2(&y));
            assert!(norm2(&out) <= bound * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn table_nonlinearity() {
        let t = Nonlinearity::new(NonlinKind::Table {
            xs: vec![-2.0, 0.0, 1.0],
            ys: vec![-1.0, 0.0, 3.0],
        })
        .unwrap();
        assert!((t.declared_lipschitz - 3.0).abs() < 1e-15);
        let mut out = vec![0.0];
        t.eval(DriftRole::Slow, &[0.5], &[], &[0], &[1], &mut out);
        assert!((out[0] - 1.5).abs() < 1e-15);
        // clamped outside the table
        t.eval(DriftRole::Slow, &[10.0], &[], &[0], &[1], &mut out);
        assert!((out[0] - 3.0).abs() < 1e-15);
        assert!(Nonlinearity::new(NonlinKind::Table {
            xs: vec![-1.0, 1.0],
            ys: vec![-1.0, 1.0],
        })
        .is_err());
    }

    fn params_66() -> SystemParams {
        let l = 0.5 * std::f64::consts::SQRT_2;
        SystemParams {
            epsilon: 0.05,
            sigma1: 0.3,
            sigma2: 0.3,
            gamma1: 1.0,
            gamma2: 2.0,
            lipschitz: l,
            mu: SystemParams::default_mu(2.0, l),
            horizon_t: 5.0,
            c_h: 8f64.sqrt(),
            h_lip: 1.0,
        }
    }

    /// Energy-scaled wave blocks: [[0, lambda], [-lambda, -gamma]].
    fn wave_operator(gamma: f64, lambdas: &[f64]) -> SpectralOperator {
        let sp = Arc::new(SpaceSpec::new(SpaceName::H1, vec![2; lambdas.len()]).unwrap());
        let blocks = lambdas
            .iter()
            .map(|&l| Block::Two([[0.0, l], [-l, -gamma]]))
            .collect();
        SpectralOperator::new(sp, blocks).unwrap()
    }

    #[test]
    fn hypotheses_pass_for_thermoelastic_blocks() {
        let a = wave_operator(1.0, &[1.0, 4.0, 9.0]);
        let sp2 = Arc::new(SpaceSpec::diagonal(SpaceName::H2, 3).unwrap());
        let b = SpectralOperator::diagonal(sp2, vec![-2.0, -8.0, -18.0]).unwrap();
        let f = Nonlinearity::new(NonlinKind::Sine {
            amp: 0.5,
            coupled: true,
        })
        .unwrap();
        let g = f.clone();
        let rep = check_hypotheses_with(&a, &b, &f, &g, &params_66(), 2000, 42);
        assert!(rep.pass(), "{rep:?}");
        assert!(rep
            .h1
            .block_norms
            .iter()
            .all(|n| *n == NormUsed::Euclidean));
        assert!((rep.window.epsilon0 - 0.26055).abs() < 1e-3);
    }

    #[test]
    fn h1_energy_norm_for_unscaled_wave_block() {
        // companion-form block transiently exceeds the Euclidean bound
        let sp = Arc::new(SpaceSpec::new(SpaceName::H1, vec![2]).unwrap());
        let a = SpectralOperator::new(sp, vec![Block::Two([[0.0, 1.0], [-4.0, -1.0]])]).unwrap();
        let v = check_h1(&a, 1.0);
        assert!(v.pass, "{v:?}");
        assert_eq!(v.block_norms[0], NormUsed::BlockEnergy);
    }

    #[test]
    fn h2_sign_violation_fails() {
        let a = wave_operator(1.0, &[1.0]);
        let sp2 = Arc::new(SpaceSpec::diagonal(SpaceName::H2, 2).unwrap());
        let b = SpectralOperator::diagonal(sp2, vec![-2.0, 0.5]).unwrap();
        let f = Nonlinearity::zero();
        let rep = check_hypotheses_with(&a, &b, &f, &f.clone(), &params_66(), 500, 1);
        assert!(!rep.h2.pass);
        assert!(!rep.pass());
    }

    #[test]
    fn h3_underdeclared_lipschitz_fails() {
        let a = wave_operator(1.0, &[1.0, 4.0]);
        let sp2 = Arc::new(SpaceSpec::diagonal(SpaceName::H2, 2).unwrap());
        let b = SpectralOperator::diagonal(sp2, vec![-2.0, -8.0]).unwrap();
        // slope-3 sine declared as 0.5
        let f = Nonlinearity::new(NonlinKind::Sine {
            amp: 3.0,
            coupled: false,
        })
        .unwrap()
        .with_declared_lipschitz(0.5);
        let g = Nonlinearity::zero();
        let rep = check_hypotheses_with(&a, &b, &f, &g, &params_66(), 20_000, 9);
        assert!(!rep.h3.pass);
        assert!(
            (rep.h3.ratio_f - 3.0).abs() < 0.1,
            "probe ratio {}",
            rep.h3.ratio_f
        );
    }

    #[test]
    fn params_validation() {
        let mut p = params_66();
        assert!(p.validate().is_ok());
        p.epsilon = 0.3; // above eps0 ~ 0.26
        assert!(p.validate().is_err());
        let mut q = params_66();
        q.gamma2 = 0.4;
        assert!(q.validate().is_err());
    }
}
