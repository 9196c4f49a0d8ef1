//! Probability-model types and density evaluations.
//!
//! The observation model for unit i is
//!
//! ```text
//! y_i = Σ_b Ψ_b β_{h_ib, b} + ε_i,    ε_i ~ N(0, Λ_{h_is} Λ_{h_is}ᵀ + σ²_{h_is} I)
//! ```
//!
//! where the coefficient blocks b partition the wavelet coefficient vector
//! (one block per resolution level in the standard layout) and every block
//! and the covariance carry independent Dirichlet-process priors. Coefficient
//! atoms use a Laplace base measure expressed as a normal scale mixture;
//! covariance atoms use a multiplicative-gamma factor model.

use crate::linalg;
use crate::wavelet::{self, Grid, WaveletFamily};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use thiserror::Error;

/// Variance floor for σ² and τ².
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state corruption: {0}")]
    StateCorruption(String),
    #[error("parameter error: {0}")]
    Parameter(String),
}

/// Multiplicative-gamma process parameters for covariance base measures.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct MgpParams {
    pub a1: f64,
    pub a2: f64,
    pub a_e: f64,
    pub b_e: f64,
}

/// Controls for the adaptive factor-count move.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdaptControls {
    pub b0: f64,
    pub b1: f64,
    /// Fraction of sub-threshold entries a column needs to be discarded.
    pub q: f64,
    /// Magnitude threshold for "effectively zero" loadings.
    pub delta_thresh: f64,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Hyperparameters {
    /// DP concentration for every coefficient block.
    pub alpha_level: f64,
    /// DP concentration for the covariance family.
    pub alpha_cov: f64,
    /// Rate of the exponential scale-mixture prior on τ².
    pub omega2: f64,
    pub mgp: MgpParams,
    /// Inverse-gamma (shape, rate) for σ².
    pub sigma_shape: f64,
    pub sigma_rate: f64,
    pub adapt: AdaptControls,
    /// Initial factor count for new covariance atoms.
    pub k_init: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            alpha_level: 1.0,
            alpha_cov: 1.0,
            omega2: 1.0,
            mgp: MgpParams {
                a1: 2.1,
                a2: 3.1,
                a_e: 3.0,
                b_e: 2.0,
            },
            sigma_shape: 2.5,
            sigma_rate: 3.0,
            adapt: AdaptControls {
                b0: 0.1,
                b1: 0.0005,
                q: 1.0,
                delta_thresh: 0.1,
            },
            k_init: 1,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = [
            ("alpha_level", self.alpha_level),
            ("alpha_cov", self.alpha_cov),
            ("omega2", self.omega2),
            ("sigma_shape", self.sigma_shape),
            ("sigma_rate", self.sigma_rate),
            ("mgp.a_e", self.mgp.a_e),
            ("mgp.b_e", self.mgp.b_e),
            ("adapt.b0", self.adapt.b0),
            ("adapt.b1", self.adapt.b1),
            ("adapt.q", self.adapt.q),
            ("adapt.delta_thresh", self.adapt.delta_thresh),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::Parameter(format!("{name} must be positive")));
            }
        }
        if self.mgp.a1 <= 2.0 {
            return Err(ModelError::Parameter("mgp.a1 must exceed 2".into()));
        }
        if self.mgp.a2 <= 3.0 {
            return Err(ModelError::Parameter("mgp.a2 must exceed 3".into()));
        }
        Ok(())
    }
}

/// Shared coefficient value of one mixture component in one block.
#[derive(Clone, Debug)]
pub struct CoefficientAtom {
    /// Index of the coefficient block this atom lives in.
    pub block: usize,
    pub value: Vec<f64>,
    /// Per-entry scale-mixture variances τ².
    pub tau2: Vec<f64>,
}

/// One covariance cluster: low-rank loading matrix plus shrinkage latents.
#[derive(Clone, Debug)]
pub struct CovarianceAtom {
    /// L×K loading matrix.
    pub lambda: Array2<f64>,
    pub sigma2: f64,
    /// Local shrinkage φ, same shape as `lambda`.
    pub phi: Array2<f64>,
    /// Multiplicative increments δ, length K.
    pub delta: Vec<f64>,
    /// Cluster-level shrinkage e.
    pub e: f64,
}

impl CovarianceAtom {
    pub fn k(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    /// Column shrinkage products ξ_r = Π_{m≤r} δ_m.
    pub fn xi(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.delta.len());
        let mut prod = 1.0;
        for &d in &self.delta {
            prod *= d;
            out.push(prod);
        }
        out
    }
}

/// Precomputed factorization for repeated density evaluations against one
/// covariance atom: Cholesky of M = I_K + ΛᵀΛ/σ² and log|Σ|.
#[derive(Clone, Debug)]
pub struct LowRankCache {
    pub chol_m: Option<Array2<f64>>,
    pub logdet_sigma: f64,
    pub sigma2: f64,
}

impl LowRankCache {
    pub fn build(atom: &CovarianceAtom) -> Result<LowRankCache, ModelError> {
        let l = atom.dim();
        let k = atom.k();
        let s2 = atom.sigma2;
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(ModelError::Numeric(format!("sigma2 = {s2}")));
        }
        if k == 0 {
            return Ok(LowRankCache {
                chol_m: None,
                logdet_sigma: l as f64 * s2.ln(),
                sigma2: s2,
            });
        }
        let mut m = Array2::<f64>::eye(k);
        for a in 0..k {
            for b in a..k {
                let mut acc = 0.0;
                for r in 0..l {
                    acc += atom.lambda[(r, a)] * atom.lambda[(r, b)];
                }
                m[(a, b)] += acc / s2;
                if a != b {
                    m[(b, a)] = m[(a, b)];
                }
            }
        }
        let chol = linalg::cholesky(&m)
            .ok_or_else(|| ModelError::Numeric("low-rank system not positive definite".into()))?;
        let logdet_sigma = l as f64 * s2.ln() + linalg::cholesky_logdet(&chol);
        Ok(LowRankCache {
            chol_m: Some(chol),
            logdet_sigma,
            sigma2: s2,
        })
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// log N(residual; 0, ΛΛᵀ + σ²I) via the Woodbury identity, O(K²L + K³).
///
/// Falls back to a dense Cholesky evaluation when K ≥ L/2, where the
/// low-rank route has no advantage.
pub fn lowrank_gaussian_logdensity(
    residual: &[f64],
    atom: &CovarianceAtom,
) -> Result<f64, ModelError> {
    if residual.len() != atom.dim() {
        return Err(ModelError::Parameter(format!(
            "residual length {} != atom dimension {}",
            residual.len(),
            atom.dim()
        )));
    }
    if residual.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::Numeric("non-finite residual".into()));
    }
    if atom.k() * 2 >= atom.dim() && atom.k() > 0 {
        return dense_gaussian_logdensity(residual, atom);
    }
    let cache = LowRankCache::build(atom)?;
    Ok(lowrank_logdensity_cached(residual, atom, &cache))
}

/// Density evaluation given a prebuilt [`LowRankCache`].
pub fn lowrank_logdensity_cached(
    residual: &[f64],
    atom: &CovarianceAtom,
    cache: &LowRankCache,
) -> f64 {
    let l = residual.len();
    let s2 = cache.sigma2;
    let rtr = linalg::sq_norm(residual);
    let quad = match &cache.chol_m {
        None => rtr / s2,
        Some(chol) => {
            let k = atom.k();
            let mut ltr = vec![0.0; k];
            for (a, it) in ltr.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..l {
                    acc += atom.lambda[(r, a)] * residual[r];
                }
                *it = acc;
            }
            let sol = linalg::cholesky_solve(chol, &ltr);
            (rtr - linalg::dot(&ltr, &sol) / s2) / s2
        }
    };
    -0.5 * (l as f64 * LN_2PI + cache.logdet_sigma + quad)
}

fn dense_gaussian_logdensity(residual: &[f64], atom: &CovarianceAtom) -> Result<f64, ModelError> {
    let l = atom.dim();
    let mut sigma = Array2::<f64>::zeros((l, l));
    for r in 0..l {
        for c in 0..l {
            let mut acc = 0.0;
            for a in 0..atom.k() {
                acc += atom.lambda[(r, a)] * atom.lambda[(c, a)];
            }
            sigma[(r, c)] = acc;
        }
        sigma[(r, r)] += atom.sigma2;
    }
    let chol = linalg::cholesky(&sigma)
        .ok_or_else(|| ModelError::Numeric("covariance not positive definite".into()))?;
    let half = linalg::solve_lower(&chol, residual);
    Ok(-0.5 * (l as f64 * LN_2PI + linalg::cholesky_logdet(&chol) + linalg::sq_norm(&half)))
}

/// One Dirichlet-process family: instantiated sticks, atoms, and the
/// per-unit membership/slice variables.
#[derive(Clone, Debug)]
pub struct DpFamily<A> {
    pub nu: Vec<f64>,
    pub weights: Vec<f64>,
    pub atoms: Vec<A>,
    pub memberships: Vec<usize>,
    pub slices: Vec<f64>,
}

impl<A> DpFamily<A> {
    pub fn recompute_weights(&mut self) {
        self.weights = stick_weights(&self.nu);
    }

    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.atoms.len()];
        for &h in &self.memberships {
            counts[h] += 1;
        }
        counts
    }
}

/// w_h = ν_h Π_{e<h} (1−ν_e).
pub fn stick_weights(nu: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(nu.len());
    let mut remaining = 1.0;
    for &v in nu {
        w.push(v * remaining);
        remaining *= 1.0 - v;
    }
    w
}

/// How coefficient blocks map onto wavelet structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayoutKind {
    /// One block per resolution level (scaling fixed at zero).
    PerResolution,
    /// A single block spanning every detail coefficient: one membership
    /// governs all levels jointly.
    Tied,
    /// One block per scalar coefficient, scaling included.
    PerCoefficient,
}

/// A contiguous range of the flat coefficient vector governed by one DP.
#[derive(Clone, Debug)]
pub struct CoeffBlock {
    pub start: usize,
    pub len: usize,
    /// Resolution levels this block covers (empty for a pure scaling block).
    pub levels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CoefficientLayout {
    pub kind: LayoutKind,
    pub blocks: Vec<CoeffBlock>,
}

impl CoefficientLayout {
    pub fn new(kind: LayoutKind, grid: &Grid) -> CoefficientLayout {
        let n_levels = grid.n_levels();
        let blocks = match kind {
            LayoutKind::PerResolution => (0..n_levels)
                .map(|j| CoeffBlock {
                    start: grid.level_offset(j),
                    len: grid.level_size(j),
                    levels: vec![j],
                })
                .collect(),
            LayoutKind::Tied => vec![CoeffBlock {
                start: 1,
                len: grid.len() - 1,
                levels: (0..n_levels).collect(),
            }],
            LayoutKind::PerCoefficient => (0..grid.len())
                .map(|k| CoeffBlock {
                    start: k,
                    len: 1,
                    levels: level_of_flat_index(k, grid).into_iter().collect(),
                })
                .collect(),
        };
        CoefficientLayout { kind, blocks }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Ψ_b v: zero-embeds the block values and applies the inverse transform.
    pub fn synthesize_block(
        &self,
        b: usize,
        values: &[f64],
        grid: &Grid,
        family: WaveletFamily,
    ) -> Result<Vec<f64>, ModelError> {
        let blk = &self.blocks[b];
        if values.len() != blk.len {
            return Err(ModelError::Parameter(format!(
                "block {b} expects {} values, got {}",
                blk.len,
                values.len()
            )));
        }
        let mut flat = vec![0.0; grid.len()];
        flat[blk.start..blk.start + blk.len].copy_from_slice(values);
        wavelet::inverse_flat(&flat, grid, family)
            .map_err(|e| ModelError::Parameter(e.to_string()))
    }
}

fn level_of_flat_index(k: usize, grid: &Grid) -> Option<usize> {
    if k == 0 {
        return None;
    }
    (0..grid.n_levels()).find(|&j| {
        let off = grid.level_offset(j);
        k >= off && k < off + grid.level_size(j)
    })
}

/// Full sampler state: per-block DP families, the covariance family, and
/// per-unit latent factors.
#[derive(Clone, Debug)]
pub struct MixtureState {
    pub blocks: Vec<DpFamily<CoefficientAtom>>,
    pub cov: DpFamily<CovarianceAtom>,
    /// η_i, sized to the unit's covariance atom.
    pub factors: Vec<Vec<f64>>,
}

impl MixtureState {
    pub fn n_units(&self) -> usize {
        self.cov.memberships.len()
    }
}

/// Evaluation context tying a state to its wavelet structure.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub grid: Grid,
    pub family: WaveletFamily,
    pub layout: CoefficientLayout,
}

impl ModelContext {
    pub fn new(grid: Grid, family: WaveletFamily, kind: LayoutKind) -> ModelContext {
        let layout = CoefficientLayout::new(kind, &grid);
        ModelContext {
            grid,
            family,
            layout,
        }
    }

    /// θ_i = Σ_b Ψ_b β_{h_ib}.
    pub fn compose_mean(&self, state: &MixtureState, unit: usize) -> Result<Vec<f64>, ModelError> {
        let mut theta = vec![0.0; self.grid.len()];
        for (b, fam) in state.blocks.iter().enumerate() {
            let h = *fam.memberships.get(unit).ok_or_else(|| {
                ModelError::StateCorruption(format!("unit {unit} missing in block {b}"))
            })?;
            let atom = fam.atoms.get(h).ok_or_else(|| {
                ModelError::StateCorruption(format!(
                    "unit {unit} references atom {h} of block {b}, only {} exist",
                    fam.atoms.len()
                ))
            })?;
            let img = self.layout.synthesize_block(b, &atom.value, &self.grid, self.family)?;
            for (t, v) in theta.iter_mut().zip(&img) {
                *t += v;
            }
        }
        Ok(theta)
    }

    /// Complete-data log likelihood of unit i: the Gaussian kernel times the
    /// slice-set indicators (−∞ when any indicator fails).
    pub fn log_complete_likelihood(
        &self,
        y: &[f64],
        state: &MixtureState,
        unit: usize,
    ) -> Result<f64, ModelError> {
        for fam in &state.blocks {
            if fam.weights[fam.memberships[unit]] <= fam.slices[unit] {
                return Ok(f64::NEG_INFINITY);
            }
        }
        if state.cov.weights[state.cov.memberships[unit]] <= state.cov.slices[unit] {
            return Ok(f64::NEG_INFINITY);
        }
        let theta = self.compose_mean(state, unit)?;
        let residual: Vec<f64> = y.iter().zip(&theta).map(|(a, b)| a - b).collect();
        lowrank_gaussian_logdensity(&residual, &state.cov.atoms[state.cov.memberships[unit]])
    }
}

/// Draws a coefficient atom from its base measure: τ²_k ~ Exp(ω²),
/// β_k | τ²_k ~ N(0, τ²_k).
pub fn draw_coefficient_atom<R: Rng>(
    block: usize,
    len: usize,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> CoefficientAtom {
    let exp = Exp::new(hyper.omega2).expect("omega2 > 0");
    let mut tau2 = Vec::with_capacity(len);
    let mut value = Vec::with_capacity(len);
    for _ in 0..len {
        let t: f64 = exp.sample(rng).max(VAR_FLOOR);
        tau2.push(t);
        value.push(Normal::new(0.0, t.sqrt()).unwrap().sample(rng));
    }
    CoefficientAtom { block, value, tau2 }
}

/// Draws a covariance atom from the multiplicative-gamma base measure with
/// `k` factor columns (k = 0 gives the independent-error atom).
pub fn draw_covariance_atom<R: Rng>(
    l: usize,
    k: usize,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> CovarianceAtom {
    let prec = Gamma::new(hyper.sigma_shape, 1.0 / hyper.sigma_rate)
        .unwrap()
        .sample(rng);
    let sigma2 = (1.0 / prec).max(VAR_FLOOR);
    let e = Gamma::new(hyper.mgp.a_e, 1.0 / hyper.mgp.b_e)
        .unwrap()
        .sample(rng);
    let mut delta = Vec::with_capacity(k);
    for m in 0..k {
        let shape = if m == 0 { hyper.mgp.a1 } else { hyper.mgp.a2 };
        delta.push(Gamma::new(shape, 1.0).unwrap().sample(rng));
    }
    let phi_dist = Gamma::new(1.5, 1.0 / 1.5).unwrap();
    let mut phi = Array2::<f64>::zeros((l, k));
    let mut lambda = Array2::<f64>::zeros((l, k));
    let mut xi = 1.0;
    for r in 0..k {
        xi *= delta[r];
        for row in 0..l {
            let p: f64 = phi_dist.sample(rng);
            phi[(row, r)] = p;
            let var = 1.0 / (p * xi * e);
            lambda[(row, r)] = Normal::new(0.0, var.sqrt()).unwrap().sample(rng);
        }
    }
    CovarianceAtom {
        lambda,
        sigma2,
        phi,
        delta,
        e,
    }
}

/// Retained posterior samples of one chain.
#[derive(Clone, Debug)]
pub struct Trace {
    pub seed: u64,
    pub grid: Grid,
    pub family: WaveletFamily,
    pub layout_kind: LayoutKind,
    pub n_units: usize,
    /// Per-resolution memberships, R × n × (J+1). Block memberships are
    /// expanded onto the levels each block covers.
    pub memberships: Option<Array3<u32>>,
    /// Covariance memberships, R × n.
    pub cov_memberships: Option<Array2<u32>>,
    /// Mean functions θ^{(r)}, one n×L matrix per retained sample.
    pub thetas: Option<Vec<Array2<f64>>>,
    /// Factor counts of the atoms in use, per retained sample.
    pub factor_counts: Option<Vec<Vec<usize>>>,
    /// Wall time of every sweep (not just retained ones), seconds.
    pub sweep_seconds: Vec<f64>,
}

impl Trace {
    pub fn n_retained(&self) -> usize {
        if let Some(m) = &self.memberships {
            m.shape()[0]
        } else if let Some(t) = &self.thetas {
            t.len()
        } else {
            0
        }
    }

    /// Posterior mean functions θ̂ (n × L), averaged over retained samples.
    pub fn posterior_mean(&self) -> Option<Array2<f64>> {
        let thetas = self.thetas.as_ref()?;
        if thetas.is_empty() {
            return None;
        }
        let mut acc = Array2::<f64>::zeros(thetas[0].raw_dim());
        for t in thetas {
            acc += t;
        }
        Some(acc / thetas.len() as f64)
    }
}

/// Observed functional data on a common dyadic grid.
#[derive(Clone, Debug)]
pub struct FunctionalDataset {
    /// n × L matrix of flattened images.
    pub y: Array2<f64>,
    pub grid: Grid,
    pub padding: Option<crate::wavelet::PaddingRecord>,
    /// Per-unit means removed by centering, if any.
    pub unit_means: Option<Vec<f64>>,
}

impl FunctionalDataset {
    pub fn new(y: Array2<f64>, grid: Grid) -> Result<FunctionalDataset, ModelError> {
        if y.ncols() != grid.len() {
            return Err(ModelError::Parameter(format!(
                "data has {} columns, grid has {} points",
                y.ncols(),
                grid.len()
            )));
        }
        Ok(FunctionalDataset {
            y,
            grid,
            padding: None,
            unit_means: None,
        })
    }

    pub fn n_units(&self) -> usize {
        self.y.nrows()
    }

    /// Subtracts each unit's mean in place and records it.
    pub fn center_units(&mut self) {
        let l = self.y.ncols() as f64;
        let mut means = Vec::with_capacity(self.y.nrows());
        for mut row in self.y.rows_mut() {
            let m = row.sum() / l;
            row -= m;
            means.push(m);
        }
        self.unit_means = Some(means);
    }
}
