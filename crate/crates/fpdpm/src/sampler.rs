//! Slice-sampled Gibbs sampler for the product-of-DP mixture model.
//!
//! One sweep runs, in order: slice auxiliaries, stick updates, stick
//! extension, membership updates (with a latent-factor refresh), coefficient
//! atoms, latent factors, loading rows, the adaptive factor-count move,
//! idiosyncratic variances, and the shrinkage hyper-latents. Membership
//! draws evaluate the factor-marginalized likelihood N(y; θ, ΛΛᵀ + σ²I)
//! via the low-rank route, which is what keeps the per-sweep cost linear
//! in L for fixed K.

use crate::kmeans;
use crate::linalg;
use crate::model::{
    draw_coefficient_atom, draw_covariance_atom, stick_weights, AdaptControls, DpFamily,
    FunctionalDataset, Hyperparameters, LayoutKind, LowRankCache, MixtureState, ModelContext,
    ModelError, Trace, VAR_FLOOR,
};
use crate::wavelet::{self, WaveletFamily};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, Gamma, InverseGaussian, StandardNormal};
use std::time::Instant;
use thiserror::Error;

/// Hard number of stick extensions before the concentration parameter is
/// declared pathological.
const MAX_STICK_EXTENSIONS: usize = 1_000_000;

/// Hard cap on the factor count of any covariance atom.
fn factor_cap(l: usize) -> usize {
    l
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("numeric abort at iteration {iteration} in {block}")]
    NumericAbort { iteration: usize, block: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state corruption: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
    pub thinning: usize,
    pub record_memberships: bool,
    pub record_means: bool,
    pub record_factor_counts: bool,
    /// Enables the factor add/drop move. Disabled automatically when the
    /// covariance atoms carry no factors.
    pub adapt_factors: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 2000,
            burn_in_fraction: 0.9,
            seed: 0,
            thinning: 1,
            record_memberships: true,
            record_means: true,
            record_factor_counts: false,
            adapt_factors: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_iter < 1 {
            return Err(SamplerError::Config("n_iter must be >= 1".into()));
        }
        if !(self.burn_in_fraction > 0.0 && self.burn_in_fraction < 1.0) {
            return Err(SamplerError::Config(
                "burn_in_fraction must be in (0, 1)".into(),
            ));
        }
        if self.thinning < 1 {
            return Err(SamplerError::Config("thinning must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        let kept = self.n_iter - self.retained_start();
        (kept + self.thinning - 1) / self.thinning
    }

    pub fn retained_start(&self) -> usize {
        self.n_iter - ((self.n_iter as f64) * (1.0 - self.burn_in_fraction)).floor() as usize
    }
}

/// p(r) = exp(−b0 − b1 r): probability of attempting a factor-count change.
pub fn adapt_probability(iteration: usize, controls: &AdaptControls) -> f64 {
    (-controls.b0 - controls.b1 * iteration as f64).exp()
}

/// Shape of the δ_r full conditional (r is 0-based).
pub fn mgp_delta_shape(r: usize, l: usize, k: usize, hyper: &Hyperparameters) -> f64 {
    if r == 0 {
        hyper.mgp.a1 + (l * k) as f64 / 2.0
    } else {
        hyper.mgp.a2 + (l * (k - r)) as f64 / 2.0
    }
}

/// Draws one index from unnormalized log-probabilities.
fn sample_categorical_log<R: Rng>(logps: &[f64], rng: &mut R) -> usize {
    debug_assert!(!logps.is_empty());
    let m = logps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &lp in logps {
        total += (lp - m).exp();
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &lp) in logps.iter().enumerate() {
        acc += (lp - m).exp();
        if acc >= target {
            return i;
        }
    }
    logps.len() - 1
}

/// Gibbs update of every instantiated stick of one family from its
/// truncated Beta(1, α) full conditional. Returns how many draws hit the
/// numerically inverted a > b case and were clamped.
pub fn gibbs_update_sticks<R: Rng>(
    nu: &mut [f64],
    memberships: &[usize],
    slices: &[f64],
    alpha: f64,
    rng: &mut R,
) -> usize {
    let h_count = nu.len();
    // per-cluster max slice variable
    let mut max_u = vec![0.0f64; h_count];
    for (&h, &u) in memberships.iter().zip(slices) {
        if u > max_u[h] {
            max_u[h] = u;
        }
    }
    let occupied: Vec<bool> = {
        let mut occ = vec![false; h_count];
        for &h in memberships {
            occ[h] = true;
        }
        occ
    };
    let mut clamped = 0;
    for h in 0..h_count {
        let prefix_h: f64 = nu[..h].iter().map(|v| 1.0 - v).product();
        let a = if occupied[h] && prefix_h > 0.0 {
            (max_u[h] / prefix_h).min(1.0)
        } else {
            0.0
        };
        // occupants of later sticks bound ν_h from above
        let mut b = 1.0f64;
        let mut prefix = prefix_h * (1.0 - nu[h]);
        for h2 in h + 1..h_count {
            if occupied[h2] {
                let w2 = nu[h2] * prefix;
                if w2 > 0.0 {
                    // constraint: (1 − ν_h) > u / (w2 / (1 − ν_h)) rearranged
                    let ratio = max_u[h2] * (1.0 - nu[h]) / w2;
                    b = b.min(1.0 - ratio);
                }
            }
            prefix *= 1.0 - nu[h2];
        }
        let new_nu = if a > b {
            clamped += 1;
            a.min(1.0 - 1e-15)
        } else {
            draw_truncated_stick(a, b, alpha, rng)
        };
        nu[h] = new_nu.clamp(1e-300, 1.0 - 1e-15);
    }
    clamped
}

/// Inverse-CDF draw of ν from Beta(1, α) truncated to [a, b]:
/// F(v) ∝ (1−a)^α − (1−v)^α.
pub fn draw_truncated_stick<R: Rng>(a: f64, b: f64, alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let ca = (1.0 - a).powf(alpha);
    let cb = (1.0 - b).powf(alpha);
    let inner = ca - u * (ca - cb);
    1.0 - inner.powf(1.0 / alpha)
}

pub struct GibbsSampler {
    pub hyper: Hyperparameters,
    pub ctx: ModelContext,
    pub state: MixtureState,
    data_rows: Vec<Vec<f64>>,
    /// Synthesized Ψ_b β images, one per (block, atom).
    synth: Vec<Vec<Vec<f64>>>,
    cov_caches: Vec<LowRankCache>,
    theta: Vec<Vec<f64>>,
    /// level → covering block, when unique.
    level_block: Vec<Option<usize>>,
    pub clamp_warnings: u64,
}

impl GibbsSampler {
    /// Builds a sampler with the default warm start: k-means (k = 5) on the
    /// coarsest-level coefficients seeds every block family, the covariance
    /// family starts as one cluster with σ² at the residual variance, Λ from
    /// its prior and η = 0.
    pub fn new<R: Rng>(
        data: &FunctionalDataset,
        hyper: &Hyperparameters,
        layout: LayoutKind,
        family: WaveletFamily,
        rng: &mut R,
    ) -> Result<GibbsSampler, SamplerError> {
        hyper.validate()?;
        let ctx = ModelContext::new(data.grid.clone(), family, layout);
        let n = data.n_units();
        if n == 0 {
            return Err(SamplerError::Config("empty dataset".into()));
        }
        let l = data.grid.len();

        // coefficients of every unit
        let mut coeffs = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = data.y.row(i).iter().copied().collect();
            let c = wavelet::forward_flat(&row, &data.grid, family)
                .map_err(|e| SamplerError::Config(e.to_string()))?;
            coeffs.push(c);
        }

        // warm-start labels from the coarsest resolution level
        let m0 = data.grid.level_size(0);
        let feats = Array2::from_shape_fn((n, m0), |(i, j)| coeffs[i][1 + j]);
        let k = 5.min(n);
        let fit = kmeans::kmeans(&feats, k, 5, rng);
        let labels = fit.labels;
        let counts = {
            let mut c = vec![0usize; k];
            for &lab in &labels {
                c[lab] += 1;
            }
            c
        };

        let mut blocks = Vec::with_capacity(ctx.layout.n_blocks());
        for (b, blk) in ctx.layout.blocks.iter().enumerate() {
            let mut atoms = Vec::with_capacity(k);
            for g in 0..k {
                let mut atom = draw_coefficient_atom(b, blk.len, hyper, rng);
                if counts[g] > 0 {
                    for (e, v) in atom.value.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..n {
                            if labels[i] == g {
                                acc += coeffs[i][blk.start + e];
                            }
                        }
                        *v = acc / counts[g] as f64;
                    }
                }
                atoms.push(atom);
            }
            let nu = occupancy_sticks(&counts, hyper.alpha_level, rng);
            let weights = stick_weights(&nu);
            let slices: Vec<f64> = labels
                .iter()
                .map(|&lab| rng.gen::<f64>() * weights[lab])
                .collect();
            blocks.push(DpFamily {
                nu,
                weights,
                atoms,
                memberships: labels.clone(),
                slices,
            });
        }

        let cov_atom = draw_covariance_atom(l, hyper.k_init, hyper, rng);
        let nu = occupancy_sticks(&[n], hyper.alpha_cov, rng);
        let weights = stick_weights(&nu);
        let slices: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * weights[0]).collect();
        let k_init = hyper.k_init;
        let cov = DpFamily {
            nu,
            weights,
            atoms: vec![cov_atom],
            memberships: vec![0; n],
            slices,
        };

        let factors = vec![vec![0.0; k_init]; n];
        let state = MixtureState {
            blocks,
            cov,
            factors,
        };
        let mut sampler = GibbsSampler::with_state(data, hyper, ctx, state)?;

        // residual variance as the starting σ²
        let mut ssr = 0.0;
        for i in 0..n {
            for (y, t) in sampler.data_rows[i].iter().zip(&sampler.theta[i]) {
                let d = y - t;
                ssr += d * d;
            }
        }
        sampler.state.cov.atoms[0].sigma2 = (ssr / (n * l) as f64).max(VAR_FLOOR);
        sampler.rebuild_cov_caches()?;
        Ok(sampler)
    }

    /// Wraps an externally constructed state (prior draws in calibration
    /// harnesses, handcrafted states in tests).
    pub fn with_state(
        data: &FunctionalDataset,
        hyper: &Hyperparameters,
        ctx: ModelContext,
        state: MixtureState,
    ) -> Result<GibbsSampler, SamplerError> {
        let n = data.n_units();
        let data_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| data.y.row(i).iter().copied().collect())
            .collect();
        let n_levels = data.grid.n_levels();
        let mut level_block = vec![None; n_levels];
        for (b, blk) in ctx.layout.blocks.iter().enumerate() {
            for &j in &blk.levels {
                level_block[j] = match level_block[j] {
                    None => Some(b),
                    Some(_) => None, // ambiguous: more than one block covers j
                };
            }
        }
        // per-coefficient layouts cover each level many times
        if ctx.layout.kind == LayoutKind::PerCoefficient {
            level_block.iter_mut().for_each(|x| *x = None);
        }
        let mut sampler = GibbsSampler {
            hyper: *hyper,
            ctx,
            state,
            data_rows,
            synth: vec![],
            cov_caches: vec![],
            theta: vec![],
            level_block,
            clamp_warnings: 0,
        };
        sampler.rebuild_synth()?;
        sampler.rebuild_cov_caches()?;
        sampler.rebuild_theta()?;
        Ok(sampler)
    }

    pub fn n_units(&self) -> usize {
        self.data_rows.len()
    }

    pub fn theta(&self, unit: usize) -> &[f64] {
        &self.theta[unit]
    }

    /// Replaces the observed data of one unit (used by calibration harnesses
    /// that re-draw data given the current state).
    pub fn set_unit_data(&mut self, unit: usize, row: &[f64]) {
        assert_eq!(row.len(), self.ctx.grid.len());
        self.data_rows[unit].copy_from_slice(row);
    }

    fn rebuild_synth(&mut self) -> Result<(), SamplerError> {
        let mut synth = Vec::with_capacity(self.state.blocks.len());
        for (b, fam) in self.state.blocks.iter().enumerate() {
            let mut per_atom = Vec::with_capacity(fam.atoms.len());
            for atom in &fam.atoms {
                per_atom.push(self.ctx.layout.synthesize_block(
                    b,
                    &atom.value,
                    &self.ctx.grid,
                    self.ctx.family,
                )?);
            }
            synth.push(per_atom);
        }
        self.synth = synth;
        Ok(())
    }

    fn rebuild_cov_caches(&mut self) -> Result<(), SamplerError> {
        let mut caches = Vec::with_capacity(self.state.cov.atoms.len());
        for atom in &self.state.cov.atoms {
            caches.push(LowRankCache::build(atom)?);
        }
        self.cov_caches = caches;
        Ok(())
    }

    fn rebuild_theta(&mut self) -> Result<(), SamplerError> {
        let n = self.n_units();
        let l = self.ctx.grid.len();
        let mut theta = Vec::with_capacity(n);
        let mut flat = vec![0.0; l];
        for i in 0..n {
            flat.iter_mut().for_each(|x| *x = 0.0);
            for (b, fam) in self.state.blocks.iter().enumerate() {
                let blk = &self.ctx.layout.blocks[b];
                let atom = &fam.atoms[fam.memberships[i]];
                flat[blk.start..blk.start + blk.len].copy_from_slice(&atom.value);
            }
            theta.push(
                wavelet::inverse_flat(&flat, &self.ctx.grid, self.ctx.family)
                    .map_err(|e| SamplerError::State(e.to_string()))?,
            );
        }
        self.theta = theta;
        Ok(())
    }

    /// Step 1: u_i ~ U(0, w of the current cluster), per family.
    pub fn step_slice_aux<R: Rng>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        for fam in self.state.blocks.iter_mut() {
            slice_family(&fam.weights, &fam.memberships, &mut fam.slices, rng)?;
        }
        let cov = &mut self.state.cov;
        slice_family(&cov.weights, &cov.memberships, &mut cov.slices, rng)?;
        Ok(())
    }

    /// Step 2: truncated stick updates for every family.
    pub fn step_update_weights<R: Rng>(&mut self, rng: &mut R) {
        for fam in self.state.blocks.iter_mut() {
            self.clamp_warnings += gibbs_update_sticks(
                &mut fam.nu,
                &fam.memberships,
                &fam.slices,
                self.hyper.alpha_level,
                rng,
            ) as u64;
            fam.recompute_weights();
        }
        let cov = &mut self.state.cov;
        self.clamp_warnings += gibbs_update_sticks(
            &mut cov.nu,
            &cov.memberships,
            &cov.slices,
            self.hyper.alpha_cov,
            rng,
        ) as u64;
        cov.recompute_weights();
    }

    /// Instantiates sticks and atoms until every slice set is complete:
    /// cumulative mass must exceed 1 − min_i u_i in each family.
    pub fn extend_sticks<R: Rng>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        let hyper = self.hyper;
        for b in 0..self.state.blocks.len() {
            let len = self.ctx.layout.blocks[b].len;
            let fam = &mut self.state.blocks[b];
            let u_star = fam.slices.iter().copied().fold(f64::INFINITY, f64::min);
            let mut total: f64 = fam.weights.iter().sum();
            let mut remaining: f64 = fam.nu.iter().map(|v| 1.0 - v).product();
            let mut added = 0usize;
            while total <= 1.0 - u_star {
                if added > MAX_STICK_EXTENSIONS {
                    return Err(SamplerError::Config(
                        "stick extension failed to reach the required mass".into(),
                    ));
                }
                let nu = beta1_draw(hyper.alpha_level, rng);
                let w = nu * remaining;
                remaining *= 1.0 - nu;
                total += w;
                fam.nu.push(nu);
                fam.weights.push(w);
                let atom = draw_coefficient_atom(b, len, &hyper, rng);
                self.synth[b].push(self.ctx.layout.synthesize_block(
                    b,
                    &atom.value,
                    &self.ctx.grid,
                    self.ctx.family,
                )?);
                fam.atoms.push(atom);
                added += 1;
            }
        }
        let l = self.ctx.grid.len();
        let cov = &mut self.state.cov;
        let u_star = cov.slices.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total: f64 = cov.weights.iter().sum();
        let mut remaining: f64 = cov.nu.iter().map(|v| 1.0 - v).product();
        let mut added = 0usize;
        while total <= 1.0 - u_star {
            if added > MAX_STICK_EXTENSIONS {
                return Err(SamplerError::Config(
                    "stick extension failed to reach the required mass".into(),
                ));
            }
            let nu = beta1_draw(hyper.alpha_cov, rng);
            let w = nu * remaining;
            remaining *= 1.0 - nu;
            total += w;
            cov.nu.push(nu);
            cov.weights.push(w);
            let atom = draw_covariance_atom(l, hyper.k_init, &hyper, rng);
            self.cov_caches.push(LowRankCache::build(&atom)?);
            cov.atoms.push(atom);
            added += 1;
        }
        Ok(())
    }

    /// Slice-set candidates and their log likelihoods for unit i's block-b
    /// membership: log N(y_i; θ_i^{(−b)} + Ψ_b β_g, Σ_{h_is}) over
    /// {g : w_g > u_ib}.
    pub fn block_membership_choices(
        &self,
        i: usize,
        b: usize,
    ) -> Result<(Vec<usize>, Vec<f64>), SamplerError> {
        let l = self.ctx.grid.len();
        let fam = &self.state.blocks[b];
        let u = fam.slices[i];
        let h_cur = fam.memberships[i];
        let cov_h = self.state.cov.memberships[i];
        let cov_atom = &self.state.cov.atoms[cov_h];
        let cov_cache = &self.cov_caches[cov_h];
        let cur_synth = &self.synth[b][h_cur];
        let mut resid = vec![0.0; l];
        for idx in 0..l {
            resid[idx] = self.data_rows[i][idx] - self.theta[i][idx] + cur_synth[idx];
        }
        let mut cands = Vec::new();
        let mut logps = Vec::new();
        let mut cand_resid = vec![0.0; l];
        for (g, &w) in fam.weights.iter().enumerate() {
            if w <= u {
                continue;
            }
            let sg = &self.synth[b][g];
            for idx in 0..l {
                cand_resid[idx] = resid[idx] - sg[idx];
            }
            logps.push(crate::model::lowrank_logdensity_cached(
                &cand_resid,
                cov_atom,
                cov_cache,
            ));
            cands.push(g);
        }
        if cands.is_empty() {
            return Err(SamplerError::State(format!(
                "empty slice set for unit {i}, block {b}"
            )));
        }
        Ok((cands, logps))
    }

    /// Slice-set candidates and log likelihoods for unit i's covariance
    /// membership: log N(y_i; θ_i, Σ_s) over {s : w_s > u_is}.
    pub fn cov_membership_choices(&self, i: usize) -> Result<(Vec<usize>, Vec<f64>), SamplerError> {
        let l = self.ctx.grid.len();
        let mut resid = vec![0.0; l];
        for idx in 0..l {
            resid[idx] = self.data_rows[i][idx] - self.theta[i][idx];
        }
        let u = self.state.cov.slices[i];
        let mut cands = Vec::new();
        let mut logps = Vec::new();
        for (s, &w) in self.state.cov.weights.iter().enumerate() {
            if w <= u {
                continue;
            }
            logps.push(crate::model::lowrank_logdensity_cached(
                &resid,
                &self.state.cov.atoms[s],
                &self.cov_caches[s],
            ));
            cands.push(s);
        }
        if cands.is_empty() {
            return Err(SamplerError::State(format!(
                "empty covariance slice set for unit {i}"
            )));
        }
        Ok((cands, logps))
    }

    /// Step 3: memberships for every block and the covariance, unit by unit,
    /// from the factor-marginalized likelihood restricted to the slice set.
    /// Each unit's factors are re-drawn from their full conditional right
    /// after its covariance membership moves, which keeps the marginalized
    /// draw exact and the factor dimension consistent.
    pub fn step_update_memberships<R: Rng>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        let n = self.n_units();
        let l = self.ctx.grid.len();
        for i in 0..n {
            for b in 0..self.state.blocks.len() {
                let (cands, logps) = self.block_membership_choices(i, b)?;
                let pick = cands[sample_categorical_log(&logps, rng)];
                let h_cur = self.state.blocks[b].memberships[i];
                if pick != h_cur {
                    self.state.blocks[b].memberships[i] = pick;
                    let old = &self.synth[b][h_cur];
                    let new = &self.synth[b][pick];
                    for ((t, o), nw) in self.theta[i].iter_mut().zip(old).zip(new) {
                        *t += nw - o;
                    }
                }
            }
            let (cands, logps) = self.cov_membership_choices(i)?;
            let pick = cands[sample_categorical_log(&logps, rng)];
            self.state.cov.memberships[i] = pick;
            let mut resid = vec![0.0; l];
            for idx in 0..l {
                resid[idx] = self.data_rows[i][idx] - self.theta[i][idx];
            }
            self.refresh_factor(i, &resid, rng);
        }
        Ok(())
    }

    /// Rebuilds every derived cache from the current state. Intended for
    /// harnesses that mutate atoms or memberships directly.
    pub fn resync_caches(&mut self) -> Result<(), SamplerError> {
        self.rebuild_synth()?;
        self.rebuild_cov_caches()?;
        self.rebuild_theta()
    }

    /// Draws η_i from N((ΛᵀΛ/σ² + I)⁻¹ Λᵀ r/σ², (ΛᵀΛ/σ² + I)⁻¹) given the
    /// residual r = y_i − θ_i.
    fn refresh_factor<R: Rng>(&mut self, i: usize, resid: &[f64], rng: &mut R) {
        let s = self.state.cov.memberships[i];
        let atom = &self.state.cov.atoms[s];
        let k = atom.k();
        if k == 0 {
            self.state.factors[i].clear();
            return;
        }
        let cache = &self.cov_caches[s];
        let chol = cache.chol_m.as_ref().expect("k > 0 implies cached factor");
        let l = atom.dim();
        let mut ltr = vec![0.0; k];
        for (a, it) in ltr.iter_mut().enumerate() {
            let mut acc = 0.0;
            for r in 0..l {
                acc += atom.lambda[(r, a)] * resid[r];
            }
            *it = acc / atom.sigma2;
        }
        let mean = linalg::cholesky_solve(chol, &ltr);
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let noise = linalg::solve_lower_transpose(chol, &z);
        let eta = &mut self.state.factors[i];
        eta.resize(k, 0.0);
        for a in 0..k {
            eta[a] = mean[a] + noise[a];
        }
    }

    /// Step 5 (also used by the post-membership refresh): η_i for all units.
    pub fn step_update_factors<R: Rng>(&mut self, rng: &mut R) {
        let l = self.ctx.grid.len();
        let mut resid = vec![0.0; l];
        for i in 0..self.n_units() {
            for (r, (y, t)) in resid
                .iter_mut()
                .zip(self.data_rows[i].iter().zip(&self.theta[i]))
            {
                *r = y - t;
            }
            self.refresh_factor(i, &resid, rng);
        }
    }

    /// Posterior (mean, precision diagonal) of an occupied coefficient atom;
    /// `None` when the atom has no members.
    pub fn coefficient_posterior(&self, b: usize, g: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let fam = &self.state.blocks[b];
        let blk = &self.ctx.layout.blocks[b];
        let members: Vec<usize> = (0..self.n_units())
            .filter(|&i| fam.memberships[i] == g)
            .collect();
        if members.is_empty() {
            return None;
        }
        let mut prec: Vec<f64> = fam.atoms[g].tau2.iter().map(|t| 1.0 / t).collect();
        let mut lin = vec![0.0; blk.len];
        let l = self.ctx.grid.len();
        let mut resid = vec![0.0; l];
        for &i in &members {
            let s = self.state.cov.memberships[i];
            let sigma2 = self.state.cov.atoms[s].sigma2;
            let lam = &self.state.cov.atoms[s].lambda;
            let eta = &self.state.factors[i];
            for (idx, r) in resid.iter_mut().enumerate() {
                let mut lam_eta = 0.0;
                for a in 0..eta.len() {
                    lam_eta += lam[(idx, a)] * eta[a];
                }
                *r = self.data_rows[i][idx] - self.theta[i][idx] + self.synth[b][g][idx] - lam_eta;
            }
            let coeff = wavelet::forward_flat(&resid, &self.ctx.grid, self.ctx.family)
                .expect("residual has grid length");
            for e in 0..blk.len {
                lin[e] += coeff[blk.start + e] / sigma2;
            }
            for p in prec.iter_mut() {
                *p += 1.0 / sigma2;
            }
        }
        let mean: Vec<f64> = lin.iter().zip(&prec).map(|(b, a)| b / a).collect();
        Some((mean, prec))
    }

    /// Step 4: coefficient atoms. Occupied atoms draw from their conjugate
    /// normal conditional (diagonal precision thanks to orthonormality);
    /// unoccupied atoms refresh β from the base measure given their τ².
    pub fn step_update_coefficients<R: Rng>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        let n = self.n_units();
        let l = self.ctx.grid.len();
        // Λ_{h_is} η_i, fixed during this step
        let mut lam_eta = vec![vec![0.0; l]; n];
        for i in 0..n {
            let s = self.state.cov.memberships[i];
            let lam = &self.state.cov.atoms[s].lambda;
            let eta = &self.state.factors[i];
            for (idx, le) in lam_eta[i].iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..eta.len() {
                    acc += lam[(idx, a)] * eta[a];
                }
                *le = acc;
            }
        }

        let mut resid = vec![0.0; l];
        for b in 0..self.state.blocks.len() {
            let blk_start = self.ctx.layout.blocks[b].start;
            let blk_len = self.ctx.layout.blocks[b].len;
            let n_atoms = self.state.blocks[b].atoms.len();
            // membership lists
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_atoms];
            for i in 0..n {
                members[self.state.blocks[b].memberships[i]].push(i);
            }
            for g in 0..n_atoms {
                if members[g].is_empty() {
                    let fam = &mut self.state.blocks[b];
                    let atom = &mut fam.atoms[g];
                    for (v, t) in atom.value.iter_mut().zip(&atom.tau2) {
                        *v = rng.sample::<f64, _>(StandardNormal) * t.sqrt();
                    }
                } else {
                    let mut prec: Vec<f64> = self.state.blocks[b].atoms[g]
                        .tau2
                        .iter()
                        .map(|t| 1.0 / t)
                        .collect();
                    let mut lin = vec![0.0; blk_len];
                    for &i in &members[g] {
                        let s = self.state.cov.memberships[i];
                        let sigma2 = self.state.cov.atoms[s].sigma2;
                        for (idx, r) in resid.iter_mut().enumerate() {
                            *r = self.data_rows[i][idx] - self.theta[i][idx]
                                + self.synth[b][g][idx]
                                - lam_eta[i][idx];
                        }
                        let coeff =
                            wavelet::forward_flat(&resid, &self.ctx.grid, self.ctx.family)
                                .map_err(|e| SamplerError::State(e.to_string()))?;
                        for e in 0..blk_len {
                            lin[e] += coeff[blk_start + e] / sigma2;
                        }
                        for p in prec.iter_mut() {
                            *p += 1.0 / sigma2;
                        }
                    }
                    let fam = &mut self.state.blocks[b];
                    let atom = &mut fam.atoms[g];
                    for e in 0..blk_len {
                        let sd = (1.0 / prec[e]).sqrt();
                        atom.value[e] = lin[e] / prec[e] + rng.sample::<f64, _>(StandardNormal) * sd;
                    }
                }
                // refresh the synthesized image and member means
                let new_img = self.ctx.layout.synthesize_block(
                    b,
                    &self.state.blocks[b].atoms[g].value,
                    &self.ctx.grid,
                    self.ctx.family,
                )?;
                for &i in &members[g] {
                    for (idx, t) in self.theta[i].iter_mut().enumerate() {
                        *t += new_img[idx] - self.synth[b][g][idx];
                    }
                }
                self.synth[b][g] = new_img;
            }
        }
        Ok(())
    }

    /// Posterior (mean, precision) of one loading row of an occupied atom.
    pub fn loading_posterior(&self, s: usize, row: usize) -> Option<(Vec<f64>, Array2<f64>)> {
        let atom = &self.state.cov.atoms[s];
        let k = atom.k();
        if k == 0 {
            return None;
        }
        let members: Vec<usize> = (0..self.n_units())
            .filter(|&i| self.state.cov.memberships[i] == s)
            .collect();
        if members.is_empty() {
            return None;
        }
        let xi = atom.xi();
        let mut prec = Array2::<f64>::zeros((k, k));
        for a in 0..k {
            prec[(a, a)] = atom.phi[(row, a)] * xi[a] * atom.e;
        }
        let mut lin = vec![0.0; k];
        for &i in &members {
            let eta = &self.state.factors[i];
            let r = self.data_rows[i][row] - self.theta[i][row];
            for a in 0..k {
                lin[a] += eta[a] * r / atom.sigma2;
                for b2 in 0..k {
                    prec[(a, b2)] += eta[a] * eta[b2] / atom.sigma2;
                }
            }
        }
        let chol = linalg::cholesky(&prec)?;
        let mean = linalg::cholesky_solve(&chol, &lin);
        Some((mean, prec))
    }

    /// Step 6: loading rows λ_{sl} from their conjugate conditionals;
    /// unoccupied atoms redraw from the prior given (φ, ξ, e).
    pub fn step_update_loadings<R: Rng>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        let n = self.n_units();
        let l = self.ctx.grid.len();
        let n_atoms = self.state.cov.atoms.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_atoms];
        for i in 0..n {
            members[self.state.cov.memberships[i]].push(i);
        }
        for s in 0..n_atoms {
            let k = self.state.cov.atoms[s].k();
            if k == 0 {
                continue;
            }
            let xi = self.state.cov.atoms[s].xi();
            let e_s = self.state.cov.atoms[s].e;
            if members[s].is_empty() {
                let atom = &mut self.state.cov.atoms[s];
                for row in 0..l {
                    for a in 0..k {
                        let var = 1.0 / (atom.phi[(row, a)] * xi[a] * e_s);
                        atom.lambda[(row, a)] = rng.sample::<f64, _>(StandardNormal) * var.sqrt();
                    }
                }
                continue;
            }
            let sigma2 = self.state.cov.atoms[s].sigma2;
            // F = Σ η ηᵀ / σ², shared across rows
            let mut f = Array2::<f64>::zeros((k, k));
            for &i in &members[s] {
                let eta = &self.state.factors[i];
                for a in 0..k {
                    for b2 in 0..k {
                        f[(a, b2)] += eta[a] * eta[b2] / sigma2;
                    }
                }
            }
            for row in 0..l {
                let mut prec = f.clone();
                for a in 0..k {
                    prec[(a, a)] += self.state.cov.atoms[s].phi[(row, a)] * xi[a] * e_s;
                }
                let mut lin = vec![0.0; k];
                for &i in &members[s] {
                    let eta = &self.state.factors[i];
                    let r = self.data_rows[i][row] - self.theta[i][row];
                    for a in 0..k {
                        lin[a] += eta[a] * r / sigma2;
                    }
                }
                let chol = linalg::cholesky(&prec).ok_or_else(|| {
                    SamplerError::State("loading-row precision not positive definite".into())
                })?;
                let mean = linalg::cholesky_solve(&chol, &lin);
                let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let noise = linalg::solve_lower_transpose(&chol, &z);
                let atom = &mut self.state.cov.atoms[s];
                for a in 0..k {
                    atom.lambda[(row, a)] = mean[a] + noise[a];
                }
            }
        }
        Ok(())
    }

    /// Adaptive factor-count move: with probability p(r), drop columns whose
    /// loadings are essentially zero, or append a fresh column when none are.
    pub fn adapt_factor_count<R: Rng>(&mut self, iteration: usize, rng: &mut R) {
        let p = adapt_probability(iteration, &self.hyper.adapt);
        if rng.gen::<f64>() >= p {
            return;
        }
        let l = self.ctx.grid.len();
        let n = self.n_units();
        let cap = factor_cap(l);
        let q = self.hyper.adapt.q;
        let thresh = self.hyper.adapt.delta_thresh;
        for s in 0..self.state.cov.atoms.len() {
            let k = self.state.cov.atoms[s].k();
            if k == 0 {
                continue;
            }
            let atom = &self.state.cov.atoms[s];
            let mut drop: Vec<usize> = (0..k)
                .filter(|&c| {
                    let small = (0..l).filter(|&r| atom.lambda[(r, c)].abs() < thresh).count();
                    (small as f64 / l as f64) >= q
                })
                .collect();
            if !drop.is_empty() {
                if drop.len() == k {
                    drop.pop(); // keep at least one factor
                }
                if drop.is_empty() {
                    continue;
                }
                let keep: Vec<usize> = (0..k).filter(|c| !drop.contains(c)).collect();
                let atom = &mut self.state.cov.atoms[s];
                let mut lambda = Array2::<f64>::zeros((l, keep.len()));
                let mut phi = Array2::<f64>::zeros((l, keep.len()));
                let mut delta = Vec::with_capacity(keep.len());
                for (new_c, &old_c) in keep.iter().enumerate() {
                    for r in 0..l {
                        lambda[(r, new_c)] = atom.lambda[(r, old_c)];
                        phi[(r, new_c)] = atom.phi[(r, old_c)];
                    }
                    delta.push(atom.delta[old_c]);
                }
                atom.lambda = lambda;
                atom.phi = phi;
                atom.delta = delta;
                for i in 0..n {
                    if self.state.cov.memberships[i] == s {
                        let eta = &self.state.factors[i];
                        self.state.factors[i] = keep.iter().map(|&c| eta[c]).collect();
                    }
                }
            } else if k < cap {
                let atom = &mut self.state.cov.atoms[s];
                let delta_new: f64 = Gamma::new(self.hyper.mgp.a2, 1.0).unwrap().sample(rng);
                atom.delta.push(delta_new);
                let xi_new: f64 = atom.delta.iter().product();
                let phi_dist = Gamma::new(1.5, 1.0 / 1.5).unwrap();
                let mut lambda = Array2::<f64>::zeros((l, k + 1));
                let mut phi = Array2::<f64>::zeros((l, k + 1));
                for r in 0..l {
                    for c in 0..k {
                        lambda[(r, c)] = atom.lambda[(r, c)];
                        phi[(r, c)] = atom.phi[(r, c)];
                    }
                    let p_new: f64 = phi_dist.sample(rng);
                    phi[(r, k)] = p_new;
                    let var = 1.0 / (p_new * xi_new * atom.e);
                    lambda[(r, k)] = rng.sample::<f64, _>(StandardNormal) * var.sqrt();
                }
                atom.lambda = lambda;
                atom.phi = phi;
                for i in 0..n {
                    if self.state.cov.memberships[i] == s {
                        self.state.factors[i].push(rng.sample(StandardNormal));
                    }
                }
            }
        }
    }

    /// Step 7: σ²_s from its inverse-gamma conditional; prior refresh for
    /// unoccupied atoms.
    pub fn step_update_variance<R: Rng>(&mut self, rng: &mut R) {
        let n = self.n_units();
        let l = self.ctx.grid.len();
        let n_atoms = self.state.cov.atoms.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_atoms];
        for i in 0..n {
            members[self.state.cov.memberships[i]].push(i);
        }
        for s in 0..n_atoms {
            let (shape, rate) = if members[s].is_empty() {
                (self.hyper.sigma_shape, self.hyper.sigma_rate)
            } else {
                let atom = &self.state.cov.atoms[s];
                let mut ssr = 0.0;
                for &i in &members[s] {
                    let eta = &self.state.factors[i];
                    for idx in 0..l {
                        let mut lam_eta = 0.0;
                        for a in 0..eta.len() {
                            lam_eta += atom.lambda[(idx, a)] * eta[a];
                        }
                        let r = self.data_rows[i][idx] - self.theta[i][idx] - lam_eta;
                        ssr += r * r;
                    }
                }
                (
                    self.hyper.sigma_shape + (members[s].len() * l) as f64 / 2.0,
                    self.hyper.sigma_rate + ssr / 2.0,
                )
            };
            let prec: f64 = Gamma::new(shape, 1.0 / rate).unwrap().sample(rng);
            self.state.cov.atoms[s].sigma2 = (1.0 / prec).max(VAR_FLOOR);
        }
    }

    /// Step 8: τ² (inverse-Gaussian on the precision scale), φ, δ and e.
    pub fn step_update_hyperlatents<R: Rng>(&mut self, rng: &mut R) {
        let omega2 = self.hyper.omega2;
        for fam in self.state.blocks.iter_mut() {
            for atom in fam.atoms.iter_mut() {
                for (t, &v) in atom.tau2.iter_mut().zip(&atom.value) {
                    *t = draw_tau2(v, omega2, rng);
                }
            }
        }
        let l = self.ctx.grid.len();
        for s in 0..self.state.cov.atoms.len() {
            let k = self.state.cov.atoms[s].k();
            if k == 0 {
                continue;
            }
            // φ | rest
            {
                let atom = &mut self.state.cov.atoms[s];
                let xi = atom.xi();
                for row in 0..l {
                    for a in 0..k {
                        let lam2 = atom.lambda[(row, a)] * atom.lambda[(row, a)];
                        let rate = (3.0 + atom.e * xi[a] * lam2) / 2.0;
                        atom.phi[(row, a)] = Gamma::new(2.0, 1.0 / rate).unwrap().sample(rng);
                    }
                }
            }
            // column sums Σ_l φ_{lh} λ²_{lh}
            let col_sums: Vec<f64> = {
                let atom = &self.state.cov.atoms[s];
                (0..k)
                    .map(|a| {
                        (0..l)
                            .map(|row| {
                                atom.phi[(row, a)] * atom.lambda[(row, a)] * atom.lambda[(row, a)]
                            })
                            .sum()
                    })
                    .collect()
            };
            // δ | rest, sequentially with leave-one-out products
            for r in 0..k {
                let atom = &self.state.cov.atoms[s];
                let shape = mgp_delta_shape(r, l, k, &self.hyper);
                let mut rate = 1.0;
                let mut prod = 1.0;
                for h in 0..k {
                    prod *= atom.delta[h];
                    if h >= r {
                        let xi_loo = prod / atom.delta[r];
                        rate += atom.e * xi_loo * col_sums[h] / 2.0;
                    }
                }
                let draw: f64 = Gamma::new(shape, 1.0 / rate).unwrap().sample(rng);
                self.state.cov.atoms[s].delta[r] = draw;
            }
            // e | rest
            {
                let atom = &mut self.state.cov.atoms[s];
                let xi = atom.xi();
                let shape = self.hyper.mgp.a_e + (l * k) as f64 / 2.0;
                let rate = self.hyper.mgp.b_e
                    + xi.iter().zip(&col_sums).map(|(x, c)| x * c).sum::<f64>() / 2.0;
                atom.e = Gamma::new(shape, 1.0 / rate).unwrap().sample(rng);
            }
        }
    }

    /// Drops unoccupied tail atoms; occupied indices never move.
    pub fn garbage_collect(&mut self) {
        for (b, fam) in self.state.blocks.iter_mut().enumerate() {
            let max_occ = fam.memberships.iter().copied().max().unwrap_or(0);
            fam.nu.truncate(max_occ + 1);
            fam.weights.truncate(max_occ + 1);
            fam.atoms.truncate(max_occ + 1);
            self.synth[b].truncate(max_occ + 1);
        }
        let cov = &mut self.state.cov;
        let max_occ = cov.memberships.iter().copied().max().unwrap_or(0);
        cov.nu.truncate(max_occ + 1);
        cov.weights.truncate(max_occ + 1);
        cov.atoms.truncate(max_occ + 1);
        self.cov_caches.truncate(max_occ + 1);
    }

    /// True when every membership sits inside its slice set.
    pub fn check_slice_validity(&self) -> bool {
        for fam in &self.state.blocks {
            for i in 0..self.n_units() {
                if fam.weights[fam.memberships[i]] <= fam.slices[i] {
                    return false;
                }
            }
        }
        let cov = &self.state.cov;
        (0..self.n_units()).all(|i| cov.weights[cov.memberships[i]] > cov.slices[i])
    }

    fn check_finite(&self, iteration: usize, block: &str) -> Result<(), SamplerError> {
        let bad = |xs: &[f64]| xs.iter().any(|x| !x.is_finite());
        for fam in &self.state.blocks {
            if bad(&fam.nu) || bad(&fam.weights) || bad(&fam.slices) {
                return Err(SamplerError::NumericAbort {
                    iteration,
                    block: block.to_string(),
                });
            }
            for atom in &fam.atoms {
                if bad(&atom.value) || bad(&atom.tau2) {
                    return Err(SamplerError::NumericAbort {
                        iteration,
                        block: block.to_string(),
                    });
                }
            }
        }
        for atom in &self.state.cov.atoms {
            if !atom.sigma2.is_finite()
                || !atom.e.is_finite()
                || bad(&atom.delta)
                || atom.lambda.iter().any(|x| !x.is_finite())
                || atom.phi.iter().any(|x| !x.is_finite())
            {
                return Err(SamplerError::NumericAbort {
                    iteration,
                    block: block.to_string(),
                });
            }
        }
        for eta in &self.state.factors {
            if bad(eta) {
                return Err(SamplerError::NumericAbort {
                    iteration,
                    block: block.to_string(),
                });
            }
        }
        Ok(())
    }

    /// One full sweep in the documented order.
    pub fn sweep<R: Rng>(
        &mut self,
        iteration: usize,
        adapt: bool,
        rng: &mut R,
    ) -> Result<(), SamplerError> {
        self.step_slice_aux(rng)?;
        self.step_update_weights(rng);
        self.extend_sticks(rng)?;
        self.check_finite(iteration, "weights")?;
        self.step_update_memberships(rng)?;
        self.step_update_coefficients(rng)?;
        self.check_finite(iteration, "coefficients")?;
        self.step_update_factors(rng);
        self.step_update_loadings(rng)?;
        if adapt {
            self.adapt_factor_count(iteration, rng);
        }
        self.step_update_variance(rng);
        self.rebuild_cov_caches()?;
        self.step_update_hyperlatents(rng);
        self.check_finite(iteration, "covariance")?;
        self.garbage_collect();
        if self.theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SamplerError::NumericAbort {
                iteration,
                block: "means".to_string(),
            });
        }
        Ok(())
    }

    /// Expands block memberships onto resolution levels, when well defined.
    pub fn level_memberships(&self, unit: usize) -> Option<Vec<u32>> {
        let mut out = vec![0u32; self.ctx.grid.n_levels()];
        for (j, lb) in self.level_block.iter().enumerate() {
            match lb {
                Some(b) => out[j] = self.state.blocks[*b].memberships[unit] as u32,
                None => return None,
            }
        }
        Some(out)
    }
}

fn slice_family<R: Rng>(
    weights: &[f64],
    memberships: &[usize],
    slices: &mut [f64],
    rng: &mut R,
) -> Result<(), SamplerError> {
    for (u, &h) in slices.iter_mut().zip(memberships) {
        let w = weights[h];
        if !(w > 0.0) {
            return Err(SamplerError::State(format!(
                "occupied cluster {h} has zero weight"
            )));
        }
        *u = rng.gen::<f64>() * w;
    }
    Ok(())
}

fn beta1_draw<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    Beta::new(1.0, alpha)
        .expect("alpha > 0")
        .sample(rng)
        .clamp(1e-300, 1.0 - 1e-15)
}

/// 1/τ² ~ InverseGaussian(√(2ω²/β²), 2ω²), inverted; prior refresh at β = 0.
fn draw_tau2<R: Rng>(beta: f64, omega2: f64, rng: &mut R) -> f64 {
    let b2 = beta * beta;
    if b2 < 1e-280 {
        let t: f64 = Exp::new(omega2).unwrap().sample(rng);
        return t.max(VAR_FLOOR);
    }
    let mean = (2.0 * omega2 / b2).sqrt();
    let shape = 2.0 * omega2;
    let x: f64 = InverseGaussian::new(mean, shape).unwrap().sample(rng);
    (1.0 / x.max(1e-300)).max(VAR_FLOOR)
}

fn occupancy_sticks<R: Rng>(counts: &[usize], alpha: f64, rng: &mut R) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let mut later = total;
    let mut nu = Vec::with_capacity(counts.len());
    for &c in counts {
        later -= c;
        let draw = Beta::new(1.0 + c as f64, alpha + later as f64)
            .expect("valid beta")
            .sample(rng);
        nu.push(draw.clamp(1e-12, 1.0 - 1e-12));
    }
    nu
}

/// Runs one fully seeded chain and records the requested trace fields.
pub fn run_chain(
    data: &FunctionalDataset,
    hyper: &Hyperparameters,
    layout: LayoutKind,
    family: WaveletFamily,
    config: &ChainConfig,
) -> Result<Trace, SamplerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = GibbsSampler::new(data, hyper, layout, family, &mut rng)?;
    run_chain_with(&mut sampler, config, &mut rng)
}

/// Chain driver over an existing sampler (shared by baselines and tests).
pub fn run_chain_with<R: Rng>(
    sampler: &mut GibbsSampler,
    config: &ChainConfig,
    rng: &mut R,
) -> Result<Trace, SamplerError> {
    config.validate()?;
    let n = sampler.n_units();
    let l = sampler.ctx.grid.len();
    let n_levels = sampler.ctx.grid.n_levels();
    let start = config.retained_start();
    let adapt = config.adapt_factors && sampler.hyper.k_init > 0;

    let record_levels =
        config.record_memberships && sampler.ctx.layout.kind != LayoutKind::PerCoefficient;
    let mut mem_buf: Vec<u32> = Vec::new();
    let mut cov_buf: Vec<u32> = Vec::new();
    let mut thetas: Vec<Array2<f64>> = Vec::new();
    let mut factor_counts: Vec<Vec<usize>> = Vec::new();
    let mut sweep_seconds = Vec::with_capacity(config.n_iter);
    let mut retained = 0usize;

    for iter in 0..config.n_iter {
        let t0 = Instant::now();
        sampler.sweep(iter, adapt, rng)?;
        sweep_seconds.push(t0.elapsed().as_secs_f64());
        if iter >= start && (iter - start) % config.thinning == 0 {
            retained += 1;
            if record_levels {
                for i in 0..n {
                    let levels = sampler
                        .level_memberships(i)
                        .expect("layout maps levels to blocks");
                    mem_buf.extend_from_slice(&levels);
                }
                cov_buf.extend(sampler.state.cov.memberships.iter().map(|&h| h as u32));
            }
            if config.record_means {
                let mut th = Array2::<f64>::zeros((n, l));
                for i in 0..n {
                    for (j, &v) in sampler.theta(i).iter().enumerate() {
                        th[(i, j)] = v;
                    }
                }
                thetas.push(th);
            }
            if config.record_factor_counts {
                factor_counts.push(sampler.state.cov.atoms.iter().map(|a| a.k()).collect());
            }
        }
    }

    Ok(Trace {
        seed: config.seed,
        grid: sampler.ctx.grid.clone(),
        family: sampler.ctx.family,
        layout_kind: sampler.ctx.layout.kind,
        n_units: n,
        memberships: if record_levels {
            Some(
                Array3::from_shape_vec((retained, n, n_levels), mem_buf)
                    .expect("membership buffer shape"),
            )
        } else {
            None
        },
        cov_memberships: if record_levels {
            Some(Array2::from_shape_vec((retained, n), cov_buf).expect("cov buffer shape"))
        } else {
            None
        },
        thetas: if config.record_means { Some(thetas) } else { None },
        factor_counts: if config.record_factor_counts {
            Some(factor_counts)
        } else {
            None
        },
        sweep_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lowrank_gaussian_logdensity, CoefficientAtom, CovarianceAtom};
    use crate::stats;
    use ndarray::Array2;

    fn diag_cov_atom(l: usize, sigma2: f64) -> CovarianceAtom {
        CovarianceAtom {
            lambda: Array2::zeros((l, 0)),
            sigma2,
            phi: Array2::zeros((l, 0)),
            delta: vec![],
            e: 1.0,
        }
    }

    /// Line-grid sampler with handcrafted атoms: block 0 holds `atoms0`
    /// scalar values, block 1 a single zero atom, covariance one diagonal
    /// atom with the given σ².
    fn toy_sampler(y_rows: Vec<Vec<f64>>, atoms0: &[f64], sigma2: f64) -> GibbsSampler {
        let n = y_rows.len();
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let y = Array2::from_shape_fn((n, 4), |(i, j)| y_rows[i][j]);
        let data = FunctionalDataset::new(y, grid.clone()).unwrap();
        let hyper = Hyperparameters {
            k_init: 0,
            ..Default::default()
        };
        let ctx = ModelContext::new(grid, WaveletFamily::Haar, LayoutKind::PerResolution);
        let n0 = atoms0.len();
        let block0 = DpFamily {
            nu: vec![0.3; n0],
            weights: stick_weights(&vec![0.3; n0]),
            atoms: atoms0
                .iter()
                .map(|&v| CoefficientAtom {
                    block: 0,
                    value: vec![v],
                    tau2: vec![1.0],
                })
                .collect(),
            memberships: vec![0; n],
            slices: vec![1e-6; n],
        };
        let block1 = DpFamily {
            nu: vec![0.9],
            weights: stick_weights(&[0.9]),
            atoms: vec![CoefficientAtom {
                block: 1,
                value: vec![0.0, 0.0],
                tau2: vec![1.0, 1.0],
            }],
            memberships: vec![0; n],
            slices: vec![1e-6; n],
        };
        let cov = DpFamily {
            nu: vec![0.9],
            weights: stick_weights(&[0.9]),
            atoms: vec![diag_cov_atom(4, sigma2)],
            memberships: vec![0; n],
            slices: vec![1e-6; n],
        };
        let state = MixtureState {
            blocks: vec![block0, block1],
            cov,
            factors: vec![vec![]; n],
        };
        GibbsSampler::with_state(&data, &hyper, ctx, state).unwrap()
    }

    #[test]
    fn slice_aux_uniform_on_unit_weight() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[1.0], 1.0);
        // force a degenerate single cluster with weight一 1
        s.state.blocks[0].nu = vec![1.0 - 1e-15];
        s.state.blocks[0].recompute_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            s.step_slice_aux(&mut rng).unwrap();
            draws.push(s.state.blocks[0].slices[0]);
            assert!(s.check_slice_validity());
        }
        assert!(stats::ks_test(&draws, |x| x.clamp(0.0, 1.0)) > 0.01);
    }

    #[test]
    fn slice_ratio_is_uniform() {
        let mut s = toy_sampler(vec![vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]], &[1.0, -1.0], 1.0);
        s.state.blocks[0].memberships = vec![0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ratios = Vec::new();
        for _ in 0..5_000 {
            s.step_slice_aux(&mut rng).unwrap();
            for i in 0..2 {
                let h = s.state.blocks[0].memberships[i];
                ratios.push(s.state.blocks[0].slices[i] / s.state.blocks[0].weights[h]);
            }
        }
        assert!(stats::ks_test(&ratios, |x| x.clamp(0.0, 1.0)) > 0.01);
    }

    #[test]
    fn untruncated_stick_is_beta_1_alpha() {
        let alpha = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut nu = vec![0.5];
            gibbs_update_sticks(&mut nu, &[], &[], alpha, &mut rng);
            sum += nu[0];
        }
        let mean = sum / n as f64;
        let expect = 1.0 / (1.0 + alpha);
        // Beta(1,α) variance = α / ((1+α)²(2+α))
        let se = (alpha / ((1.0 + alpha).powi(2) * (2.0 + alpha)) / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "mean {mean} vs {expect} ± {se}"
        );
    }

    #[test]
    fn alpha_one_truncated_stick_is_uniform() {
        let (a, b) = (0.25, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| draw_truncated_stick(a, b, 1.0, &mut rng))
            .collect();
        assert!(draws.iter().all(|&v| v >= a && v <= b));
        assert!(stats::ks_test(&draws, |x| ((x - a) / (b - a)).clamp(0.0, 1.0)) > 0.01);
    }

    #[test]
    fn truncated_stick_matches_analytic_cdf() {
        let (a, b, alpha) = (0.2, 0.7, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| draw_truncated_stick(a, b, alpha, &mut rng))
            .collect();
        let ca = (1.0_f64 - a).powf(alpha);
        let cb = (1.0_f64 - b).powf(alpha);
        let cdf = |v: f64| ((ca - (1.0 - v).powf(alpha)) / (ca - cb)).clamp(0.0, 1.0);
        assert!(stats::ks_test(&draws, cdf) > 0.01);
    }

    #[test]
    fn stick_update_respects_occupancy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let memberships = vec![0, 1, 1, 2];
        for _ in 0..500 {
            let mut nu = vec![0.4, 0.5, 0.6];
            let slices = vec![0.05, 0.1, 0.02, 0.01];
            gibbs_update_sticks(&mut nu, &memberships, &slices, 1.0, &mut rng);
            let w = stick_weights(&nu);
            for (i, &h) in memberships.iter().enumerate() {
                assert!(w[h] > slices[i], "unit {i} slice violated: w={} u={}", w[h], slices[i]);
            }
        }
    }

    #[test]
    fn extend_noop_when_mass_sufficient() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[1.0], 1.0);
        s.state.blocks[0].nu = vec![0.6];
        s.state.blocks[0].recompute_weights();
        s.state.blocks[0].slices = vec![0.5];
        s.synth[0].truncate(1);
        s.state.blocks[0].atoms.truncate(1);
        let before = s.state.blocks[0].atoms.len();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        s.extend_sticks(&mut rng).unwrap();
        assert_eq!(s.state.blocks[0].atoms.len(), before);
    }

    #[test]
    fn extension_count_matches_geometric_argument() {
        let mut counts = Vec::new();
        for seed in 0..100 {
            let mut s = toy_sampler(vec![vec![0.0; 4]], &[1.0], 1.0);
            s.state.blocks[0].nu = vec![0.5];
            s.state.blocks[0].recompute_weights();
            s.state.blocks[0].slices = vec![1e-3];
            s.state.blocks[0].atoms.truncate(1);
            s.synth[0].truncate(1);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            s.extend_sticks(&mut rng).unwrap();
            let added = s.state.blocks[0].atoms.len() - 1;
            counts.push(added);
            // completeness: cumulative mass exceeds 1 − u*
            let total: f64 = s.state.blocks[0].weights.iter().sum();
            assert!(total > 1.0 - 1e-3);
        }
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        assert!(mean >= 3.0 && mean <= 30.0, "mean extension count {mean}");
    }

    #[test]
    fn singleton_slice_set_forces_membership() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[1.0, 2.0], 1.0);
        // weight of atom 1 below the slice: only atom 0 is a candidate
        s.state.blocks[0].nu = vec![0.9, 0.5];
        s.state.blocks[0].recompute_weights();
        s.state.blocks[0].slices = vec![0.2];
        let (cands, _) = s.block_membership_choices(0, 0).unwrap();
        assert_eq!(cands, vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        s.step_update_memberships(&mut rng).unwrap();
        assert_eq!(s.state.blocks[0].memberships[0], 0);
    }

    #[test]
    fn matching_atom_wins_at_small_sigma() {
        // y synthesized from atom value 1.0; competing atom at 2.0 (separation 1)
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let img = crate::wavelet::synthesize_level(0, &[1.0], &grid, WaveletFamily::Haar).unwrap();
        let mut s = toy_sampler(vec![img.to_vec()], &[1.0, 2.0], 1e-4);
        s.state.blocks[0].slices = vec![1e-9];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            s.step_update_memberships(&mut rng).unwrap();
            assert_eq!(s.state.blocks[0].memberships[0], 0);
        }
    }

    #[test]
    fn membership_probabilities_match_enumeration_oracle() {
        let y = vec![0.3, -0.2, 0.9, 0.4];
        let atoms = [0.25, -0.4, 1.3];
        let sigma2 = 0.7;
        let s = toy_sampler(vec![y.clone()], &atoms, sigma2);
        let (cands, logps) = s.block_membership_choices(0, 0).unwrap();
        assert_eq!(cands, vec![0, 1, 2]);
        // hand-built oracle: residual densities under the diagonal model
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let mut oracle = Vec::new();
        for &a in &atoms {
            let th =
                crate::wavelet::synthesize_level(0, &[a], &grid, WaveletFamily::Haar).unwrap();
            let mut lp = 0.0;
            for (yy, tt) in y.iter().zip(th.iter()) {
                let r = yy - tt;
                lp += -0.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + r * r / sigma2);
            }
            oracle.push(lp);
        }
        let norm = |v: &[f64]| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
            v.iter().map(|x| (x - m).exp() / z).collect::<Vec<_>>()
        };
        for (p, q) in norm(&logps).iter().zip(norm(&oracle).iter()) {
            assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        }
    }

    #[test]
    fn unoccupied_coefficient_atom_refreshes_from_prior() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[1.0, 5.0], 1.0);
        // atom 1 unoccupied, τ² = 4: refresh draws β ~ N(0, 4)
        s.state.blocks[0].atoms[1].tau2 = vec![4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            s.step_update_coefficients(&mut rng).unwrap();
            let v = s.state.blocks[0].atoms[1].value[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64;
        assert!(mean.abs() < 3.0 * (4.0f64 / n as f64).sqrt());
        // Var of sample second moment of N(0,4): E[x⁴]−E[x²]² = 3·16−16 = 32
        assert!((var - 4.0).abs() < 3.0 * (32.0f64 / n as f64).sqrt());
    }

    #[test]
    fn coefficient_posterior_conjugate_limit() {
        // one unit, σ² = 1, τ² → ∞, other level zero, Λ = 0:
        // posterior mean equals the unit's level-0 coefficient
        let y = vec![1.2, 0.7, -0.4, 0.55];
        let mut s = toy_sampler(vec![y.clone()], &[0.0], 1.0);
        s.state.blocks[0].atoms[0].tau2 = vec![1e12];
        let (mean, _) = s.coefficient_posterior(0, 0).unwrap();
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let coeff = crate::wavelet::forward_flat(&y, &grid, WaveletFamily::Haar).unwrap();
        assert!((mean[0] - coeff[1]).abs() < 1e-8, "{} vs {}", mean[0], coeff[1]);
    }

    #[test]
    fn tiny_tau2_collapses_draw() {
        let y = vec![1.2, 0.7, -0.4, 0.55];
        let mut s = toy_sampler(vec![y], &[0.5], 1.0);
        s.state.blocks[0].atoms[0].tau2 = vec![1e-10];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            s.step_update_coefficients(&mut rng).unwrap();
            assert!(s.state.blocks[0].atoms[0].value[0].abs() < 1e-4);
        }
    }

    fn factor_sampler(y: Vec<f64>, lambda: Vec<f64>, sigma2: f64) -> GibbsSampler {
        // L = 4 grid, one unit, one cov atom with K = 1
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let data =
            FunctionalDataset::new(Array2::from_shape_fn((1, 4), |(_, j)| y[j]), grid.clone())
                .unwrap();
        let hyper = Hyperparameters {
            k_init: 1,
            ..Default::default()
        };
        let ctx = ModelContext::new(grid, WaveletFamily::Haar, LayoutKind::PerResolution);
        let blocks = ctx
            .layout
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| DpFamily {
                nu: vec![0.9],
                weights: stick_weights(&[0.9]),
                atoms: vec![CoefficientAtom {
                    block: b,
                    value: vec![0.0; blk.len],
                    tau2: vec![1.0; blk.len],
                }],
                memberships: vec![0],
                slices: vec![1e-6],
            })
            .collect();
        let cov = DpFamily {
            nu: vec![0.9],
            weights: stick_weights(&[0.9]),
            atoms: vec![CovarianceAtom {
                lambda: Array2::from_shape_fn((4, 1), |(r, _)| lambda[r]),
                sigma2,
                phi: Array2::from_elem((4, 1), 1.0),
                delta: vec![1.0],
                e: 1.0,
            }],
            memberships: vec![0],
            slices: vec![1e-6],
        };
        let state = MixtureState {
            blocks,
            cov,
            factors: vec![vec![0.0]],
        };
        GibbsSampler::with_state(&data, &hyper, ctx, state).unwrap()
    }

    #[test]
    fn factors_prior_when_lambda_zero() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.0; 4], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            s.step_update_factors(&mut rng);
            let e = s.state.factors[0][0];
            sum += e;
            sumsq += e * e;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0f64 / n as f64).sqrt());
    }

    #[test]
    fn factor_posterior_hand_case() {
        // Λ = (1,0,0,0)ᵀ, σ² = 1, residual (2,0,0,0) → mean 1, variance 1/2
        let s_target = factor_sampler(vec![2.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], 1.0);
        let mut s = s_target;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            s.step_update_factors(&mut rng);
            let e = s.state.factors[0][0];
            sum += e;
            sumsq += e * e;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (0.5f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 0.5).abs() < 0.02, "var {var}");
    }

    #[test]
    fn loading_prior_draw_when_unoccupied() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.0; 4], 1.0);
        // park the unit on a second atom so atom 0 is unoccupied
        s.state.cov.nu = vec![0.45, 0.45];
        s.state.cov.recompute_weights();
        s.state
            .cov
            .atoms
            .push(diag_cov_atom(4, 1.0));
        s.state.cov.memberships[0] = 1;
        s.state.factors[0].clear();
        s.resync_caches().unwrap();
        // prior variance of λ row entries: 1/(φ ξ e) with φ=2, δ=2, e=0.5 → 1/2
        let atom = &mut s.state.cov.atoms[0];
        atom.phi = Array2::from_elem((4, 1), 2.0);
        atom.delta = vec![2.0];
        atom.e = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 50_000;
        let mut sumsq = 0.0;
        for _ in 0..n {
            s.step_update_loadings(&mut rng).unwrap();
            let l0 = s.state.cov.atoms[0].lambda[(0, 0)];
            sumsq += l0 * l0;
        }
        let var = sumsq / n as f64;
        assert!((var - 0.5).abs() < 3.0 * (2.0 * 0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn loading_posterior_scalar_conjugate_oracle() {
        // K = 1, three units on one atom: precision = φξe + Ση²/σ²,
        // mean = precision⁻¹ Σ η (y−θ) / σ² — checked to 1e-10 at row 0.
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let ys = [
            vec![1.0, 0.2, -0.3, 0.4],
            vec![-0.6, 0.9, 0.1, 0.0],
            vec![0.5, -0.5, 0.25, -0.1],
        ];
        let data = FunctionalDataset::new(
            Array2::from_shape_fn((3, 4), |(i, j)| ys[i][j]),
            grid.clone(),
        )
        .unwrap();
        let hyper = Hyperparameters {
            k_init: 1,
            ..Default::default()
        };
        let ctx = ModelContext::new(grid, WaveletFamily::Haar, LayoutKind::PerResolution);
        let blocks = ctx
            .layout
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| DpFamily {
                nu: vec![0.9],
                weights: stick_weights(&[0.9]),
                atoms: vec![CoefficientAtom {
                    block: b,
                    value: vec![0.0; blk.len],
                    tau2: vec![1.0; blk.len],
                }],
                memberships: vec![0; 3],
                slices: vec![1e-6; 3],
            })
            .collect();
        let sigma2 = 0.8;
        let cov = DpFamily {
            nu: vec![0.9],
            weights: stick_weights(&[0.9]),
            atoms: vec![CovarianceAtom {
                lambda: Array2::from_elem((4, 1), 0.3),
                sigma2,
                phi: Array2::from_elem((4, 1), 1.5),
                delta: vec![2.0],
                e: 0.7,
            }],
            memberships: vec![0; 3],
            slices: vec![1e-6; 3],
        };
        let etas = [0.4, -1.2, 0.9];
        let state = MixtureState {
            blocks,
            cov,
            factors: etas.iter().map(|&e| vec![e]).collect(),
        };
        let s = GibbsSampler::with_state(&data, &hyper, ctx, state).unwrap();
        let (mean, prec) = s.loading_posterior(0, 0).unwrap();
        let prior_prec = 1.5 * 2.0 * 0.7;
        let sum_eta2: f64 = etas.iter().map(|e| e * e).sum();
        let expect_prec = prior_prec + sum_eta2 / sigma2;
        // θ = 0 for all units, so y − θ = y at row 0
        let lin: f64 = etas
            .iter()
            .zip(ys.iter())
            .map(|(e, y)| e * y[0] / sigma2)
            .sum();
        assert!((prec[(0, 0)] - expect_prec).abs() < 1e-10);
        assert!((mean[0] - lin / expect_prec).abs() < 1e-10);
    }

    #[test]
    fn huge_phi_shrinks_loadings() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.5; 4], 1.0);
        // unoccupied atom with enormous local shrinkage
        s.state.cov.nu = vec![0.45, 0.45];
        s.state.cov.recompute_weights();
        s.state.cov.atoms.push(diag_cov_atom(4, 1.0));
        s.state.cov.memberships[0] = 1;
        s.state.factors[0].clear();
        s.resync_caches().unwrap();
        s.state.cov.atoms[0].phi = Array2::from_elem((4, 1), 1e8);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            s.step_update_loadings(&mut rng).unwrap();
            assert!(s.state.cov.atoms[0].lambda[(0, 0)].abs() < 1e-3);
        }
    }

    #[test]
    fn variance_prior_refresh_when_unoccupied() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[0.0], 1.0);
        s.state.cov.nu = vec![0.45, 0.45];
        s.state.cov.recompute_weights();
        s.state.cov.atoms.push(diag_cov_atom(4, 1.0));
        s.state.cov.memberships[0] = 1;
        s.resync_caches().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 100_000;
        let mut sum_prec = 0.0;
        for _ in 0..n {
            s.step_update_variance(&mut rng);
            sum_prec += 1.0 / s.state.cov.atoms[0].sigma2;
        }
        let mean = sum_prec / n as f64;
        let h = Hyperparameters::default();
        let expect = h.sigma_shape / h.sigma_rate;
        let se = (h.sigma_shape / (h.sigma_rate * h.sigma_rate) / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} vs {expect}");
    }

    #[test]
    fn variance_zero_residual_posterior() {
        // zero residuals with n_s·L = 10: σ² ~ InvGa(a_s + 5, b_s)
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let _ = grid;
        // build 10 scalar observations via L=4? use n_s * L = 2.5 impossible;
        // instead L=4 grid is fixed; emulate with a dataset whose θ equals y
        // exactly and n_s·L = 2·4 = 8? The spec case uses n_sL = 10; closest
        // attainable here is n_sL = 8, so assert the formula itself instead.
        let ys = vec![vec![0.0; 4], vec![0.0; 4]];
        let mut s = toy_sampler(ys, &[0.0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            s.step_update_variance(&mut rng);
            sum += s.state.cov.atoms[0].sigma2;
        }
        let mean = sum / n as f64;
        let h = Hyperparameters::default();
        // InvGa(a_s + nL/2, b_s) with nL = 8 → mean b_s/(a_s + 3)
        let a_post = h.sigma_shape + 4.0;
        let expect = h.sigma_rate / (a_post - 1.0);
        // Var(InvGa)/n as SE
        let var = h.sigma_rate * h.sigma_rate / ((a_post - 1.0).powi(2) * (a_post - 2.0));
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} vs {expect}");
    }

    #[test]
    fn variance_posterior_concentrates() {
        // fixed zero mean, many observations: σ² near the truth within 10%
        let true_sigma2: f64 = 0.37;
        let n_units = 40;
        let grid = crate::wavelet::Grid::square(16).unwrap(); // L = 256, n·L ≈ 1e4
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let y = Array2::from_shape_fn((n_units, 256), |_| {
            rng.sample::<f64, _>(StandardNormal) * true_sigma2.sqrt()
        });
        let data = FunctionalDataset::new(y, grid.clone()).unwrap();
        let hyper = Hyperparameters {
            k_init: 0,
            ..Default::default()
        };
        let ctx = ModelContext::new(grid, WaveletFamily::Haar, LayoutKind::PerResolution);
        let blocks = ctx
            .layout
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| DpFamily {
                nu: vec![0.9],
                weights: stick_weights(&[0.9]),
                atoms: vec![CoefficientAtom {
                    block: b,
                    value: vec![0.0; blk.len],
                    tau2: vec![1.0; blk.len],
                }],
                memberships: vec![0; n_units],
                slices: vec![1e-6; n_units],
            })
            .collect();
        let cov = DpFamily {
            nu: vec![0.9],
            weights: stick_weights(&[0.9]),
            atoms: vec![diag_cov_atom(256, 1.0)],
            memberships: vec![0; n_units],
            slices: vec![1e-6; n_units],
        };
        let state = MixtureState {
            blocks,
            cov,
            factors: vec![vec![]; n_units],
        };
        let mut s = GibbsSampler::with_state(&data, &hyper, ctx, state).unwrap();
        s.step_update_variance(&mut rng);
        let est = s.state.cov.atoms[0].sigma2;
        assert!(
            (est - true_sigma2).abs() / true_sigma2 < 0.10,
            "σ² = {est} vs {true_sigma2}"
        );
    }

    #[test]
    fn phi_prior_posterior_coincide_at_zero_loading() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.0; 4], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 50_000;
        let mut sum = 0.0;
        for _ in 0..n {
            // zero the loadings so the φ conditional is Ga(2, 3/2)
            s.state.cov.atoms[0].lambda.fill(0.0);
            s.step_update_hyperlatents(&mut rng);
            sum += s.state.cov.atoms[0].phi[(0, 0)];
        }
        let mean = sum / n as f64;
        let se = (2.0f64 / (1.5 * 1.5) / n as f64).sqrt();
        assert!((mean - 4.0 / 3.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn delta_shape_formula() {
        let hyper = Hyperparameters::default();
        assert!((mgp_delta_shape(0, 4, 2, &hyper) - 6.1).abs() < 1e-12);
        assert!((mgp_delta_shape(1, 4, 2, &hyper) - (3.1 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn inverse_gaussian_sampler_matches_analytic_cdf() {
        let (mu, lam) = (0.8, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let dist = InverseGaussian::new(mu, lam).unwrap();
        let draws: Vec<f64> = (0..20_000).map(|_| dist.sample(&mut rng)).collect();
        let p = stats::ks_test(&draws, |x| stats::inverse_gaussian_cdf(x, mu, lam));
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn tau2_conditional_consistent_with_prior() {
        // one-dimensional Gibbs on (β, τ²) with no data must preserve the
        // prior τ² ~ Exp(ω²): alternate β | τ² ~ N(0, τ²) and τ² | β.
        let omega2 = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tau2: f64 = 1.0;
        let n = 200_000;
        let mut kept = Vec::with_capacity(n);
        for _ in 0..n {
            let beta = rng.sample::<f64, _>(StandardNormal) * tau2.sqrt();
            tau2 = draw_tau2(beta, omega2, &mut rng);
            kept.push(tau2);
        }
        let mean = stats::mean(&kept);
        let se = stats::batch_means_se(&kept, 50);
        assert!(
            (mean - 1.0 / omega2).abs() < 4.0 * se,
            "mean {mean} vs {} (se {se})",
            1.0 / omega2
        );
    }

    #[test]
    fn adapt_probability_decays() {
        let controls = Hyperparameters::default().adapt;
        assert!(adapt_probability(100_000, &controls) < 1e-6);
        assert!(adapt_probability(0, &controls) < 1.0);
    }

    #[test]
    fn adapt_drops_zero_column() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.5; 4], 1.0);
        // two columns: one dense, one all below the threshold
        let atom = &mut s.state.cov.atoms[0];
        atom.lambda = Array2::from_shape_fn((4, 2), |(_, c)| if c == 0 { 0.5 } else { 1e-4 });
        atom.phi = Array2::from_elem((4, 2), 1.0);
        atom.delta = vec![1.0, 1.0];
        s.state.factors[0] = vec![0.3, 0.4];
        s.resync_caches().unwrap();
        // force the move: b0 = 0 ⇒ p(0) = 1
        s.hyper.adapt.b0 = 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        s.adapt_factor_count(0, &mut rng);
        assert_eq!(s.state.cov.atoms[0].k(), 1);
        assert_eq!(s.state.cov.atoms[0].delta.len(), 1);
        assert_eq!(s.state.factors[0].len(), 1);
        assert!((s.state.factors[0][0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adapt_appends_column_when_dense() {
        let mut s = factor_sampler(vec![0.0; 4], vec![0.5; 4], 1.0);
        s.hyper.adapt.b0 = 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        s.adapt_factor_count(0, &mut rng);
        let atom = &s.state.cov.atoms[0];
        assert_eq!(atom.k(), 2);
        assert_eq!(atom.delta.len(), 2);
        assert_eq!(atom.phi.ncols(), 2);
        assert_eq!(s.state.factors[0].len(), 2);
    }

    #[test]
    fn adapt_never_drops_below_one() {
        let mut s = factor_sampler(vec![0.0; 4], vec![1e-6; 4], 1.0);
        s.hyper.adapt.b0 = 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        s.adapt_factor_count(0, &mut rng);
        assert_eq!(s.state.cov.atoms[0].k(), 1);
    }

    #[test]
    fn sweeps_preserve_slice_validity_and_occupancy() {
        let grid = crate::wavelet::Grid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let y = Array2::from_shape_fn((8, 16), |_| rng.sample::<f64, _>(StandardNormal));
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters {
            k_init: 1,
            ..Default::default()
        };
        let mut s = GibbsSampler::new(
            &data,
            &hyper,
            LayoutKind::PerResolution,
            WaveletFamily::Haar,
            &mut rng,
        )
        .unwrap();
        for iter in 0..30 {
            s.sweep(iter, true, &mut rng).unwrap();
            assert!(s.check_slice_validity(), "iteration {iter}");
            for fam in &s.state.blocks {
                assert_eq!(fam.occupancy().iter().sum::<usize>(), 8);
            }
            for (i, eta) in s.state.factors.iter().enumerate() {
                let h = s.state.cov.memberships[i];
                assert_eq!(eta.len(), s.state.cov.atoms[h].k());
            }
        }
    }

    #[test]
    fn chain_is_deterministic_given_seed() {
        let grid = crate::wavelet::Grid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let y = Array2::from_shape_fn((6, 16), |_| rng.sample::<f64, _>(StandardNormal));
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters::default();
        let config = ChainConfig {
            n_iter: 40,
            burn_in_fraction: 0.5,
            seed: 99,
            record_factor_counts: true,
            ..Default::default()
        };
        let t1 = run_chain(&data, &hyper, LayoutKind::PerResolution, WaveletFamily::Haar, &config)
            .unwrap();
        let t2 = run_chain(&data, &hyper, LayoutKind::PerResolution, WaveletFamily::Haar, &config)
            .unwrap();
        assert_eq!(t1.memberships, t2.memberships);
        assert_eq!(t1.cov_memberships, t2.cov_memberships);
        assert_eq!(t1.n_retained(), config.n_retained());
        let a = t1.thetas.unwrap();
        let b = t2.thetas.unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tied_layout_reports_identical_level_memberships() {
        let grid = crate::wavelet::Grid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let y = Array2::from_shape_fn((5, 16), |_| rng.sample::<f64, _>(StandardNormal));
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters {
            k_init: 0,
            ..Default::default()
        };
        let config = ChainConfig {
            n_iter: 20,
            burn_in_fraction: 0.5,
            seed: 7,
            ..Default::default()
        };
        let t = run_chain(&data, &hyper, LayoutKind::Tied, WaveletFamily::Haar, &config).unwrap();
        let m = t.memberships.unwrap();
        for r in 0..m.shape()[0] {
            for i in 0..m.shape()[1] {
                for j in 1..m.shape()[2] {
                    assert_eq!(m[(r, i, j)], m[(r, i, 0)]);
                }
            }
        }
    }

    #[test]
    fn per_coefficient_layout_has_l_families() {
        let grid = crate::wavelet::Grid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let y = Array2::from_shape_fn((4, 16), |_| rng.sample::<f64, _>(StandardNormal));
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters {
            k_init: 0,
            ..Default::default()
        };
        let s = GibbsSampler::new(
            &data,
            &hyper,
            LayoutKind::PerCoefficient,
            WaveletFamily::Haar,
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.state.blocks.len(), 16);
    }

    #[test]
    fn zero_weight_occupied_cluster_is_corruption() {
        let mut s = toy_sampler(vec![vec![0.0; 4]], &[0.0], 1.0);
        s.state.blocks[0].weights[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        assert!(s.step_slice_aux(&mut rng).is_err());
    }

    #[test]
    fn woodbury_route_agrees_inside_membership_probabilities() {
        // correlated atom: cached evaluation inside choices equals the
        // public density op
        let mut s = factor_sampler(vec![0.4, -0.2, 0.7, 0.1], vec![0.5, -0.3, 0.2, 0.8], 0.6);
        s.resync_caches().unwrap();
        let (_, logps) = s.cov_membership_choices(0).unwrap();
        let resid: Vec<f64> = (0..4)
            .map(|idx| s.data_rows[0][idx] - s.theta[0][idx])
            .collect();
        let direct = lowrank_gaussian_logdensity(&resid, &s.state.cov.atoms[0]).unwrap();
        assert!((logps[0] - direct).abs() < 1e-10);
    }
}
