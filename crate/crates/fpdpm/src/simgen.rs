//! Data generators for the three benchmark scenarios, the three-atom error
//! models, and the signal-to-noise summary.

use crate::model::CovarianceAtom;
use crate::wavelet::{self, Grid, WaveletFamily};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    /// One nonzero coefficient group at the coarsest level; eight clusters.
    Global,
    /// Independent 27-way clusters at the three coarsest levels.
    Local,
    /// Four circular regions with ±0.5 values; sixteen clusters.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ErrorModel {
    Independent,
    LowRank,
    HighRank,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub grid: Grid,
    pub error_model: ErrorModel,
    pub seed: u64,
    pub family: WaveletFamily,
    pub global_clusters: usize,
    pub local_clusters: usize,
    /// Number of coarse levels carrying signal in the local scenario.
    pub local_levels: usize,
    pub local_mu: [f64; 3],
    pub local_p: [f64; 3],
    pub circle_radius2: f64,
    /// Slab standard deviation of spike-and-slab loadings per scenario.
    pub loading_sd: f64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, grid: Grid) -> ScenarioConfig {
        let loading_sd = match scenario {
            Scenario::Spatial => 0.15,
            _ => 0.5,
        };
        ScenarioConfig {
            scenario,
            n: 300,
            grid,
            error_model: ErrorModel::Independent,
            seed: 0,
            family: WaveletFamily::Haar,
            global_clusters: 8,
            local_clusters: 27,
            local_levels: 3,
            local_mu: [2.0, 0.5, 0.15],
            local_p: [1.0 / 3.0, 0.15, 0.5],
            circle_radius2: 0.025,
            loading_sd,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 2 {
            return Err(SimError::Config("n must be at least 2".into()));
        }
        if self.scenario == Scenario::Local && self.grid.n_levels() < self.local_levels {
            return Err(SimError::Config(format!(
                "local scenario needs {} levels, grid has {}",
                self.local_levels,
                self.grid.n_levels()
            )));
        }
        if self.scenario == Scenario::Spatial && self.grid.ndim() != 2 {
            return Err(SimError::Config("spatial scenario needs a 2-D grid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SnrSummary {
    pub mean_db: f64,
    pub per_unit_db: Vec<f64>,
    /// Units excluded because signal or noise had zero norm.
    pub excluded_units: usize,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub observed: Array2<f64>,
    pub truth: Array2<f64>,
    pub errors: Array2<f64>,
    /// Effective per-level truth labels (1-based): clusters with identical
    /// generating atoms share a label.
    pub labels_mean: Array2<usize>,
    pub labels_cov: Vec<usize>,
    pub cov_atoms: Vec<CovarianceAtom>,
    pub snr: SnrSummary,
    pub grid: Grid,
    pub family: WaveletFamily,
}

impl GeneratedDataset {
    /// Number of distinct truth labels at level j.
    pub fn n_true_clusters(&self, level: usize) -> usize {
        let mut set = std::collections::BTreeSet::new();
        for i in 0..self.labels_mean.nrows() {
            set.insert(self.labels_mean[(i, level)]);
        }
        set.len()
    }

    /// Global truth labels: distinct rows of the per-level label matrix.
    pub fn global_labels(&self) -> Vec<usize> {
        let mut seen: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.labels_mean.nrows());
        for i in 0..self.labels_mean.nrows() {
            let row: Vec<usize> = (0..self.labels_mean.ncols())
                .map(|j| self.labels_mean[(i, j)])
                .collect();
            match seen.iter().position(|r| *r == row) {
                Some(p) => out.push(p + 1),
                None => {
                    seen.push(row);
                    out.push(seen.len());
                }
            }
        }
        out
    }
}

/// Generates a full dataset: truth, errors, labels, and the SNR summary.
pub fn generate(config: &ScenarioConfig) -> Result<GeneratedDataset, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (truth, labels_mean) = match config.scenario {
        Scenario::Global => gen_scenario_global(config, &mut rng)?,
        Scenario::Local => gen_scenario_local(config, &mut rng)?,
        Scenario::Spatial => gen_scenario_spatial(config, &mut rng)?,
    };
    let (errors, labels_cov, cov_atoms) = gen_errors(config, &mut rng);
    let observed = &truth + &errors;
    let snr = snr(&truth, &errors);
    Ok(GeneratedDataset {
        observed,
        truth,
        errors,
        labels_mean,
        labels_cov,
        cov_atoms,
        snr,
        grid: config.grid.clone(),
        family: config.family,
    })
}

/// Relabels cluster ids so that clusters with exactly equal atom values
/// share a label (1-based, order of first appearance).
fn effective_labels(raw: &[usize], atoms: &[Vec<f64>]) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new(); // representative atom index per label
    let mut atom_label = vec![0usize; atoms.len()];
    for (g, atom) in atoms.iter().enumerate() {
        match reps.iter().position(|&r| atoms[r] == *atom) {
            Some(p) => atom_label[g] = p + 1,
            None => {
                reps.push(g);
                atom_label[g] = reps.len();
            }
        }
    }
    raw.iter().map(|&g| atom_label[g]).collect()
}

/// Scenario 1: eight atoms at the coarsest level with entries from the
/// two-component normal mixture; finer levels are zero.
pub fn gen_scenario_global<R: Rng>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<usize>), SimError> {
    let grid = &config.grid;
    let m0 = grid.level_size(0);
    let atoms: Vec<Vec<f64>> = (0..config.global_clusters)
        .map(|_| (0..m0).map(|_| normal_mixture_draw(rng)).collect())
        .collect();
    let raw: Vec<usize> = (0..config.n)
        .map(|_| rng.gen_range(0..config.global_clusters))
        .collect();
    let eff = effective_labels(&raw, &atoms);
    let n_levels = grid.n_levels();
    let mut truth = Array2::<f64>::zeros((config.n, grid.len()));
    for i in 0..config.n {
        let img = wavelet::synthesize_level(0, &atoms[raw[i]], grid, config.family)
            .map_err(|e| SimError::Config(e.to_string()))?;
        for (t, v) in truth.row_mut(i).iter_mut().zip(img.iter()) {
            *t = *v;
        }
    }
    let mut labels = Array2::<usize>::from_elem((config.n, n_levels), 1);
    for i in 0..config.n {
        labels[(i, 0)] = eff[i];
    }
    Ok((truth, labels))
}

/// 0.5 N(2,1) + 0.5 N(−2,1).
fn normal_mixture_draw<R: Rng>(rng: &mut R) -> f64 {
    let center = if rng.gen::<f64>() < 0.5 { 2.0 } else { -2.0 };
    center + rng.sample::<f64, _>(StandardNormal)
}

/// Z ∈ {−1, 0, 1} with P(0) = p and P(±1) = (1−p)/2 each.
pub fn draw_sign_indicator<R: Rng>(p_zero: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    if u < p_zero {
        0.0
    } else if u < p_zero + (1.0 - p_zero) / 2.0 {
        1.0
    } else {
        -1.0
    }
}

/// Scenario 2: independent 27-way clusters at the coarse levels, atoms
/// Z_h · β*_h with β* ~ N(μ_j 1, I) and the stated sparsity indicators.
pub fn gen_scenario_local<R: Rng>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<usize>), SimError> {
    let grid = &config.grid;
    let n_levels = grid.n_levels();
    let mut truth = Array2::<f64>::zeros((config.n, grid.len()));
    let mut labels = Array2::<usize>::from_elem((config.n, n_levels), 1);
    for j in 0..config.local_levels {
        let mj = grid.level_size(j);
        let mu = config.local_mu[j.min(2)];
        let p = config.local_p[j.min(2)];
        let atoms: Vec<Vec<f64>> = (0..config.local_clusters)
            .map(|_| {
                let z = draw_sign_indicator(p, rng);
                (0..mj)
                    .map(|_| z * (mu + rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            })
            .collect();
        let raw: Vec<usize> = (0..config.n)
            .map(|_| rng.gen_range(0..config.local_clusters))
            .collect();
        let eff = effective_labels(&raw, &atoms);
        for i in 0..config.n {
            labels[(i, j)] = eff[i];
            let img = wavelet::synthesize_level(j, &atoms[raw[i]], grid, config.family)
                .map_err(|e| SimError::Config(e.to_string()))?;
            for (t, v) in truth.row_mut(i).iter_mut().zip(img.iter()) {
                *t += *v;
            }
        }
    }
    Ok((truth, labels))
}

/// Pixel-center coordinate of grid point (row, col) on [0,1]².
fn pixel_center(row: usize, col: usize, rows: usize, cols: usize) -> (f64, f64) {
    (
        (row as f64 + 0.5) / rows as f64,
        (col as f64 + 0.5) / cols as f64,
    )
}

pub const CIRCLE_CENTERS: [(f64, f64); 4] =
    [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

/// Boolean masks of the four circular regions.
pub fn circle_masks(grid: &Grid, radius2: f64) -> Vec<Vec<bool>> {
    let rows = grid.dims()[0];
    let cols = grid.dims()[1];
    CIRCLE_CENTERS
        .iter()
        .map(|&(cx, cy)| {
            let mut mask = vec![false; grid.len()];
            for col in 0..cols {
                for row in 0..rows {
                    let (x, y) = pixel_center(row, col, rows, cols);
                    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    // column-major flat order
                    mask[col * rows + row] = d2 < radius2;
                }
            }
            mask
        })
        .collect()
}

/// Scenario 3: per unit, each circle takes the value +0.5 or −0.5; the rest
/// of the image is zero. Sixteen possible patterns.
pub fn gen_scenario_spatial<R: Rng>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<usize>), SimError> {
    let grid = &config.grid;
    let masks = circle_masks(grid, config.circle_radius2);
    let n_levels = grid.n_levels();
    let mut truth = Array2::<f64>::zeros((config.n, grid.len()));
    let mut labels = Array2::<usize>::from_elem((config.n, n_levels), 1);
    for i in 0..config.n {
        let mut pattern = 0usize;
        for (m, mask) in masks.iter().enumerate() {
            let positive = rng.gen::<f64>() < 0.5;
            if positive {
                pattern |= 1 << m;
            }
            let value = if positive { 0.5 } else { -0.5 };
            for (idx, &inside) in mask.iter().enumerate() {
                if inside {
                    truth[(i, idx)] = value;
                }
            }
        }
        for j in 0..n_levels {
            labels[(i, j)] = pattern + 1;
        }
    }
    Ok((truth, labels))
}

/// Three covariance atoms: σ² ∈ {0.001, 0.005, 0.01} and, for correlated
/// models, spike-and-slab loadings with K = 1 or K = 10 columns.
pub fn gen_errors<R: Rng>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> (Array2<f64>, Vec<usize>, Vec<CovarianceAtom>) {
    let l = config.grid.len();
    let k = match config.error_model {
        ErrorModel::Independent => 0,
        ErrorModel::LowRank => 1,
        ErrorModel::HighRank => 10,
    };
    let sigmas = [0.001, 0.005, 0.01];
    let normal = Normal::new(0.0, config.loading_sd).unwrap();
    let atoms: Vec<CovarianceAtom> = sigmas
        .iter()
        .map(|&s2| {
            let lambda = Array2::from_shape_fn((l, k), |_| {
                if rng.gen::<f64>() < 0.5 {
                    normal.sample(rng)
                } else {
                    0.0
                }
            });
            CovarianceAtom {
                lambda,
                sigma2: s2,
                phi: Array2::from_elem((l, k), 1.0),
                delta: vec![1.0; k],
                e: 1.0,
            }
        })
        .collect();
    let labels: Vec<usize> = (0..config.n).map(|_| rng.gen_range(0..3)).collect();
    let mut errors = Array2::<f64>::zeros((config.n, l));
    for i in 0..config.n {
        let atom = &atoms[labels[i]];
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let sd = atom.sigma2.sqrt();
        for idx in 0..l {
            let mut v = rng.sample::<f64, _>(StandardNormal) * sd;
            for (a, zz) in z.iter().enumerate() {
                v += atom.lambda[(idx, a)] * zz;
            }
            errors[(i, idx)] = v;
        }
    }
    (errors, labels.iter().map(|&x| x + 1).collect(), atoms)
}

/// Mean per-unit SNR in decibels: 10 log₁₀(‖θ_i‖²/‖ε_i‖²). Units with a
/// zero-norm signal or noise are excluded from the mean.
pub fn snr(truth: &Array2<f64>, errors: &Array2<f64>) -> SnrSummary {
    let n = truth.nrows();
    let mut per_unit = Vec::with_capacity(n);
    let mut kept = Vec::new();
    let mut excluded = 0usize;
    for i in 0..n {
        let sig: f64 = truth.row(i).iter().map(|x| x * x).sum();
        let noise: f64 = errors.row(i).iter().map(|x| x * x).sum();
        let db = 10.0 * (sig / noise).log10();
        per_unit.push(db);
        if sig > 0.0 && noise > 0.0 {
            kept.push(db);
        } else {
            excluded += 1;
            eprintln!("warning: unit {i} excluded from SNR (zero signal or noise norm)");
        }
    }
    let mean_db = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    SnrSummary {
        mean_db,
        per_unit_db: per_unit,
        excluded_units: excluded,
    }
}
