//! Global-clustering baselines: the tied-membership DP mixture, PCA plus
//! k-means with silhouette model selection, and a per-coefficient DP used
//! only for wall-clock scaling comparisons.

use crate::kmeans;
use crate::linalg;
use crate::model::{FunctionalDataset, Hyperparameters, LayoutKind, Trace};
use crate::postproc::{self, DistanceMatrix, PostprocError};
use crate::sampler::{run_chain, ChainConfig, SamplerError};
use crate::wavelet::WaveletFamily;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    /// 1-based cluster labels per unit.
    pub memberships: Vec<usize>,
    pub n_clusters: usize,
    pub total_seconds: f64,
    pub per_sweep_seconds: Option<Vec<f64>>,
    pub method: String,
}

/// Joint DP mixture: one membership per unit shared across all resolutions
/// (a single DP over the full detail-coefficient vector), independent errors.
pub fn fit_global_dpm(
    data: &FunctionalDataset,
    hyper: &Hyperparameters,
    config: &ChainConfig,
) -> Result<(BaselineResult, Trace), BaselineError> {
    let start = Instant::now();
    let hyper = Hyperparameters {
        k_init: 0,
        ..*hyper
    };
    let trace = run_chain(data, &hyper, LayoutKind::Tied, WaveletFamily::Haar, config)?;
    let memberships = last_sample_labels(&trace)
        .ok_or_else(|| BaselineError::Parameter("trace recorded no memberships".into()))?;
    let n_clusters = distinct(&memberships);
    Ok((
        BaselineResult {
            memberships,
            n_clusters,
            total_seconds: start.elapsed().as_secs_f64(),
            per_sweep_seconds: Some(trace.sweep_seconds.clone()),
            method: "dpm".into(),
        },
        trace,
    ))
}

/// Per-coefficient DP chains (L membership parameters), independent errors.
/// Exists to measure per-sweep cost scaling, not clustering accuracy.
pub fn fit_lpp_timing_surrogate(
    data: &FunctionalDataset,
    hyper: &Hyperparameters,
    config: &ChainConfig,
) -> Result<(BaselineResult, Trace), BaselineError> {
    let start = Instant::now();
    let hyper = Hyperparameters {
        k_init: 0,
        ..*hyper
    };
    let trace = run_chain(
        data,
        &hyper,
        LayoutKind::PerCoefficient,
        WaveletFamily::Haar,
        config,
    )?;
    let n = data.n_units();
    Ok((
        BaselineResult {
            memberships: vec![1; n],
            n_clusters: 1,
            total_seconds: start.elapsed().as_secs_f64(),
            per_sweep_seconds: Some(trace.sweep_seconds.clone()),
            method: "lpp-timing".into(),
        },
        trace,
    ))
}

fn last_sample_labels(trace: &Trace) -> Option<Vec<usize>> {
    let m = trace.memberships.as_ref()?;
    let r = m.shape()[0].checked_sub(1)?;
    Some((0..m.shape()[1]).map(|i| m[(r, i, 0)] as usize + 1).collect())
}

fn distinct(labels: &[usize]) -> usize {
    let set: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    set.len()
}

/// Principal-component decomposition via the Gram matrix.
#[derive(Clone, Debug)]
pub struct PcaFit {
    /// n × p component scores.
    pub scores: Array2<f64>,
    /// L × p component directions (orthonormal columns).
    pub components: Array2<f64>,
    /// Column means removed before decomposition.
    pub feature_means: Vec<f64>,
    /// Fraction of variance carried by each retained component.
    pub explained: Vec<f64>,
}

/// PCA keeping the smallest component count whose cumulative explained
/// variance reaches `threshold`.
pub fn pca(data: &Array2<f64>, threshold: f64) -> Result<PcaFit, BaselineError> {
    let n = data.nrows();
    let l = data.ncols();
    if n < 2 {
        return Err(BaselineError::Parameter("need at least two units".into()));
    }
    let mut centered = data.clone();
    let mut feature_means = vec![0.0; l];
    for j in 0..l {
        let m = data.column(j).sum() / n as f64;
        feature_means[j] = m;
        for i in 0..n {
            centered[(i, j)] -= m;
        }
    }
    let total_var: f64 = centered.iter().map(|x| x * x).sum();
    if total_var <= 0.0 {
        return Err(BaselineError::Degenerate("data has zero variance".into()));
    }
    let gram = centered.dot(&centered.t());
    let (vals, vecs) = linalg::symmetric_eigen(&gram);
    let tol = 1e-10 * vals[0].max(1.0);
    let rank = vals.iter().filter(|&&v| v > tol).count();
    let mut cum = 0.0;
    let mut keep = 0;
    for r in 0..rank {
        cum += vals[r] / total_var;
        keep = r + 1;
        if cum >= threshold {
            break;
        }
    }
    let mut scores = Array2::<f64>::zeros((n, keep));
    let mut components = Array2::<f64>::zeros((l, keep));
    for r in 0..keep {
        let scale = vals[r].sqrt();
        for i in 0..n {
            scores[(i, r)] = vecs[(i, r)] * scale;
        }
        // v_r = Xᵀ u_r / √λ_r
        for j in 0..l {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centered[(i, j)] * vecs[(i, r)];
            }
            components[(j, r)] = acc / scale;
        }
    }
    let explained = (0..keep).map(|r| vals[r] / total_var).collect();
    Ok(PcaFit {
        scores,
        components,
        feature_means,
        explained,
    })
}

impl PcaFit {
    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    /// scores · componentsᵀ + means.
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut rec = self.scores.dot(&self.components.t());
        for j in 0..rec.ncols() {
            for i in 0..rec.nrows() {
                rec[(i, j)] += self.feature_means[j];
            }
        }
        rec
    }
}

/// Normalized Euclidean distance matrix of row vectors (max distance 1).
pub fn distance_matrix_from_points(points: &Array2<f64>) -> Result<DistanceMatrix, BaselineError> {
    let n = points.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    let mut maxd = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for c in 0..points.ncols() {
                let diff = points[(i, c)] - points[(j, c)];
                acc += diff * diff;
            }
            let v = acc.sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
            maxd = maxd.max(v);
        }
    }
    if maxd <= 0.0 {
        return Err(BaselineError::Degenerate("all points coincide".into()));
    }
    d /= maxd;
    Ok(DistanceMatrix::new(d).map_err(BaselineError::Postproc)?)
}

/// PCA (≥ `variance_threshold` explained) followed by k-means with 20
/// restarts per k; the k in `k_range` with the highest average silhouette
/// width wins. Deterministic given the seed.
pub fn fit_pca_kmeans(
    data: &Array2<f64>,
    variance_threshold: f64,
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<(BaselineResult, PcaFit), BaselineError> {
    let start = Instant::now();
    let n = data.nrows();
    if n < 3 {
        return Err(BaselineError::Parameter("need at least three units".into()));
    }
    if *k_range.start() < 2 || *k_range.end() > n - 1 {
        return Err(BaselineError::Parameter(format!(
            "k range {:?} outside [2, {}]",
            k_range,
            n - 1
        )));
    }
    let fit = pca(data, variance_threshold)?;
    let dm = distance_matrix_from_points(&fit.scores)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    for k in k_range {
        let km = kmeans::kmeans(&fit.scores, k, 20, &mut rng);
        let labels: Vec<usize> = km.labels.iter().map(|&c| c + 1).collect();
        if distinct(&labels) < 2 {
            continue;
        }
        let sil = postproc::silhouette_width(&dm, &labels)?;
        if best.as_ref().map_or(true, |(s, _, _)| sil > *s) {
            best = Some((sil, labels, k));
        }
    }
    let (_, memberships, _) =
        best.ok_or_else(|| BaselineError::Degenerate("no k produced two clusters".into()))?;
    let n_clusters = distinct(&memberships);
    Ok((
        BaselineResult {
            memberships,
            n_clusters,
            total_seconds: start.elapsed().as_secs_f64(),
            per_sweep_seconds: None,
            method: "pca-km".into(),
        },
        fit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::adjusted_rand_index;
    use rand::Rng;

    fn two_clouds(n_per: usize, sep: f64, noise: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * n_per;
        let d = 6;
        let mut x = Array2::<f64>::zeros((n, d));
        let mut truth = vec![0usize; n];
        for i in 0..n {
            let c = if i < n_per { 0.0 } else { sep };
            truth[i] = if i < n_per { 1 } else { 2 };
            for j in 0..d {
                x[(i, j)] = c + noise * rng.gen_range(-1.0..1.0);
            }
        }
        (x, truth)
    }

    #[test]
    fn pca_kmeans_separable_instance() {
        let (x, truth) = two_clouds(12, 10.0, 1.0, 1);
        let (res, _) = fit_pca_kmeans(&x, 0.95, 2..=6, 3).unwrap();
        assert_eq!(res.n_clusters, 2);
        let ari = adjusted_rand_index(&res.memberships, &truth).unwrap();
        assert!((ari - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_data_keeps_one_component() {
        let n = 10;
        let mut x = Array2::<f64>::zeros((n, 5));
        for i in 0..n {
            for j in 0..5 {
                x[(i, j)] = (i as f64 - 4.5) * (j as f64 + 1.0);
            }
        }
        let fit = pca(&x, 0.95).unwrap();
        assert_eq!(fit.n_components(), 1);
    }

    #[test]
    fn silhouette_prefers_true_k() {
        let (x, _) = two_clouds(10, 10.0, 1.0, 2);
        let fit = pca(&x, 0.99).unwrap();
        let dm = distance_matrix_from_points(&fit.scores).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let km2 = kmeans::kmeans(&fit.scores, 2, 20, &mut rng);
        let km3 = kmeans::kmeans(&fit.scores, 3, 20, &mut rng);
        let l2: Vec<usize> = km2.labels.iter().map(|&c| c + 1).collect();
        let l3: Vec<usize> = km3.labels.iter().map(|&c| c + 1).collect();
        let s2 = postproc::silhouette_width(&dm, &l2).unwrap();
        let s3 = postproc::silhouette_width(&dm, &l3).unwrap();
        assert!(s2 > s3, "sil(k=2) = {s2} <= sil(k=3) = {s3}");
    }

    #[test]
    fn pca_full_reconstruction_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((8, 12), |_| rng.gen_range(-2.0..2.0));
        let fit = pca(&x, 1.0).unwrap();
        let rec = fit.reconstruct();
        let err = x
            .iter()
            .zip(rec.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn zero_variance_rejected() {
        let x = Array2::<f64>::zeros((5, 4));
        assert!(matches!(pca(&x, 0.95), Err(BaselineError::Degenerate(_))));
    }

    #[test]
    fn k_range_validation() {
        let (x, _) = two_clouds(5, 10.0, 1.0, 6);
        assert!(fit_pca_kmeans(&x, 0.95, 1..=3, 1).is_err());
        assert!(fit_pca_kmeans(&x, 0.95, 2..=10, 1).is_err());
    }

    #[test]
    fn dpm_keeps_identical_units_together() {
        let grid = crate::wavelet::Grid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = Array2::from_shape_fn((2, 16), |(_, j)| row[j]);
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters::default();
        let config = ChainConfig {
            n_iter: 60,
            burn_in_fraction: 0.5,
            seed: 11,
            ..Default::default()
        };
        let (res, trace) = fit_global_dpm(&data, &hyper, &config).unwrap();
        assert_eq!(res.memberships[0], res.memberships[1]);
        // tied across levels in every retained sample
        let m = trace.memberships.unwrap();
        for r in 0..m.shape()[0] {
            for i in 0..m.shape()[1] {
                for j in 1..m.shape()[2] {
                    assert_eq!(m[(r, i, j)], m[(r, i, 0)]);
                }
            }
        }
    }

    #[test]
    fn lpp_surrogate_posterior_mean_sanity() {
        // L = 4 line grid; 5 units drawn around a fixed mean with small noise.
        // The posterior mean function must track the sample mean (conjugate
        // oracle with weak shrinkage) to 1e-2.
        let grid = crate::wavelet::Grid::line(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let center = [0.8, -0.4, 0.6, 0.2];
        let n = 60;
        let sd = 0.02;
        let y = Array2::from_shape_fn((n, 4), |(_, j)| center[j] + sd * rng.gen_range(-1.0..1.0));
        let mut ybar = vec![0.0; 4];
        for j in 0..4 {
            ybar[j] = y.column(j).sum() / n as f64;
        }
        let data = FunctionalDataset::new(y, grid).unwrap();
        let hyper = Hyperparameters::default();
        let config = ChainConfig {
            n_iter: 1500,
            burn_in_fraction: 0.5,
            seed: 9,
            record_memberships: false,
            ..Default::default()
        };
        let (_, trace) = fit_lpp_timing_surrogate(&data, &hyper, &config).unwrap();
        let mean = trace.posterior_mean().unwrap();
        for i in 0..n {
            for j in 0..4 {
                assert!(
                    (mean[(i, j)] - ybar[j]).abs() < 1e-2,
                    "unit {i} coeff {j}: {} vs {}",
                    mean[(i, j)],
                    ybar[j]
                );
            }
        }
    }
}
