//! Local clustering of image-valued functional data.
//!
//! Observed images are expanded in an orthonormal wavelet basis; the
//! coefficients in each resolution level get their own Dirichlet-process
//! prior, and residual covariances get a DP over low-rank factor models.
//! A slice-sampled Gibbs sampler draws memberships, atoms, and factor
//! structure; post-processing consolidates the per-resolution partitions
//! into global clusters.
//!
//! The crate ships the sampler, data generators for the three benchmark
//! scenarios, global-clustering baselines, posterior summaries and MCMC
//! diagnostics, plus a batch CLI (`fpdpm`) that drives all of it.

pub mod baselines;
pub mod kmeans;
pub mod linalg;
pub mod model;
pub mod postproc;
pub mod sampler;
pub mod simgen;
pub mod stats;
pub mod wavelet;
