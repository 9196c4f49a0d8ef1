//! Posterior summarization: membership consolidation across resolutions,
//! partition metrics, and convergence diagnostics.

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("undefined input: {0}")]
    Undefined(String),
}

/// Retained memberships: R samples × n units × (J+1) resolutions.
#[derive(Clone, Debug)]
pub struct MembershipTensor {
    pub labels: Array3<u32>,
}

impl MembershipTensor {
    pub fn new(labels: Array3<u32>) -> MembershipTensor {
        MembershipTensor { labels }
    }

    pub fn n_samples(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn n_units(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn n_levels(&self) -> usize {
        self.labels.shape()[2]
    }

    /// A single-level view as an R × n × 1 tensor.
    pub fn restrict_level(&self, j: usize) -> MembershipTensor {
        let (r, n, _) = (self.n_samples(), self.n_units(), self.n_levels());
        let mut out = Array3::<u32>::zeros((r, n, 1));
        for s in 0..r {
            for i in 0..n {
                out[(s, i, 0)] = self.labels[(s, i, j)];
            }
        }
        MembershipTensor { labels: out }
    }
}

/// Symmetric pairwise distances in [0, 1] with zero diagonal.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    pub d: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(d: Array2<f64>) -> Result<DistanceMatrix, PostprocError> {
        let n = d.nrows();
        if d.ncols() != n {
            return Err(PostprocError::Parameter("distance matrix must be square".into()));
        }
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(PostprocError::Parameter("nonzero diagonal".into()));
            }
            for j in 0..n {
                let v = d[(i, j)];
                if !(0.0..=1.0 + 1e-12).contains(&v) || (v - d[(j, i)]).abs() > 1e-12 {
                    return Err(PostprocError::Parameter(
                        "distances must be symmetric and in [0, 1]".into(),
                    ));
                }
            }
        }
        Ok(DistanceMatrix { d })
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }
}

/// Resolution weight: coarse levels dominate. The j = 0 weight continues the
/// 1/j rule with twice the j = 1 weight.
pub fn resolution_weight(j: usize, n_units: usize) -> f64 {
    if j == 0 {
        2.0
    } else if (1usize << j.min(63)) < n_units {
        1.0 / j as f64
    } else {
        1.0 / (2.0 * j as f64)
    }
}

/// Average weighted disagreement between units across retained samples.
pub fn pairwise_distance(mt: &MembershipTensor, n_units_for_weights: usize) -> DistanceMatrix {
    let (r, n, nl) = (mt.n_samples(), mt.n_units(), mt.n_levels());
    assert!(r >= 1);
    let weights: Vec<f64> = if nl == 1 {
        vec![1.0]
    } else {
        (0..nl).map(|j| resolution_weight(j, n_units_for_weights)).collect()
    };
    let wsum: f64 = weights.iter().sum();
    let mut d = Array2::<f64>::zeros((n, n));
    for s in 0..r {
        for i in 0..n {
            for i2 in i + 1..n {
                let mut acc = 0.0;
                for j in 0..nl {
                    if mt.labels[(s, i, j)] != mt.labels[(s, i2, j)] {
                        acc += weights[j];
                    }
                }
                d[(i, i2)] += acc / wsum;
            }
        }
    }
    for i in 0..n {
        for i2 in i + 1..n {
            let v = (d[(i, i2)] / r as f64).min(1.0);
            d[(i, i2)] = v;
            d[(i2, i)] = v;
        }
    }
    DistanceMatrix { d }
}

/// One merge of the agglomerative tree: representatives of the two merged
/// clusters (smallest original indices) and the complete-linkage height.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Complete-linkage agglomeration down to `k` clusters. Ties break on the
/// lexicographically smallest representative pair. Returns cluster labels
/// (1-based, ordered by first appearance) and the merges performed.
pub fn complete_linkage(
    dm: &DistanceMatrix,
    k: usize,
) -> Result<(Vec<usize>, Vec<Merge>), PostprocError> {
    let n = dm.n();
    if k < 1 || k > n {
        return Err(PostprocError::Parameter(format!(
            "cannot cut {n} units into {k} clusters"
        )));
    }
    // members[c] sorted; rep = members[c][0]
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut dist = dm.d.clone();
    let mut merges = Vec::new();
    while members.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let d = dist[(a, b)];
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < bd
                            || (d == bd
                                && (members[a][0], members[b][0]) < (members[ba][0], members[bb][0]))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (h, a, b) = best.expect("at least two clusters remain");
        merges.push(Merge {
            a: members[a][0],
            b: members[b][0],
            height: h,
        });
        // complete linkage: distance to the union is the max
        for c in 0..members.len() {
            if c != a && c != b {
                let d = dist[(a, c)].max(dist[(b, c)]);
                dist[(a, c)] = d;
                dist[(c, a)] = d;
            }
        }
        let absorbed = members.remove(b);
        members[a].extend(absorbed);
        members[a].sort_unstable();
        // drop row/column b from the working distance matrix
        let m = members.len() + 1;
        let mut nd = Array2::<f64>::zeros((m - 1, m - 1));
        let keep: Vec<usize> = (0..m).filter(|&c| c != b).collect();
        for (ri, &ro) in keep.iter().enumerate() {
            for (ci, &co) in keep.iter().enumerate() {
                nd[(ri, ci)] = dist[(ro, co)];
            }
        }
        dist = nd;
    }
    let mut labels = vec![0usize; n];
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&c| members[c][0]);
    for (newlab, &c) in order.iter().enumerate() {
        for &i in &members[c] {
            labels[i] = newlab + 1;
        }
    }
    Ok((labels, merges))
}

/// Cuts the complete-linkage tree at `k` clusters.
pub fn consolidate_clusters(dm: &DistanceMatrix, k: usize) -> Result<Vec<usize>, PostprocError> {
    complete_linkage(dm, k).map(|(labels, _)| labels)
}

/// Cuts at the k in `k_range` maximizing the average silhouette width.
pub fn consolidate_clusters_auto(
    dm: &DistanceMatrix,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<usize>, PostprocError> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in k_range {
        if k < 2 || k > dm.n() {
            continue;
        }
        let labels = consolidate_clusters(dm, k)?;
        let s = silhouette_width(dm, &labels)?;
        if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
            best = Some((s, labels));
        }
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| PostprocError::Parameter("empty k range".into()))
}

/// Chance-adjusted pair-counting agreement between two partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, PostprocError> {
    if a.len() != b.len() {
        return Err(PostprocError::Parameter("label vectors differ in length".into()));
    }
    if a.len() < 2 {
        return Err(PostprocError::Parameter("need at least two units".into()));
    }
    let relabel = |xs: &[usize]| {
        let mut map = std::collections::HashMap::new();
        xs.iter()
            .map(|&x| {
                let next = map.len();
                *map.entry(x).or_insert(next)
            })
            .collect::<Vec<usize>>()
    };
    let ra = relabel(a);
    let rb = relabel(b);
    let ka = ra.iter().max().unwrap() + 1;
    let kb = rb.iter().max().unwrap() + 1;
    let mut cont = vec![vec![0u64; kb]; ka];
    for (&x, &y) in ra.iter().zip(&rb) {
        cont[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = cont.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = (0..ka)
        .map(|i| c2(cont[i].iter().sum::<u64>()))
        .sum();
    let sum_b: f64 = (0..kb)
        .map(|j| c2((0..ka).map(|i| cont[i][j]).sum::<u64>()))
        .sum();
    let total = c2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        // degenerate margins: identical partitions count as perfect agreement
        return Ok(if ra == rb { 1.0 } else { 0.0 });
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Posterior mean functions and the mean squared error against the truth.
pub fn posterior_mean_mse(
    thetas: &[Array2<f64>],
    truth: &Array2<f64>,
) -> Result<(Array2<f64>, f64), PostprocError> {
    if thetas.is_empty() {
        return Err(PostprocError::Parameter("empty trace".into()));
    }
    if thetas[0].raw_dim() != truth.raw_dim() {
        return Err(PostprocError::Parameter(format!(
            "trace is {:?}, truth is {:?}",
            thetas[0].shape(),
            truth.shape()
        )));
    }
    let mut mean = Array2::<f64>::zeros(truth.raw_dim());
    for t in thetas {
        if t.raw_dim() != truth.raw_dim() {
            return Err(PostprocError::Parameter("ragged trace shapes".into()));
        }
        mean += t;
    }
    mean /= thetas.len() as f64;
    let mse = mean
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.len() as f64;
    Ok((mean, mse))
}

/// Potential scale reduction factor over two or more equal-length chains.
/// Values below 1 (possible in finite samples) are reported as 1.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64, PostprocError> {
    if chains.len() < 2 {
        return Err(PostprocError::Parameter("need at least two chains".into()));
    }
    let m = chains[0].len();
    if m < 10 || chains.iter().any(|c| c.len() != m) {
        return Err(PostprocError::Parameter(
            "chains must share a length of at least 10".into(),
        ));
    }
    let mf = m as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| crate::stats::variance(c)).collect();
    let w = crate::stats::mean(&vars);
    let b = mf * crate::stats::variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let v = w * (mf - 1.0) / mf + b / mf;
    Ok((v / w).sqrt().max(1.0))
}

/// Mean silhouette width of a partition under a distance matrix. Units in
/// singleton clusters score zero.
pub fn silhouette_width(dm: &DistanceMatrix, labels: &[usize]) -> Result<f64, PostprocError> {
    let n = dm.n();
    if labels.len() != n {
        return Err(PostprocError::Parameter("labels do not match the matrix".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(PostprocError::Undefined(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let clusters: Vec<usize> = distinct.into_iter().collect();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // scores zero
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == own {
                a += dm.d[(i, j)];
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == own {
                continue;
            }
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for j in 0..n {
                if labels[j] == c {
                    acc += dm.d[(i, j)];
                    cnt += 1;
                }
            }
            if cnt > 0 {
                b = b.min(acc / cnt as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
