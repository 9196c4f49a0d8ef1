//! Lloyd's k-means with k-means++ seeding and multi-restart selection.

use ndarray::Array2;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
}

/// Runs `restarts` independent k-means fits and keeps the lowest inertia.
/// Deterministic given the RNG stream.
pub fn kmeans<R: Rng>(data: &Array2<f64>, k: usize, restarts: usize, rng: &mut R) -> KmeansFit {
    assert!(k >= 1 && k <= data.nrows());
    let mut best: Option<KmeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = kmeans_once(data, k, rng);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.unwrap()
}

fn kmeans_once<R: Rng>(data: &Array2<f64>, k: usize, rng: &mut R) -> KmeansFit {
    let n = data.nrows();
    let d = data.ncols();
    let mut centers = plus_plus_init(data, k, rng);
    let mut labels = vec![0usize; n];
    let max_iter = 100;
    for _ in 0..max_iter {
        let mut moved = false;
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(data, i, &centers, c);
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                moved = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[(labels[i], j)] += data[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        if !moved {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        inertia += sq_dist(data, i, &centers, labels[i]);
    }
    KmeansFit {
        labels,
        centers,
        inertia,
    }
}

fn plus_plus_init<R: Rng>(data: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    for j in 0..d {
        centers[(0, j)] = data[(first, j)];
    }
    let mut dist = vec![0.0f64; n];
    for c in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for cc in 0..c {
                best = best.min(sq_dist(data, i, &centers, cc));
            }
            dist[i] = best;
            total += best;
        }
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for i in 0..n {
                acc += dist[i];
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        for j in 0..d {
            centers[(c, j)] = data[(pick, j)];
        }
    }
    centers
}

fn sq_dist(data: &Array2<f64>, i: usize, centers: &Array2<f64>, c: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..data.ncols() {
        let diff = data[(i, j)] - centers[(c, j)];
        acc += diff * diff;
    }
    acc
}
