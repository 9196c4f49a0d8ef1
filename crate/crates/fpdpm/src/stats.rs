//! Shared statistical utilities: sample moments, Kolmogorov–Smirnov tests,
//! batch-means standard errors, and least-squares slope fits.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean for a correlated series, batch-means method.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let b = n_batches.max(2).min(xs.len());
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b).map(|i| mean(&xs[i * len..(i + 1) * len])).collect();
    (variance(&means) / b as f64).sqrt()
}

/// Two-sample z-score for a difference of means; `se_a`/`se_b` are the
/// standard errors of the two means.
pub fn z_score(mean_a: f64, se_a: f64, mean_b: f64, se_b: f64) -> f64 {
    (mean_a - mean_b) / (se_a * se_a + se_b * se_b).sqrt()
}

/// Kolmogorov–Smirnov test of `samples` against the CDF `cdf`.
/// Returns the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    ks_p_value(d, xs.len())
}

/// Asymptotic Kolmogorov distribution tail: Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
pub fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    (sign * (1.0 - poly * (-x * x).exp())).clamp(-1.0, 1.0)
}

/// Inverse-Gaussian CDF with mean μ and shape λ.
pub fn inverse_gaussian_cdf(x: f64, mu: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = (lambda / x).sqrt();
    normal_cdf(s * (x / mu - 1.0)) + (2.0 * lambda / mu).exp() * normal_cdf(-s * (x / mu + 1.0))
}

/// Least-squares slope of log(y) on log(x).
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Median of a sample (by copy).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ks_accepts_uniform() {
        let mut rng = StdRng::seed_from_u64(1);
        let xs: Vec<f64> = (0..5000).map(|_| rng.gen()).collect();
        assert!(ks_test(&xs, |x| x.clamp(0.0, 1.0)) > 0.01);
    }

    #[test]
    fn ks_rejects_wrong_distribution() {
        let mut rng = StdRng::seed_from_u64(2);
        let xs: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>().powi(2)).collect();
        assert!(ks_test(&xs, |x| x.clamp(0.0, 1.0)) < 1e-6);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.96) - 0.9750021).abs() < 1e-4);
        assert!((normal_cdf(-1.0) - 0.1586553).abs() < 1e-4);
    }

    #[test]
    fn inverse_gaussian_cdf_is_monotone_distribution() {
        let (mu, lam) = (1.3, 2.0);
        let mut prev = 0.0;
        for i in 1..200 {
            let x = i as f64 * 0.05;
            let f = inverse_gaussian_cdf(x, mu, lam);
            assert!(f >= prev - 1e-12 && (0.0..=1.0).contains(&f));
            prev = f;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [16.0, 64.0, 256.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }
}
