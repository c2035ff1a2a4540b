//! Statistical helpers shared by the tests and experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

/// `P(X <= x)` for `X ~ N(mean, sd^2)`.
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Two-sided one-sample Kolmogorov–Smirnov test against `cdf`.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / nf).max((i as f64 + 1.0) / nf - f);
    }
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival(d, n),
        n,
    }
}

/// `P(D_n > d)` via the asymptotic Kolmogorov law with Stephens' small-sample correction.
pub fn kolmogorov_survival(d: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = 2.0 * (if j % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VarianceRatio {
    /// Mean square of the samples divided by the reference variance.
    pub ratio: f64,
    /// One-sided p-value of `H0: E[X^2] = reference` against larger.
    pub p_value: f64,
    pub n: usize,
}

/// Uncentered variance-ratio test of zero-mean samples against `reference_variance`.
pub fn variance_ratio_test(samples: &[f64], reference_variance: f64) -> VarianceRatio {
    let n = samples.len();
    let ss: f64 = samples.iter().map(|v| v * v).sum();
    let ratio = ss / n as f64 / reference_variance;
    let chi = ChiSquared::new(n as f64).expect("positive degrees of freedom");
    VarianceRatio {
        ratio,
        p_value: 1.0 - chi.cdf(ss / reference_variance),
        n,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Unbiased sample covariance of two equally long series.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Ordinary least squares `y = intercept + slope x`; returns `(slope, intercept, r2)`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054, 0.0, 1.0) - 0.975).abs() < 1e-9);
        assert!((normal_cdf(3.0, 1.0, 2.0) - normal_cdf(1.0, 0.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn ks_p_values_are_roughly_uniform_for_exact_gaussians() {
        // Sanity fixture: p-values of exact Gaussian samples.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let trials = 400;
        let mut below = [0usize; 4];
        for _ in 0..trials {
            let xs: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p = ks_test(&xs, |x| normal_cdf(x, 0.0, 1.0)).p_value;
            for (k, q) in [0.1, 0.25, 0.5, 0.75].iter().enumerate() {
                if p < *q {
                    below[k] += 1;
                }
            }
        }
        for (k, q) in [0.1, 0.25, 0.5, 0.75].iter().enumerate() {
            let frac = below[k] as f64 / trials as f64;
            assert!((frac - q).abs() < 0.07, "P(p<{q}) = {frac}");
        }
    }

    #[test]
    fn ks_rejects_wrong_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..300)
            .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        assert!(ks_test(&xs, |x| normal_cdf(x, 0.0, 1.0)).p_value < 1e-6);
    }

    #[test]
    fn variance_ratio_flags_inflated_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ok = variance_ratio_test(&xs, 1.0);
        assert!(ok.p_value > 0.01 && (ok.ratio - 1.0).abs() < 0.25);
        let big: Vec<f64> = xs.iter().map(|x| 1.5 * x).collect();
        let flagged = variance_ratio_test(&big, 1.0);
        assert!(flagged.ratio > 1.5 && flagged.p_value < 1e-6);
    }

    #[test]
    fn ols_recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let (s, i, r2) = ols(&xs, &ys);
        assert!((s + 0.5).abs() < 1e-14 && (i - 2.0).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
    }
}
