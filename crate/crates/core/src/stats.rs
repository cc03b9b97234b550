//! Summary statistics, least squares, bootstrap and goodness-of-fit tests.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&s, q)
}

pub fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = a + b x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

/// Least squares through the origin, `y = b x`.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    sxy / sxx
}

/// Log-log slope fit of a per-group statistic with a replica bootstrap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub x: Vec<f64>,
    pub stat: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Bootstrap percentile interval at the requested level.
    pub ci: (f64, f64),
    pub boot_slopes: Vec<f64>,
    pub resamples: usize,
    /// Set when fewer than 3 points or fewer than 2 replicas per point.
    pub unreliable: bool,
}

impl SlopeFit {
    pub fn quantile_of_slope(&self, q: f64) -> f64 {
        quantile(&self.boot_slopes, q)
    }
}

/// Fits `log stat(group) = a + b log x`. Each group's replicas are resampled
/// with replacement `resamples` times; groups whose statistic is not positive
/// make the fit undefined and return `None`.
pub fn bootstrap_loglog<R: Rng + ?Sized, F: Fn(&[f64]) -> f64>(
    x: &[f64],
    groups: &[Vec<f64>],
    stat: F,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> Option<SlopeFit> {
    let stats: Vec<f64> = groups.iter().map(|g| stat(g)).collect();
    if stats.iter().any(|s| !(*s > 0.0)) || x.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = stats.iter().map(|v| v.ln()).collect();
    let fit = linear_fit(&lx, &ly);
    let mut boot = Vec::with_capacity(resamples);
    let mut buf = Vec::new();
    for _ in 0..resamples {
        let mut by = Vec::with_capacity(groups.len());
        for g in groups {
            buf.clear();
            for _ in 0..g.len() {
                buf.push(g[rng.random_range(0..g.len())]);
            }
            by.push(stat(&buf).max(f64::MIN_POSITIVE).ln());
        }
        boot.push(linear_fit(&lx, &by).slope);
    }
    let alpha = (1.0 - level) / 2.0;
    let ci = (quantile(&boot, alpha), quantile(&boot, 1.0 - alpha));
    let unreliable = x.len() < 3 || groups.iter().any(|g| g.len() < 2);
    Some(SlopeFit {
        x: x.to_vec(),
        stat: stats,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        ci,
        boot_slopes: boot,
        resamples,
        unreliable,
    })
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov survival function `P(sqrt(n) D > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// p-value of a one-sample KS statistic with the Stephens small-sample
/// correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let en = (n as f64).sqrt();
    kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
}

pub fn ks_two_sample_pvalue(d: f64, n: usize, m: usize) -> f64 {
    ks_pvalue(d, ((n * m) as f64 / (n + m) as f64).round() as usize)
}

/// Pearson chi-square statistic and p-value for observed counts against
/// expected probabilities.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> (f64, f64) {
    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e) * (o as f64 - e) / e
        })
        .sum();
    let dof = (observed.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat);
    (stat, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mean_and_stderr() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.8), 4.2);
        assert_eq!(quantile(&xs, 1.0), 5.0);
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bootstrap_brackets_a_power_law() {
        let mut rng = stream(3, 0);
        let x = [10.0, 100.0, 1000.0];
        let groups: Vec<Vec<f64>> = x
            .iter()
            .map(|n: &f64| (0..40).map(|_| n.powf(-0.5) * (1.0 + 0.05 * rng.random::<f64>())).collect())
            .collect();
        let fit = bootstrap_loglog(&x, &groups, |g| mean_stderr(g).0, 200, 0.95, &mut rng).unwrap();
        assert!(fit.ci.0 <= fit.slope && fit.slope <= fit.ci.1);
        assert!((fit.slope + 0.5).abs() < 0.01);
        assert!(!fit.unreliable);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Standard critical values of the limiting distribution.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_accepts_uniform_and_rejects_shifted() {
        let mut rng = stream(4, 0);
        let u: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        let d = ks_statistic(&u, |x| x.clamp(0.0, 1.0));
        assert!(ks_pvalue(d, u.len()) > 0.01);
        let d2 = ks_statistic(&u, |x| (x * 1.1).clamp(0.0, 1.0));
        assert!(ks_pvalue(d2, u.len()) < 1e-6);
        let v: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        assert!(ks_two_sample_pvalue(ks_two_sample(&u, &v), 5000, 5000) > 0.01);
    }

    #[test]
    fn chi_square_fair_die() {
        let (s, p) = chi_square(&[100, 100, 100, 100], &[0.25; 4]);
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square(&[200, 50, 50, 100], &[0.25; 4]);
        assert!(p < 1e-10);
    }
}
