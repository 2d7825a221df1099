//! Ensemble orchestration, `O_s` norms, power-law fits and Gaussianity checks.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Sub-stream seed for `(seed, tag)`, derived by hashing so that streams
/// for neighbouring seeds never overlap.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Consecutive seeds `base, base + 1, …`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base + k).collect()
}

/// Per-seed results sorted by seed.
#[derive(Clone, Debug)]
pub struct Ensemble<T> {
    pub records: Vec<(u64, T)>,
    pub failures: Vec<(u64, String)>,
}

impl<T> Ensemble<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.records.iter().map(|(_, v)| v)
    }

    pub fn get(&self, seed: u64) -> Option<&T> {
        self.records
            .binary_search_by_key(&seed, |(s, _)| *s)
            .ok()
            .map(|k| &self.records[k].1)
    }
}

/// Runs `extract` on every seed with `workers` threads.
///
/// The output depends only on the seed set: records are sorted by seed
/// whatever the scheduling. Failed seeds are logged and kept in `failures`.
pub fn run_ensemble<T, F>(seeds: &[u64], workers: usize, extract: F) -> Result<Ensemble<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::InvalidArgument("duplicate seeds in ensemble".into()));
    }
    let sorted: Vec<u64> = unique.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<(u64, Result<T>)> = pool.install(|| sorted.par_iter().map(|&s| (s, extract(s))).collect());
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(v) => records.push((seed, v)),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if records.is_empty() && !sorted.is_empty() {
        return Err(Error::EnsembleFailed(sorted.len()));
    }
    Ok(Ensemble { records, failures })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OsEstimate {
    pub s: f64,
    pub theta: f64,
    pub samples: usize,
}

/// Smallest `θ` with `mean exp((X₊/θ)^s) ≤ 2`, by bisection.
pub fn os_norm(samples: &[f64], s: f64) -> Result<OsEstimate> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("O_s exponent must be positive, got {s}")));
    }
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let pos: Vec<f64> = samples.iter().map(|x| x.max(0.0)).collect();
    let max = pos.iter().copied().fold(0.0, f64::max);
    let estimate = |theta| OsEstimate {
        s,
        theta,
        samples: samples.len(),
    };
    if max == 0.0 {
        return Ok(estimate(0.0));
    }
    let excess = |theta: f64| pos.iter().map(|x| (x / theta).powf(s).exp()).sum::<f64>() / pos.len() as f64 - 2.0;
    let mut lo = max / 100.0;
    let mut hi = 100.0 * max;
    while excess(lo) <= 0.0 {
        lo /= 2.0;
    }
    while excess(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(estimate(hi))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n.min(y.len()) });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = (sse / (nf - 2.0) / sxx).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
        r_squared,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ScalingFit {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub exponent: f64,
    pub intercept: f64,
    pub exponent_stderr: f64,
    pub r_squared: f64,
}

/// Least squares on `(log r, log v)`.
pub fn fit_power_law(radii: &[f64], values: &[f64]) -> Result<ScalingFit> {
    if radii.iter().chain(values).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("power-law fit needs positive finite inputs".into()));
    }
    let lx: Vec<f64> = radii.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let fit = fit_linear(&lx, &ly)?;
    Ok(ScalingFit {
        radii: radii.to_vec(),
        values: values.to_vec(),
        exponent: fit.slope,
        intercept: fit.intercept,
        exponent_stderr: fit.slope_stderr,
        r_squared: fit.r_squared,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Gaussianity {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_statistic: f64,
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Moment statistics and the Kolmogorov–Smirnov distance to the normal law
/// with the sample mean and standard deviation.
pub fn gaussianity(samples: &[f64]) -> Result<Gaussianity> {
    let n = samples.len();
    if n < 20 {
        return Err(Error::TooFewSamples { needed: 20, got: n });
    }
    let m = mean(samples);
    let central = |k: i32| samples.iter().map(|v| (v - m).powi(k)).sum::<f64>() / n as f64;
    let m2 = central(2);
    if !(m2 > 0.0) {
        return Err(Error::InvalidArgument("samples have zero variance".into()));
    }
    let skewness = central(3) / m2.powf(1.5);
    let excess_kurtosis = central(4) / (m2 * m2) - 3.0;
    let normal = Normal::new(m, variance(samples).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let ks_statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / nf).abs().max((f - (i + 1) as f64 / nf).abs())
        })
        .fold(0.0, f64::max);
    Ok(Gaussianity {
        skewness,
        excess_kurtosis,
        ks_statistic,
    })
}

/// Unbiased sample covariance of equally long vectors.
pub fn covariance(samples: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let k = samples[0].len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidArgument("samples have different lengths".into()));
    }
    let means: Vec<f64> = (0..k).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(k, k);
    for s in samples {
        for i in 0..k {
            let di = s[i] - means[i];
            for j in i..k {
                cov[(i, j)] += di * (s[j] - means[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Tail exponent from the upper `fraction` of `|X - mean| / sd`: the slope of
/// `log(-log P(|X| > t))` against `log t`, which is `s` for a tail
/// `exp(-t^s)`. Reported as a diagnostic only.
pub fn tail_slope(samples: &[f64], fraction: f64) -> Result<f64> {
    let n = samples.len();
    let m = mean(samples);
    let sd = variance(samples).sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument("samples have zero variance".into()));
    }
    let mut z: Vec<f64> = samples.iter().map(|v| ((v - m) / sd).abs()).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * n as f64) as usize).min(n - 1);
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..k)
        .filter(|&i| z[i] > 0.0)
        .map(|i| {
            let survival = (i as f64 + 0.5) / n as f64;
            (z[i].ln(), (-survival.ln()).ln())
        })
        .unzip();
    Ok(fit_linear(&xs, &ys)?.slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ensemble_is_deterministic_and_sorted() {
        let seeds = vec![5, 1, 9, 3, 7, 2];
        let f = |s: u64| -> Result<f64> { Ok((s as f64).sin()) };
        let one = run_ensemble(&seeds, 1, f).unwrap();
        let four = run_ensemble(&seeds, 4, f).unwrap();
        let mut permuted = seeds.clone();
        permuted.reverse();
        let rev = run_ensemble(&permuted, 3, f).unwrap();
        assert_eq!(one.records, four.records);
        assert_eq!(one.records, rev.records);
        assert!(one.records.windows(2).all(|w| w[0].0 < w[1].0));
        let constant = run_ensemble(&seeds, 2, |_| Ok(1)).unwrap();
        assert!(constant.values().all(|&v| v == 1));
        assert_eq!(one.get(9), Some(&9f64.sin()));
    }

    #[test]
    fn ensemble_failures() {
        let partial = run_ensemble(&[1, 2, 3], 2, |s| if s == 2 { Err(Error::NotSpd) } else { Ok(s) }).unwrap();
        assert_eq!(partial.len(), 2);
        assert_eq!(partial.failures.len(), 1);
        assert!(matches!(
            run_ensemble(&[1, 2], 1, |_| -> Result<u8> { Err(Error::NotSpd) }),
            Err(Error::EnsembleFailed(2))
        ));
        assert!(run_ensemble(&[1, 1], 1, |s| Ok(s)).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "resample"), derive_seed(2, "resample"));
        assert_ne!(derive_seed(1, "resample"), derive_seed(1, "other"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
    }

    #[test]
    fn os_norm_closed_forms() {
        assert_eq!(os_norm(&[-1.0, 0.0, -3.0], 1.0).unwrap().theta, 0.0);
        let c = 1.7;
        let s1 = os_norm(&[c; 10], 1.0).unwrap().theta;
        assert!((s1 - c / 2f64.ln()).abs() < 1e-8);
        let s2 = os_norm(&[c; 10], 2.0).unwrap().theta;
        assert!((s2 - c / 2f64.ln().sqrt()).abs() < 1e-8);
        let small_s = os_norm(&[c; 4], 0.05).unwrap().theta;
        assert!((small_s - c / 2f64.ln().powf(20.0)).abs() < 1e-8 * small_s);
    }

    #[test]
    fn os_norm_is_homogeneous() {
        let x = [0.3, -1.0, 2.0, 0.7, 1.1];
        for s in [0.5, 1.0, 2.0] {
            let base = os_norm(&x, s).unwrap().theta;
            let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
            let t = os_norm(&scaled, s).unwrap().theta;
            assert!((t - 3.5 * base).abs() < 1e-10 * t);
        }
    }

    #[test]
    fn power_law_fits() {
        let r = [8.0, 16.0, 32.0, 64.0];
        let exact: Vec<f64> = r.iter().map(|v: &f64| v.powi(-2)).collect();
        let f = fit_power_law(&r, &exact).unwrap();
        assert!((f.exponent + 2.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        assert!(f.exponent_stderr < 1e-12);
        let flat = fit_power_law(&r, &[5.0; 4]).unwrap();
        assert!(flat.exponent.abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<f64> = r
            .iter()
            .map(|v| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                v.powi(-1) * (1.0 + 0.01 * eps)
            })
            .collect();
        assert!((fit_power_law(&r, &noisy).unwrap().exponent + 1.0).abs() < 0.05);
        assert!(fit_power_law(&r, &[1.0, -1.0, 1.0, 1.0]).is_err());
        assert!(fit_power_law(&r[..2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gaussianity_statistics() {
        let sym: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert!(gaussianity(&sym).unwrap().skewness.abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal: Vec<f64> = (0..10000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = gaussianity(&normal).unwrap();
        assert!(g.skewness.abs() <= 0.08 && g.excess_kurtosis.abs() <= 0.15);
        assert!(g.ks_statistic < 0.02);
        assert!(gaussianity(&[2.0; 30]).is_err());
        assert!(gaussianity(&normal[..10]).is_err());
        let slope = tail_slope(&normal, 0.05).unwrap();
        assert!(slope > 1.0 && slope < 3.0, "{slope}");
    }

    #[test]
    fn covariance_examples() {
        let same = vec![vec![1.0, 2.0]; 5];
        assert_eq!(covariance(&same).unwrap(), DMatrix::zeros(2, 2));
        let v = vec![0.5, -1.0, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let c = covariance(&[v.clone(), neg]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[(i, j)] - 2.0 * v[i] * v[j]).abs() < 1e-14);
            }
        }
        assert!(covariance(&[v]).is_err());
    }

    #[test]
    fn covariance_recovers_known_matrix() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.8]);
        let l = sigma.clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 5000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = nalgebra::DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                (&l * z).iter().copied().collect()
            })
            .collect();
        let c = covariance(&samples).unwrap();
        assert_eq!(c, c.transpose());
        assert!(c.clone().symmetric_eigenvalues().min() >= -1e-10 * c.trace());
        let tol = 4.0 * sigma.amax() / (n as f64).sqrt();
        assert!((&c - &sigma).amax() <= tol);
    }
}
