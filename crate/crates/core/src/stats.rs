//! Small statistics helpers: means, percentile bootstrap, sign test, Kendall tau.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngHandle;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(samples: &[f64], level: f64, rng: RngHandle) -> Result<(f64, f64)> {
    bootstrap_ci_with(samples, level, BOOTSTRAP_RESAMPLES, rng)
}

pub fn bootstrap_ci_with(samples: &[f64], level: f64, resamples: usize, rng: RngHandle) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::contract(format!("bootstrap needs at least 2 samples, got {}", samples.len())));
    }
    percentile_interval(level, resamples, rng, |rng| resampled_mean(samples, rng))
}

/// Percentile bootstrap interval for `mean(a) - mean(b)`, resampling both
/// lists independently. `b` may hold a single value.
pub fn bootstrap_diff_ci(a: &[f64], b: &[f64], level: f64, rng: RngHandle) -> Result<(f64, f64)> {
    if a.len() < 2 || b.is_empty() {
        return Err(Error::contract(format!("difference bootstrap needs at least 2 and 1 samples, got {} and {}", a.len(), b.len())));
    }
    percentile_interval(level, BOOTSTRAP_RESAMPLES, rng, |rng| resampled_mean(a, rng) - resampled_mean(b, rng))
}

fn resampled_mean(xs: &[f64], rng: &mut impl Rng) -> f64 {
    let n = xs.len();
    (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64
}

fn percentile_interval(level: f64, resamples: usize, rng: RngHandle, mut stat: impl FnMut(&mut crate::rng::StreamRng) -> f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::contract(format!("confidence level must be in (0, 1), got {level}")));
    }
    if resamples == 0 {
        return Err(Error::contract("bootstrap needs at least one resample"));
    }
    let mut rng = rng.rng();
    let mut stats: Vec<f64> = (0..resamples).map(|_| stat(&mut rng)).collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - alpha) * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    Ok((stats[lo], stats[hi]))
}

/// Two-sided exact sign test p-value; zeros are dropped.
pub fn sign_test(xs: &[f64]) -> f64 {
    let pos = xs.iter().filter(|&&x| x > 0.0).count();
    let neg = xs.iter().filter(|&&x| x < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return 1.0;
    }
    let k = pos.min(neg);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for j in 0..=k {
        if j > 0 {
            ln_choose += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Kendall tau-b between two paired score lists.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract("kendall tau needs equal-length inputs"));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = (x[i] - x[j]).partial_cmp(&0.0);
            let dy = (y[i] - y[j]).partial_cmp(&0.0);
            match (dx, dy) {
                (Some(a), Some(b)) if a.is_eq() && b.is_eq() => {}
                (Some(a), _) if a.is_eq() => tie_x += 1,
                (_, Some(b)) if b.is_eq() => tie_y += 1,
                (Some(a), Some(b)) if a == b => concordant += 1,
                (Some(_), Some(_)) => discordant += 1,
                _ => return Err(Error::contract("kendall tau inputs must not be NaN")),
            }
        }
    }
    let n0 = concordant + discordant;
    let denom = (((n0 + tie_x) * (n0 + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_samples_give_a_point_interval() {
        let (lo, hi) = bootstrap_ci(&[2.5; 10], 0.95, RngHandle::new(1, 1)).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
    }

    #[test]
    fn symmetric_samples_straddle_zero() {
        let xs: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (lo, hi) = bootstrap_ci(&xs, 0.95, RngHandle::new(2, 2)).unwrap();
        assert!(lo < 0.0 && hi > 0.0);
    }

    #[test]
    fn normal_width_matches_analytic() {
        let mut rng = RngHandle::new(3, 3).rng();
        let xs: Vec<f64> = (0..100).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let m = mean(&xs);
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0).sqrt();
        let analytic = 2.0 * 1.959964 * sd / 10.0;
        let (lo, hi) = bootstrap_ci(&xs, 0.95, RngHandle::new(4, 4)).unwrap();
        assert!(((hi - lo) - analytic).abs() < 0.2 * analytic, "{} vs {analytic}", hi - lo);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(bootstrap_ci(&[1.0], 0.95, RngHandle::new(0, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn difference_interval() {
        assert_eq!(bootstrap_diff_ci(&[3.0; 5], &[1.0; 4], 0.95, RngHandle::new(5, 5)).unwrap(), (2.0, 2.0));
        assert_eq!(bootstrap_diff_ci(&[3.0; 5], &[1.0], 0.95, RngHandle::new(5, 5)).unwrap(), (2.0, 2.0));
        assert!(bootstrap_diff_ci(&[3.0], &[1.0], 0.95, RngHandle::new(5, 5)).is_err());
        assert!(bootstrap_diff_ci(&[3.0, 2.0], &[], 0.95, RngHandle::new(5, 5)).is_err());
    }

    #[test]
    fn difference_width_matches_analytic() {
        let mut rng = RngHandle::new(6, 6).rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..50).map(|_| 2.0 * normal.sample(&mut rng)).collect();
        let var = |xs: &[f64]| {
            let m = mean(xs);
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let analytic = 2.0 * 1.959964 * (var(&a) / 100.0 + var(&b) / 50.0).sqrt();
        let (lo, hi) = bootstrap_diff_ci(&a, &b, 0.95, RngHandle::new(7, 7)).unwrap();
        assert!(((hi - lo) - analytic).abs() < 0.2 * analytic, "{} vs {analytic}", hi - lo);
    }

    #[test]
    fn sign_test_values() {
        // 10 of 10 positive: 2 * 0.5^10
        assert!((sign_test(&[1.0; 10]) - 2.0 / 1024.0).abs() < 1e-15);
        // 8 of 10: 2 * (1 + 10 + 45) / 1024
        let xs = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, 0.0];
        assert!((sign_test(&xs) - 112.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test(&[1.0, -1.0]), 1.0);
        assert_eq!(sign_test(&[0.0]), 1.0);
    }

    #[test]
    fn kendall_values() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // one swap among four: (5 - 1) / 6
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
    }
}
