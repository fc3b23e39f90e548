//! Small statistical helpers shared by the lab, the simulator, and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Standard error of a binomial frequency estimate.
pub fn binomial_se(freq: f64, trials: u64) -> f64 {
    if trials == 0 {
        return f64::INFINITY;
    }
    (freq.clamp(0.0, 1.0) * (1.0 - freq.clamp(0.0, 1.0)) / trials as f64).sqrt()
}

/// Mean and standard error of a sample.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, f64::INFINITY);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Pearson chi-square statistic and p-value for observed counts against
/// expected probabilities. Cells with tiny expected mass are pooled.
pub fn chi_square_test(observed: &[u64], expected_probs: &[f64], total: u64) -> (f64, f64) {
    assert_eq!(observed.len(), expected_probs.len());
    let total_f = total as f64;
    let mut statistic = 0.0;
    let mut dof: i64 = -1;
    let mut pooled_obs = 0.0;
    let mut pooled_exp = 0.0;
    for (&obs, &p) in observed.iter().zip(expected_probs) {
        let exp = p * total_f;
        if exp < 5.0 {
            pooled_obs += obs as f64;
            pooled_exp += exp;
            continue;
        }
        statistic += (obs as f64 - exp).powi(2) / exp;
        dof += 1;
    }
    if pooled_exp > 0.0 {
        statistic += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        dof += 1;
    }
    if dof < 1 {
        return (statistic, 1.0);
    }
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    let p_value = 1.0 - dist.cdf(statistic);
    (statistic, p_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_accepts_exact_fit() {
        let (_stat, p) = chi_square_test(&[250, 250, 250, 250], &[0.25; 4], 1000);
        assert!(p > 0.99);
    }

    #[test]
    fn chi_square_rejects_gross_misfit() {
        let (_stat, p) = chi_square_test(&[900, 100], &[0.5, 0.5], 1000);
        assert!(p < 1e-6);
    }
}
