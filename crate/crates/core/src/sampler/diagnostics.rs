//! Convergence and calibration diagnostics.

use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Splits each chain into a first and second half, dropping the middle draw
/// of odd-length chains.
fn split(chains: &[Vec<f64>]) -> Result<Vec<&[f64]>> {
    if chains.is_empty() {
        return Err(Error::data("no chains"));
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(Error::data(format!("need at least 4 draws per chain, got {n}")));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::data("chains have unequal lengths"));
    }
    let half = n / 2;
    Ok(chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect())
}

/// Split potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let groups = split(chains)?;
    let n = groups[0].len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let w = groups.iter().map(|g| sample_var(g)).sum::<f64>() / groups.len() as f64;
    if !(w > 0.0) {
        return Err(Error::Numerical("zero within-chain variance".into()));
    }
    let b = n * sample_var(&means);
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size over split chains, with Geyer's initial monotone
/// sequence truncation of the autocorrelation sum.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    let groups = split(chains)?;
    let m = groups.len();
    let n = groups[0].len();
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let acov = |lag: usize| -> f64 {
        groups
            .iter()
            .zip(&means)
            .map(|(g, &mu)| autocovariance(g, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return Err(Error::Numerical("degenerate variance".into()));
    }

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    Ok(total / tau)
}

/// Fraction of draws below `truth`, counting ties as one half.
pub fn rank_of_truth(draws: &[f64], truth: f64) -> f64 {
    let below = draws.iter().filter(|&&d| d < truth).count() as f64;
    let ties = draws.iter().filter(|&&d| d == truth).count() as f64;
    (below + 0.5 * ties) / draws.len() as f64
}

/// One-sample Kolmogorov-Smirnov test against Uniform(0,1). Returns the
/// statistic and an asymptotic p-value with the small-sample correction
/// `lambda = (sqrt(n) + 0.12 + 0.11 / sqrt(n)) D`.
pub fn ks_uniform(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::data("no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostics>,
    pub divergences: usize,
    pub draws: usize,
    pub chains: usize,
}

impl Diagnostics {
    /// Split R-hat and ESS of every constrained column; `None` where the
    /// column is degenerate.
    pub fn compute(draws: &PosteriorDraws) -> Self {
        let params = draws
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let chains = draws.by_chain(i);
                ParamDiagnostics {
                    name: name.clone(),
                    rhat: split_rhat(&chains).ok(),
                    ess: ess(&chains).ok(),
                    rank: None,
                }
            })
            .collect();
        Diagnostics {
            params,
            divergences: draws.divergences(),
            draws: draws.len(),
            chains: draws.chains,
        }
    }

    /// Adds normalized ranks of known true values.
    pub fn with_truth(mut self, draws: &PosteriorDraws, truth: &[(String, f64)]) -> Self {
        for (name, value) in truth {
            if let (Some(i), Some(p)) = (draws.index_of(name), self.params.iter_mut().find(|p| &p.name == name)) {
                p.rank = Some(rank_of_truth(&draws.column(i), *value));
            }
        }
        self
    }

    /// Largest R-hat across parameters, ignoring degenerate ones.
    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).reduce(f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn iid(seed: u64, chains: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn iid_benchmarks() {
        let x = iid(1, 4, 1000);
        let r = split_rhat(&x).unwrap();
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
        let e = ess(&x).unwrap();
        assert!(e >= 0.8 * 4000.0, "ess {e}");
    }

    #[test]
    fn ar1_ess() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let phi: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
                (0..5000)
                    .map(|_| {
                        x = phi * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let expected = 20_000.0 * (1.0 - phi) / (1.0 + phi);
        let e = ess(&chains).unwrap();
        assert!(e > expected / 1.5 && e < expected * 1.5, "{e} vs {expected}");
    }

    #[test]
    fn degenerate_inputs() {
        assert!(split_rhat(&[vec![1.0; 10], vec![2.0; 10]]).is_err());
        assert!(ess(&[vec![3.0; 10], vec![3.0; 10]]).is_err());
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0]]).is_err());
        let mut x = iid(3, 2, 100);
        for v in &mut x[1] {
            *v += 50.0;
        }
        assert!(split_rhat(&x).unwrap() > 10.0);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_truth(&[1.0, 2.0, 3.0], 0.0), 0.0);
        assert_eq!(rank_of_truth(&[1.0, 2.0, 3.0], 5.0), 1.0);
        assert_eq!(rank_of_truth(&[1.0, 2.0, 2.0, 3.0], 2.0), 0.5);
    }

    #[test]
    fn ks_examples() {
        let grid: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
        let (d, p) = ks_uniform(&grid).unwrap();
        assert!(d <= 0.0025 + 1e-12 && p > 0.99);
        let squeezed: Vec<f64> = grid.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&squeezed).unwrap().1 < 1e-6);
        // Tabulated Kolmogorov survival value.
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 5e-4);
    }

    proptest! {
        #[test]
        fn rhat_is_invariant_to_permutation_within_halves(seed in 0u64..1000) {
            let x = iid(seed, 3, 40);
            let mut y = x.clone();
            for c in &mut y {
                c[..20].reverse();
                c[20..].reverse();
            }
            prop_assert!((split_rhat(&x).unwrap() - split_rhat(&y).unwrap()).abs() < 1e-12);
        }
    }
}
