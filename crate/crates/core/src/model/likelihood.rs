use statrs::function::gamma::ln_gamma;

use super::PooledParams;
use crate::dynamics::{anonymize, Behavior, ChoiceTrajectory, CountSeries};
use crate::error::{Error, Result};
use crate::network::CostSequence;

/// Gradient of a weighted log-likelihood with respect to one agent's
/// constrained parameters and initial values.
#[derive(Debug, Clone, Default)]
pub(crate) struct PathGrad {
    pub eta: f64,
    pub theta: f64,
    pub rho: f64,
    pub v1: Vec<f64>,
}

/// Log choice probabilities of one agent, `days x (M + 1)` row-major.
pub(crate) fn log_prob_path(b: &Behavior, v1: &[f64], costs: &CostSequence, days: usize) -> Vec<f64> {
    let m = v1.len();
    let mut out = Vec::with_capacity(days * (m + 1));
    let mut v = v1.to_vec();
    let ln_rho = b.rho.ln();
    let ln_travel = (-b.rho).ln_1p();
    for t in 0..days {
        let min_v = v.iter().copied().fold(f64::INFINITY, f64::min);
        let lse = v.iter().map(|&x| (-b.theta * (x - min_v)).exp()).sum::<f64>().ln();
        out.push(ln_rho);
        out.extend(v.iter().map(|&x| ln_travel - b.theta * (x - min_v) - lse));
        let c = costs.day(t);
        for (vi, &ci) in v.iter_mut().zip(c) {
            *vi = (1.0 - b.eta) * *vi + b.eta * ci;
        }
    }
    out
}

/// `sum_t sum_i w_t(i) log p_t(i)` and its gradient. Weights may be
/// fractional; zero weights contribute nothing even where `p = 0`.
pub(crate) fn weighted_loglik(
    b: &Behavior,
    v1: &[f64],
    costs: &CostSequence,
    weights: &[f64],
    want_v1: bool,
) -> (f64, PathGrad) {
    let m = v1.len();
    let width = m + 1;
    let days = weights.len() / width;
    let mut grad = PathGrad {
        v1: if want_v1 { vec![0.0; m] } else { Vec::new() },
        ..Default::default()
    };
    let mut v = v1.to_vec();
    let mut dv = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut decay = 1.0;
    let mut value = 0.0;
    let ln_rho = b.rho.ln();
    let ln_travel = (-b.rho).ln_1p();
    let theta = b.theta;

    for t in 0..days {
        let w = &weights[t * width..(t + 1) * width];
        let min_v = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (si, &vi) in s.iter_mut().zip(&v) {
            *si = (-theta * (vi - min_v)).exp();
            z += *si;
        }
        let ln_z = z.ln();
        for si in s.iter_mut() {
            *si /= z;
        }
        let w_home = w[0];
        let w_travel: f64 = w[1..].iter().sum();
        if w_home != 0.0 {
            value += w_home * ln_rho;
            grad.rho += w_home / b.rho;
        }
        if w_travel != 0.0 {
            value += w_travel * ln_travel;
            grad.rho -= w_travel / (1.0 - b.rho);
            let sv: f64 = s.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sdv: f64 = s.iter().zip(&dv).map(|(a, b)| a * b).sum();
            for k in 0..m {
                let wk = w[k + 1];
                if wk != 0.0 {
                    value += wk * (-theta * (v[k] - min_v) - ln_z);
                    grad.theta += wk * (sv - v[k]);
                    grad.eta += wk * theta * (sdv - dv[k]);
                }
            }
            if want_v1 {
                for j in 0..m {
                    grad.v1[j] -= theta * decay * (w[j + 1] - w_travel * s[j]);
                }
            }
        }
        let c = costs.day(t);
        for i in 0..m {
            dv[i] = (1.0 - b.eta) * dv[i] - v[i] + c[i];
            v[i] = (1.0 - b.eta) * v[i] + b.eta * c[i];
        }
        decay *= 1.0 - b.eta;
    }
    (value, grad)
}

/// Daily alternative counts as `days x (M + 1)` floats.
pub(crate) fn count_weights(counts: &CountSeries) -> Vec<f64> {
    (0..counts.days())
        .flat_map(|t| counts.day(t).iter().map(|&o| o as f64))
        .collect()
}

/// One-hot weights for one commuter.
pub(crate) fn choice_weights(choices: &[u16], routes: usize) -> Vec<f64> {
    let width = routes + 1;
    let mut w = vec![0.0; choices.len() * width];
    for (t, &c) in choices.iter().enumerate() {
        w[t * width + c as usize] = 1.0;
    }
    w
}

/// `sum_t [log N! - sum_i log o_t(i)!]`.
pub(crate) fn multinomial_constant(counts: &CountSeries) -> f64 {
    let ln_n = ln_gamma(counts.population() as f64 + 1.0);
    (0..counts.days())
        .map(|t| ln_n - counts.day(t).iter().map(|&o| ln_gamma(o as f64 + 1.0)).sum::<f64>())
        .sum()
}

pub(crate) fn check_costs(routes: usize, days: usize, costs: &CostSequence) -> Result<()> {
    if routes != costs.routes() {
        return Err(Error::dim(format!(
            "observations cover {routes} routes, costs cover {}",
            costs.routes()
        )));
    }
    if days > costs.days() {
        return Err(Error::dim(format!(
            "{days} observed days but only {} days of costs",
            costs.days()
        )));
    }
    Ok(())
}

fn check_rho_support(b: &Behavior, weights: &[f64], width: usize) -> Result<()> {
    if b.rho == 0.0 && weights.iter().step_by(width).any(|&w| w != 0.0) {
        return Err(Error::param("non-travel observed under rho = 0"));
    }
    Ok(())
}

/// Complete-data log-likelihood of the pooled model. Since every commuter
/// shares one valuation path, it only depends on the daily counts.
pub fn loglik_pooled(params: &PooledParams, traj: &ChoiceTrajectory, costs: &CostSequence, v1: &[f64]) -> Result<f64> {
    params.validate()?;
    check_costs(traj.routes(), traj.days(), costs)?;
    let v = params.initial_values(v1)?;
    let w = count_weights(&anonymize(traj));
    check_rho_support(&params.behavior(), &w, traj.routes() + 1)?;
    Ok(weighted_loglik(&params.behavior(), &v, costs, &w, false).0)
}

/// Multinomial log-likelihood of daily counts under the pooled model.
pub fn loglik_pooled_counts(
    params: &PooledParams,
    counts: &CountSeries,
    costs: &CostSequence,
    v1: &[f64],
) -> Result<f64> {
    params.validate()?;
    check_costs(counts.routes(), counts.days(), costs)?;
    let v = params.initial_values(v1)?;
    let w = count_weights(counts);
    check_rho_support(&params.behavior(), &w, counts.routes() + 1)?;
    Ok(weighted_loglik(&params.behavior(), &v, costs, &w, false).0 + multinomial_constant(counts))
}

/// Complete-data log-likelihood with one parameter triple per commuter.
pub fn loglik_hier(params: &[Behavior], traj: &ChoiceTrajectory, costs: &CostSequence, v1: &[f64]) -> Result<f64> {
    if params.len() != traj.commuters() {
        return Err(Error::dim(format!(
            "{} parameter triples for {} commuters",
            params.len(),
            traj.commuters()
        )));
    }
    check_costs(traj.routes(), traj.days(), costs)?;
    if v1.len() != traj.routes() {
        return Err(Error::dim("initial values do not match the route count"));
    }
    let mut total = 0.0;
    for (n, b) in params.iter().enumerate() {
        b.validate()?;
        let w = choice_weights(traj.commuter(n), traj.routes());
        check_rho_support(b, &w, traj.routes() + 1)?;
        total += weighted_loglik(b, v1, costs, &w, false).0;
    }
    Ok(total)
}

/// `log (1/N) sum_n exp(x_n)` columnwise over commuters.
pub(crate) fn mixture_log_probs(paths: &[Vec<f64>]) -> Vec<f64> {
    let len = paths[0].len();
    let ln_n = (paths.len() as f64).ln();
    (0..len)
        .map(|k| {
            let max = paths.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            max + paths.iter().map(|p| (p[k] - max).exp()).sum::<f64>().ln() - ln_n
        })
        .collect()
}

/// Multinomial approximation to the count law of a heterogeneous population:
/// each day's counts follow a multinomial with the population-average choice
/// probabilities.
pub fn loglik_hier_counts_approx(
    params: &[Behavior],
    counts: &CountSeries,
    costs: &CostSequence,
    v1: &[f64],
) -> Result<f64> {
    if params.len() != counts.population() as usize {
        return Err(Error::dim(format!(
            "{} parameter triples for a population of {}",
            params.len(),
            counts.population()
        )));
    }
    check_costs(counts.routes(), counts.days(), costs)?;
    if v1.len() != counts.routes() {
        return Err(Error::dim("initial values do not match the route count"));
    }
    for b in params {
        b.validate()?;
    }
    let paths: Vec<Vec<f64>> = params
        .iter()
        .map(|b| log_prob_path(b, v1, costs, counts.days()))
        .collect();
    let mix = mixture_log_probs(&paths);
    let w = count_weights(counts);
    let mut total = multinomial_constant(counts);
    for (wk, lp) in w.iter().zip(&mix) {
        if *wk != 0.0 {
            total += wk * lp;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{choice_probabilities, simulate_pooled};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_costs(seed: u64, days: usize, routes: usize) -> CostSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..days)
            .map(|_| (0..routes).map(|_| rng.random_range(5.0..25.0)).collect())
            .collect();
        CostSequence::new(0, rows).unwrap()
    }

    /// Step-by-step probability product, independent of the kernels above.
    fn oracle_pooled(b: &Behavior, v1: &[f64], traj: &ChoiceTrajectory, costs: &CostSequence) -> f64 {
        let mut total = 0.0;
        for n in 0..traj.commuters() {
            let mut v = v1.to_vec();
            for t in 0..traj.days() {
                let p = choice_probabilities(&v, b.theta, b.rho).unwrap();
                total += p[traj.choice(n, t)].ln();
                v = v
                    .iter()
                    .zip(costs.day(t))
                    .map(|(x, c)| (1.0 - b.eta) * x + b.eta * c)
                    .collect();
            }
        }
        total
    }

    #[test]
    fn single_term_examples() {
        let costs = CostSequence::new(0, vec![vec![10.0, 12.0]]).unwrap();
        let p = PooledParams::new(0.3, 1.0, 0.5);
        let home = ChoiceTrajectory::new(0, 2, vec![vec![0]]).unwrap();
        let route = ChoiceTrajectory::new(0, 2, vec![vec![1]]).unwrap();
        assert!((loglik_pooled(&p, &home, &costs, &[0.0, 0.0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((loglik_pooled(&p, &route, &costs, &[0.0, 0.0]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pooled_matches_probability_product() {
        let costs = random_costs(1, 3, 3);
        let b = Behavior::new(0.3, 1.0, 0.1).unwrap();
        let traj = simulate_pooled(&b, &[0.0; 3], &costs, 2, 5).unwrap();
        let ll = loglik_pooled(&PooledParams::new(0.3, 1.0, 0.1), &traj, &costs, &[0.0; 3]).unwrap();
        assert!((ll - oracle_pooled(&b, &[0.0; 3], &traj, &costs)).abs() < 1e-10);
    }

    #[test]
    fn counts_example_and_coefficient_identity() {
        let costs = CostSequence::new(0, vec![vec![10.0, 10.0]]).unwrap();
        let counts = CountSeries::new(0, vec![vec![0, 2, 1]]).unwrap();
        let p = PooledParams {
            eta: 0.5,
            theta: 1.0,
            rho: 0.0,
            delta: None,
        };
        let ll = loglik_pooled_counts(&p, &counts, &costs, &[0.0, 0.0]).unwrap();
        assert!((ll - (3f64.ln() - 3.0 * 2f64.ln())).abs() < 1e-14);

        let costs = random_costs(2, 6, 3);
        let b = Behavior::new(0.4, 0.6, 0.2).unwrap();
        let traj = simulate_pooled(&b, &[0.0; 3], &costs, 7, 9).unwrap();
        let counts = anonymize(&traj);
        let p = PooledParams::new(0.2, 1.3, 0.3);
        let lhs = loglik_pooled_counts(&p, &counts, &costs, &[0.0; 3]).unwrap();
        let rhs = loglik_pooled(&p, &traj, &costs, &[0.0; 3]).unwrap() + multinomial_constant(&counts);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    /// Direct multinomial pmf with factorials.
    fn multinomial_pmf(o: &[u32], p: &[f64]) -> f64 {
        let fact = |k: u32| (1..=k).map(|x| x as f64).product::<f64>();
        let n: u32 = o.iter().sum();
        fact(n) / o.iter().map(|&k| fact(k)).product::<f64>()
            * o.iter().zip(p).map(|(&k, &q)| q.powi(k as i32)).product::<f64>()
    }

    #[test]
    fn counts_match_multinomial_enumeration() {
        let costs = random_costs(3, 2, 2);
        let b = Behavior::new(0.35, 0.8, 0.25).unwrap();
        let rows = vec![vec![1, 2, 1], vec![0, 1, 3]];
        let counts = CountSeries::new(0, rows.clone()).unwrap();
        let ll = loglik_pooled_counts(&PooledParams::new(0.35, 0.8, 0.25), &counts, &costs, &[0.0; 2]).unwrap();
        let p1 = choice_probabilities(&[0.0, 0.0], 0.8, 0.25).unwrap();
        let v2: Vec<f64> = costs.day(0).iter().map(|c| 0.35 * c).collect();
        let p2 = choice_probabilities(&v2, 0.8, 0.25).unwrap();
        let oracle = multinomial_pmf(&rows[0], &p1).ln() + multinomial_pmf(&rows[1], &p2).ln();
        assert!((ll - oracle).abs() < 1e-10);
        let _ = b;
    }

    #[test]
    fn counts_pmf_normalizes() {
        let costs = CostSequence::new(0, vec![vec![10.0, 12.5, 9.0]]).unwrap();
        let p = PooledParams::new(0.3, 0.4, 0.2);
        for n in 1..=4u32 {
            let mut total = 0.0;
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let row = vec![a, b, c, n - a - b - c];
                        let counts = CountSeries::new(0, vec![row]).unwrap();
                        total += loglik_pooled_counts(&p, &counts, &costs, &[0.0; 3]).unwrap().exp();
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-12, "N={n}: {total}");
        }
    }

    #[test]
    fn hier_reduces_to_pooled_and_per_commuter_sum() {
        let costs = random_costs(4, 5, 3);
        let b = Behavior::new(0.3, 1.0, 0.1).unwrap();
        let traj = simulate_pooled(&b, &[0.0; 3], &costs, 3, 1).unwrap();
        let pooled = loglik_pooled(&PooledParams::new(0.3, 1.0, 0.1), &traj, &costs, &[0.0; 3]).unwrap();
        let hier = loglik_hier(&[b; 3], &traj, &costs, &[0.0; 3]).unwrap();
        assert!((pooled - hier).abs() < 1e-10);

        let triples = [
            Behavior::new(0.1, 0.5, 0.2).unwrap(),
            Behavior::new(0.6, 2.0, 0.05).unwrap(),
            Behavior::new(0.3, 0.9, 0.4).unwrap(),
        ];
        let hier = loglik_hier(&triples, &traj, &costs, &[0.0; 3]).unwrap();
        let oracle: f64 = triples
            .iter()
            .enumerate()
            .map(|(n, t)| {
                oracle_pooled(t, &[0.0; 3], &traj.truncate_commuters(n + 1).unwrap(), &costs)
                    - if n == 0 {
                        0.0
                    } else {
                        oracle_pooled(t, &[0.0; 3], &traj.truncate_commuters(n).unwrap(), &costs)
                    }
            })
            .sum();
        assert!((hier - oracle).abs() < 1e-10);
        let single = traj.truncate_commuters(1).unwrap();
        let pooled = loglik_pooled(&PooledParams::new(0.1, 0.5, 0.2), &single, &costs, &[0.0; 3]).unwrap();
        assert!((loglik_hier(&triples[..1], &single, &costs, &[0.0; 3]).unwrap() - pooled).abs() < 1e-12);
    }

    #[test]
    fn approx_reduces_to_pooled_counts_for_homogeneous_commuters() {
        let costs = random_costs(5, 6, 3);
        let b = Behavior::new(0.25, 0.7, 0.15).unwrap();
        let counts = anonymize(&simulate_pooled(&b, &[0.0; 3], &costs, 4, 2).unwrap());
        let approx = loglik_hier_counts_approx(&[b; 4], &counts, &costs, &[0.0; 3]).unwrap();
        let pooled = loglik_pooled_counts(&PooledParams::new(0.25, 0.7, 0.15), &counts, &costs, &[0.0; 3]).unwrap();
        assert!((approx - pooled).abs() < 1e-10);
    }

    #[test]
    fn equal_costs_make_eta_irrelevant() {
        let costs = CostSequence::new(0, vec![vec![12.0, 12.0, 12.0]; 8]).unwrap();
        let traj = simulate_pooled(&Behavior::new(0.3, 1.0, 0.2).unwrap(), &[0.0; 3], &costs, 5, 3).unwrap();
        let a = loglik_pooled(&PooledParams::new(0.1, 1.0, 0.2), &traj, &costs, &[0.0; 3]).unwrap();
        let b = loglik_pooled(&PooledParams::new(0.9, 1.0, 0.2), &traj, &costs, &[0.0; 3]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let costs = random_costs(6, 3, 2);
        let traj = ChoiceTrajectory::new(0, 2, vec![vec![0, 1, 2]]).unwrap();
        assert!(loglik_pooled(&PooledParams::new(1.0, 1.0, 0.1), &traj, &costs, &[0.0; 2]).is_err());
        assert!(loglik_pooled(&PooledParams::new(0.5, 1.0, 0.0), &traj, &costs, &[0.0; 2]).is_err());
        let wide = ChoiceTrajectory::new(0, 3, vec![vec![0, 1, 3]]).unwrap();
        assert!(loglik_pooled(&PooledParams::new(0.5, 1.0, 0.1), &wide, &costs, &[0.0; 3]).is_err());
        let long = ChoiceTrajectory::new(0, 2, vec![vec![0; 4]]).unwrap();
        assert!(loglik_pooled(&PooledParams::new(0.5, 1.0, 0.1), &long, &costs, &[0.0; 2]).is_err());
        assert!(loglik_hier(&[], &traj, &costs, &[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn common_shift_of_initial_values_is_invisible(
            k in -50.0f64..50.0,
            d in prop::collection::vec(-5.0f64..5.0, 2),
            eta in 0.05f64..0.95,
        ) {
            let costs = random_costs(7, 6, 3);
            let traj = simulate_pooled(&Behavior::new(0.3, 1.0, 0.2).unwrap(), &[0.0; 3], &costs, 3, 4).unwrap();
            let p = PooledParams::new(eta, 0.8, 0.2).with_delta(d);
            let a = loglik_pooled(&p, &traj, &costs, &[0.0; 3]).unwrap();
            let b = loglik_pooled(&p, &traj, &costs, &[k; 3]).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
