use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest population for which [`pmd_exact_pmf`] enumerates assignments.
pub const PMD_ENUMERATION_LIMIT: usize = 10;

fn check_vectors(probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::data("need at least one probability vector"))?;
    for (n, p) in probs.iter().enumerate() {
        if p.len() != k {
            return Err(Error::dim(format!("vector {n} has {} entries, expected {k}", p.len())));
        }
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::data(format!("vector {n} is not a probability vector")));
        }
    }
    Ok(k)
}

/// Mean and covariance of the sum of independent categorical indicators.
pub fn pmd_moments(probs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = check_vectors(probs)?;
    let mut mean = DVector::zeros(k);
    let mut cov = DMatrix::zeros(k, k);
    for p in probs {
        let p = DVector::from_column_slice(p);
        cov += DMatrix::from_diagonal(&p) - &p * p.transpose();
        mean += p;
    }
    Ok((mean, cov))
}

/// Mean and covariance of a multinomial with `n` trials and probabilities `p`.
pub fn multinomial_moments(n: usize, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = DVector::from_column_slice(p);
    let nf = n as f64;
    let cov = (DMatrix::from_diagonal(&p) - &p * p.transpose()) * nf;
    (p * nf, cov)
}

/// Exact probability of a count outcome, by enumerating commuter assignments.
/// Outcomes with a negative entry have probability zero.
pub fn pmd_exact_pmf(probs: &[Vec<f64>], outcome: &[i64]) -> Result<f64> {
    let k = check_vectors(probs)?;
    if probs.len() > PMD_ENUMERATION_LIMIT {
        return Err(Error::param(format!(
            "exact enumeration is limited to {PMD_ENUMERATION_LIMIT} commuters, got {}",
            probs.len()
        )));
    }
    if outcome.len() != k {
        return Err(Error::dim(format!(
            "outcome has {} entries, expected {k}",
            outcome.len()
        )));
    }
    if outcome.iter().any(|&o| o < 0) || outcome.iter().sum::<i64>() != probs.len() as i64 {
        return Ok(0.0);
    }
    fn go(probs: &[Vec<f64>], remaining: &mut [i64]) -> f64 {
        let Some((p, rest)) = probs.split_first() else {
            return 1.0;
        };
        let mut total = 0.0;
        for i in 0..remaining.len() {
            if remaining[i] > 0 && p[i] > 0.0 {
                remaining[i] -= 1;
                total += p[i] * go(rest, remaining);
                remaining[i] += 1;
            }
        }
        total
    }
    Ok(go(probs, &mut outcome.to_vec()))
}
