//! Effective sample size by Geyer's initial positive sequence.

use crate::error::{Error, Result};

pub fn effective_sample_size(xs: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("{n} samples; ESS needs at least 10")));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let c0 = autocov(0);
    if !(c0 > 0.0) || c0 <= 1e-24 * mean * mean {
        return Err(Error::ConstantSequence);
    }
    // tau = -1 + 2 sum_k Gamma_k with Gamma_k = rho(2k) + rho(2k+1), summed while
    // positive and forced non-increasing (initial monotone sequence)
    let mut tau = -1.0;
    let mut k = 0;
    let mut prev = f64::INFINITY;
    while 2 * k + 1 < n {
        let gamma = (autocov(2 * k) + autocov(2 * k + 1)) / c0;
        if gamma <= 0.0 {
            break;
        }
        let gamma = gamma.min(prev);
        tau += 2.0 * gamma;
        prev = gamma;
        k += 1;
    }
    let ess = if tau > 0.0 { n as f64 / tau } else { n as f64 };
    Ok(ess.min(n as f64))
}
