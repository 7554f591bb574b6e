//! Annealed importance sampling over a generic prior-times-likelihood target.

use rand::Rng;

use super::slice::{slice_sample, Support};
use crate::error::{Error, Result};

/// Prior and likelihood of a fixed-dimension target in unconstrained
/// coordinates. Methods take `&mut self` so implementations can cache.
pub trait AnnealTarget {
    fn dim(&self) -> usize;
    fn support(&self, coord: usize) -> Support;
    /// Initial slice bracket width.
    fn width(&self, coord: usize) -> f64;
    fn sample_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64>;
    /// Normalized log prior density.
    fn log_prior(&mut self, x: &[f64]) -> f64;
    fn log_likelihood(&mut self, x: &[f64]) -> f64;
}

/// `log prior + gamma * log likelihood`, or `-inf` outside the support.
pub fn tempered_log_density<T: AnnealTarget>(target: &mut T, x: &[f64], gamma: f64) -> f64 {
    let lp = target.log_prior(x);
    if !lp.is_finite() {
        return f64::NEG_INFINITY;
    }
    if gamma == 0.0 {
        return lp;
    }
    let ll = target.log_likelihood(x);
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp + gamma * ll
    }
}

/// One slice-sampling-within-Gibbs sweep over every coordinate in order,
/// targeting the tempered density at `gamma`.
pub fn within_gibbs_transition<T: AnnealTarget, R: Rng + ?Sized>(
    target: &mut T,
    x: &mut [f64],
    gamma: f64,
    rng: &mut R,
) -> Result<()> {
    for i in 0..target.dim() {
        let support = target.support(i);
        let width = target.width(i);
        let mut probe = x.to_vec();
        let new = slice_sample(
            |v| {
                probe[i] = v;
                tempered_log_density(target, &probe, gamma)
            },
            x[i],
            width,
            support,
            rng,
        )?;
        x[i] = new;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AisConfig {
    /// Number of annealing transitions T.
    pub temperatures: usize,
    /// Independent AIS runs per source type N'.
    pub chains: usize,
    /// Posterior slice sweeps after each run B'.
    pub post_steps: usize,
    pub seed: u64,
    /// Explicit schedule `0 = g_0 < ... < g_T = 1`; quadratic when `None`.
    pub schedule: Option<Vec<f64>>,
}

impl AisConfig {
    /// Reduced settings for desk-scale runs on a few cores.
    pub fn desk() -> Self {
        Self {
            temperatures: 40,
            chains: 6,
            post_steps: 25,
            seed: 0,
            schedule: None,
        }
    }

    pub fn schedule(&self) -> Vec<f64> {
        match &self.schedule {
            Some(s) => s.clone(),
            None => {
                let t = self.temperatures as f64;
                (0..=self.temperatures).map(|i| (i as f64 / t).powi(2)).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperatures == 0 || self.chains == 0 {
            return Err(Error::InvalidParameter("AIS needs T >= 1 and N' >= 1".into()));
        }
        let s = self.schedule();
        let ok = s.len() == self.temperatures + 1
            && s[0] == 0.0
            && s[s.len() - 1] == 1.0
            && s.windows(2).all(|w| w[1] > w[0]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "temperature schedule must rise strictly from 0 to 1".into(),
            ))
        }
    }
}

impl Default for AisConfig {
    /// The full-size settings: T = 200, N' = 25, B' = 25.
    fn default() -> Self {
        Self {
            temperatures: 200,
            chains: 25,
            post_steps: 25,
            seed: 0,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AisRun {
    pub log_weight: f64,
    pub state: Vec<f64>,
}

/// One annealing run from a prior draw. The weight accumulates
/// `(g_t - g_{t-1}) * log likelihood(z_{t-1})` before each transition.
pub fn run_ais<T: AnnealTarget, R: Rng + ?Sized>(target: &mut T, schedule: &[f64], rng: &mut R) -> Result<AisRun> {
    let mut x = target.sample_prior(rng);
    let mut log_weight = 0.0;
    for t in 1..schedule.len() {
        let ll = target.log_likelihood(&x);
        let inc = (schedule[t] - schedule[t - 1]) * ll;
        if !inc.is_finite() {
            return Err(Error::NonFiniteWeight { step: t });
        }
        log_weight += inc;
        within_gibbs_transition(target, &mut x, schedule[t], rng)?;
    }
    Ok(AisRun { log_weight, state: x })
}

/// `log(mean(exp(v)))`, stable.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    crate::priors::log_sum_exp(values) - (values.len() as f64).ln()
}
