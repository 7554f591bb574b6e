//! Per-source wall time of the two engines and sampler efficiency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::PosteriorSummary;

/// Parameter whose effective sample size is reported.
pub const ESS_PARAMETER: &str = "log_flux";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub vi_sources: usize,
    pub mcmc_sources: usize,
    pub vi_seconds_per_source: f64,
    pub mcmc_seconds_per_source: f64,
    /// MCMC seconds per source over VI seconds per source.
    pub mcmc_to_vi_ratio: f64,
    pub ess_parameter: String,
    /// Summed over sources that report an ESS.
    pub mcmc_ess: f64,
    /// Seconds spent on those same sources.
    pub mcmc_ess_seconds: f64,
    pub mcmc_ess_per_second: Option<f64>,
}

fn mean_seconds(xs: &[PosteriorSummary]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Scoring("no sources to time".into()));
    }
    Ok(xs.iter().map(|s| s.seconds).sum::<f64>() / xs.len() as f64)
}

pub fn timing_report(vi: &[PosteriorSummary], mcmc: &[PosteriorSummary]) -> Result<TimingReport> {
    let vi_mean = mean_seconds(vi)?;
    let mcmc_mean = mean_seconds(mcmc)?;
    let (mut ess, mut secs) = (0.0, 0.0);
    for s in mcmc {
        if let Some(e) = s.ess.get(ESS_PARAMETER) {
            ess += e;
            secs += s.seconds;
        }
    }
    Ok(TimingReport {
        vi_sources: vi.len(),
        mcmc_sources: mcmc.len(),
        vi_seconds_per_source: vi_mean,
        mcmc_seconds_per_source: mcmc_mean,
        mcmc_to_vi_ratio: mcmc_mean / vi_mean,
        ess_parameter: ESS_PARAMETER.into(),
        mcmc_ess: ess,
        mcmc_ess_seconds: secs,
        mcmc_ess_per_second: (secs > 0.0).then(|| ess / secs),
    })
}
