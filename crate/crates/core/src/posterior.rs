//! Per-source posterior summaries written by both inference engines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{GalaxyShape, SourceParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, sd: var.sqrt() }
    }

    /// Moments of the two-component mixture `p * star + (1 - p) * galaxy`.
    pub fn mix(star_prob: f64, galaxy: Moments, star: Moments) -> Self {
        let p = star_prob;
        let mean = p * star.mean + (1.0 - p) * galaxy.mean;
        let second = p * (star.sd.powi(2) + star.mean.powi(2)) + (1.0 - p) * (galaxy.sd.powi(2) + galaxy.mean.powi(2));
        Self {
            mean,
            sd: (second - mean * mean).max(0.0).sqrt(),
        }
    }
}

/// Type-conditional marginals of the log reference flux and the colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMoments {
    pub log_flux: Moments,
    pub colors: Vec<Moments>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub source: usize,
    pub star_prob: f64,
    /// Posterior mean direction, degrees.
    pub direction: [f64; 2],
    /// Type-marginal moments of the log reference flux.
    pub log_flux: Moments,
    pub colors: Vec<Moments>,
    /// Galaxy-conditional shape estimate.
    pub shape: GalaxyShape,
    /// Indexed galaxy first, star second.
    pub per_type: [TypeMoments; 2],
    /// Effective sample sizes by parameter name (sampling only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ess: BTreeMap<String, f64>,
    /// Wall-clock seconds spent on this source.
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SourceParams>>,
}

impl PosteriorSummary {
    /// Point estimate: most probable type, posterior means elsewhere.
    pub fn point_estimate(&self) -> SourceParams {
        SourceParams {
            is_star: self.star_prob > 0.5,
            direction: self.direction,
            ref_flux: self.log_flux.mean.exp(),
            colors: self.colors.iter().map(|m| m.mean).collect(),
            shape: self.shape,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[PosteriorSummary]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PosteriorSummary>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
