//! Coverage of the truth by posterior mean plus or minus k SDs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SourceParams;
use crate::posterior::{Moments, PosteriorSummary};

use super::score::ScoreTable;

/// Half-widths, in posterior SDs, of the intervals checked for coverage.
pub const SD_MULTIPLES: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// Posterior moments and true values for one field.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationInput {
    pub field: String,
    pub pairs: Vec<(Moments, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub field: String,
    pub count: usize,
    /// Proportion within each of [`SD_MULTIPLES`].
    pub proportions: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    /// Checks that proportions lie in [0, 1] and never decrease with k.
    pub fn check(&self) -> Result<()> {
        for r in &self.rows {
            let in_range = r.proportions.iter().all(|p| (0.0..=1.0).contains(p));
            let monotone = r.proportions.windows(2).all(|w| w[0] <= w[1]);
            if !in_range || !monotone {
                return Err(Error::Scoring(format!(
                    "calibration row {} is invalid: {:?}",
                    r.field, r.proportions
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, field: &str) -> Option<&CalibrationRow> {
        self.rows.iter().find(|r| r.field == field)
    }
}

/// Per field, the share of sources with `|truth - mean| <= k * sd`.
pub fn calibration(inputs: &[CalibrationInput]) -> Result<CalibrationTable> {
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut within = [0usize; 4];
        for (m, truth) in &input.pairs {
            if !(m.sd > 0.0) || !m.mean.is_finite() {
                return Err(Error::Scoring(format!(
                    "{}: posterior sd {} is not positive",
                    input.field, m.sd
                )));
            }
            let z = (truth - m.mean).abs() / m.sd;
            for (w, k) in within.iter_mut().zip(SD_MULTIPLES) {
                *w += (z <= k) as usize;
            }
        }
        let n = input.pairs.len();
        let proportions = within.map(|w| if n == 0 { 0.0 } else { w as f64 / n as f64 });
        rows.push(CalibrationRow {
            field: input.field.clone(),
            count: n,
            proportions,
        });
    }
    let table = CalibrationTable { rows };
    table.check()?;
    Ok(table)
}

/// Log flux and color moments of matched estimates with their true values.
pub fn calibration_inputs(
    estimates: &[PosteriorSummary],
    truth: &[SourceParams],
    scores: &ScoreTable,
) -> Vec<CalibrationInput> {
    let num_colors = truth.first().map_or(0, |s| s.colors.len());
    let mut out = vec![CalibrationInput {
        field: "log_flux".into(),
        pairs: Vec::new(),
    }];
    out.extend((0..num_colors).map(|i| CalibrationInput {
        field: format!("color_{i}"),
        pairs: Vec::new(),
    }));
    for p in &scores.pairs {
        let (e, t) = (&estimates[p.estimate], &truth[p.truth]);
        out[0].pairs.push((e.log_flux, t.ref_flux.ln()));
        for i in 0..num_colors {
            out[1 + i].pairs.push((e.colors[i], t.colors[i]));
        }
    }
    out
}

/// Appends `more` to `into` field by field.
pub fn pool_inputs(into: &mut Vec<CalibrationInput>, more: Vec<CalibrationInput>) {
    for m in more {
        match into.iter_mut().find(|i| i.field == m.field) {
            Some(i) => i.pairs.extend(m.pairs),
            None => into.push(m),
        }
    }
}
