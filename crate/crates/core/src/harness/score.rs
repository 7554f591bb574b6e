//! Matching estimates to ground truth and per-field absolute errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AffineWcs, SourceParams};
use crate::posterior::PosteriorSummary;

/// Default matching radius, pixels.
pub const DEFAULT_MATCH_RADIUS: f64 = 1.0;

/// A scored quantity. Galaxy-only fields are scored over true galaxies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    /// Distance between estimated and true position, pixels.
    Direction,
    LogFlux,
    Color(usize),
    Profile,
    AxisRatio,
    /// Half-light radius, arcseconds.
    Radius,
    /// Major-axis angle, degrees, folded into [0, 90].
    Angle,
}

impl Field {
    pub fn all(num_colors: usize) -> Vec<Field> {
        let mut out = vec![Field::Direction, Field::LogFlux];
        out.extend((0..num_colors).map(Field::Color));
        out.extend([Field::Profile, Field::AxisRatio, Field::Radius, Field::Angle]);
        out
    }

    pub fn name(&self) -> String {
        match self {
            Field::Direction => "direction".into(),
            Field::LogFlux => "log_flux".into(),
            Field::Color(i) => format!("color_{i}"),
            Field::Profile => "profile".into(),
            Field::AxisRatio => "axis_ratio".into(),
            Field::Radius => "half_light_radius".into(),
            Field::Angle => "angle".into(),
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            Field::Direction => "pixels",
            Field::LogFlux => "ln nanomaggies",
            Field::Color(_) => "ln flux ratio",
            Field::Profile | Field::AxisRatio => "fraction",
            Field::Radius => "arcseconds",
            Field::Angle => "degrees",
        }
    }

    pub fn galaxy_only(&self) -> bool {
        matches!(self, Field::Profile | Field::AxisRatio | Field::Radius | Field::Angle)
    }
}

/// Absolute difference of two axis angles in degrees, folded into [0, 90].
pub fn angle_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub estimate: usize,
    pub truth: usize,
    /// Pixels.
    pub distance: f64,
}

/// Greedy nearest-neighbor matching: candidate pairs within `radius` are
/// taken in order of increasing distance, each point used at most once.
pub fn match_sources(estimates: &[[f64; 2]], truth: &[[f64; 2]], radius: f64) -> Vec<Match> {
    let mut candidates = Vec::new();
    for (e, a) in estimates.iter().enumerate() {
        for (t, b) in truth.iter().enumerate() {
            let distance = (a[0] - b[0]).hypot(a[1] - b[1]);
            if distance <= radius {
                candidates.push(Match {
                    estimate: e,
                    truth: t,
                    distance,
                });
            }
        }
    }
    candidates.sort_by(|x, y| {
        x.distance
            .total_cmp(&y.distance)
            .then(x.truth.cmp(&y.truth))
            .then(x.estimate.cmp(&y.estimate))
    });
    let mut used_e = vec![false; estimates.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for m in candidates {
        if !used_e[m.estimate] && !used_t[m.truth] {
            used_e[m.estimate] = true;
            used_t[m.truth] = true;
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.truth);
    out
}

/// One matched pair's errors, aligned with [`ScoreTable::fields`]; `None`
/// where the field does not apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairErrors {
    pub truth: usize,
    pub estimate: usize,
    pub is_star: bool,
    pub star_prob: f64,
    pub errors: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldScore {
    pub field: Field,
    /// `None` when no matched pair carries the field.
    pub mae: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub truth_count: usize,
    pub estimate_count: usize,
    pub matched: usize,
    pub unmatched_estimates: usize,
    pub unmatched_truth: usize,
    pub fields: Vec<FieldScore>,
    pub pairs: Vec<PairErrors>,
}

fn pair_errors(fields: &[Field], est: &PosteriorSummary, truth: &SourceParams, distance: f64) -> Vec<Option<f64>> {
    fields
        .iter()
        .map(|f| {
            if f.galaxy_only() && truth.is_star {
                return None;
            }
            Some(match *f {
                Field::Direction => distance,
                Field::LogFlux => (est.log_flux.mean - truth.ref_flux.ln()).abs(),
                Field::Color(i) => (est.colors[i].mean - truth.colors[i]).abs(),
                Field::Profile => (est.shape.profile_weight - truth.shape.profile_weight).abs(),
                Field::AxisRatio => (est.shape.axis_ratio - truth.shape.axis_ratio).abs(),
                Field::Radius => (est.shape.half_light_radius - truth.shape.half_light_radius).abs(),
                Field::Angle => angle_error(est.shape.angle, truth.shape.angle),
            })
        })
        .collect()
}

fn summarize(fields: &[Field], pairs: &[PairErrors]) -> Vec<FieldScore> {
    fields
        .iter()
        .enumerate()
        .map(|(k, &field)| {
            let values: Vec<f64> = pairs.iter().filter_map(|p| p.errors[k]).collect();
            let count = values.len();
            FieldScore {
                field,
                mae: (count > 0).then(|| values.iter().sum::<f64>() / count as f64),
                count,
            }
        })
        .collect()
}

/// Matches `estimates` to `truth` by pixel position under `wcs` and tallies
/// absolute errors of posterior means over matched pairs.
pub fn score(
    estimates: &[PosteriorSummary],
    truth: &[SourceParams],
    wcs: &AffineWcs,
    radius: f64,
) -> Result<ScoreTable> {
    let num_colors = truth
        .first()
        .map(|s| s.colors.len())
        .ok_or_else(|| Error::Scoring("empty truth catalog".into()))?;
    if estimates.iter().any(|e| e.colors.len() != num_colors) || truth.iter().any(|t| t.colors.len() != num_colors) {
        return Err(Error::Scoring(
            "estimates and truth disagree on the number of colors".into(),
        ));
    }
    let est_px: Vec<[f64; 2]> = estimates.iter().map(|e| wcs.to_pixel(e.direction)).collect();
    let true_px: Vec<[f64; 2]> = truth.iter().map(|t| wcs.to_pixel(t.direction)).collect();
    let matches = match_sources(&est_px, &true_px, radius);
    if matches.is_empty() {
        return Err(Error::Scoring(format!(
            "no estimate lies within {radius} px of a true source"
        )));
    }
    let fields = Field::all(num_colors);
    let pairs: Vec<PairErrors> = matches
        .iter()
        .map(|m| {
            let (e, t) = (&estimates[m.estimate], &truth[m.truth]);
            PairErrors {
                truth: m.truth,
                estimate: m.estimate,
                is_star: t.is_star,
                star_prob: e.star_prob,
                errors: pair_errors(&fields, e, t, m.distance),
            }
        })
        .collect();
    Ok(ScoreTable {
        truth_count: truth.len(),
        estimate_count: estimates.len(),
        matched: pairs.len(),
        unmatched_estimates: estimates.len() - pairs.len(),
        unmatched_truth: truth.len() - pairs.len(),
        fields: summarize(&fields, &pairs),
        pairs,
    })
}

impl ScoreTable {
    pub fn field(&self, field: Field) -> Option<&FieldScore> {
        self.fields.iter().find(|f| f.field == field)
    }

    /// Star probabilities and true labels of the matched pairs.
    pub fn classification(&self) -> (Vec<f64>, Vec<bool>) {
        self.pairs.iter().map(|p| (p.star_prob, p.is_star)).unzip()
    }

    /// Concatenates tables from separate scenes. Source indices are offset
    /// so that they stay unique within the pooled table.
    pub fn pool(tables: &[ScoreTable]) -> Result<ScoreTable> {
        let first = tables.first().ok_or_else(|| Error::Scoring("nothing to pool".into()))?;
        let fields: Vec<Field> = first.fields.iter().map(|f| f.field).collect();
        let (mut truth_off, mut est_off) = (0, 0);
        let mut pairs = Vec::new();
        for t in tables {
            if t.fields.iter().map(|f| f.field).ne(fields.iter().copied()) {
                return Err(Error::Scoring("pooled tables have different fields".into()));
            }
            pairs.extend(t.pairs.iter().map(|p| PairErrors {
                truth: p.truth + truth_off,
                estimate: p.estimate + est_off,
                ..p.clone()
            }));
            truth_off += t.truth_count;
            est_off += t.estimate_count;
        }
        let sum = |f: fn(&ScoreTable) -> usize| tables.iter().map(f).sum::<usize>();
        Ok(ScoreTable {
            truth_count: truth_off,
            estimate_count: est_off,
            matched: pairs.len(),
            unmatched_estimates: sum(|t| t.unmatched_estimates),
            unmatched_truth: sum(|t| t.unmatched_truth),
            fields: summarize(&fields, &pairs),
            pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub field: Field,
    /// Mean over true sources matched by both methods of `error_a - error_b`.
    pub mean: Option<f64>,
    /// Standard error of that mean.
    pub se: Option<f64>,
    pub count: usize,
}

/// Per-field differences in absolute error between two methods scored
/// against the same truth catalog, over sources both methods matched.
pub fn paired_differences(a: &ScoreTable, b: &ScoreTable) -> Result<Vec<PairedDifference>> {
    if a.truth_count != b.truth_count || a.fields.len() != b.fields.len() {
        return Err(Error::Scoring("tables were scored against different catalogs".into()));
    }
    let mut by_truth = vec![None; b.truth_count];
    for p in &b.pairs {
        by_truth[p.truth] = Some(p);
    }
    Ok(a.fields
        .iter()
        .enumerate()
        .map(|(k, fs)| {
            let d: Vec<f64> = a
                .pairs
                .iter()
                .filter_map(|pa| {
                    let pb = by_truth[pa.truth]?;
                    Some(pa.errors[k]? - pb.errors[k]?)
                })
                .collect();
            let n = d.len();
            let mean = (n > 0).then(|| d.iter().sum::<f64>() / n as f64);
            let se = mean.filter(|_| n > 1).map(|m| {
                let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            });
            PairedDifference {
                field: fs.field,
                mean,
                se,
                count: n,
            }
        })
        .collect())
}
