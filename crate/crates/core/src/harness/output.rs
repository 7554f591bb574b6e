//! Run-directory files: CSV tables with fixed headers and a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::calibration::CalibrationTable;
use super::roc::RocCurve;
use super::run::RunConfig;
use super::score::{paired_differences, ScoreTable};

/// Columns of `scores.csv`. One row per field. Log flux errors are in
/// natural-log units; direction errors are in pixels of the first image.
/// The paired columns hold the mean of VI error minus MCMC error over
/// true sources both methods matched, with its standard error.
pub const SCORES_HEADER: [&str; 9] = [
    "field",
    "unit",
    "vi_mae",
    "vi_count",
    "mcmc_mae",
    "mcmc_count",
    "vi_minus_mcmc",
    "vi_minus_mcmc_se",
    "paired_count",
];

/// Columns of `roc.csv`. The first row of each method has an infinite
/// threshold.
pub const ROC_HEADER: [&str; 4] = ["method", "threshold", "false_positive_rate", "true_positive_rate"];

/// Columns of `calibration.csv`: proportions of sources whose true value is
/// within 0.5, 1, 2 and 3 posterior SDs of the posterior mean.
pub const CALIBRATION_HEADER: [&str; 7] = [
    "method",
    "field",
    "count",
    "within_0.5sd",
    "within_1sd",
    "within_2sd",
    "within_3sd",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_scores_csv<W: Write>(out: W, vi: Option<&ScoreTable>, mcmc: Option<&ScoreTable>) -> Result<()> {
    let fields = vi
        .or(mcmc)
        .ok_or_else(|| Error::Scoring("no score table to write".into()))?
        .fields
        .iter()
        .map(|f| f.field)
        .collect::<Vec<_>>();
    let paired = match (vi, mcmc) {
        (Some(a), Some(b)) => Some(paired_differences(a, b)?),
        _ => None,
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORES_HEADER).map_err(csv_err)?;
    for (k, field) in fields.iter().enumerate() {
        let cell = |t: Option<&ScoreTable>| -> (String, String) {
            t.and_then(|t| t.field(*field))
                .map(|s| (opt(s.mae), s.count.to_string()))
                .unwrap_or_default()
        };
        let (vm, vc) = cell(vi);
        let (mm, mc) = cell(mcmc);
        let (d, se, n) = paired
            .as_ref()
            .map(|p| (opt(p[k].mean), opt(p[k].se), p[k].count.to_string()))
            .unwrap_or_default();
        w.write_record([field.name(), field.unit().to_string(), vm, vc, mm, mc, d, se, n])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(out: W, curves: &[(&str, &RocCurve)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROC_HEADER).map_err(csv_err)?;
    for (method, curve) in curves {
        for p in &curve.points {
            w.write_record([
                method.to_string(),
                p.threshold.to_string(),
                p.false_positive_rate.to_string(),
                p.true_positive_rate.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_csv<W: Write>(out: W, tables: &[(&str, &CalibrationTable)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CALIBRATION_HEADER).map_err(csv_err)?;
    for (method, table) in tables {
        table.check()?;
        for r in &table.rows {
            let mut rec = vec![method.to_string(), r.field.clone(), r.count.to_string()];
            rec.extend(r.proportions.iter().map(|p| p.to_string()));
            w.write_record(rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub command: String,
    /// Effective configuration of this step.
    pub config: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub seconds: f64,
}

/// Record of a run directory: the configuration and seed it was created
/// with, and every step that wrote into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub prior: Option<String>,
    pub steps: Vec<ManifestStep>,
}

impl Manifest {
    pub fn new(config: &RunConfig, prior: Option<String>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.to_key_values().to_map(),
            prior,
            steps: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn record(&mut self, command: &str, config: &RunConfig, files: &[&str], seconds: f64) {
        self.steps.push(ManifestStep {
            command: command.to_string(),
            config: config.to_key_values().to_map(),
            files: files.iter().map(|f| f.to_string()).collect(),
            seconds,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::calibration::CalibrationRow;
    use crate::harness::roc::roc_auc;
    use crate::harness::score::{Field, FieldScore, PairErrors};

    fn table(errors: [f64; 2]) -> ScoreTable {
        let pairs: Vec<PairErrors> = (0..2)
            .map(|i| PairErrors {
                truth: i,
                estimate: i,
                is_star: i == 0,
                star_prob: 0.5,
                errors: vec![Some(errors[i])],
            })
            .collect();
        ScoreTable {
            truth_count: 2,
            estimate_count: 2,
            matched: 2,
            unmatched_estimates: 0,
            unmatched_truth: 0,
            fields: vec![FieldScore {
                field: Field::LogFlux,
                mae: Some(0.5 * (errors[0] + errors[1])),
                count: 2,
            }],
            pairs,
        }
    }

    #[test]
    fn scores_csv_has_fixed_header_and_paired_columns() {
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, Some(&table([0.5, 0.25])), Some(&table([0.25, 0.25]))).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SCORES_HEADER.join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "log_flux");
        assert_eq!(row[2], "0.375");
        assert_eq!(row[6], "0.125");
        assert_eq!(row[8], "2");
    }

    #[test]
    fn roc_and_calibration_csv() {
        let curve = roc_auc(&[0.9, 0.1], &[true, false]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &[("vi", &curve)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + curve.points.len());
        assert!(text.lines().nth(1).unwrap().starts_with("vi,inf,0,0"));

        let bad = CalibrationTable {
            rows: vec![CalibrationRow {
                field: "log_flux".into(),
                count: 1,
                proportions: [1.0, 0.0, 1.0, 1.0],
            }],
        };
        assert!(write_calibration_csv(Vec::new(), &[("mcmc", &bad)]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(&RunConfig::default(), None);
        m.record("simulate", &RunConfig::default(), &["scene"], 0.5);
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }
}
