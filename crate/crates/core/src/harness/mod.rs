//! Evaluation against ground truth: matching and error tables, ROC curves,
//! calibration of posterior SDs, and timing.

mod calibration;
mod output;
mod roc;
mod run;
mod score;
mod timing;

pub use calibration::{
    calibration, calibration_inputs, pool_inputs, CalibrationInput, CalibrationRow, CalibrationTable, SD_MULTIPLES,
};
pub use output::{
    read_json, write_calibration_csv, write_json, write_roc_csv, write_scores_csv, Manifest, ManifestStep,
    CALIBRATION_HEADER, MANIFEST_FILE, ROC_HEADER, SCORES_HEADER,
};
pub use roc::{roc_auc, RocCurve, RocPoint};
pub use run::{detect, run_mcmc, run_vi, McmcRun, RunConfig, ViRun};
pub use score::{
    angle_error, match_sources, paired_differences, score, Field, FieldScore, Match, PairErrors, PairedDifference,
    ScoreTable, DEFAULT_MATCH_RADIUS,
};
pub use timing::{timing_report, TimingReport, ESS_PARAMETER};
