//! Annealed importance sampling with slice-sampling-within-Gibbs.

mod ais;
mod classify;
mod ess;
mod slice;
mod source;

pub use ais::{log_mean_exp, run_ais, tempered_log_density, within_gibbs_transition, AisConfig, AisRun, AnnealTarget};
pub use classify::{
    classify_and_sample, coordinate_names, gibbs_sweep, posterior_star_prob, sample_source, source_rng,
    SourcePosterior, DIRECTION_BOX,
};
pub use ess::effective_sample_size;
pub use slice::{slice_sample, Support};
pub use source::{logit_beta_log_density, SourceTarget};
