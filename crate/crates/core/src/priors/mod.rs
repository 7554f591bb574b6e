//! Source prior: hyperparameters, density, sampling and empirical-Bayes fitting.

mod fit;
mod gmm;
mod io;
mod params;

pub use fit::{fit_beta, fit_log_normal, fit_priors, trigamma, PriorFit};
pub use gmm::{fit_gmm, log_sum_exp, EmFit, EmOptions, Gmm};
pub use params::{type_index, BetaParams, LogNormal, PriorParams, SkyWindow, GALAXY, STAR};
