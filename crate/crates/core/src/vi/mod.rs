//! Variational inference: factorized posterior approximations fitted one
//! source at a time by a Newton trust-region method.

mod elbo;
mod fit;
mod kernel;
mod kl;
mod moments;
mod newton;
mod params;

pub use elbo::{elbo, ElboValue, Neighborhood, SourceObjective};
pub use fit::{
    add_variational_source, build_neighborhood, isolated_neighborhood, optimize_source, refine_source, Region,
    VariationalFit,
};
pub use kernel::{spatial_jets, SpatialJets};
pub use kl::{bernoulli_kl, gmm_kl_bound, kl_source, normal_kl, optimal_xi, ColorComponent};
pub use moments::{brightness_moments, expected_lambda, expected_log_lambda, source_rate_moments};
pub use newton::{newton_trust_region, trust_region_step, NewtonOptions, NewtonResult};
pub use params::{initial_variational, Chart, Layout, VariationalParams};
