//! The generative model: light kernels, pixel rates and the Poisson likelihood.

mod kernel;
mod profile;
mod rate;
mod types;

pub use kernel::{band_fluxes, color_weights, colors_from_fluxes, galaxy_covariance, galaxy_mixture};
pub use profile::ProfileTable;
pub use rate::{
    add_source_rates, galaxy_contribution, galaxy_sigma_max, ln_factorial, log_likelihood, pixel_rate, point_response,
    poisson_log_pmf, render_rates, star_contribution, truncation_radius, PixelGaussian, PixelKernel,
    NEGLIGIBLE_MAHALANOBIS2, TRUNCATION_SIGMAS,
};
pub use types::{
    det2, max_eigenvalue, AffineWcs, GalaxyShape, GaussianComponent, ImageModel, SkyGrid, SourceParams,
    ARCSEC_PER_DEGREE,
};

/// Zero-based index of the reference band (the third of five, r).
pub const DEFAULT_REF_BAND: usize = 2;
