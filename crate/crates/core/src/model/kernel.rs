//! Light kernels and band fluxes.

use super::profile::ProfileTable;
use super::types::{GalaxyShape, GaussianComponent, ARCSEC_PER_DEGREE};

/// Spatial covariance `R^T diag(r^2, (q r)^2) R` in arcsec^2, with `R` the
/// rotation by the shape angle.
pub fn galaxy_covariance(shape: &GalaxyShape) -> [[f64; 2]; 2] {
    let (s, c) = shape.angle.to_radians().sin_cos();
    let major = shape.half_light_radius * shape.half_light_radius;
    let minor = major * shape.axis_ratio * shape.axis_ratio;
    // R = [[c, -s], [s, c]]
    let xx = c * c * major + s * s * minor;
    let yy = s * s * major + c * c * minor;
    let xy = -c * s * major + s * c * minor;
    [[xx, xy], [xy, yy]]
}

/// Galaxy light kernel as a Gaussian mixture in sky coordinates (degrees),
/// `2K` components ordered de Vaucouleurs first.
pub fn galaxy_mixture(shape: &GalaxyShape, direction: [f64; 2], table: &ProfileTable) -> Vec<GaussianComponent> {
    let sigma = galaxy_covariance(shape);
    let deg2 = 1.0 / (ARCSEC_PER_DEGREE * ARCSEC_PER_DEGREE);
    let profile_weights = [shape.profile_weight, 1.0 - shape.profile_weight];
    let mut out = Vec::with_capacity(2 * table.components());
    for (i, pw) in profile_weights.iter().enumerate() {
        for (alpha, tau) in table.weights[i].iter().zip(&table.scales[i]) {
            let s = tau * deg2;
            out.push(GaussianComponent {
                weight: pw * alpha,
                mean: direction,
                cov: [[s * sigma[0][0], s * sigma[0][1]], [s * sigma[1][0], s * sigma[1][1]]],
            });
        }
    }
    out
}

/// Coefficients `w` such that `ln flux[band] = ln ref_flux + w . colors`.
pub fn color_weights(band: usize, ref_band: usize, num_colors: usize) -> Vec<f64> {
    let mut w = vec![0.0; num_colors];
    if band < ref_band {
        for x in &mut w[band..ref_band] {
            *x = 1.0;
        }
    } else {
        for x in &mut w[ref_band..band] {
            *x = -1.0;
        }
    }
    w
}

/// Per-band fluxes from the reference-band flux and the color vector.
pub fn band_fluxes(ref_flux: f64, colors: &[f64], ref_band: usize) -> Vec<f64> {
    let bands = colors.len() + 1;
    (0..bands)
        .map(|b| {
            let w = color_weights(b, ref_band, colors.len());
            let log_ratio: f64 = w.iter().zip(colors).map(|(w, c)| w * c).sum();
            ref_flux * log_ratio.exp()
        })
        .collect()
}

/// Inverse of [`band_fluxes`]: consecutive log ratios.
pub fn colors_from_fluxes(fluxes: &[f64]) -> Vec<f64> {
    fluxes.windows(2).map(|w| (w[0] / w[1]).ln()).collect()
}
