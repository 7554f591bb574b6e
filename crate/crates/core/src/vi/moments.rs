//! Expected pixel rates under the variational distribution.

use crate::error::{Error, Result};
use crate::model::{color_weights, truncation_radius, ImageModel, PixelKernel, ProfileTable, SourceParams};
use crate::priors::{GALAXY, STAR};

use super::params::VariationalParams;

/// First and second moments of a source's band flux given its type.
pub fn brightness_moments(vp: &VariationalParams, t: usize, band: usize, ref_band: usize) -> (f64, f64) {
    let w = color_weights(band, ref_band, vp.num_colors());
    let mean = vp.flux_mean[t] + w.iter().zip(&vp.color_mean[t]).map(|(a, b)| a * b).sum::<f64>();
    let n: f64 = w.iter().map(|a| a * a).sum();
    let var = vp.flux_var[t] + n * vp.color_var[t];
    ((mean + 0.5 * var).exp(), (2.0 * mean + 2.0 * var).exp())
}

/// Unit-flux source of type `t` at the variational location and shape.
pub(crate) fn unit_source(vp: &VariationalParams, t: usize) -> SourceParams {
    SourceParams {
        is_star: t == STAR,
        direction: vp.direction,
        ref_flux: 1.0,
        colors: vec![0.0; vp.num_colors()],
        shape: vp.shape,
    }
}

fn reaches(image: &ImageModel, source: &SourceParams, table: &ProfileTable, row: usize, col: usize) -> bool {
    let c = image.wcs.to_pixel(source.direction);
    let r = truncation_radius(image, source, table);
    (col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2) <= r * r
}

/// Mean and variance of one source's truncated photon contribution at a
/// pixel. Each type's kernel is cut at that type's truncation radius.
pub fn source_rate_moments(
    vp: &VariationalParams,
    image: &ImageModel,
    table: &ProfileTable,
    ref_band: usize,
    pixel: (usize, usize),
) -> Result<(f64, f64)> {
    let (row, col) = pixel;
    let q = [1.0 - vp.star_prob, vp.star_prob];
    let (mut first, mut second) = (0.0, 0.0);
    for t in [GALAXY, STAR] {
        if q[t] == 0.0 {
            continue;
        }
        let source = unit_source(vp, t);
        if !reaches(image, &source, table, row, col) {
            continue;
        }
        let f = image.calib[col] * PixelKernel::for_source(image, &source, table)?.eval(row, col);
        let (m1, m2) = brightness_moments(vp, t, image.band, ref_band);
        first += q[t] * m1 * f;
        second += q[t] * m2 * f * f;
    }
    Ok((first, (second - first * first).max(0.0)))
}

/// Mean and variance of the rate at a pixel: sky plus every source, the
/// sources treated as independent.
pub fn expected_lambda(
    sources: &[VariationalParams],
    image: &ImageModel,
    table: &ProfileTable,
    ref_band: usize,
    pixel: (usize, usize),
) -> Result<(f64, f64)> {
    let mut e = image.sky_at(pixel.0, pixel.1);
    let mut v = 0.0;
    for vp in sources {
        let (m, s) = source_rate_moments(vp, image, table, ref_band, pixel)?;
        e += m;
        v += s;
    }
    Ok((e, v))
}

/// Second-order delta-method approximation to `E[ln lambda]`.
pub fn expected_log_lambda(mean: f64, var: f64) -> Result<f64> {
    if !(mean > 0.0) || !(var >= 0.0) {
        return Err(Error::OutOfDomain(format!("rate moments ({mean}, {var})")));
    }
    Ok(mean.ln() - var / (2.0 * mean * mean))
}
