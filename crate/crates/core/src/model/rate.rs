//! Expected photon counts and the Poisson log-likelihood.

use std::f64::consts::PI;

use super::kernel::{band_fluxes, galaxy_covariance};
use super::profile::ProfileTable;
use super::types::{GalaxyShape, ImageModel, SourceParams};
use crate::error::{Error, Result};

/// Number of standard deviations beyond which a source contributes nothing.
pub const TRUNCATION_SIGMAS: f64 = 5.0;

/// Squared Mahalanobis distance beyond which a component's density is
/// treated as zero (relative size below 1e-17).
pub const NEGLIGIBLE_MAHALANOBIS2: f64 = 80.0;

/// One bivariate normal in pixel coordinates, stored by precision matrix.
#[derive(Clone, Copy, Debug)]
pub struct PixelGaussian {
    /// weight / (2 pi sqrt(det cov))
    pub scale: f64,
    pub center: [f64; 2],
    /// (p_xx, p_xy, p_yy)
    pub precision: [f64; 3],
}

impl PixelGaussian {
    pub fn new(weight: f64, center: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(det > 0.0 && cov[0][0] > 0.0) || !det.is_finite() {
            return Err(Error::DegenerateShape(format!(
                "covariance {cov:?} not positive definite"
            )));
        }
        Ok(Self {
            scale: weight / (2.0 * PI * det.sqrt()),
            center,
            precision: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
        })
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let p = &self.precision;
        let q = p[0] * dx * dx + 2.0 * p[1] * dx * dy + p[2] * dy * dy;
        if q > NEGLIGIBLE_MAHALANOBIS2 {
            return 0.0;
        }
        self.scale * (-0.5 * q).exp()
    }
}

/// A source's light kernel convolved with an image's PSF, in pixel
/// coordinates and without the calibration factor.
#[derive(Clone, Debug)]
pub struct PixelKernel {
    pub components: Vec<PixelGaussian>,
    pub center: [f64; 2],
}

impl PixelKernel {
    pub fn star(image: &ImageModel, direction: [f64; 2]) -> Self {
        let center = image.wcs.to_pixel(direction);
        let components = image
            .psf
            .iter()
            .map(|k| {
                PixelGaussian::new(k.weight, [center[0] + k.mean[0], center[1] + k.mean[1]], k.cov)
                    .expect("validated PSF component")
            })
            .collect();
        Self { components, center }
    }

    pub fn galaxy(image: &ImageModel, direction: [f64; 2], shape: &GalaxyShape, table: &ProfileTable) -> Result<Self> {
        let center = image.wcs.to_pixel(direction);
        let sigma = image.wcs.map_cov_arcsec(&galaxy_covariance(shape));
        let profile_weights = [shape.profile_weight, 1.0 - shape.profile_weight];
        let mut components = Vec::with_capacity(image.psf.len() * 2 * table.components());
        for k in &image.psf {
            for (i, pw) in profile_weights.iter().enumerate() {
                if *pw == 0.0 {
                    continue;
                }
                for (alpha, tau) in table.weights[i].iter().zip(&table.scales[i]) {
                    let cov = [
                        [k.cov[0][0] + tau * sigma[0][0], k.cov[0][1] + tau * sigma[0][1]],
                        [k.cov[1][0] + tau * sigma[1][0], k.cov[1][1] + tau * sigma[1][1]],
                    ];
                    components.push(PixelGaussian::new(
                        k.weight * pw * alpha,
                        [center[0] + k.mean[0], center[1] + k.mean[1]],
                        cov,
                    )?);
                }
            }
        }
        Ok(Self { components, center })
    }

    pub fn for_source(image: &ImageModel, source: &SourceParams, table: &ProfileTable) -> Result<Self> {
        if source.is_star {
            Ok(Self::star(image, source.direction))
        } else {
            Self::galaxy(image, source.direction, &source.shape, table)
        }
    }

    /// Adds the kernel density at pixels `(row, col0 + i)` into `out[i]`.
    ///
    /// Along a row the Gaussian ratio between neighbors changes by a constant
    /// factor, so each component costs two exponentials per row instead of
    /// one per pixel.
    pub fn add_row(&self, row: usize, col0: usize, out: &mut [f64]) {
        let y = row as f64;
        for c in &self.components {
            let [pxx, pxy, pyy] = c.precision;
            let dy = y - c.center[1];
            let dx0 = col0 as f64 - c.center[0];
            let q0 = pxx * dx0 * dx0 + 2.0 * pxy * dx0 * dy + pyy * dy * dy;
            let mut v = c.scale * (-0.5 * q0).exp();
            let mut ratio = (-0.5 * (pxx * (2.0 * dx0 + 1.0) + 2.0 * pxy * dy)).exp();
            let step = (-pxx).exp();
            if v == 0.0 || !v.is_finite() || !ratio.is_finite() {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += c.eval((col0 + i) as f64, y);
                }
                continue;
            }
            for o in out.iter_mut() {
                *o += v;
                v *= ratio;
                ratio *= step;
            }
        }
    }

    /// Kernel density at pixel `(row, col)`, per unit calibration.
    #[inline]
    pub fn eval(&self, row: usize, col: usize) -> f64 {
        let (x, y) = (col as f64, row as f64);
        self.components.iter().map(|c| c.eval(x, y)).sum()
    }
}

/// Radius in pixels beyond which the source contributes no photons: a fixed
/// number of standard deviations of the widest PSF component or of the widest
/// galaxy component along its major axis, whichever is larger.
pub fn truncation_radius(image: &ImageModel, source: &SourceParams, table: &ProfileTable) -> f64 {
    let psf = image.psf_sigma_max();
    let extent = if source.is_star {
        psf
    } else {
        psf.max(galaxy_sigma_max(image, &source.shape, table))
    };
    TRUNCATION_SIGMAS * extent
}

/// Major-axis standard deviation, in pixels, of the widest galaxy component.
pub fn galaxy_sigma_max(image: &ImageModel, shape: &GalaxyShape, table: &ProfileTable) -> f64 {
    let cov = image.wcs.map_cov_arcsec(&galaxy_covariance(shape));
    (table.max_scale() * super::types::max_eigenvalue(&cov)).sqrt()
}

fn within(image: &ImageModel, source: &SourceParams, table: &ProfileTable, row: usize, col: usize) -> bool {
    let c = image.wcs.to_pixel(source.direction);
    let r = truncation_radius(image, source, table);
    let dx = col as f64 - c[0];
    let dy = row as f64 - c[1];
    dx * dx + dy * dy <= r * r
}

/// Expected photons per nanomaggy at `pixel = (row, col)` from a point source.
pub fn point_response(image: &ImageModel, direction: [f64; 2], pixel: (usize, usize)) -> f64 {
    let (row, col) = pixel;
    let center = image.wcs.to_pixel(direction);
    let r = TRUNCATION_SIGMAS * image.psf_sigma_max();
    let dx = col as f64 - center[0];
    let dy = row as f64 - center[1];
    if dx * dx + dy * dy > r * r {
        return 0.0;
    }
    image.calib[col] * PixelKernel::star(image, direction).eval(row, col)
}

pub fn star_contribution(image: &ImageModel, source: &SourceParams, pixel: (usize, usize)) -> f64 {
    point_response(image, source.direction, pixel)
}

/// PSF-convolved galaxy light per nanomaggy at `pixel`, truncated like
/// [`pixel_rate`].
pub fn galaxy_contribution(
    image: &ImageModel,
    source: &SourceParams,
    table: &ProfileTable,
    pixel: (usize, usize),
) -> Result<f64> {
    let (row, col) = pixel;
    let kernel = PixelKernel::galaxy(image, source.direction, &source.shape, table)?;
    if !within(image, source, table, row, col) {
        return Ok(0.0);
    }
    Ok(image.calib[col] * kernel.eval(row, col))
}

fn source_band_flux(image: &ImageModel, source: &SourceParams, ref_band: usize) -> f64 {
    band_fluxes(source.ref_flux, &source.colors, ref_band)[image.band]
}

/// Expected photon count at one pixel: interpolated sky plus every source
/// within its truncation radius.
pub fn pixel_rate(
    image: &ImageModel,
    catalog: &[SourceParams],
    table: &ProfileTable,
    ref_band: usize,
    pixel: (usize, usize),
) -> Result<f64> {
    let (row, col) = pixel;
    let mut rate = image.sky_at(row, col);
    for s in catalog {
        if !within(image, s, table, row, col) {
            continue;
        }
        let kernel = PixelKernel::for_source(image, s, table)?;
        rate += source_band_flux(image, s, ref_band) * image.calib[col] * kernel.eval(row, col);
    }
    Ok(rate)
}

/// Expected photon counts for every pixel, row-major.
pub fn render_rates(
    image: &ImageModel,
    catalog: &[SourceParams],
    table: &ProfileTable,
    ref_band: usize,
) -> Result<Vec<f64>> {
    let mut rates = Vec::with_capacity(image.height * image.width);
    for row in 0..image.height {
        for col in 0..image.width {
            rates.push(image.sky_at(row, col));
        }
    }
    for s in catalog {
        add_source_rates(image, s, table, ref_band, &mut rates)?;
    }
    Ok(rates)
}

/// Adds one source's truncated contribution to a row-major rate grid.
pub fn add_source_rates(
    image: &ImageModel,
    source: &SourceParams,
    table: &ProfileTable,
    ref_band: usize,
    rates: &mut [f64],
) -> Result<()> {
    let kernel = PixelKernel::for_source(image, source, table)?;
    let flux = source_band_flux(image, source, ref_band);
    let radius = truncation_radius(image, source, table);
    for (row, col) in image.pixels_within(kernel.center, radius) {
        rates[row * image.width + col] += flux * image.calib[col] * kernel.eval(row, col);
    }
    Ok(())
}

/// ln(x!) through the log-gamma function.
pub fn ln_factorial(x: u32) -> f64 {
    if x < 2 {
        0.0
    } else {
        statrs::function::gamma::ln_gamma(x as f64 + 1.0)
    }
}

/// Poisson log-pmf of a count under a rate; `-inf` if the rate is zero and the
/// count positive.
pub fn poisson_log_pmf(count: u32, rate: f64) -> f64 {
    if count == 0 {
        -rate
    } else {
        -rate + count as f64 * rate.ln() - ln_factorial(count)
    }
}

/// Poisson log-likelihood of an image's pixels under the catalog.
pub fn log_likelihood(
    image: &ImageModel,
    catalog: &[SourceParams],
    table: &ProfileTable,
    ref_band: usize,
) -> Result<f64> {
    let pixels = image
        .pixels
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("image has no pixels".into()))?;
    let rates = render_rates(image, catalog, table, ref_band)?;
    let mut total = 0.0;
    for (i, (&x, &rate)) in pixels.iter().zip(&rates).enumerate() {
        if rate <= 0.0 && x > 0 {
            return Err(Error::ZeroRate {
                row: i / image.width,
                col: i % image.width,
                count: x,
            });
        }
        total += poisson_log_pmf(x, rate);
    }
    Ok(total)
}
