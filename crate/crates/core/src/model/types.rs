use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCSEC_PER_DEGREE: f64 = 3600.0;

/// Galaxy shape parameters. Angles in degrees, radius in arcseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalaxyShape {
    /// Weight of the de Vaucouleurs profile; the exponential profile gets the rest.
    pub profile_weight: f64,
    pub angle: f64,
    pub half_light_radius: f64,
    pub axis_ratio: f64,
}

impl GalaxyShape {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.profile_weight)
            && (0.0..180.0).contains(&self.angle)
            && self.half_light_radius > 0.0
            && self.half_light_radius.is_finite()
            && self.axis_ratio > 0.0
            && self.axis_ratio < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfDomain(format!("galaxy shape {self:?}")))
        }
    }
}

impl Default for GalaxyShape {
    fn default() -> Self {
        Self {
            profile_weight: 0.5,
            angle: 0.0,
            half_light_radius: 1.0,
            axis_ratio: 0.8,
        }
    }
}

/// Latent variables of one light source.
///
/// `colors[b] = ln(flux[b] / flux[b + 1])` for consecutive bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub is_star: bool,
    /// (longitude, latitude) in degrees.
    pub direction: [f64; 2],
    /// Reference-band flux in nanomaggies.
    pub ref_flux: f64,
    pub colors: Vec<f64>,
    pub shape: GalaxyShape,
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        let [lon, lat] = self.direction;
        if !(self.ref_flux > 0.0 && self.ref_flux.is_finite()) {
            return Err(Error::OutOfDomain(format!("ref_flux {}", self.ref_flux)));
        }
        if !((0.0..360.0).contains(&lon) && (-90.0..=90.0).contains(&lat)) {
            return Err(Error::OutOfDomain(format!("direction {:?}", self.direction)));
        }
        if self.colors.iter().any(|c| !c.is_finite()) {
            return Err(Error::OutOfDomain("non-finite color".into()));
        }
        self.shape.validate()
    }

    pub fn num_bands(&self) -> usize {
        self.colors.len() + 1
    }
}

/// Weighted bivariate normal component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl GaussianComponent {
    pub fn isotropic(weight: f64, mean: [f64; 2], sigma: f64) -> Self {
        let v = sigma * sigma;
        Self {
            weight,
            mean,
            cov: [[v, 0.0], [0.0, v]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cov;
        if (c[0][1] - c[1][0]).abs() > 1e-12 * (c[0][0].abs() + c[1][1].abs()).max(1e-300) {
            return Err(Error::InvalidParameter("covariance not symmetric".into()));
        }
        if !(c[0][0] > 0.0 && det2(c) > 0.0) || self.weight < 0.0 {
            return Err(Error::InvalidParameter(
                "covariance not positive definite or negative weight".into(),
            ));
        }
        Ok(())
    }

    /// Weighted density at `point`.
    pub fn density(&self, point: [f64; 2]) -> f64 {
        let dx = point[0] - self.mean[0];
        let dy = point[1] - self.mean[1];
        let det = det2(&self.cov);
        let q = (self.cov[1][1] * dx * dx - 2.0 * self.cov[0][1] * dx * dy + self.cov[0][0] * dy * dy) / det;
        self.weight * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }

    /// Square root of the largest covariance eigenvalue.
    pub fn sigma_max(&self) -> f64 {
        max_eigenvalue(&self.cov).sqrt()
    }
}

pub fn det2(c: &[[f64; 2]; 2]) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

pub fn max_eigenvalue(c: &[[f64; 2]; 2]) -> f64 {
    let tr = c[0][0] + c[1][1];
    let diff = c[0][0] - c[1][1];
    0.5 * (tr + (diff * diff + 4.0 * c[0][1] * c[1][0]).max(0.0).sqrt())
}

/// Sky background knots spanning the image corners, interpolated bilinearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkyGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major knot values, photons per pixel.
    pub values: Vec<f64>,
}

impl SkyGrid {
    pub fn constant(level: f64) -> Self {
        Self {
            rows: 2,
            cols: 2,
            values: vec![level; 4],
        }
    }

    fn axis_weight(pos: f64, extent: usize, knots: usize) -> (usize, usize, f64) {
        if knots == 1 || extent <= 1 {
            return (0, 0, 0.0);
        }
        let t = (pos / (extent - 1) as f64 * (knots - 1) as f64).clamp(0.0, (knots - 1) as f64);
        let lo = (t.floor() as usize).min(knots - 2);
        (lo, lo + 1, t - lo as f64)
    }

    /// Interpolated sky level at a pixel of an image with the given dimensions.
    pub fn interpolate(&self, row: usize, col: usize, height: usize, width: usize) -> f64 {
        let (r0, r1, tr) = Self::axis_weight(row as f64, height, self.rows);
        let (c0, c1, tc) = Self::axis_weight(col as f64, width, self.cols);
        let at = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = at(r0, c0) + tc * (at(r0, c1) - at(r0, c0));
        let bottom = at(r1, c0) + tc * (at(r1, c1) - at(r1, c0));
        top + tr * (bottom - top)
    }
}

/// Affine sky-to-pixel map: `x = c0 + c1 lon + c2 lat`, `y = c3 + c4 lon + c5 lat`,
/// where `x` is the column and `y` the row coordinate of pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineWcs {
    pub coeffs: [f64; 6],
}

impl AffineWcs {
    /// Maps the rectangle `[lon0, lon0 + lon_span] x [lat0, lat0 + lat_span]` onto
    /// the pixel extent of a `height x width` image.
    pub fn from_window(lon: [f64; 2], lat: [f64; 2], height: usize, width: usize) -> Self {
        let sx = width as f64 / (lon[1] - lon[0]);
        let sy = height as f64 / (lat[1] - lat[0]);
        Self {
            coeffs: [-0.5 - sx * lon[0], sx, 0.0, -0.5 - sy * lat[0], 0.0, sy],
        }
    }

    pub fn to_pixel(&self, dir: [f64; 2]) -> [f64; 2] {
        let c = &self.coeffs;
        [
            c[0] + c[1] * dir[0] + c[2] * dir[1],
            c[3] + c[4] * dir[0] + c[5] * dir[1],
        ]
    }

    /// Linear part: pixels per degree.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let c = &self.coeffs;
        [[c[1], c[2]], [c[4], c[5]]]
    }

    pub fn to_sky(&self, px: [f64; 2]) -> [f64; 2] {
        let a = self.linear();
        let det = det2(&a);
        let x = px[0] - self.coeffs[0];
        let y = px[1] - self.coeffs[3];
        [(a[1][1] * x - a[0][1] * y) / det, (-a[1][0] * x + a[0][0] * y) / det]
    }

    /// Maps a sky covariance given in arcsec^2 to pixel^2.
    pub fn map_cov_arcsec(&self, cov: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let a = self.linear();
        let s = 1.0 / (ARCSEC_PER_DEGREE * ARCSEC_PER_DEGREE);
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        acc += a[i][k] * cov[k][l] * a[j][l];
                    }
                }
                out[i][j] = acc * s;
            }
        }
        out[0][1] = 0.5 * (out[0][1] + out[1][0]);
        out[1][0] = out[0][1];
        out
    }

    /// Mean pixel side length in arcseconds.
    pub fn pixel_scale_arcsec(&self) -> f64 {
        ARCSEC_PER_DEGREE / det2(&self.linear()).abs().sqrt()
    }
}

/// One image: pixel grid plus the nuisance parameters needed to evaluate the
/// expected photon count of every pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageModel {
    /// Zero-based filter band index.
    pub band: usize,
    pub height: usize,
    pub width: usize,
    pub sky: SkyGrid,
    /// Expected photons per nanomaggy, one entry per column.
    pub calib: Vec<f64>,
    pub wcs: AffineWcs,
    /// Point-spread function in pixel coordinates.
    pub psf: Vec<GaussianComponent>,
    /// Row-major photon counts; absent until rendered or loaded.
    #[serde(skip)]
    pub pixels: Option<Vec<u32>>,
}

impl ImageModel {
    pub fn validate(&self) -> Result<()> {
        let wsum: f64 = self.psf.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidParameter(format!("psf weights sum to {wsum}")));
        }
        for c in &self.psf {
            c.validate()?;
        }
        if self.sky.values.len() != self.sky.rows * self.sky.cols || self.sky.values.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("sky grid".into()));
        }
        if self.calib.len() != self.width || self.calib.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidParameter("calibration vector".into()));
        }
        if let Some(p) = &self.pixels {
            if p.len() != self.height * self.width {
                return Err(Error::InvalidParameter("pixel grid size".into()));
            }
        }
        Ok(())
    }

    pub fn sky_at(&self, row: usize, col: usize) -> f64 {
        self.sky.interpolate(row, col, self.height, self.width)
    }

    pub fn count(&self, row: usize, col: usize) -> Option<u32> {
        self.pixels.as_ref().map(|p| p[row * self.width + col])
    }

    pub fn psf_sigma_max(&self) -> f64 {
        self.psf.iter().map(|c| c.sigma_max()).fold(0.0, f64::max)
    }

    /// Pixels whose centers lie within `radius` of `center` (pixel coordinates).
    pub fn pixels_within(&self, center: [f64; 2], radius: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if !(radius >= 0.0) {
            return out;
        }
        let r0 = (center[1] - radius).ceil().max(0.0) as usize;
        let r1 = (center[1] + radius).floor().min(self.height as f64 - 1.0);
        let c0 = (center[0] - radius).ceil().max(0.0) as usize;
        let c1 = (center[0] + radius).floor().min(self.width as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        for row in r0..=(r1 as usize) {
            for col in c0..=(c1 as usize) {
                let dx = col as f64 - center[0];
                let dy = row as f64 - center[1];
                if dx * dx + dy * dy <= r2 {
                    out.push((row, col));
                }
            }
        }
        out
    }
}
