//! Per-source pixel patches shared by both inference engines.
//!
//! A patch is a fixed disk of pixels around a source's initial position in
//! every image. The source's local likelihood covers only these pixels.
//! Inside the patch the source's light is evaluated without truncation;
//! everything else (sky plus the fixed neighbors) is folded into a per-pixel
//! base rate.

use crate::error::{Error, Result};
use crate::model::{
    band_fluxes, galaxy_covariance, ln_factorial, max_eigenvalue, truncation_radius, GalaxyShape, ImageModel,
    PixelKernel, ProfileTable, SourceParams, TRUNCATION_SIGMAS,
};

/// Largest patch radius in pixels.
pub const MAX_PATCH_RADIUS: f64 = 20.0;

/// One image's share of a patch.
#[derive(Clone, Debug)]
pub struct BandPatch {
    /// Index into the image slice the patch was built from.
    pub image: usize,
    pub band: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub counts: Vec<f64>,
    pub ln_fact: Vec<f64>,
    /// Expected photons from sky and fixed neighbors.
    pub base: Vec<f64>,
    /// Variance of the base rate (nonzero only under variational neighbors).
    pub base_var: Vec<f64>,
    /// Photons per nanomaggy at each pixel.
    pub calib: Vec<f64>,
    /// Runs of consecutive columns: (row, first column, first index, length).
    pub segments: Vec<(usize, usize, usize, usize)>,
    /// Earlier band patch with identical geometry, PSF and calibration, whose
    /// kernel values can be reused.
    pub same_kernel_as: Option<usize>,
}

impl BandPatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub bands: Vec<BandPatch>,
    pub radius: f64,
    pub ref_band: usize,
}

/// Patch radius: a fixed number of PSF widths or half-light radii of the
/// galaxy reading of `source`, whichever is larger, capped at
/// [`MAX_PATCH_RADIUS`]. Pixels beyond it carry little information about the
/// source and are left out of its local likelihood.
pub fn patch_radius(image: &ImageModel, source: &SourceParams) -> f64 {
    let psf = image.psf_sigma_max();
    let cov = image.wcs.map_cov_arcsec(&galaxy_covariance(&source.shape));
    let half_light = max_eigenvalue(&cov).sqrt();
    (TRUNCATION_SIGMAS * psf.max(half_light)).min(MAX_PATCH_RADIUS.max(TRUNCATION_SIGMAS * psf))
}

fn same_geometry(a: &ImageModel, b: &ImageModel) -> bool {
    a.height == b.height && a.width == b.width && a.wcs == b.wcs && a.psf == b.psf && a.calib == b.calib
}

impl Patch {
    /// Disk of `radius` pixels around `direction` in every image, with the sky
    /// as base rate. Images must carry pixels.
    pub fn new(images: &[ImageModel], direction: [f64; 2], radius: f64, ref_band: usize) -> Result<Self> {
        let mut bands: Vec<BandPatch> = Vec::with_capacity(images.len());
        for (idx, img) in images.iter().enumerate() {
            let pixels = img
                .pixels
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("image {idx} has no pixels")))?;
            let center = img.wcs.to_pixel(direction);
            let disk = img.pixels_within(center, radius);
            let mut bp = BandPatch {
                image: idx,
                band: img.band,
                rows: Vec::with_capacity(disk.len()),
                cols: Vec::with_capacity(disk.len()),
                counts: Vec::with_capacity(disk.len()),
                ln_fact: Vec::with_capacity(disk.len()),
                base: Vec::with_capacity(disk.len()),
                base_var: vec![0.0; disk.len()],
                calib: Vec::with_capacity(disk.len()),
                segments: Vec::new(),
                same_kernel_as: None,
            };
            for &(row, col) in &disk {
                let x = pixels[row * img.width + col];
                bp.rows.push(row);
                bp.cols.push(col);
                bp.counts.push(x as f64);
                bp.ln_fact.push(ln_factorial(x));
                bp.base.push(img.sky_at(row, col));
                bp.calib.push(img.calib[col]);
            }
            bp.segments = segments_of(&bp.rows, &bp.cols);
            bp.same_kernel_as = bands
                .iter()
                .position(|other| other.same_kernel_as.is_none() && same_geometry(&images[other.image], img));
            bands.push(bp);
        }
        Ok(Self {
            bands,
            radius,
            ref_band,
        })
    }

    /// Patch for `catalog[target]` with every other source fixed at its
    /// catalog value. The radius is the larger of [`patch_radius`] and the
    /// extent of the residual light around the source, capped at
    /// [`MAX_PATCH_RADIUS`].
    pub fn for_source(
        images: &[ImageModel],
        catalog: &[SourceParams],
        target: usize,
        table: &ProfileTable,
        ref_band: usize,
    ) -> Result<Self> {
        let source = &catalog[target];
        let mut patch = Self::new(images, source.direction, MAX_PATCH_RADIUS, ref_band)?;
        for (i, other) in catalog.iter().enumerate() {
            if i != target {
                patch.add_fixed_source(images, other, table)?;
            }
        }
        let min_radius = images.iter().map(|img| patch_radius(img, source)).fold(0.0, f64::max);
        patch.shrink_to_residual(images, source.direction, min_radius);
        Ok(patch)
    }

    /// Shrinks the patch to the residual extent around `direction` plus two
    /// PSF widths, but never below `min_radius`.
    pub fn shrink_to_residual(&mut self, images: &[ImageModel], direction: [f64; 2], min_radius: f64) {
        let psf = images.iter().map(|img| img.psf_sigma_max()).fold(0.0, f64::max);
        let extent = self.residual_extent(images, direction);
        let radius = (extent + 2.0 * psf).max(min_radius).min(self.radius);
        self.restrict(images, direction, radius);
    }

    /// Radius in pixels of the first one-pixel ring around `direction` whose
    /// summed residual (counts minus base) is within two Poisson SDs of zero.
    pub fn residual_extent(&self, images: &[ImageModel], direction: [f64; 2]) -> f64 {
        let rings = self.radius.ceil() as usize + 1;
        let mut residual = vec![0.0; rings];
        let mut base = vec![0.0; rings];
        for bp in &self.bands {
            let c = images[bp.image].wcs.to_pixel(direction);
            for i in 0..bp.len() {
                let d = (bp.cols[i] as f64 - c[0]).hypot(bp.rows[i] as f64 - c[1]);
                let k = (d.floor() as usize).min(rings - 1);
                residual[k] += bp.counts[i] - bp.base[i];
                base[k] += bp.base[i];
            }
        }
        (1..rings)
            .find(|&k| residual[k] < 2.0 * base[k].sqrt())
            .unwrap_or(rings) as f64
    }

    /// Keeps only the pixels within `radius` of `direction`.
    pub fn restrict(&mut self, images: &[ImageModel], direction: [f64; 2], radius: f64) {
        for bp in &mut self.bands {
            let c = images[bp.image].wcs.to_pixel(direction);
            let keep: Vec<usize> = (0..bp.len())
                .filter(|&i| {
                    let dx = bp.cols[i] as f64 - c[0];
                    let dy = bp.rows[i] as f64 - c[1];
                    dx * dx + dy * dy <= radius * radius
                })
                .collect();
            let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            bp.counts = pick(&bp.counts);
            bp.ln_fact = pick(&bp.ln_fact);
            bp.base = pick(&bp.base);
            bp.base_var = pick(&bp.base_var);
            bp.calib = pick(&bp.calib);
            bp.rows = keep.iter().map(|&i| bp.rows[i]).collect();
            bp.cols = keep.iter().map(|&i| bp.cols[i]).collect();
            bp.segments = segments_of(&bp.rows, &bp.cols);
        }
        self.radius = radius;
    }

    pub fn num_pixels(&self) -> usize {
        self.bands.iter().map(|b| b.len()).sum()
    }

    /// Adds a fixed source's truncated model contribution to the base rate.
    pub fn add_fixed_source(
        &mut self,
        images: &[ImageModel],
        source: &SourceParams,
        table: &ProfileTable,
    ) -> Result<()> {
        let fluxes = band_fluxes(source.ref_flux, &source.colors, self.ref_band);
        for bp in &mut self.bands {
            let img = &images[bp.image];
            let center = img.wcs.to_pixel(source.direction);
            let reach = truncation_radius(img, source, table);
            if !touches(bp, center, reach) {
                continue;
            }
            let kernel = PixelKernel::for_source(img, source, table)?;
            let flux = fluxes[img.band];
            for i in 0..bp.len() {
                let dx = bp.cols[i] as f64 - center[0];
                let dy = bp.rows[i] as f64 - center[1];
                if dx * dx + dy * dy <= reach * reach {
                    bp.base[i] += flux * bp.calib[i] * kernel.eval(bp.rows[i], bp.cols[i]);
                }
            }
        }
        Ok(())
    }

    /// Kernel values times calibration at each patch pixel, per band patch.
    pub fn kernel_values(
        &self,
        images: &[ImageModel],
        is_star: bool,
        direction: [f64; 2],
        shape: &GalaxyShape,
        table: &ProfileTable,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.bands.len());
        for bp in &self.bands {
            if let Some(j) = bp.same_kernel_as {
                let copy = out[j].clone();
                out.push(copy);
                continue;
            }
            let img = &images[bp.image];
            let kernel = if is_star {
                PixelKernel::star(img, direction)
            } else {
                PixelKernel::galaxy(img, direction, shape, table)?
            };
            let mut values = vec![0.0; bp.len()];
            for &(row, col0, start, len) in &bp.segments {
                kernel.add_row(row, col0, &mut values[start..start + len]);
            }
            for (v, c) in values.iter_mut().zip(&bp.calib) {
                *v *= c;
            }
            out.push(values);
        }
        Ok(out)
    }

    /// Poisson log-likelihood of the patch pixels when the target source adds
    /// `band_flux[band] * kernel` to the base rate.
    pub fn log_likelihood(&self, kernel: &[Vec<f64>], band_flux: &[f64]) -> f64 {
        let mut total = 0.0;
        for (bp, k) in self.bands.iter().zip(kernel) {
            let f = band_flux[bp.band];
            for i in 0..bp.len() {
                let rate = bp.base[i] + f * k[i];
                total += bp.counts[i] * rate.ln() - rate - bp.ln_fact[i];
            }
        }
        total
    }
}

/// Runs of consecutive columns within a row, for pixels in row-major order.
fn segments_of(rows: &[usize], cols: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (i, (&row, &col)) in rows.iter().zip(cols).enumerate() {
        match out.last_mut() {
            Some(seg) if seg.0 == row && seg.1 + seg.3 == col => seg.3 += 1,
            _ => out.push((row, col, i, 1)),
        }
    }
    out
}

fn touches(bp: &BandPatch, center: [f64; 2], reach: f64) -> bool {
    bp.rows.iter().zip(&bp.cols).any(|(&r, &c)| {
        let dx = c as f64 - center[0];
        let dy = r as f64 - center[1];
        dx * dx + dy * dy <= reach * reach
    })
}
