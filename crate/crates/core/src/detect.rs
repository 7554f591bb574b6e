//! Naive source detection used to initialize both inference engines.
//!
//! Peaks are 3x3 local maxima of the sky-subtracted coadd, lightly blurred,
//! that exceed the coadded sky by five Poisson standard deviations. Peaks closer than
//! [`DetectConfig::min_separation`] to a brighter peak are suppressed. Each
//! surviving peak gets a centroid and PSF-corrected aperture fluxes.

use crate::error::{Error, Result};
use crate::model::{colors_from_fluxes, GalaxyShape, ImageModel, PixelKernel, SourceParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    /// Detection threshold in units of the coadded sky's Poisson SD.
    pub threshold_sigmas: f64,
    /// Minimum distance in pixels between two reported peaks.
    pub min_separation: f64,
    /// Aperture radius in units of the widest PSF SD.
    pub aperture_psf_sigmas: f64,
    /// Floor on any band's aperture flux, in nanomaggies.
    pub min_flux: f64,
    /// SD in pixels of the Gaussian blur applied to the coadd before
    /// searching for maxima.
    pub smoothing: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold_sigmas: 5.0,
            min_separation: 3.0,
            aperture_psf_sigmas: 3.0,
            min_flux: 0.05,
            smoothing: 1.0,
        }
    }
}

/// Pixel-space peak found in the coadd.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    /// Coadded excess over the sky at the peak pixel.
    pub excess: f64,
}

fn check_grid(images: &[ImageModel]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InsufficientData("no images".into()))?;
    for img in images {
        if img.height != first.height || img.width != first.width || img.wcs != first.wcs {
            return Err(Error::InvalidParameter("detection needs co-registered images".into()));
        }
        if img.pixels.is_none() {
            return Err(Error::InvalidParameter(format!("band {} has no pixels", img.band)));
        }
    }
    Ok((first.height, first.width))
}

/// Separable Gaussian blur with SD `sigma` pixels; zero means no blur.
fn smooth(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let pass = |src: &[f64], along_row: bool| {
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, t) in taps.iter().enumerate() {
                    let d = k as isize - half;
                    let (r, c) = if along_row {
                        (row as isize, col as isize + d)
                    } else {
                        (row as isize + d, col as isize)
                    };
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        acc += t * src[r as usize * w + c as usize];
                        norm += t;
                    }
                }
                out[row * w + col] = acc / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Local maxima of the coadd above threshold, brightest first, after
/// non-maximum suppression.
pub fn find_peaks(images: &[ImageModel], config: &DetectConfig) -> Result<Vec<Peak>> {
    let (h, w) = check_grid(images)?;
    let mut excess = vec![0.0; h * w];
    let mut sky = vec![0.0; h * w];
    for img in images {
        let pixels = img.pixels.as_ref().expect("checked");
        for row in 0..h {
            for col in 0..w {
                let s = img.sky_at(row, col);
                excess[row * w + col] += pixels[row * w + col] as f64 - s;
                sky[row * w + col] += s;
            }
        }
    }
    let excess = smooth(&excess, h, w, config.smoothing);
    let mut peaks = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = excess[row * w + col];
            if v <= config.threshold_sigmas * sky[row * w + col].sqrt() {
                continue;
            }
            let mut is_max = true;
            'nb: for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
                for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                    let u = excess[r * w + c];
                    // ties go to the earlier pixel in row-major order
                    if (r, c) != (row, col) && (u > v || (u == v && (r, c) < (row, col))) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push(Peak { row, col, excess: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.excess.total_cmp(&a.excess).then((a.row, a.col).cmp(&(b.row, b.col))));
    let min2 = config.min_separation * config.min_separation;
    let mut kept: Vec<Peak> = Vec::new();
    for p in peaks {
        let close = kept.iter().any(|k| {
            let dr = k.row as f64 - p.row as f64;
            let dc = k.col as f64 - p.col as f64;
            dr * dr + dc * dc < min2
        });
        if !close {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Excess-weighted centroid over the 5x5 box around a peak, in pixel
/// coordinates `[x, y]`.
pub fn centroid(images: &[ImageModel], peak: &Peak) -> [f64; 2] {
    let (h, w) = (images[0].height, images[0].width);
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for r in peak.row.saturating_sub(2)..=(peak.row + 2).min(h - 1) {
        for c in peak.col.saturating_sub(2)..=(peak.col + 2).min(w - 1) {
            let mut v = 0.0;
            for img in images {
                v += img.count(r, c).unwrap_or(0) as f64 - img.sky_at(r, c);
            }
            if v > 0.0 {
                sx += v * c as f64;
                sy += v * r as f64;
                total += v;
            }
        }
    }
    if total > 0.0 {
        [sx / total, sy / total]
    } else {
        [peak.col as f64, peak.row as f64]
    }
}

/// Sky-subtracted aperture flux in nanomaggies, divided by the fraction of a
/// point source's light that falls inside the aperture.
pub fn aperture_flux(image: &ImageModel, center: [f64; 2], radius: f64) -> f64 {
    let direction = image.wcs.to_sky(center);
    let kernel = PixelKernel::star(image, direction);
    let (mut flux, mut enclosed) = (0.0, 0.0);
    for (row, col) in image.pixels_within(center, radius) {
        let x = image.count(row, col).unwrap_or(0) as f64;
        flux += (x - image.sky_at(row, col)) / image.calib[col];
        enclosed += kernel.eval(row, col);
    }
    if enclosed > 0.0 {
        flux / enclosed
    } else {
        0.0
    }
}

/// Shape assigned to every detection: a round-ish galaxy one PSF SD across.
pub fn initial_shape(image: &ImageModel) -> GalaxyShape {
    GalaxyShape {
        profile_weight: 0.5,
        angle: 45.0,
        half_light_radius: image.psf_sigma_max() * image.wcs.pixel_scale_arcsec(),
        axis_ratio: 0.8,
    }
}

/// Initial catalog from the detected peaks. Detections start as galaxies
/// with [`initial_shape`]; the engines decide the type.
pub fn detect_sources(images: &[ImageModel], ref_band: usize, config: &DetectConfig) -> Result<Vec<SourceParams>> {
    let peaks = find_peaks(images, config)?;
    let mut by_band: Vec<&ImageModel> = images.iter().collect();
    by_band.sort_by_key(|img| img.band);
    if by_band.iter().enumerate().any(|(i, img)| img.band != i) || ref_band >= by_band.len() {
        return Err(Error::InvalidParameter(
            "detection needs exactly one image per band".into(),
        ));
    }
    let shape = initial_shape(by_band[ref_band]);
    let mut out = Vec::with_capacity(peaks.len());
    for p in &peaks {
        let center = centroid(images, p);
        let fluxes: Vec<f64> = by_band
            .iter()
            .map(|img| {
                let r = config.aperture_psf_sigmas * img.psf_sigma_max();
                aperture_flux(img, center, r).max(config.min_flux)
            })
            .collect();
        out.push(SourceParams {
            is_star: false,
            direction: images[0].wcs.to_sky(center),
            ref_flux: fluxes[ref_band],
            colors: colors_from_fluxes(&fluxes),
            shape,
        });
    }
    Ok(out)
}
