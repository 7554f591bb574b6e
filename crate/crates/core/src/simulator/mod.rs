//! Synthetic scenes drawn from the prior and rendered with Poisson noise.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

pub use io::{read_catalog, read_pgm16, write_catalog, write_pgm16};

use crate::error::{Error, Result};
use crate::model::{
    band_fluxes, render_rates, AffineWcs, GaussianComponent, ImageModel, ProfileTable, SkyGrid, SourceParams,
};
use crate::priors::{PriorParams, SkyWindow};

/// Sources brighter than this in any band are redrawn.
pub const MAX_FLUX_NMGY: f64 = 1e4;

/// Relative weights and widths of the three isotropic PSF components.
const PSF_WEIGHTS: [f64; 3] = [0.7, 0.2, 0.1];
const PSF_WIDTHS: [f64; 3] = [1.0, 1.4, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub sources: usize,
    /// Background, photons per pixel.
    pub sky: f64,
    /// Photons per nanomaggy.
    pub calib: f64,
    /// Width of the narrowest PSF component, pixels.
    pub psf_sigma: f64,
    pub seed: u64,
    pub window: SkyWindow,
    pub ref_band: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            bands: 5,
            sources: 50,
            sky: 200.0,
            calib: 1000.0,
            psf_sigma: 1.5,
            seed: 0,
            window: SkyWindow::default(),
            ref_band: crate::model::DEFAULT_REF_BAND,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height > 0
            && self.width > 0
            && self.bands > 0
            && self.ref_band < self.bands
            && self.sky > 0.0
            && self.calib > 0.0
            && self.psf_sigma > 0.0
            && self.window.area() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("scene config {self:?}")))
        }
    }

    pub fn psf(&self) -> Vec<GaussianComponent> {
        PSF_WEIGHTS
            .iter()
            .zip(PSF_WIDTHS)
            .map(|(&w, m)| GaussianComponent::isotropic(w, [0.0, 0.0], m * self.psf_sigma))
            .collect()
    }

    pub fn wcs(&self) -> AffineWcs {
        AffineWcs::from_window(self.window.lon, self.window.lat, self.height, self.width)
    }

    /// Blank images, one per band, sharing the WCS and PSF.
    pub fn images(&self) -> Vec<ImageModel> {
        (0..self.bands)
            .map(|band| ImageModel {
                band,
                height: self.height,
                width: self.width,
                sky: SkyGrid::constant(self.sky),
                calib: vec![self.calib; self.width],
                wcs: self.wcs(),
                psf: self.psf(),
                pixels: None,
            })
            .collect()
    }
}

/// A catalog together with its images.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub catalog: Vec<SourceParams>,
    pub images: Vec<ImageModel>,
}

/// Draws `config.sources` sources from the prior with directions uniform over
/// the configured window, redrawing any source brighter than
/// [`MAX_FLUX_NMGY`] in some band.
pub fn make_scene<R: Rng + ?Sized>(config: &SceneConfig, prior: &PriorParams, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    if prior.num_colors() + 1 != config.bands {
        return Err(Error::InvalidParameter(format!(
            "prior has {} colors for {} bands",
            prior.num_colors(),
            config.bands
        )));
    }
    let mut catalog = Vec::with_capacity(config.sources);
    while catalog.len() < config.sources {
        let mut s = prior.sample_source(rng);
        s.direction = config.window.sample(rng);
        let fluxes = band_fluxes(s.ref_flux, &s.colors, config.ref_band);
        if fluxes.iter().all(|f| *f <= MAX_FLUX_NMGY) {
            catalog.push(s);
        }
    }
    Ok(Scene {
        catalog,
        images: config.images(),
    })
}

/// Poisson draws of every pixel. Band `b` uses stream `b` of a ChaCha RNG
/// seeded with `seed`, so each image is reproducible on its own.
pub fn render(
    catalog: &[SourceParams],
    images: &[ImageModel],
    table: &ProfileTable,
    ref_band: usize,
    seed: u64,
) -> Result<Vec<ImageModel>> {
    images
        .iter()
        .map(|image| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(image.band as u64);
            render_image(catalog, image, table, ref_band, &mut rng)
        })
        .collect()
}

pub fn render_image<R: Rng + ?Sized>(
    catalog: &[SourceParams],
    image: &ImageModel,
    table: &ProfileTable,
    ref_band: usize,
    rng: &mut R,
) -> Result<ImageModel> {
    let rates = render_rates(image, catalog, table, ref_band)?;
    let mut pixels = Vec::with_capacity(rates.len());
    for (i, &rate) in rates.iter().enumerate() {
        if !rate.is_finite() || rate > u32::MAX as f64 / 2.0 {
            return Err(Error::Render(format!(
                "rate {rate} at pixel (row {}, col {})",
                i / image.width,
                i % image.width
            )));
        }
        let count = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::Render(e.to_string()))?
                .sample(rng) as u32
        } else {
            0
        };
        pixels.push(count);
    }
    let mut out = image.clone();
    out.pixels = Some(pixels);
    Ok(out)
}

impl Scene {
    pub fn simulate(config: &SceneConfig, prior: &PriorParams, table: &ProfileTable) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scene = make_scene(config, prior, &mut rng)?;
        let images = render(
            &scene.catalog,
            &scene.images,
            table,
            config.ref_band,
            config.seed.wrapping_add(1),
        )?;
        Ok(Self {
            catalog: scene.catalog,
            images,
        })
    }
}
