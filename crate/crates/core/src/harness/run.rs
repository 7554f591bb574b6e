//! Run configuration and the detect / fit steps shared by the CLI and the
//! end-to-end tests.

use crate::detect::{detect_sources, DetectConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::mcmc::AisConfig;
use crate::model::{ImageModel, ProfileTable, SourceParams};
use crate::parallel::{fit_catalog, sample_catalog, FitOptions, FitReport, SampleOptions, SampleReport, SourceOrder};
use crate::posterior::PosteriorSummary;
use crate::priors::PriorParams;
use crate::simulator::SceneConfig;
use crate::vi::{initial_variational, NewtonOptions, VariationalParams};

use super::score::DEFAULT_MATCH_RADIUS;

/// Everything a run depends on besides the prior. One seed drives the
/// scene, the sampler and a random visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub detect: DetectConfig,
    pub threads: usize,
    pub passes: usize,
    pub strips: usize,
    pub random_order: bool,
    pub newton: NewtonOptions,
    pub ais: AisConfig,
    pub sweeps: usize,
    pub match_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            detect: DetectConfig::default(),
            threads: 1,
            passes: 3,
            strips: 4,
            random_order: false,
            newton: NewtonOptions::default(),
            ais: AisConfig::desk(),
            // summaries pool the last 3; blended neighbors need a few sweeps to mix
            sweeps: 6,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "scene.height",
    "scene.width",
    "scene.bands",
    "scene.sources",
    "scene.sky",
    "scene.calib",
    "scene.psf_sigma",
    "scene.ref_band",
    "detect.threshold_sigmas",
    "detect.min_separation",
    "detect.aperture_psf_sigmas",
    "detect.min_flux",
    "detect.smoothing",
    "threads",
    "vi.passes",
    "vi.strips",
    "vi.order",
    "vi.gtol",
    "vi.max_iter",
    "mcmc.temperatures",
    "mcmc.chains",
    "mcmc.post_steps",
    "mcmc.sweeps",
    "score.match_radius",
];

impl RunConfig {
    /// Overrides defaults with the keys present in `kv`. Unknown keys are
    /// rejected so that typos do not pass silently.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Parse(format!("unknown config key '{k}'")));
        }
        let d = Self::default();
        let order = kv.get("vi.order").unwrap_or("round_robin");
        let random_order = match order {
            "round_robin" => false,
            "random" => true,
            other => {
                return Err(Error::Parse(format!(
                    "vi.order must be round_robin or random, got '{other}'"
                )))
            }
        };
        let mut c = Self {
            seed: kv.value_or("seed", d.seed)?,
            scene: SceneConfig {
                height: kv.value_or("scene.height", d.scene.height)?,
                width: kv.value_or("scene.width", d.scene.width)?,
                bands: kv.value_or("scene.bands", d.scene.bands)?,
                sources: kv.value_or("scene.sources", d.scene.sources)?,
                sky: kv.value_or("scene.sky", d.scene.sky)?,
                calib: kv.value_or("scene.calib", d.scene.calib)?,
                psf_sigma: kv.value_or("scene.psf_sigma", d.scene.psf_sigma)?,
                ref_band: kv.value_or("scene.ref_band", d.scene.ref_band)?,
                ..d.scene
            },
            detect: DetectConfig {
                threshold_sigmas: kv.value_or("detect.threshold_sigmas", d.detect.threshold_sigmas)?,
                min_separation: kv.value_or("detect.min_separation", d.detect.min_separation)?,
                aperture_psf_sigmas: kv.value_or("detect.aperture_psf_sigmas", d.detect.aperture_psf_sigmas)?,
                min_flux: kv.value_or("detect.min_flux", d.detect.min_flux)?,
                smoothing: kv.value_or("detect.smoothing", d.detect.smoothing)?,
            },
            threads: kv.value_or("threads", d.threads)?,
            passes: kv.value_or("vi.passes", d.passes)?,
            strips: kv.value_or("vi.strips", d.strips)?,
            random_order,
            newton: NewtonOptions {
                gtol: kv.value_or("vi.gtol", d.newton.gtol)?,
                max_iter: kv.value_or("vi.max_iter", d.newton.max_iter)?,
                ..d.newton
            },
            ais: AisConfig {
                temperatures: kv.value_or("mcmc.temperatures", d.ais.temperatures)?,
                chains: kv.value_or("mcmc.chains", d.ais.chains)?,
                post_steps: kv.value_or("mcmc.post_steps", d.ais.post_steps)?,
                ..d.ais
            },
            sweeps: kv.value_or("mcmc.sweeps", d.sweeps)?,
            match_radius: kv.value_or("score.match_radius", d.match_radius)?,
        };
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("seed", self.seed);
        kv.push("scene.height", self.scene.height);
        kv.push("scene.width", self.scene.width);
        kv.push("scene.bands", self.scene.bands);
        kv.push("scene.sources", self.scene.sources);
        kv.push("scene.sky", self.scene.sky);
        kv.push("scene.calib", self.scene.calib);
        kv.push("scene.psf_sigma", self.scene.psf_sigma);
        kv.push("scene.ref_band", self.scene.ref_band);
        kv.push("detect.threshold_sigmas", self.detect.threshold_sigmas);
        kv.push("detect.min_separation", self.detect.min_separation);
        kv.push("detect.aperture_psf_sigmas", self.detect.aperture_psf_sigmas);
        kv.push("detect.min_flux", self.detect.min_flux);
        kv.push("detect.smoothing", self.detect.smoothing);
        kv.push("threads", self.threads);
        kv.push("vi.passes", self.passes);
        kv.push("vi.strips", self.strips);
        kv.push("vi.order", if self.random_order { "random" } else { "round_robin" });
        kv.push("vi.gtol", self.newton.gtol);
        kv.push("vi.max_iter", self.newton.max_iter);
        kv.push("mcmc.temperatures", self.ais.temperatures);
        kv.push("mcmc.chains", self.ais.chains);
        kv.push("mcmc.post_steps", self.ais.post_steps);
        kv.push("mcmc.sweeps", self.sweeps);
        kv.push("score.match_radius", self.match_radius);
        kv
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = seed;
        self.ais.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.ais.validate()?;
        if self.threads == 0 || self.strips == 0 || self.sweeps == 0 {
            return Err(Error::InvalidParameter(
                "threads, strips and sweeps must be positive".into(),
            ));
        }
        if !(self.match_radius > 0.0) {
            return Err(Error::InvalidParameter("match radius must be positive".into()));
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            threads: self.threads,
            passes: self.passes,
            strips: self.strips,
            order: self.order(),
            newton: self.newton.clone(),
            ref_band: self.scene.ref_band,
        }
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            threads: self.threads,
            sweeps: self.sweeps,
            order: self.order(),
            ais: self.ais.clone(),
            ref_band: self.scene.ref_band,
        }
    }

    fn order(&self) -> SourceOrder {
        if self.random_order {
            SourceOrder::Random { seed: self.seed }
        } else {
            SourceOrder::RoundRobin
        }
    }
}

/// Initial catalog for both engines: peaks of the coadd.
pub fn detect(images: &[ImageModel], config: &RunConfig) -> Result<Vec<SourceParams>> {
    detect_sources(images, config.scene.ref_band, &config.detect)
}

pub struct ViRun {
    pub summaries: Vec<PosteriorSummary>,
    pub params: Vec<VariationalParams>,
    pub report: FitReport,
}

/// Variational fit of the whole catalog from `init`.
pub fn run_vi(
    images: &[ImageModel],
    init: &[SourceParams],
    prior: &PriorParams,
    table: &ProfileTable,
    config: &RunConfig,
) -> Result<ViRun> {
    let start: Vec<VariationalParams> = init.iter().map(|s| initial_variational(s, prior)).collect();
    let (params, report) = fit_catalog(images, &start, prior, table, &config.fit_options())?;
    let summaries = params
        .iter()
        .zip(&report.sources)
        .enumerate()
        .map(|(s, (vp, r))| vp.summary(s, r.seconds))
        .collect();
    Ok(ViRun {
        summaries,
        params,
        report,
    })
}

pub struct McmcRun {
    /// One per source that the sampler classified; failed sources are
    /// listed in the report's errors instead.
    pub summaries: Vec<PosteriorSummary>,
    pub report: SampleReport,
}

/// Gibbs sweeps with per-source AIS classification, started at `init`.
/// Summaries pool the second half of the sweeps.
pub fn run_mcmc(
    images: &[ImageModel],
    init: &[SourceParams],
    prior: &PriorParams,
    table: &ProfileTable,
    config: &RunConfig,
) -> Result<McmcRun> {
    let (_, posteriors, report) = sample_catalog(images, init, prior, table, &config.sample_options())?;
    let summaries = posteriors
        .iter()
        .enumerate()
        .filter_map(|(s, p)| p.as_ref().map(|p| p.summary(s, false)))
        .collect();
    Ok(McmcRun { summaries, report })
}
