//! Star/galaxy classification from AIS evidences, posterior sampling, and the
//! sequential Gibbs sweep over a catalog.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ais::{log_mean_exp, run_ais, within_gibbs_transition, AisConfig};
use super::ess::effective_sample_size;
use super::source::SourceTarget;
use crate::error::{Error, Result};
use crate::model::{GalaxyShape, ImageModel, ProfileTable, SourceParams};
use crate::patch::Patch;
use crate::posterior::{Moments, PosteriorSummary, TypeMoments};
use crate::priors::{PriorParams, GALAXY, STAR};

/// Half-width in pixels of the box of positions explored around a source's
/// current position.
pub const DIRECTION_BOX: f64 = 3.0;

/// Posterior type probability from the prior star probability and the two
/// log evidences.
pub fn posterior_star_prob(star_prior: f64, log_z_galaxy: f64, log_z_star: f64) -> f64 {
    if star_prior <= 0.0 {
        return 0.0;
    }
    if star_prior >= 1.0 {
        return 1.0;
    }
    // p = 1 / (1 + exp(d)), d = log((1 - A) Z0) - log(A Z1)
    let d = ((1.0 - star_prior).ln() + log_z_galaxy) - (star_prior.ln() + log_z_star);
    if d.is_nan() {
        return 0.5;
    }
    1.0 / (1.0 + d.exp())
}

#[derive(Clone, Debug)]
pub struct SourcePosterior {
    pub star_prob: f64,
    /// Per type (galaxy first), one log evidence per successful AIS run.
    pub log_evidence: [Vec<f64>; 2],
    /// Per type, chains of coordinate vectors (N' chains of B' draws).
    pub chains: [Vec<Vec<Vec<f64>>>; 2],
    /// Per type, the same draws as sources.
    pub samples: [Vec<SourceParams>; 2],
    pub failed_runs: [usize; 2],
    pub ess: BTreeMap<String, f64>,
    pub seconds: f64,
}

pub fn coordinate_names(num_colors: usize, is_star: bool) -> Vec<String> {
    let mut names = vec!["offset_x".to_string(), "offset_y".into(), "log_flux".into()];
    names.extend((0..num_colors).map(|i| format!("color_{i}")));
    if !is_star {
        names.extend(["logit_profile", "angle", "log_radius", "logit_axis"].map(String::from));
    }
    names
}

/// Sum over chains of each chain's effective sample size, per coordinate. A
/// chain that never moved counts as one effective draw.
fn chain_ess(chains: &[Vec<Vec<f64>>], names: &[String]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let mut total = 0.0;
        for chain in chains {
            let xs: Vec<f64> = chain.iter().map(|x| x[i]).collect();
            total += match effective_sample_size(&xs) {
                Ok(e) => e,
                Err(_) => 1.0,
            };
        }
        out.insert(name.clone(), total);
    }
    out
}

/// Runs AIS `N'` times per type on one source's patch, extends each run by
/// `B'` posterior sweeps, and classifies by the ratio of averaged evidences.
pub fn classify_and_sample<R: Rng + ?Sized>(
    patch: &Patch,
    images: &[ImageModel],
    prior: &PriorParams,
    table: &ProfileTable,
    center_direction: [f64; 2],
    config: &AisConfig,
    rng: &mut R,
) -> Result<SourcePosterior> {
    config.validate()?;
    let start = Instant::now();
    let schedule = config.schedule();
    let mut log_evidence: [Vec<f64>; 2] = Default::default();
    let mut chains: [Vec<Vec<Vec<f64>>>; 2] = Default::default();
    let mut samples: [Vec<SourceParams>; 2] = Default::default();
    let mut failed_runs = [0usize; 2];
    for (t, is_star) in [(GALAXY, false), (STAR, true)] {
        let mut target = SourceTarget::new(patch, images, prior, table, is_star, center_direction, DIRECTION_BOX);
        for _ in 0..config.chains {
            let run = match run_ais(&mut target, &schedule, rng) {
                Ok(run) => run,
                Err(Error::NonFiniteWeight { .. }) | Err(Error::NonFiniteLogDensity) => {
                    failed_runs[t] += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            log_evidence[t].push(run.log_weight);
            let mut x = run.state;
            let mut chain = Vec::with_capacity(config.post_steps);
            for _ in 0..config.post_steps {
                within_gibbs_transition(&mut target, &mut x, 1.0, rng)?;
                samples[t].push(target.to_source(&x));
                chain.push(x.clone());
            }
            chains[t].push(chain);
        }
        if log_evidence[t].is_empty() {
            return Err(Error::Classification(format!(
                "all {} AIS runs failed for the {} hypothesis",
                config.chains,
                if is_star { "star" } else { "galaxy" }
            )));
        }
    }
    let star_prob = posterior_star_prob(
        prior.star_prob,
        log_mean_exp(&log_evidence[GALAXY]),
        log_mean_exp(&log_evidence[STAR]),
    );
    let likely = if star_prob > 0.5 { STAR } else { GALAXY };
    let ess = if config.post_steps >= 10 {
        chain_ess(&chains[likely], &coordinate_names(prior.num_colors(), likely == STAR))
    } else {
        BTreeMap::new()
    };
    Ok(SourcePosterior {
        star_prob,
        log_evidence,
        chains,
        samples,
        failed_runs,
        ess,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn type_moments(samples: &[SourceParams], num_colors: usize) -> TypeMoments {
    let log_flux: Vec<f64> = samples.iter().map(|s| s.ref_flux.ln()).collect();
    TypeMoments {
        log_flux: Moments::from_samples(&log_flux),
        colors: (0..num_colors)
            .map(|i| Moments::from_samples(&samples.iter().map(|s| s.colors[i]).collect::<Vec<_>>()))
            .collect(),
    }
}

fn mean_shape(samples: &[SourceParams]) -> GalaxyShape {
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SourceParams) -> f64| samples.iter().map(f).sum::<f64>() / n;
    // circular mean of an axis: average doubled angles
    let (s, c) = samples.iter().fold((0.0, 0.0), |(s, c), x| {
        let a = (2.0 * x.shape.angle).to_radians();
        (s + a.sin(), c + a.cos())
    });
    GalaxyShape {
        profile_weight: mean(&|x| x.shape.profile_weight),
        angle: (0.5 * s.atan2(c).to_degrees()).rem_euclid(180.0),
        half_light_radius: mean(&|x| x.shape.half_light_radius),
        axis_ratio: mean(&|x| x.shape.axis_ratio),
    }
}

impl SourcePosterior {
    pub fn summary(&self, source: usize, keep_samples: bool) -> PosteriorSummary {
        let num_colors = self.samples[GALAXY][0].colors.len();
        let per_type = [
            type_moments(&self.samples[GALAXY], num_colors),
            type_moments(&self.samples[STAR], num_colors),
        ];
        let p = self.star_prob;
        let mean_dir = |t: usize| {
            let n = self.samples[t].len() as f64;
            [0, 1].map(|k| self.samples[t].iter().map(|s| s.direction[k]).sum::<f64>() / n)
        };
        let (dg, ds) = (mean_dir(GALAXY), mean_dir(STAR));
        PosteriorSummary {
            source,
            star_prob: p,
            direction: [0, 1].map(|k| p * ds[k] + (1.0 - p) * dg[k]),
            log_flux: Moments::mix(p, per_type[GALAXY].log_flux, per_type[STAR].log_flux),
            colors: (0..num_colors)
                .map(|i| Moments::mix(p, per_type[GALAXY].colors[i], per_type[STAR].colors[i]))
                .collect(),
            shape: mean_shape(&self.samples[GALAXY]),
            per_type,
            ess: self.ess.clone(),
            seconds: self.seconds,
            samples: keep_samples.then(|| {
                let mut all = self.samples[GALAXY].clone();
                all.extend(self.samples[STAR].iter().cloned());
                all
            }),
        }
    }

    /// Folds in the posterior from a later sweep, so that the summary
    /// describes the Gibbs chain's marginal rather than one conditional.
    /// `pooled` is the number of sweeps already folded into `self`.
    pub fn pool(&mut self, later: SourcePosterior, pooled: usize) {
        let n = pooled as f64;
        self.star_prob = (n * self.star_prob + later.star_prob) / (n + 1.0);
        for t in [GALAXY, STAR] {
            self.log_evidence[t].extend_from_slice(&later.log_evidence[t]);
            self.chains[t].extend(later.chains[t].iter().cloned());
            self.samples[t].extend(later.samples[t].iter().cloned());
            self.failed_runs[t] += later.failed_runs[t];
        }
        for (k, v) in later.ess {
            *self.ess.entry(k).or_insert(0.0) += v;
        }
        self.seconds += later.seconds;
    }

    /// One joint draw: a type by its posterior probability, then a stored
    /// sample of that type.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SourceParams {
        let t = if rng.random::<f64>() < self.star_prob {
            STAR
        } else {
            GALAXY
        };
        let pool = &self.samples[t];
        pool[rng.random_range(0..pool.len())].clone()
    }
}

/// RNG stream for one source in one sweep, independent of thread scheduling.
pub fn source_rng(seed: u64, sweep: u64, source: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sweep << 32) | source as u64);
    rng
}

/// One Gibbs pass: each source in `order` is resampled given the current
/// values of all others, and replaced by a posterior draw.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_sweep(
    state: &mut [SourceParams],
    images: &[ImageModel],
    prior: &PriorParams,
    table: &ProfileTable,
    config: &AisConfig,
    ref_band: usize,
    order: &[usize],
    sweep: u64,
) -> Result<Vec<(usize, SourcePosterior)>> {
    let mut out = Vec::with_capacity(order.len());
    for &s in order {
        let post = sample_source(state, images, prior, table, config, ref_band, s, sweep)?;
        let mut rng = source_rng(config.seed ^ 0x5eed, sweep, s);
        state[s] = post.draw(&mut rng);
        out.push((s, post));
    }
    Ok(out)
}

/// Posterior of `state[s]` given every other source held fixed.
#[allow(clippy::too_many_arguments)]
pub fn sample_source(
    state: &[SourceParams],
    images: &[ImageModel],
    prior: &PriorParams,
    table: &ProfileTable,
    config: &AisConfig,
    ref_band: usize,
    s: usize,
    sweep: u64,
) -> Result<SourcePosterior> {
    let patch = Patch::for_source(images, state, s, table, ref_band)?;
    let mut rng = source_rng(config.seed, sweep, s);
    classify_and_sample(&patch, images, prior, table, state[s].direction, config, &mut rng)
}
