//! Prior hyperparameters, prior density and prior sampling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use statrs::function::gamma::ln_gamma;

use super::gmm::Gmm;
use crate::error::{Error, Result};
use crate::model::{GalaxyShape, SourceParams};

pub const GALAXY: usize = 0;
pub const STAR: usize = 1;

/// Index into per-type arrays: galaxies first, stars second.
pub fn type_index(is_star: bool) -> usize {
    if is_star {
        STAR
    } else {
        GALAXY
    }
}

/// Log-normal distribution parameterized by the mean and variance of the log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogNormal {
    pub log_mean: f64,
    pub log_var: f64,
}

impl LogNormal {
    pub fn new(log_mean: f64, log_var: f64) -> Self {
        Self { log_mean, log_var }
    }

    /// Density of `ln x` under the underlying normal.
    pub fn log_density_of_log(&self, y: f64) -> f64 {
        let d = y - self.log_mean;
        -0.5 * (2.0 * PI * self.log_var).ln() - d * d / (2.0 * self.log_var)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.log_density_of_log(x.ln()) - x.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Normal::new(self.log_mean, self.log_var.sqrt())
            .expect("positive variance")
            .sample(rng)
            .exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Beta::new(self.alpha, self.beta).expect("positive shapes").sample(rng)
    }
}

/// Rectangular sky region, degrees, over which directions are uniform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkyWindow {
    pub lon: [f64; 2],
    pub lat: [f64; 2],
}

impl SkyWindow {
    pub fn area(&self) -> f64 {
        (self.lon[1] - self.lon[0]) * (self.lat[1] - self.lat[0])
    }

    pub fn contains(&self, dir: [f64; 2]) -> bool {
        (self.lon[0]..=self.lon[1]).contains(&dir[0]) && (self.lat[0]..=self.lat[1]).contains(&dir[1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            self.lon[0] + rng.random::<f64>() * (self.lon[1] - self.lon[0]),
            self.lat[0] + rng.random::<f64>() * (self.lat[1] - self.lat[0]),
        ]
    }
}

impl Default for SkyWindow {
    fn default() -> Self {
        Self {
            lon: [10.0, 10.05],
            lat: [0.0, 0.05],
        }
    }
}

/// Hyperparameters of the source prior. Per-type arrays are indexed by
/// [`GALAXY`] and [`STAR`].
#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams {
    pub star_prob: f64,
    pub flux: [LogNormal; 2],
    pub color_gmm: [Gmm; 2],
    pub radius: LogNormal,
    pub profile: BetaParams,
    pub axis: BetaParams,
    pub window: SkyWindow,
}

impl PriorParams {
    /// Hand-set prior for synthetic desk-scale scenes with `num_bands` bands.
    pub fn desk_default(num_bands: usize) -> Self {
        let d = num_bands.saturating_sub(1);
        let colors = |slopes: &[(f64, f64, f64)]| {
            let k = slopes.len();
            Gmm {
                weights: vec![1.0 / k as f64; k],
                means: slopes
                    .iter()
                    .map(|&(start, decay, _)| DVector::from_fn(d, |i, _| start * decay.powi(i as i32)))
                    .collect(),
                covs: slopes
                    .iter()
                    .map(|&(_, _, var)| DMatrix::from_diagonal_element(d, d, var))
                    .collect(),
            }
        };
        Self {
            star_prob: 0.5,
            flux: [LogNormal::new(10f64.ln(), 0.5), LogNormal::new(8f64.ln(), 0.6)],
            color_gmm: [
                colors(&[(-1.0, 0.6, 0.05), (-0.6, 0.7, 0.08)]),
                colors(&[(-0.5, 0.5, 0.05), (-1.2, 0.45, 0.08)]),
            ],
            radius: LogNormal::new(1.5f64.ln(), 0.15),
            profile: BetaParams::new(2.0, 2.0),
            axis: BetaParams::new(4.0, 2.0),
            window: SkyWindow::default(),
        }
    }

    pub fn num_colors(&self) -> usize {
        self.color_gmm[0].dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.star_prob) {
            return Err(Error::InvalidParameter(format!("star_prob {}", self.star_prob)));
        }
        for g in &self.color_gmm {
            g.validate()?;
        }
        if self.color_gmm[0].dim() != self.color_gmm[1].dim() {
            return Err(Error::InvalidParameter("color prior dimensions differ".into()));
        }
        let positive = self.flux.iter().chain([&self.radius]).all(|l| l.log_var > 0.0)
            && [self.profile, self.axis].iter().all(|b| b.alpha > 0.0 && b.beta > 0.0);
        if !positive {
            return Err(Error::InvalidParameter("non-positive scale parameter".into()));
        }
        if !(self.window.area() > 0.0) {
            return Err(Error::InvalidParameter("empty sky window".into()));
        }
        Ok(())
    }

    pub fn sample_shape<R: Rng + ?Sized>(&self, rng: &mut R) -> GalaxyShape {
        GalaxyShape {
            profile_weight: self.profile.sample(rng),
            angle: rng.random::<f64>() * 180.0,
            half_light_radius: self.radius.sample(rng),
            axis_ratio: self.axis.sample(rng).min(1.0 - 1e-12),
        }
    }

    /// Draws one source from the prior hierarchy. Stars carry the default
    /// shape, which no density or rate ever reads.
    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R) -> SourceParams {
        let is_star = rng.random::<f64>() < self.star_prob;
        self.sample_source_of_type(is_star, rng)
    }

    pub fn sample_source_of_type<R: Rng + ?Sized>(&self, is_star: bool, rng: &mut R) -> SourceParams {
        let t = type_index(is_star);
        let direction = self.window.sample(rng);
        let ref_flux = self.flux[t].sample(rng);
        let colors = self.color_gmm[t].sample(rng);
        let shape = if is_star {
            GalaxyShape::default()
        } else {
            self.sample_shape(rng)
        };
        SourceParams {
            is_star,
            direction,
            ref_flux,
            colors,
            shape,
        }
    }

    pub fn log_shape_density(&self, shape: &GalaxyShape) -> Result<f64> {
        let ok = shape.profile_weight > 0.0
            && shape.profile_weight < 1.0
            && (0.0..180.0).contains(&shape.angle)
            && shape.half_light_radius > 0.0
            && shape.half_light_radius.is_finite()
            && shape.axis_ratio > 0.0
            && shape.axis_ratio < 1.0;
        if !ok {
            return Err(Error::OutOfDomain(format!("galaxy shape {shape:?}")));
        }
        Ok(self.profile.log_density(shape.profile_weight) - 180f64.ln()
            + self.radius.log_density(shape.half_light_radius)
            + self.axis.log_density(shape.axis_ratio))
    }

    /// Log density of a source conditional on its type.
    pub fn log_prior_given_type(&self, source: &SourceParams) -> Result<f64> {
        if !self.window.contains(source.direction) {
            return Err(Error::OutOfDomain(format!(
                "direction {:?} outside the sky window",
                source.direction
            )));
        }
        if !(source.ref_flux > 0.0 && source.ref_flux.is_finite()) {
            return Err(Error::OutOfDomain(format!("ref_flux {}", source.ref_flux)));
        }
        if source.colors.len() != self.num_colors() || source.colors.iter().any(|c| !c.is_finite()) {
            return Err(Error::OutOfDomain("colors".into()));
        }
        let t = type_index(source.is_star);
        let mut lp = -self.window.area().ln()
            + self.flux[t].log_density(source.ref_flux)
            + self.color_gmm[t].log_density(&source.colors)?;
        if !source.is_star {
            lp += self.log_shape_density(&source.shape)?;
        }
        Ok(lp)
    }

    /// Joint log density including the type indicator.
    pub fn log_prior(&self, source: &SourceParams) -> Result<f64> {
        let p = if source.is_star {
            self.star_prob
        } else {
            1.0 - self.star_prob
        };
        if p == 0.0 {
            return Err(Error::OutOfDomain("source type has zero prior probability".into()));
        }
        Ok(p.ln() + self.log_prior_given_type(source)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn star_prob_one_gives_only_stars() {
        let mut prior = PriorParams::desk_default(5);
        prior.star_prob = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| prior.sample_source(&mut rng).is_star));
    }

    #[test]
    fn star_fraction_within_binomial_band() {
        let prior = PriorParams::desk_default(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let stars = (0..n).filter(|_| prior.sample_source(&mut rng).is_star).count();
        let p = prior.star_prob;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((stars as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn log_flux_means_per_type() {
        let prior = PriorParams::desk_default(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for is_star in [false, true] {
            let t = type_index(is_star);
            let n = 100_000;
            let mean: f64 = (0..n)
                .map(|_| prior.sample_source_of_type(is_star, &mut rng).ref_flux.ln())
                .sum::<f64>()
                / n as f64;
            let se = (prior.flux[t].log_var / n as f64).sqrt();
            assert!((mean - prior.flux[t].log_mean).abs() < 4.0 * se);
        }
    }

    #[test]
    fn uniform_angle_term_is_exact() {
        let prior = PriorParams::desk_default(5);
        let mut shape = GalaxyShape::default();
        let a = prior.log_shape_density(&shape).unwrap();
        shape.angle = 123.4;
        let b = prior.log_shape_density(&shape).unwrap();
        assert_eq!(a, b);
        let expect = prior.profile.log_density(shape.profile_weight) - 180f64.ln()
            + prior.radius.log_density(shape.half_light_radius)
            + prior.axis.log_density(shape.axis_ratio);
        assert_eq!(b, expect);
    }

    #[test]
    fn out_of_domain_fields_are_errors() {
        let prior = PriorParams::desk_default(5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = prior.sample_source_of_type(false, &mut rng);
        assert!(prior.log_prior(&s).unwrap().is_finite());
        s.shape.axis_ratio = 1.0;
        assert!(prior.log_prior(&s).is_err());
        let mut s = prior.sample_source_of_type(true, &mut rng);
        s.ref_flux = 0.0;
        assert!(prior.log_prior(&s).is_err());
        let mut s = prior.sample_source_of_type(true, &mut rng);
        s.direction = [0.0, 0.0];
        assert!(prior.log_prior(&s).is_err());
    }

    #[test]
    fn star_density_integrates_to_one() {
        // importance sampling with the prior's own flux and color factors as the
        // proposal leaves the direction term; integrate it over a uniform proposal
        // on a window twice as wide so the indicator matters
        let prior = PriorParams::desk_default(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = prior.window;
        let wide = SkyWindow {
            lon: [w.lon[0] - 0.025, w.lon[1] + 0.025],
            lat: [w.lat[0], w.lat[1]],
        };
        let proposal_flux = LogNormal::new(prior.flux[STAR].log_mean, 1.5 * prior.flux[STAR].log_var);
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let dir = wide.sample(&mut rng);
            let flux = proposal_flux.sample(&mut rng);
            let colors = prior.color_gmm[STAR].sample(&mut rng);
            let s = SourceParams {
                is_star: true,
                direction: dir,
                ref_flux: flux,
                colors: colors.clone(),
                shape: GalaxyShape::default(),
            };
            let target = prior.log_prior_given_type(&s).map(f64::exp).unwrap_or(0.0);
            let q = (1.0 / wide.area())
                * proposal_flux.log_density(flux).exp()
                * prior.color_gmm[STAR].log_density(&colors).unwrap().exp();
            vals.push(target / q);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn galaxy_shape_density_integrates_to_one() {
        let prior = PriorParams::desk_default(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let radius_q = LogNormal::new(prior.radius.log_mean, 2.0 * prior.radius.log_var);
        let n = 40_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = GalaxyShape {
                profile_weight: rng.random::<f64>(),
                angle: rng.random::<f64>() * 180.0,
                half_light_radius: radius_q.sample(&mut rng),
                axis_ratio: rng.random::<f64>(),
            };
            let target = prior.log_shape_density(&shape).map(f64::exp).unwrap_or(0.0);
            let q = radius_q.log_density(shape.half_light_radius).exp() / 180.0;
            vals.push(target / q);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }
}
