//! One source's conditional posterior in unconstrained coordinates.
//!
//! Layout: pixel offset (2) from the patch center, log reference flux, colors,
//! then for galaxies logit profile weight, angle in degrees (periodic), log
//! half-light radius and logit axis ratio. Densities include the Jacobians of
//! these transforms. The direction prior is uniform over a square box of
//! offsets, which scales both types' evidences by the same constant.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ais::AnnealTarget;
use super::slice::Support;
use crate::jet::{logit, sigmoid};
use crate::model::{band_fluxes, AffineWcs, GalaxyShape, ImageModel, ProfileTable, SourceParams};
use crate::patch::Patch;
use crate::priors::{type_index, BetaParams, LogNormal, PriorParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const LOG_FLUX: usize = 2;
pub const COLORS: usize = 3;

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Density of `u = logit(x)` when `x ~ Beta`.
pub fn logit_beta_log_density(b: &BetaParams, u: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let ln_x = -softplus(-u);
    let ln_1mx = -softplus(u);
    ln_gamma(b.alpha + b.beta) - ln_gamma(b.alpha) - ln_gamma(b.beta) + b.alpha * ln_x + b.beta * ln_1mx
}

fn normal_log_density(ln: &LogNormal, y: f64) -> f64 {
    let d = y - ln.log_mean;
    -0.5 * (LN_2PI + ln.log_var.ln()) - d * d / (2.0 * ln.log_var)
}

struct CacheSlot {
    key: Vec<f64>,
    kernel: Vec<Vec<f64>>,
}

pub struct SourceTarget<'a> {
    pub patch: &'a Patch,
    pub images: &'a [ImageModel],
    pub prior: &'a PriorParams,
    pub table: &'a ProfileTable,
    pub is_star: bool,
    /// Patch center in the first patch image's pixel frame.
    pub center: [f64; 2],
    pub wcs: AffineWcs,
    pub half_box: f64,
    num_colors: usize,
    cache: [Option<CacheSlot>; 2],
    next_slot: usize,
}

impl<'a> SourceTarget<'a> {
    pub fn new(
        patch: &'a Patch,
        images: &'a [ImageModel],
        prior: &'a PriorParams,
        table: &'a ProfileTable,
        is_star: bool,
        center_direction: [f64; 2],
        half_box: f64,
    ) -> Self {
        let wcs = images[patch.bands.first().map_or(0, |b| b.image)].wcs;
        Self {
            patch,
            images,
            prior,
            table,
            is_star,
            center: wcs.to_pixel(center_direction),
            wcs,
            half_box,
            num_colors: prior.num_colors(),
            cache: [None, None],
            next_slot: 0,
        }
    }

    fn shape_start(&self) -> usize {
        COLORS + self.num_colors
    }

    /// Coordinates of a source of this target's type.
    pub fn to_coords(&self, s: &SourceParams) -> Vec<f64> {
        let px = self.wcs.to_pixel(s.direction);
        let mut x = vec![px[0] - self.center[0], px[1] - self.center[1], s.ref_flux.ln()];
        x.extend_from_slice(&s.colors);
        if !self.is_star {
            let clamp = |v: f64| v.clamp(1e-12, 1.0 - 1e-12);
            x.push(logit(clamp(s.shape.profile_weight)));
            x.push(s.shape.angle.rem_euclid(180.0));
            x.push(s.shape.half_light_radius.ln());
            x.push(logit(clamp(s.shape.axis_ratio)));
        }
        x
    }

    pub fn shape_of(&self, x: &[f64]) -> GalaxyShape {
        if self.is_star {
            return GalaxyShape::default();
        }
        let k = self.shape_start();
        GalaxyShape {
            profile_weight: sigmoid(x[k]),
            angle: x[k + 1].rem_euclid(180.0),
            half_light_radius: x[k + 2].exp(),
            axis_ratio: sigmoid(x[k + 3]),
        }
    }

    pub fn direction_of(&self, x: &[f64]) -> [f64; 2] {
        self.wcs.to_sky([self.center[0] + x[0], self.center[1] + x[1]])
    }

    pub fn to_source(&self, x: &[f64]) -> SourceParams {
        SourceParams {
            is_star: self.is_star,
            direction: self.direction_of(x),
            ref_flux: x[LOG_FLUX].exp(),
            colors: x[COLORS..COLORS + self.num_colors].to_vec(),
            shape: self.shape_of(x),
        }
    }

    fn spatial_key(&self, x: &[f64]) -> Vec<f64> {
        let mut key = vec![x[0], x[1]];
        if !self.is_star {
            key.extend_from_slice(&x[self.shape_start()..]);
        }
        key
    }

    fn kernel(&mut self, x: &[f64]) -> Option<usize> {
        let key = self.spatial_key(x);
        for (i, slot) in self.cache.iter().enumerate() {
            if slot.as_ref().is_some_and(|s| s.key == key) {
                return Some(i);
            }
        }
        let kernel = self
            .patch
            .kernel_values(
                self.images,
                self.is_star,
                self.direction_of(x),
                &self.shape_of(x),
                self.table,
            )
            .ok()?;
        let slot = self.next_slot;
        self.cache[slot] = Some(CacheSlot { key, kernel });
        self.next_slot = 1 - slot;
        Some(slot)
    }
}

impl AnnealTarget for SourceTarget<'_> {
    fn dim(&self) -> usize {
        COLORS + self.num_colors + if self.is_star { 0 } else { 4 }
    }

    fn support(&self, coord: usize) -> Support {
        if coord < 2 {
            Support::Bounded(-self.half_box, self.half_box)
        } else if !self.is_star && coord == self.shape_start() + 1 {
            Support::Periodic(180.0)
        } else {
            Support::Real
        }
    }

    fn width(&self, coord: usize) -> f64 {
        let k = self.shape_start();
        match coord {
            0 | 1 => 0.5,
            LOG_FLUX => 0.3,
            c if c < k => 0.3,
            c if c == k => 1.0,
            c if c == k + 1 => 30.0,
            c if c == k + 2 => 0.3,
            _ => 0.7,
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let t = type_index(self.is_star);
        let h = self.half_box;
        let mut x = vec![
            (2.0 * rng.random::<f64>() - 1.0) * h,
            (2.0 * rng.random::<f64>() - 1.0) * h,
        ];
        let f = &self.prior.flux[t];
        x.push(
            Normal::new(f.log_mean, f.log_var.sqrt())
                .expect("positive variance")
                .sample(rng),
        );
        x.extend(self.prior.color_gmm[t].sample(rng));
        if !self.is_star {
            let shape = self.prior.sample_shape(rng);
            let clamp = |v: f64| v.clamp(1e-12, 1.0 - 1e-12);
            x.push(logit(clamp(shape.profile_weight)));
            x.push(shape.angle);
            x.push(shape.half_light_radius.ln());
            x.push(logit(clamp(shape.axis_ratio)));
        }
        x
    }

    fn log_prior(&mut self, x: &[f64]) -> f64 {
        let h = self.half_box;
        if x[0].abs() > h || x[1].abs() > h || x.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let t = type_index(self.is_star);
        let mut lp = -(4.0 * h * h).ln() + normal_log_density(&self.prior.flux[t], x[LOG_FLUX]);
        lp += self.prior.color_gmm[t]
            .log_density(&x[COLORS..COLORS + self.num_colors])
            .unwrap_or(f64::NEG_INFINITY);
        if !self.is_star {
            let k = self.shape_start();
            if !(0.0..180.0).contains(&x[k + 1]) {
                return f64::NEG_INFINITY;
            }
            lp += logit_beta_log_density(&self.prior.profile, x[k]) - 180f64.ln()
                + normal_log_density(&self.prior.radius, x[k + 2])
                + logit_beta_log_density(&self.prior.axis, x[k + 3]);
        }
        lp
    }

    fn log_likelihood(&mut self, x: &[f64]) -> f64 {
        let Some(slot) = self.kernel(x) else {
            return f64::NEG_INFINITY;
        };
        let fluxes = band_fluxes(
            x[LOG_FLUX].exp(),
            &x[COLORS..COLORS + self.num_colors],
            self.patch.ref_band,
        );
        let kernel = &self.cache[slot].as_ref().expect("filled slot").kernel;
        self.patch.log_likelihood(kernel, &fluxes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::within_gibbs_transition;
    use crate::model::SkyGrid;
    use crate::simulator::SceneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blank_images() -> Vec<ImageModel> {
        let config = SceneConfig {
            height: 24,
            width: 24,
            ..Default::default()
        };
        config
            .images()
            .into_iter()
            .map(|mut img| {
                img.sky = SkyGrid::constant(200.0);
                img.pixels = Some(vec![200; 24 * 24]);
                img
            })
            .collect()
    }

    #[test]
    fn logit_beta_density_integrates_to_one() {
        let b = BetaParams::new(4.0, 2.0);
        let h = 0.001;
        let total: f64 = (-20000..20000)
            .map(|i| logit_beta_log_density(&b, (i as f64 + 0.5) * h).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coordinate_round_trip() {
        let images = blank_images();
        let prior = PriorParams::desk_default(5);
        let table = ProfileTable::standard();
        let center = images[0].wcs.to_sky([12.0, 12.0]);
        let patch = Patch::new(&images, center, 8.0, 2).unwrap();
        let target = SourceTarget::new(&patch, &images, &prior, &table, false, center, 3.0);
        let s = SourceParams {
            is_star: false,
            direction: images[0].wcs.to_sky([12.7, 11.1]),
            ref_flux: 7.0,
            colors: vec![-0.2, 0.1, 0.3, -0.4],
            shape: GalaxyShape {
                profile_weight: 0.3,
                angle: 170.0,
                half_light_radius: 1.2,
                axis_ratio: 0.4,
            },
        };
        let back = target.to_source(&target.to_coords(&s));
        assert!((back.ref_flux - 7.0).abs() < 1e-12);
        assert!((back.shape.angle - 170.0).abs() < 1e-12);
        assert!((back.shape.axis_ratio - 0.4).abs() < 1e-12);
        for k in 0..2 {
            assert!((back.direction[k] - s.direction[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn chained_transitions_preserve_prior_moments() {
        // gamma = 0 targets the prior; the chain's marginals must match it
        let images = blank_images();
        let prior = PriorParams::desk_default(5);
        let table = ProfileTable::standard();
        let center = images[0].wcs.to_sky([12.0, 12.0]);
        let patch = Patch::new(&images, center, 6.0, 2).unwrap();
        let mut target = SourceTarget::new(&patch, &images, &prior, &table, false, center, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = target.sample_prior(&mut rng);
        let n = 10_000;
        let dim = target.dim();
        let mut draws = vec![Vec::with_capacity(n); dim];
        for _ in 0..n {
            within_gibbs_transition(&mut target, &mut x, 0.0, &mut rng).unwrap();
            for (d, v) in draws.iter_mut().zip(&x) {
                d.push(*v);
            }
            let k = COLORS + 4;
            assert!((0.0..180.0).contains(&x[k + 1]));
        }
        let moments = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            (m, v)
        };
        // log flux ~ N(ln 10, 0.5); log radius ~ N(ln 1.5, 0.15); offsets ~ U(-3, 3)
        let checks = [
            (LOG_FLUX, 10f64.ln(), 0.5),
            (COLORS + 6, 1.5f64.ln(), 0.15),
            (0, 0.0, 3.0),
        ];
        for (coord, mean, var) in checks {
            let (m, v) = moments(&draws[coord]);
            let ess = crate::mcmc::effective_sample_size(&draws[coord]).unwrap();
            let se = (var / ess).sqrt();
            assert!((m - mean).abs() < 4.0 * se, "coord {coord}: mean {m} vs {mean}");
            // sd of the sample variance for a near-normal variable is ~ var sqrt(2/ess)
            assert!(
                (v - var).abs() < 4.0 * var * (2.0 / ess).sqrt() + 0.1 * var,
                "coord {coord}: var {v}"
            );
        }
    }

    #[test]
    fn star_coordinates_have_no_shape() {
        let images = blank_images();
        let prior = PriorParams::desk_default(5);
        let table = ProfileTable::standard();
        let center = images[0].wcs.to_sky([12.0, 12.0]);
        let patch = Patch::new(&images, center, 6.0, 2).unwrap();
        let mut target = SourceTarget::new(&patch, &images, &prior, &table, true, center, 3.0);
        assert_eq!(target.dim(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = target.sample_prior(&mut rng);
        within_gibbs_transition(&mut target, &mut x, 1.0, &mut rng).unwrap();
        assert_eq!(target.to_source(&x).shape, GalaxyShape::default());
    }
}
