//! Fitting one source's variational factor with its neighbors held fixed.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{truncation_radius, ImageModel, PixelKernel, ProfileTable};
use crate::patch::{patch_radius, Patch, MAX_PATCH_RADIUS};
use crate::priors::{PriorParams, GALAXY, STAR};

use super::elbo::{Neighborhood, SourceObjective};
use super::kl::{optimal_xi, ColorComponent};
use super::moments::{brightness_moments, unit_source};
use super::newton::{newton_trust_region, NewtonOptions};
use super::params::{Chart, VariationalParams};

/// Pixel disk that confines one source during a catalog fit: its likelihood
/// patch, and the only pixels its light reaches. Fixing it up front makes
/// each single-source objective the exact restriction of the global one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 2],
    /// Pixels, in every image.
    pub radius: f64,
}

impl Region {
    /// Region for a source starting at `vp`: its truncation radius as either
    /// type, grown to the extent of residual light above the sky, and capped
    /// at [`MAX_PATCH_RADIUS`]. Light of wide galaxies beyond the cap is cut.
    pub fn for_source(
        images: &[ImageModel],
        vp: &VariationalParams,
        table: &ProfileTable,
        ref_band: usize,
    ) -> Result<Self> {
        let point = vp.point_estimate();
        let mut min_radius: f64 = 0.0;
        for img in images {
            min_radius = min_radius.max(patch_radius(img, &point));
            for t in [GALAXY, STAR] {
                min_radius = min_radius.max(truncation_radius(img, &unit_source(vp, t), table));
            }
        }
        let min_radius = min_radius.min(MAX_PATCH_RADIUS);
        let mut patch = Patch::new(images, vp.direction, MAX_PATCH_RADIUS, ref_band)?;
        patch.shrink_to_residual(images, vp.direction, min_radius);
        Ok(Self {
            center: vp.direction,
            radius: patch.radius,
        })
    }

    fn contains(&self, image: &ImageModel, row: usize, col: usize) -> bool {
        let c = image.wcs.to_pixel(self.center);
        (col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2) <= self.radius * self.radius
    }
}

/// Adds a fixed variational source's expected light to the patch base and
/// its rate variance to the base variance. The light is confined to `clip`
/// when given, and otherwise cut at each type's truncation radius.
pub fn add_variational_source(
    patch: &mut Patch,
    images: &[ImageModel],
    vp: &VariationalParams,
    clip: Option<&Region>,
    table: &ProfileTable,
) -> Result<()> {
    let q = [1.0 - vp.star_prob, vp.star_prob];
    let ref_band = patch.ref_band;
    for bp in &mut patch.bands {
        let img = &images[bp.image];
        let mut first = vec![0.0; bp.len()];
        let mut second = vec![0.0; bp.len()];
        let mut touched = false;
        for t in [GALAXY, STAR] {
            if q[t] == 0.0 {
                continue;
            }
            let source = unit_source(vp, t);
            let inside: Vec<usize> = match clip {
                Some(region) => (0..bp.len())
                    .filter(|&i| region.contains(img, bp.rows[i], bp.cols[i]))
                    .collect(),
                None => {
                    let center = img.wcs.to_pixel(vp.direction);
                    let reach = truncation_radius(img, &source, table);
                    (0..bp.len())
                        .filter(|&i| (bp.cols[i] as f64 - center[0]).hypot(bp.rows[i] as f64 - center[1]) <= reach)
                        .collect()
                }
            };
            if inside.is_empty() {
                continue;
            }
            touched = true;
            let kernel = PixelKernel::for_source(img, &source, table)?;
            let (m1, m2) = brightness_moments(vp, t, img.band, ref_band);
            for i in inside {
                let f = bp.calib[i] * kernel.eval(bp.rows[i], bp.cols[i]);
                first[i] += q[t] * m1 * f;
                second[i] += q[t] * m2 * f * f;
            }
        }
        if !touched {
            continue;
        }
        for i in 0..bp.len() {
            bp.base[i] += first[i];
            bp.base_var[i] += (second[i] - first[i] * first[i]).max(0.0);
        }
    }
    Ok(())
}

/// Neighborhood of `target` within `region`, with each neighbor's expected
/// light confined to its own region.
pub fn build_neighborhood<'a>(
    images: &'a [ImageModel],
    target: &VariationalParams,
    region: &Region,
    neighbors: &[(&VariationalParams, &Region)],
    table: &ProfileTable,
    ref_band: usize,
) -> Result<Neighborhood<'a>> {
    let mut patch = Patch::new(images, region.center, region.radius, ref_band)?;
    for (vp, r) in neighbors {
        add_variational_source(&mut patch, images, vp, Some(r), table)?;
    }
    Ok(Neighborhood {
        images,
        patch,
        chart: Chart::new(images[0].wcs, target.direction),
    })
}

/// Neighborhood of a source with nothing else nearby.
pub fn isolated_neighborhood<'a>(
    images: &'a [ImageModel],
    vp: &VariationalParams,
    table: &ProfileTable,
    ref_band: usize,
) -> Result<Neighborhood<'a>> {
    let region = Region::for_source(images, vp, table, ref_band)?;
    build_neighborhood(images, vp, &region, &[], table, ref_band)
}

#[derive(Clone, Debug)]
pub struct VariationalFit {
    pub params: VariationalParams,
    pub elbo: f64,
    pub initial_elbo: f64,
    /// Newton iterations of the kept run.
    pub iterations: usize,
    /// Newton iterations over both runs.
    pub total_iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// ELBO after each accepted Newton step of the kept run.
    pub trace: Vec<f64>,
}

/// Maximizes the ELBO of one source over its variational parameters.
///
/// Once the type probability saturates, the losing branch gets almost no
/// gradient, so the fit can settle in the wrong type. A second run starts
/// from the first optimum with the type flipped and the winning branch's
/// brightness copied over; the better of the two is kept. The color mixture
/// weights are set to their optimum on return.
pub fn optimize_source(
    init: &VariationalParams,
    nb: &Neighborhood,
    prior: &PriorParams,
    table: &ProfileTable,
    options: &NewtonOptions,
) -> Result<VariationalFit> {
    fit_source(init, nb, prior, table, options, true)
}

/// Single Newton run from `init`, without the type-flip restart. For
/// sources whose type was already settled by [`optimize_source`].
pub fn refine_source(
    init: &VariationalParams,
    nb: &Neighborhood,
    prior: &PriorParams,
    table: &ProfileTable,
    options: &NewtonOptions,
) -> Result<VariationalFit> {
    fit_source(init, nb, prior, table, options, false)
}

fn fit_source(
    init: &VariationalParams,
    nb: &Neighborhood,
    prior: &PriorParams,
    table: &ProfileTable,
    options: &NewtonOptions,
    restart: bool,
) -> Result<VariationalFit> {
    init.validate()?;
    let objective = SourceObjective::new(nb, prior, table)?;
    let first = newton_trust_region(|x| objective.evaluate(x), &nb.chart.to_vector(init), options)?;
    let initial_elbo = first.trace[0];

    let second = if restart {
        let found = nb.chart.from_vector(&first.x, init.num_colors());
        let mut flipped = found.clone();
        let (win, lose) = if found.star_prob > 0.5 {
            (STAR, GALAXY)
        } else {
            (GALAXY, STAR)
        };
        flipped.star_prob = (1.0 - found.star_prob).clamp(FLIP_MIN, 1.0 - FLIP_MIN);
        flipped.flux_mean[lose] = found.flux_mean[win];
        flipped.flux_var[lose] = found.flux_var[win];
        flipped.color_mean[lose] = found.color_mean[win].clone();
        flipped.color_var[lose] = found.color_var[win];
        newton_trust_region(|x| objective.evaluate(x), &nb.chart.to_vector(&flipped), options).ok()
    } else {
        None
    };
    let total_iterations = first.iterations + second.as_ref().map_or(0, |r| r.iterations);
    let run = match second {
        Some(second) if second.value > first.value => second,
        _ => first,
    };

    let mut params = nb.chart.from_vector(&run.x, init.num_colors());
    for t in [GALAXY, STAR] {
        let comps = ColorComponent::from_gmm(&prior.color_gmm[t])?;
        params.xi[t] = optimal_xi(&params.color_mean[t], params.color_var[t], &comps);
    }
    Ok(VariationalFit {
        params,
        elbo: run.value,
        initial_elbo,
        iterations: run.iterations,
        total_iterations,
        converged: run.converged,
        gradient_norm: run.gradient_norm,
        trace: run.trace,
    })
}

/// Type probability the flipped restart starts from.
const FLIP_MIN: f64 = 0.01;
