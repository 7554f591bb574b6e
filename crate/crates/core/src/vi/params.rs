//! Variational parameters and their unconstrained coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{logit, sigmoid};
use crate::model::{AffineWcs, GalaxyShape, SourceParams};
use crate::posterior::{Moments, PosteriorSummary, TypeMoments};
use crate::priors::{PriorParams, GALAXY, STAR};

/// Factorized variational distribution for one source. Arrays indexed by
/// type hold the galaxy entry first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub star_prob: f64,
    /// Location of the log-normal on the reference-band flux.
    pub flux_mean: [f64; 2],
    /// Variance of the log reference-band flux.
    pub flux_var: [f64; 2],
    pub color_mean: [Vec<f64>; 2],
    /// Isotropic color variance.
    pub color_var: [f64; 2],
    /// Point mass, degrees.
    pub direction: [f64; 2],
    /// Point mass.
    pub shape: GalaxyShape,
    /// Weights over the prior color components, profiled out of the
    /// optimization and set to their optimum after each fit.
    pub xi: [Vec<f64>; 2],
}

impl VariationalParams {
    pub fn num_colors(&self) -> usize {
        self.color_mean[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::OutOfDomain(format!("variational {what}")));
        if !(self.star_prob > 0.0 && self.star_prob < 1.0) {
            return bad("star_prob");
        }
        for t in [GALAXY, STAR] {
            if !(self.flux_var[t] > 0.0 && self.color_var[t] > 0.0) {
                return bad("variance");
            }
            if !self.flux_mean[t].is_finite() || self.color_mean[t].iter().any(|c| !c.is_finite()) {
                return bad("mean");
            }
            if self.color_mean[t].len() != self.num_colors() {
                return bad("color length");
            }
            if !self.xi[t].is_empty() {
                let sum: f64 = self.xi[t].iter().sum();
                if (sum - 1.0).abs() > 1e-10 || self.xi[t].iter().any(|&w| w < 0.0) {
                    return bad("xi");
                }
            }
        }
        if !(self.shape.profile_weight > 0.0 && self.shape.profile_weight < 1.0) {
            return bad("profile weight");
        }
        self.shape.validate()
    }

    /// Initial state at a detected source: equal type odds, the detection's
    /// flux and colors for both types, and the given shape.
    pub fn from_source(source: &SourceParams, flux_var: f64, color_var: f64) -> Self {
        let mut shape = source.shape;
        shape.profile_weight = shape.profile_weight.clamp(1e-3, 1.0 - 1e-3);
        shape.axis_ratio = shape.axis_ratio.clamp(1e-3, 1.0 - 1e-3);
        Self {
            star_prob: 0.5,
            flux_mean: [source.ref_flux.ln(); 2],
            flux_var: [flux_var; 2],
            color_mean: [source.colors.clone(), source.colors.clone()],
            color_var: [color_var; 2],
            direction: source.direction,
            shape,
            xi: [Vec::new(), Vec::new()],
        }
    }

    /// Most probable type, with means of the variational factors.
    pub fn point_estimate(&self) -> SourceParams {
        let t = if self.star_prob > 0.5 { STAR } else { GALAXY };
        SourceParams {
            is_star: t == STAR,
            direction: self.direction,
            ref_flux: self.flux_mean[t].exp(),
            colors: self.color_mean[t].clone(),
            shape: self.shape,
        }
    }

    /// Mean reference flux of the type-marginal, in nanomaggies.
    pub fn mean_flux(&self) -> f64 {
        let e = |t: usize| (self.flux_mean[t] + 0.5 * self.flux_var[t]).exp();
        self.star_prob * e(STAR) + (1.0 - self.star_prob) * e(GALAXY)
    }

    pub fn summary(&self, source: usize, seconds: f64) -> PosteriorSummary {
        let per_type = [GALAXY, STAR].map(|t| TypeMoments {
            log_flux: Moments {
                mean: self.flux_mean[t],
                sd: self.flux_var[t].sqrt(),
            },
            colors: self.color_mean[t]
                .iter()
                .map(|&m| Moments {
                    mean: m,
                    sd: self.color_var[t].sqrt(),
                })
                .collect(),
        });
        let p = self.star_prob;
        PosteriorSummary {
            source,
            star_prob: p,
            direction: self.direction,
            log_flux: Moments::mix(p, per_type[GALAXY].log_flux, per_type[STAR].log_flux),
            colors: (0..self.num_colors())
                .map(|i| Moments::mix(p, per_type[GALAXY].colors[i], per_type[STAR].colors[i]))
                .collect(),
            shape: self.shape,
            per_type,
            ess: Default::default(),
            seconds,
            samples: None,
        }
    }
}

/// Positions of the parameter blocks in the unconstrained vector.
///
/// Order: logit star probability, two pixel offsets, four shape coordinates
/// (logit profile weight, angle in radians, log half-light radius, logit axis
/// ratio), then per type (galaxy first) the log-flux location, log of its
/// variance, the color means and the log color variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub num_colors: usize,
}

impl Layout {
    pub const STAR_LOGIT: usize = 0;
    pub const OFFSET: usize = 1;
    pub const SHAPE: usize = 3;
    pub const PROFILE: usize = 3;
    pub const ANGLE: usize = 4;
    pub const LOG_RADIUS: usize = 5;
    pub const AXIS: usize = 6;
    const TYPES: usize = 7;

    pub fn new(num_colors: usize) -> Self {
        Self { num_colors }
    }

    pub fn dim(&self) -> usize {
        Self::TYPES + 2 * self.type_block()
    }

    fn type_block(&self) -> usize {
        self.num_colors + 3
    }

    pub fn flux_mean(&self, t: usize) -> usize {
        Self::TYPES + t * self.type_block()
    }

    pub fn flux_log_var(&self, t: usize) -> usize {
        self.flux_mean(t) + 1
    }

    pub fn color(&self, t: usize, i: usize) -> usize {
        self.flux_mean(t) + 2 + i
    }

    pub fn color_log_var(&self, t: usize) -> usize {
        self.flux_mean(t) + 2 + self.num_colors
    }
}

/// Maps pixel offsets in one reference image to sky directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    pub wcs: AffineWcs,
    /// Pixel coordinates `[x, y]` of zero offset.
    pub center: [f64; 2],
}

impl Chart {
    pub fn new(wcs: AffineWcs, direction: [f64; 2]) -> Self {
        Self {
            wcs,
            center: wcs.to_pixel(direction),
        }
    }

    pub fn direction(&self, offset: [f64; 2]) -> [f64; 2] {
        self.wcs
            .to_sky([self.center[0] + offset[0], self.center[1] + offset[1]])
    }

    pub fn offset(&self, direction: [f64; 2]) -> [f64; 2] {
        let p = self.wcs.to_pixel(direction);
        [p[0] - self.center[0], p[1] - self.center[1]]
    }

    pub fn to_vector(&self, vp: &VariationalParams) -> Vec<f64> {
        let layout = Layout::new(vp.num_colors());
        let mut x = vec![0.0; layout.dim()];
        x[Layout::STAR_LOGIT] = logit(vp.star_prob);
        let o = self.offset(vp.direction);
        x[Layout::OFFSET] = o[0];
        x[Layout::OFFSET + 1] = o[1];
        x[Layout::PROFILE] = logit(vp.shape.profile_weight);
        x[Layout::ANGLE] = vp.shape.angle.to_radians();
        x[Layout::LOG_RADIUS] = vp.shape.half_light_radius.ln();
        x[Layout::AXIS] = logit(vp.shape.axis_ratio);
        for t in [GALAXY, STAR] {
            x[layout.flux_mean(t)] = vp.flux_mean[t];
            x[layout.flux_log_var(t)] = vp.flux_var[t].ln();
            for (i, &c) in vp.color_mean[t].iter().enumerate() {
                x[layout.color(t, i)] = c;
            }
            x[layout.color_log_var(t)] = vp.color_var[t].ln();
        }
        x
    }

    /// Inverse of [`Chart::to_vector`]; `xi` is left empty.
    pub fn from_vector(&self, x: &[f64], num_colors: usize) -> VariationalParams {
        let layout = Layout::new(num_colors);
        let per_type = |f: &dyn Fn(usize) -> f64| [f(GALAXY), f(STAR)];
        VariationalParams {
            star_prob: sigmoid(x[Layout::STAR_LOGIT]),
            flux_mean: per_type(&|t| x[layout.flux_mean(t)]),
            flux_var: per_type(&|t| x[layout.flux_log_var(t)].exp()),
            color_mean: [GALAXY, STAR].map(|t| (0..num_colors).map(|i| x[layout.color(t, i)]).collect()),
            color_var: per_type(&|t| x[layout.color_log_var(t)].exp()),
            direction: self.direction([x[Layout::OFFSET], x[Layout::OFFSET + 1]]),
            shape: GalaxyShape {
                profile_weight: sigmoid(x[Layout::PROFILE]),
                angle: x[Layout::ANGLE].to_degrees().rem_euclid(180.0),
                half_light_radius: x[Layout::LOG_RADIUS].exp(),
                axis_ratio: sigmoid(x[Layout::AXIS]),
            },
            xi: [Vec::new(), Vec::new()],
        }
    }
}

/// Starting variances for detected sources: the prior's log-flux variance
/// and a tenth of a unit color variance.
pub fn initial_variational(source: &SourceParams, prior: &PriorParams) -> VariationalParams {
    let flux_var = 0.5 * (prior.flux[GALAXY].log_var + prior.flux[STAR].log_var);
    VariationalParams::from_source(source, flux_var.min(0.1), 0.1)
}
