//! Closed-form divergences between the variational factors and the prior.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::priors::{log_sum_exp, Gmm, PriorParams, GALAXY, STAR};

use super::params::VariationalParams;

/// KL between Bernoulli distributions with success probabilities `q` and `p`.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// KL between univariate normals `N(m1, v1)` and `N(m2, v2)`. Log-normals
/// with these log-space parameters have the same divergence.
pub fn normal_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

/// One prior color component, factored for repeated divergence evaluation.
#[derive(Clone, Debug)]
pub struct ColorComponent {
    pub log_weight: f64,
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub trace_precision: f64,
    pub log_det: f64,
}

impl ColorComponent {
    pub fn from_gmm(gmm: &Gmm) -> Result<Vec<Self>> {
        gmm.weights
            .iter()
            .zip(gmm.means.iter().zip(&gmm.covs))
            .map(|(&w, (m, c))| {
                let chol = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvalidParameter("color covariance not positive definite".into()))?;
                let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                let precision = chol.inverse();
                Ok(Self {
                    log_weight: w.ln(),
                    mean: m.clone(),
                    trace_precision: precision.trace(),
                    precision,
                    log_det,
                })
            })
            .collect()
    }

    /// KL from the isotropic normal `N(mean, var I)` to this component.
    pub fn kl(&self, mean: &[f64], var: f64) -> f64 {
        let c = mean.len() as f64;
        let d = DVector::from_column_slice(mean) - &self.mean;
        0.5 * (var * self.trace_precision + d.dot(&(&self.precision * &d)) - c + self.log_det - c * var.ln())
    }
}

/// Upper bound on the KL from `N(mean, var I)` to a Gaussian mixture:
/// `sum_j xi_j (ln(xi_j / w_j) + KL_j)`, exact for a single component.
pub fn gmm_kl_bound(mean: &[f64], var: f64, components: &[ColorComponent], xi: &[f64]) -> f64 {
    components
        .iter()
        .zip(xi)
        .map(|(c, &x)| {
            if x == 0.0 {
                0.0
            } else {
                x * (x.ln() - c.log_weight + c.kl(mean, var))
            }
        })
        .sum()
}

/// The simplex point minimizing [`gmm_kl_bound`]: `xi_j ∝ w_j exp(-KL_j)`.
pub fn optimal_xi(mean: &[f64], var: f64, components: &[ColorComponent]) -> Vec<f64> {
    let logits: Vec<f64> = components.iter().map(|c| c.log_weight - c.kl(mean, var)).collect();
    let norm = log_sum_exp(&logits);
    logits.iter().map(|l| (l - norm).exp()).collect()
}

/// Divergence of one source's variational distribution from the prior.
///
/// Point masses (direction and shape) contribute the negative log prior
/// density at their location. Color terms use `vp.xi` when set and the
/// optimal weights otherwise.
pub fn kl_source(vp: &VariationalParams, prior: &PriorParams) -> Result<f64> {
    let q = [1.0 - vp.star_prob, vp.star_prob];
    let mut total = bernoulli_kl(vp.star_prob, prior.star_prob);
    for t in [GALAXY, STAR] {
        let comps = ColorComponent::from_gmm(&prior.color_gmm[t])?;
        let xi = if vp.xi[t].is_empty() {
            optimal_xi(&vp.color_mean[t], vp.color_var[t], &comps)
        } else {
            vp.xi[t].clone()
        };
        let flux = normal_kl(
            vp.flux_mean[t],
            vp.flux_var[t],
            prior.flux[t].log_mean,
            prior.flux[t].log_var,
        );
        total += q[t] * (flux + gmm_kl_bound(&vp.color_mean[t], vp.color_var[t], &comps, &xi));
    }
    total += prior.window.area().ln() - prior.log_shape_density(&vp.shape)?;
    Ok(total)
}
