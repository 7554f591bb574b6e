//! Empirical-Bayes fit of prior hyperparameters to a catalog.

use rand::Rng;
use statrs::function::gamma::digamma;

use super::gmm::{fit_gmm, EmFit, EmOptions};
use super::params::{type_index, BetaParams, LogNormal, PriorParams, SkyWindow};
use crate::error::{Error, Result};
use crate::model::SourceParams;

/// Second derivative of ln Gamma.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 / 30.0)))
}

/// Maximum-likelihood mean and variance of `ln x`.
pub fn fit_log_normal(xs: &[f64]) -> LogNormal {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.ln()).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x.ln() - mean).powi(2)).sum::<f64>() / n;
    LogNormal::new(mean, var)
}

fn beta_objective(p: &BetaParams, mean_log: f64, mean_log1m: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let (a, b) = (p.alpha, p.beta);
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * mean_log + (b - 1.0) * mean_log1m
}

/// Beta maximum likelihood: moment-matched start, then damped Newton steps on
/// the (jointly concave) log-likelihood, halving until the objective improves
/// and both shapes stay positive.
pub fn fit_beta(xs: &[f64]) -> Result<BetaParams> {
    if xs.len() < 2 {
        return Err(Error::Fitting("beta fit needs at least two values".into()));
    }
    let clamp = |x: f64| x.clamp(1e-12, 1.0 - 1e-12);
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| clamp(x)).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (clamp(x) - mean).powi(2)).sum::<f64>() / n;
    let mean_log = xs.iter().map(|&x| clamp(x).ln()).sum::<f64>() / n;
    let mean_log1m = xs.iter().map(|&x| (-clamp(x)).ln_1p()).sum::<f64>() / n;

    let common = if var > 0.0 && var < mean * (1.0 - mean) {
        mean * (1.0 - mean) / var - 1.0
    } else {
        1.0
    };
    let mut p = BetaParams::new(mean * common, (1.0 - mean) * common);
    let mut obj = beta_objective(&p, mean_log, mean_log1m);
    for _ in 0..200 {
        let (a, b) = (p.alpha, p.beta);
        let ga = digamma(a + b) - digamma(a) + mean_log;
        let gb = digamma(a + b) - digamma(b) + mean_log1m;
        if ga.abs().max(gb.abs()) < 1e-12 {
            break;
        }
        let t = trigamma(a + b);
        let (haa, hbb, hab) = (t - trigamma(a), t - trigamma(b), t);
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-12 {
            let trial = BetaParams::new(a + step * da, b + step * db);
            if trial.alpha > 0.0 && trial.beta > 0.0 {
                let value = beta_objective(&trial, mean_log, mean_log1m);
                if value >= obj {
                    p = trial;
                    obj = value;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(p)
}

/// Fitted hyperparameters plus the EM traces of the two color mixtures.
#[derive(Clone, Debug)]
pub struct PriorFit {
    pub prior: PriorParams,
    pub color_fits: [EmFit; 2],
}

/// Maximum-likelihood hyperparameters for a catalog. The sky window is the
/// bounding box of the catalog's directions.
pub fn fit_priors<R: Rng + ?Sized>(catalog: &[SourceParams], components: usize, rng: &mut R) -> Result<PriorFit> {
    let groups: [Vec<&SourceParams>; 2] =
        [false, true].map(|star| catalog.iter().filter(|s| s.is_star == star).collect());
    for (name, g) in ["galaxies", "stars"].iter().zip(&groups) {
        if g.len() < 10 * components.max(1) {
            return Err(Error::Fitting(format!(
                "{} {name} cannot support {components} color components",
                g.len()
            )));
        }
    }
    let star_prob = groups[1].len() as f64 / catalog.len() as f64;
    let flux = [0, 1].map(|t| {
        let xs: Vec<f64> = groups[t].iter().map(|s| s.ref_flux).collect();
        fit_log_normal(&xs)
    });
    let opts = EmOptions::default();
    let mut color_fits = Vec::with_capacity(2);
    for g in &groups {
        let colors: Vec<Vec<f64>> = g.iter().map(|s| s.colors.clone()).collect();
        color_fits.push(fit_gmm(&colors, components, &opts, rng)?);
    }
    let galaxies = &groups[type_index(false)];
    let radius = fit_log_normal(&galaxies.iter().map(|s| s.shape.half_light_radius).collect::<Vec<_>>());
    let profile = fit_beta(&galaxies.iter().map(|s| s.shape.profile_weight).collect::<Vec<_>>())?;
    let axis = fit_beta(&galaxies.iter().map(|s| s.shape.axis_ratio).collect::<Vec<_>>())?;

    let mut window = SkyWindow {
        lon: [f64::INFINITY, f64::NEG_INFINITY],
        lat: [f64::INFINITY, f64::NEG_INFINITY],
    };
    for s in catalog {
        window.lon[0] = window.lon[0].min(s.direction[0]);
        window.lon[1] = window.lon[1].max(s.direction[0]);
        window.lat[0] = window.lat[0].min(s.direction[1]);
        window.lat[1] = window.lat[1].max(s.direction[1]);
    }
    let color_fits: [EmFit; 2] = color_fits.try_into().expect("two types");
    let prior = PriorParams {
        star_prob,
        flux,
        color_gmm: [color_fits[0].gmm.clone(), color_fits[1].gmm.clone()],
        radius,
        profile,
        axis,
        window,
    };
    prior.validate()?;
    Ok(PriorFit { prior, color_fits })
}
