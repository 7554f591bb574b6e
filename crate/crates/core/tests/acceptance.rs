//! Acceptance suite. Each test checks one criterion, writes a single
//! `criterion N PASS|FAIL` line to stdout (bypassing the test harness's
//! output capture) and then asserts.
//!
//! Tests hold a process-wide lock so that wall-clock measurements are not
//! disturbed by other tests. The end-to-end criteria (6 to 8) share one
//! run over five synthetic scenes, computed by whichever of them runs first.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use skyfit_core::harness::{
    calibration, calibration_inputs, detect, pool_inputs, roc_auc, run_mcmc, run_vi, score, timing_report, Field,
    McmcRun, RunConfig, ScoreTable, ViRun,
};
use skyfit_core::mcmc::{run_ais, slice_sample, AisConfig, AnnealTarget, Support};
use skyfit_core::model::{
    add_source_rates, band_fluxes, galaxy_contribution, galaxy_mixture, log_likelihood, pixel_rate, AffineWcs,
    GalaxyShape, ImageModel, ProfileTable, SourceParams,
};
use skyfit_core::parallel::{fit_catalog, FitOptions};
use skyfit_core::patch::Patch;
use skyfit_core::priors::{Gmm, PriorParams, GALAXY, STAR};
use skyfit_core::simulator::{render, Scene, SceneConfig, MAX_FLUX_NMGY};
use skyfit_core::vi::{
    add_variational_source, bernoulli_kl, gmm_kl_bound, initial_variational, isolated_neighborhood, normal_kl,
    optimal_xi, optimize_source, Chart, ColorComponent, Neighborhood, NewtonOptions, SourceObjective,
    VariationalParams,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn say(msg: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{msg}");
    let _ = out.flush();
}

fn verdict(criterion: u32, title: &str, checks: &[(bool, String)]) {
    let ok = checks.iter().all(|c| c.0);
    let detail: Vec<String> = checks
        .iter()
        .map(|(pass, d)| if *pass { d.clone() } else { format!("{d} [miss]") })
        .collect();
    say(&format!(
        "criterion {criterion:>2} {} {title}: {}",
        if ok { "PASS" } else { "FAIL" },
        detail.join("; ")
    ));
    assert!(ok, "criterion {criterion} failed: {}", detail.join("; "));
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

// ---------------------------------------------------------------------------
// 1. model core

fn gauss2(p: [f64; 2], mean: [f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
    let q = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
}

fn eigen_sds(c: &[[f64; 2]; 2]) -> (f64, f64) {
    let mid = 0.5 * (c[0][0] + c[1][1]);
    let rad = (0.25 * (c[0][0] - c[1][1]).powi(2) + c[0][1] * c[0][1]).sqrt();
    ((mid - rad).max(0.0).sqrt(), (mid + rad).sqrt())
}

/// Midpoint rule for the integral of the product of two bivariate normal
/// densities, over a box around the narrower factor.
fn product_integral(m1: [f64; 2], c1: &[[f64; 2]; 2], m2: [f64; 2], c2: &[[f64; 2]; 2]) -> f64 {
    let (lo1, hi1) = eigen_sds(c1);
    let (lo2, hi2) = eigen_sds(c2);
    let (center, reach) = if hi1 <= hi2 { (m1, hi1) } else { (m2, hi2) };
    let half = 9.0 * reach;
    let n = ((2.0 * half / (0.5 * lo1.min(lo2))).ceil() as usize).clamp(64, 4000);
    let h = 2.0 * half / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = center[0] - half + (i as f64 + 0.5) * h;
        for j in 0..n {
            let p = [x, center[1] - half + (j as f64 + 0.5) * h];
            acc += gauss2(p, m1, c1) * gauss2(p, m2, c2);
        }
    }
    acc * h * h
}

/// Galaxy light at a pixel center: the sky-space mixture carried to pixels
/// by the WCS Jacobian, then convolved with each PSF component numerically.
fn galaxy_by_quadrature(image: &ImageModel, source: &SourceParams, table: &ProfileTable, pixel: (usize, usize)) -> f64 {
    let a = image.wcs.linear();
    let center = image.wcs.to_pixel(source.direction);
    let x = [pixel.1 as f64, pixel.0 as f64];
    let mut total = 0.0;
    for g in galaxy_mixture(&source.shape, source.direction, table) {
        if g.weight == 0.0 {
            continue;
        }
        let mut gc = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                gc[i][j] = (0..2)
                    .flat_map(|k| (0..2).map(move |l| (k, l)))
                    .map(|(k, l)| a[i][k] * g.cov[k][l] * a[j][l])
                    .sum();
            }
        }
        for k in &image.psf {
            // psf(x - y) as a density in y
            let pm = [x[0] - k.mean[0], x[1] - k.mean[1]];
            total += g.weight * k.weight * product_integral(center, &gc, pm, &k.cov);
        }
    }
    image.calib[pixel.1] * total
}

fn rotated_image(rng: &mut ChaCha8Rng, size: usize) -> ImageModel {
    let config = SceneConfig {
        height: size,
        width: size,
        ..Default::default()
    };
    let mut image = config.images().remove(config.ref_band);
    let theta: f64 = rng.random_range(0.0..PI);
    let scale = 3600.0 / rng.random_range(0.5..0.9);
    let (s, c) = theta.sin_cos();
    let origin = [10.0, -2.0];
    let lin = [[scale * c, -scale * s], [scale * s, scale * c]];
    let mid = 0.5 * size as f64;
    image.wcs = AffineWcs {
        coeffs: [
            mid - lin[0][0] * origin[0] - lin[0][1] * origin[1],
            lin[0][0],
            lin[0][1],
            mid - lin[1][0] * origin[0] - lin[1][1] * origin[1],
            lin[1][0],
            lin[1][1],
        ],
    };
    image
}

fn random_shape(rng: &mut ChaCha8Rng) -> GalaxyShape {
    GalaxyShape {
        profile_weight: rng.random_range(0.05..0.95),
        angle: rng.random_range(0.0..180.0),
        half_light_radius: rng.random_range(0.4..3.0),
        axis_ratio: rng.random_range(0.2..1.0),
    }
}

fn ln_factorial_by_sum(x: u32) -> f64 {
    (2..=x).map(|k| (k as f64).ln()).sum()
}

#[test]
fn criterion_01_model_core_oracles() {
    let _guard = serial();
    let start = Instant::now();
    let table = ProfileTable::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    // convolution against quadrature
    let mut worst_conv: f64 = 0.0;
    for _ in 0..20 {
        let mut image = rotated_image(&mut rng, 64);
        image.psf[0].mean = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let px = [32.0 + rng.random::<f64>(), 32.0 + rng.random::<f64>()];
        let source = SourceParams {
            is_star: false,
            direction: image.wcs.to_sky(px),
            ref_flux: 1.0,
            colors: vec![0.0; 4],
            shape: random_shape(&mut rng),
        };
        let pixel = (32 + rng.random_range(0..4) - 2, 32 + rng.random_range(0..4) - 2);
        let got = galaxy_contribution(&image, &source, &table, pixel).unwrap();
        let expect = galaxy_by_quadrature(&image, &source, &table, pixel);
        worst_conv = worst_conv.max((got - expect).abs() / expect);
    }

    // Poisson log-likelihood, pixel by pixel
    let prior = PriorParams::desk_default(5);
    let mut worst_ll: f64 = 0.0;
    for seed in 0..3 {
        let config = SceneConfig {
            height: 40,
            width: 40,
            sources: 4,
            seed,
            ..Default::default()
        };
        let scene = Scene::simulate(&config, &prior, &table).unwrap();
        for image in &scene.images {
            let got = log_likelihood(image, &scene.catalog, &table, config.ref_band).unwrap();
            let mut expect = 0.0;
            for row in 0..image.height {
                for col in 0..image.width {
                    let rate = pixel_rate(image, &scene.catalog, &table, config.ref_band, (row, col)).unwrap();
                    let x = image.count(row, col).unwrap();
                    expect += -rate + x as f64 * rate.ln() - ln_factorial_by_sum(x);
                }
            }
            worst_ll = worst_ll.max((got - expect).abs() / expect.abs());
        }
    }

    // total expected photons of one source equal its flux times calibration
    let mut worst_flux: f64 = 0.0;
    for i in 0..20 {
        let image = rotated_image(&mut rng, 128);
        let source = SourceParams {
            is_star: i % 2 == 0,
            direction: image.wcs.to_sky([63.7, 64.2]),
            ref_flux: rng.random_range(1.0..50.0),
            colors: (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
            shape: random_shape(&mut rng),
        };
        let mut rates = vec![0.0; image.height * image.width];
        add_source_rates(&image, &source, &table, 2, &mut rates).unwrap();
        let total: f64 = rates.iter().sum();
        let expect = band_fluxes(source.ref_flux, &source.colors, 2)[image.band] * image.calib[0];
        worst_flux = worst_flux.max((total - expect).abs() / expect);
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "model core",
        &[
            (
                worst_conv <= 1e-4,
                format!("convolution max rel err {worst_conv:.2e} (<= 1e-4, 20 cases)"),
            ),
            (
                worst_ll <= 1e-10,
                format!("log-likelihood max rel err {worst_ll:.2e} (<= 1e-10)"),
            ),
            (
                worst_flux <= 5e-3,
                format!("flux conservation max rel err {worst_flux:.2e} (<= 5e-3)"),
            ),
            (secs < 60.0, format!("{secs:.1} s (< 60 s)")),
        ],
    );
}

// ---------------------------------------------------------------------------
// 2. VI derivatives

#[derive(Clone, Copy, Debug)]
enum Regime {
    StarDominant,
    GalaxyDominant,
    Mixed,
}

fn derivative_state(k: usize, rng: &mut ChaCha8Rng) -> (Vec<ImageModel>, VariationalParams, Option<VariationalParams>) {
    let regime = [Regime::StarDominant, Regime::GalaxyDominant, Regime::Mixed][k % 3];
    let config = SceneConfig {
        height: 30,
        width: 30,
        ..Default::default()
    };
    let blank = config.images();
    let truth = SourceParams {
        is_star: matches!(regime, Regime::StarDominant),
        direction: blank[0].wcs.to_sky([14.6, 15.2]),
        ref_flux: rng.random_range(3.0..30.0),
        colors: (0..4).map(|_| rng.random_range(-0.6..0.2)).collect(),
        shape: random_shape(rng),
    };
    let neighbor = (k % 2 == 1).then(|| {
        let mut n = truth.clone();
        n.direction = blank[0].wcs.to_sky([19.0, 12.5]);
        n.is_star = !truth.is_star;
        n
    });
    let catalog: Vec<SourceParams> = std::iter::once(truth.clone()).chain(neighbor.clone()).collect();
    let table = ProfileTable::standard();
    let images = render(&catalog, &blank, &table, config.ref_band, 40 + k as u64).unwrap();

    let mut vp = VariationalParams::from_source(&truth, rng.random_range(0.01..0.2), rng.random_range(0.01..0.1));
    vp.star_prob = match regime {
        Regime::StarDominant => rng.random_range(0.9..0.99),
        Regime::GalaxyDominant => rng.random_range(0.01..0.1),
        Regime::Mixed => rng.random_range(0.3..0.7),
    };
    for t in [GALAXY, STAR] {
        vp.flux_mean[t] += rng.random_range(-0.3..0.3);
        vp.flux_var[t] = rng.random_range(0.005..0.2);
        vp.color_var[t] = rng.random_range(0.005..0.1);
        vp.color_mean[t]
            .iter_mut()
            .for_each(|c| *c += rng.random_range(-0.2..0.2));
    }
    let px = blank[0].wcs.to_pixel(truth.direction);
    vp.direction = blank[0]
        .wcs
        .to_sky([px[0] + rng.random_range(-0.5..0.5), px[1] + rng.random_range(-0.5..0.5)]);
    vp.shape.profile_weight = rng.random_range(0.1..0.9);
    vp.shape.axis_ratio = rng.random_range(0.3..0.9);
    let neighbor_vp = neighbor.map(|n| {
        let mut v = VariationalParams::from_source(&n, 0.05, 0.03);
        v.star_prob = 0.4;
        v
    });
    (images, vp, neighbor_vp)
}

#[test]
fn criterion_02_vi_derivatives() {
    let _guard = serial();
    let start = Instant::now();
    let table = ProfileTable::standard();
    let prior = PriorParams::desk_default(5);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let states = 24;
    let (mut worst_g, mut worst_h): (f64, f64) = (0.0, 0.0);
    for k in 0..states {
        let (images, vp, neighbor) = derivative_state(k, &mut rng);
        let mut patch = Patch::new(&images, vp.direction, 8.0, 2).unwrap();
        if let Some(n) = &neighbor {
            add_variational_source(&mut patch, &images, n, None, &table).unwrap();
        }
        let nb = Neighborhood {
            images: &images,
            patch,
            chart: Chart::new(images[0].wcs, vp.direction),
        };
        let objective = SourceObjective::new(&nb, &prior, &table).unwrap();
        let x = nb.chart.to_vector(&vp);
        let at = objective.evaluate(&x).unwrap();
        let n = x.len();
        let h = 1e-5;
        let mut fd_g = DVector::zeros(n);
        let mut fd_h = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let (p, m) = (objective.evaluate(&xp).unwrap(), objective.evaluate(&xm).unwrap());
            fd_g[i] = (p.value - m.value) / (2.0 * h);
            for j in 0..n {
                fd_h[(i, j)] = (p.gradient[j] - m.gradient[j]) / (2.0 * h);
            }
        }
        worst_g = worst_g.max((&fd_g - &at.gradient).amax() / at.gradient.amax().max(1.0));
        worst_h = worst_h.max((&fd_h - &at.hessian).amax() / at.hessian.amax().max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "VI derivatives",
        &[
            (worst_g <= 1e-4, format!("gradient max rel err {worst_g:.2e} (<= 1e-4)")),
            (worst_h <= 1e-3, format!("Hessian max rel err {worst_h:.2e} (<= 1e-3)")),
            (true, format!("{states} states over star, galaxy and mixed regimes")),
            (secs < 60.0, format!("{secs:.1} s (< 60 s)")),
        ],
    );
}

// ---------------------------------------------------------------------------
// 3. KL terms

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Gmm {
    let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let means = (0..k)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let covs = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.3..0.3));
            &a * a.transpose() + DMatrix::identity(dim, dim) * rng.random_range(0.05..0.3)
        })
        .collect();
    Gmm { weights, means, covs }
}

fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let d = x - mean;
    let z = chol.l().solve_lower_triangular(&d).unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det + z.norm_squared())
}

fn mixture_log_density(x: &DVector<f64>, gmm: &Gmm) -> f64 {
    let terms: Vec<f64> = (0..gmm.weights.len())
        .map(|j| gmm.weights[j].ln() + mvn_log_density(x, &gmm.means[j], &gmm.covs[j]))
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Draws from `N(mean, var I)` with their log-ratio against `log_p`.
fn isotropic_log_ratios(
    rng: &mut ChaCha8Rng,
    mean: &[f64],
    var: f64,
    n: usize,
    log_p: impl Fn(&DVector<f64>) -> f64,
) -> Vec<f64> {
    let m = DVector::from_column_slice(mean);
    let cov = DMatrix::identity(mean.len(), mean.len()) * var;
    (0..n)
        .map(|_| {
            let x = DVector::from_fn(mean.len(), |i, _| {
                let z: f64 = StandardNormal.sample(rng);
                mean[i] + var.sqrt() * z
            });
            mvn_log_density(&x, &m, &cov) - log_p(&x)
        })
        .collect()
}

#[test]
fn criterion_03_kl_terms() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut checks = Vec::new();

    let (q, p) = (0.8, 0.35);
    let xs: Vec<f64> = (0..100_000)
        .map(|_| {
            if rng.random::<f64>() < q {
                (q / p).ln()
            } else {
                ((1.0 - q) / (1.0 - p)).ln()
            }
        })
        .collect();
    let (m, se) = mean_se(&xs);
    let z = (m - bernoulli_kl(q, p)).abs() / se;
    checks.push((z < 4.0, format!("Bernoulli {z:.2} SE")));

    // log-normal: draws of the flux itself, densities on the flux scale
    let ((m1, v1), (m2, v2)) = ((1.3, 0.2), (0.9, 0.5));
    let log_normal = |x: f64, m: f64, v: f64| -x.ln() - 0.5 * (2.0 * PI * v).ln() - (x.ln() - m).powi(2) / (2.0 * v);
    let draw = Normal::new(m1, f64::sqrt(v1)).unwrap();
    let xs: Vec<f64> = (0..100_000)
        .map(|_| {
            let x = draw.sample(&mut rng).exp();
            log_normal(x, m1, v1) - log_normal(x, m2, v2)
        })
        .collect();
    let (m, se) = mean_se(&xs);
    let z = (m - normal_kl(m1, v1, m2, v2)).abs() / se;
    checks.push((z < 4.0, format!("log-normal {z:.2} SE")));

    let gmm = random_gmm(&mut rng, 1, 4);
    let comp = &ColorComponent::from_gmm(&gmm).unwrap()[0];
    let mean = [0.2, -0.1, 0.4, 0.0];
    let xs = isotropic_log_ratios(&mut rng, &mean, 0.05, 100_000, |x| {
        mvn_log_density(x, &gmm.means[0], &gmm.covs[0])
    });
    let (m, se) = mean_se(&xs);
    let z = (m - comp.kl(&mean, 0.05)).abs() / se;
    checks.push((z < 4.0, format!("Gaussian {z:.2} SE")));

    let (mut bound_ok, mut xi_ok, mut worst_margin) = (0, 0, f64::INFINITY);
    for c in 0..20 {
        let gmm = random_gmm(&mut rng, 2 + c % 3, 4);
        let comps = ColorComponent::from_gmm(&gmm).unwrap();
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var = rng.random_range(0.01..0.3);
        let xs = isotropic_log_ratios(&mut rng, &mean, var, 20_000, |x| mixture_log_density(x, &gmm));
        let (m, se) = mean_se(&xs);
        let xi = optimal_xi(&mean, var, &comps);
        let best = gmm_kl_bound(&mean, var, &comps, &xi);
        worst_margin = worst_margin.min((best - m) / se);
        bound_ok += usize::from(best >= m - 3.0 * se);
        let beats = (0..100).all(|_| {
            let mut w: Vec<f64> = (0..comps.len()).map(|_| -rng.random::<f64>().ln()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            gmm_kl_bound(&mean, var, &comps, &w) >= best
        });
        xi_ok += usize::from(beats);
    }
    checks.push((
        bound_ok == 20,
        format!("mixture bound >= MC - 3 SE on {bound_ok}/20 (min margin {worst_margin:+.2} SE)"),
    ));
    checks.push((
        xi_ok == 20,
        format!("optimal xi beats 100 simplex points on {xi_ok}/20"),
    ));
    verdict(3, "KL terms", &checks);
}

// ---------------------------------------------------------------------------
// 4. AIS

/// Log flux with a normal prior and a Gaussian pseudo-likelihood.
struct LogFluxToy {
    mu: f64,
    v: f64,
    obs: f64,
    s2: f64,
    blank: bool,
}

impl LogFluxToy {
    fn log_z(&self) -> f64 {
        let var = self.v + self.s2;
        -0.5 * (2.0 * PI * var).ln() - (self.obs - self.mu).powi(2) / (2.0 * var)
    }
}

impl AnnealTarget for LogFluxToy {
    fn dim(&self) -> usize {
        1
    }
    fn support(&self, _: usize) -> Support {
        Support::Real
    }
    fn width(&self, _: usize) -> f64 {
        self.v.sqrt()
    }
    fn sample_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        vec![Normal::new(self.mu, self.v.sqrt()).unwrap().sample(rng)]
    }
    fn log_prior(&mut self, x: &[f64]) -> f64 {
        -0.5 * (2.0 * PI * self.v).ln() - (x[0] - self.mu).powi(2) / (2.0 * self.v)
    }
    fn log_likelihood(&mut self, x: &[f64]) -> f64 {
        if self.blank {
            0.0
        } else {
            -0.5 * (2.0 * PI * self.s2).ln() - (self.obs - x[0]).powi(2) / (2.0 * self.s2)
        }
    }
}

#[test]
fn criterion_04_ais_marginal_likelihood() {
    let _guard = serial();
    let prior = PriorParams::desk_default(5);
    let config = AisConfig::desk();
    let schedule = config.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut estimates = |toy: &mut LogFluxToy| -> Vec<f64> {
        (0..25)
            .map(|_| run_ais(toy, &schedule, &mut rng).unwrap().log_weight)
            .collect()
    };
    let mut toy = LogFluxToy {
        mu: prior.flux[STAR].log_mean,
        v: prior.flux[STAR].log_var,
        obs: 14f64.ln(),
        s2: 0.02,
        blank: false,
    };
    let (m, se) = mean_se(&estimates(&mut toy));
    let truth = toy.log_z();
    toy.blank = true;
    let (bm, bse) = mean_se(&estimates(&mut toy));
    verdict(
        4,
        "AIS",
        &[
            (
                (m - truth).abs() <= 3.0 * se,
                format!(
                    "toy logZ {m:.4} vs {truth:.4}, {:.2} SE (T = {})",
                    (m - truth).abs() / se,
                    config.temperatures
                ),
            ),
            (bm.abs() <= 3.0 * bse, format!("blank logZ {bm:.2e} (SE {bse:.1e})")),
        ],
    );
}

// ---------------------------------------------------------------------------
// 5. slice sampler

#[test]
fn criterion_05_slice_sampler_moments() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 100_000;
    let mut x = 0.0;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        x = slice_sample(|v| -0.5 * v * v, x, 1.0, Support::Real, &mut rng).unwrap();
        draws.push(x);
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    verdict(
        5,
        "slice sampler",
        &[
            (mean.abs() < 0.02, format!("mean {mean:+.4} (|err| < 0.02)")),
            ((var - 1.0).abs() < 0.05, format!("variance {var:.4} (|err| < 0.05)")),
        ],
    );
}

// ---------------------------------------------------------------------------
// 6 to 8. end-to-end synthetic scenes

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const THREADS: usize = 8;

struct SeedRun {
    truth: Vec<SourceParams>,
    detections: usize,
    vi: ViRun,
    mcmc: McmcRun,
    vi_scores: ScoreTable,
    mcmc_scores: ScoreTable,
}

fn end_to_end() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let prior = PriorParams::desk_default(5);
        let table = ProfileTable::standard();
        SEEDS
            .iter()
            .map(|&seed| {
                let mut config = RunConfig::default();
                config.set_seed(seed);
                config.threads = THREADS;
                let scene = Scene::simulate(&config.scene, &prior, &table).unwrap();
                let init = detect(&scene.images, &config).unwrap();
                let vi = run_vi(&scene.images, &init, &prior, &table, &config).unwrap();
                let mcmc = run_mcmc(&scene.images, &init, &prior, &table, &config).unwrap();
                let wcs = config.scene.wcs();
                let vi_scores = score(&vi.summaries, &scene.catalog, &wcs, config.match_radius).unwrap();
                let mcmc_scores = score(&mcmc.summaries, &scene.catalog, &wcs, config.match_radius).unwrap();
                say(&format!(
                    "  scene seed {seed}: {} sources, {} detections, VI {:.1} s, MCMC {:.1} s",
                    scene.catalog.len(),
                    init.len(),
                    vi.report.wall_seconds,
                    mcmc.report.wall_seconds
                ));
                SeedRun {
                    truth: scene.catalog,
                    detections: init.len(),
                    vi,
                    mcmc,
                    vi_scores,
                    mcmc_scores,
                }
            })
            .collect()
    })
}

fn pooled(runs: &[SeedRun], pick: impl Fn(&SeedRun) -> &ScoreTable) -> ScoreTable {
    ScoreTable::pool(&runs.iter().map(|r| pick(r).clone()).collect::<Vec<_>>()).unwrap()
}

fn auc(table: &ScoreTable) -> f64 {
    let (scores, labels) = table.classification();
    roc_auc(&scores, &labels).unwrap().auc
}

fn mae(table: &ScoreTable, field: Field) -> f64 {
    table.field(field).and_then(|f| f.mae).unwrap()
}

#[test]
fn criterion_06_end_to_end_accuracy() {
    let _guard = serial();
    let runs = end_to_end();
    let vi = pooled(runs, |r| &r.vi_scores);
    let mc = pooled(runs, |r| &r.mcmc_scores);
    let (vi_auc, mc_auc) = (auc(&vi), auc(&mc));
    let (vi_dir, mc_dir) = (mae(&vi, Field::Direction), mae(&mc, Field::Direction));
    let (vi_flux, mc_flux) = (mae(&vi, Field::LogFlux), mae(&mc, Field::LogFlux));
    let vi_wall = runs.iter().map(|r| r.vi.report.wall_seconds).fold(0.0, f64::max);
    let mc_wall = runs.iter().map(|r| r.mcmc.report.wall_seconds).fold(0.0, f64::max);
    let sources: usize = runs.iter().map(|r| r.truth.len()).sum();
    let detections: usize = runs.iter().map(|r| r.detections).sum();
    verdict(
        6,
        "end-to-end accuracy",
        &[
            (
                true,
                format!(
                    "{} scenes, {sources} sources, {detections} detections, {} matched by VI",
                    runs.len(),
                    vi.matched
                ),
            ),
            (
                vi_auc >= 0.95 && mc_auc >= 0.95,
                format!("AUC VI {vi_auc:.3} MCMC {mc_auc:.3} (>= 0.95)"),
            ),
            (
                vi_dir <= 0.5 && mc_dir <= 0.5,
                format!("direction MAE VI {vi_dir:.3} MCMC {mc_dir:.3} px (<= 0.5)"),
            ),
            (
                vi_flux <= 0.3 && mc_flux <= 0.3,
                format!("log-flux MAE VI {vi_flux:.3} MCMC {mc_flux:.3} (<= 0.3)"),
            ),
            (
                vi_wall < 300.0,
                format!("VI {vi_wall:.1} s per scene on {THREADS} threads (< 300 s)"),
            ),
            (mc_wall < 7200.0, format!("MCMC {mc_wall:.0} s per scene (< 7200 s)")),
        ],
    );
}

#[test]
fn criterion_07_calibration() {
    let _guard = serial();
    let runs = end_to_end();
    let table = |pick: &dyn Fn(&SeedRun) -> (&[skyfit_core::posterior::PosteriorSummary], &ScoreTable)| {
        let mut inputs = Vec::new();
        for r in runs {
            let (est, scores) = pick(r);
            pool_inputs(&mut inputs, calibration_inputs(est, &r.truth, scores));
        }
        calibration(&inputs).unwrap()
    };
    let vi = table(&|r| (&r.vi.summaries, &r.vi_scores));
    let mc = table(&|r| (&r.mcmc.summaries, &r.mcmc_scores));
    // index 2 is the within-2-SD column
    let within2 = |t: &skyfit_core::harness::CalibrationTable, f: &str| t.row(f).unwrap().proportions[2];
    let mc_flux = within2(&mc, "log_flux");
    let vi_flux = within2(&vi, "log_flux");
    let colors: Vec<f64> = (0..4).map(|i| within2(&mc, &format!("color_{i}"))).collect();
    let worst_color = colors.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        7,
        "calibration",
        &[
            (
                (0.85..=0.99).contains(&mc_flux),
                format!("MCMC log flux within 2 SD {mc_flux:.3} (in [0.85, 0.99])"),
            ),
            (
                worst_color >= 0.85,
                format!(
                    "MCMC colors within 2 SD {} (>= 0.85)",
                    colors.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(" ")
                ),
            ),
            (
                vi_flux <= mc_flux,
                format!("VI log flux within 2 SD {vi_flux:.3} (<= MCMC)"),
            ),
        ],
    );
}

#[test]
fn criterion_08_speed_ordering() {
    let _guard = serial();
    let runs = end_to_end();
    let vi: Vec<_> = runs.iter().flat_map(|r| r.vi.summaries.iter().cloned()).collect();
    let mc: Vec<_> = runs.iter().flat_map(|r| r.mcmc.summaries.iter().cloned()).collect();
    let t = timing_report(&vi, &mc).unwrap();
    verdict(
        8,
        "speed ordering",
        &[
            (
                t.mcmc_to_vi_ratio >= 10.0,
                format!(
                    "per source MCMC {:.2} s, VI {:.3} s, ratio {:.1} (>= 10)",
                    t.mcmc_seconds_per_source, t.vi_seconds_per_source, t.mcmc_to_vi_ratio
                ),
            ),
            (
                true,
                format!(
                    "ESS of {} {:.2} per second",
                    t.ess_parameter,
                    t.mcmc_ess_per_second.unwrap_or(f64::NAN)
                ),
            ),
        ],
    );
}

// ---------------------------------------------------------------------------
// 9. parallel fit

#[test]
fn criterion_09_parallel_correctness() {
    let _guard = serial();
    let prior = PriorParams::desk_default(5);
    let table = ProfileTable::standard();
    let mut checks = Vec::new();

    // isolated sources on a grid 60 pixels apart
    let config = SceneConfig {
        height: 200,
        width: 200,
        ..Default::default()
    };
    let wcs = config.wcs();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut truth = Vec::new();
    for i in 0..9 {
        let px = [
            40.0 + 60.0 * (i % 3) as f64 + rng.random::<f64>(),
            40.0 + 60.0 * (i / 3) as f64 + rng.random::<f64>(),
        ];
        let mut s = prior.sample_source_of_type(i % 2 == 0, &mut rng);
        s.direction = wcs.to_sky(px);
        s.ref_flux = rng.random_range(8.0..40.0);
        truth.push(s);
    }
    let images = render(&truth, &config.images(), &table, config.ref_band, 9).unwrap();
    let init: Vec<VariationalParams> = truth
        .iter()
        .map(|s| {
            let mut d = s.clone();
            d.is_star = false;
            d.ref_flux *= 0.8;
            initial_variational(&d, &prior)
        })
        .collect();
    let options = |threads| FitOptions {
        threads,
        ..Default::default()
    };
    let (one, r1) = fit_catalog(&images, &init, &prior, &table, &options(1)).unwrap();
    let (eight, r8) = fit_catalog(&images, &init, &prior, &table, &options(8)).unwrap();
    let same_elbo = r1
        .sources
        .iter()
        .zip(&r8.sources)
        .all(|(a, b)| a.elbo.to_bits() == b.elbo.to_bits());
    checks.push((
        r1.edges == 0,
        format!("{} sources, {} overlap edges", init.len(), r1.edges),
    ));
    checks.push((
        one == eight && same_elbo,
        format!("8 threads bit-identical to 1: {}", one == eight && same_elbo),
    ));

    // lock log of a crowded scene
    let mut run = RunConfig::default();
    run.set_seed(0);
    run.threads = 8;
    let scene = Scene::simulate(&run.scene, &prior, &table).unwrap();
    let start: Vec<VariationalParams> = detect(&scene.images, &run)
        .unwrap()
        .iter()
        .map(|s| initial_variational(s, &prior))
        .collect();
    let (_, report) = fit_catalog(&scene.images, &start, &prior, &table, &run.fit_options()).unwrap();
    let centers: Vec<[f64; 2]> = report
        .regions
        .iter()
        .map(|r| scene.images[0].wcs.to_pixel(r.center))
        .collect();
    let adjacent = |a: usize, b: usize| {
        a != b && {
            let d = (centers[a][0] - centers[b][0]).hypot(centers[a][1] - centers[b][1]);
            d <= report.regions[a].radius + report.regions[b].radius
        }
    };
    let mut overlaps = 0;
    for (i, a) in report.intervals.iter().enumerate() {
        for b in &report.intervals[i + 1..] {
            if adjacent(a.source, b.source) && a.start < b.end && b.start < a.end {
                overlaps += 1;
            }
        }
    }
    let updates: usize = report.sources.iter().map(|s| s.updates).sum();
    checks.push((
        overlaps == 0 && report.intervals.len() == updates,
        format!(
            "{} logged updates over {} sources with {} edges, {overlaps} adjacent overlaps",
            report.intervals.len(),
            start.len(),
            report.edges
        ),
    ));
    let rising = report.global_elbo.windows(2).all(|w| w[1] >= w[0]);
    checks.push((
        rising,
        format!(
            "global ELBO by pass {}",
            report
                .global_elbo
                .iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    ));
    verdict(9, "parallel fit", &checks);
}

// ---------------------------------------------------------------------------
// 10. Newton subsolver

#[test]
fn criterion_10_newton_convergence() {
    let _guard = serial();
    let prior = PriorParams::desk_default(5);
    let table = ProfileTable::standard();
    let mut config = RunConfig::default();
    config.scene.height = 48;
    config.scene.width = 48;
    let wcs = config.scene.wcs();
    let blank = config.scene.images();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut fitted, mut undetected, mut good) = (0, 0, 0);
    let mut iterations = Vec::new();
    while fitted < 100 {
        let mut s = prior.sample_source(&mut rng);
        if band_fluxes(s.ref_flux, &s.colors, 2).iter().any(|&f| f > MAX_FLUX_NMGY) {
            continue;
        }
        s.direction = wcs.to_sky([rng.random_range(22.0..26.0), rng.random_range(22.0..26.0)]);
        let images = render(std::slice::from_ref(&s), &blank, &table, 2, rng.random()).unwrap();
        let truth_px = wcs.to_pixel(s.direction);
        let found = detect(&images, &config).unwrap().into_iter().find(|d| {
            let p = wcs.to_pixel(d.direction);
            (p[0] - truth_px[0]).hypot(p[1] - truth_px[1]) < 2.0
        });
        let Some(d) = found else {
            undetected += 1;
            continue;
        };
        let init = initial_variational(&d, &prior);
        let nb = isolated_neighborhood(&images, &init, &table, 2).unwrap();
        let fit = optimize_source(&init, &nb, &prior, &table, &NewtonOptions::default()).unwrap();
        fitted += 1;
        iterations.push(fit.iterations);
        if fit.converged && fit.gradient_norm < 1e-6 && fit.iterations <= 50 {
            good += 1;
        }
    }
    iterations.sort_unstable();
    verdict(
        10,
        "Newton subsolver",
        &[
            (
                good >= 95,
                format!("{good}/100 reach gradient < 1e-6 within 50 iterations (>= 95)"),
            ),
            (
                true,
                format!(
                    "iterations median {} max {}; {undetected} faint draws not detected and redrawn",
                    iterations[50], iterations[99]
                ),
            ),
        ],
    );
}
