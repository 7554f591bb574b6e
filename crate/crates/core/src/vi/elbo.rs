//! The single-source evidence lower bound with analytic derivatives.
//!
//! Per pixel the expected log-likelihood is a function of seven scalars: the
//! star probability, the first and second brightness moments of each type,
//! and the galaxy and star kernel values. Its derivatives in those scalars
//! have closed forms; the kernel values carry their own derivatives in the
//! spatial variables. Sums over pixels are taken in these local variables
//! and mapped to the unconstrained coordinates once per band.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::jet::{logit, DJet};
use crate::model::{color_weights, ImageModel, ProfileTable, ARCSEC_PER_DEGREE};
use crate::patch::Patch;
use crate::priors::{BetaParams, PriorParams, GALAXY, STAR};

use super::kernel::{spatial_jets, SpatialJets};
use super::kl::ColorComponent;
use super::params::{Chart, Layout, VariationalParams};

/// ELBO value with gradient and Hessian in the unconstrained coordinates.
#[derive(Clone, Debug)]
pub struct ElboValue {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Pixels and fixed surroundings of one source.
#[derive(Clone, Debug)]
pub struct Neighborhood<'a> {
    pub images: &'a [ImageModel],
    /// Base rates hold the sky plus the neighbors' expected light; base
    /// variances hold the neighbors' rate variances.
    pub patch: Patch,
    pub chart: Chart,
}

/// Local variables: star probability, galaxy and star first moments, galaxy
/// and star second moments, pixel offset (2), unit covariance (3), profile
/// weight.
const LOCAL: usize = 11;
const OX: usize = 5;

/// Sum of per-pixel terms with derivatives in the local variables.
struct LocalSum {
    v: f64,
    g: [f64; LOCAL],
    h: [[f64; LOCAL]; LOCAL],
}

/// The objective for one source, with its data-independent pieces cached.
pub struct SourceObjective<'a> {
    nb: &'a Neighborhood<'a>,
    prior: &'a PriorParams,
    table: &'a ProfileTable,
    layout: Layout,
    colors: [Vec<ColorComponent>; 2],
    /// Per band patch: coefficients mapping the arcsec^2 galaxy covariance
    /// (xx, xy, yy) to the unit covariance in pixels.
    cov_maps: Vec<[[f64; 3]; 3]>,
}

fn cov_map(image: &ImageModel) -> [[f64; 3]; 3] {
    let a = image.wcs.linear();
    let s = 1.0 / (ARCSEC_PER_DEGREE * ARCSEC_PER_DEGREE);
    let entries = [(0, 0), (0, 1), (1, 1)];
    let mut out = [[0.0; 3]; 3];
    for (row, &(i, j)) in out.iter_mut().zip(&entries) {
        row[0] = s * a[i][0] * a[j][0];
        row[1] = s * (a[i][0] * a[j][1] + a[i][1] * a[j][0]);
        row[2] = s * a[i][1] * a[j][1];
    }
    out
}

/// A jet that is affine in the listed coordinates.
fn affine(n: usize, value: f64, grads: &[(usize, f64)]) -> DJet {
    let mut j = DJet::constant(value, n);
    for &(i, g) in grads {
        j.g[i] += g;
    }
    j
}

fn cos_jet(x: &DJet) -> DJet {
    let (s, c) = x.v.sin_cos();
    x.chain(c, -s, -c)
}

fn sin_jet(x: &DJet) -> DJet {
    let (s, c) = x.v.sin_cos();
    x.chain(s, c, -s)
}

fn log_beta_jet(beta: &BetaParams, logit_x: &DJet) -> DJet {
    // ln x = -softplus(-t), ln(1 - x) = -softplus(t)
    let ln_x = logit_x.scale(-1.0).softplus().scale(-1.0);
    let ln_1mx = logit_x.softplus().scale(-1.0);
    let norm = ln_gamma(beta.alpha) + ln_gamma(beta.beta) - ln_gamma(beta.alpha + beta.beta);
    let mut out = ln_x.scale(beta.alpha - 1.0);
    out.add_scaled(beta.beta - 1.0, &ln_1mx);
    out.add_const(-norm)
}

impl<'a> SourceObjective<'a> {
    pub fn new(nb: &'a Neighborhood<'a>, prior: &'a PriorParams, table: &'a ProfileTable) -> Result<Self> {
        if !(prior.star_prob > 0.0 && prior.star_prob < 1.0) {
            return Err(Error::InvalidParameter(
                "variational fitting needs a prior star probability strictly inside (0, 1)".into(),
            ));
        }
        let colors = [
            ColorComponent::from_gmm(&prior.color_gmm[GALAXY])?,
            ColorComponent::from_gmm(&prior.color_gmm[STAR])?,
        ];
        Ok(Self {
            nb,
            prior,
            table,
            layout: Layout::new(prior.num_colors()),
            colors,
            cov_maps: nb.patch.bands.iter().map(|bp| cov_map(&nb.images[bp.image])).collect(),
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn chart(&self) -> &Chart {
        &self.nb.chart
    }

    /// Galaxy covariance entries (xx, xy, yy) in arcsec^2 as jets.
    fn shape_cov(&self, x: &[f64]) -> [DJet; 3] {
        let n = self.layout.dim();
        let phi = DJet::variable(x[Layout::ANGLE], Layout::ANGLE, n);
        let (c, s) = (cos_jet(&phi), sin_jet(&phi));
        let major = affine(n, 2.0 * x[Layout::LOG_RADIUS], &[(Layout::LOG_RADIUS, 2.0)]).exp();
        let axis = DJet::variable(x[Layout::AXIS], Layout::AXIS, n).sigmoid();
        let minor = major.mul(&axis.mul(&axis));
        let (cc, ss, cs) = (c.mul(&c), s.mul(&s), c.mul(&s));
        [
            cc.mul(&major).add(&ss.mul(&minor)),
            cs.mul(&minor.sub(&major)),
            ss.mul(&major).add(&cc.mul(&minor)),
        ]
    }

    /// First and second brightness moments of type `t` in `band` as jets.
    fn brightness(&self, x: &[f64], t: usize, band: usize) -> (DJet, DJet) {
        let n = self.layout.dim();
        let l = &self.layout;
        let w = color_weights(band, self.nb.patch.ref_band, l.num_colors);
        let nw: f64 = w.iter().map(|a| a * a).sum();
        let mut lin = affine(n, x[l.flux_mean(t)], &[(l.flux_mean(t), 1.0)]);
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                lin.v += wi * x[l.color(t, i)];
                lin.g[l.color(t, i)] += wi;
            }
        }
        let (fi, ci) = (l.flux_log_var(t), l.color_log_var(t));
        let fv = x[fi].exp();
        let cv = nw * x[ci].exp();
        let mut var = affine(n, fv + cv, &[(fi, fv), (ci, cv)]);
        var.h[fi * n + fi] = fv;
        var.h[ci * n + ci] = cv;
        let mut e1 = lin.clone();
        e1.add_scaled(0.5, &var);
        let mut e2 = lin.scale(2.0);
        e2.add_scaled(2.0, &var);
        (e1.exp(), e2.exp())
    }

    /// Divergence terms, as a jet in the unconstrained coordinates.
    pub fn kl(&self, x: &[f64]) -> DJet {
        let n = self.layout.dim();
        let l = &self.layout;
        let prior = self.prior;

        let t0 = x[Layout::STAR_LOGIT];
        let a = crate::jet::sigmoid(t0);
        let d = t0 - logit(prior.star_prob);
        let mut total = DJet::constant(super::kl::bernoulli_kl(a, prior.star_prob), n);
        total.g[0] = a * (1.0 - a) * d;
        total.h[0] = a * (1.0 - a) * ((1.0 - 2.0 * a) * d + 1.0);
        debug_assert!(total.v >= -1e-12);

        let star = DJet::variable(t0, Layout::STAR_LOGIT, n).sigmoid();
        let weights = [star.scale(-1.0).add_const(1.0), star];
        for t in [GALAXY, STAR] {
            let (mi, vi) = (l.flux_mean(t), l.flux_log_var(t));
            let (m, s2) = (prior.flux[t].log_mean, prior.flux[t].log_var);
            let v = x[vi].exp();
            let mut flux = affine(
                n,
                super::kl::normal_kl(x[mi], v, m, s2),
                &[(mi, (x[mi] - m) / s2), (vi, 0.5 * (v / s2 - 1.0))],
            );
            flux.h[mi * n + mi] = 1.0 / s2;
            flux.h[vi * n + vi] = 0.5 * v / s2;
            debug_assert!(flux.v >= -1e-12);

            let ci = l.color_log_var(t);
            let nu = x[ci].exp();
            let c = l.num_colors as f64;
            let mean: Vec<f64> = (0..l.num_colors).map(|i| x[l.color(t, i)]).collect();
            let terms: Vec<DJet> = self.colors[t]
                .iter()
                .map(|comp| {
                    let dv = DVector::from_column_slice(&mean) - &comp.mean;
                    let pd = &comp.precision * &dv;
                    let kl = comp.kl(&mean, nu);
                    debug_assert!(kl >= -1e-10);
                    let mut j = DJet::constant(-kl, n);
                    for i in 0..l.num_colors {
                        j.g[l.color(t, i)] = -pd[i];
                        for k in 0..l.num_colors {
                            j.h[l.color(t, i) * n + l.color(t, k)] = -comp.precision[(i, k)];
                        }
                    }
                    j.g[ci] = -0.5 * (nu * comp.trace_precision - c);
                    j.h[ci * n + ci] = -0.5 * nu * comp.trace_precision;
                    j.add_const(comp.log_weight)
                })
                .collect();
            let bound = DJet::log_sum_exp(&terms).scale(-1.0);
            total = total.add(&weights[t].mul(&flux.add(&bound)));
        }

        // point masses: negative log prior density at the point
        let mut point = log_beta_jet(&prior.profile, &DJet::variable(x[Layout::PROFILE], Layout::PROFILE, n));
        point.add_scaled(
            1.0,
            &log_beta_jet(&prior.axis, &DJet::variable(x[Layout::AXIS], Layout::AXIS, n)),
        );
        let (rm, rv) = (prior.radius.log_mean, prior.radius.log_var);
        let lr = x[Layout::LOG_RADIUS];
        let mut radius = affine(
            n,
            -lr - 0.5 * (2.0 * std::f64::consts::PI * rv).ln() - (lr - rm).powi(2) / (2.0 * rv),
            &[(Layout::LOG_RADIUS, -1.0 - (lr - rm) / rv)],
        );
        radius.h[Layout::LOG_RADIUS * n + Layout::LOG_RADIUS] = -1.0 / rv;
        point.add_scaled(1.0, &radius);
        let point = point.add_const(-(180f64.ln()) - prior.window.area().ln());
        total.sub(&point)
    }

    /// Expected log-likelihood of one band patch in the local variables.
    fn band_sum(&self, b: usize, q: f64, g: [f64; 2], s: [f64; 2], jets: &SpatialJets) -> LocalSum {
        let bp = &self.nb.patch.bands[b];
        let mut acc = LocalSum {
            v: 0.0,
            g: [0.0; LOCAL],
            h: [[0.0; LOCAL]; LOCAL],
        };
        let (g1, g2) = (g[0], g[1]);
        let (s1, s2) = (s[0], s[1]);
        let p = 1.0 - q;
        for i in 0..bp.len() {
            let fg = &jets.galaxy[i];
            let fs = &jets.star[i];
            let (a, c) = (fg.v, fs.v);
            let x = bp.counts[i];
            let gg = g1 * a;
            let ss = s1 * c;
            let d = p * gg + q * ss;
            let e = bp.base[i] + d;
            let m2 = p * g2 * a * a + q * s2 * c * c;
            let var = bp.base_var[i] + m2 - d * d;
            let inv = 1.0 / e;
            let inv2 = inv * inv;
            acc.v += x * (e.ln() - 0.5 * var * inv2) - e - bp.ln_fact[i];
            let le = x * inv + x * var * inv2 * inv - 1.0;
            let lv = -0.5 * x * inv2;
            let lee = -x * inv2 - 3.0 * x * var * inv2 * inv2;
            let lev = x * inv2 * inv;

            let ez = [ss - gg, p * a, q * c, 0.0, 0.0, p * g1, q * s1];
            let m2z = [
                s2 * c * c - g2 * a * a,
                0.0,
                0.0,
                p * a * a,
                q * c * c,
                2.0 * p * g2 * a,
                2.0 * q * s2 * c,
            ];
            let mut vz = [0.0; 7];
            let mut lz = [0.0; 7];
            for k in 0..7 {
                vz[k] = m2z[k] - 2.0 * d * ez[k];
                lz[k] = le * ez[k] + lv * vz[k];
            }
            // L_zz = (le - 2 lv d) E_zz + lv M2_zz + (lee - 2 lv) ez ez^T + lev (ez vz^T + vz ez^T)
            let ce = le - 2.0 * lv * d;
            let cee = lee - 2.0 * lv;
            let mut lzz = [[0.0; 7]; 7];
            for r in 0..7 {
                for k in r..7 {
                    lzz[r][k] = cee * ez[r] * ez[k] + lev * (ez[r] * vz[k] + vz[r] * ez[k]);
                }
            }
            lzz[0][1] += -ce * a;
            lzz[0][2] += ce * c;
            lzz[0][5] += -ce * g1;
            lzz[0][6] += ce * s1;
            lzz[1][5] += ce * p;
            lzz[2][6] += ce * q;
            lzz[0][3] += -lv * a * a;
            lzz[0][4] += lv * c * c;
            lzz[0][5] += -lv * 2.0 * g2 * a;
            lzz[0][6] += lv * 2.0 * s2 * c;
            lzz[3][5] += lv * 2.0 * p * a;
            lzz[4][6] += lv * 2.0 * q * c;
            lzz[5][5] += lv * 2.0 * p * g2;
            lzz[6][6] += lv * 2.0 * q * s2;

            // map the seven pixel-level scalars onto the local variables
            for k in 0..5 {
                acc.g[k] += lz[k];
                for r in k..5 {
                    acc.h[k][r] += lzz[k][r];
                }
                for j in 0..6 {
                    acc.h[k][OX + j] += lzz[k][5] * fg.g[j];
                }
                for j in 0..2 {
                    acc.h[k][OX + j] += lzz[k][6] * fs.g[j];
                }
            }
            for j in 0..6 {
                acc.g[OX + j] += lz[5] * fg.g[j];
                for k in j..6 {
                    acc.h[OX + j][OX + k] += lz[5] * fg.h[j][k] + lzz[5][5] * fg.g[j] * fg.g[k];
                }
            }
            for j in 0..2 {
                acc.g[OX + j] += lz[6] * fs.g[j];
                for k in j..2 {
                    acc.h[OX + j][OX + k] += lz[6] * fs.h[j][k] + lzz[6][6] * fs.g[j] * fs.g[k];
                }
                for k in 0..6 {
                    // galaxy-star cross term, kept in the upper triangle
                    let v = lzz[5][6] * fs.g[j] * fg.g[k];
                    let (r, cc) = if j <= k { (j, k) } else { (k, j) };
                    acc.h[OX + r][OX + cc] += v;
                    if j == k {
                        acc.h[OX + j][OX + j] += v;
                    }
                }
            }
        }
        for r in 0..LOCAL {
            for k in 0..r {
                acc.h[r][k] = acc.h[k][r];
            }
        }
        acc
    }

    /// ELBO value, gradient and Hessian at the unconstrained point `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<ElboValue> {
        let n = self.layout.dim();
        if x.len() != n || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("variational coordinates".into()));
        }
        let offset = [x[Layout::OFFSET], x[Layout::OFFSET + 1]];
        let pw = crate::jet::sigmoid(x[Layout::PROFILE]);
        let shape = self.shape_cov(x);
        let star = DJet::variable(x[Layout::STAR_LOGIT], Layout::STAR_LOGIT, n).sigmoid();
        let pw_jet = DJet::variable(x[Layout::PROFILE], Layout::PROFILE, n).sigmoid();

        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        let maps: Vec<[DJet; 3]> = self
            .cov_maps
            .iter()
            .map(|map| {
                std::array::from_fn(|r| {
                    let mut j = shape[0].scale(map[r][0]);
                    j.add_scaled(map[r][1], &shape[1]);
                    j.add_scaled(map[r][2], &shape[2]);
                    j
                })
            })
            .collect();
        let mut cache: Vec<Option<SpatialJets>> = Vec::with_capacity(maps.len());
        for (bp, w) in self.nb.patch.bands.iter().zip(&maps) {
            cache.push(match bp.same_kernel_as {
                Some(_) => None,
                None => Some(spatial_jets(
                    bp,
                    &self.nb.images[bp.image],
                    &self.nb.chart,
                    offset,
                    [w[0].v, w[1].v, w[2].v],
                    pw,
                    self.table,
                    true,
                )?),
            });
        }
        for (b, bp) in self.nb.patch.bands.iter().enumerate() {
            let image = &self.nb.images[bp.image];
            let w = &maps[b];
            let jets = cache[bp.same_kernel_as.unwrap_or(b)]
                .as_ref()
                .expect("shared kernels point at computed ones");
            let (g1, g2) = self.brightness(x, GALAXY, image.band);
            let (s1, s2) = self.brightness(x, STAR, image.band);
            let local = self.band_sum(b, star.v, [g1.v, g2.v], [s1.v, s2.v], jets);

            let ox = DJet::variable(offset[0], Layout::OFFSET, n);
            let oy = DJet::variable(offset[1], Layout::OFFSET + 1, n);
            let u: [&DJet; LOCAL] = [&star, &g1, &s1, &g2, &s2, &ox, &oy, &w[0], &w[1], &w[2], &pw_jet];
            value += local.v;
            for (k, uk) in u.iter().enumerate() {
                let lk = local.g[k];
                if lk == 0.0 {
                    continue;
                }
                for i in 0..n {
                    grad[i] += lk * uk.g[i];
                }
                for idx in 0..n * n {
                    hess[idx] += lk * uk.h[idx];
                }
            }
            // J^T L J with J the local-variable gradients
            let mut lj = vec![0.0; LOCAL * n];
            for k in 0..LOCAL {
                for (l, ul) in u.iter().enumerate() {
                    let c = local.h[k][l];
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        lj[k * n + i] += c * ul.g[i];
                    }
                }
            }
            for (k, uk) in u.iter().enumerate() {
                for i in 0..n {
                    let gi = uk.g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        hess[i * n + j] += gi * lj[k * n + j];
                    }
                }
            }
        }
        let kl = self.kl(x);
        value -= kl.v;
        for i in 0..n {
            grad[i] -= kl.g[i];
        }
        for idx in 0..n * n {
            hess[idx] -= kl.h[idx];
        }
        let hessian = DMatrix::from_fn(n, n, |i, j| 0.5 * (hess[i * n + j] + hess[j * n + i]));
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLogDensity);
        }
        Ok(ElboValue {
            value,
            gradient: DVector::from_vec(grad),
            hessian,
        })
    }
}

/// ELBO of `vp` within its neighborhood.
pub fn elbo(vp: &VariationalParams, nb: &Neighborhood, prior: &PriorParams, table: &ProfileTable) -> Result<ElboValue> {
    let objective = SourceObjective::new(nb, prior, table)?;
    objective.evaluate(&nb.chart.to_vector(vp))
}
