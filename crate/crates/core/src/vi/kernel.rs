//! Light kernels with analytic first and second derivatives.
//!
//! Galaxy kernels are differentiated with respect to six local variables:
//! the two pixel offsets of the source center, the three distinct entries
//! `(xx, xy, yy)` of the unit galaxy covariance in pixel units, and the
//! profile weight. Star kernels depend on the offsets only.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::model::{det2, ImageModel, ProfileTable};
use crate::patch::BandPatch;

use super::params::Chart;

/// Per-pixel kernel values (including calibration) and their derivatives.
#[derive(Clone, Debug)]
pub struct SpatialJets {
    /// Variables: offset x, offset y, covariance xx, xy, yy, profile weight.
    pub galaxy: Vec<Jet<6>>,
    /// Variables: offset x, offset y.
    pub star: Vec<Jet<2>>,
}

/// Running sum of component densities with derivatives in five variables
/// (offsets and covariance entries).
#[derive(Clone, Copy)]
struct Acc {
    v: f64,
    g: [f64; 5],
    h: [[f64; 5]; 5],
}

impl Acc {
    const ZERO: Acc = Acc {
        v: 0.0,
        g: [0.0; 5],
        h: [[0.0; 5]; 5],
    };
}

/// One PSF-convolved Gaussian with the constants needed for derivatives.
struct Component {
    scale: f64,
    center: [f64; 2],
    /// Precision (xx, xy, yy).
    p: [f64; 3],
    /// Covariance scale applied to the galaxy covariance; zero for stars.
    tau: f64,
    /// Offset Hessian of the log density: -M^T P M.
    h_oo: [[f64; 2]; 2],
    /// tr(P E_f P E_e) / 2 for the symmetric basis E_xx, E_xy, E_yy.
    t: [[f64; 3]; 3],
}

fn basis(e: usize) -> [[f64; 2]; 2] {
    match e {
        0 => [[1.0, 0.0], [0.0, 0.0]],
        1 => [[0.0, 1.0], [1.0, 0.0]],
        _ => [[0.0, 0.0], [0.0, 1.0]],
    }
}

fn mul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

impl Component {
    fn new(weight: f64, center: [f64; 2], cov: [[f64; 2]; 2], tau: f64, m: &[[f64; 2]; 2]) -> Result<Self> {
        let det = det2(&cov);
        if !(det > 0.0 && cov[0][0] > 0.0) || !det.is_finite() {
            return Err(Error::DegenerateShape(format!(
                "covariance {cov:?} not positive definite"
            )));
        }
        let pm = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let pmm = mul2(&pm, m);
        let mut h_oo = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                h_oo[i][j] = -(m[0][i] * pmm[0][j] + m[1][i] * pmm[1][j]);
            }
        }
        let mut t = [[0.0; 3]; 3];
        for (e, row) in t.iter_mut().enumerate() {
            for (f, entry) in row.iter_mut().enumerate() {
                let prod = mul2(&mul2(&pm, &basis(f)), &mul2(&pm, &basis(e)));
                *entry = 0.5 * (prod[0][0] + prod[1][1]);
            }
        }
        Ok(Self {
            scale: weight / (2.0 * PI * det.sqrt()),
            center,
            p: [pm[0][0], pm[0][1], pm[1][1]],
            tau,
            h_oo,
            t,
        })
    }

    /// Adds this component's density and derivatives at the pixels of one
    /// row run into `acc`.
    fn accumulate_row(&self, m: &[[f64; 2]; 2], row: usize, col0: usize, acc: &mut [Acc], with_shape: bool) {
        let [pxx, pxy, pyy] = self.p;
        let dy = row as f64 - self.center[1];
        let dx0 = col0 as f64 - self.center[0];
        let q0 = pxx * dx0 * dx0 + 2.0 * pxy * dx0 * dy + pyy * dy * dy;
        let mut val = self.scale * (-0.5 * q0).exp();
        let mut ratio = (-0.5 * (pxx * (2.0 * dx0 + 1.0) + 2.0 * pxy * dy)).exp();
        let step = (-pxx).exp();
        let direct = val == 0.0 || !val.is_finite() || !ratio.is_finite();
        let tau = self.tau;
        for (i, a) in acc.iter_mut().enumerate() {
            let dx = dx0 + i as f64;
            let g = if direct {
                let q = pxx * dx * dx + 2.0 * pxy * dx * dy + pyy * dy * dy;
                self.scale * (-0.5 * q).exp()
            } else {
                let g = val;
                val *= ratio;
                ratio *= step;
                g
            };
            let yx = pxx * dx + pxy * dy;
            let yy = pxy * dx + pyy * dy;
            let mut l = [0.0; 5];
            l[0] = m[0][0] * yx + m[1][0] * yy;
            l[1] = m[0][1] * yx + m[1][1] * yy;
            a.v += g;
            if !with_shape {
                for r in 0..2 {
                    a.g[r] += g * l[r];
                    for c in r..2 {
                        a.h[r][c] += g * (self.h_oo[r][c] + l[r] * l[c]);
                    }
                }
                continue;
            }
            l[2] = tau * 0.5 * (yx * yx - pxx);
            l[3] = tau * (yx * yy - pxy);
            l[4] = tau * 0.5 * (yy * yy - pyy);
            // u_e = E_e y and P u_e for the three basis matrices
            let u = [[yx, 0.0], [yy, yx], [0.0, yy]];
            let pu = u.map(|v| [pxx * v[0] + pxy * v[1], pxy * v[0] + pyy * v[1]]);
            let mut h = [[0.0; 5]; 5];
            h[0][0] = self.h_oo[0][0];
            h[0][1] = self.h_oo[0][1];
            h[1][1] = self.h_oo[1][1];
            for e in 0..3 {
                for r in 0..2 {
                    h[r][2 + e] = -tau * (m[0][r] * pu[e][0] + m[1][r] * pu[e][1]);
                }
                for f in e..3 {
                    h[2 + e][2 + f] = tau * tau * (self.t[e][f] - (u[e][0] * pu[f][0] + u[e][1] * pu[f][1]));
                }
            }
            for r in 0..5 {
                a.g[r] += g * l[r];
                for c in r..5 {
                    a.h[r][c] += g * (h[r][c] + l[r] * l[c]);
                }
            }
        }
    }
}

/// Linear map from reference-image pixel offsets to this image's pixels.
fn offset_map(image: &ImageModel, chart: &Chart) -> [[f64; 2]; 2] {
    let a = image.wcs.linear();
    let r = chart.wcs.linear();
    let det = det2(&r);
    let r_inv = [[r[1][1] / det, -r[0][1] / det], [-r[1][0] / det, r[0][0] / det]];
    mul2(&a, &r_inv)
}

fn symmetrize<const N: usize>(h: &mut [[f64; N]; N]) {
    for r in 0..N {
        for c in 0..r {
            h[r][c] = h[c][r];
        }
    }
}

/// Kernel jets at every pixel of `bp`. `unit_cov` is the galaxy covariance
/// at unit scale in this image's pixel units. The galaxy jets are skipped
/// (left empty) when `with_galaxy` is false.
#[allow(clippy::too_many_arguments)]
pub fn spatial_jets(
    bp: &BandPatch,
    image: &ImageModel,
    chart: &Chart,
    offset: [f64; 2],
    unit_cov: [f64; 3],
    profile_weight: f64,
    table: &ProfileTable,
    with_galaxy: bool,
) -> Result<SpatialJets> {
    let m = offset_map(image, chart);
    let center = image.wcs.to_pixel(chart.direction(offset));
    let n = bp.len();

    let mut star_acc = vec![Acc::ZERO; n];
    for k in &image.psf {
        let c = Component::new(k.weight, [center[0] + k.mean[0], center[1] + k.mean[1]], k.cov, 0.0, &m)?;
        for &(row, col0, start, len) in &bp.segments {
            c.accumulate_row(&m, row, col0, &mut star_acc[start..start + len], false);
        }
    }
    let star = star_acc
        .iter()
        .zip(&bp.calib)
        .map(|(a, &cal)| {
            let mut j = Jet::<2>::constant(cal * a.v);
            for r in 0..2 {
                j.g[r] = cal * a.g[r];
                for c in r..2 {
                    j.h[r][c] = cal * a.h[r][c];
                }
            }
            symmetrize(&mut j.h);
            j
        })
        .collect();

    let mut galaxy = Vec::new();
    if with_galaxy {
        let w = [[unit_cov[0], unit_cov[1]], [unit_cov[1], unit_cov[2]]];
        let mut prof = [vec![Acc::ZERO; n], vec![Acc::ZERO; n]];
        for k in &image.psf {
            for (i, acc) in prof.iter_mut().enumerate() {
                for (alpha, tau) in table.weights[i].iter().zip(&table.scales[i]) {
                    let cov = [
                        [k.cov[0][0] + tau * w[0][0], k.cov[0][1] + tau * w[0][1]],
                        [k.cov[1][0] + tau * w[1][0], k.cov[1][1] + tau * w[1][1]],
                    ];
                    let c = Component::new(
                        k.weight * alpha,
                        [center[0] + k.mean[0], center[1] + k.mean[1]],
                        cov,
                        *tau,
                        &m,
                    )?;
                    for &(row, col0, start, len) in &bp.segments {
                        c.accumulate_row(&m, row, col0, &mut acc[start..start + len], true);
                    }
                }
            }
        }
        let pw = profile_weight;
        galaxy = (0..n)
            .map(|px| {
                let (d, e) = (&prof[0][px], &prof[1][px]);
                let cal = bp.calib[px];
                let mut j = Jet::<6>::constant(cal * (pw * d.v + (1.0 - pw) * e.v));
                for r in 0..5 {
                    j.g[r] = cal * (pw * d.g[r] + (1.0 - pw) * e.g[r]);
                    for c in r..5 {
                        j.h[r][c] = cal * (pw * d.h[r][c] + (1.0 - pw) * e.h[r][c]);
                    }
                    j.h[r][5] = cal * (d.g[r] - e.g[r]);
                }
                j.g[5] = cal * (d.v - e.v);
                symmetrize(&mut j.h);
                j
            })
            .collect();
    }
    Ok(SpatialJets { galaxy, star })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GalaxyShape, PixelKernel};
    use crate::patch::Patch;
    use crate::simulator::SceneConfig;

    fn setup() -> (Vec<ImageModel>, Patch, Chart) {
        let config = SceneConfig {
            height: 32,
            width: 32,
            ..Default::default()
        };
        let mut images = config.images();
        for img in &mut images {
            img.pixels = Some(vec![200; 32 * 32]);
        }
        // give one band a sheared, shifted pixel grid
        let c = &mut images[1].wcs.coeffs;
        c[0] += 0.4;
        c[2] += 0.1 * c[1];
        let dir = images[0].wcs.to_sky([15.2, 16.7]);
        let patch = Patch::new(&images, dir, 8.0, 2).unwrap();
        let chart = Chart::new(images[0].wcs, dir);
        (images, patch, chart)
    }

    fn value(bp: &BandPatch, image: &ImageModel, chart: &Chart, x: &[f64; 6], px: usize, star: bool) -> f64 {
        let table = ProfileTable::standard();
        let j = spatial_jets(bp, image, chart, [x[0], x[1]], [x[2], x[3], x[4]], x[5], &table, !star).unwrap();
        if star {
            j.star[px].v
        } else {
            j.galaxy[px].v
        }
    }

    #[test]
    fn values_match_pixel_kernels() {
        let (images, patch, chart) = setup();
        let table = ProfileTable::standard();
        let shape = GalaxyShape {
            profile_weight: 0.3,
            angle: 30.0,
            half_light_radius: 2.0,
            axis_ratio: 0.5,
        };
        for bp in &patch.bands[..2] {
            let img = &images[bp.image];
            let w = img.wcs.map_cov_arcsec(&crate::model::galaxy_covariance(&shape));
            let offset = [0.3, -0.2];
            let j = spatial_jets(bp, img, &chart, offset, [w[0][0], w[0][1], w[1][1]], 0.3, &table, true).unwrap();
            let dir = chart.direction(offset);
            let gk = PixelKernel::galaxy(img, dir, &shape, &table).unwrap();
            let sk = PixelKernel::star(img, dir);
            for i in 0..bp.len() {
                let cal = bp.calib[i];
                let g = cal * gk.eval(bp.rows[i], bp.cols[i]);
                let s = cal * sk.eval(bp.rows[i], bp.cols[i]);
                assert!((j.galaxy[i].v - g).abs() <= 1e-10 * g + 1e-12);
                assert!((j.star[i].v - s).abs() <= 1e-10 * s + 1e-12);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (images, patch, chart) = setup();
        let table = ProfileTable::standard();
        let x0 = [0.3, -0.4, 3.0, 0.8, 2.0, 0.35];
        for bp in &patch.bands[..2] {
            let img = &images[bp.image];
            let j = spatial_jets(
                bp,
                img,
                &chart,
                [x0[0], x0[1]],
                [x0[2], x0[3], x0[4]],
                x0[5],
                &table,
                true,
            )
            .unwrap();
            for px in [0, bp.len() / 3, bp.len() / 2, bp.len() - 5] {
                for var in 0..6 {
                    let h = 1e-5;
                    let mut xp = x0;
                    let mut xm = x0;
                    xp[var] += h;
                    xm[var] -= h;
                    for star in [false, true] {
                        if star && var >= 2 {
                            continue;
                        }
                        let fd =
                            (value(bp, img, &chart, &xp, px, star) - value(bp, img, &chart, &xm, px, star)) / (2.0 * h);
                        let (an, scale) = if star {
                            (j.star[px].g[var], j.star[px].v)
                        } else {
                            (j.galaxy[px].g[var], j.galaxy[px].v)
                        };
                        assert!(
                            (fd - an).abs() <= 1e-6 * (fd.abs() + scale),
                            "grad var {var} px {px}: {fd} vs {an}"
                        );
                    }
                    // Hessian row by differencing the analytic gradient
                    let gp = spatial_jets(
                        bp,
                        img,
                        &chart,
                        [xp[0], xp[1]],
                        [xp[2], xp[3], xp[4]],
                        xp[5],
                        &table,
                        true,
                    )
                    .unwrap();
                    let gm = spatial_jets(
                        bp,
                        img,
                        &chart,
                        [xm[0], xm[1]],
                        [xm[2], xm[3], xm[4]],
                        xm[5],
                        &table,
                        true,
                    )
                    .unwrap();
                    for k in 0..6 {
                        let fd = (gp.galaxy[px].g[k] - gm.galaxy[px].g[k]) / (2.0 * h);
                        let an = j.galaxy[px].h[var][k];
                        assert!(
                            (fd - an).abs() <= 1e-5 * (fd.abs() + j.galaxy[px].v),
                            "hess {var},{k} px {px}: {fd} vs {an}"
                        );
                    }
                    if var < 2 {
                        for k in 0..2 {
                            let fd = (gp.star[px].g[k] - gm.star[px].g[k]) / (2.0 * h);
                            let an = j.star[px].h[var][k];
                            assert!((fd - an).abs() <= 1e-5 * (fd.abs() + j.star[px].v));
                        }
                    }
                }
            }
        }
    }
}
