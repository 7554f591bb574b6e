//! Full-covariance Gaussian mixtures and their EM fit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// A component with its Cholesky factor cached for repeated density calls.
#[derive(Clone, Debug)]
struct Factored {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Factored {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let z = self.chol.l().solve_lower_triangular(&d).expect("nonsingular factor");
        self.log_weight + self.log_norm - 0.5 * z.norm_squared()
    }
}

impl Gmm {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covs.len() != k {
            return Err(Error::InvalidParameter("mixture component counts disagree".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {sum}")));
        }
        let d = self.dim();
        for (m, c) in self.means.iter().zip(&self.covs) {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::InvalidParameter("mixture dimension mismatch".into()));
            }
            let scale = c.amax().max(1e-300);
            if (c - c.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidParameter("mixture covariance not symmetric".into()));
            }
            if Cholesky::new(c.clone()).is_none() {
                return Err(Error::InvalidParameter(
                    "mixture covariance not positive definite".into(),
                ));
            }
        }
        Ok(())
    }

    fn factored(&self) -> Result<Vec<Factored>> {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covs))
            .map(|(&w, (m, c))| {
                let chol = Cholesky::new(c.clone())
                    .ok_or_else(|| Error::InvalidParameter("mixture covariance not positive definite".into()))?;
                let log_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
                Ok(Factored {
                    log_weight: w.ln(),
                    mean: m.clone(),
                    chol,
                    log_norm: -0.5 * (d * LN_2PI + log_det),
                })
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let x = DVector::from_column_slice(x);
        let terms: Vec<f64> = self.factored()?.iter().map(|f| f.log_density(&x)).collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let chol = Cholesky::new(self.covs[k].clone()).expect("validated covariance");
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        (&self.means[k] + chol.l() * z).as_slice().to_vec()
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Result of an EM run: the mixture and the per-iteration log-likelihood.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub gmm: Gmm,
    pub trace: Vec<f64>,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.last().expect("nonempty trace")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 500,
            rel_tol: 1e-8,
        }
    }
}

fn to_vectors(data: &[Vec<f64>]) -> Vec<DVector<f64>> {
    data.iter().map(|x| DVector::from_column_slice(x)).collect()
}

fn kmeans_pp<R: Rng + ?Sized>(xs: &[DVector<f64>], k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let mut centers = vec![xs[rng.random_range(0..xs.len())].clone()];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = xs.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..xs.len())
        };
        centers.push(xs[next].clone());
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }
    centers
}

/// Weighted mean and maximum-likelihood covariance. A small ridge is added
/// only when the covariance is numerically singular.
fn weighted_moments(xs: &[DVector<f64>], resp: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let nk: f64 = resp.iter().sum();
    let mut mean = DVector::zeros(d);
    for (x, r) in xs.iter().zip(resp) {
        mean.axpy(*r, x, 1.0);
    }
    mean /= nk.max(f64::MIN_POSITIVE);
    let mut cov = DMatrix::zeros(d, d);
    for (x, r) in xs.iter().zip(resp) {
        let c = x - &mean;
        cov.ger(*r, &c, &c, 1.0);
    }
    cov /= nk.max(f64::MIN_POSITIVE);
    cov = 0.5 * (&cov + cov.transpose());
    if Cholesky::new(cov.clone()).is_none() {
        let ridge = 1e-6 * (cov.trace() / d as f64).max(1e-6);
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
    }
    (nk, mean, cov)
}

fn e_step(gmm: &Gmm, xs: &[DVector<f64>], resp: &mut [Vec<f64>]) -> Result<f64> {
    let factored = gmm.factored()?;
    let mut ll = 0.0;
    let mut terms = vec![0.0; factored.len()];
    for (i, x) in xs.iter().enumerate() {
        for (t, f) in terms.iter_mut().zip(&factored) {
            *t = f.log_density(x);
        }
        let lse = log_sum_exp(&terms);
        ll += lse;
        for (k, t) in terms.iter().enumerate() {
            resp[k][i] = (t - lse).exp();
        }
    }
    Ok(ll)
}

fn m_step(xs: &[DVector<f64>], resp: &[Vec<f64>]) -> Gmm {
    let n = xs.len() as f64;
    let mut weights = Vec::with_capacity(resp.len());
    let mut means = Vec::with_capacity(resp.len());
    let mut covs = Vec::with_capacity(resp.len());
    for r in resp {
        let (nk, mean, cov) = weighted_moments(xs, r);
        weights.push(nk / n);
        means.push(mean);
        covs.push(cov);
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Gmm { weights, means, covs }
}

fn em_once<R: Rng + ?Sized>(xs: &[DVector<f64>], k: usize, opts: &EmOptions, rng: &mut R) -> Result<EmFit> {
    let n = xs.len();
    let centers = kmeans_pp(xs, k, rng);
    let mut resp = vec![vec![0.0; n]; k];
    for (i, x) in xs.iter().enumerate() {
        let nearest = (0..k)
            .min_by(|&a, &b| {
                let da = (x - &centers[a]).norm_squared();
                let db = (x - &centers[b]).norm_squared();
                da.total_cmp(&db)
            })
            .expect("k > 0");
        resp[nearest][i] = 1.0;
    }
    // empty hard clusters would get zero weight forever; seed them softly
    for r in resp.iter_mut() {
        if r.iter().sum::<f64>() == 0.0 {
            r.iter_mut().for_each(|v| *v = 1.0 / n as f64);
        }
    }
    let mut gmm = m_step(xs, &resp);
    let mut trace: Vec<f64> = Vec::new();
    for iter in 0..opts.max_iter {
        let ll = e_step(&gmm, xs, &mut resp)?;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                return Err(Error::Fitting(format!(
                    "EM log-likelihood decreased at iteration {iter}: {prev} -> {ll}"
                )));
            }
            trace.push(ll);
            if (ll - prev).abs() <= opts.rel_tol * prev.abs().max(1e-300) {
                break;
            }
        } else {
            trace.push(ll);
        }
        gmm = m_step(xs, &resp);
    }
    Ok(EmFit { gmm, trace })
}

/// Fits a `k`-component mixture by EM from k-means++ starts, keeping the
/// restart with the highest log-likelihood.
pub fn fit_gmm<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, opts: &EmOptions, rng: &mut R) -> Result<EmFit> {
    if k == 0 || data.len() < k {
        return Err(Error::Fitting(format!(
            "{} points cannot support {k} mixture components",
            data.len()
        )));
    }
    let xs = to_vectors(data);
    let mut best: Option<EmFit> = None;
    for _ in 0..opts.restarts.max(1) {
        let fit = em_once(&xs, k, opts, rng)?;
        if best.as_ref().is_none_or(|b| fit.log_likelihood() > b.log_likelihood()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_blob_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let truth = Gmm {
            weights: vec![0.3, 0.7],
            means: vec![DVector::from_vec(vec![-2.0, 1.0]), DVector::from_vec(vec![2.0, 0.0])],
            covs: vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.4]),
            ],
        };
        (0..n).map(|_| truth.sample(rng)).collect()
    }

    #[test]
    fn single_component_density_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let gmm = Gmm {
            weights: vec![1.0],
            means: vec![DVector::from_vec(vec![1.0, -1.0])],
            covs: vec![cov.clone()],
        };
        let x = [0.2, 0.4];
        let det = 2.0 * 0.5 - 0.09;
        let inv = cov.try_inverse().unwrap();
        let d = DVector::from_vec(vec![x[0] - 1.0, x[1] + 1.0]);
        let q = (d.transpose() * inv * &d)[(0, 0)];
        let expect = -LN_2PI - 0.5 * f64::ln(det) - 0.5 * q;
        assert!((gmm.log_density(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn one_component_em_is_the_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = two_blob_data(500, &mut rng);
        let fit = fit_gmm(&data, 1, &EmOptions::default(), &mut rng).unwrap();
        let n = data.len() as f64;
        let mean: Vec<f64> = (0..2).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        for j in 0..2 {
            assert!((fit.gmm.means[0][j] - mean[j]).abs() < 1e-12);
            for l in 0..2 {
                let c: f64 = data.iter().map(|x| (x[j] - mean[j]) * (x[l] - mean[l])).sum::<f64>() / n;
                assert!((fit.gmm.covs[0][(j, l)] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn em_trace_is_monotone_and_recovers_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = two_blob_data(3000, &mut rng);
        let fit = fit_gmm(&data, 2, &EmOptions::default(), &mut rng).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        fit.gmm.validate().unwrap();
        let big = if fit.gmm.weights[0] > 0.5 { 0 } else { 1 };
        assert!((fit.gmm.weights[big] - 0.7).abs() < 0.03);
        assert!((fit.gmm.means[big][0] - 2.0).abs() < 0.05);
    }

    #[test]
    fn rejects_too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fit_gmm(&[vec![0.0]], 2, &EmOptions::default(), &mut rng).is_err());
    }
}
