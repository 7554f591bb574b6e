//! Newton's method with a trust region, for maximization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

use super::elbo::ElboValue;

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonOptions {
    /// Stop once the gradient's max-norm falls below this.
    pub gtol: f64,
    pub initial_radius: f64,
    pub max_radius: f64,
    pub max_iter: usize,
    /// Minimum ratio of actual to predicted increase for a step to count.
    pub accept_ratio: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            initial_radius: 1.0,
            max_radius: 100.0,
            max_iter: 200,
            accept_ratio: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

const MIN_RADIUS: f64 = 1e-10;

/// Minimizer of `g.p + p'Bp/2` subject to `|p| <= radius`, for symmetric `B`.
pub fn trust_region_step(g: &DVector<f64>, b: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    let eig = SymmetricEigen::new(b.clone());
    let coeffs = eig.eigenvectors.transpose() * g;
    let lam = &eig.eigenvalues;
    let n = lam.len();
    let lam_min = lam.min();
    let step_norm = |shift: f64| -> f64 {
        (0..n)
            .map(|i| {
                let d = lam[i] + shift;
                if d > 0.0 {
                    (coeffs[i] / d).powi(2)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .sqrt()
    };
    let step_at = |shift: f64| -> DVector<f64> {
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let d = lam[i] + shift;
            if d > 0.0 {
                y[i] = -coeffs[i] / d;
            }
        }
        &eig.eigenvectors * y
    };

    if lam_min > 0.0 && step_norm(0.0) <= radius {
        return step_at(0.0);
    }
    let gnorm = g.norm();
    let lo0 = (-lam_min).max(0.0);
    // Hard case: the gradient has no weight on the lowest eigenvectors and
    // the shifted step is still inside the region.
    let tiny = 1e-12 * (1.0 + lam.amax());
    let degenerate = (0..n).all(|i| lam[i] - lam_min > tiny || coeffs[i].abs() <= 1e-14 * (1.0 + gnorm));
    if degenerate {
        let mut y = DVector::zeros(n);
        let mut k_min = 0;
        for i in 0..n {
            if lam[i] - lam_min > tiny {
                y[i] = -coeffs[i] / (lam[i] - lam_min);
            } else {
                k_min = i;
            }
        }
        let norm = y.norm();
        if norm <= radius {
            y[k_min] += (radius * radius - norm * norm).max(0.0).sqrt();
            return &eig.eigenvectors * y;
        }
    }
    // Bracket the shift with |p(shift)| = radius and bisect on 1/|p|.
    let mut lo = lo0;
    let mut hi = lo0 + gnorm / radius + tiny;
    while step_norm(hi) > radius {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if step_norm(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    step_at(hi)
}

/// Maximizes `f` from `x0`. `f` returns the value, gradient and Hessian.
/// Trial points where `f` fails or is non-finite are treated as rejected
/// steps; the run errors out only when the region collapses.
pub fn newton_trust_region<F>(mut f: F, x0: &[f64], options: &NewtonOptions) -> Result<NewtonResult>
where
    F: FnMut(&[f64]) -> Result<ElboValue>,
{
    let mut x = DVector::from_column_slice(x0);
    let mut cur = f(x.as_slice())?;
    let mut radius = options.initial_radius;
    let mut trace = vec![cur.value];
    let mut iterations = 0;
    loop {
        let gnorm = cur.gradient.amax();
        if gnorm < options.gtol {
            return Ok(finish(x, cur, iterations, true, trace));
        }
        if iterations >= options.max_iter {
            return Ok(finish(x, cur, iterations, false, trace));
        }
        iterations += 1;

        let g = -&cur.gradient;
        let b = -&cur.hessian;
        let p = trust_region_step(&g, &b, radius);
        let pnorm = p.norm();
        let predicted = -(g.dot(&p) + 0.5 * p.dot(&(&b * &p)));
        let trial_x = &x + &p;
        let trial = f(trial_x.as_slice()).ok().filter(|t| t.value.is_finite());
        let Some(trial) = trial else {
            radius = 0.25 * pnorm;
            if radius < MIN_RADIUS {
                return Err(Error::Fitting(
                    "trust region collapsed at a non-finite objective".into(),
                ));
            }
            continue;
        };
        let actual = trial.value - cur.value;
        // Near the optimum the predicted gain drops below rounding in the
        // objective; the gradient then decides.
        let noise = 1e-13 * (1.0 + cur.value.abs());
        let accept = if predicted <= noise {
            actual >= -noise && trial.gradient.amax() < gnorm
        } else {
            let rho = actual / predicted;
            if rho < 0.25 {
                radius = 0.25 * pnorm;
            } else if rho > 0.75 && pnorm >= 0.99 * radius {
                radius = (2.0 * radius).min(options.max_radius);
            }
            rho > options.accept_ratio && actual >= 0.0
        };
        if accept {
            x = trial_x;
            cur = trial;
            trace.push(cur.value);
        } else if predicted <= noise {
            // no measurable progress is possible from here
            let converged = gnorm < options.gtol;
            return Ok(finish(x, cur, iterations, converged, trace));
        }
        if radius < MIN_RADIUS {
            return Ok(finish(x, cur, iterations, false, trace));
        }
    }
}

fn finish(x: DVector<f64>, cur: ElboValue, iterations: usize, converged: bool, trace: Vec<f64>) -> NewtonResult {
    NewtonResult {
        x: x.as_slice().to_vec(),
        value: cur.value,
        gradient_norm: cur.gradient.amax(),
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic<'a>(a: &'a DMatrix<f64>, c: &'a DVector<f64>) -> impl Fn(&[f64]) -> Result<ElboValue> + 'a {
        move |x| {
            let d = DVector::from_column_slice(x) - c;
            let ad = a * &d;
            Ok(ElboValue {
                value: -0.5 * d.dot(&ad),
                gradient: -ad,
                hessian: -a.clone(),
            })
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<ElboValue> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        let h = DMatrix::from_row_slice(2, 2, &[2.0 - 400.0 * (b - 3.0 * a * a), -400.0 * a, -400.0 * a, 200.0]);
        Ok(ElboValue {
            value: -f,
            gradient: -g,
            hessian: -h,
        })
    }

    #[test]
    fn concave_quadratic_in_one_newton_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(n, n);
        let c = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let opts = NewtonOptions {
            initial_radius: 100.0,
            ..Default::default()
        };
        let r = newton_trust_region(quadratic(&a, &c), &[0.0; 6], &opts).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        for i in 0..n {
            assert!((r.x[i] - c[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn rosenbrock_converges_monotonically() {
        let opts = NewtonOptions {
            gtol: 1e-8,
            ..Default::default()
        };
        let r = newton_trust_region(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.converged && r.gradient_norm < 1e-8, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn step_respects_radius_and_solves_subproblem() {
        // indefinite B: the step must lie on the boundary and beat random
        // feasible points
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, -1.0, 0.2, 0.0, 0.2, 0.5]);
        let g = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let model = |p: &DVector<f64>| g.dot(p) + 0.5 * p.dot(&(&b * p));
        for &radius in &[0.1, 1.0, 3.0] {
            let p = trust_region_step(&g, &b, radius);
            assert!((p.norm() - radius).abs() < 1e-8 * radius);
            let best = model(&p);
            for _ in 0..2000 {
                let q = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
                let scale = radius * rng.random::<f64>() / q.norm();
                let q = q * scale;
                assert!(model(&q) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn hard_case_moves_along_lowest_eigenvector() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 1.0]));
        let g = DVector::from_vec(vec![0.0, 0.5]);
        let p = trust_region_step(&g, &b, 1.0);
        assert!((p.norm() - 1.0).abs() < 1e-10);
        assert!((p[1] + 0.5 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn collapse_on_non_finite_objective_is_an_error() {
        let f = |x: &[f64]| -> Result<ElboValue> {
            if x[0] != 0.0 {
                return Err(Error::NonFiniteLogDensity);
            }
            Ok(ElboValue {
                value: 0.0,
                gradient: DVector::from_vec(vec![1.0]),
                hessian: DMatrix::from_element(1, 1, -1.0),
            })
        };
        assert!(newton_trust_region(f, &[0.0], &NewtonOptions::default()).is_err());
    }
}
