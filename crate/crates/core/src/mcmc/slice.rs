//! Univariate slice sampling: stepping out, then shrinkage.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Domain of one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Support {
    Real,
    /// Closed interval; the bracket is clipped to it.
    Bounded(f64, f64),
    /// Circle of the given period; the bracket is one full period centered on
    /// the current point and values are wrapped into `[0, period)`.
    Periodic(f64),
}

const MAX_STEP_OUT: usize = 64;
const MAX_SHRINK: usize = 200;

/// One slice-sampling update of `x0` under `logpdf` with bracket width `width`.
pub fn slice_sample<F, R>(mut logpdf: F, x0: f64, width: f64, support: Support, rng: &mut R) -> Result<f64>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = logpdf(x0);
    if !f0.is_finite() {
        return Err(Error::NonFiniteLogDensity);
    }
    let e: f64 = Exp1.sample(rng);
    let level = f0 - e;

    let (mut lo, mut hi) = match support {
        Support::Periodic(period) => (x0 - 0.5 * period, x0 + 0.5 * period),
        _ => {
            let u: f64 = rng.random();
            let mut lo = x0 - u * width;
            let mut hi = lo + width;
            let (blo, bhi) = match support {
                Support::Bounded(a, b) => (a, b),
                _ => (f64::NEG_INFINITY, f64::INFINITY),
            };
            let budget = MAX_STEP_OUT;
            let j = rng.random_range(0..budget);
            let mut left = j;
            let mut right = budget - 1 - j;
            while left > 0 && lo > blo && logpdf(lo) > level {
                lo -= width;
                left -= 1;
            }
            while right > 0 && hi < bhi && logpdf(hi) > level {
                hi += width;
                right -= 1;
            }
            (lo.max(blo), hi.min(bhi))
        }
    };

    let wrap = |x: f64| match support {
        Support::Periodic(p) => x.rem_euclid(p),
        _ => x,
    };
    for _ in 0..MAX_SHRINK {
        let x1 = lo + rng.random::<f64>() * (hi - lo);
        let f1 = logpdf(wrap(x1));
        if f1 >= level {
            return Ok(wrap(x1));
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    Ok(wrap(x0))
}
