//! Second-order forward-mode derivative carriers.
//!
//! A jet holds a value together with its gradient and (symmetric) Hessian with
//! respect to a fixed set of variables. [`Jet`] is stack-allocated with a
//! compile-time dimension and is used in per-pixel kernels; [`DJet`] has a
//! runtime dimension and is used for per-evaluation quantities such as
//! brightness moments and KL terms.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }

    pub fn variable(v: f64, index: usize) -> Self {
        let mut j = Self::constant(v);
        j.g[index] = 1.0;
        j
    }

    /// Applies a scalar function given its value and first two derivatives at `self.v`.
    pub fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..N {
            out.g[i] = f1 * self.g[i];
        }
        for i in 0..N {
            for k in 0..N {
                out.h[i][k] = f1 * self.h[i][k] + f2 * self.g[i] * self.g[k];
            }
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }

    pub fn recip(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }

    pub fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn sigmoid(&self) -> Self {
        let s = sigmoid(self.v);
        let d = s * (1.0 - s);
        self.chain(s, d, d * (1.0 - 2.0 * s))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        out.v *= c;
        for i in 0..N {
            out.g[i] *= c;
            for k in 0..N {
                out.h[i][k] *= c;
            }
        }
        out
    }

    pub fn square(&self) -> Self {
        *self * *self
    }

    /// `self += c * other`, in place.
    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        self.v += c * other.v;
        for i in 0..N {
            self.g[i] += c * other.g[i];
            for k in 0..N {
                self.h[i][k] += c * other.h[i][k];
            }
        }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.add_scaled(1.0, &rhs);
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.add_scaled(-1.0, &rhs);
        self
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.v * rhs.v);
        for i in 0..N {
            out.g[i] = self.v * rhs.g[i] + rhs.v * self.g[i];
        }
        for i in 0..N {
            for k in 0..N {
                out.h[i][k] = self.v * rhs.h[i][k] + rhs.v * self.h[i][k] + self.g[i] * rhs.g[k] + rhs.g[i] * self.g[k];
            }
        }
        out
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.v += rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Dynamically sized jet; the Hessian is stored dense and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DJet {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl DJet {
    pub fn constant(v: f64, n: usize) -> Self {
        Self {
            v,
            g: vec![0.0; n],
            h: vec![0.0; n * n],
        }
    }

    pub fn variable(v: f64, index: usize, n: usize) -> Self {
        let mut j = Self::constant(v, n);
        j.g[index] = 1.0;
        j
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn hess(&self, i: usize, k: usize) -> f64 {
        self.h[i * self.dim() + k]
    }

    pub fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let n = self.dim();
        let mut out = Self::constant(f0, n);
        for i in 0..n {
            out.g[i] = f1 * self.g[i];
        }
        for i in 0..n {
            let gi = f2 * self.g[i];
            for k in 0..n {
                out.h[i * n + k] = f1 * self.h[i * n + k] + gi * self.g[k];
            }
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }

    pub fn sigmoid(&self) -> Self {
        let s = sigmoid(self.v);
        let d = s * (1.0 - s);
        self.chain(s, d, d * (1.0 - 2.0 * s))
    }

    /// log(1 + exp(x)), numerically stable.
    pub fn softplus(&self) -> Self {
        let s = sigmoid(self.v);
        let f0 = if self.v > 0.0 {
            self.v + (-self.v).exp().ln_1p()
        } else {
            self.v.exp().ln_1p()
        };
        self.chain(f0, s, s * (1.0 - s))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            v: self.v * c,
            g: self.g.iter().map(|x| x * c).collect(),
            h: self.h.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add_const(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.v += c;
        out
    }

    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        self.v += c * other.v;
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += c * b;
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += c * b;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(1.0, other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.dim();
        let mut out = Self::constant(self.v * other.v, n);
        for i in 0..n {
            out.g[i] = self.v * other.g[i] + other.v * self.g[i];
        }
        for i in 0..n {
            for k in 0..n {
                let idx = i * n + k;
                out.h[idx] =
                    self.v * other.h[idx] + other.v * self.h[idx] + self.g[i] * other.g[k] + other.g[i] * self.g[k];
            }
        }
        out
    }

    /// Numerically stable log-sum-exp over a set of jets.
    pub fn log_sum_exp(terms: &[DJet]) -> DJet {
        assert!(!terms.is_empty());
        let n = terms[0].dim();
        let max = terms.iter().map(|t| t.v).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = terms.iter().map(|t| (t.v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut out = DJet::constant(max + total.ln(), n);
        let mut mean_g = vec![0.0; n];
        for (p, t) in probs.iter().zip(terms) {
            for i in 0..n {
                mean_g[i] += p * t.g[i];
            }
        }
        out.g.copy_from_slice(&mean_g);
        // H = sum_j p_j (H_j + g_j g_j^T) - gbar gbar^T
        for (p, t) in probs.iter().zip(terms) {
            for i in 0..n {
                for k in 0..n {
                    out.h[i * n + k] += p * (t.h[i * n + k] + t.g[i] * t.g[k]);
                }
            }
        }
        for i in 0..n {
            for k in 0..n {
                out.h[i * n + k] -= mean_g[i] * mean_g[k];
            }
        }
        out
    }
}
