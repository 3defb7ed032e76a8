//! Truncated Taylor series in one variable.
//!
//! A `Jet` holds normalised coefficients `c[k] = f^(k)(x0) / k!` for
//! `k < len`. Products and quotients truncate to the shorter operand, so the
//! length always tracks how many derivatives are still exact.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Maximum number of coefficients carried (orders 0..=7).
pub const JET_CAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    c: [f64; JET_CAP],
    len: usize,
}

const FACT: [f64; JET_CAP] = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0, 5040.0];

impl Jet {
    pub fn constant(v: f64, len: usize) -> Self {
        assert!((1..=JET_CAP).contains(&len), "jet length out of range");
        let mut c = [0.0; JET_CAP];
        c[0] = v;
        Jet { c, len }
    }

    /// The identity map `x0 + dx`.
    pub fn variable(x0: f64, len: usize) -> Self {
        let mut j = Jet::constant(x0, len);
        if len > 1 {
            j.c[1] = 1.0;
        }
        j
    }

    pub fn from_coeffs(coeffs: &[f64]) -> Self {
        let len = coeffs.len();
        assert!((1..=JET_CAP).contains(&len), "jet length out of range");
        let mut c = [0.0; JET_CAP];
        c[..len].copy_from_slice(coeffs);
        Jet { c, len }
    }

    /// Build from plain derivatives `[f, f', f'', ...]`.
    pub fn from_derivatives(d: &[f64]) -> Self {
        let mut j = Jet::from_coeffs(d);
        for k in 0..j.len {
            j.c[k] /= FACT[k];
        }
        j
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c[..self.len]
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// k-th derivative at the expansion point.
    pub fn derivative(&self, k: usize) -> f64 {
        assert!(k < self.len, "requested derivative {k} beyond jet length {}", self.len);
        self.c[k] * FACT[k]
    }

    /// All derivatives `[f, f', ...]`.
    pub fn derivatives(&self) -> Vec<f64> {
        (0..self.len).map(|k| self.derivative(k)).collect()
    }

    pub fn truncate(mut self, len: usize) -> Self {
        let len = len.min(self.len);
        for k in len..JET_CAP {
            self.c[k] = 0.0;
        }
        self.len = len;
        self
    }

    /// Jet of the derivative; one coefficient shorter.
    pub fn deriv(&self) -> Self {
        assert!(self.len >= 2, "cannot differentiate a length-1 jet");
        let mut c = [0.0; JET_CAP];
        for k in 0..self.len - 1 {
            c[k] = (k + 1) as f64 * self.c[k + 1];
        }
        Jet { c, len: self.len - 1 }
    }

    pub fn scale(mut self, s: f64) -> Self {
        for k in 0..self.len {
            self.c[k] *= s;
        }
        self
    }

    pub fn add_scalar(mut self, s: f64) -> Self {
        self.c[0] += s;
        self
    }

    pub fn recip(&self) -> Self {
        Jet::constant(1.0, self.len) / *self
    }

    pub fn exp(&self) -> Self {
        let mut e = [0.0; JET_CAP];
        e[0] = self.c[0].exp();
        for k in 1..self.len {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.c[j] * e[k - j];
            }
            e[k] = s / k as f64;
        }
        Jet { c: e, len: self.len }
    }

    pub fn ln(&self) -> Self {
        let mut l = [0.0; JET_CAP];
        l[0] = self.c[0].ln();
        for k in 1..self.len {
            let mut s = self.c[k];
            for j in 1..k {
                s -= (j as f64 / k as f64) * l[j] * self.c[k - j];
            }
            l[k] = s / self.c[0];
        }
        Jet { c: l, len: self.len }
    }

    /// Series inverse: for `y = f(x0 + dx)` returns the jet of `dx` as a
    /// function of `dy = y - f(x0)`, i.e. `x(y) - x0` expanded at `f(x0)`.
    pub fn invert(&self) -> Self {
        assert!(self.len >= 2 && self.c[1] != 0.0, "series is not invertible");
        let mut p = *self;
        p.c[0] = 0.0;
        let dy = Jet::variable(0.0, self.len);
        let mut dx = dy.scale(1.0 / self.c[1]);
        for _ in 0..self.len {
            let r = p.compose_coeffs(&dx) - dy;
            dx = dx - r.scale(1.0 / self.c[1]);
        }
        dx
    }

    /// `self` viewed as a polynomial in `dx`, evaluated at the jet `inner`
    /// (constant term of `inner` ignored).
    pub fn compose_coeffs(&self, inner: &Jet) -> Self {
        inner.truncate(self.len).compose(self.coeffs())
    }

    pub fn powi(&self, n: u32) -> Self {
        let mut out = Jet::constant(1.0, self.len);
        for _ in 0..n {
            out = out * *self;
        }
        out
    }

    /// Evaluate `sum_k p[k] * d^k` where `d` is this jet minus its constant
    /// term. Used to push a jet through a function known by its Taylor
    /// coefficients `p` at the base value.
    pub fn compose(&self, p: &[f64]) -> Self {
        let mut d = *self;
        d.c[0] = 0.0;
        let mut acc = Jet::constant(*p.last().unwrap_or(&0.0), self.len);
        for &pk in p.iter().rev().skip(1) {
            acc = (acc * d).add_scalar(pk);
        }
        acc
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let len = self.len.min(o.len);
        let mut c = [0.0; JET_CAP];
        for k in 0..len {
            c[k] = self.c[k] + o.c[k];
        }
        Jet { c, len }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let len = self.len.min(o.len);
        let mut c = [0.0; JET_CAP];
        for k in 0..len {
            let mut s = 0.0;
            for j in 0..=k {
                s += self.c[j] * o.c[k - j];
            }
            c[k] = s;
        }
        Jet { c, len }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let len = self.len.min(o.len);
        let mut c = [0.0; JET_CAP];
        for k in 0..len {
            let mut s = self.c[k];
            for j in 1..=k {
                s -= o.c[j] * c[k - j];
            }
            c[k] = s / o.c[0];
        }
        Jet { c, len }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        self.scale(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn exp_of_variable_has_unit_derivatives() {
        let x = Jet::variable(0.3, 6);
        let e = x.exp();
        for k in 0..6 {
            assert!(close(e.derivative(k), 0.3f64.exp(), 1e-14));
        }
    }

    #[test]
    fn quotient_matches_rational_function() {
        // f = x / (1 + x^2) at x = 0.5; f' = (1 - x^2)/(1 + x^2)^2
        let x = Jet::variable(0.5, 4);
        let f = x / (x * x).add_scalar(1.0);
        let fp = (1.0 - 0.25) / (1.25f64 * 1.25);
        assert!(close(f.value(), 0.4, 1e-15));
        assert!(close(f.derivative(1), fp, 1e-14));
        // f'' = 2x(x^2 - 3)/(1 + x^2)^3
        let fpp = 2.0 * 0.5 * (0.25 - 3.0) / 1.25f64.powi(3);
        assert!(close(f.derivative(2), fpp, 1e-13));
    }

    #[test]
    fn derivative_shift() {
        let x = Jet::variable(2.0, 5);
        let f = x.powi(4);
        let d = f.deriv();
        assert_eq!(d.len(), 4);
        assert!(close(d.value(), 32.0, 1e-15));
        assert!(close(d.derivative(1), 48.0, 1e-15));
        assert!(close(d.derivative(3), 24.0, 1e-15));
    }

    #[test]
    fn compose_with_sine_series() {
        // sin(x^2) around x = 0.7, via sin taylor at u0 = 0.49
        let x = Jet::variable(0.7, 5);
        let u = x * x;
        let u0 = u.value();
        let p = [u0.sin(), u0.cos(), -u0.sin() / 2.0, -u0.cos() / 6.0, u0.sin() / 24.0];
        let f = u.compose(&p);
        let fd1 = 2.0 * 0.7 * u0.cos();
        let fd2 = 2.0 * u0.cos() - 4.0 * 0.49 * u0.sin();
        assert!(close(f.value(), u0.sin(), 1e-15));
        assert!(close(f.derivative(1), fd1, 1e-14));
        assert!(close(f.derivative(2), fd2, 1e-13));
    }

    #[test]
    fn log_and_inverse() {
        let x = Jet::variable(1.3, 6);
        let l = x.exp().ln();
        for k in 0..6 {
            let want = if k == 0 { 1.3 } else if k == 1 { 1.0 } else { 0.0 };
            assert!(close(l.derivative(k), want, 1e-13));
        }
        // inverse of exp at 1.3 is log around e^1.3
        let y0 = 1.3f64.exp();
        let inv = x.exp().invert();
        let direct = Jet::variable(y0, 6).ln();
        for k in 1..6 {
            assert!(close(inv.derivative(k), direct.derivative(k), 1e-12), "k={k}");
        }
    }

    #[test]
    fn mixed_lengths_truncate() {
        let a = Jet::variable(1.0, 6);
        let b = Jet::variable(1.0, 3);
        assert_eq!((a * b).len(), 3);
        assert_eq!((a + b).len(), 3);
    }
}
