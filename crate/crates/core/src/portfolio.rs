//! Approximately optimal feedback portfolios.
//!
//! Portfolios are currency amounts per asset. The exposure to the Brownian
//! drivers is `e = sigma^T pi` and `pi = (sigma^T)^+ e`. In exposure space
//!
//! * myopic: `-lambda (V_x/V_xx + sqrt(delta) D[V10] + sqrt(eps) D[V01])`
//!   where `D[U] = (V_xx U_x - V_x U_xx) / V_xx^2`
//! * slow hedge: `-sqrt(delta) kappa rho_s V_xy1 / V_xx`
//! * fast hedge: `+(sqrt(eps) / 2) rho_f alpha phi' (V_x^2/V_xx)_x / V_xx`
//!
//! with every `V` the leading-order surface.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expansion::ValueSurface;
use crate::numerics::{pinv_full_column_rank, Jet};

/// Moore-Penrose inverse of the `n x d` volatility matrix (`d x n`).
pub fn sigma_pinv(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pinv_full_column_rank(sigma).map_err(|e| match e {
        Error::InvalidModel(m) | Error::Numeric { what: m, .. } => Error::InvalidModel(format!(
            "volatility matrix must have full rank d ({m})"
        )),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioVector {
    /// currency amount per asset, `myopic + slow_hedge + fast_hedge`
    pub weights: Vec<f64>,
    pub myopic: Vec<f64>,
    pub slow_hedge: Vec<f64>,
    pub fast_hedge: Vec<f64>,
    /// `sigma^T weights`
    pub exposure: Vec<f64>,
}

impl PortfolioVector {
    /// Assemble from exposure-space components and `(sigma^T)^+`.
    pub fn from_exposures(
        pinv_sigma_t: &DMatrix<f64>,
        myopic: &[f64],
        slow: &[f64],
        fast: &[f64],
    ) -> Self {
        let map = |e: &[f64]| -> Vec<f64> {
            (pinv_sigma_t * DVector::from_column_slice(e)).iter().copied().collect()
        };
        let (m, s, f) = (map(myopic), map(slow), map(fast));
        let weights = m.iter().zip(&s).zip(&f).map(|((a, b), c)| a + b + c).collect();
        let exposure = myopic
            .iter()
            .zip(slow)
            .zip(fast)
            .map(|((a, b), c)| a + b + c)
            .collect();
        PortfolioVector {
            weights,
            myopic: m,
            slow_hedge: s,
            fast_hedge: f,
            exposure,
        }
    }

    /// Weights as fractions of wealth.
    pub fn fractions(&self, x: f64) -> Vec<f64> {
        self.weights.iter().map(|w| w / x).collect()
    }
}

fn jet_d(j: &Jet, k: usize, what: &str) -> Result<f64> {
    if k < j.len() {
        Ok(j.derivative(k))
    } else {
        Err(Error::numeric(
            format!("{what} needs derivative order {k} but the datum only supplies {}", j.len()),
            j.len() as f64,
            (k + 1) as f64,
        ))
    }
}

/// `(sigma(y1, y2)^T)^+`.
pub fn pinv_sigma_t(s: &ValueSurface, y1: f64, y2: f64) -> Result<DMatrix<f64>> {
    let sigma = (s.model.sigma)(y1, y2);
    Ok(sigma_pinv(&sigma)?.transpose())
}

#[allow(clippy::too_many_arguments)]
pub fn pi_approx(
    s: &ValueSurface,
    t: f64,
    x: f64,
    y1: f64,
    y2: f64,
    delta: f64,
    epsilon: f64,
) -> Result<PortfolioVector> {
    if !(delta >= 0.0 && epsilon >= 0.0) {
        return Err(Error::Validation(format!(
            "delta = {delta} and epsilon = {epsilon} must be non-negative"
        )));
    }
    if !(x > s.model.v0.domain_lower) {
        return Err(Error::Validation(format!("wealth {x} outside the utility domain")));
    }
    let m = &s.model;
    let p = s.point(t, x, y1)?;
    let vx = p.v0.derivative(1);
    let vxx = p.v0.derivative(2);
    if !(vxx < 0.0) {
        return Err(Error::numeric("concavity violated: V_xx must be negative", vxx, 0.0));
    }
    let corr = |u: &Jet| -> Result<f64> {
        Ok((vxx * jet_d(u, 1, "correction")? - vx * jet_d(u, 2, "correction")?) / (vxx * vxx))
    };
    let (sd, se) = (delta.sqrt(), epsilon.sqrt());
    let mut tol = vx / vxx;
    if sd > 0.0 {
        tol += sd * corr(&s.v10_jet(t, x, y1)?)?;
    }
    if se > 0.0 {
        tol += se * corr(&s.v01_jet(t, x, y1)?)?;
    }
    let lam = m.lambda_at(y1, y2);
    let myopic: Vec<f64> = lam.iter().map(|l| -l * tol).collect();

    let slow_coef = if sd > 0.0 && !m.slow.is_frozen() {
        let (_, vxy) = s.v0_cross_derivatives(t, x, y1)?;
        -sd * (m.slow.kappa)(y1) * vxy / vxx
    } else {
        0.0
    };
    let slow: Vec<f64> = m.rho_s.iter().map(|r| r * slow_coef).collect();

    let fast_coef = if se > 0.0 && !m.fast.is_frozen() {
        let (_, sol) = s.averaged(y1)?;
        let rx = jet_d(&p.r(), 1, "fast hedge")?;
        0.5 * se * (m.fast.alpha)(y2) * sol.phi_prime(y2) * rx / vxx
    } else {
        0.0
    };
    let fast: Vec<f64> = m.rho_f.iter().map(|r| r * fast_coef).collect();

    Ok(PortfolioVector::from_exposures(&pinv_sigma_t(s, y1, y2)?, &myopic, &slow, &fast))
}

fn frozen_state(c: Option<f64>, which: &str) -> Result<f64> {
    c.ok_or_else(|| Error::Validation(format!("{which} factor must be frozen for this variant")))
}

/// Only a slow factor: the fast factor must be frozen.
pub fn pi_approx_slow(s: &ValueSurface, t: f64, x: f64, y: f64, delta: f64) -> Result<PortfolioVector> {
    let y2 = frozen_state(s.model.invariant.point_mass(), "fast")?;
    pi_approx(s, t, x, y, y2, delta, 0.0)
}

/// Only a fast factor: the slow factor must be frozen.
pub fn pi_approx_fast(s: &ValueSurface, t: f64, x: f64, y: f64, epsilon: f64) -> Result<PortfolioVector> {
    let m = &s.model;
    let y1 = if m.slow.is_frozen() {
        m.slow.family.center().unwrap_or(0.0)
    } else {
        return Err(Error::Validation("slow factor must be frozen for this variant".into()));
    };
    pi_approx(s, t, x, y1, y, 0.0, epsilon)
}
