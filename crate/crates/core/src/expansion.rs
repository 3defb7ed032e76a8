//! Leading-order surface and first-order corrections.
//!
//! With `tau = lbar(y1)^2 t`, the leading term is `V0 = u(tau, x)`. Writing
//! `R = V_x^2 / V_xx` and `W = (V_x / V_xx) R_x` (both from `V0`):
//!
//! * `V0_y1 = t lbar lbar' R`, `V0_xy1 = t lbar lbar' R_x`
//! * `V10 = (t^2 / 2) C10 lbar lbar' W`
//! * `V01 = -(t / 2) C01 W`
//! * `V2 = -phi R / 2`
//!
//! In `xi = -log V0_x - lbar^2 t / 2` coordinates, `w0(t, xi) = V0` solves the
//! backward heat equation with speed `lbar^2` and `w0_xixi = W`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::factor_models::{averaged_with, AveragedCoefficients, MarketModel, PoissonSolution};
use crate::numerics::fit::{d1_central4, d2_central4};
use crate::numerics::jet::JET_CAP;
use crate::numerics::{bracket_increasing, brent, GaussLegendre, Jet};
use crate::widder_core::{DerivativeStack, TimeMonotone, U_QUAD_TOL};

/// Cached leading-order data at `(t, x, y1)`.
#[derive(Clone, Debug)]
pub struct SurfacePoint {
    pub t: f64,
    pub x: f64,
    pub y1: f64,
    pub tau: f64,
    pub coeffs: AveragedCoefficients,
    /// jet of `V0(t, ., y1)` at `x`
    pub v0: Jet,
    /// `V0_t`
    pub v0_t: f64,
}

impl SurfacePoint {
    pub fn vx(&self) -> Jet {
        self.v0.deriv()
    }

    pub fn vxx(&self) -> Jet {
        self.v0.deriv().deriv()
    }

    /// `R = V_x^2 / V_xx`
    pub fn r(&self) -> Jet {
        let vx = self.vx();
        let vxx = self.vxx();
        (vx * vx) / vxx
    }

    /// `W = (V_x / V_xx) (V_x^2 / V_xx)_x`
    pub fn w(&self) -> Jet {
        let vx = self.vx();
        let vxx = self.vxx();
        (vx / vxx) * self.r().deriv()
    }

    pub fn stack(&self) -> DerivativeStack {
        DerivativeStack::from_jet(&self.v0)
    }
}

/// Three-term approximation at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionResult {
    pub v0: f64,
    pub v10: f64,
    pub v01: f64,
    pub combined: f64,
    pub delta: f64,
    pub epsilon: f64,
}

type Key = (u64, u64, u64);

/// Point cache is dropped wholesale once it holds this many entries; path
/// simulations visit a fresh state every step.
const POINT_CACHE_CAP: usize = 1 << 16;

/// Evaluator for the expansion of a market model, with caches for averaged
/// coefficients and leading-order jets.
pub struct ValueSurface {
    pub model: Arc<MarketModel>,
    u: TimeMonotone,
    jet_len: usize,
    coeff_cache: Mutex<HashMap<u64, (AveragedCoefficients, Arc<PoissonSolution>)>>,
    point_cache: Mutex<HashMap<Key, Arc<SurfacePoint>>>,
}

impl std::fmt::Debug for ValueSurface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValueSurface")
            .field("model", &self.model.label)
            .field("jet_len", &self.jet_len)
            .finish()
    }
}

impl ValueSurface {
    pub fn new(model: Arc<MarketModel>) -> Self {
        Self::with_tol(model, U_QUAD_TOL)
    }

    pub fn with_tol(model: Arc<MarketModel>, tol: f64) -> Self {
        let u = TimeMonotone::new(model.widder.clone(), model.v0.clone()).with_tol(tol);
        let jet_len = (model.v0.max_order() + 1).min(JET_CAP - 1);
        ValueSurface {
            model,
            u,
            jet_len,
            coeff_cache: Mutex::new(HashMap::new()),
            point_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn time_monotone(&self) -> &TimeMonotone {
        &self.u
    }

    /// Averaged coefficients and Poisson solution at `y1` (cached).
    pub fn averaged(&self, y1: f64) -> Result<(AveragedCoefficients, Arc<PoissonSolution>)> {
        if let Some(v) = self.coeff_cache.lock().expect("cache lock").get(&y1.to_bits()) {
            return Ok(v.clone());
        }
        let sol = Arc::new(PoissonSolution::new(&self.model, y1)?);
        let c = averaged_with(&self.model, y1, &sol)?;
        self.coeff_cache
            .lock()
            .expect("cache lock")
            .insert(y1.to_bits(), (c, sol.clone()));
        Ok((c, sol))
    }

    pub fn coefficients(&self, y1: f64) -> Result<AveragedCoefficients> {
        Ok(self.averaged(y1)?.0)
    }

    pub fn point(&self, t: f64, x: f64, y1: f64) -> Result<Arc<SurfacePoint>> {
        let key = (t.to_bits(), x.to_bits(), y1.to_bits());
        if let Some(p) = self.point_cache.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let coeffs = self.coefficients(y1)?;
        let lb2 = coeffs.lambda_bar * coeffs.lambda_bar;
        let tau = lb2 * t;
        let v0 = self.u.jet(tau, x, self.jet_len)?;
        let v0_t = lb2 * self.u.u_t(tau, x)?;
        let vx = v0.derivative(1);
        let vxx = v0.derivative(2);
        if !(vx > 0.0 && vxx < 0.0) {
            return Err(Error::numeric(
                "leading-order surface lost monotonicity or concavity",
                vxx,
                0.0,
            ));
        }
        let p = Arc::new(SurfacePoint {
            t,
            x,
            y1,
            tau,
            coeffs,
            v0,
            v0_t,
        });
        let mut cache = self.point_cache.lock().expect("cache lock");
        if cache.len() >= POINT_CACHE_CAP {
            cache.clear();
        }
        cache.insert(key, p.clone());
        Ok(p)
    }

    pub fn v0_eval(&self, t: f64, x: f64, y1: f64) -> Result<(f64, DerivativeStack)> {
        let p = self.point(t, x, y1)?;
        Ok((p.v0.value(), p.stack()))
    }

    /// `(V0_y1, V0_xy1)`.
    pub fn v0_cross_derivatives(&self, t: f64, x: f64, y1: f64) -> Result<(f64, f64)> {
        let p = self.point(t, x, y1)?;
        let k = t * p.coeffs.lambda_lambda_prime();
        let r = p.r();
        Ok((k * r.value(), k * r.derivative(1)))
    }

    /// Jet in `x` of `V10`.
    pub fn v10_jet(&self, t: f64, x: f64, y1: f64) -> Result<Jet> {
        let p = self.point(t, x, y1)?;
        let c = 0.5 * t * t * p.coeffs.c10 * p.coeffs.lambda_lambda_prime();
        Ok(p.w().scale(c))
    }

    pub fn v10_eval(&self, t: f64, x: f64, y1: f64) -> Result<f64> {
        Ok(self.v10_jet(t, x, y1)?.value())
    }

    /// Jet in `x` of `V01`.
    pub fn v01_jet(&self, t: f64, x: f64, y1: f64) -> Result<Jet> {
        let p = self.point(t, x, y1)?;
        Ok(p.w().scale(-0.5 * t * p.coeffs.c01))
    }

    pub fn v01_eval(&self, t: f64, x: f64, y1: f64) -> Result<f64> {
        Ok(self.v01_jet(t, x, y1)?.value())
    }

    /// `V2 = -phi(y1, y2) R / 2` with the centred corrector.
    pub fn v2_eval(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        Ok(self.v2_jet(t, x, y1, y2)?.value())
    }

    /// Jet in `x` of `V2`.
    pub fn v2_jet(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Jet> {
        let p = self.point(t, x, y1)?;
        let (_, sol) = self.averaged(y1)?;
        Ok(p.r().scale(-0.5 * sol.phi(y2)))
    }

    /// `alpha^2/2 V2_yy + gamma V2_y - (|lambda|^2 - lbar^2)/2 R` at `y2`.
    pub fn v2_residual(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        let p = self.point(t, x, y1)?;
        let (_, sol) = self.averaged(y1)?;
        let r = p.r().value();
        let f = &self.model.fast;
        let h = 1e-3 * (1.0 + y2.abs());
        let v2 = |z: f64| -0.5 * sol.phi(z) * r;
        let vy = d1_central4(v2, y2, h);
        let vyy = d2_central4(v2, y2, h);
        let lam = self.model.lambda_at(y1, y2);
        let src = lam.iter().map(|v| v * v).sum::<f64>() - sol.lambda_bar_sq;
        let a = (f.alpha)(y2);
        Ok(0.5 * a * a * vyy + (f.gamma)(y2) * vy - 0.5 * src * r)
    }

    pub fn approx_value(
        &self,
        t: f64,
        x: f64,
        y1: f64,
        _y2: f64,
        delta: f64,
        epsilon: f64,
    ) -> Result<ExpansionResult> {
        if !(delta >= 0.0 && epsilon >= 0.0) {
            return Err(Error::Validation(format!(
                "delta = {delta} and epsilon = {epsilon} must be non-negative"
            )));
        }
        let v0 = self.point(t, x, y1)?.v0.value();
        let v10 = self.v10_eval(t, x, y1)?;
        let v01 = self.v01_eval(t, x, y1)?;
        Ok(ExpansionResult {
            v0,
            v10,
            v01,
            combined: v0 + delta.sqrt() * v10 + epsilon.sqrt() * v01,
            delta,
            epsilon,
        })
    }

    /// Slow-only correction evaluated directly from `lambda(y1, y2)` at a
    /// frozen fast state, using `kappa lambda.rho_s` and `lambda.lambda'`.
    pub fn v1_slow_only(&self, t: f64, x: f64, y1: f64) -> Result<f64> {
        let y2 = self.model.invariant.point_mass().ok_or_else(|| {
            Error::Validation("slow-only formula needs a frozen fast factor".into())
        })?;
        let m = &self.model;
        let lam = m.lambda_at(y1, y2);
        let dlam = m.dlambda_at(y1, y2);
        let l2: f64 = lam.iter().map(|v| v * v).sum();
        let ll: f64 = lam.iter().zip(&dlam).map(|(a, b)| a * b).sum();
        let lr: f64 = lam.iter().zip(&m.rho_s).map(|(a, b)| a * b).sum();
        let jet = self.u.jet(l2 * t, x, 4)?;
        let vx = jet.deriv();
        let vxx = vx.deriv();
        let w = (vx / vxx) * ((vx * vx) / vxx).deriv();
        Ok(0.5 * t * t * (m.slow.kappa)(y1) * lr * ll * w.value())
    }

    /// `xi = -log V0_x - lbar^2 t / 2`.
    pub fn xi_of(&self, t: f64, x: f64, y1: f64) -> Result<f64> {
        let p = self.point(t, x, y1)?;
        let lb = p.coeffs.lambda_bar;
        Ok(-p.v0.derivative(1).ln() - 0.5 * lb * lb * t)
    }

    fn xi_uncached(&self, t: f64, x: f64, lb2: f64) -> Result<f64> {
        let j = self.u.jet(lb2 * t, x, 2)?;
        Ok(-j.derivative(1).ln() - 0.5 * lb2 * t)
    }

    /// Invert `x -> xi` at `(t, y1)`; returns `(x, w0(t, xi))`.
    pub fn change_of_variables(&self, t: f64, xi: f64, y1: f64) -> Result<(f64, f64)> {
        let lb = self.coefficients(y1)?.lambda_bar;
        let lb2 = lb * lb;
        let lower = self.model.v0.domain_lower.max(self.model.widder.range()?.0);
        let to_x = |s: f64| if lower.is_finite() { lower + s.exp() } else { s };
        let f = |s: f64| self.xi_uncached(t, to_x(s), lb2);
        let start = if lower.is_finite() { 0.0 } else { 1.0 };
        let (lo, hi) = bracket_increasing(f, xi, start, 1.0, 200)?;
        let s = if lo == hi {
            lo
        } else {
            brent(|s| Ok(f(s)? - xi), lo, hi, 1e-14, 300)?
        };
        let x = to_x(s);
        let w = self.u.jet(lb2 * t, x, 1)?.value();
        Ok((x, w))
    }

    /// `w0_xi` and `w0_xixi` at `(t, x, y1)` by series reversion of
    /// `xi(x)`; an independent route to `-R` and `W`.
    pub fn w_space_derivatives(&self, t: f64, x: f64, y1: f64) -> Result<(f64, f64)> {
        let p = self.point(t, x, y1)?;
        let xi = (-p.vx().ln()).truncate(3);
        let dx = xi.invert();
        let w = p.v0.truncate(3).compose_coeffs(&dx);
        Ok((w.derivative(1), w.derivative(2)))
    }

    /// `|w_t + lbar^2/2 w_xixi| / (1 + |w_t|)` at `(t, xi)` by fourth-order
    /// differences with steps `ht`, `hxi`.
    pub fn heat_residual(&self, t: f64, xi: f64, y1: f64, ht: f64, hxi: f64) -> Result<f64> {
        let lb = self.coefficients(y1)?.lambda_bar;
        let w = |tt: f64, z: f64| -> Result<f64> { Ok(self.change_of_variables(tt, z, y1)?.1) };
        let mut tv = [0.0; 5];
        let mut xv = [0.0; 5];
        for (k, o) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
            tv[k] = w(t + o * ht, xi)?;
            xv[k] = if *o == 0.0 { tv[2] } else { w(t, xi + o * hxi)? };
        }
        let wt = (tv[0] - 8.0 * tv[1] + 8.0 * tv[3] - tv[4]) / (12.0 * ht);
        let wxx = (-xv[0] + 16.0 * xv[1] - 30.0 * xv[2] + 16.0 * xv[3] - xv[4]) / (12.0 * hxi * hxi);
        Ok((wt + 0.5 * lb * lb * wxx).abs() / (1.0 + wt.abs()))
    }

    /// Quadrature check of the natural parametrisations: integrates the
    /// auxiliary correction densities over `s in [0, t]` with an `n_quad`
    /// point Gauss-Legendre rule and compares with the closed corrections.
    /// Returns `(slow discrepancy, fast discrepancy)` (absolute).
    pub fn natural_parametrization_check(
        &self,
        t: f64,
        x: f64,
        y1: f64,
        n_quad: usize,
    ) -> Result<(f64, f64)> {
        if t == 0.0 {
            return Ok((0.0, 0.0));
        }
        let p = self.point(t, x, y1)?;
        let (_, wxixi) = self.w_space_derivatives(t, x, y1)?;
        let gl = GaussLegendre::new(n_quad.max(1));
        let c = &p.coeffs;
        // slow density grows linearly in s, the fast one is flat
        let slow: f64 = gl
            .mapped(0.0, t)
            .map(|(s, w)| w * s * c.c10 * c.lambda_lambda_prime() * wxixi)
            .sum();
        let fast: f64 = gl.mapped(0.0, t).map(|(_, w)| w * -0.5 * c.c01 * wxixi).sum();
        let v10 = self.v10_eval(t, x, y1)?;
        let v01 = self.v01_eval(t, x, y1)?;
        Ok(((slow - v10).abs(), (fast - v01).abs()))
    }
}
