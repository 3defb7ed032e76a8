//! Closed-form power-utility benchmark and convergence-rate studies.
//!
//! With `lambda = Lambda sqrt(y)`, `dY = delta (m - Y) dt + sqrt(delta) beta
//! sqrt(Y) dB` and `V(0, x) = gamma^gamma x^(1-gamma) / (1 - gamma)`, the
//! forward HJB equation is solved by
//!
//! `V = gamma^gamma x^(1-gamma) / (1-gamma) exp(q (A1(t) y + A2(t)))`
//!
//! where `A1' = -(k A1^2 + B A1 + C)`, `A2' = -delta m A1` with
//! `k = delta beta^2 / 2`, `B = sqrt(delta) Gamma beta Lambda.rho - delta` and
//! `C = Gamma |Lambda|^2 / (2 q)`. `A1` relaxes from 0 to the root `a_plus`,
//! which requires real roots and `a_minus <= 0`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::drift_audit::Partials;
use crate::error::{Error, Result};
use crate::expansion::ValueSurface;
use crate::factor_models::{FastFactor, MarketModel, MarketSpec, SlowFactor, VecFn};
use crate::numerics::{log_log_slope, LineFit};
use crate::widder_core::{InitialUtility, WidderMeasure};

/// Errors below this are treated as round-off.
pub const ERROR_FLOOR: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerModelParams {
    /// risk aversion
    pub gamma_ra: f64,
    pub lambda: Vec<f64>,
    /// mean-reversion level
    pub m0: f64,
    /// vol-of-vol
    pub beta: f64,
    pub rho: Vec<f64>,
    /// time scale (for a fast factor, `1 / eps`)
    pub delta: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PowerModelParams {
    pub fn new(
        gamma_ra: f64,
        lambda: Vec<f64>,
        m0: f64,
        beta: f64,
        rho: Vec<f64>,
        delta: f64,
    ) -> Result<Self> {
        let p = PowerModelParams {
            gamma_ra,
            lambda,
            m0,
            beta,
            rho,
            delta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gamma_ra;
        if !(g > 0.0 && g.is_finite()) || g == 1.0 {
            return Err(Error::Validation(format!("risk aversion {g} must be positive and not 1")));
        }
        if self.lambda.is_empty() || self.lambda.len() != self.rho.len() {
            return Err(Error::Validation(format!(
                "Lambda (len {}) and rho (len {}) must be non-empty and equally long",
                self.lambda.len(),
                self.rho.len()
            )));
        }
        if !(self.m0 > 0.0 && self.beta > 0.0 && self.delta > 0.0) {
            return Err(Error::Validation(format!(
                "m0 = {}, beta = {} and delta = {} must be positive",
                self.m0, self.beta, self.delta
            )));
        }
        let r2 = self.rho_norm_sq();
        if g > 1.0 && (r2 - g / (g - 1.0)).abs() <= 1e-12 * (1.0 + r2) {
            return Err(Error::Validation(format!(
                "|rho|^2 = gamma/(gamma-1) = {r2} is the excluded case (q undefined)"
            )));
        }
        if r2 > 1.0 + 1e-12 {
            return Err(Error::Validation(format!("|rho|^2 = {r2} exceeds 1")));
        }
        Ok(())
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        PowerModelParams {
            delta,
            ..self.clone()
        }
    }

    /// `Gamma = (1 - gamma) / gamma`
    pub fn big_gamma(&self) -> f64 {
        (1.0 - self.gamma_ra) / self.gamma_ra
    }

    pub fn q(&self) -> f64 {
        1.0 / (1.0 + self.big_gamma() * self.rho_norm_sq())
    }

    pub fn lambda_norm_sq(&self) -> f64 {
        dot(&self.lambda, &self.lambda)
    }

    pub fn rho_norm_sq(&self) -> f64 {
        dot(&self.rho, &self.rho)
    }

    pub fn lambda_dot_rho(&self) -> f64 {
        dot(&self.lambda, &self.rho)
    }

    /// `(k, B, C)` of the Riccati right-hand side `k a^2 + B a + C`.
    pub fn quadratic(&self) -> (f64, f64, f64) {
        let g = self.big_gamma();
        let k = 0.5 * self.delta * self.beta * self.beta;
        let b = self.delta.sqrt() * g * self.beta * self.lambda_dot_rho() - self.delta;
        let c = g * self.lambda_norm_sq() / (2.0 * self.q());
        (k, b, c)
    }

    /// The three parameter cases listed with the closed form.
    pub fn regime_cases(&self) -> RegimeCases {
        let g = self.gamma_ra;
        let lr = self.lambda_dot_rho();
        let q = self.q();
        let strong = self.big_gamma() * q * lr * lr > self.lambda_norm_sq();
        RegimeCases {
            low_risk_aversion: g < 1.0 && lr < 0.0 && strong,
            high_risk_aversion_negative_q: g > 1.0 && lr > 0.0 && q < 0.0 && strong,
            high_risk_aversion_positive_q: g > 1.0 && q > 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegimeCases {
    /// `gamma < 1`, `Lambda.rho < 0` and `Gamma q (Lambda.rho)^2 > |Lambda|^2`
    pub low_risk_aversion: bool,
    /// `gamma > 1`, `Lambda.rho > 0`, `q < 0` and `Gamma q (Lambda.rho)^2 > |Lambda|^2`
    pub high_risk_aversion_negative_q: bool,
    /// `gamma > 1` and `q > 0`
    pub high_risk_aversion_positive_q: bool,
}

impl RegimeCases {
    pub fn any(&self) -> bool {
        self.low_risk_aversion || self.high_risk_aversion_negative_q || self.high_risk_aversion_positive_q
    }

    pub fn describe(&self) -> String {
        let f = |b: bool| if b { "holds" } else { "fails" };
        format!(
            "case gamma<1, Lambda.rho<0, Gamma q (Lambda.rho)^2 > |Lambda|^2: {}; \
             case gamma>1, Lambda.rho>0, q<0, Gamma q (Lambda.rho)^2 > |Lambda|^2: {}; \
             case gamma>1, q>0: {}",
            f(self.low_risk_aversion),
            f(self.high_risk_aversion_negative_q),
            f(self.high_risk_aversion_positive_q)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `A1(0) = 0`, relaxing towards `a_plus`
    Transient,
    /// `A1` frozen at the root of smaller magnitude; used for the fast
    /// benchmark where the transient branch leaves the asymptotic regime
    QuasiStationary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub a_minus: f64,
    pub a_plus: f64,
    /// square root of the discriminant (the relaxation rate)
    pub discriminant_root: f64,
    pub k: f64,
    pub delta: f64,
    pub m0: f64,
    pub branch: Branch,
    pub cases: RegimeCases,
}

impl RiccatiSolution {
    /// Root used by the quasi-stationary branch.
    pub fn small_root(&self) -> f64 {
        if self.a_minus.abs() < self.a_plus.abs() {
            self.a_minus
        } else {
            self.a_plus
        }
    }

    pub fn a1(&self, t: f64) -> f64 {
        let (am, ap) = (self.a_minus, self.a_plus);
        match self.branch {
            Branch::QuasiStationary => self.small_root(),
            Branch::Transient => {
                if t == 0.0 || (am == 0.0 && ap == 0.0) {
                    return 0.0;
                }
                let e = (-self.discriminant_root * t).exp();
                let one_minus_e = -(-self.discriminant_root * t).exp_m1();
                ap * am * one_minus_e / (am - ap * e)
            }
        }
    }

    pub fn a2(&self, t: f64) -> f64 {
        let dm = self.delta * self.m0;
        match self.branch {
            Branch::QuasiStationary => -dm * self.small_root() * t,
            Branch::Transient => {
                let (am, ap) = (self.a_minus, self.a_plus);
                if t == 0.0 || ap == 0.0 {
                    return 0.0;
                }
                if am == 0.0 {
                    return 0.0;
                }
                let one_minus_e = -(-self.discriminant_root * t).exp_m1();
                -dm * (ap * t + (ap * one_minus_e / (am - ap)).ln_1p() / self.k)
            }
        }
    }

    pub fn a1_prime(&self, t: f64) -> f64 {
        match self.branch {
            Branch::QuasiStationary => 0.0,
            Branch::Transient => {
                let (am, ap) = (self.a_minus, self.a_plus);
                if am == 0.0 {
                    return 0.0;
                }
                let r = ap / am;
                let e = (-self.discriminant_root * t).exp();
                let den = 1.0 - r * e;
                ap * self.discriminant_root * e * (1.0 - r) / (den * den)
            }
        }
    }

    pub fn a2_prime(&self, t: f64) -> f64 {
        -self.delta * self.m0 * self.a1(t)
    }
}

/// Roots `a_minus <= a_plus` of `k a^2 + B a + C` by the cancellation-free
/// quadratic formula.
fn stable_roots(k: f64, b: f64, c: f64) -> Option<(f64, f64, f64)> {
    let disc = b * b - 4.0 * k * c;
    if !(disc >= 0.0) {
        return None;
    }
    let d = disc.sqrt();
    if b == 0.0 && c == 0.0 {
        return Some((0.0, 0.0, 0.0));
    }
    let s = -0.5 * (b + b.signum() * d);
    let s = if s == 0.0 { -0.5 * d } else { s };
    let (r1, r2) = (s / k, c / s);
    Some((r1.min(r2), r1.max(r2), d))
}

pub fn riccati_solve(p: &PowerModelParams) -> Result<RiccatiSolution> {
    p.validate()?;
    let (k, b, c) = p.quadratic();
    let cases = p.regime_cases();
    let (am, ap, d) = stable_roots(k, b, c).ok_or_else(|| {
        Error::Regime(format!(
            "Riccati roots are complex (discriminant {}); {}",
            b * b - 4.0 * k * c,
            cases.describe()
        ))
    })?;
    if am > 0.0 {
        return Err(Error::Regime(format!(
            "both Riccati roots are positive ({am}, {ap}) so A1 blows up in finite time; {}",
            cases.describe()
        )));
    }
    Ok(RiccatiSolution {
        a_minus: am,
        a_plus: ap,
        discriminant_root: d,
        k,
        delta: p.delta,
        m0: p.m0,
        branch: Branch::Transient,
        cases,
    })
}

/// Quasi-stationary branch (see [`Branch::QuasiStationary`]); needs real roots only.
pub fn riccati_quasi_stationary(p: &PowerModelParams) -> Result<RiccatiSolution> {
    p.validate()?;
    let (k, b, c) = p.quadratic();
    let cases = p.regime_cases();
    let (am, ap, d) = stable_roots(k, b, c).ok_or_else(|| {
        Error::Regime(format!("Riccati roots are complex; {}", cases.describe()))
    })?;
    Ok(RiccatiSolution {
        a_minus: am,
        a_plus: ap,
        discriminant_root: d,
        k,
        delta: p.delta,
        m0: p.m0,
        branch: Branch::QuasiStationary,
        cases,
    })
}

/// One factor of the benchmark: its parameters and Riccati solution.
#[derive(Clone, Debug)]
pub struct Leg {
    pub params: PowerModelParams,
    pub riccati: RiccatiSolution,
}

impl Leg {
    pub fn transient(params: PowerModelParams) -> Result<Self> {
        let riccati = riccati_solve(&params)?;
        Ok(Leg { params, riccati })
    }

    pub fn quasi_stationary(params: PowerModelParams) -> Result<Self> {
        let riccati = riccati_quasi_stationary(&params)?;
        Ok(Leg { params, riccati })
    }

    /// `log` of the factor multiplying the datum, and its `t`, `y`, `yy` derivatives.
    fn exponent(&self, t: f64, y: f64) -> (f64, f64, f64) {
        let q = self.params.q();
        let r = &self.riccati;
        let f = q * (r.a1(t) * y + r.a2(t));
        let ft = q * (r.a1_prime(t) * y + r.a2_prime(t));
        (f, ft, q * r.a1(t))
    }
}

/// Exact power value function with an optional slow leg on `y1` and an
/// optional fast leg on `y2` (the fast leg's `delta` is `1 / eps`). The two
/// legs must act on disjoint assets so the value separates.
#[derive(Clone, Debug)]
pub struct ExactPower {
    pub gamma_ra: f64,
    pub slow: Option<Leg>,
    pub fast: Option<Leg>,
}

impl ExactPower {
    pub fn new(slow: Option<Leg>, fast: Option<Leg>) -> Result<Self> {
        let gamma_ra = match (&slow, &fast) {
            (Some(s), Some(f)) => {
                if s.params.gamma_ra != f.params.gamma_ra {
                    return Err(Error::Validation("legs disagree on risk aversion".into()));
                }
                let (ps, pf) = (&s.params, &f.params);
                if ps.lambda.len() != pf.lambda.len() {
                    return Err(Error::Validation("legs have different asset counts".into()));
                }
                let overlap = ps
                    .lambda
                    .iter()
                    .zip(&ps.rho)
                    .zip(pf.lambda.iter().zip(&pf.rho))
                    .any(|((ls, rs), (lf, rf))| (*ls != 0.0 || *rs != 0.0) && (*lf != 0.0 || *rf != 0.0));
                if overlap {
                    return Err(Error::Validation(
                        "slow and fast legs must load on disjoint assets for the exact value to separate".into(),
                    ));
                }
                ps.gamma_ra
            }
            (Some(s), None) => s.params.gamma_ra,
            (None, Some(f)) => f.params.gamma_ra,
            (None, None) => return Err(Error::Validation("benchmark needs at least one leg".into())),
        };
        Ok(ExactPower { gamma_ra, slow, fast })
    }

    pub fn slow_only(p: PowerModelParams) -> Result<Self> {
        ExactPower::new(Some(Leg::transient(p)?), None)
    }

    /// Fast benchmark at scale `eps` from parameters whose `delta` is ignored.
    pub fn fast_only(p: &PowerModelParams, eps: f64, branch: Branch) -> Result<Self> {
        let q = p.with_delta(1.0 / eps);
        let leg = match branch {
            Branch::Transient => Leg::transient(q)?,
            Branch::QuasiStationary => Leg::quasi_stationary(q)?,
        };
        ExactPower::new(None, Some(leg))
    }

    pub fn separable(ps: PowerModelParams, pf: &PowerModelParams, eps: f64) -> Result<Self> {
        ExactPower::new(
            Some(Leg::transient(ps)?),
            Some(Leg::quasi_stationary(pf.with_delta(1.0 / eps))?),
        )
    }

    pub fn datum(&self, x: f64) -> f64 {
        let g = self.gamma_ra;
        g.powf(g) * x.powf(1.0 - g) / (1.0 - g)
    }

    fn check_state(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<()> {
        if !(t >= 0.0 && x > 0.0) {
            return Err(Error::Validation(format!("need t >= 0 and x > 0 (got t = {t}, x = {x})")));
        }
        if self.slow.is_some() && !(y1 > 0.0) {
            return Err(Error::Validation(format!("slow state y1 = {y1} must be positive")));
        }
        if self.fast.is_some() && !(y2 > 0.0) {
            return Err(Error::Validation(format!("fast state y2 = {y2} must be positive")));
        }
        Ok(())
    }

    pub fn value(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        Ok(self.partials(t, x, y1, y2)?.v)
    }

    /// Analytic partial derivatives.
    pub fn partials(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Partials> {
        self.check_state(t, x, y1, y2)?;
        let (f1, f1t, f1y) = self.slow.as_ref().map_or((0.0, 0.0, 0.0), |l| l.exponent(t, y1));
        let (f2, f2t, f2y) = self.fast.as_ref().map_or((0.0, 0.0, 0.0), |l| l.exponent(t, y2));
        let g = self.gamma_ra;
        let v = self.datum(x) * (f1 + f2).exp();
        let vx = (1.0 - g) / x * v;
        Ok(Partials {
            v,
            t: (f1t + f2t) * v,
            x: vx,
            xx: -g * vx / x,
            y1: f1y * v,
            y1y1: f1y * f1y * v,
            xy1: f1y * vx,
            y2: f2y * v,
            y2y2: f2y * f2y * v,
            xy2: f2y * vx,
            y1y2: f1y * f2y * v,
        })
    }

    /// Exposure `sigma^T pi*` of the optimizer.
    pub fn optimal_exposure(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Vec<f64>> {
        let p = self.partials(t, x, y1, y2)?;
        let d = self.dim();
        let mut e = vec![0.0; d];
        if let Some(l) = &self.slow {
            let s = y1.sqrt();
            let kap = l.params.delta.sqrt() * l.params.beta * s;
            for j in 0..d {
                e[j] += l.params.lambda[j] * s * p.x + kap * l.params.rho[j] * p.xy1;
            }
        }
        if let Some(l) = &self.fast {
            let s = y2.sqrt();
            let kap = l.params.delta.sqrt() * l.params.beta * s;
            for j in 0..d {
                e[j] += l.params.lambda[j] * s * p.x + kap * l.params.rho[j] * p.xy2;
            }
        }
        Ok(e.into_iter().map(|v| -v / p.xx).collect())
    }

    pub fn dim(&self) -> usize {
        self.slow
            .as_ref()
            .or(self.fast.as_ref())
            .map(|l| l.params.lambda.len())
            .unwrap_or(0)
    }

    /// Terms of the HJB equation at the state; the residual is their sum.
    pub fn hjb_terms(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Vec<f64>> {
        let p = self.partials(t, x, y1, y2)?;
        let d = self.dim();
        let mut terms = vec![p.t];
        let mut lin = vec![0.0; d];
        let mut add_leg = |l: &Leg, y: f64, vy: f64, vyy: f64, vxy: f64, terms: &mut Vec<f64>| {
            let pp = &l.params;
            let kap2 = pp.delta * pp.beta * pp.beta * y;
            terms.push(pp.delta * (pp.m0 - y) * vy);
            terms.push(0.5 * kap2 * vyy);
            let s = y.sqrt();
            for j in 0..d {
                lin[j] += pp.lambda[j] * s * p.x + kap2.sqrt() * pp.rho[j] * vxy;
            }
        };
        if let Some(l) = &self.slow {
            add_leg(l, y1, p.y1, p.y1y1, p.xy1, &mut terms);
        }
        if let Some(l) = &self.fast {
            add_leg(l, y2, p.y2, p.y2y2, p.xy2, &mut terms);
        }
        terms.push(-0.5 * dot(&lin, &lin) / p.xx);
        Ok(terms)
    }

    /// `|sum of terms| / sum of |terms|`.
    pub fn hjb_residual(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        let terms = self.hjb_terms(t, x, y1, y2)?;
        let s: f64 = terms.iter().sum();
        let a: f64 = terms.iter().map(|v| v.abs()).sum();
        Ok(if a == 0.0 { 0.0 } else { s.abs() / a })
    }

    /// Market model whose expansion is compared against this benchmark
    /// (`sigma = I`, CIR legs with unit mean-reversion rate).
    pub fn market_model(&self) -> Result<MarketModel> {
        let d = self.dim();
        let zero = vec![0.0; d];
        let ls = self.slow.as_ref().map_or(zero.clone(), |l| l.params.lambda.clone());
        let lf = self.fast.as_ref().map_or(zero.clone(), |l| l.params.lambda.clone());
        let (ls1, lf1, ls2) = (ls.clone(), lf.clone(), ls.clone());
        let lambda: VecFn = Arc::new(move |y1: f64, y2: f64| {
            let (a, b) = (y1.max(0.0).sqrt(), y2.max(0.0).sqrt());
            ls1.iter().zip(&lf1).map(|(s, f)| s * a + f * b).collect()
        });
        let dlambda: VecFn = Arc::new(move |y1: f64, _| {
            let a = 0.5 / y1.max(1e-300).sqrt();
            ls2.iter().map(|s| s * a).collect()
        });
        let _ = lf;
        let slow = match &self.slow {
            Some(l) => SlowFactor::cir(1.0, l.params.m0, l.params.beta)?,
            None => SlowFactor::frozen(1.0),
        };
        let fast = match &self.fast {
            Some(l) => FastFactor::cir(1.0, l.params.m0, l.params.beta)?,
            None => FastFactor::frozen(1.0),
        };
        let sample_y1 = vec![self.slow.as_ref().map_or(1.0, |l| l.params.m0)];
        let label = match (&self.slow, &self.fast) {
            (Some(_), Some(_)) => "power-separable",
            (Some(_), None) => "power-slow",
            _ => "power-fast",
        };
        MarketModel::new(MarketSpec {
            d,
            n: d,
            lambda,
            dlambda_dy1: Some(dlambda),
            sigma: Arc::new(move |_, _| DMatrix::identity(d, d)),
            rho_s: self.slow.as_ref().map_or(zero.clone(), |l| l.params.rho.clone()),
            rho_f: self.fast.as_ref().map_or(zero.clone(), |l| l.params.rho.clone()),
            rho_sf: 0.0,
            slow,
            fast,
            widder: Arc::new(WidderMeasure::power(self.gamma_ra)?),
            v0: Arc::new(InitialUtility::power(self.gamma_ra)?),
            sample_y1,
            label: label.into(),
        })
    }

    pub fn value_surface(&self) -> Result<ValueSurface> {
        Ok(ValueSurface::new(Arc::new(self.market_model()?)))
    }
}

/// One row of a rate study; `scale` is `delta` or `eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyRow {
    pub scale: f64,
    pub exact: f64,
    pub v0: f64,
    pub correction: f64,
    pub one_term_error: f64,
    pub two_term_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateStudy {
    pub rows: Vec<StudyRow>,
    pub one_term: Option<LineFit>,
    pub two_term: Option<LineFit>,
    pub warnings: Vec<String>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 4 {
        return Err(Error::Validation(format!("rate study needs at least 4 grid values (got {})", grid.len())));
    }
    if grid.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Validation("rate study grid values must be positive".into()));
    }
    let (lo, hi) = grid.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi / lo < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Validation(format!(
            "rate study grid spans {:.3} decades; need at least 2",
            (hi / lo).log10()
        )));
    }
    Ok(())
}

fn fit_rows(rows: Vec<StudyRow>) -> RateStudy {
    let h: Vec<f64> = rows.iter().map(|r| r.scale).collect();
    let e1: Vec<f64> = rows.iter().map(|r| r.one_term_error).collect();
    let e2: Vec<f64> = rows.iter().map(|r| r.two_term_error).collect();
    let floor = 10.0 * ERROR_FLOOR;
    let mut warnings = Vec::new();
    for r in &rows {
        for (name, e) in [("one-term", r.one_term_error), ("two-term", r.two_term_error)] {
            if e.abs() <= floor {
                warnings.push(format!(
                    "{name} error {e:.3e} at scale {} is within 10x of the {ERROR_FLOOR:e} floor; point dropped",
                    r.scale
                ));
            }
        }
    }
    RateStudy {
        one_term: log_log_slope(&h, &e1, floor),
        two_term: log_log_slope(&h, &e2, floor),
        rows,
        warnings,
    }
}

fn study_row(
    bench: &ExactPower,
    surf: &ValueSurface,
    scale: f64,
    t: f64,
    x: f64,
    y1: f64,
    y2: f64,
) -> Result<StudyRow> {
    let exact = bench.value(t, x, y1, y2)?;
    let v0 = surf.v0_eval(t, x, y1)?.0;
    let correction = if bench.slow.is_some() {
        surf.v10_eval(t, x, y1)?
    } else {
        surf.v01_eval(t, x, y1)?
    };
    let one = exact - v0;
    Ok(StudyRow {
        scale,
        exact,
        v0,
        correction,
        one_term_error: one,
        two_term_error: one - scale.sqrt() * correction,
    })
}

/// Exact slow solution against `V0 + sqrt(delta) V10` over `deltas`.
pub fn error_study(p: &PowerModelParams, deltas: &[f64], t: f64, x: f64, y: f64) -> Result<RateStudy> {
    check_grid(deltas)?;
    let surf = ExactPower::slow_only(p.clone())?.value_surface()?;
    let rows = deltas
        .par_iter()
        .map(|&d| {
            let bench = ExactPower::slow_only(p.with_delta(d))?;
            study_row(&bench, &surf, d, t, x, y, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fit_rows(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastStudy {
    /// quasi-stationary exact solution (the gated comparison)
    pub quasi: RateStudy,
    /// exact solution started from the power datum
    pub literal: RateStudy,
    /// `lbar^2` from averaging against `|Lambda|^2 m0`
    pub lambda_bar_sq: f64,
    pub lambda_bar_sq_expected: f64,
}

/// Exact fast solution with `delta = 1 / eps` against `V0 + sqrt(eps) V01`;
/// the fast state is taken at `y`.
pub fn fast_reparam_study(p: &PowerModelParams, epss: &[f64], t: f64, x: f64, y: f64) -> Result<FastStudy> {
    check_grid(epss)?;
    let surf = ExactPower::fast_only(p, epss[0], Branch::QuasiStationary)?.value_surface()?;
    let run = |branch: Branch| -> Result<RateStudy> {
        let rows = epss
            .par_iter()
            .map(|&e| {
                let bench = ExactPower::fast_only(p, e, branch)?;
                study_row(&bench, &surf, e, t, x, 1.0, y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fit_rows(rows))
    };
    let lb = surf.coefficients(1.0)?.lambda_bar;
    Ok(FastStudy {
        quasi: run(Branch::QuasiStationary)?,
        literal: run(Branch::Transient)?,
        lambda_bar_sq: lb * lb,
        lambda_bar_sq_expected: p.lambda_norm_sq() * p.m0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiscaleRow {
    pub delta: f64,
    pub epsilon: f64,
    pub exact: f64,
    pub approx: f64,
    pub error: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleTable {
    pub rows: Vec<MultiscaleRow>,
    /// `max ratio / min ratio`
    pub spread: f64,
}

/// Separable two-factor benchmark against `V0 + sqrt(delta) V10 + sqrt(eps) V01`.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_study(
    p_slow: &PowerModelParams,
    p_fast: &PowerModelParams,
    deltas: &[f64],
    epss: &[f64],
    t: f64,
    x: f64,
    y1: f64,
    y2: f64,
) -> Result<MultiscaleTable> {
    if deltas.is_empty() || epss.is_empty() {
        return Err(Error::Validation("multiscale grids must be non-empty".into()));
    }
    let base = ExactPower::separable(p_slow.clone(), p_fast, epss[0])?;
    let surf = base.value_surface()?;
    let pairs: Vec<(f64, f64)> = deltas
        .iter()
        .flat_map(|&d| epss.iter().map(move |&e| (d, e)))
        .collect();
    let rows = pairs
        .par_iter()
        .map(|&(d, e)| {
            let bench = ExactPower::separable(p_slow.with_delta(d), p_fast, e)?;
            let exact = bench.value(t, x, y1, y2)?;
            let approx = surf.approx_value(t, x, y1, y2, d, e)?.combined;
            let error = (exact - approx).abs();
            Ok(MultiscaleRow {
                delta: d,
                epsilon: e,
                exact,
                approx,
                error,
                ratio: error / (d + e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = rows
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
    Ok(MultiscaleTable {
        rows,
        spread: hi / lo,
    })
}

/// Benchmark parameters used by the presets and the acceptance checks.
pub mod benchmarks {
    use super::PowerModelParams;

    /// Single slow factor evaluated at `t = 1`, `x = 1`, `y = 1`.
    pub fn slow() -> PowerModelParams {
        PowerModelParams::new(2.0, vec![0.5], 1.0, 0.4, vec![0.5], 0.1).expect("valid preset")
    }

    /// Slow leg of the separable two-asset benchmark.
    pub fn separable_slow() -> PowerModelParams {
        PowerModelParams::new(2.0, vec![0.8, 0.0], 2.0, 0.3, vec![-0.7, 0.0], 0.01).expect("valid preset")
    }

    /// Fast leg of the separable two-asset benchmark.
    pub fn separable_fast() -> PowerModelParams {
        PowerModelParams::new(2.0, vec![0.0, 0.8], 1.0, 0.5, vec![0.0, -0.6], 100.0).expect("valid preset")
    }

    /// Evaluation point `(t, x, y1, y2)` of the separable benchmark.
    pub const SEPARABLE_POINT: (f64, f64, f64, f64) = (1.0, 1.5, 1.0, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fit::d1_central4;
    use proptest::prelude::*;

    fn vieta_params() -> PowerModelParams {
        // |Lambda| = 0.5, Lambda.rho = 0.3 * 0.5
        PowerModelParams::new(2.0, vec![0.5], 1.0, 0.4, vec![0.3], 0.01).unwrap()
    }

    #[test]
    fn initial_conditions_exact() {
        let s = riccati_solve(&benchmarks::slow()).unwrap();
        assert_eq!(s.a1(0.0), 0.0);
        assert_eq!(s.a2(0.0), 0.0);
        let e = ExactPower::slow_only(benchmarks::slow()).unwrap();
        assert_eq!(e.value(0.0, 1.7, 0.9, 1.0).unwrap(), e.datum(1.7));
    }

    #[test]
    fn vieta_and_plug_back() {
        let p = vieta_params();
        let s = riccati_solve(&p).unwrap();
        let (k, b, c) = p.quadratic();
        let prod = s.a_minus * s.a_plus;
        assert!((prod - c / k).abs() < 1e-10 * (c / k).abs());
        assert!((s.a_minus + s.a_plus + b / k).abs() < 1e-10 * (b / k).abs());
        for &t in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            let a = s.a1(t);
            let fd = d1_central4(|u| s.a1(u), t, 1e-3);
            let rhs = -(k * a * a + b * a + c);
            assert!((fd - rhs).abs() < 1e-8, "t={t}: {fd} vs {rhs}");
            assert!((s.a1_prime(t) - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            let fd2 = d1_central4(|u| s.a2(u), t, 1e-3);
            assert!((fd2 - s.a2_prime(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn regime_cases_and_errors() {
        assert!(benchmarks::slow().regime_cases().high_risk_aversion_positive_q);
        // gamma < 1 with positive Lambda.rho: both roots positive
        let p = PowerModelParams::new(0.5, vec![0.5], 1.0, 0.4, vec![0.5], 0.5).unwrap();
        let err = riccati_solve(&p).unwrap_err();
        assert!(matches!(err, Error::Regime(_)));
        assert!(err.to_string().contains("gamma>1, q>0: fails"));
        let bad = PowerModelParams::new(2.0, vec![0.5], 1.0, 0.4, vec![1.0, 1.0], 0.1);
        assert!(bad.is_err());
        let bad = PowerModelParams::new(2.0, vec![0.5, 0.0], 1.0, 0.4, vec![1.0, 1.0], 0.1).unwrap_err();
        assert!(bad.to_string().contains("excluded case"));
    }

    #[test]
    fn hjb_residual_slow_and_separable() {
        let e = ExactPower::slow_only(benchmarks::slow()).unwrap();
        let sep = ExactPower::separable(benchmarks::separable_slow(), &benchmarks::separable_fast(), 1e-2).unwrap();
        for &t in &[0.1, 1.0, 2.0] {
            for &x in &[0.5, 2.0] {
                for &y in &[0.2, 3.0] {
                    assert!(e.hjb_residual(t, x, y, 1.0).unwrap() < 1e-12);
                    assert!(sep.hjb_residual(t, x, y, 1.3).unwrap() < 1e-12);
                }
            }
        }
        let lit = ExactPower::fast_only(&benchmarks::separable_fast(), 1e-2, Branch::Transient).unwrap();
        for &t in &[1e-3, 1e-2, 0.1] {
            assert!(lit.hjb_residual(t, 1.0, 1.0, 0.7).unwrap() < 1e-12);
        }
    }

    #[test]
    fn partials_match_fd() {
        let e = ExactPower::separable(benchmarks::separable_slow(), &benchmarks::separable_fast(), 0.1).unwrap();
        let (t, x, y1, y2) = (0.8, 1.3, 0.9, 1.1);
        let p = e.partials(t, x, y1, y2).unwrap();
        let h = 1e-3;
        let v = |t, x, y1, y2| e.value(t, x, y1, y2).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-7 * (1.0 + b.abs());
        assert!(close(p.t, d1_central4(|s| v(s, x, y1, y2), t, h)));
        assert!(close(p.x, d1_central4(|s| v(t, s, y1, y2), x, h)));
        assert!(close(p.y1, d1_central4(|s| v(t, x, s, y2), y1, h)));
        assert!(close(p.y2, d1_central4(|s| v(t, x, y1, s), y2, h)));
        assert!(close(p.xy1, d1_central4(|s| e.partials(t, x, s, y2).unwrap().x, y1, h)));
        assert!(p.x > 0.0 && p.xx < 0.0);
    }

    #[test]
    fn small_delta_limit() {
        let p = benchmarks::slow();
        let surf = ExactPower::slow_only(p.clone()).unwrap().value_surface().unwrap();
        let v0 = surf.v0_eval(1.0, 1.0, 1.0).unwrap().0;
        let mut prev = f64::MAX;
        for &d in &[1e-2, 1e-3, 1e-4] {
            let e = ExactPower::slow_only(p.with_delta(d)).unwrap();
            let diff = (e.value(1.0, 1.0, 1.0, 1.0).unwrap() - v0).abs();
            assert!(diff < 0.1 * d.sqrt(), "delta={d}: {diff}");
            assert!(diff < prev);
            prev = diff;
        }
    }

    #[test]
    fn slow_rates() {
        let s = error_study(&benchmarks::slow(), &[1e-1, 1e-2, 1e-3, 1e-4], 1.0, 1.0, 1.0).unwrap();
        let two = s.two_term.unwrap().slope;
        let one = s.one_term.unwrap().slope;
        assert!((0.85..=1.15).contains(&two), "{two}");
        assert!((0.4..=0.6).contains(&one), "{one}");
    }

    #[test]
    fn uncorrelated_slow_rate() {
        let mut p = benchmarks::slow();
        p.rho = vec![0.0];
        let s = error_study(&p, &[1e-1, 1e-2, 1e-3, 1e-4], 1.0, 1.0, 1.0).unwrap();
        assert!(s.rows.iter().all(|r| r.correction == 0.0));
        let one = s.one_term.unwrap().slope;
        assert!((0.85..=1.15).contains(&one), "{one}");
    }

    #[test]
    fn fast_rates() {
        let p = benchmarks::separable_fast();
        let s = fast_reparam_study(&p, &[1e-1, 1e-2, 1e-3, 1e-4], 1.0, 1.5, 1.0).unwrap();
        let two = s.quasi.two_term.unwrap().slope;
        assert!((0.85..=1.15).contains(&two), "{two}");
        assert!((s.lambda_bar_sq - s.lambda_bar_sq_expected).abs() < 1e-6);
        let mut z = p.clone();
        z.rho = vec![0.0, 0.0];
        let s0 = fast_reparam_study(&z, &[1e-1, 1e-2, 1e-3, 1e-4], 1.0, 1.5, 1.0).unwrap();
        assert!(s0.quasi.rows.iter().all(|r| r.correction == 0.0));
    }

    #[test]
    fn multiscale_bounded() {
        let (t, x, y1, y2) = benchmarks::SEPARABLE_POINT;
        let tab = multiscale_study(
            &benchmarks::separable_slow(),
            &benchmarks::separable_fast(),
            &[1e-2, 1e-3],
            &[1e-2, 1e-3],
            t,
            x,
            y1,
            y2,
        )
        .unwrap();
        assert_eq!(tab.rows.len(), 4);
        assert!(tab.spread < 3.0, "{}", tab.spread);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn a1_monotone_and_bounded(
            lam in 0.1f64..1.0, rho in -0.9f64..0.9, beta in 0.1f64..1.0,
            delta in 1e-3f64..1.0, gamma in 1.2f64..5.0
        ) {
            let p = PowerModelParams::new(gamma, vec![lam], 1.0, beta, vec![rho], delta).unwrap();
            let s = riccati_solve(&p).unwrap();
            let mut prev = f64::MAX;
            let bound = s.a_plus.abs().max(s.a_minus.abs()) + 1e-12;
            for i in 0..40 {
                let t = 0.25 * i as f64;
                let gap = (s.a1(t) - s.a_plus).abs();
                prop_assert!(gap <= prev + 1e-14);
                prop_assert!(s.a1(t).abs() <= bound);
                prev = gap;
            }
        }

        #[test]
        fn exact_increasing_concave(
            t in 0.0f64..3.0, x in 0.1f64..10.0, y in 0.05f64..4.0, gamma in 0.3f64..5.0
        ) {
            prop_assume!((gamma - 1.0).abs() > 0.05);
            let rho = if gamma < 1.0 { -0.2 } else { 0.5 };
            let p = PowerModelParams::new(gamma, vec![0.5], 1.0, 0.4, vec![rho], 0.1).unwrap();
            if let Ok(e) = ExactPower::slow_only(p) {
                let d = e.partials(t, x, y, 1.0).unwrap();
                prop_assert!(d.x > 0.0 && d.xx < 0.0);
                prop_assert!(e.hjb_residual(t, x, y, 1.0).unwrap() < 1e-10);
            }
        }
    }
}
