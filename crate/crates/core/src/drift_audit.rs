//! Drift of a value process along a feedback portfolio.
//!
//! For wealth `dX = e.lambda dt + e.dW` (with exposure `e = sigma^T pi`) and
//! the slow/fast factors, Ito's formula gives `dV = Theta dt + dM` with
//!
//! ```text
//! Theta = V_t + e.lambda V_x + |e|^2/2 V_xx
//!       + delta b V_y1 + delta kappa^2/2 V_y1y1
//!       + (g V_y2 + alpha^2/2 V_y2y2) / eps
//!       + sqrt(delta) kappa (e.rho_s) V_xy1 + alpha/sqrt(eps) (e.rho_f) V_xy2
//!       + sqrt(delta/eps) rho_sf kappa alpha V_y1y2
//! ```
//!
//! `Theta` vanishes at the optimum of an exact value function. Paths are
//! simulated by Euler-Maruyama with full truncation for bounded-below factors.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expansion::ValueSurface;
use crate::factor_models::MarketModel;
use crate::numerics::fit::{d1_central4, d2_central4};
use crate::numerics::CompensatedSum;
use crate::portfolio::pi_approx;
use crate::power_exact::ExactPower;

/// Value and partial derivatives up to second order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Partials {
    pub v: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub y1: f64,
    pub y1y1: f64,
    pub xy1: f64,
    pub y2: f64,
    pub y2y2: f64,
    pub xy2: f64,
    pub y1y2: f64,
}

pub trait ValueFunction: Send + Sync {
    fn partials(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Partials>;

    fn value(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        Ok(self.partials(t, x, y1, y2)?.v)
    }
}

impl ValueFunction for ExactPower {
    fn partials(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Partials> {
        ExactPower::partials(self, t, x, y1, y2)
    }

    fn value(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<f64> {
        ExactPower::value(self, t, x, y1, y2)
    }
}

/// Relative finite-difference steps; the step in a variable `z` is
/// `h (1 + |z|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSteps {
    pub t: f64,
    pub x: f64,
    pub y1: f64,
    pub y2: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        FdSteps {
            t: 1e-3,
            x: 1e-3,
            y1: 1e-3,
            y2: 1e-3,
        }
    }
}

impl FdSteps {
    fn check(&self) -> Result<()> {
        if [self.t, self.x, self.y1, self.y2].iter().all(|h| *h > 0.0) {
            Ok(())
        } else {
            Err(Error::Validation(format!("finite-difference steps must be positive: {self:?}")))
        }
    }
}

type ScalarValue = Arc<dyn Fn(f64, f64, f64, f64) -> Result<f64> + Send + Sync>;

/// Partials of a plain value function by fourth-order differences.
#[derive(Clone)]
pub struct FdValue {
    f: ScalarValue,
    pub steps: FdSteps,
}

impl FdValue {
    pub fn new(f: ScalarValue, steps: FdSteps) -> Result<Self> {
        steps.check()?;
        Ok(FdValue { f, steps })
    }
}

/// First derivative in `t`, one-sided near `t = 0`.
fn dt4(g: &mut dyn FnMut(f64) -> f64, t: f64, h: f64) -> f64 {
    if t >= 2.0 * h {
        d1_central4(g, t, h)
    } else {
        (-25.0 * g(t) + 48.0 * g(t + h) - 36.0 * g(t + 2.0 * h) + 16.0 * g(t + 3.0 * h)
            - 3.0 * g(t + 4.0 * h))
            / (12.0 * h)
    }
}

impl ValueFunction for FdValue {
    fn partials(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Partials> {
        let s = &self.steps;
        let (ht, hx, h1, h2) = (
            s.t * (1.0 + t.abs()),
            s.x * (1.0 + x.abs()),
            s.y1 * (1.0 + y1.abs()),
            s.y2 * (1.0 + y2.abs()),
        );
        let mut err: Option<Error> = None;
        let mut f = |a: f64, b: f64, c: f64, d: f64| -> f64 {
            match (self.f)(a, b, c, d) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let v = f(t, x, y1, y2);
        let pt = dt4(&mut |u| f(u, x, y1, y2), t, ht);
        let px = d1_central4(|u| f(t, u, y1, y2), x, hx);
        let pxx = d2_central4(|u| f(t, u, y1, y2), x, hx);
        let py1 = d1_central4(|u| f(t, x, u, y2), y1, h1);
        let py1y1 = d2_central4(|u| f(t, x, u, y2), y1, h1);
        let py2 = d1_central4(|u| f(t, x, y1, u), y2, h2);
        let py2y2 = d2_central4(|u| f(t, x, y1, u), y2, h2);
        let mut cross = |which: u8| -> f64 {
            d1_central4(
                |a| match which {
                    0 => d1_central4(|b| f(t, a, b, y2), y1, h1),
                    1 => d1_central4(|b| f(t, a, y1, b), y2, h2),
                    _ => d1_central4(|b| f(t, x, a, b), y2, h2),
                },
                if which == 2 { y1 } else { x },
                if which == 2 { h1 } else { hx },
            )
        };
        let (pxy1, pxy2, py1y2) = (cross(0), cross(1), cross(2));
        if let Some(e) = err {
            return Err(Error::numeric(
                format!("finite-difference partial failed: {e}"),
                f64::NAN,
                0.0,
            ));
        }
        Ok(Partials {
            v,
            t: pt,
            x: px,
            xx: pxx,
            y1: py1,
            y1y1: py1y1,
            xy1: pxy1,
            y2: py2,
            y2y2: py2y2,
            xy2: pxy2,
            y1y2: py1y2,
        })
    }
}

/// `V0 + sqrt(delta) V10 + sqrt(eps) V01 + eps V2`; `x`-derivatives from
/// jets, the rest by differences. The `eps V2` term carries the fast-factor
/// dependence whose generator cancels the `O(1)` averaging gap.
pub struct ExpansionValue {
    pub surface: Arc<ValueSurface>,
    pub delta: f64,
    pub epsilon: f64,
    pub steps: FdSteps,
}

impl ExpansionValue {
    fn jet_at(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<[f64; 3]> {
        let s = &self.surface;
        let v0 = s.point(t, x, y1)?.v0;
        let v10 = s.v10_jet(t, x, y1)?;
        let v01 = s.v01_jet(t, x, y1)?;
        let v2 = s.v2_jet(t, x, y1, y2)?;
        let (a, b) = (self.delta.sqrt(), self.epsilon.sqrt());
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            if k >= v2.len() {
                return Err(Error::numeric("expansion jet too short for second x-derivative", v2.len() as f64, 3.0));
            }
            *o = v0.derivative(k) + a * v10.derivative(k) + b * v01.derivative(k) + self.epsilon * v2.derivative(k);
        }
        Ok(out)
    }
}

impl ValueFunction for ExpansionValue {
    fn partials(&self, t: f64, x: f64, y1: f64, y2: f64) -> Result<Partials> {
        let j = self.jet_at(t, x, y1, y2)?;
        let ht = self.steps.t * (1.0 + t.abs());
        let h1 = self.steps.y1 * (1.0 + y1.abs());
        let h2 = self.steps.y2 * (1.0 + y2.abs());
        let err: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
        let g = |tt: f64, a: f64, b: f64, k: usize| -> f64 {
            match self.jet_at(tt, x, a, b) {
                Ok(v) => v[k],
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let pt = dt4(&mut |u| g(u, y1, y2, 0), t, ht);
        let py1 = d1_central4(|u| g(t, u, y2, 0), y1, h1);
        let py1y1 = d2_central4(|u| g(t, u, y2, 0), y1, h1);
        let pxy1 = d1_central4(|u| g(t, u, y2, 1), y1, h1);
        let (py2, py2y2, pxy2, py1y2) = if self.surface.model.fast.is_frozen() {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            (
                d1_central4(|u| g(t, y1, u, 0), y2, h2),
                d2_central4(|u| g(t, y1, u, 0), y2, h2),
                d1_central4(|u| g(t, y1, u, 1), y2, h2),
                d1_central4(|a| d1_central4(|b| g(t, a, b, 0), y2, h2), y1, h1),
            )
        };
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        Ok(Partials {
            v: j[0],
            t: pt,
            x: j[1],
            xx: j[2],
            y1: py1,
            y1y1: py1y1,
            xy1: pxy1,
            y2: py2,
            y2y2: py2y2,
            xy2: pxy2,
            y1y2: py1y2,
        })
    }
}

/// Feedback map to the exposure `sigma^T pi`.
pub trait FeedbackPolicy: Send + Sync {
    fn exposure(&self, t: f64, x: f64, y1: f64, y2: f64, out: &mut [f64]) -> Result<()>;
}

/// `pi = 0`.
pub struct ZeroPolicy;

impl FeedbackPolicy for ZeroPolicy {
    fn exposure(&self, _: f64, _: f64, _: f64, _: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// Exact optimizer of the power benchmark: `e* = x/gamma (lambda + kappa rho f_y)`
/// per leg, where `f_y = q A1(t)`.
pub struct ExactOptimizer(pub ExactPower);

impl FeedbackPolicy for ExactOptimizer {
    fn exposure(&self, t: f64, x: f64, y1: f64, y2: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        let tol = x / self.0.gamma_ra;
        for (leg, y) in [(&self.0.slow, y1), (&self.0.fast, y2)] {
            if let Some(l) = leg {
                let p = &l.params;
                let s = y.max(0.0).sqrt();
                let fy = p.q() * l.riccati.a1(t);
                let kap = p.delta.sqrt() * p.beta * s;
                for (j, o) in out.iter_mut().enumerate() {
                    *o += tol * (p.lambda[j] * s + kap * p.rho[j] * fy);
                }
            }
        }
        Ok(())
    }
}

/// Approximately optimal portfolio from the expansion.
pub struct ApproxPolicy {
    pub surface: Arc<ValueSurface>,
    pub delta: f64,
    pub epsilon: f64,
}

impl FeedbackPolicy for ApproxPolicy {
    fn exposure(&self, t: f64, x: f64, y1: f64, y2: f64, out: &mut [f64]) -> Result<()> {
        let p = pi_approx(&self.surface, t, x, y1, y2, self.delta, self.epsilon)?;
        out.copy_from_slice(&p.exposure);
        Ok(())
    }
}

pub struct GeneratorInput<'a> {
    pub value_fn: &'a dyn ValueFunction,
    pub policy: &'a dyn FeedbackPolicy,
    pub model: &'a MarketModel,
    pub delta: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub x: f64,
    pub y1: f64,
    pub y2: f64,
}

impl State {
    pub fn new(t: f64, x: f64, y1: f64, y2: f64) -> Self {
        State { t, x, y1, y2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaEval {
    pub theta: f64,
    /// sum of absolute values of the generator terms
    pub scale: f64,
}

impl ThetaEval {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            self.theta.abs() / self.scale
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generator terms at `state` (their sum is `Theta`).
pub fn generator_terms(g: &GeneratorInput<'_>, s: State) -> Result<Vec<f64>> {
    let m = g.model;
    let (delta, eps) = (g.delta, g.epsilon);
    if !(delta >= 0.0 && eps >= 0.0) {
        return Err(Error::Validation("delta and epsilon must be non-negative".into()));
    }
    let fast_on = !m.fast.is_frozen();
    if fast_on && eps == 0.0 {
        return Err(Error::Validation("epsilon = 0 with an active fast factor".into()));
    }
    let p = g.value_fn.partials(s.t, s.x, s.y1, s.y2)?;
    let mut e = vec![0.0; m.d];
    g.policy.exposure(s.t, s.x, s.y1, s.y2, &mut e)?;
    let lam = m.lambda_at(s.y1, s.y2);
    let kap = (m.slow.kappa)(s.y1);
    let mut terms = vec![
        p.t,
        dot(&e, &lam) * p.x,
        0.5 * dot(&e, &e) * p.xx,
        delta * (m.slow.b)(s.y1) * p.y1,
        0.5 * delta * kap * kap * p.y1y1,
        delta.sqrt() * kap * dot(&e, &m.rho_s) * p.xy1,
    ];
    if fast_on {
        let a = (m.fast.alpha)(s.y2);
        terms.push((m.fast.gamma)(s.y2) * p.y2 / eps);
        terms.push(0.5 * a * a * p.y2y2 / eps);
        terms.push(a / eps.sqrt() * dot(&e, &m.rho_f) * p.xy2);
        terms.push((delta / eps).sqrt() * m.rho_sf * kap * a * p.y1y2);
    }
    if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
        const NAMES: [&str; 10] = [
            "V_t", "V_x", "V_xx", "V_y1", "V_y1y1", "V_xy1", "V_y2", "V_y2y2", "V_xy2", "V_y1y2",
        ];
        return Err(Error::numeric(
            format!("generator term with partial {} is not finite", NAMES[i]),
            terms[i],
            0.0,
        ));
    }
    Ok(terms)
}

pub fn generator_theta(g: &GeneratorInput<'_>, s: State) -> Result<ThetaEval> {
    let terms = generator_terms(g, s)?;
    let mut sum = CompensatedSum::default();
    let mut scale = 0.0;
    for v in &terms {
        sum.add(*v);
        scale += v.abs();
    }
    Ok(ThetaEval {
        theta: sum.value(),
        scale,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloSummary {
    /// mean of `V(T, X_T, Y_T) - V(0, x0, y0)` over unflagged paths
    pub mean: f64,
    /// sample standard deviation over `sqrt(n_used)`
    pub std_err: f64,
    pub n_paths: usize,
    pub n_used: usize,
    pub n_flagged: usize,
    pub dt: f64,
    pub horizon: f64,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub grid: Vec<State>,
    pub theta: Vec<f64>,
    pub relative: Vec<f64>,
    pub sup_abs_theta: f64,
    pub sup_rel_theta: f64,
    pub mc: Option<MonteCarloSummary>,
}

/// `Theta` over a grid (parallel, order preserved).
pub fn drift_report(g: &GeneratorInput<'_>, grid: &[State]) -> Result<DriftReport> {
    if grid.is_empty() {
        return Err(Error::Validation("drift grid is empty".into()));
    }
    let evals = grid
        .par_iter()
        .map(|s| generator_theta(g, *s))
        .collect::<Result<Vec<_>>>()?;
    let theta: Vec<f64> = evals.iter().map(|e| e.theta).collect();
    let relative: Vec<f64> = evals.iter().map(|e| e.relative()).collect();
    Ok(DriftReport {
        grid: grid.to_vec(),
        sup_abs_theta: theta.iter().fold(0.0, |a, v| a.max(v.abs())),
        sup_rel_theta: relative.iter().fold(0.0, |a, v| a.max(*v)),
        theta,
        relative,
        mc: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanRow {
    pub delta: f64,
    pub epsilon: f64,
    pub sup_abs_theta: f64,
    pub sup_rel_theta: f64,
    /// `sup|Theta| / (delta + eps)`
    pub ratio: f64,
    /// `sup|Theta| / (delta + eps)^2`
    pub ratio_sq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaScan {
    pub rows: Vec<ScanRow>,
    /// `max ratio / min ratio`
    pub spread: f64,
    /// `max ratio / ratio at the largest delta + eps`; at most 1 when the
    /// ratio does not grow as the scales shrink
    pub growth: f64,
    pub spread_sq: f64,
}

pub type ScanFactory<'a> =
    dyn Fn(f64, f64) -> Result<(Box<dyn ValueFunction>, Box<dyn FeedbackPolicy>)> + Sync + 'a;

/// `sup|Theta|` per `(delta, eps)` with value function and policy built by `make`.
pub fn theta_scan(
    model: &MarketModel,
    grid: &[State],
    pairs: &[(f64, f64)],
    make: &ScanFactory<'_>,
) -> Result<ThetaScan> {
    if pairs.is_empty() {
        return Err(Error::Validation("theta scan needs at least one (delta, eps) pair".into()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for &(delta, epsilon) in pairs {
        let (v, p) = make(delta, epsilon)?;
        let g = GeneratorInput {
            value_fn: v.as_ref(),
            policy: p.as_ref(),
            model,
            delta,
            epsilon,
        };
        reports.push((delta, epsilon, drift_report(&g, grid)?));
    }
    Ok(ThetaScan::from_reports(&reports))
}

impl ThetaScan {
    /// Summarise per-pair reports `(delta, eps, report)`.
    pub fn from_reports(reports: &[(f64, f64, DriftReport)]) -> ThetaScan {
        let rows: Vec<ScanRow> = reports
            .iter()
            .map(|(delta, epsilon, r)| {
                let s = delta + epsilon;
                ScanRow {
                    delta: *delta,
                    epsilon: *epsilon,
                    sup_abs_theta: r.sup_abs_theta,
                    sup_rel_theta: r.sup_rel_theta,
                    ratio: if s > 0.0 { r.sup_abs_theta / s } else { 0.0 },
                    ratio_sq: if s > 0.0 { r.sup_abs_theta / (s * s) } else { 0.0 },
                }
            })
            .collect();
        let spread_of = |f: fn(&ScanRow) -> f64| {
            let (lo, hi) = rows.iter().fold((f64::MAX, 0.0f64), |(a, b), r| (a.min(f(r)), b.max(f(r))));
            if lo > 0.0 { hi / lo } else { f64::INFINITY }
        };
        let spread = spread_of(|r| r.ratio);
        let spread_sq = spread_of(|r| r.ratio_sq);
        let lead = rows
            .iter()
            .max_by(|a, b| (a.delta + a.epsilon).total_cmp(&(b.delta + b.epsilon)))
            .map(|r| r.ratio)
            .unwrap_or(0.0);
        let hi = rows.iter().fold(0.0f64, |a, r| a.max(r.ratio));
        ThetaScan {
            growth: if lead > 0.0 { hi / lead } else { f64::INFINITY },
            rows,
            spread,
            spread_sq,
        }
    }
}

/// Path simulation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationConfig {
    pub x0: f64,
    pub y10: f64,
    pub y20: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub delta: f64,
    pub epsilon: f64,
    /// keep terminal states of every path
    pub keep_paths: bool,
}

/// States beyond this magnitude flag a path as exploded.
pub const EXPLOSION_BOUND: f64 = 1e8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathEnsemble {
    /// `(X_T, Y1_T, Y2_T)` per path when requested
    pub terminal: Vec<[f64; 3]>,
    pub flagged: Vec<usize>,
}

enum PathOutcome {
    Done([f64; 3], f64),
    Flagged([f64; 3]),
}

fn floor_of(lower: f64) -> Option<f64> {
    lower.is_finite().then_some(lower)
}

/// Euler-Maruyama ensemble and the martingale deviation of `value` along it.
/// Path `i` draws from its own ChaCha stream keyed by `(seed, i)`, so the
/// result does not depend on the thread count.
pub fn simulate_paths(
    model: &MarketModel,
    policy: &dyn FeedbackPolicy,
    value: &dyn ValueFunction,
    cfg: &SimulationConfig,
) -> Result<(PathEnsemble, MonteCarloSummary)> {
    let SimulationConfig {
        x0,
        y10,
        y20,
        horizon,
        dt,
        n_paths,
        seed,
        delta,
        epsilon,
        ..
    } = *cfg;
    if !(dt > 0.0 && horizon > 0.0 && n_paths > 1) {
        return Err(Error::Validation(format!(
            "need dt > 0, horizon > 0 and at least 2 paths (dt = {dt}, horizon = {horizon}, n = {n_paths})"
        )));
    }
    let fast_on = !model.fast.is_frozen();
    let slow_on = !model.slow.is_frozen() && delta > 0.0;
    if fast_on && !(epsilon > 0.0 && dt <= epsilon / 10.0) {
        return Err(Error::Validation(format!(
            "dt = {dt} must resolve the fast scale (dt <= eps/10 with eps = {epsilon})"
        )));
    }
    let steps = (horizon / dt).round() as usize;
    if ((steps as f64) * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::Validation(format!("horizon {horizon} is not a multiple of dt {dt}")));
    }
    let d = model.d;
    let l = &model.chol;
    let nb = if fast_on { d + 2 } else if slow_on { d + 1 } else { d };
    let floor1 = floor_of(model.slow.domain.lower);
    let floor2 = floor_of(model.fast.domain.lower);
    let v_start = value.value(0.0, x0, y10, y20)?;
    let (sqdt, sqd, sqe) = (dt.sqrt(), delta.sqrt(), epsilon.sqrt());

    let run_path = |i: usize| -> Result<PathOutcome> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut x, mut y1, mut y2) = (x0, y10, y20);
        let mut z = vec![0.0; d + 2];
        let mut dw = vec![0.0; d + 2];
        let mut e = vec![0.0; d];
        for k in 0..steps {
            let t = k as f64 * dt;
            let y1p = floor1.map_or(y1, |f| y1.max(f));
            let y2p = floor2.map_or(y2, |f| y2.max(f));
            for zj in z.iter_mut().take(nb) {
                *zj = rng.sample(StandardNormal);
            }
            for r in 0..nb {
                let mut s = 0.0;
                for c in 0..=r {
                    s += l[(r, c)] * z[c];
                }
                dw[r] = s * sqdt;
            }
            policy.exposure(t, x, y1p, y2p, &mut e)?;
            let lam = (model.lambda)(y1p, y2p);
            let mut dx = 0.0;
            for j in 0..d {
                dx += e[j] * (lam[j] * dt + dw[j]);
            }
            x += dx;
            if slow_on {
                y1 += delta * (model.slow.b)(y1p) * dt + sqd * (model.slow.kappa)(y1p) * dw[d];
            }
            if fast_on {
                y2 += (model.fast.gamma)(y2p) / epsilon * dt + (model.fast.alpha)(y2p) / sqe * dw[d + 1];
            }
            let bad = |v: f64| !v.is_finite() || v.abs() > EXPLOSION_BOUND;
            if bad(x) || bad(y1) || bad(y2) || x <= model.v0.domain_lower {
                return Ok(PathOutcome::Flagged([x, y1, y2]));
            }
        }
        let y1p = floor1.map_or(y1, |f| y1.max(f));
        let y2p = floor2.map_or(y2, |f| y2.max(f));
        let v = value.value(horizon, x, y1p, y2p)?;
        Ok(PathOutcome::Done([x, y1, y2], v - v_start))
    };
    let outcomes = (0..n_paths)
        .into_par_iter()
        .map(run_path)
        .collect::<Result<Vec<_>>>()?;

    let mut ens = PathEnsemble::default();
    let mut devs = Vec::with_capacity(n_paths);
    for (i, o) in outcomes.iter().enumerate() {
        let state = match o {
            PathOutcome::Done(s, dv) => {
                devs.push(*dv);
                s
            }
            PathOutcome::Flagged(s) => {
                ens.flagged.push(i);
                s
            }
        };
        if cfg.keep_paths {
            ens.terminal.push(*state);
        }
    }
    let n_used = devs.len();
    if n_used < 2 {
        return Err(Error::numeric("fewer than two paths survived", n_used as f64, 2.0));
    }
    let mut s = CompensatedSum::default();
    devs.iter().for_each(|v| s.add(*v));
    let mean = s.value() / n_used as f64;
    let mut ss = CompensatedSum::default();
    devs.iter().for_each(|v| ss.add((v - mean) * (v - mean)));
    let var = ss.value() / (n_used as f64 - 1.0);
    Ok((
        ens,
        MonteCarloSummary {
            mean,
            std_err: (var / n_used as f64).sqrt(),
            n_paths,
            n_used,
            n_flagged: n_paths - n_used,
            dt,
            horizon,
            rng_seed: seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_models::{FastFactor, MarketSpec, SlowFactor};
    use crate::power_exact::{benchmarks, Branch};
    use crate::widder_core::{InitialUtility, WidderMeasure};
    use nalgebra::DMatrix;

    fn grid() -> Vec<State> {
        let mut g = Vec::new();
        for &t in &[0.2, 1.0] {
            for &x in &[0.7, 2.0] {
                for &y in &[0.5, 1.5] {
                    g.push(State::new(t, x, y, 1.0 / y));
                }
            }
        }
        g
    }

    #[test]
    fn exact_optimizer_zero_drift() {
        let e = ExactPower::separable(benchmarks::separable_slow().with_delta(0.05), &benchmarks::separable_fast(), 0.02)
            .unwrap();
        let m = e.market_model().unwrap();
        let pol = ExactOptimizer(e.clone());
        let g = GeneratorInput {
            value_fn: &e,
            policy: &pol,
            model: &m,
            delta: 0.05,
            epsilon: 0.02,
        };
        let r = drift_report(&g, &grid()).unwrap();
        assert!(r.sup_rel_theta < 1e-12, "{}", r.sup_rel_theta);
        // matches the analytic optimizer from the partials
        let mut a = vec![0.0; 2];
        pol.exposure(0.4, 1.2, 0.8, 1.1, &mut a).unwrap();
        let b = e.optimal_exposure(0.4, 1.2, 0.8, 1.1).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_policy_drift_is_factor_part() {
        let e = ExactPower::slow_only(benchmarks::slow()).unwrap();
        let m = e.market_model().unwrap();
        let g = GeneratorInput {
            value_fn: &e,
            policy: &ZeroPolicy,
            model: &m,
            delta: 0.1,
            epsilon: 0.0,
        };
        let s = State::new(0.8, 1.3, 0.9, 1.0);
        let th = generator_theta(&g, s).unwrap().theta;
        let l = e.slow.as_ref().unwrap();
        let (p, r) = (&l.params, &l.riccati);
        let q = p.q();
        let v = e.value(s.t, s.x, s.y1, 1.0).unwrap();
        let fy = q * r.a1(s.t);
        let want = v
            * (q * (r.a1_prime(s.t) * s.y1 + r.a2_prime(s.t))
                + p.delta * (p.m0 - s.y1) * fy
                + 0.5 * p.delta * p.beta * p.beta * s.y1 * fy * fy);
        assert!((th - want).abs() < 1e-8 * want.abs());
    }

    #[test]
    fn fd_partials_match_analytic() {
        let e = ExactPower::separable(benchmarks::separable_slow(), &benchmarks::separable_fast(), 0.1).unwrap();
        let e2 = e.clone();
        let fd = FdValue::new(Arc::new(move |t, x, a, b| e2.value(t, x, a, b)), FdSteps::default()).unwrap();
        for &t in &[0.0, 0.7] {
            let a = e.partials(t, 1.3, 0.9, 1.1).unwrap();
            let b = fd.partials(t, 1.3, 0.9, 1.1).unwrap();
            for (u, w) in [
                (a.t, b.t),
                (a.x, b.x),
                (a.xx, b.xx),
                (a.y1, b.y1),
                (a.y1y1, b.y1y1),
                (a.xy1, b.xy1),
                (a.y2, b.y2),
                (a.y2y2, b.y2y2),
                (a.xy2, b.xy2),
                (a.y1y2, b.y1y2),
            ] {
                assert!((u - w).abs() < 1e-6 * (1.0 + u.abs()), "{u} vs {w}");
            }
        }
        assert!(FdValue::new(Arc::new(|_, _, _, _| Ok(0.0)), FdSteps { t: 0.0, ..FdSteps::default() }).is_err());
    }

    #[test]
    fn approx_policy_drift_shrinks() {
        let (ps, pf) = (benchmarks::separable_slow(), benchmarks::separable_fast());
        let base = ExactPower::separable(ps.clone(), &pf, 0.01).unwrap();
        let model = base.market_model().unwrap();
        let surf = Arc::new(ValueSurface::new(Arc::new(model.clone())));
        let make = |d: f64, e: f64| -> Result<(Box<dyn ValueFunction>, Box<dyn FeedbackPolicy>)> {
            let v = ExactPower::separable(ps.with_delta(d), &pf, e)?;
            Ok((
                Box::new(v),
                Box::new(ApproxPolicy {
                    surface: surf.clone(),
                    delta: d,
                    epsilon: e,
                }),
            ))
        };
        let scan = theta_scan(&model, &grid(), &[(1e-2, 1e-2), (1e-3, 1e-3), (1e-4, 1e-4)], &make).unwrap();
        assert!(scan.growth <= 1.0 + 1e-9, "{:?}", scan.rows);
        assert!(scan.rows.windows(2).all(|w| w[1].sup_abs_theta < w[0].sup_abs_theta));
        let zero = theta_scan(
            &model,
            &grid(),
            &[(1e-2, 1e-2)],
            &|d, e| Ok((Box::new(ExactPower::separable(ps.with_delta(d), &pf, e)?), Box::new(ExactOptimizer(ExactPower::separable(ps.with_delta(d), &pf, e)?)))),
        )
        .unwrap();
        assert!(zero.rows[0].sup_rel_theta < 1e-12);
    }

    #[test]
    fn epsilon_zero_with_fast_rejected() {
        let e = ExactPower::fast_only(&benchmarks::separable_fast(), 0.1, Branch::QuasiStationary).unwrap();
        let m = e.market_model().unwrap();
        let g = GeneratorInput {
            value_fn: &e,
            policy: &ZeroPolicy,
            model: &m,
            delta: 0.0,
            epsilon: 0.0,
        };
        assert!(matches!(generator_theta(&g, State::new(1.0, 1.0, 1.0, 1.0)), Err(Error::Validation(_))));
    }

    fn flat_model() -> MarketModel {
        MarketModel::new(MarketSpec {
            d: 1,
            n: 1,
            lambda: Arc::new(|_, _| vec![0.0]),
            dlambda_dy1: None,
            sigma: Arc::new(|_, _| DMatrix::identity(1, 1)),
            rho_s: vec![0.0],
            rho_f: vec![0.0],
            rho_sf: 0.0,
            slow: SlowFactor::frozen(1.0),
            fast: FastFactor::frozen(1.0),
            widder: Arc::new(WidderMeasure::power(2.0).unwrap()),
            v0: Arc::new(InitialUtility::power(2.0).unwrap()),
            sample_y1: vec![1.0],
            label: "flat".into(),
        })
        .unwrap()
    }

    #[test]
    fn deterministic_without_exposure() {
        let m = flat_model();
        let e = ExactPower::slow_only(benchmarks::slow()).unwrap();
        let cfg = SimulationConfig {
            x0: 1.0,
            y10: 1.0,
            y20: 1.0,
            horizon: 0.1,
            dt: 1e-2,
            n_paths: 8,
            seed: 3,
            delta: 0.1,
            epsilon: 0.0,
            keep_paths: true,
        };
        let (ens, _) = simulate_paths(&m, &ZeroPolicy, &e, &cfg).unwrap();
        assert!(ens.terminal.iter().all(|s| s[0] == 1.0 && s[1] == 1.0));
    }

    #[test]
    fn cholesky_reproduces_correlation() {
        let m = ExactPower::separable(benchmarks::separable_slow(), &benchmarks::separable_fast(), 0.1)
            .unwrap()
            .market_model()
            .unwrap();
        let r = m.correlation();
        let diff = &m.chol * m.chol.transpose() - r;
        assert!(diff.abs().max() <= 1e-12);
    }

    #[test]
    fn martingale_small_and_reproducible() {
        let e = ExactPower::slow_only(benchmarks::slow()).unwrap();
        let m = e.market_model().unwrap();
        let pol = ExactOptimizer(e.clone());
        let cfg = SimulationConfig {
            x0: 1.0,
            y10: 1.0,
            y20: 1.0,
            horizon: 0.5,
            dt: 1e-3,
            n_paths: 4000,
            seed: 11,
            delta: 0.1,
            epsilon: 0.0,
            keep_paths: false,
        };
        let (_, a) = simulate_paths(&m, &pol, &e, &cfg).unwrap();
        assert!(a.mean.abs() <= 3.0 * a.std_err, "{a:?}");
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (_, b) = pool.install(|| simulate_paths(&m, &pol, &e, &cfg).unwrap());
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
        let (_, h) = simulate_paths(&m, &pol, &e, &SimulationConfig { dt: 5e-4, ..cfg }).unwrap();
        let se = (a.std_err * a.std_err + h.std_err * h.std_err).sqrt();
        assert!((h.mean - a.mean).abs() < 2.0 * se);
    }
}
