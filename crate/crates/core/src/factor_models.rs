//! Market and factor specification, invariant law of the fast factor, the
//! Poisson corrector and the averaged coefficients.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{cholesky_psd, pinv_full_column_rank, GaussLegendre};
use crate::widder_core::{InitialUtility, WidderMeasure};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type VecFn = Arc<dyn Fn(f64, f64) -> Vec<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;

/// State interval; either end may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };
    pub const POSITIVE: Interval = Interval {
        lower: 0.0,
        upper: f64::INFINITY,
    };

    pub fn contains(&self, y: f64) -> bool {
        y > self.lower && y < self.upper
    }
}

/// Parametric family tag, kept for reporting and simulation floors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// drift `a (m - y)`, diffusion `beta sqrt(y)`
    Cir { rate: f64, mean: f64, vol: f64 },
    /// drift `a (m - y)`, diffusion `beta`
    Ou { rate: f64, mean: f64, vol: f64 },
    /// constant state
    Frozen { at: f64 },
    Custom,
}

impl Family {
    pub fn drift(&self) -> ScalarFn {
        match *self {
            Family::Cir { rate, mean, .. } | Family::Ou { rate, mean, .. } => {
                Arc::new(move |y| rate * (mean - y))
            }
            _ => Arc::new(|_| 0.0),
        }
    }

    pub fn diffusion(&self) -> ScalarFn {
        match *self {
            Family::Cir { vol, .. } => Arc::new(move |y: f64| vol * y.max(0.0).sqrt()),
            Family::Ou { vol, .. } => Arc::new(move |_| vol),
            _ => Arc::new(|_| 0.0),
        }
    }

    pub fn domain(&self) -> Interval {
        match self {
            Family::Cir { .. } => Interval::POSITIVE,
            _ => Interval::REAL_LINE,
        }
    }

    /// A representative interior state.
    pub fn center(&self) -> Option<f64> {
        match *self {
            Family::Cir { mean, .. } | Family::Ou { mean, .. } => Some(mean),
            Family::Frozen { at } => Some(at),
            Family::Custom => None,
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            Family::Cir { rate, mean, vol } => {
                if !(rate > 0.0 && mean > 0.0 && vol > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "CIR factor needs positive rate, mean and vol (got {rate}, {mean}, {vol})"
                    )));
                }
            }
            Family::Ou { rate, vol, .. }
                if !(rate > 0.0 && vol > 0.0) => {
                    return Err(Error::InvalidModel(format!(
                        "OU factor needs positive rate and vol (got {rate}, {vol})"
                    )));
                }
            _ => {}
        }
        Ok(())
    }
}

/// Slow factor `dY = delta b(Y) dt + sqrt(delta) kappa(Y) dB1`.
#[derive(Clone)]
pub struct SlowFactor {
    pub b: ScalarFn,
    pub kappa: ScalarFn,
    pub domain: Interval,
    pub family: Family,
}

impl fmt::Debug for SlowFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SlowFactor({:?})", self.family)
    }
}

impl SlowFactor {
    pub fn from_family(family: Family) -> Result<Self> {
        family.check()?;
        Ok(SlowFactor {
            b: family.drift(),
            kappa: family.diffusion(),
            domain: family.domain(),
            family,
        })
    }

    pub fn cir(rate: f64, mean: f64, vol: f64) -> Result<Self> {
        SlowFactor::from_family(Family::Cir { rate, mean, vol })
    }

    pub fn ou(rate: f64, mean: f64, vol: f64) -> Result<Self> {
        SlowFactor::from_family(Family::Ou { rate, mean, vol })
    }

    /// No slow dynamics: `b = kappa = 0`.
    pub fn frozen(at: f64) -> Self {
        SlowFactor::from_family(Family::Frozen { at }).expect("frozen factor is always valid")
    }

    pub fn custom(b: ScalarFn, kappa: ScalarFn, domain: Interval) -> Self {
        SlowFactor {
            b,
            kappa,
            domain,
            family: Family::Custom,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.family, Family::Frozen { .. })
    }
}

/// Fast factor `dY = gamma(Y)/eps dt + alpha(Y)/sqrt(eps) dB2`.
#[derive(Clone)]
pub struct FastFactor {
    pub gamma: ScalarFn,
    pub alpha: ScalarFn,
    pub domain: Interval,
    pub family: Family,
    /// interior state where the invariant-density search starts
    pub center: f64,
}

impl fmt::Debug for FastFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FastFactor({:?})", self.family)
    }
}

impl FastFactor {
    pub fn from_family(family: Family) -> Result<Self> {
        family.check()?;
        Ok(FastFactor {
            gamma: family.drift(),
            alpha: family.diffusion(),
            domain: family.domain(),
            family,
            center: family.center().unwrap_or(0.0),
        })
    }

    pub fn cir(rate: f64, mean: f64, vol: f64) -> Result<Self> {
        FastFactor::from_family(Family::Cir { rate, mean, vol })
    }

    pub fn ou(rate: f64, mean: f64, vol: f64) -> Result<Self> {
        FastFactor::from_family(Family::Ou { rate, mean, vol })
    }

    /// Degenerate factor whose invariant law is a point mass at `at`.
    pub fn frozen(at: f64) -> Self {
        FastFactor::from_family(Family::Frozen { at }).expect("frozen factor is always valid")
    }

    pub fn custom(gamma: ScalarFn, alpha: ScalarFn, domain: Interval, center: f64) -> Self {
        FastFactor {
            gamma,
            alpha,
            domain,
            family: Family::Custom,
            center,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.family, Family::Frozen { .. })
    }

    /// Multiply `gamma` and `alpha^2` by `c` (a change of the fast time scale).
    pub fn rescaled(&self, c: f64) -> Self {
        let g = self.gamma.clone();
        let a = self.alpha.clone();
        let sc = c.sqrt();
        FastFactor {
            gamma: Arc::new(move |y| c * g(y)),
            alpha: Arc::new(move |y| sc * a(y)),
            domain: self.domain,
            family: Family::Custom,
            center: self.center,
        }
    }
}

/// Density cutoff relative to the peak used to truncate infinite domains.
pub const DENSITY_CUTOFF: f64 = 1e-12;
const PANELS: usize = 64;
const PANEL_ORDER: usize = 20;

/// Invariant law of the fast factor on a truncated domain, with a composite
/// Gauss-Legendre rule.
#[derive(Clone, Debug)]
pub struct InvariantMeasure {
    pub lower: f64,
    pub upper: f64,
    /// quadrature nodes, panel-major
    pub nodes: Vec<f64>,
    /// probability weights at the nodes (sum to one)
    pub weights: Vec<f64>,
    /// normalised density at the nodes
    pub density_at_nodes: Vec<f64>,
    edges: Vec<f64>,
    log_speed_edges: Vec<f64>,
    log_norm: f64,
    gl: GaussLegendre,
    /// `q[i][j] = int_{-1}^{x_i} l_j(s) ds` for the Lagrange basis on the nodes
    integ: Vec<Vec<f64>>,
    point_mass: Option<f64>,
    factor: FastFactor,
}

impl InvariantMeasure {
    pub fn new(f: &FastFactor) -> Result<Self> {
        let gl = GaussLegendre::new(PANEL_ORDER);
        let integ = integration_matrix(&gl);
        if let Family::Frozen { at } = f.family {
            return Ok(InvariantMeasure {
                lower: at,
                upper: at,
                nodes: vec![at],
                weights: vec![1.0],
                density_at_nodes: vec![f64::INFINITY],
                edges: vec![at, at],
                log_speed_edges: vec![0.0, 0.0],
                log_norm: 0.0,
                gl,
                integ,
                point_mass: Some(at),
                factor: f.clone(),
            });
        }
        let (lower, upper) = truncation_bounds(f)?;
        let h = (upper - lower) / PANELS as f64;
        let edges: Vec<f64> = (0..=PANELS).map(|p| lower + h * p as f64).collect();
        let drift_ratio = |y: f64| {
            let a = (f.alpha)(y);
            2.0 * (f.gamma)(y) / (a * a)
        };
        let mut log_speed_edges = vec![0.0; PANELS + 1];
        let mut nodes = Vec::with_capacity(PANELS * PANEL_ORDER);
        let mut log_m = Vec::with_capacity(PANELS * PANEL_ORDER);
        let mut qw = Vec::with_capacity(PANELS * PANEL_ORDER);
        for p in 0..PANELS {
            let (a, b) = (edges[p], edges[p + 1]);
            let vals: Vec<f64> = gl.mapped(a, b).map(|(y, _)| drift_ratio(y)).collect();
            for (i, (y, w)) in gl.mapped(a, b).enumerate() {
                let partial: f64 = 0.5 * h * (0..PANEL_ORDER).map(|j| integ[i][j] * vals[j]).sum::<f64>();
                let al = (f.alpha)(y);
                if !(al > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "fast diffusion alpha({y}) = {al} is not positive inside the domain"
                    )));
                }
                nodes.push(y);
                log_m.push(log_speed_edges[p] + partial - 2.0 * al.ln());
                qw.push(w);
            }
            let full: f64 = gl.mapped(a, b).zip(&vals).map(|((_, w), v)| w * v).sum();
            log_speed_edges[p + 1] = log_speed_edges[p] + full;
        }
        let peak = log_m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_m.iter().zip(&qw).map(|(l, w)| w * (l - peak).exp()).sum();
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::InvalidModel("invariant density could not be normalised".into()));
        }
        let log_norm = peak + z.ln();
        let density_at_nodes: Vec<f64> = log_m.iter().map(|l| (l - log_norm).exp()).collect();
        let weights: Vec<f64> = density_at_nodes.iter().zip(&qw).map(|(d, w)| d * w).collect();
        Ok(InvariantMeasure {
            lower,
            upper,
            nodes,
            weights,
            density_at_nodes,
            edges,
            log_speed_edges,
            log_norm,
            gl,
            integ,
            point_mass: None,
            factor: f.clone(),
        })
    }

    pub fn point_mass(&self) -> Option<f64> {
        self.point_mass
    }

    pub fn panel_count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&y, &w)| w * f(y)).sum()
    }

    fn panel_of(&self, y: f64) -> usize {
        let h = (self.upper - self.lower) / self.panel_count() as f64;
        (((y - self.lower) / h).floor().max(0.0) as usize).min(self.panel_count() - 1)
    }

    /// Normalised density at an arbitrary state.
    pub fn density(&self, y: f64) -> f64 {
        if self.point_mass.is_some() || y < self.lower || y > self.upper {
            return 0.0;
        }
        let f = &self.factor;
        let p = self.panel_of(y);
        let a = self.edges[p];
        let partial: f64 = self
            .gl
            .mapped(a, y)
            .map(|(z, w)| {
                let al = (f.alpha)(z);
                w * 2.0 * (f.gamma)(z) / (al * al)
            })
            .sum();
        let al = (f.alpha)(y);
        (self.log_speed_edges[p] + partial - 2.0 * al.ln() - self.log_norm).exp()
    }

    /// `int_lower^{y_k} f dmu` at every node, given `f` at the nodes.
    pub fn cumulative_at_nodes(&self, f: &[f64]) -> Vec<f64> {
        let n = PANEL_ORDER;
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut acc = 0.0;
        for p in 0..self.panel_count() {
            let h = self.edges[p + 1] - self.edges[p];
            let off = p * n;
            let g: Vec<f64> = (0..n).map(|j| f[off + j] * self.density_at_nodes[off + j]).collect();
            for i in 0..n {
                let s: f64 = (0..n).map(|j| self.integ[i][j] * g[j]).sum();
                out.push(acc + 0.5 * h * s);
            }
            acc += (0..n).map(|j| self.weights[off + j] * f[off + j]).sum::<f64>();
        }
        out
    }

    /// `int_lower^{y} f(z) dz` (plain Lebesgue) at every node.
    pub fn antiderivative_at_nodes(&self, f: &[f64]) -> Vec<f64> {
        let n = PANEL_ORDER;
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut acc = 0.0;
        for p in 0..self.panel_count() {
            let h = self.edges[p + 1] - self.edges[p];
            let off = p * n;
            for i in 0..n {
                let s: f64 = (0..n).map(|j| self.integ[i][j] * f[off + j]).sum();
                out.push(acc + 0.5 * h * s);
            }
            acc += 0.5 * h * (0..n).map(|j| self.gl.weights[j] * f[off + j]).sum::<f64>();
        }
        out
    }

    /// `int_lower^{y} g(z) m(z) dz` for an arbitrary `y`.
    pub fn cumulative<G: Fn(f64) -> f64>(&self, g: G, y: f64) -> f64 {
        let y = y.clamp(self.lower, self.upper);
        let p = self.panel_of(y);
        let n = PANEL_ORDER;
        let mut acc = 0.0;
        for q in 0..p {
            for j in 0..n {
                acc += self.weights[q * n + j] * g(self.nodes[q * n + j]);
            }
        }
        let a = self.edges[p];
        acc + self.gl.mapped(a, y).map(|(z, w)| w * g(z) * self.density(z)).sum::<f64>()
    }

    /// `int_lower^{y} g(z) dz` for an arbitrary `y`, with `g` given at nodes
    /// for the full panels and as a handle for the partial one.
    pub fn antiderivative<G: Fn(f64) -> f64>(&self, g_nodes: &[f64], g: G, y: f64) -> f64 {
        let y = y.clamp(self.lower, self.upper);
        let p = self.panel_of(y);
        let n = PANEL_ORDER;
        let mut acc = 0.0;
        for q in 0..p {
            let h = self.edges[q + 1] - self.edges[q];
            acc += 0.5 * h * (0..n).map(|j| self.gl.weights[j] * g_nodes[q * n + j]).sum::<f64>();
        }
        let a = self.edges[p];
        acc + self.gl.mapped(a, y).map(|(z, w)| w * g(z)).sum::<f64>()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn integration_matrix(gl: &GaussLegendre) -> Vec<Vec<f64>> {
    let n = gl.nodes.len();
    let x = &gl.nodes;
    let lagrange = |j: usize, s: f64| -> f64 {
        let mut v = 1.0;
        for k in 0..n {
            if k != j {
                v *= (s - x[k]) / (x[j] - x[k]);
            }
        }
        v
    };
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| gl.mapped(-1.0, x[i]).map(|(s, w)| w * lagrange(j, s)).sum())
                .collect()
        })
        .collect()
}

/// Where the speed density falls below the cutoff relative to its peak.
fn truncation_bounds(f: &FastFactor) -> Result<(f64, f64)> {
    let y0 = f.center;
    if !f.domain.contains(y0) {
        return Err(Error::InvalidModel(format!(
            "fast factor center {y0} outside its domain"
        )));
    }
    let ratio = |y: f64| {
        let a = (f.alpha)(y);
        2.0 * (f.gamma)(y) / (a * a)
    };
    let gl = GaussLegendre::new(16);
    let incr = |a: f64, b: f64| gl.integrate(a, b, ratio);
    let logm = |speed: f64, y: f64| speed - 2.0 * (f.alpha)(y).ln();
    let cut = DENSITY_CUTOFF.ln().abs();
    let scale = {
        let a = (f.alpha)(y0);
        let slope = {
            let h = 1e-3 * (1.0 + y0.abs());
            (((f.gamma)(y0 + h) - (f.gamma)(y0 - h)) / (2.0 * h)).abs()
        };
        if slope > 0.0 && a > 0.0 {
            (a / (2.0 * slope).sqrt()).min(1.0 + y0.abs())
        } else {
            0.1 * (1.0 + y0.abs())
        }
    };
    let l0 = logm(0.0, y0);
    let walk = |dir: f64, bound: f64| -> Result<(Vec<(f64, f64)>, f64)> {
        // returns visited (y, log m) and the running max
        let mut pts = vec![(y0, l0)];
        let mut speed = 0.0;
        let mut y = y0;
        let mut peak = l0;
        let mut step = 0.25 * scale;
        for _ in 0..400 {
            let mut next = y + dir * step;
            let toward_bound = bound.is_finite() && (next - bound) * dir >= 0.0;
            if toward_bound {
                next = y + 0.5 * (bound - y);
            }
            if next == y {
                break;
            }
            speed += incr(y, next);
            y = next;
            let l = logm(speed, y);
            if !l.is_finite() && !toward_bound {
                return Err(Error::InvalidModel(format!("speed density is not finite at {y}")));
            }
            if !l.is_finite() {
                break;
            }
            pts.push((y, l));
            peak = peak.max(l);
            if l < peak - cut - 1.0 {
                return Ok((pts, peak));
            }
            if y.abs() > 1e8 {
                return Err(Error::InvalidModel(
                    "invariant density is not integrable (mass diverges under refinement)".into(),
                ));
            }
            if toward_bound && (bound - y).abs() < 1e-14 * (1.0 + bound.abs()) {
                break;
            }
            if !toward_bound {
                step *= 1.25;
            }
        }
        if bound.is_finite() {
            // the density stays large up to the boundary: keep the last point
            if pts.len() > 1 {
                let (ya, la) = pts[pts.len() - 1];
                let (_, lb) = pts[pts.len() - 2];
                if la > lb + 1.0 {
                    return Err(Error::InvalidModel(format!(
                        "invariant density is not integrable near the boundary {ya}"
                    )));
                }
            }
            return Ok((pts, peak));
        }
        Err(Error::InvalidModel(
            "invariant density is not integrable (mass diverges under refinement)".into(),
        ))
    };
    let (left, pl) = walk(-1.0, f.domain.lower)?;
    let (right, pr) = walk(1.0, f.domain.upper)?;
    let peak = pl.max(pr);
    let level = peak - cut;
    let edge = |pts: &[(f64, f64)]| -> f64 {
        // first crossing below the level, linearly interpolated in log m
        for w in pts.windows(2) {
            let ((ya, la), (yb, lb)) = (w[0], w[1]);
            if la >= level && lb < level {
                return ya + (yb - ya) * (la - level) / (la - lb);
            }
        }
        pts.last().map(|p| p.0).unwrap_or(y0)
    };
    Ok((edge(&left), edge(&right)))
}

/// Inputs for [`MarketModel::new`].
#[derive(Clone)]
pub struct MarketSpec {
    /// number of Brownian motions driving the assets
    pub d: usize,
    /// number of assets
    pub n: usize,
    pub lambda: VecFn,
    pub dlambda_dy1: Option<VecFn>,
    pub sigma: MatFn,
    pub rho_s: Vec<f64>,
    pub rho_f: Vec<f64>,
    pub rho_sf: f64,
    pub slow: SlowFactor,
    pub fast: FastFactor,
    pub widder: Arc<WidderMeasure>,
    pub v0: Arc<InitialUtility>,
    /// slow states at which the volatility rank is checked
    pub sample_y1: Vec<f64>,
    pub label: String,
}

/// Validated market model.
#[derive(Clone)]
pub struct MarketModel {
    pub d: usize,
    pub n: usize,
    pub lambda: VecFn,
    pub dlambda_dy1: Option<VecFn>,
    pub sigma: MatFn,
    pub rho_s: Vec<f64>,
    pub rho_f: Vec<f64>,
    pub rho_sf: f64,
    pub slow: SlowFactor,
    pub fast: FastFactor,
    pub widder: Arc<WidderMeasure>,
    pub v0: Arc<InitialUtility>,
    pub invariant: Arc<InvariantMeasure>,
    /// Cholesky factor of the `(d+2)` correlation matrix of `(W, B1, B2)`
    pub chol: DMatrix<f64>,
    pub label: String,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("label", &self.label)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("slow", &self.slow)
            .field("fast", &self.fast)
            .finish()
    }
}

impl MarketModel {
    pub fn new(spec: MarketSpec) -> Result<Self> {
        let d = spec.d;
        if d == 0 {
            return Err(Error::InvalidModel("need at least one Brownian motion".into()));
        }
        if spec.rho_s.len() != d || spec.rho_f.len() != d {
            return Err(Error::InvalidModel(format!(
                "correlation vectors must have length d = {d}"
            )));
        }
        let r = correlation_matrix(&spec.rho_s, &spec.rho_f, spec.rho_sf);
        let chol = cholesky_psd(&r)?;
        let invariant = Arc::new(InvariantMeasure::new(&spec.fast)?);
        let model = MarketModel {
            d,
            n: spec.n,
            lambda: spec.lambda,
            dlambda_dy1: spec.dlambda_dy1,
            sigma: spec.sigma,
            rho_s: spec.rho_s,
            rho_f: spec.rho_f,
            rho_sf: spec.rho_sf,
            slow: spec.slow,
            fast: spec.fast,
            widder: spec.widder,
            v0: spec.v0,
            invariant,
            chol,
            label: spec.label,
        };
        let y2s = model.sample_y2();
        for &y1 in &spec.sample_y1 {
            for &y2 in &y2s {
                let lam = (model.lambda)(y1, y2);
                if lam.len() != d {
                    return Err(Error::InvalidModel(format!(
                        "lambda returned length {} (expected {d})",
                        lam.len()
                    )));
                }
                let s = (model.sigma)(y1, y2);
                if s.shape() != (model.n, d) {
                    return Err(Error::InvalidModel(format!(
                        "sigma has shape {:?}, expected ({}, {d})",
                        s.shape(),
                        model.n
                    )));
                }
                pinv_full_column_rank(&s)?;
                if !model.slow.is_frozen() && model.slow.domain.contains(y1) {
                    let k = (model.slow.kappa)(y1);
                    if !(k > 0.0) {
                        return Err(Error::InvalidModel(format!(
                            "slow diffusion kappa({y1}) = {k} is not positive"
                        )));
                    }
                }
            }
        }
        Ok(model)
    }

    /// A few fast states spread over the invariant law.
    pub fn sample_y2(&self) -> Vec<f64> {
        let inv = &self.invariant;
        if let Some(p) = inv.point_mass() {
            return vec![p];
        }
        let w = inv.upper - inv.lower;
        vec![inv.lower + 0.25 * w, inv.lower + 0.5 * w, inv.lower + 0.75 * w]
    }

    pub fn lambda_at(&self, y1: f64, y2: f64) -> Vec<f64> {
        (self.lambda)(y1, y2)
    }

    /// `d lambda / d y1`, analytic when supplied, otherwise central
    /// difference with step `1e-4`.
    pub fn dlambda_at(&self, y1: f64, y2: f64) -> Vec<f64> {
        if let Some(dl) = &self.dlambda_dy1 {
            return dl(y1, y2);
        }
        let h = 1e-4;
        let a = (self.lambda)(y1 + h, y2);
        let b = (self.lambda)(y1 - h, y2);
        a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * h)).collect()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_matrix(&self.rho_s, &self.rho_f, self.rho_sf)
    }

    /// Copy with the fast dynamics rescaled (see [`FastFactor::rescaled`]).
    pub fn with_fast(&self, fast: FastFactor) -> Result<Self> {
        let mut m = self.clone();
        m.invariant = Arc::new(InvariantMeasure::new(&fast)?);
        m.fast = fast;
        Ok(m)
    }
}

/// Correlation matrix of `(W_1..W_d, B1, B2)`.
pub fn correlation_matrix(rho_s: &[f64], rho_f: &[f64], rho_sf: f64) -> DMatrix<f64> {
    let d = rho_s.len();
    let mut r = DMatrix::<f64>::identity(d + 2, d + 2);
    for j in 0..d {
        r[(j, d)] = rho_s[j];
        r[(d, j)] = rho_s[j];
        r[(j, d + 1)] = rho_f[j];
        r[(d + 1, j)] = rho_f[j];
    }
    r[(d, d + 1)] = rho_sf;
    r[(d + 1, d)] = rho_sf;
    r
}

/// Invariant density of the fast factor with its quadrature.
pub fn invariant_density(f: &FastFactor) -> Result<InvariantMeasure> {
    InvariantMeasure::new(f)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Root-mean-square of `|lambda(y1, .)|` under the invariant law.
pub fn lambda_bar(model: &MarketModel, y1: f64) -> f64 {
    model
        .invariant
        .expect(|y2| norm2(&(model.lambda)(y1, y2)))
        .max(0.0)
        .sqrt()
}

/// Centering tolerance for the Poisson source.
pub const CENTERING_TOL: f64 = 1e-8;

/// Solution of the Poisson equation `L phi = -(|lambda|^2 - lbar^2)` at a
/// fixed slow state, with `phi` centred under the invariant law.
#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub y1: f64,
    pub lambda_bar_sq: f64,
    inv: Arc<InvariantMeasure>,
    model: MarketModel,
    /// `phi'` at the quadrature nodes
    pub phi_prime_nodes: Vec<f64>,
    phi_mean: f64,
    phi_raw_nodes: Vec<f64>,
}

impl PoissonSolution {
    pub fn new(model: &MarketModel, y1: f64) -> Result<Self> {
        Self::with_lambda_bar_sq(model, y1, None)
    }

    /// As [`PoissonSolution::new`] but with an externally supplied `lbar^2`,
    /// which must centre the source.
    pub fn with_lambda_bar_sq(model: &MarketModel, y1: f64, lbar_sq: Option<f64>) -> Result<Self> {
        let inv = model.invariant.clone();
        let own = inv.expect(|y2| norm2(&(model.lambda)(y1, y2)));
        let lbs = lbar_sq.unwrap_or(own);
        let centering = own - lbs;
        if centering.abs() > CENTERING_TOL * (1.0 + own.abs()) {
            return Err(Error::InvalidModel(format!(
                "Poisson source is not centred (mean {centering:.3e}); lambda_bar inconsistent with the invariant law"
            )));
        }
        if inv.point_mass().is_some() {
            return Ok(PoissonSolution {
                y1,
                lambda_bar_sq: lbs,
                inv,
                model: model.clone(),
                phi_prime_nodes: vec![0.0],
                phi_mean: 0.0,
                phi_raw_nodes: vec![0.0],
            });
        }
        let src: Vec<f64> = inv
            .nodes
            .iter()
            .map(|&y2| norm2(&(model.lambda)(y1, y2)) - lbs)
            .collect();
        let cum = inv.cumulative_at_nodes(&src);
        let phi_prime_nodes: Vec<f64> = inv
            .nodes
            .iter()
            .zip(&cum)
            .zip(&inv.density_at_nodes)
            .map(|((&y2, &c), &m)| {
                let a = (model.fast.alpha)(y2);
                -2.0 * c / (a * a * m)
            })
            .collect();
        let phi_raw_nodes = inv.antiderivative_at_nodes(&phi_prime_nodes);
        let phi_mean = phi_raw_nodes.iter().zip(&inv.weights).map(|(p, w)| p * w).sum();
        Ok(PoissonSolution {
            y1,
            lambda_bar_sq: lbs,
            inv,
            model: model.clone(),
            phi_prime_nodes,
            phi_mean,
            phi_raw_nodes,
        })
    }

    fn source(&self, y2: f64) -> f64 {
        norm2(&(self.model.lambda)(self.y1, y2)) - self.lambda_bar_sq
    }

    /// `phi_y2` at an arbitrary fast state.
    pub fn phi_prime(&self, y2: f64) -> f64 {
        if self.inv.point_mass().is_some() {
            return 0.0;
        }
        let c = self.inv.cumulative(|z| self.source(z), y2);
        let a = (self.model.fast.alpha)(y2);
        -2.0 * c / (a * a * self.inv.density(y2))
    }

    /// Centred `phi` at an arbitrary fast state.
    pub fn phi(&self, y2: f64) -> f64 {
        if self.inv.point_mass().is_some() {
            return 0.0;
        }
        self.inv
            .antiderivative(&self.phi_prime_nodes, |z| self.phi_prime(z), y2)
            - self.phi_mean
    }

    /// `alpha^2/2 phi'' + gamma phi' + (|lambda|^2 - lbar^2)` with `phi''` by a
    /// fourth-order difference of `phi'`.
    pub fn residual(&self, y2: f64) -> f64 {
        if self.inv.point_mass().is_some() {
            return 0.0;
        }
        let h = 1e-3 * (1.0 + y2.abs());
        let pp = crate::numerics::fit::d1_central4(|z| self.phi_prime(z), y2, h);
        let a = (self.model.fast.alpha)(y2);
        0.5 * a * a * pp + (self.model.fast.gamma)(y2) * self.phi_prime(y2) + self.source(y2)
    }

    /// Raw (uncentred) antiderivative at the nodes, for diagnostics.
    pub fn phi_nodes(&self) -> Vec<f64> {
        self.phi_raw_nodes.iter().map(|p| p - self.phi_mean).collect()
    }
}

/// `phi_y2(y1, y2)`.
pub fn phi_prime(model: &MarketModel, y1: f64, y2: f64) -> Result<f64> {
    Ok(PoissonSolution::new(model, y1)?.phi_prime(y2))
}

/// Averaged coefficients at a slow state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragedCoefficients {
    pub lambda_bar: f64,
    pub lambda_bar_prime: f64,
    pub c10: f64,
    pub c01: f64,
}

impl AveragedCoefficients {
    /// `lbar * lbar'`, well defined even when `lbar = 0`.
    pub fn lambda_lambda_prime(&self) -> f64 {
        self.lambda_bar * self.lambda_bar_prime
    }
}

pub fn averaged_coefficients(model: &MarketModel, y1: f64) -> Result<AveragedCoefficients> {
    let sol = PoissonSolution::new(model, y1)?;
    averaged_with(model, y1, &sol)
}

pub(crate) fn averaged_with(
    model: &MarketModel,
    y1: f64,
    sol: &PoissonSolution,
) -> Result<AveragedCoefficients> {
    let inv = &model.invariant;
    let d = model.d;
    let lbar = sol.lambda_bar_sq.max(0.0).sqrt();
    let ll_prime = inv.expect(|y2| dot(&(model.lambda)(y1, y2), &model.dlambda_at(y1, y2)));
    let lambda_bar_prime = if lbar > 0.0 {
        ll_prime / lbar
    } else if ll_prime.abs() > 0.0 {
        return Err(Error::numeric(
            "lambda_bar vanishes while lambda depends on y1 (division by zero in lambda_bar')",
            ll_prime.abs(),
            0.0,
        ));
    } else {
        0.0
    };
    let mut mean_lambda = vec![0.0; d];
    let mut c01_vec = vec![0.0; d];
    for (k, (&y2, &w)) in inv.nodes.iter().zip(&inv.weights).enumerate() {
        let lam = (model.lambda)(y1, y2);
        let fac = sol.phi_prime_nodes[k] * (model.fast.alpha)(y2);
        for j in 0..d {
            mean_lambda[j] += w * lam[j];
            c01_vec[j] += w * lam[j] * fac;
        }
    }
    let c10 = dot(&model.rho_s, &mean_lambda) * (model.slow.kappa)(y1);
    let c01 = if inv.point_mass().is_some() {
        0.0
    } else {
        dot(&model.rho_f, &c01_vec)
    };
    Ok(AveragedCoefficients {
        lambda_bar: lbar,
        lambda_bar_prime,
        c10,
        c01,
    })
}

/// `lambda = Lambda sqrt(y)` on the slow or the fast state, with its y1-derivative.
pub fn sqrt_lambda(coef: Vec<f64>, on_fast: bool) -> (VecFn, VecFn) {
    let c1 = coef.clone();
    let lam: VecFn = Arc::new(move |y1: f64, y2: f64| {
        let y = if on_fast { y2 } else { y1 };
        let s = y.max(0.0).sqrt();
        c1.iter().map(|c| c * s).collect()
    });
    let c2 = coef;
    let dlam: VecFn = Arc::new(move |y1: f64, _y2: f64| {
        if on_fast {
            vec![0.0; c2.len()]
        } else {
            let s = 0.5 / y1.max(1e-300).sqrt();
            c2.iter().map(|c| c * s).collect()
        }
    });
    (lam, dlam)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cir_fast_model(lam: f64, rho: f64, beta: f64, m: f64) -> MarketModel {
        let (l, dl) = sqrt_lambda(vec![lam], true);
        MarketModel::new(MarketSpec {
            d: 1,
            n: 1,
            lambda: l,
            dlambda_dy1: Some(dl),
            sigma: Arc::new(|_, _| DMatrix::identity(1, 1)),
            rho_s: vec![0.0],
            rho_f: vec![rho],
            rho_sf: 0.0,
            slow: SlowFactor::frozen(1.0),
            fast: FastFactor::cir(1.0, m, beta).unwrap(),
            widder: Arc::new(WidderMeasure::power(2.0).unwrap()),
            v0: Arc::new(InitialUtility::power(2.0).unwrap()),
            sample_y1: vec![1.0],
            label: "test".into(),
        })
        .unwrap()
    }

    #[test]
    fn ou_density_is_gaussian() {
        let f = FastFactor::ou(1.0, 0.3, 0.8).unwrap();
        let inv = InvariantMeasure::new(&f).unwrap();
        assert!((inv.mass() - 1.0).abs() < 1e-8);
        let mean = inv.expect(|y| y);
        let var = inv.expect(|y| (y - mean) * (y - mean));
        assert!((mean - 0.3).abs() < 1e-6);
        assert!((var - 0.32).abs() < 1e-6);
        let y = 0.9;
        let g = (-(y - 0.3f64).powi(2) / (2.0 * 0.32)).exp() / (2.0 * std::f64::consts::PI * 0.32).sqrt();
        assert!((inv.density(y) - g).abs() < 1e-8);
    }

    #[test]
    fn cir_density_is_gamma() {
        let f = FastFactor::cir(1.0, 1.5, 0.6).unwrap();
        let inv = InvariantMeasure::new(&f).unwrap();
        assert!((inv.mass() - 1.0).abs() < 1e-8);
        assert!((inv.expect(|y| y) - 1.5).abs() < 1e-6);
        // Gamma(shape k = 2 m / beta^2, scale beta^2/2): variance m beta^2 / 2
        let var = inv.expect(|y| (y - 1.5) * (y - 1.5));
        assert!((var - 1.5 * 0.36 / 2.0).abs() < 1e-6);
        assert!(inv.lower > 0.0);
    }

    #[test]
    fn fokker_planck_weak_form() {
        // int (gamma p' + alpha^2/2 p'') dmu = 0 for polynomial p
        let f = FastFactor::cir(0.7, 1.2, 0.5).unwrap();
        let inv = InvariantMeasure::new(&f).unwrap();
        for k in 1..4 {
            let kf = k as f64;
            let r = inv.expect(|y| {
                let a = (f.alpha)(y);
                let p1 = kf * y.powi(k - 1);
                let p2 = if k >= 2 { kf * (kf - 1.0) * y.powi(k - 2) } else { 0.0 };
                (f.gamma)(y) * p1 + 0.5 * a * a * p2
            });
            assert!(r.abs() < 1e-6, "k={k} r={r}");
        }
    }

    #[test]
    fn frozen_invariant_is_point_mass() {
        let inv = InvariantMeasure::new(&FastFactor::frozen(0.4)).unwrap();
        assert_eq!(inv.point_mass(), Some(0.4));
        assert!((inv.expect(|y| y * y) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn cir_lambda_bar_and_phi() {
        let (lam, rho, beta, m) = (0.5, -0.4, 0.4, 1.0);
        let model = cir_fast_model(lam, rho, beta, m);
        let lb = lambda_bar(&model, 1.0);
        assert!((lb * lb - lam * lam * m).abs() < 1e-6);
        let sol = PoissonSolution::new(&model, 1.0).unwrap();
        for &y in &[0.6, 1.0, 1.4] {
            assert!((sol.phi_prime(y) - lam * lam).abs() < 1e-6, "y={y}");
            assert!((sol.phi(y) - lam * lam * (y - m)).abs() < 1e-6, "y={y}");
            assert!(sol.residual(y).abs() < 1e-5);
        }
        let c = averaged_coefficients(&model, 1.0).unwrap();
        assert!((c.c01 - rho * lam * lam * lam * beta * m).abs() < 1e-8);
        assert_eq!(c.c10, 0.0);
        assert_eq!(c.lambda_bar_prime, 0.0);
    }

    #[test]
    fn constant_lambda_has_zero_corrector() {
        let mut model = cir_fast_model(0.5, 0.3, 0.4, 1.0);
        model.lambda = Arc::new(|_, _| vec![0.7]);
        let c = averaged_coefficients(&model, 1.0).unwrap();
        assert!((c.lambda_bar - 0.7).abs() < 1e-14);
        assert!(c.c01.abs() < 1e-14);
        assert!(phi_prime(&model, 1.0, 0.9).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inconsistent_lambda_bar_rejected() {
        let model = cir_fast_model(0.5, 0.3, 0.4, 1.0);
        assert!(matches!(
            PoissonSolution::with_lambda_bar_sq(&model, 1.0, Some(0.3)),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn rescaling_fast_dynamics() {
        let model = cir_fast_model(0.5, -0.4, 0.4, 1.0);
        let base = averaged_coefficients(&model, 1.0).unwrap();
        for c in [0.1, 10.0] {
            let m2 = model.with_fast(model.fast.rescaled(c)).unwrap();
            let r = averaged_coefficients(&m2, 1.0).unwrap();
            assert!((r.lambda_bar - base.lambda_bar).abs() < 1e-10);
            assert!((r.lambda_bar_prime - base.lambda_bar_prime).abs() < 1e-10);
            assert!((r.c10 - base.c10).abs() < 1e-10);
            assert!((r.c01 - base.c01 / c.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_correlation_rejected() {
        let (l, dl) = sqrt_lambda(vec![0.5], true);
        let r = MarketModel::new(MarketSpec {
            d: 1,
            n: 1,
            lambda: l,
            dlambda_dy1: Some(dl),
            sigma: Arc::new(|_, _| DMatrix::identity(1, 1)),
            rho_s: vec![0.9],
            rho_f: vec![0.9],
            rho_sf: -0.9,
            slow: SlowFactor::cir(1.0, 1.0, 0.3).unwrap(),
            fast: FastFactor::cir(1.0, 1.0, 0.3).unwrap(),
            widder: Arc::new(WidderMeasure::power(2.0).unwrap()),
            v0: Arc::new(InitialUtility::power(2.0).unwrap()),
            sample_y1: vec![1.0],
            label: "bad".into(),
        });
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }
}
