//! Configuration loading, presets, subcommands and result files.
//!
//! Every subcommand turns a [`Resolved`] run into a [`Report`] of tables;
//! [`write_report`] stores them as CSV (or JSON) files whose header records
//! the config hash, the seed and the full resolved config. All parallel
//! work collects in input order, so files are identical for any thread
//! count.

pub mod config;
pub mod plot;
pub mod table;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

pub use config::{Benchmark, Format, Overrides, PlotSection, PolicyKind, RunConfig, PRESETS};
pub use table::{Cell, Table};

use crate::drift_audit::{
    drift_report, simulate_paths, ApproxPolicy, DriftReport, ExactOptimizer, ExpansionValue, FdSteps,
    FeedbackPolicy, GeneratorInput, SimulationConfig, State, ThetaScan, ValueFunction, ZeroPolicy,
};
use crate::error::{Error, Result};
use crate::expansion::ValueSurface;
use crate::factor_models::MarketModel;
use crate::numerics::fit::LineFit;
use crate::portfolio::{pi_approx, pinv_sigma_t};
use crate::power_exact::{error_study, fast_reparam_study, multiscale_study, RateStudy};

/// Two-term slope window reported by `converge`.
pub const TWO_TERM_SLOPE: (f64, f64) = (0.85, 1.15);
/// Bound on `max/min` of `error / (delta + eps)` in the two-factor table.
pub const MULTISCALE_SPREAD: f64 = 3.0;
/// Tolerances of the model-free checks run by `converge`.
pub const PARAM_CHECK_TOL: f64 = 1e-8;
pub const HEAT_TOL: f64 = 1e-4;
pub const POISSON_TOL: f64 = 1e-5;
/// Path dumps above this size come with a warning.
pub const PATH_DUMP_WARN: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Eval,
    Converge,
    Portfolio,
    Drift,
    Simulate,
    Poisson,
    Plot,
}

impl Subcommand {
    pub const ALL: [Subcommand; 7] = [
        Subcommand::Eval,
        Subcommand::Converge,
        Subcommand::Portfolio,
        Subcommand::Drift,
        Subcommand::Simulate,
        Subcommand::Poisson,
        Subcommand::Plot,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subcommand::Eval => "eval",
            Subcommand::Converge => "converge",
            Subcommand::Portfolio => "portfolio",
            Subcommand::Drift => "drift",
            Subcommand::Simulate => "simulate",
            Subcommand::Poisson => "poisson",
            Subcommand::Plot => "plot",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subcommand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown subcommand '{s}'")))
    }
}

/// A validated config with its model assembled.
pub struct Resolved {
    pub config: RunConfig,
    pub model: Arc<MarketModel>,
    pub surface: Arc<ValueSurface>,
    pub benchmark: Option<Benchmark>,
    /// why no closed form applies, when it does not
    pub no_oracle: Option<String>,
    pub notes: Vec<String>,
}

impl Resolved {
    /// Build the model and check the grids against its state domains.
    /// Grids over a frozen factor collapse to the frozen state.
    pub fn new(mut config: RunConfig) -> Result<Resolved> {
        config.validate()?;
        let m = config.model.clone().expect("validated config has a model");
        let model = Arc::new(m.build(&config.label())?);
        let mut notes = Vec::new();
        if let Some(at) = m.slow_frozen_at() {
            if config.grid.y1 != [at] {
                notes.push(format!("slow factor is frozen; grid.y1 set to [{at}]"));
                config.grid.y1 = vec![at];
            }
        }
        if let Some(at) = m.fast_frozen_at() {
            if config.grid.y2 != [at] {
                notes.push(format!("fast factor is frozen; grid.y2 set to [{at}]"));
                config.grid.y2 = vec![at];
            }
        }
        let g = &config.grid;
        let lower = model.v0.domain_lower;
        if let Some(x) = g.x.iter().find(|x| !(**x > lower)) {
            return Err(Error::Validation(format!("grid.x value {x} is outside the datum domain (x > {lower})")));
        }
        for (name, ys, dom, frozen) in [
            ("y1", &g.y1, model.slow.domain, model.slow.is_frozen()),
            ("y2", &g.y2, model.fast.domain, model.fast.is_frozen()),
        ] {
            if let Some(y) = ys.iter().find(|y| !frozen && !dom.contains(**y)) {
                return Err(Error::Validation(format!(
                    "grid.{name} value {y} is outside the factor domain ({}, {})",
                    dom.lower, dom.upper
                )));
            }
        }
        let surface = Arc::new(ValueSurface::with_tol(model.clone(), config.tolerances.quad));
        let (benchmark, no_oracle) = match Benchmark::detect(&m) {
            Ok(b) => (Some(b), None),
            Err(why) => (None, Some(why)),
        };
        Ok(Resolved {
            config,
            model,
            surface,
            benchmark,
            no_oracle,
            notes,
        })
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    fn states(&self) -> Vec<State> {
        let g = &self.config.grid;
        let mut out = Vec::with_capacity(g.t.len() * g.x.len() * g.y1.len() * g.y2.len());
        for &t in &g.t {
            for &x in &g.x {
                for &y1 in &g.y1 {
                    for &y2 in &g.y2 {
                        out.push(State::new(t, x, y1, y2));
                    }
                }
            }
        }
        out
    }

    fn pairs(&self) -> Vec<(f64, f64)> {
        let g = &self.config.grid;
        g.delta
            .iter()
            .flat_map(|&d| g.epsilon.iter().map(move |&e| (d, e)))
            .collect()
    }

    fn fd_steps(&self) -> FdSteps {
        let h = self.config.tolerances.fd_step;
        FdSteps { t: h, x: h, y1: h, y2: h }
    }

    fn require_benchmark(&self, what: &str) -> Result<&Benchmark> {
        self.benchmark.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "{what} needs a closed-form benchmark, and this model has none: {}",
                self.no_oracle.as_deref().unwrap_or("unknown reason")
            ))
        })
    }

    /// Value function for drift and simulation: the benchmark when there is
    /// one, otherwise the expansion.
    fn value_fn(&self, delta: f64, epsilon: f64) -> Result<Box<dyn ValueFunction>> {
        Ok(match &self.benchmark {
            Some(b) => Box::new(b.exact(delta, epsilon)?),
            None => Box::new(ExpansionValue {
                surface: self.surface.clone(),
                delta,
                epsilon,
                steps: self.fd_steps(),
            }),
        })
    }

    fn policy(&self, kind: PolicyKind, delta: f64, epsilon: f64) -> Result<Box<dyn FeedbackPolicy>> {
        Ok(match kind {
            PolicyKind::Exact => Box::new(ExactOptimizer(
                self.require_benchmark("the exact policy")?.exact(delta, epsilon)?,
            )),
            PolicyKind::Approx => Box::new(ApproxPolicy {
                surface: self.surface.clone(),
                delta,
                epsilon,
            }),
            PolicyKind::Zero => Box::new(ZeroPolicy),
        })
    }
}

/// Output of one subcommand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    /// extra files `(name, contents)`
    pub files: Vec<(String, String)>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

pub fn run_subcommand(run: &Resolved, cmd: Subcommand) -> Result<Report> {
    let mut r = match cmd {
        Subcommand::Eval => eval(run),
        Subcommand::Converge => converge(run),
        Subcommand::Portfolio => portfolio(run),
        Subcommand::Drift => drift(run),
        Subcommand::Simulate => simulate(run),
        Subcommand::Poisson => poisson(run),
        Subcommand::Plot => plot_cmd(run),
    }?;
    let mut notes = run.notes.clone();
    notes.append(&mut r.notes);
    r.notes = notes;
    Ok(r)
}

/// Header lines for a table file.
pub fn file_meta(run: &Resolved, cmd: Subcommand, table: &str) -> Vec<(String, String)> {
    vec![
        ("fpp".into(), cmd.as_str().into()),
        ("table".into(), table.into()),
        ("label".into(), run.config.label()),
        ("config_sha256".into(), run.hash()),
        ("seed".into(), run.config.seed.to_string()),
        ("config".into(), run.config.canonical_json()),
    ]
}

/// Write every table (and extra file) of `report` into `dir`.
pub fn write_report(run: &Resolved, cmd: Subcommand, report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    let write = |p: &Path, body: &str| {
        std::fs::write(p, body).map_err(|e| Error::Io(format!("cannot write {}: {e}", p.display())))
    };
    for t in &report.tables {
        let meta = file_meta(run, cmd, &t.name);
        let (ext, body) = match run.config.output.format {
            Format::Csv => ("csv", t.to_csv(&meta)?),
            Format::Json => ("json", t.to_json(&meta)),
        };
        let p = dir.join(format!("{}.{ext}", t.name));
        write(&p, &body)?;
        out.push(p);
    }
    for (name, body) in &report.files {
        let p = dir.join(name);
        write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}

pub fn output_dir(run: &Resolved) -> PathBuf {
    PathBuf::from(run.config.output.dir.clone().unwrap_or_else(|| "out".into()))
}

fn nan() -> Cell {
    Cell::Num(f64::NAN)
}

fn eval(run: &Resolved) -> Result<Report> {
    let s = &run.surface;
    let jobs: Vec<((f64, f64), State)> = run
        .pairs()
        .into_iter()
        .flat_map(|p| run.states().into_iter().map(move |st| (p, st)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&((d, e), st)| -> Result<Vec<Cell>> {
            let r = s.approx_value(st.t, st.x, st.y1, st.y2, d, e)?;
            let (_, ds) = s.v0_eval(st.t, st.x, st.y1)?;
            let v2 = s.v2_eval(st.t, st.x, st.y1, st.y2)?;
            let datum = run.model.v0.value_at(st.x)?;
            let exact = match &run.benchmark {
                Some(b) => b.exact(d, e)?.value(st.t, st.x, st.y1, st.y2)?,
                None => f64::NAN,
            };
            Ok(vec![
                st.t.into(),
                st.x.into(),
                st.y1.into(),
                st.y2.into(),
                d.into(),
                e.into(),
                datum.into(),
                r.v0.into(),
                r.v10.into(),
                r.v01.into(),
                v2.into(),
                r.combined.into(),
                ds.d1.into(),
                ds.d2.into(),
                ds.d3.into(),
                ds.d4.into(),
                exact.into(),
                (exact - r.combined).into(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new(
        "surface",
        &[
            "t", "x", "y1", "y2", "delta", "epsilon", "datum", "v0", "v10", "v01", "v2", "combined", "v0_x",
            "v0_xx", "v0_xxx", "v0_xxxx", "exact", "error",
        ],
    );
    rows.into_iter().for_each(|r| t.push(r));
    let mut notes = Vec::new();
    if let Some(why) = &run.no_oracle {
        notes.push(format!("exact column is NaN: no closed form ({why})"));
    }
    Ok(Report {
        tables: vec![t],
        notes,
        ..Report::default()
    })
}

fn fit_cells(f: &Option<LineFit>) -> (Cell, Cell) {
    match f {
        Some(f) => (f.slope.into(), f.points.into()),
        None => (nan(), 0usize.into()),
    }
}

fn study_table(name: &str, studies: &[(&str, &RateStudy)]) -> Table {
    let mut t = Table::new(
        name,
        &["branch", "scale", "exact", "v0", "correction", "one_term_error", "two_term_error"],
    );
    for (branch, s) in studies {
        for r in &s.rows {
            t.push(vec![
                (*branch).into(),
                r.scale.into(),
                r.exact.into(),
                r.v0.into(),
                r.correction.into(),
                r.one_term_error.into(),
                r.two_term_error.into(),
            ]);
        }
    }
    t
}

fn summary_table() -> Table {
    Table::new("converge_summary", &["study", "quantity", "value", "points", "lower", "upper", "status"])
}

fn push_slope(t: &mut Table, study: &str, q: &str, f: &Option<LineFit>, window: Option<(f64, f64)>) {
    let (v, n) = fit_cells(f);
    let (lo, hi, status) = match (window, f) {
        (Some((lo, hi)), Some(f)) => (lo.into(), hi.into(), (f.slope >= lo && f.slope <= hi).into()),
        (Some((lo, hi)), None) => (lo.into(), hi.into(), false.into()),
        (None, _) => (nan(), nan(), "report".into()),
    };
    t.push(vec![study.into(), q.into(), v, n, lo, hi, status]);
}

fn converge(run: &Resolved) -> Result<Report> {
    let c = &run.config.converge;
    let [t, x, y1, y2] = c.point;
    let Some(b) = &run.benchmark else {
        return converge_properties(run);
    };
    let mut rep = Report::default();
    let mut sum = summary_table();
    sum.push(vec!["oracle".into(), "closed_form".into(), nan(), 0usize.into(), nan(), nan(), "report".into()]);
    if let Some(ps) = &b.slow {
        let s = error_study(ps, &c.deltas, t, x, y1)?;
        push_slope(&mut sum, "slow", "one_term_slope", &s.one_term, None);
        push_slope(&mut sum, "slow", "two_term_slope", &s.two_term, Some(TWO_TERM_SLOPE));
        rep.notes.extend(s.warnings.iter().map(|w| format!("slow study: {w}")));
        rep.tables.push(study_table("converge_slow", &[("transient", &s)]));
    }
    if let Some(pf) = &b.fast {
        let f = fast_reparam_study(pf, &c.epsilons, t, x, y2)?;
        push_slope(&mut sum, "fast", "one_term_slope", &f.quasi.one_term, None);
        push_slope(&mut sum, "fast", "two_term_slope", &f.quasi.two_term, Some(TWO_TERM_SLOPE));
        push_slope(&mut sum, "fast_literal", "two_term_slope", &f.literal.two_term, None);
        sum.push(vec![
            "fast".into(),
            "lambda_bar_sq_error".into(),
            (f.lambda_bar_sq - f.lambda_bar_sq_expected).abs().into(),
            1usize.into(),
            nan(),
            nan(),
            "report".into(),
        ]);
        rep.notes.extend(f.quasi.warnings.iter().map(|w| format!("fast study: {w}")));
        rep.tables.push(study_table(
            "converge_fast",
            &[("quasi_stationary", &f.quasi), ("literal", &f.literal)],
        ));
    }
    if let (Some(ps), Some(pf)) = (&b.slow, &b.fast) {
        let m = multiscale_study(ps, pf, &c.multiscale, &c.multiscale, t, x, y1, y2)?;
        let mut tab = Table::new("converge_multiscale", &["delta", "epsilon", "exact", "approx", "error", "ratio"]);
        for r in &m.rows {
            tab.push(vec![
                r.delta.into(),
                r.epsilon.into(),
                r.exact.into(),
                r.approx.into(),
                r.error.into(),
                r.ratio.into(),
            ]);
        }
        sum.push(vec![
            "multiscale".into(),
            "ratio_spread".into(),
            m.spread.into(),
            m.rows.len().into(),
            nan(),
            MULTISCALE_SPREAD.into(),
            (m.spread < MULTISCALE_SPREAD).into(),
        ]);
        rep.tables.push(tab);
    }
    rep.tables.insert(0, sum);
    Ok(rep)
}

/// Checks that need no closed form: corrections vanish at `t = 0`, the
/// parametrisation quadrature, the heat equation in `(t, xi)` and the
/// Poisson plug-back.
fn converge_properties(run: &Resolved) -> Result<Report> {
    let s = &run.surface;
    let g = &run.config.grid;
    let nq = run.config.converge.n_quad;
    let mut pts = Vec::new();
    for &t in &g.t {
        for &x in &g.x {
            for &y1 in &g.y1 {
                pts.push((t, x, y1));
            }
        }
    }
    let rows = pts
        .par_iter()
        .map(|&(t, x, y1)| -> Result<Vec<Vec<Cell>>> {
            let row = |check: &str, v: f64, tol: f64| -> Vec<Cell> {
                vec![check.into(), t.into(), x.into(), y1.into(), v.into(), tol.into(), (v <= tol).into()]
            };
            let mut out = Vec::new();
            if t == 0.0 {
                out.push(row("v10_at_t0", s.v10_eval(t, x, y1)?.abs(), 0.0));
                out.push(row("v01_at_t0", s.v01_eval(t, x, y1)?.abs(), 0.0));
            } else {
                let (ds, df) = s.natural_parametrization_check(t, x, y1, nq)?;
                let v10 = s.v10_eval(t, x, y1)?;
                let v01 = s.v01_eval(t, x, y1)?;
                out.push(row("param_slow", ds / (1.0 + v10.abs()), PARAM_CHECK_TOL));
                out.push(row("param_fast", df / (1.0 + v01.abs()), PARAM_CHECK_TOL));
                let ht = 1e-3 * t.min(1.0);
                let xi = s.xi_of(t, x, y1)?;
                out.push(row("heat_residual", s.heat_residual(t, xi, y1, ht, 1e-2)?, HEAT_TOL));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tab = Table::new("converge_properties", &["check", "t", "x", "y1", "value", "tolerance", "status"]);
    rows.into_iter().flatten().for_each(|r| tab.push(r));
    for &y1 in &g.y1 {
        let (_, sol) = s.averaged(y1)?;
        let worst = g
            .y2
            .iter()
            .map(|&y2| sol.residual(y2).abs())
            .fold(0.0f64, f64::max);
        tab.push(vec![
            "poisson_residual".into(),
            nan(),
            nan(),
            y1.into(),
            worst.into(),
            POISSON_TOL.into(),
            (worst <= POISSON_TOL).into(),
        ]);
    }
    let mut sum = summary_table();
    sum.push(vec!["oracle".into(), "none".into(), nan(), 0usize.into(), nan(), nan(), "no-oracle".into()]);
    let failed = tab.text_column("status").unwrap().iter().filter(|s| *s == "fail").count();
    sum.push(vec![
        "properties".into(),
        "failed_checks".into(),
        (failed as f64).into(),
        tab.len().into(),
        nan(),
        0.0.into(),
        (failed == 0).into(),
    ]);
    Ok(Report {
        tables: vec![sum, tab],
        notes: vec![format!(
            "no closed-form oracle ({}); rate fits skipped, property checks reported",
            run.no_oracle.as_deref().unwrap_or("unknown")
        )],
        ..Report::default()
    })
}

fn portfolio(run: &Resolved) -> Result<Report> {
    let s = &run.surface;
    let jobs: Vec<((f64, f64), State)> = run
        .pairs()
        .into_iter()
        .flat_map(|p| run.states().into_iter().map(move |st| (p, st)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&((d, e), st)| -> Result<Vec<Vec<Cell>>> {
            let p = pi_approx(s, st.t, st.x, st.y1, st.y2, d, e)?;
            let exact = match &run.benchmark {
                Some(b) => {
                    let ex = b.exact(d, e)?.optimal_exposure(st.t, st.x, st.y1, st.y2)?;
                    let pinv = pinv_sigma_t(s, st.y1, st.y2)?;
                    (pinv * nalgebra::DVector::from_vec(ex)).iter().copied().collect()
                }
                None => vec![f64::NAN; p.weights.len()],
            };
            Ok((0..p.weights.len())
                .map(|j| {
                    vec![
                        st.t.into(),
                        st.x.into(),
                        st.y1.into(),
                        st.y2.into(),
                        d.into(),
                        e.into(),
                        j.into(),
                        p.weights[j].into(),
                        p.myopic[j].into(),
                        p.slow_hedge[j].into(),
                        p.fast_hedge[j].into(),
                        exact[j].into(),
                        (p.weights[j] - exact[j]).into(),
                    ]
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new(
        "portfolio",
        &[
            "t", "x", "y1", "y2", "delta", "epsilon", "asset", "weight", "myopic", "slow_hedge", "fast_hedge",
            "exact_weight", "gap",
        ],
    );
    rows.into_iter().flatten().for_each(|r| t.push(r));
    Ok(Report {
        tables: vec![t],
        ..Report::default()
    })
}

fn drift(run: &Resolved) -> Result<Report> {
    let dcfg = &run.config.drift;
    let pairs: Vec<(f64, f64)> = if dcfg.pairs.is_empty() {
        run.pairs()
    } else {
        dcfg.pairs.iter().map(|p| (p[0], p[1])).collect()
    };
    let states = run.states();
    let mut reports: Vec<(f64, f64, DriftReport)> = Vec::new();
    for &(d, e) in &pairs {
        let v = run.value_fn(d, e)?;
        let p = run.policy(dcfg.policy, d, e)?;
        let g = GeneratorInput {
            value_fn: v.as_ref(),
            policy: p.as_ref(),
            model: &run.model,
            delta: d,
            epsilon: e,
        };
        reports.push((d, e, drift_report(&g, &states)?));
    }
    let scan = ThetaScan::from_reports(&reports);
    let mut sc = Table::new(
        "drift_scan",
        &["delta", "epsilon", "sup_abs_theta", "sup_rel_theta", "ratio", "ratio_sq"],
    );
    for r in &scan.rows {
        sc.push(vec![
            r.delta.into(),
            r.epsilon.into(),
            r.sup_abs_theta.into(),
            r.sup_rel_theta.into(),
            r.ratio.into(),
            r.ratio_sq.into(),
        ]);
    }
    let mut pt = Table::new("drift_points", &["delta", "epsilon", "t", "x", "y1", "y2", "theta", "relative"]);
    for (d, e, r) in &reports {
        for ((s, th), rel) in r.grid.iter().zip(&r.theta).zip(&r.relative) {
            pt.push(vec![
                (*d).into(),
                (*e).into(),
                s.t.into(),
                s.x.into(),
                s.y1.into(),
                s.y2.into(),
                (*th).into(),
                (*rel).into(),
            ]);
        }
    }
    let mut sum = Table::new("drift_summary", &["policy", "value_function", "spread", "growth", "spread_sq"]);
    let policy = format!("{:?}", dcfg.policy).to_lowercase();
    let vf = if run.benchmark.is_some() { "exact" } else { "expansion" };
    sum.push(vec![
        policy.into(),
        vf.into(),
        scan.spread.into(),
        scan.growth.into(),
        scan.spread_sq.into(),
    ]);
    Ok(Report {
        tables: vec![sum, sc, pt],
        ..Report::default()
    })
}

fn simulate(run: &Resolved) -> Result<Report> {
    let sc = &run.config.simulate;
    let m = run.config.model.as_ref().expect("validated config has a model");
    let cfg = SimulationConfig {
        x0: sc.x0,
        y10: sc.y10.unwrap_or_else(|| m.slow_center()),
        y20: sc.y20.unwrap_or_else(|| m.fast_center()),
        horizon: sc.horizon,
        dt: sc.dt,
        n_paths: sc.n_paths,
        seed: run.config.seed,
        delta: sc.delta,
        epsilon: sc.epsilon,
        keep_paths: sc.keep_paths,
    };
    let v = run.value_fn(sc.delta, sc.epsilon)?;
    let p = run.policy(sc.policy, sc.delta, sc.epsilon)?;
    let (ens, s) = simulate_paths(&run.model, p.as_ref(), v.as_ref(), &cfg)?;
    let mut t = Table::new(
        "simulate",
        &[
            "policy", "mean_increment", "std_err", "z", "n_paths", "n_used", "n_flagged", "dt", "horizon", "seed",
        ],
    );
    let z = if s.std_err > 0.0 { s.mean / s.std_err } else { 0.0 };
    t.push(vec![
        format!("{:?}", sc.policy).to_lowercase().into(),
        s.mean.into(),
        s.std_err.into(),
        z.into(),
        s.n_paths.into(),
        s.n_used.into(),
        s.n_flagged.into(),
        s.dt.into(),
        s.horizon.into(),
        s.rng_seed.into(),
    ]);
    let mut rep = Report {
        tables: vec![t],
        ..Report::default()
    };
    if s.n_flagged > 0 {
        rep.notes.push(format!("{} paths exceeded the explosion bound and were excluded", s.n_flagged));
    }
    if sc.keep_paths {
        if sc.n_paths > PATH_DUMP_WARN {
            rep.notes.push(format!("writing {} terminal states; the file will be large", sc.n_paths));
        }
        let mut pt = Table::new("paths", &["path", "x_T", "y1_T", "y2_T", "flagged"]);
        for (i, st) in ens.terminal.iter().enumerate() {
            let flagged = if ens.flagged.contains(&i) { "yes" } else { "no" };
            pt.push(vec![i.into(), st[0].into(), st[1].into(), st[2].into(), flagged.into()]);
        }
        rep.tables.push(pt);
    }
    Ok(rep)
}

fn poisson(run: &Resolved) -> Result<Report> {
    let g = &run.config.grid;
    let mut t = Table::new("poisson", &["y1", "y2", "lambda_bar_sq", "phi", "phi_prime", "residual"]);
    let mut sum = Table::new("poisson_summary", &["y1", "lambda_bar_sq", "max_abs_residual", "tolerance", "status"]);
    for &y1 in &g.y1 {
        let (_, sol) = run.surface.averaged(y1)?;
        let mut worst = 0.0f64;
        for &y2 in &g.y2 {
            let r = sol.residual(y2);
            worst = worst.max(r.abs());
            t.push(vec![
                y1.into(),
                y2.into(),
                sol.lambda_bar_sq.into(),
                sol.phi(y2).into(),
                sol.phi_prime(y2).into(),
                r.into(),
            ]);
        }
        sum.push(vec![
            y1.into(),
            sol.lambda_bar_sq.into(),
            worst.into(),
            POISSON_TOL.into(),
            (worst <= POISSON_TOL).into(),
        ]);
    }
    Ok(Report {
        tables: vec![sum, t],
        ..Report::default()
    })
}

fn plot_cmd(run: &Resolved) -> Result<Report> {
    let (name, svg) = render_plot(&run.config.plot)?;
    Ok(Report {
        files: vec![(name, svg)],
        ..Report::default()
    })
}

/// Chart a CSV written by another subcommand; returns `(file name, svg)`.
/// Needs no model, so the front end can call it directly.
pub fn render_plot(pc: &PlotSection) -> Result<(String, String)> {
    let input = pc
        .input
        .as_ref()
        .ok_or_else(|| Error::Validation("plot needs plot.input (a CSV written by another subcommand)".into()))?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::Io(format!("cannot read {input}: {e}")))?;
    let name = Path::new(input).file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let table = Table::from_csv(name, &text)?;
    let opts = plot::ChartOptions {
        title: pc.title.clone().unwrap_or_else(|| name.to_string()),
        x_label: pc.x.clone(),
        y_label: pc.y.join(", "),
        log_x: pc.log_x,
        log_y: pc.log_y,
    };
    let series = plot::series_from_table(&table, &pc.x, &pc.y, pc.group.as_deref(), &opts)?;
    Ok((pc.output.clone(), plot::line_chart(&series, &opts)))
}
