//! Run configuration: the TOML schema, built-in presets, validation and
//! assembly of the market model.
//!
//! A config is a TOML document carrying `schema = 1`; unknown keys are
//! rejected. When `preset` names a built-in preset the file is laid over it
//! key by key, except that a `[model]` table in the file replaces the
//! preset's model as a whole.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factor_models::{FastFactor, MarketModel, MarketSpec, SlowFactor, VecFn};
use crate::power_exact::{ExactPower, Leg, PowerModelParams};
use crate::widder_core::{Atom, Density, InitialUtility, WidderMeasure, U_QUAD_TOL};

pub const SCHEMA_VERSION: u32 = 1;

/// Built-in presets by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("cir-power", include_str!("../../presets/cir-power.toml")),
    ("ou-linear", include_str!("../../presets/ou-linear.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Validation(format!("unknown preset '{name}' (known: {})", known.join(", ")))
        })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// closed-form optimizer of the benchmark
    Exact,
    #[default]
    Approx,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub converge: ConvergeSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub plot: PlotSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Brownian motions driving the assets
    pub d: usize,
    /// assets; defaults to `d`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub utility: UtilitySpec,
    pub lambda: LambdaSpec,
    /// constant volatility matrix, `n` rows of length `d`; identity if absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub rho_s: Vec<f64>,
    pub rho_f: Vec<f64>,
    #[serde(default)]
    pub rho_sf: f64,
    pub slow: FactorSpec,
    pub fast: FactorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum UtilitySpec {
    Power {
        gamma: f64,
    },
    /// Atoms `[z, weight]`, an optional uniform density and constant `c0`;
    /// the datum is anchored by `V(0, x_ref) = v_ref`.
    Widder {
        atoms: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c0: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        density: Option<UniformDensity>,
        x_ref: f64,
        #[serde(default)]
        v_ref: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformDensity {
    pub lower: f64,
    pub upper: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaSpec {
    /// `slow sqrt(y1) + fast sqrt(y2)`
    Sqrt { slow: Vec<f64>, fast: Vec<f64> },
    /// `constant + slow y1 + fast y2`
    Affine {
        constant: Vec<f64>,
        slow: Vec<f64>,
        fast: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FactorSpec {
    Cir { rate: f64, mean: f64, vol: f64 },
    Ou { rate: f64, mean: f64, vol: f64 },
    Frozen { at: f64 },
}

impl FactorSpec {
    fn center(&self) -> f64 {
        match *self {
            FactorSpec::Cir { mean, .. } | FactorSpec::Ou { mean, .. } => mean,
            FactorSpec::Frozen { at } => at,
        }
    }

    fn frozen_at(&self) -> Option<f64> {
        match *self {
            FactorSpec::Frozen { at } => Some(at),
            _ => None,
        }
    }

    fn slow(&self) -> Result<SlowFactor> {
        match *self {
            FactorSpec::Cir { rate, mean, vol } => SlowFactor::cir(rate, mean, vol),
            FactorSpec::Ou { rate, mean, vol } => SlowFactor::ou(rate, mean, vol),
            FactorSpec::Frozen { at } => Ok(SlowFactor::frozen(at)),
        }
    }

    fn fast(&self) -> Result<FastFactor> {
        match *self {
            FactorSpec::Cir { rate, mean, vol } => FastFactor::cir(rate, mean, vol),
            FactorSpec::Ou { rate, mean, vol } => FastFactor::ou(rate, mean, vol),
            FactorSpec::Frozen { at } => Ok(FastFactor::frozen(at)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub delta: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            t: vec![1.0],
            x: vec![1.0],
            y1: vec![1.0],
            y2: vec![1.0],
            delta: vec![0.01],
            epsilon: vec![0.01],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// quadrature tolerance for the leading-order surface
    pub quad: f64,
    /// relative finite-difference step
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            quad: U_QUAD_TOL,
            fd_step: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSection {
    /// `(t, x, y1, y2)`
    pub point: [f64; 4],
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// values used for both scales in the two-factor table
    pub multiscale: Vec<f64>,
    /// Gauss-Legendre points for the parametrisation check
    pub n_quad: usize,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        let dec = vec![1e-1, 1e-2, 1e-3, 1e-4];
        ConvergeSection {
            point: [1.0, 1.0, 1.0, 1.0],
            deltas: dec.clone(),
            epsilons: dec,
            multiscale: vec![1e-2, 1e-3],
            n_quad: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub policy: PolicyKind,
    /// `(delta, eps)` pairs; the grid's product when empty
    pub pairs: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y20: Option<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub policy: PolicyKind,
    pub delta: f64,
    pub epsilon: f64,
    /// write terminal states of every path
    pub keep_paths: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            x0: 1.0,
            y10: None,
            y20: None,
            horizon: 1.0,
            dt: 1e-3,
            n_paths: 1000,
            policy: PolicyKind::Approx,
            delta: 0.01,
            epsilon: 0.01,
            keep_paths: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub x: String,
    /// series columns; every other numeric column when empty
    pub y: Vec<String>,
    /// split series by the values of this column
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub output: String,
    pub log_x: bool,
    pub log_y: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection {
            input: None,
            x: "x".into(),
            y: Vec::new(),
            group: None,
            output: "plot.svg".into(),
            log_x: false,
            log_y: false,
            title: None,
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol_quad: Option<f64>,
    pub format: Option<Format>,
    pub out_dir: Option<String>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    Error::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table, root: bool) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !(root && k == "model") => overlay(b, t, false),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parse a config document, resolve its preset and validate it.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        // the document on its own: syntax, unknown keys and types, with lines
        let own: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        own.check_schema()?;
        let cfg = match &own.preset {
            None => own,
            Some(name) => {
                let base_text = preset_text(name)?;
                let mut base: toml::Table = base_text.parse().map_err(|e| toml_error(base_text, &e))?;
                let top: toml::Table = text.parse().map_err(|e| toml_error(text, &e))?;
                overlay(&mut base, top, true);
                toml::Value::Table(base)
                    .try_into::<RunConfig>()
                    .map_err(|e| Error::Parse {
                        line: 0,
                        message: format!("after applying preset '{name}': {}", e.message().trim()),
                    })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_toml(preset_text(name)?)?;
        cfg.preset = Some(name.to_string());
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("config does not serialise: {e}")))
    }

    fn check_schema(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported schema {} (this build reads schema {SCHEMA_VERSION})",
                self.schema
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(q) = o.tol_quad {
            self.tolerances.quad = q;
        }
        if let Some(f) = o.format {
            self.output.format = f;
        }
        if let Some(d) = &o.out_dir {
            self.output.dir = Some(d.clone());
        }
        self.validate()
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .or_else(|| self.preset.clone())
            .unwrap_or_else(|| "custom".into())
    }

    /// Canonical JSON of the config without the output directory, which
    /// does not affect any result.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output.dir = None;
        serde_json::to_string(&c).expect("config serialises to JSON")
    }

    /// SHA-256 of [`RunConfig::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.check_schema()?;
        if self.model.is_none() {
            return Err(Error::Validation("config has neither a [model] table nor a preset".into()));
        }
        let g = &self.grid;
        for (name, v) in [
            ("t", &g.t),
            ("x", &g.x),
            ("y1", &g.y1),
            ("y2", &g.y2),
            ("delta", &g.delta),
            ("epsilon", &g.epsilon),
        ] {
            strictly_increasing(&format!("grid.{name}"), v)?;
        }
        if g.t[0] < 0.0 {
            return Err(Error::Validation(format!("grid.t must be non-negative (got {})", g.t[0])));
        }
        positive("grid.delta", &g.delta)?;
        positive("grid.epsilon", &g.epsilon)?;
        let tol = &self.tolerances;
        positive("tolerances.quad", &[tol.quad])?;
        positive("tolerances.fd_step", &[tol.fd_step])?;
        let c = &self.converge;
        positive("converge.deltas", &c.deltas)?;
        positive("converge.epsilons", &c.epsilons)?;
        positive("converge.multiscale", &c.multiscale)?;
        if c.n_quad == 0 {
            return Err(Error::Validation("converge.n_quad must be at least 1".into()));
        }
        if !(c.point[0] >= 0.0 && c.point.iter().all(|v| v.is_finite())) {
            return Err(Error::Validation(format!("converge.point {:?} must be finite with t >= 0", c.point)));
        }
        for p in &self.drift.pairs {
            positive("drift.pairs", p)?;
        }
        let s = &self.simulate;
        positive("simulate.horizon", &[s.horizon])?;
        positive("simulate.dt", &[s.dt])?;
        positive("simulate.x0", &[s.x0])?;
        if !(s.delta >= 0.0 && s.epsilon >= 0.0) {
            return Err(Error::Validation("simulate.delta and simulate.epsilon must be non-negative".into()));
        }
        if s.n_paths < 2 {
            return Err(Error::Validation("simulate.n_paths must be at least 2".into()));
        }
        Ok(())
    }
}

fn strictly_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Validation(format!("{name} must not be empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{name} has a non-finite entry")));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Validation(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

fn positive(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::Validation(format!("{name} must be non-empty and positive (got {v:?})")));
    }
    Ok(())
}

impl UtilitySpec {
    pub fn measure(&self) -> Result<WidderMeasure> {
        match self {
            UtilitySpec::Power { gamma } => WidderMeasure::power(*gamma),
            UtilitySpec::Widder { atoms, c0, density, .. } => {
                let atoms = atoms.iter().map(|a| Atom { z: a[0], weight: a[1] }).collect();
                let density = density.map(|d| Density::uniform(d.lower, d.upper, d.mass));
                WidderMeasure::new(atoms, density, *c0)
            }
        }
    }

    pub fn datum(&self, measure: Arc<WidderMeasure>) -> Result<InitialUtility> {
        match self {
            UtilitySpec::Power { gamma } => InitialUtility::power(*gamma),
            UtilitySpec::Widder { x_ref, v_ref, .. } => InitialUtility::from_measure(measure, *x_ref, *v_ref),
        }
    }

    /// Config form of an atomic measure; densities have no config form
    /// other than the uniform one they were built from.
    pub fn from_measure(m: &WidderMeasure, x_ref: f64, v_ref: f64) -> Result<UtilitySpec> {
        if m.density().is_some() {
            return Err(Error::Validation(
                "only measures built from atoms and c0 can be written back to a config".into(),
            ));
        }
        Ok(UtilitySpec::Widder {
            atoms: m.atoms().iter().map(|a| [a.z, a.weight]).collect(),
            c0: Some(m.c0()),
            density: None,
            x_ref,
            v_ref,
        })
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn lambda_fns(spec: &LambdaSpec, d: usize) -> Result<(VecFn, VecFn)> {
    let check = |name: &str, v: &[f64]| {
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::Validation(format!("model.lambda.{name} has length {} (expected d = {d})", v.len())))
        }
    };
    match spec.clone() {
        LambdaSpec::Sqrt { slow, fast } => {
            check("slow", &slow)?;
            check("fast", &fast)?;
            let (s1, f1, s2) = (slow.clone(), fast, slow);
            let lam: VecFn = Arc::new(move |y1: f64, y2: f64| {
                let (a, b) = (y1.max(0.0).sqrt(), y2.max(0.0).sqrt());
                s1.iter().zip(&f1).map(|(s, f)| s * a + f * b).collect()
            });
            let dlam: VecFn = Arc::new(move |y1: f64, _| {
                let a = 0.5 / y1.max(1e-300).sqrt();
                s2.iter().map(|s| s * a).collect()
            });
            Ok((lam, dlam))
        }
        LambdaSpec::Affine { constant, slow, fast } => {
            check("constant", &constant)?;
            check("slow", &slow)?;
            check("fast", &fast)?;
            let s2 = slow.clone();
            let lam: VecFn = Arc::new(move |y1: f64, y2: f64| {
                (0..constant.len()).map(|j| constant[j] + slow[j] * y1 + fast[j] * y2).collect()
            });
            let dlam: VecFn = Arc::new(move |_, _| s2.clone());
            Ok((lam, dlam))
        }
    }
}

impl ModelSection {
    pub fn assets(&self) -> usize {
        self.n.unwrap_or(self.d)
    }

    fn check_power_excluded(&self) -> Result<()> {
        if let UtilitySpec::Power { gamma } = self.utility {
            if gamma > 1.0 {
                let crit = gamma / (gamma - 1.0);
                for (name, rho) in [("rho_s", &self.rho_s), ("rho_f", &self.rho_f)] {
                    let r2 = norm_sq(rho);
                    if (r2 - crit).abs() <= 1e-12 * (1.0 + crit) {
                        return Err(Error::Validation(format!(
                            "|{name}|^2 = gamma/(gamma-1) = {crit} is the excluded case for power utility"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_sqrt_support(&self) -> Result<()> {
        if let LambdaSpec::Sqrt { slow, fast } = &self.lambda {
            for (name, coef, f) in [("slow", slow, &self.slow), ("fast", fast, &self.fast)] {
                let bad = match *f {
                    FactorSpec::Ou { .. } => true,
                    FactorSpec::Frozen { at } => at < 0.0,
                    FactorSpec::Cir { .. } => false,
                };
                if bad && coef.iter().any(|c| *c != 0.0) {
                    return Err(Error::Validation(format!(
                        "sqrt market price of risk needs a non-negative {name} factor (CIR or frozen at y >= 0)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, label: &str) -> Result<MarketModel> {
        let d = self.d;
        if d == 0 {
            return Err(Error::Validation("model.d must be at least 1".into()));
        }
        let n = self.assets();
        if self.rho_s.len() != d || self.rho_f.len() != d {
            return Err(Error::Validation(format!("model.rho_s and model.rho_f must have length d = {d}")));
        }
        self.check_power_excluded()?;
        self.check_sqrt_support()?;
        let sigma = match &self.sigma {
            None if n == d => DMatrix::identity(d, d),
            None => {
                return Err(Error::Validation(format!(
                    "model.sigma is required when n = {n} differs from d = {d}"
                )))
            }
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Validation(format!("model.sigma must be {n} rows of length {d}")));
                }
                DMatrix::from_row_iterator(n, d, rows.iter().flatten().copied())
            }
        };
        let measure = Arc::new(self.utility.measure()?);
        let v0 = Arc::new(self.utility.datum(measure.clone())?);
        let (lambda, dlambda) = lambda_fns(&self.lambda, d)?;
        MarketModel::new(MarketSpec {
            d,
            n,
            lambda,
            dlambda_dy1: Some(dlambda),
            sigma: Arc::new(move |_, _| sigma.clone()),
            rho_s: self.rho_s.clone(),
            rho_f: self.rho_f.clone(),
            rho_sf: self.rho_sf,
            slow: self.slow.slow()?,
            fast: self.fast.fast()?,
            widder: measure,
            v0,
            sample_y1: vec![self.slow.center()],
            label: label.to_string(),
        })
    }

    pub fn slow_frozen_at(&self) -> Option<f64> {
        self.slow.frozen_at()
    }

    pub fn fast_frozen_at(&self) -> Option<f64> {
        self.fast.frozen_at()
    }

    pub fn slow_center(&self) -> f64 {
        self.slow.center()
    }

    pub fn fast_center(&self) -> f64 {
        self.fast.center()
    }
}

/// Parameters of the closed-form power benchmark matching a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub slow: Option<PowerModelParams>,
    pub fast: Option<PowerModelParams>,
}

impl Benchmark {
    /// The benchmark exists for power utility, `lambda = Ls sqrt(y1) + Lf sqrt(y2)`,
    /// `sigma = I`, uncorrelated factors, unit-rate CIR (or frozen, unloaded)
    /// factors and legs on disjoint assets. The error names the first
    /// condition that fails.
    pub fn detect(m: &ModelSection) -> std::result::Result<Benchmark, String> {
        let UtilitySpec::Power { gamma } = m.utility else {
            return Err("utility is not a power utility".into());
        };
        let LambdaSpec::Sqrt { slow, fast } = &m.lambda else {
            return Err("market price of risk is not of square-root form".into());
        };
        if m.assets() != m.d {
            return Err("volatility matrix is not square".into());
        }
        if let Some(s) = &m.sigma {
            let identity = s
                .iter()
                .enumerate()
                .all(|(i, r)| r.iter().enumerate().all(|(j, v)| *v == if i == j { 1.0 } else { 0.0 }));
            if !identity {
                return Err("volatility matrix is not the identity".into());
            }
        }
        if m.rho_sf != 0.0 {
            return Err("slow and fast factors are correlated".into());
        }
        let leg = |name: &str, f: &FactorSpec, coef: &[f64], rho: &[f64]| -> std::result::Result<Option<PowerModelParams>, String> {
            match *f {
                FactorSpec::Cir { rate, mean, vol } => {
                    if rate != 1.0 {
                        return Err(format!("{name} CIR factor has mean-reversion rate {rate}, not 1"));
                    }
                    PowerModelParams::new(gamma, coef.to_vec(), mean, vol, rho.to_vec(), 1.0)
                        .map(Some)
                        .map_err(|e| e.to_string())
                }
                FactorSpec::Frozen { .. } if coef.iter().all(|c| *c == 0.0) => Ok(None),
                FactorSpec::Frozen { .. } => Err(format!("frozen {name} factor loads on the market price of risk")),
                FactorSpec::Ou { .. } => Err(format!("{name} factor is not CIR")),
            }
        };
        let b = Benchmark {
            slow: leg("slow", &m.slow, slow, &m.rho_s)?,
            fast: leg("fast", &m.fast, fast, &m.rho_f)?,
        };
        b.exact(0.01, 0.01).map_err(|e| e.to_string())?;
        Ok(b)
    }

    /// Exact value function at scales `(delta, eps)`; the fast leg uses the
    /// quasi-stationary branch.
    pub fn exact(&self, delta: f64, epsilon: f64) -> Result<ExactPower> {
        let slow = self.slow.as_ref().map(|p| Leg::transient(p.with_delta(delta))).transpose()?;
        let fast = self
            .fast
            .as_ref()
            .map(|p| Leg::quasi_stationary(p.with_delta(1.0 / epsilon)))
            .transpose()?;
        ExactPower::new(slow, fast)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(c.preset.as_deref(), Some(*name));
            c.model.as_ref().unwrap().build(name).unwrap();
        }
    }

    #[test]
    fn cir_power_is_the_separable_benchmark() {
        use crate::power_exact::benchmarks;
        let c = RunConfig::preset("cir-power").unwrap();
        let b = Benchmark::detect(c.model.as_ref().unwrap()).unwrap();
        assert_eq!(b.slow.unwrap(), benchmarks::separable_slow().with_delta(1.0));
        assert_eq!(b.fast.unwrap(), benchmarks::separable_fast().with_delta(1.0));
        let o = RunConfig::preset("ou-linear").unwrap();
        assert!(Benchmark::detect(o.model.as_ref().unwrap()).is_err());
    }

    #[test]
    fn negative_tolerance_rejected() {
        let text = "schema = 1\npreset = \"cir-power\"\n[tolerances]\nquad = -1e-9\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Validation(m)) if m.contains("quad")));
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "schema = 1\npreset = \"cir-power\"\n\n[grid]\nx = [1.0]\nxx = [2.0]\n";
        match RunConfig::from_toml(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 6, "{message}");
                assert!(message.contains("xx"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = "schema = 1\n[grid\n";
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Parse { line: 2, .. })));
        let tagged = "schema = 1\n[model]\nd = 1\nrho_s = [0.0]\nrho_f = [0.0]\n[model.utility]\nkind = \"power\"\ngamma = 2.0\nalpha = 1.0\n";
        assert!(matches!(RunConfig::from_toml(tagged), Err(Error::Parse { .. })));
    }

    #[test]
    fn excluded_case_cited() {
        let mut c = RunConfig::preset("cir-power").unwrap();
        let m = c.model.as_mut().unwrap();
        m.rho_s = vec![1.0, 1.0];
        let e = m.build("x").unwrap_err();
        assert!(matches!(&e, Error::Validation(s) if s.contains("excluded case")), "{e}");
    }

    #[test]
    fn schema_and_grids_checked() {
        assert!(matches!(
            RunConfig::from_toml("schema = 2\npreset = \"cir-power\"\n"),
            Err(Error::Validation(_))
        ));
        let text = "schema = 1\npreset = \"cir-power\"\n[grid]\nx = [2.0, 1.0]\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Validation(m)) if m.contains("grid.x")));
        assert!(matches!(RunConfig::from_toml("schema = 1\n"), Err(Error::Validation(_))));
        assert!(matches!(
            RunConfig::from_toml("schema = 1\npreset = \"nope\"\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overlay_keeps_unset_keys() {
        let text = "schema = 1\npreset = \"cir-power\"\nseed = 9\n[grid]\nx = [1.0]\n";
        let c = RunConfig::from_toml(text).unwrap();
        let p = RunConfig::preset("cir-power").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.grid.x, vec![1.0]);
        assert_eq!(c.grid.t, p.grid.t);
        assert_eq!(c.model, p.model);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::preset("ou-linear").unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut moved = c.clone();
        moved.output.dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), c.hash());
        let mut reseeded = c.clone();
        reseeded.apply(&Overrides { seed: Some(c.seed + 1), ..Overrides::default() }).unwrap();
        assert_ne!(reseeded.hash(), c.hash());
    }

    #[test]
    fn measure_round_trip() {
        let m = WidderMeasure::new(
            vec![Atom { z: 0.5, weight: 1.0 }, Atom { z: 1.5, weight: 0.25 }],
            None,
            Some(2.0),
        )
        .unwrap();
        let spec = UtilitySpec::from_measure(&m, 1.0, 0.0).unwrap();
        let back = spec.measure().unwrap();
        assert_eq!(back.atoms(), m.atoms());
        assert_eq!(back.c0(), m.c0());
        let with_density = UtilitySpec::Widder {
            atoms: vec![],
            c0: None,
            density: Some(UniformDensity { lower: 0.2, upper: 1.0, mass: 1.0 }),
            x_ref: 1.0,
            v_ref: 0.0,
        };
        assert!(UtilitySpec::from_measure(&with_density.measure().unwrap(), 1.0, 0.0).is_err());
    }
}
