//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use fpp_core::cli_harness::{run_subcommand, write_report, Resolved, RunConfig, Subcommand};
use fpp_core::drift_audit::{
    drift_report, simulate_paths, theta_scan, ApproxPolicy, ExactOptimizer, FeedbackPolicy, GeneratorInput,
    SimulationConfig, State, ValueFunction,
};
use fpp_core::expansion::ValueSurface;
use fpp_core::factor_models::PoissonSolution;
use fpp_core::numerics::fit::d1_central4;
use fpp_core::power_exact::{
    benchmarks, error_study, fast_reparam_study, multiscale_study, Branch, ExactPower, PowerModelParams,
};
use fpp_core::widder_core::{InitialUtility, TimeMonotone, WidderMeasure};
use fpp_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DECADES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
const TWO_TERM: (f64, f64) = (0.85, 1.15);
const ONE_TERM: (f64, f64) = (0.4, 0.6);

type Check = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn hjb_anchor() -> Result<Outcome> {
    let start = Instant::now();
    let e = ExactPower::slow_only(benchmarks::slow())?;
    let mut worst = 0.0f64;
    for t in linspace(0.1, 2.0, 10) {
        for x in linspace(0.5, 5.0, 10) {
            for y in linspace(0.2, 3.0, 10) {
                worst = worst.max(e.hjb_residual(t, x, y, 1.0)?);
            }
        }
    }
    let el = start.elapsed();
    Ok(Outcome {
        pass: worst <= 1e-6 && el < Duration::from_secs(5),
        detail: format!("max relative residual {worst:.2e} on 10x10x10 (<= 1e-6), {:.2}s (< 5s)", secs(el)),
    })
}

fn slow_rate() -> Result<Outcome> {
    let start = Instant::now();
    let s = error_study(&benchmarks::slow(), &DECADES, 1.0, 1.0, 1.0)?;
    let el = start.elapsed();
    let two = s.two_term.map_or(f64::NAN, |f| f.slope);
    let one = s.one_term.map_or(f64::NAN, |f| f.slope);
    Ok(Outcome {
        pass: within(two, TWO_TERM) && within(one, ONE_TERM) && el < Duration::from_secs(30),
        detail: format!(
            "two-term slope {two:.4} in [0.85, 1.15], one-term slope {one:.4} in [0.4, 0.6], {:.2}s",
            secs(el)
        ),
    })
}

fn fast_rate() -> Result<Outcome> {
    let start = Instant::now();
    let s = fast_reparam_study(&benchmarks::separable_fast(), &DECADES, 1.0, 1.5, 1.0)?;
    let el = start.elapsed();
    let two = s.quasi.two_term.map_or(f64::NAN, |f| f.slope);
    let one = s.quasi.one_term.map_or(f64::NAN, |f| f.slope);
    Ok(Outcome {
        pass: within(two, TWO_TERM) && el < Duration::from_secs(30),
        detail: format!(
            "two-term slope {two:.4} in [0.85, 1.15] (one-term {one:.4}, reported), {:.2}s",
            secs(el)
        ),
    })
}

fn multiscale() -> Result<Outcome> {
    let start = Instant::now();
    let (t, x, y1, y2) = benchmarks::SEPARABLE_POINT;
    let grid = [1e-2, 1e-3];
    let tab = multiscale_study(
        &benchmarks::separable_slow(),
        &benchmarks::separable_fast(),
        &grid,
        &grid,
        t,
        x,
        y1,
        y2,
    )?;
    let el = start.elapsed();
    Ok(Outcome {
        pass: tab.spread < 3.0 && el < Duration::from_secs(60),
        detail: format!("error/(delta+eps) spread {:.3} (< 3) over 4 pairs, {:.2}s", tab.spread, secs(el)),
    })
}

fn widder_core() -> Result<Outcome> {
    let gamma: f64 = 2.0;
    let u = TimeMonotone::new(
        Arc::new(WidderMeasure::power(gamma)?),
        Arc::new(InitialUtility::power(gamma)?),
    );
    let big = (1.0 - gamma) / gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_v, mut worst_d) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let t: f64 = rng.random_range(0.0..2.0);
        let x: f64 = rng.random_range(0.3..5.0);
        let want = gamma.powf(gamma) * x.powf(1.0 - gamma) / (1.0 - gamma) * (-big * t / 2.0).exp();
        worst_v = worst_v.max(rel(u.u_eval(t, x)?, want));
        let d = u.u_derivatives(t, x, 4)?.as_array();
        let h = 1e-3 * x;
        for (k, want) in d.iter().enumerate().skip(1) {
            let fd = d1_central4(|z| u.u_derivatives(t, z, 4).map_or(f64::NAN, |s| s.as_array()[k - 1]), x, h);
            worst_d = worst_d.max(rel(fd, *want));
        }
    }
    Ok(Outcome {
        pass: worst_v <= 1e-8 && worst_d <= 1e-6,
        detail: format!(
            "power u vs closed form {worst_v:.2e} (<= 1e-8), derivative stack vs differences {worst_d:.2e} (<= 1e-6), 50 points"
        ),
    })
}

fn averaging() -> Result<Outcome> {
    let p = benchmarks::separable_fast();
    let model = ExactPower::fast_only(&p, 1e-2, Branch::QuasiStationary)?.market_model()?;
    let sol = PoissonSolution::new(&model, 1.0)?;
    let lnorm = p.lambda_norm_sq();
    let lb_err = (sol.lambda_bar_sq - lnorm * p.m0).abs();
    let (mut phi_err, mut res) = (0.0f64, 0.0f64);
    for y in linspace(0.2, 3.0, 15) {
        phi_err = phi_err.max((sol.phi_prime(y) - lnorm).abs());
        res = res.max(sol.residual(y).abs());
    }
    Ok(Outcome {
        pass: lb_err <= 1e-6 && phi_err <= 1e-6 && res <= 1e-5,
        detail: format!(
            "|lbar^2 - |L|^2 m| {lb_err:.2e} (<= 1e-6), |phi' - |L|^2| {phi_err:.2e} (<= 1e-6), Poisson residual {res:.2e} (<= 1e-5)"
        ),
    })
}

fn corrections() -> Result<Outcome> {
    let ps = benchmarks::slow();
    let pf = benchmarks::separable_fast();
    let slow = ExactPower::slow_only(ps.clone())?.value_surface()?;
    let fast = ExactPower::fast_only(&pf, 1e-2, Branch::QuasiStationary)?.value_surface()?;
    let big = |g: f64| (1.0 - g) / g;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut worst = 0.0f64;
    for &(t, x, y) in &[(1.0, 1.0, 1.0), (0.3, 0.8, 2.5), (2.0, 3.0, 0.4)] {
        // slow: lambda = L sqrt(y), kappa = beta sqrt(y)
        let g2 = big(ps.gamma_ra).powi(2);
        let v0 = slow.v0_eval(t, x, y)?.0;
        let l = ps.lambda[0];
        let want = 0.25 * t * t * y * ps.beta * l * ps.rho[0] * l * l * g2 * v0;
        worst = worst.max(rel(slow.v10_eval(t, x, y)?, want));
        // fast: c01 = (rho.L) |L|^2 beta m against the CIR invariant law
        let g2 = big(pf.gamma_ra).powi(2);
        let v0 = fast.v0_eval(t, x, 1.0)?.0;
        let c01 = dot(&pf.rho, &pf.lambda) * pf.lambda_norm_sq() * pf.beta * pf.m0;
        let want = -0.5 * t * c01 * g2 * v0;
        worst = worst.max(rel(fast.v01_eval(t, x, 1.0)?, want));
    }
    let mut uncorrelated = ps.clone();
    uncorrelated.rho = vec![0.0];
    let flat = ExactPower::slow_only(uncorrelated)?.value_surface()?;
    let zeros = [
        slow.v10_eval(0.0, 1.3, 1.0)?,
        fast.v01_eval(0.0, 1.3, 1.0)?,
        flat.v10_eval(1.0, 1.3, 1.0)?,
        slow.v01_eval(1.0, 1.3, 1.0)?,
    ];
    let all_zero = zeros.iter().all(|v| *v == 0.0);
    Ok(Outcome {
        pass: worst <= 1e-8 && all_zero,
        detail: format!(
            "v10, v01 vs closed forms {worst:.2e} (<= 1e-8); exact zeros at t=0, rho_s=0, y2-free lambda: {}",
            if all_zero { "yes" } else { "no" }
        ),
    })
}

fn separable_surface() -> Result<ValueSurface> {
    ExactPower::separable(benchmarks::separable_slow(), &benchmarks::separable_fast(), 1e-2)?.value_surface()
}

fn natural_parametrization() -> Result<Outcome> {
    let s = separable_surface()?;
    let mut worst = 0.0f64;
    for &t in &[0.5, 1.0, 2.0] {
        for &x in &[0.5, 1.0, 1.5, 2.0, 3.0] {
            for &y1 in &[0.5, 1.0, 2.0] {
                let (ds, df) = s.natural_parametrization_check(t, x, y1, 16)?;
                let v10 = s.v10_eval(t, x, y1)?;
                let v01 = s.v01_eval(t, x, y1)?;
                worst = worst.max(ds / (1.0 + v10.abs())).max(df / (1.0 + v01.abs()));
            }
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-8,
        detail: format!("quadrature identity discrepancy {worst:.2e} (<= 1e-8) on 45 states"),
    })
}

fn heat_equation() -> Result<Outcome> {
    let s = separable_surface()?;
    let mut worst = 0.0f64;
    for &t in &[0.5, 1.0, 2.0] {
        for &x in &[0.5, 1.0, 2.0, 3.0] {
            for &y1 in &[0.5, 2.0] {
                let xi = s.xi_of(t, x, y1)?;
                worst = worst.max(s.heat_residual(t, xi, y1, 1e-3 * t.min(1.0), 1e-2)?);
            }
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-4,
        detail: format!("max relative heat residual {worst:.2e} (<= 1e-4) on 24 states"),
    })
}

fn drift_grid() -> Vec<State> {
    let mut g = Vec::new();
    for &t in &[0.2, 1.0] {
        for &x in &[0.7, 2.0] {
            for &y1 in &[0.5, 1.5] {
                for &y2 in &[0.6, 1.4] {
                    g.push(State::new(t, x, y1, y2));
                }
            }
        }
    }
    g
}

fn drift_audit() -> Result<Outcome> {
    let start = Instant::now();
    let (ps, pf) = (benchmarks::separable_slow(), benchmarks::separable_fast());
    let grid = drift_grid();

    let mut exact_worst = 0.0f64;
    for &(d, e) in &[(1e-1, 1e-1), (1e-2, 1e-2), (1e-3, 1e-3)] {
        let v = ExactPower::separable(ps.with_delta(d), &pf, e)?;
        let m = v.market_model()?;
        let pol = ExactOptimizer(v.clone());
        let g = GeneratorInput {
            value_fn: &v,
            policy: &pol,
            model: &m,
            delta: d,
            epsilon: e,
        };
        exact_worst = exact_worst.max(drift_report(&g, &grid)?.sup_rel_theta);
    }

    let base = ExactPower::separable(ps.clone(), &pf, 1e-2)?;
    let model = base.market_model()?;
    let surf = Arc::new(ValueSurface::new(Arc::new(model.clone())));
    let make = |d: f64, e: f64| -> Result<(Box<dyn ValueFunction>, Box<dyn FeedbackPolicy>)> {
        Ok((
            Box::new(ExactPower::separable(ps.with_delta(d), &pf, e)?),
            Box::new(ApproxPolicy {
                surface: surf.clone(),
                delta: d,
                epsilon: e,
            }),
        ))
    };
    let scan = theta_scan(&model, &grid, &[(1e-2, 1e-2), (1e-3, 1e-3), (1e-4, 1e-4)], &make)?;

    let slow: PowerModelParams = benchmarks::slow();
    let v = ExactPower::slow_only(slow.clone())?;
    let m = v.market_model()?;
    let cfg = SimulationConfig {
        x0: 1.0,
        y10: 1.0,
        y20: 1.0,
        horizon: 1.0,
        dt: 1e-4,
        n_paths: 100_000,
        seed: 2024,
        delta: slow.delta,
        epsilon: 0.0,
        keep_paths: false,
    };
    let (_, mc) = simulate_paths(&m, &ExactOptimizer(v.clone()), &v, &cfg)?;
    let z = mc.mean / mc.std_err;
    let el = start.elapsed();

    let bounded = scan.growth <= 3.0;
    Ok(Outcome {
        pass: exact_worst <= 1e-6 && bounded && z.abs() <= 3.0 && mc.n_flagged == 0 && el < Duration::from_secs(300),
        detail: format!(
            "exact-optimizer sup rel Theta {exact_worst:.2e} (<= 1e-6); approx ratio growth {:.3} (<= 3; literal spread {:.1}, squared spread {:.2}); MC z = {z:.3} (|z| <= 3, n = {}, dt = 1e-4, T = 1); {:.1}s (< 300s)",
            scan.growth,
            scan.spread,
            scan.spread_sq,
            mc.n_used,
            secs(el)
        ),
    })
}

fn reproducibility() -> Result<Outcome> {
    let run = Resolved::new(RunConfig::preset("cir-power")?)?;
    let root = std::env::temp_dir().join(format!("fpp-acceptance-{}", std::process::id()));
    let mut identical = true;
    let mut files = 0;
    for cmd in [Subcommand::Eval, Subcommand::Drift, Subcommand::Simulate] {
        let mut outputs = Vec::new();
        for threads in [1, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| fpp_core::Error::Validation(e.to_string()))?;
            let dir = root.join(format!("{}-{threads}", cmd.as_str()));
            let report = pool.install(|| run_subcommand(&run, cmd))?;
            let paths = write_report(&run, cmd, &report, &dir)?;
            let bytes: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap_or_default()).collect();
            outputs.push(bytes);
        }
        files += outputs[0].len();
        identical &= outputs[0] == outputs[1];
    }
    let _ = std::fs::remove_dir_all(&root);
    Ok(Outcome {
        pass: identical && files > 0,
        detail: format!("{files} CSV files from eval, drift and simulate compared across 1 and 4 threads: {}", if identical { "bit-identical" } else { "differ" }),
    })
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("hjb residual anchor", hjb_anchor),
        ("slow-factor rate", slow_rate),
        ("fast-factor rate", fast_rate),
        ("multiscale boundedness", multiscale),
        ("widder core", widder_core),
        ("averaging", averaging),
        ("correction formulas", corrections),
        ("natural parametrization", natural_parametrization),
        ("heat-equation residuals", heat_equation),
        ("drift audit", drift_audit),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let o = f().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        if !o.pass {
            failed += 1;
        }
        println!("acceptance {:>2} {:<24} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria pass", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
