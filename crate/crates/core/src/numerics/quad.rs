//! Quadrature: Gauss-Legendre rules and a globally adaptive Gauss-Kronrod
//! (7/15) integrator for vector-valued integrands.

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence, started from the
    /// Chebyshev-like asymptotic guess.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        if n == 1 {
            return GaussLegendre {
                nodes: vec![0.0],
                weights: vec![2.0],
            };
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (c + h * x, h * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Debug)]
struct Segment {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: Vec<f64>,
}

fn gk15<F>(f: &mut F, a: f64, b: f64, dim: usize, buf: &mut [f64]) -> Result<Segment>
where
    F: FnMut(f64, &mut [f64]) -> Result<()>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    f(c, buf)?;
    for i in 0..dim {
        kron[i] = WGK[7] * buf[i];
        gauss[i] = WG[3] * buf[i];
    }
    for j in 0..7 {
        let dx = h * XGK[j];
        for &x in &[c - dx, c + dx] {
            f(x, buf)?;
            for i in 0..dim {
                kron[i] += WGK[j] * buf[i];
                if j % 2 == 1 {
                    gauss[i] += WG[j / 2] * buf[i];
                }
            }
        }
    }
    let value: Vec<f64> = kron.iter().map(|k| k * h).collect();
    let error: Vec<f64> = kron
        .iter()
        .zip(&gauss)
        .map(|(k, g)| ((k - g) * h).abs())
        .collect();
    Ok(Segment { a, b, value, error })
}

/// Outcome of an adaptive integration.
#[derive(Clone, Debug)]
pub struct QuadResult {
    pub value: Vec<f64>,
    pub error: Vec<f64>,
    pub evaluations: usize,
}

/// Globally adaptive Gauss-Kronrod integration of a vector integrand.
///
/// Each component must satisfy `err <= max(abs_tol, rel_tol * |value|)`.
/// The integrand writes its `dim` components into the supplied buffer.
pub fn integrate_vec<F>(
    mut f: F,
    a: f64,
    b: f64,
    dim: usize,
    abs_tol: f64,
    rel_tol: f64,
    max_evals: usize,
) -> Result<QuadResult>
where
    F: FnMut(f64, &mut [f64]) -> Result<()>,
{
    if a > b {
        let mut r = integrate_vec(f, b, a, dim, abs_tol, rel_tol, max_evals)?;
        r.value.iter_mut().for_each(|v| *v = -*v);
        return Ok(r);
    }
    let mut buf = vec![0.0; dim];
    if a == b {
        return Ok(QuadResult {
            value: vec![0.0; dim],
            error: vec![0.0; dim],
            evaluations: 0,
        });
    }
    let mut segs = vec![gk15(&mut f, a, b, dim, &mut buf)?];
    let mut evals = 15;
    loop {
        let mut total = vec![0.0; dim];
        let mut err = vec![0.0; dim];
        for s in &segs {
            for i in 0..dim {
                total[i] += s.value[i];
                err[i] += s.error[i];
            }
        }
        let tol: Vec<f64> = total
            .iter()
            .map(|v| abs_tol.max(rel_tol * v.abs()))
            .collect();
        let worst_ratio = err
            .iter()
            .zip(&tol)
            .map(|(e, t)| e / t)
            .fold(0.0f64, f64::max);
        if worst_ratio <= 1.0 {
            return Ok(QuadResult {
                value: total,
                error: err,
                evaluations: evals,
            });
        }
        if evals + 30 > max_evals {
            let (e, t) = err
                .iter()
                .zip(&tol)
                .max_by(|x, y| (x.0 / x.1).total_cmp(&(y.0 / y.1)))
                .map(|(e, t)| (*e, *t))
                .unwrap_or((f64::NAN, f64::NAN));
            return Err(Error::numeric("adaptive quadrature did not converge", e, t));
        }
        // split the segment with the largest tolerance-normalised error
        let (idx, _) = segs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let r = s
                    .error
                    .iter()
                    .zip(&tol)
                    .map(|(e, t)| e / t)
                    .fold(0.0f64, f64::max);
                (k, r)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("nonempty segment list");
        let s = segs.swap_remove(idx);
        let mid = 0.5 * (s.a + s.b);
        if mid <= s.a || mid >= s.b {
            return Err(Error::numeric(
                "adaptive quadrature reached machine resolution",
                s.error.iter().cloned().fold(0.0, f64::max),
                abs_tol,
            ));
        }
        segs.push(gk15(&mut f, s.a, mid, dim, &mut buf)?);
        segs.push(gk15(&mut f, mid, s.b, dim, &mut buf)?);
        evals += 30;
    }
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let r = integrate_vec(
        |x, out| {
            out[0] = f(x)?;
            Ok(())
        },
        a,
        b,
        1,
        abs_tol,
        rel_tol,
        1_000_000,
    )?;
    Ok((r.value[0], r.error[0]))
}
