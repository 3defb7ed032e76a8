//! Scalar root finding: Brent's method and geometric bracketing for
//! increasing functions.

use crate::error::{Error, Result};

/// Brent's method on a sign-changing bracket `[a, b]`.
///
/// Terminates when the bracket is below `xtol * (1 + |x|)` or an exact zero
/// is hit.
pub fn brent<F>(mut f: F, mut a: f64, mut b: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Range(format!(
            "brent: no sign change on [{a}, {b}] (f = {fa:.3e}, {fb:.3e})"
        )));
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol * (1.0 + b.abs());
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
    }
    Err(Error::numeric("brent: iteration budget exhausted", (c - b).abs(), xtol))
}

/// Find `[lo, hi]` with `f(lo) <= target <= f(hi)` for increasing `f`,
/// expanding geometrically from `start` with initial width `step`.
pub fn bracket_increasing<F>(
    mut f: F,
    target: f64,
    start: f64,
    step: f64,
    max_doublings: usize,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let f0 = f(start)?;
    if f0 == target {
        return Ok((start, start));
    }
    let dir = if f0 < target { 1.0 } else { -1.0 };
    let mut prev = start;
    let mut width = step;
    for _ in 0..max_doublings {
        let next = start + dir * width;
        let fv = f(next)?;
        if !fv.is_finite() {
            return Err(Error::Range(format!(
                "bracketing left the finite range of the function at {next}"
            )));
        }
        if (dir > 0.0 && fv >= target) || (dir < 0.0 && fv <= target) {
            return Ok(if dir > 0.0 { (prev, next) } else { (next, prev) });
        }
        prev = next;
        width *= 2.0;
    }
    Err(Error::Range(format!(
        "no bracket for target {target} within {max_doublings} doublings"
    )))
}
