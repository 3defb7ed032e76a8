//! Least-squares fits and finite-difference stencils.

/// Ordinary least squares line `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        points: n,
    })
}

/// Slope of `log|err|` against `log h`, dropping points with `err <= floor`.
pub fn log_log_slope(h: &[f64], err: &[f64], floor: f64) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = h
        .iter()
        .zip(err)
        .filter(|(_, e)| e.abs() > floor && e.is_finite())
        .map(|(h, e)| (h.ln(), e.abs().ln()))
        .unzip();
    fit_line(&lx, &ly)
}

/// Fourth-order central first derivative.
pub fn d1_central4<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Fourth-order central second derivative.
pub fn d2_central4<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (-f(x - 2.0 * h) + 16.0 * f(x - h) - 30.0 * f(x) + 16.0 * f(x + h) - f(x + 2.0 * h))
        / (12.0 * h * h)
}

/// Fourth-order central third derivative (7-point stencil).
pub fn d3_central4<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x - 3.0 * h) - 8.0 * f(x - 2.0 * h) + 13.0 * f(x - h) - 13.0 * f(x + h)
        + 8.0 * f(x + 2.0 * h)
        - f(x + 3.0 * h))
        / (8.0 * h * h * h)
}

/// Fourth-order central fourth derivative (7-point stencil).
pub fn d4_central4<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (-f(x - 3.0 * h) + 12.0 * f(x - 2.0 * h) - 39.0 * f(x - h) + 56.0 * f(x)
        - 39.0 * f(x + h)
        + 12.0 * f(x + 2.0 * h)
        - f(x + 3.0 * h))
        / (6.0 * h.powi(4))
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
