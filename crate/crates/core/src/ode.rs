//! Explicit Runge-Kutta integrators.
//!
//! [`integrate`] is an adaptive Dormand-Prince 5(4) pair with PI-free standard step
//! control; every accepted step stores the state and its derivative so solutions can be
//! queried anywhere in range by cubic Hermite interpolation. [`rk4_step`] is the
//! fixed-step classical scheme used where a history grid is prescribed.

use crate::error::{Error, Result};

/// Right-hand side `dy/dt = f(t, y)`. Evaluation may fail (e.g. a QSS solve along the way).
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F> OdeSystem for (usize, F)
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        (self.1)(t, y, dy)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub first_step: Option<f64>,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            first_step: None,
            max_step: f64::INFINITY,
            max_steps: 2_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

/// Accepted steps of one integration, with derivative samples for Hermite interpolation.
#[derive(Debug, Clone, Default)]
pub struct OdeSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub dy: Vec<Vec<f64>>,
}

impl OdeSolution {
    pub fn last(&self) -> &[f64] {
        self.y.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().unwrap_or(&f64::NAN)
    }

    /// State at `t` (clamped to the solution span).
    pub fn sample(&self, t: f64) -> Vec<f64> {
        hermite_sample(&self.t, &self.y, &self.dy, t)
    }
}

pub(crate) fn hermite_sample(ts: &[f64], ys: &[Vec<f64>], dys: &[Vec<f64>], t: f64) -> Vec<f64> {
    let n = ts.len();
    assert!(n > 0, "empty solution");
    if t <= ts[0] || n == 1 {
        return ys[0].clone();
    }
    if t >= ts[n - 1] {
        return ys[n - 1].clone();
    }
    let i = ts.partition_point(|&s| s <= t).saturating_sub(1).min(n - 2);
    let h = ts[i + 1] - ts[i];
    let s = (t - ts[i]) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    (0..ys[i].len())
        .map(|k| {
            h00 * ys[i][k] + h10 * h * dys[i][k] + h01 * ys[i + 1][k] + h11 * h * dys[i + 1][k]
        })
        .collect()
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate from `t0` to `t_end`, storing every accepted step.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &mut S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<OdeSolution> {
    integrate_until(sys, t0, y0, t_end, opts, |_, _| false).map(|(sol, _)| sol)
}

/// As [`integrate`], but stops early once `stop(t, y)` returns true after an accepted step.
/// The flag reports whether the stop condition fired.
pub fn integrate_until<S, F>(
    sys: &mut S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    mut stop: F,
) -> Result<(OdeSolution, bool)>
where
    S: OdeSystem + ?Sized,
    F: FnMut(f64, &[f64]) -> bool,
{
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y0.len(),
        });
    }
    if !(t_end >= t0) {
        return Err(Error::InvalidArgument(format!(
            "integration end {t_end} precedes start {t0}"
        )));
    }
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    sys.rhs(t0, &y, &mut f0)
        .map_err(|e| fail(t0, format!("initial derivative: {e}")))?;
    if f0.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(fail(t0, "non-finite initial state or derivative".into()));
    }
    let mut sol = OdeSolution {
        t: vec![t0],
        y: vec![y.clone()],
        dy: vec![f0.clone()],
    };
    if t_end == t0 {
        return Ok((sol, false));
    }

    let span = t_end - t0;
    let mut h = opts
        .first_step
        .unwrap_or_else(|| initial_step(&y, &f0, opts, span))
        .min(opts.max_step)
        .min(span);
    let h_min = 1e-14 * span.max(t0.abs()).max(1.0);
    let mut t = t0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut steps = 0usize;

    while t < t_end {
        if steps >= opts.max_steps {
            return Err(fail(t, format!("exceeded {} steps", opts.max_steps)));
        }
        steps += 1;
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        k[0].copy_from_slice(&f0);
        let mut stage_ok = true;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                ytmp[i] = acc;
            }
            let (_, after) = k.split_at_mut(s);
            if sys.rhs(t + C[s] * h, &ytmp, &mut after[0]).is_err()
                || after[0].iter().any(|v| !v.is_finite())
            {
                stage_ok = false;
                break;
            }
            if s == 6 {
                ynew.copy_from_slice(&ytmp);
            }
        }
        if !stage_ok {
            h *= 0.25;
            if h < h_min {
                return Err(fail(t, "right-hand side failed at every trial step".into()));
            }
            continue;
        }
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (s, ks) in k.iter().enumerate() {
                e += E[s] * ks[i];
            }
            e *= h;
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            y.copy_from_slice(&ynew);
            f0.copy_from_slice(&k[6]);
            sol.t.push(t);
            sol.y.push(y.clone());
            sol.dy.push(f0.clone());
            if stop(t, &y) {
                return Ok((sol, true));
            }
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h * fac).min(opts.max_step);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            if h < h_min {
                return Err(fail(
                    t,
                    format!("step size underflow (error ratio {err:e})"),
                ));
            }
        }
    }
    Ok((sol, false))
}

fn initial_step(y: &[f64], f: &[f64], opts: &OdeOptions, span: f64) -> f64 {
    let n = y.len().max(1) as f64;
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(span * 0.01).max(1e-10 * span)
}

fn fail(t: f64, reason: String) -> Error {
    Error::IntegratorFailure { t, reason }
}

/// One classical fourth-order Runge-Kutta step; returns the new state.
pub fn rk4_step<S: OdeSystem + ?Sized>(sys: &mut S, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.rhs(t, y, &mut k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    sys.rhs(t + h, &tmp, &mut k4)?;
    let out: Vec<f64> = (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(fail(t + h, "non-finite state in fixed step".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> (usize, impl FnMut(f64, &[f64], &mut [f64]) -> Result<()>) {
        (1, |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[0];
            Ok(())
        })
    }

    #[test]
    fn exponential_decay_to_tolerance() {
        let mut sys = decay();
        let sol = integrate(&mut sys, 0.0, &[1.0], 5.0, &OdeOptions::default()).unwrap();
        assert!((sol.last()[0] - (-5.0f64).exp()).abs() < 1e-9);
        assert_eq!(sol.t_end(), 5.0);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let mut sys = (2, |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        });
        let tp = 2.0 * std::f64::consts::PI;
        let sol = integrate(&mut sys, 0.0, &[1.0, 0.0], tp, &OdeOptions::default()).unwrap();
        assert!((sol.last()[0] - 1.0).abs() < 1e-7);
        let mid = sol.sample(tp / 4.0);
        assert!(mid[0].abs() < 1e-6, "{mid:?}");
    }

    #[test]
    fn early_stop_fires() {
        let mut sys = decay();
        let (sol, stopped) = integrate_until(
            &mut sys,
            0.0,
            &[1.0],
            100.0,
            &OdeOptions::default(),
            |_, y| y[0] < 0.01,
        )
        .unwrap();
        assert!(stopped);
        assert!(sol.t_end() < 100.0);
    }

    #[test]
    fn rk4_fourth_order() {
        let run = |h: f64| {
            let mut sys = decay();
            let mut y = vec![1.0];
            let steps = (1.0 / h).round() as usize;
            for i in 0..steps {
                y = rk4_step(&mut sys, i as f64 * h, &y, h).unwrap();
            }
            (y[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn failing_rhs_reports_time() {
        let mut sys = (1, |t: f64, _y: &[f64], dy: &mut [f64]| {
            if t > 1.0 {
                Err(Error::Eval("boom".into()))
            } else {
                dy[0] = 1.0;
                Ok(())
            }
        });
        let err = integrate(&mut sys, 0.0, &[0.0], 2.0, &OdeOptions::default()).unwrap_err();
        match err {
            Error::IntegratorFailure { t, .. } => assert!((t - 1.0).abs() < 1e-6),
            other => panic!("{other:?}"),
        }
    }
}
