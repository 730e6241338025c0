//! Bulk quasi-steady state `R_b(x^s, x^b*) = 0`, the QSS drift `v(x^s)` and the
//! sensitivity `∂x^b*/∂x^s = −J⁻¹ ∂R_b/∂x_s`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{condition_number, max_abs, Lu};
use crate::system::{Blocks, SystemSpec};

#[derive(Debug, Clone, Copy)]
pub struct QssOptions {
    /// Absolute tolerance on `‖R_b‖∞`.
    pub tol: f64,
    pub max_iter: usize,
    /// Random restarts used to check root uniqueness when no guess is supplied.
    pub restarts: usize,
    pub uniqueness_tol: f64,
    pub seed: u64,
}

impl Default for QssOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
            restarts: 8,
            uniqueness_tol: 1e-6,
            seed: 0x5eed,
        }
    }
}

const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;

/// Bulk QSS at one subnetwork state, with everything the memory formulas need.
#[derive(Debug, Clone)]
pub struct QssSolution {
    pub x_sub: Vec<f64>,
    pub x_bulk_star: Vec<f64>,
    /// Full state `(x^s, x^b*)` in species order.
    pub full_state: Vec<f64>,
    /// Bulk-bulk Jacobian `J_{bb'} = ∂R_b/∂x_b'` at the root.
    pub jac_bb: DMatrix<f64>,
    /// `∂x_b*/∂x_s`, n_bulk × n_sub.
    pub sensitivity: DMatrix<f64>,
    /// All Jacobian blocks at the root.
    pub blocks: Blocks,
    /// QSS drift `v = R_s(x^s, x^b*)`.
    pub v: Vec<f64>,
    pub residual_norm: f64,
    pub condition: f64,
}

/// Newton with Armijo backtracking on `‖R_b‖²`.
fn newton(spec: &SystemSpec, x_sub: &[f64], guess: &[f64], opts: &QssOptions) -> Result<Vec<f64>> {
    let part = spec.partition();
    let nb = part.n_bulk();
    let mut full = part.scatter(x_sub, guess);
    let mut rate = vec![0.0; spec.n()];
    let residual = |full: &[f64], rate: &mut [f64]| -> Result<Vec<f64>> {
        spec.drift_into(full, rate)?;
        Ok(part.bulk().iter().map(|&i| rate[i]).collect())
    };
    let mut r = residual(&full, &mut rate)?;
    let mut rnorm = max_abs(&r);
    for _ in 0..opts.max_iter {
        if rnorm <= opts.tol {
            return Ok(part.gather_bulk(&full));
        }
        let jac = spec.jacobian_full(&full)?;
        let jbb = spec.split(&jac).bb;
        let lu = Lu::new(&jbb)?;
        let step = lu.solve_vec(&DVector::from_column_slice(&r))?;
        let f0: f64 = r.iter().map(|v| v * v).sum();
        let xb0 = part.gather_bulk(&full);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xb: Vec<f64> = (0..nb).map(|k| xb0[k] - lambda * step[k]).collect();
            part.scatter_into(x_sub, &xb, &mut full);
            if let Ok(rn) = residual(&full, &mut rate) {
                let f1: f64 = rn.iter().map(|v| v * v).sum();
                if f1 <= (1.0 - 2.0 * ARMIJO * lambda) * f0 {
                    accepted = Some(rn);
                    break;
                }
            }
            lambda *= BACKTRACK;
        }
        let step_norm = lambda * max_abs(step.as_slice());
        match accepted {
            Some(rn) => r = rn,
            None => {
                // No sufficient decrease: the root is resolved to roundoff if the
                // Newton step is at machine precision.
                part.scatter_into(x_sub, &xb0, &mut full);
                let scale = max_abs(&xb0).max(1.0);
                if max_abs(step.as_slice()) <= 1e-13 * scale && rnorm <= 1e3 * opts.tol {
                    return Ok(xb0);
                }
                return Err(Error::QssNonConvergence {
                    iterations: opts.max_iter,
                    residual: rnorm,
                });
            }
        }
        rnorm = max_abs(&r);
        if step_norm <= 1e-15 * max_abs(&part.gather_bulk(&full)).max(1.0)
            && rnorm <= 1e3 * opts.tol
        {
            return Ok(part.gather_bulk(&full));
        }
    }
    if rnorm <= opts.tol {
        return Ok(part.gather_bulk(&full));
    }
    Err(Error::QssNonConvergence {
        iterations: opts.max_iter,
        residual: rnorm,
    })
}

fn finish(spec: &SystemSpec, x_sub: &[f64], xb: Vec<f64>) -> Result<QssSolution> {
    let part = spec.partition();
    let full = part.scatter(x_sub, &xb);
    let rate = spec.drift_full(&full)?;
    let residual_norm = max_abs(&part.gather_bulk(&rate));
    let blocks = spec.blocks(&full)?;
    let lu = Lu::new(&blocks.bb)?;
    let sensitivity = -lu.solve_mat(&blocks.bs)?;
    ensure_finite(sensitivity.as_slice(), "QSS sensitivity")?;
    Ok(QssSolution {
        x_sub: x_sub.to_vec(),
        v: part.gather_sub(&rate),
        x_bulk_star: xb,
        full_state: full,
        jac_bb: blocks.bb.clone(),
        condition: condition_number(&blocks.bb),
        sensitivity,
        blocks,
        residual_norm,
    })
}

/// Solve the bulk QSS at `x_sub`.
///
/// With a guess, a single warm-started Newton solve is performed. Without one, Newton
/// starts from the model's default point and the root is cross-checked against random
/// restarts in the physiological box; a second distinct root is an error.
pub fn solve_qss(spec: &SystemSpec, x_sub: &[f64], guess: Option<&[f64]>) -> Result<QssSolution> {
    solve_qss_with(spec, x_sub, guess, &QssOptions::default())
}

pub fn solve_qss_with(
    spec: &SystemSpec,
    x_sub: &[f64],
    guess: Option<&[f64]>,
    opts: &QssOptions,
) -> Result<QssSolution> {
    if x_sub.len() != spec.n_sub() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_sub(),
            got: x_sub.len(),
        });
    }
    ensure_finite(x_sub, "subnetwork state")?;
    let part = spec.partition();
    if let Some(g) = guess {
        if g.len() != spec.n_bulk() {
            return Err(Error::DimensionMismatch {
                expected: spec.n_bulk(),
                got: g.len(),
            });
        }
        let xb = newton(spec, x_sub, g, opts)?;
        return finish(spec, x_sub, xb);
    }

    let default = part.gather_bulk(spec.default_point());
    let bulk_box: Vec<(f64, f64)> = part.bulk().iter().map(|&i| spec.phys_box()[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![default];
    for _ in 0..opts.restarts {
        starts.push(
            bulk_box
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect(),
        );
    }
    let mut root: Option<Vec<f64>> = None;
    let mut first_err = None;
    for start in &starts {
        match newton(spec, x_sub, start, opts) {
            Ok(xb) => match &root {
                None => root = Some(xb),
                Some(r) => {
                    let scale = max_abs(r).max(1.0);
                    let d = r
                        .iter()
                        .zip(&xb)
                        .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
                    if d > opts.uniqueness_tol * scale {
                        return Err(Error::MultipleQssRoots {
                            first: r.clone(),
                            second: xb,
                        });
                    }
                }
            },
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match root {
        Some(xb) => finish(spec, x_sub, xb),
        None => Err(first_err.unwrap_or(Error::QssNonConvergence {
            iterations: opts.max_iter,
            residual: f64::NAN,
        })),
    }
}

/// QSS drift `v(x^s) = R_s(x^s, x^b*(x^s))`.
pub fn qss_drift(spec: &SystemSpec, x_sub: &[f64]) -> Result<Vec<f64>> {
    Ok(solve_qss(spec, x_sub, None)?.v)
}

/// `∂x_b*/∂x_s` from linear solves `J·X = −∂R_b/∂x_s` at an existing QSS solution.
pub fn qss_sensitivity(
    spec: &SystemSpec,
    qss: &QssSolution,
    x_sub: &[f64],
) -> Result<DMatrix<f64>> {
    if x_sub.len() != spec.n_sub() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_sub(),
            got: x_sub.len(),
        });
    }
    let lu = Lu::new(&qss.jac_bb)?;
    lu.solve_mat(&(-&qss.blocks.bs))
}

/// Warm-started QSS solver that carries the previous root forward.
///
/// Each integration owns its own tracker; trackers are never shared between workers.
#[derive(Debug, Clone)]
pub struct QssTracker<'a> {
    spec: &'a SystemSpec,
    last: Option<Vec<f64>>,
    opts: QssOptions,
}

impl<'a> QssTracker<'a> {
    pub fn new(spec: &'a SystemSpec) -> Self {
        Self {
            spec,
            last: None,
            opts: QssOptions::default(),
        }
    }

    pub fn seeded(spec: &'a SystemSpec, x_bulk: Vec<f64>) -> Self {
        Self {
            spec,
            last: Some(x_bulk),
            opts: QssOptions::default(),
        }
    }

    pub fn spec(&self) -> &'a SystemSpec {
        self.spec
    }

    pub fn solve(&mut self, x_sub: &[f64]) -> Result<QssSolution> {
        let sol = match &self.last {
            Some(g) => match solve_qss_with(self.spec, x_sub, Some(g), &self.opts) {
                Ok(s) => s,
                // A warm start can fall outside Newton's basin after a large jump.
                Err(Error::QssNonConvergence { .. }) | Err(Error::SingularJacobian) => {
                    solve_qss_with(self.spec, x_sub, None, &self.opts)?
                }
                Err(e) => return Err(e),
            },
            None => solve_qss_with(self.spec, x_sub, None, &self.opts)?,
        };
        self.last = Some(sol.x_bulk_star.clone());
        Ok(sol)
    }
}
