//! Fixed points, basins of attraction, Hopf scans, memory-amplitude maps and time-course
//! metrics.

use std::collections::BTreeSet;

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::channels::{integrate_zms_star_with, ChannelKey};
use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, Lu};
use crate::memory::{
    fmt_f64, full_system, integrate_full_with, integrate_qss_with, integrate_zmn_with,
    integrate_zms_with, memory_ingredients, qss_system, Method, Trajectory, ZmnOptions, ZmsSystem,
};
use crate::ode::{integrate_until, OdeOptions, OdeSystem};
use crate::qss::{solve_qss, QssTracker};
use crate::system::SystemSpec;

/// Which dynamics a fixed point or basin refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    Full,
    Qss,
    Zms,
}

impl SystemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemKind::Full => "full",
            SystemKind::Qss => "qss",
            SystemKind::Zms => "zms",
        }
    }

    pub fn method(&self) -> Method {
        match self {
            SystemKind::Full => Method::Full,
            SystemKind::Qss => Method::Qss,
            SystemKind::Zms => Method::Zms,
        }
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SystemKind::Full),
            "qss" => Ok(SystemKind::Qss),
            "zms" => Ok(SystemKind::Zms),
            other => Err(Error::InvalidArgument(format!(
                "method `{other}` is not one of full, qss, zms"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Saddle,
    Unstable,
}

impl Stability {
    fn classify(eigs: &[Complex<f64>]) -> Self {
        let pos = eigs.iter().filter(|e| e.re > 0.0).count();
        let neg = eigs.iter().filter(|e| e.re < 0.0).count();
        if pos == 0 {
            Stability::Stable
        } else if neg == 0 {
            Stability::Unstable
        } else {
            Stability::Saddle
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    /// Full state `(x^s, x^b)` in species order.
    pub full_state: Vec<f64>,
    pub sub: Vec<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
    pub stability: Stability,
    /// Residual of the dynamics the point belongs to (max norm).
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct FixedPointSet {
    pub kind: SystemKind,
    pub points: Vec<FixedPoint>,
}

impl FixedPointSet {
    pub fn stable(&self) -> impl Iterator<Item = &FixedPoint> {
        self.points
            .iter()
            .filter(|p| p.stability == Stability::Stable)
    }

    pub fn count(&self, s: Stability) -> usize {
        self.points.iter().filter(|p| p.stability == s).count()
    }
}

/// Radical-inverse (Halton) point `index` in `dim` dimensions, in `[0, 1)^dim`.
pub fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            let (mut f, mut r, mut i) = (1.0, 0.0, index);
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}

/// Damped Newton with Armijo backtracking; `None` when it stalls.
fn damped_newton(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    jac: &dyn Fn(&[f64]) -> Result<DMatrix<f64>>,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Option<(Vec<f64>, f64)> {
    let mut x = x0.to_vec();
    let mut r = f(&x).ok()?;
    let mut norm2: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iter {
        if max_norm(&r) <= tol {
            return Some((x, max_norm(&r)));
        }
        let j = jac(&x).ok()?;
        let dx = Lu::new(&j)
            .ok()?
            .solve_vec(&-DVector::from_column_slice(&r))
            .ok()?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = x
                .iter()
                .zip(dx.iter())
                .map(|(a, d)| a + lambda * d)
                .collect();
            if let Ok(rt) = f(&trial) {
                let n2: f64 = rt.iter().map(|v| v * v).sum();
                if n2.is_finite() && n2 <= (1.0 - 2e-4 * lambda) * norm2 {
                    x = trial;
                    r = rt;
                    norm2 = n2;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                // Roundoff floor: accept if already near tolerance.
                let res = max_norm(&r);
                return (res <= 1e2 * tol).then_some((x, res));
            }
        }
    }
    let res = max_norm(&r);
    (res <= 1e2 * tol).then_some((x, res))
}

/// Jacobian of the QSS drift, `dv/dx^s = A_ss + A_sb·S`.
pub fn qss_reduced_jacobian(
    spec: &SystemSpec,
    x_sub: &[f64],
    guess: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    let q = solve_qss(spec, x_sub, guess)?;
    Ok(&q.blocks.ss + &q.blocks.sb * &q.sensitivity)
}

/// Central-difference Jacobian of the ZMs augmented drift at `(x^s, m)`.
pub fn zms_augmented_jacobian(
    spec: &SystemSpec,
    y: &[f64],
    bulk_guess: &[f64],
) -> Result<DMatrix<f64>> {
    let n = y.len();
    let mut sys = ZmsSystem {
        tracker: QssTracker::seeded(spec, bulk_guess.to_vec()),
    };
    let mut jac = DMatrix::zeros(n, n);
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let mut yp = y.to_vec();
    for k in 0..n {
        let h = f64::EPSILON.cbrt() * y[k].abs().max(1.0);
        yp[k] = y[k] + h;
        sys.rhs(0.0, &yp, &mut plus)?;
        yp[k] = y[k] - h;
        sys.rhs(0.0, &yp, &mut minus)?;
        yp[k] = y[k];
        for i in 0..n {
            jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

const FIXED_POINT_TOL: f64 = 1e-12;
const DEDUPE: f64 = 1e-6;

/// Multi-start Newton on the full network from the box corners and Halton samples of the
/// physiological box.
///
/// QSS and ZMs fixed points are the subnetwork projections of the full ones (`v = 0` iff
/// `R = 0` at the bulk QSS, and `m = 0` there); only their stability is recomputed from the
/// reduced or augmented Jacobian.
pub fn find_fixed_points(
    spec: &SystemSpec,
    kind: SystemKind,
    n_starts: usize,
) -> Result<FixedPointSet> {
    let n = spec.n();
    let bx = spec.phys_box().clone();
    let inside = |x: &[f64]| {
        x.iter().zip(&bx).all(|(v, &(lo, hi))| {
            let w = (hi - lo).abs().max(1.0);
            *v >= lo - 1e-8 * w && *v <= hi + 0.5 * w
        })
    };
    let mut starts = vec![spec.default_point().to_vec()];
    // Corners catch states pressed against the box edge, which Halton points rarely reach.
    if n <= 10 {
        for mask in 0..1usize << n {
            starts.push(
                bx.iter()
                    .enumerate()
                    .map(|(k, &(lo, hi))| if mask >> k & 1 == 1 { hi } else { lo })
                    .collect(),
            );
        }
    }
    for i in 1..=n_starts {
        let u = halton(i, n);
        starts.push(
            u.iter()
                .zip(&bx)
                .map(|(u, &(lo, hi))| lo + u * (hi - lo))
                .collect(),
        );
    }
    let f = |x: &[f64]| spec.drift_full(x);
    let j = |x: &[f64]| spec.jacobian_full(x);
    let roots: Vec<Option<(Vec<f64>, f64)>> = starts
        .par_iter()
        .map(|s| damped_newton(&f, &j, s, FIXED_POINT_TOL, 100))
        .collect();
    let mut full: Vec<(Vec<f64>, f64)> = Vec::new();
    for (x, res) in roots.into_iter().flatten() {
        if res < 1e-10 && inside(&x) && !full.iter().any(|(y, _)| dist(&x, y) < DEDUPE) {
            full.push((x, res));
        }
    }
    full.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let part = spec.partition();
    let mut points = Vec::with_capacity(full.len());
    for (x, res) in full {
        let sub = part.gather_sub(&x);
        let bulk = part.gather_bulk(&x);
        let (jac, residual) = match kind {
            SystemKind::Full => (spec.jacobian_full(&x)?, res),
            SystemKind::Qss => {
                let q = solve_qss(spec, &sub, Some(&bulk))?;
                (&q.blocks.ss + &q.blocks.sb * &q.sensitivity, max_norm(&q.v))
            }
            SystemKind::Zms => {
                let mut y = sub.clone();
                y.extend(std::iter::repeat_n(0.0, spec.n_bulk()));
                (zms_augmented_jacobian(spec, &y, &bulk)?, res)
            }
        };
        let eigs = eigenvalues(&jac);
        points.push(FixedPoint {
            stability: Stability::classify(&eigs),
            eigenvalues: eigs,
            full_state: x,
            sub,
            residual,
        });
    }
    Ok(FixedPointSet { kind, points })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Grid over two subnetwork species.
#[derive(Debug, Clone)]
pub struct GridAxes {
    pub x_species: usize,
    pub y_species: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
}

impl GridAxes {
    /// Both subnetwork species of a two-species subnetwork over one square range.
    pub fn square(range: (f64, f64), resolution: usize) -> Self {
        Self {
            x_species: 0,
            y_species: 1,
            x_range: range,
            y_range: range,
            resolution,
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_range, self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_range, self.resolution)
    }

    fn check(&self, spec: &SystemSpec) -> Result<()> {
        if spec.n_sub() != 2 {
            return Err(Error::InvalidArgument(format!(
                "grid maps need a two-species subnetwork, got {}",
                spec.n_sub()
            )));
        }
        if self.x_species > 1 || self.y_species > 1 || self.x_species == self.y_species {
            return Err(Error::InvalidArgument(
                "grid axes must be the two subnetwork species".into(),
            ));
        }
        if self.resolution < 2 {
            return Err(Error::InvalidArgument(
                "grid resolution must be at least 2".into(),
            ));
        }
        Ok(())
    }

    fn state(&self, i: usize, j: usize, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; 2];
        x[self.x_species] = xs[i];
        x[self.y_species] = ys[j];
        x
    }
}

pub fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Per-cell attractor labels. Cells are stored row-major with `y` outer.
#[derive(Debug, Clone)]
pub struct BasinGrid {
    pub kind: SystemKind,
    pub axes: GridAxes,
    pub x_name: String,
    pub y_name: String,
    /// Attractors in subnetwork coordinates; labels index into this list.
    pub attractors: Vec<Vec<f64>>,
    /// `None` marks a timeout.
    pub labels: Vec<Option<usize>>,
    pub time_to_steady: Vec<f64>,
}

impl BasinGrid {
    pub fn label(&self, i: usize, j: usize) -> Option<usize> {
        self.labels[j * self.axes.resolution + i]
    }

    pub fn timeouts(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Fraction of cells with identical labels (grids must share axes and attractor order).
    pub fn agreement(&self, other: &BasinGrid) -> f64 {
        let same = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.labels.len() as f64
    }

    /// Whether any horizontally or vertically adjacent cells carry labels `a` and `b`.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let r = self.axes.resolution;
        let pair = |p: Option<usize>, q: Option<usize>| {
            (p == Some(a) && q == Some(b)) || (p == Some(b) && q == Some(a))
        };
        for j in 0..r {
            for i in 0..r {
                let here = self.label(i, j);
                if (i + 1 < r && pair(here, self.label(i + 1, j)))
                    || (j + 1 < r && pair(here, self.label(i, j + 1)))
                {
                    return true;
                }
            }
        }
        false
    }

    /// CSV `x1,x2,label,time_to_steady` (`timeout` for unlabeled cells).
    pub fn to_csv(&self) -> String {
        let xs = self.axes.xs();
        let ys = self.axes.ys();
        let r = self.axes.resolution;
        let mut out = String::from("x1,x2,label,time_to_steady\n");
        for j in 0..r {
            for i in 0..r {
                let k = j * r + i;
                let label = self.labels[k].map_or("timeout".to_string(), |l| l.to_string());
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(xs[i]),
                    fmt_f64(ys[j]),
                    label,
                    fmt_f64(self.time_to_steady[k])
                ));
            }
        }
        out
    }
}

/// Basin-map settings.
#[derive(Debug, Clone)]
pub struct BasinOptions {
    pub t_max: f64,
    /// Attractor matching radius in the integrated coordinates.
    pub radius: f64,
    pub ode: OdeOptions,
    /// Attractors to label against (subnetwork coordinates). Defaults to the stable fixed
    /// points of the chosen dynamics.
    pub attractors: Option<Vec<Vec<f64>>>,
    pub n_starts: usize,
}

impl Default for BasinOptions {
    fn default() -> Self {
        Self {
            t_max: 200.0,
            radius: 1e-3,
            ode: OdeOptions::with_tolerances(1e-6, 1e-8),
            attractors: None,
            n_starts: 128,
        }
    }
}

/// Relative band used by the 1% steady-state criterion, with an absolute floor for zeros.
fn band(target: f64, rel: f64) -> f64 {
    (rel * target.abs()).max(1e-6)
}

/// Last time at which any coordinate lies outside `rel·|target|` of `target`.
pub fn time_to_steady(times: &[f64], states: &[Vec<f64>], target: &[f64], rel: f64) -> f64 {
    let mut last = times.first().copied().unwrap_or(0.0);
    for (t, x) in times.iter().zip(states) {
        if x.iter()
            .zip(target)
            .any(|(v, c)| (v - c).abs() > band(*c, rel))
        {
            last = *t;
        }
    }
    last
}

/// Time-to-steady of a trajectory relative to its own final subnetwork state.
pub fn trajectory_time_to_steady(tr: &Trajectory) -> f64 {
    time_to_steady(&tr.times, &tr.states_sub, tr.final_sub(), 0.01)
}

pub fn basin_map(
    spec: &SystemSpec,
    kind: SystemKind,
    axes: &GridAxes,
    opts: &BasinOptions,
) -> Result<BasinGrid> {
    axes.check(spec)?;
    let attractors: Vec<(Vec<f64>, Vec<f64>)> = match &opts.attractors {
        Some(a) => a
            .iter()
            .map(|x| solve_qss(spec, x, None).map(|q| (x.clone(), q.x_bulk_star)))
            .collect::<Result<_>>()?,
        None => find_fixed_points(spec, kind, opts.n_starts)?
            .stable()
            .map(|p| (p.sub.clone(), spec.partition().gather_bulk(&p.full_state)))
            .collect(),
    };
    if attractors.is_empty() {
        return Err(Error::NoFixedPoints(format!(
            "no stable {} fixed points",
            kind.as_str()
        )));
    }
    let xs = axes.xs();
    let ys = axes.ys();
    let r = axes.resolution;
    let cells: Vec<(Option<usize>, f64)> = (0..r * r)
        .into_par_iter()
        .map(|k| {
            let x0 = axes.state(k % r, k / r, &xs, &ys);
            basin_cell(spec, kind, &x0, &attractors, opts)
        })
        .collect::<Result<_>>()?;
    let names = spec.sub_names();
    Ok(BasinGrid {
        kind,
        axes: axes.clone(),
        x_name: names[axes.x_species].to_string(),
        y_name: names[axes.y_species].to_string(),
        attractors: attractors.into_iter().map(|(s, _)| s).collect(),
        labels: cells.iter().map(|c| c.0).collect(),
        time_to_steady: cells.iter().map(|c| c.1).collect(),
    })
}

fn basin_cell(
    spec: &SystemSpec,
    kind: SystemKind,
    x0: &[f64],
    attractors: &[(Vec<f64>, Vec<f64>)],
    opts: &BasinOptions,
) -> Result<(Option<usize>, f64)> {
    let part = spec.partition();
    let ns = spec.n_sub();
    let (y0, targets): (Vec<f64>, Vec<Vec<f64>>) = match kind {
        SystemKind::Full => (
            solve_qss(spec, x0, None)?.full_state,
            attractors.iter().map(|(s, b)| part.scatter(s, b)).collect(),
        ),
        SystemKind::Qss => (
            x0.to_vec(),
            attractors.iter().map(|(s, _)| s.clone()).collect(),
        ),
        SystemKind::Zms => {
            let mut y = x0.to_vec();
            y.extend(std::iter::repeat_n(0.0, spec.n_bulk()));
            let t = attractors
                .iter()
                .map(|(s, _)| {
                    let mut v = s.clone();
                    v.extend(std::iter::repeat_n(0.0, spec.n_bulk()));
                    v
                })
                .collect();
            (y, t)
        }
    };
    let sub_of = |y: &[f64]| -> Vec<f64> {
        match kind {
            SystemKind::Full => part.gather_sub(y),
            _ => y[..ns].to_vec(),
        }
    };
    let mut hit = None;
    let stop = |_t: f64, y: &[f64]| {
        let sub = sub_of(y);
        for (a, (target, (att_sub, _))) in targets.iter().zip(attractors).enumerate() {
            let near = dist(y, target) < opts.radius;
            let banded = sub
                .iter()
                .zip(att_sub)
                .all(|(v, c)| (v - c).abs() <= band(*c, 0.01));
            if near && banded {
                hit = Some(a);
                return true;
            }
        }
        false
    };
    let run = match kind {
        SystemKind::Full => integrate_until(
            &mut full_system(spec),
            0.0,
            &y0,
            opts.t_max,
            &opts.ode,
            stop,
        ),
        SystemKind::Qss => {
            integrate_until(&mut qss_system(spec), 0.0, &y0, opts.t_max, &opts.ode, stop)
        }
        SystemKind::Zms => integrate_until(
            &mut ZmsSystem {
                tracker: QssTracker::new(spec),
            },
            0.0,
            &y0,
            opts.t_max,
            &opts.ode,
            stop,
        ),
    };
    let (sol, stopped) = match run {
        Ok(r) => r,
        Err(Error::IntegratorFailure { .. }) => return Ok((None, f64::NAN)),
        Err(e) => return Err(e),
    };
    match (stopped, hit) {
        (true, Some(a)) => {
            let subs: Vec<Vec<f64>> = sol.y.iter().map(|y| sub_of(y)).collect();
            Ok((
                Some(a),
                time_to_steady(&sol.t, &subs, &attractors[a].0, 0.01),
            ))
        }
        _ => Ok((None, opts.t_max)),
    }
}

/// Critical `a` at one `n`, if the leading complex pair crosses the imaginary axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopfPoint {
    pub n: f64,
    pub a_critical: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HopfCurve {
    pub kind: SystemKind,
    pub points: Vec<HopfPoint>,
}

impl HopfCurve {
    pub fn has_crossing(&self) -> bool {
        self.points.iter().any(|p| p.a_critical.is_some())
    }

    /// CSV `n,a_critical,method`, writing `none` where no crossing exists.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,a_critical,method\n");
        for p in &self.points {
            let a = p.a_critical.map_or("none".to_string(), fmt_f64);
            out.push_str(&format!("{},{},{}\n", fmt_f64(p.n), a, self.kind.as_str()));
        }
        out
    }
}

/// Largest real part among complex-conjugate eigenvalue pairs at the model's fixed point,
/// tracked by Newton from `guess`. Returns the point as well for continuation.
pub fn leading_oscillatory_real_part(
    spec: &SystemSpec,
    kind: SystemKind,
    guess: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let f = |x: &[f64]| spec.drift_full(x);
    let j = |x: &[f64]| spec.jacobian_full(x);
    let (x, _) = damped_newton(&f, &j, guess, FIXED_POINT_TOL, 100)
        .ok_or_else(|| Error::NoFixedPoints(format!("lost fixed point of {}", spec.id())))?;
    let part = spec.partition();
    let jac = match kind {
        SystemKind::Full => spec.jacobian_full(&x)?,
        SystemKind::Qss => {
            qss_reduced_jacobian(spec, &part.gather_sub(&x), Some(&part.gather_bulk(&x)))?
        }
        SystemKind::Zms => {
            let mut y = part.gather_sub(&x);
            y.extend(std::iter::repeat_n(0.0, spec.n_bulk()));
            zms_augmented_jacobian(spec, &y, &part.gather_bulk(&x))?
        }
    };
    let lead = eigenvalues(&jac)
        .iter()
        .filter(|e| e.im.abs() > 1e-9)
        .map(|e| e.re)
        .fold(f64::NAN, f64::max);
    Ok((lead, x))
}

/// Scan `n` over `n_range`; at each `n`, locate the first sign change of the leading
/// complex-pair real part on a uniform `a` grid and bisect it to 1e-6.
///
/// `build(a, n)` constructs the model at one parameter pair.
pub fn hopf_scan(
    build: &(dyn Fn(f64, f64) -> Result<SystemSpec> + Sync),
    kind: SystemKind,
    a_range: (f64, f64),
    n_range: (f64, f64),
    resolution: usize,
) -> Result<HopfCurve> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(
            "scan resolution must be at least 2".into(),
        ));
    }
    let a_grid = linspace(a_range, resolution);
    let points = linspace(n_range, resolution)
        .into_par_iter()
        .map(|n| hopf_line(build, kind, &a_grid, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(HopfCurve { kind, points })
}

fn hopf_line(
    build: &(dyn Fn(f64, f64) -> Result<SystemSpec> + Sync),
    kind: SystemKind,
    a_grid: &[f64],
    n: f64,
) -> Result<HopfPoint> {
    let first = build(a_grid[0], n)?;
    let mut guess = first.default_point().to_vec();
    let mut prev: Option<(f64, f64, Vec<f64>)> = None;
    for &a in a_grid {
        let spec = build(a, n)?;
        let (re, x) = leading_oscillatory_real_part(&spec, kind, &guess)?;
        if let Some((a_lo, re_lo, x_lo)) = &prev {
            if *re_lo < 0.0 && re >= 0.0 {
                let a_c = bisect_hopf(build, kind, n, (*a_lo, a), x_lo.clone())?;
                return Ok(HopfPoint {
                    n,
                    a_critical: Some(a_c),
                });
            }
        }
        guess = x.clone();
        if re.is_finite() {
            prev = Some((a, re, x));
        }
    }
    Ok(HopfPoint {
        n,
        a_critical: None,
    })
}

fn bisect_hopf(
    build: &(dyn Fn(f64, f64) -> Result<SystemSpec> + Sync),
    kind: SystemKind,
    n: f64,
    (mut lo, mut hi): (f64, f64),
    mut guess: Vec<f64>,
) -> Result<f64> {
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        let (re, x) = leading_oscillatory_real_part(&build(mid, n)?, kind, &guess)?;
        guess = x;
        if re < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Σ_s M_s(x^s, 0)` (or one receiver) on a grid; NaN where the QSS solve fails.
#[derive(Debug, Clone)]
pub struct AmplitudeMap {
    pub axes: GridAxes,
    pub receiver: Option<usize>,
    /// Row-major with `y` outer.
    pub values: Vec<f64>,
}

impl AmplitudeMap {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.axes.resolution + i]
    }

    pub fn holes(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Zero-level contour as line segments (marching squares, linear interpolation on edges).
    pub fn zero_contour(&self) -> Vec<[(f64, f64); 2]> {
        let xs = self.axes.xs();
        let ys = self.axes.ys();
        let r = self.axes.resolution;
        let mut segs = Vec::new();
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let corners = [
                    (xs[i], ys[j], self.value(i, j)),
                    (xs[i + 1], ys[j], self.value(i + 1, j)),
                    (xs[i + 1], ys[j + 1], self.value(i + 1, j + 1)),
                    (xs[i], ys[j + 1], self.value(i, j + 1)),
                ];
                if corners.iter().any(|c| c.2.is_nan()) {
                    continue;
                }
                let mut hits = Vec::with_capacity(4);
                for e in 0..4 {
                    let (x0, y0, v0) = corners[e];
                    let (x1, y1, v1) = corners[(e + 1) % 4];
                    if (v0 < 0.0) != (v1 < 0.0) {
                        let t = v0 / (v0 - v1);
                        hits.push((x0 + t * (x1 - x0), y0 + t * (y1 - y0)));
                    }
                }
                match hits.len() {
                    2 => segs.push([hits[0], hits[1]]),
                    // Saddle cell: pair edges by the cell-centre sign.
                    4 => {
                        let centre: f64 = corners.iter().map(|c| c.2).sum::<f64>() / 4.0;
                        if (centre < 0.0) == (corners[0].2 < 0.0) {
                            segs.push([hits[0], hits[3]]);
                            segs.push([hits[1], hits[2]]);
                        } else {
                            segs.push([hits[0], hits[1]]);
                            segs.push([hits[2], hits[3]]);
                        }
                    }
                    _ => {}
                }
            }
        }
        segs
    }

    pub fn to_csv(&self) -> String {
        let xs = self.axes.xs();
        let ys = self.axes.ys();
        let r = self.axes.resolution;
        let mut out = String::from("x1,x2,amplitude\n");
        for j in 0..r {
            for i in 0..r {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f64(xs[i]),
                    fmt_f64(ys[j]),
                    fmt_f64(self.value(i, j))
                ));
            }
        }
        out
    }
}

/// Memory amplitude `M(x^s, 0)` for one receiver, or summed over receivers.
pub fn memory_amplitude(spec: &SystemSpec, x_sub: &[f64], receiver: Option<usize>) -> Result<f64> {
    let amp = memory_ingredients(spec, x_sub)?.amplitude();
    Ok(match receiver {
        Some(s) => amp[s],
        None => amp.iter().sum(),
    })
}

pub fn memory_amplitude_map(
    spec: &SystemSpec,
    axes: &GridAxes,
    receiver: Option<usize>,
) -> Result<AmplitudeMap> {
    axes.check(spec)?;
    if receiver.is_some_and(|s| s >= spec.n_sub()) {
        return Err(Error::InvalidArgument("receiver index out of range".into()));
    }
    let xs = axes.xs();
    let ys = axes.ys();
    let r = axes.resolution;
    let values = (0..r * r)
        .into_par_iter()
        .map(|k| {
            let x = axes.state(k % r, k / r, &xs, &ys);
            memory_amplitude(spec, &x, receiver).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(AmplitudeMap {
        axes: axes.clone(),
        receiver,
        values,
    })
}

/// Sign changes of `M(x(t), 0)` along the stored trajectory points.
pub fn amplitude_sign_changes(
    spec: &SystemSpec,
    tr: &Trajectory,
    receiver: Option<usize>,
) -> Result<usize> {
    let mut prev: Option<bool> = None;
    let mut count = 0;
    for x in &tr.states_sub {
        let v = memory_amplitude(spec, x, receiver)?;
        if v == 0.0 {
            continue;
        }
        let neg = v < 0.0;
        if prev.is_some_and(|p| p != neg) {
            count += 1;
        }
        prev = Some(neg);
    }
    Ok(count)
}

/// Local maxima of a series on a uniform grid whose rise from the preceding minimum and
/// fall to the following minimum both exceed `min_prominence`.
pub fn count_local_maxima(series: &[f64], min_prominence: f64) -> usize {
    let mut count = 0;
    let mut last_min = series.first().copied().unwrap_or(0.0);
    let mut candidate: Option<f64> = None;
    for w in series.windows(3) {
        if w[1] > w[0] && w[1] >= w[2] && w[1] - last_min > min_prominence {
            candidate = Some(candidate.map_or(w[1], |c: f64| c.max(w[1])));
        }
        if w[1] < w[0] && w[1] <= w[2] {
            if let Some(c) = candidate {
                if c - w[1] > min_prominence {
                    count += 1;
                    candidate = None;
                }
            }
            if candidate.is_none() {
                last_min = w[1];
            } else {
                last_min = last_min.min(w[1]);
            }
        }
    }
    if let (Some(c), Some(&end)) = (candidate, series.last()) {
        if c - end > min_prominence {
            count += 1;
        }
    }
    count
}

/// Number of trajectory pairs whose planar paths cross transversally away from `exclude`
/// (a disc). A crossing counts only when the sine of the angle between the two segments
/// exceeds `min_sine`; near-tangent swaps of merging paths are discretization noise.
pub fn count_crossing_pairs(
    paths: &[Vec<(f64, f64)>],
    exclude: ((f64, f64), f64),
    min_sine: f64,
) -> usize {
    let indexed: Vec<ChunkedPath> = paths.iter().map(|p| ChunkedPath::new(p)).collect();
    let mut pairs = 0;
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            if paths_cross(&indexed[i], &indexed[j], exclude, min_sine) {
                pairs += 1;
            }
        }
    }
    pairs
}

type Bbox = (f64, f64, f64, f64);

fn bbox(points: &[(f64, f64)]) -> Bbox {
    points.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(x0, x1, y0, y1), &(x, y)| (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
    )
}

fn overlaps(a: &Bbox, b: &Bbox) -> bool {
    a.0 <= b.1 && b.0 <= a.1 && a.2 <= b.3 && b.2 <= a.3
}

const CHUNK: usize = 32;

/// A polyline with bounding boxes over runs of `CHUNK` segments.
struct ChunkedPath<'a> {
    points: &'a [(f64, f64)],
    boxes: Vec<Bbox>,
}

impl<'a> ChunkedPath<'a> {
    fn new(points: &'a [(f64, f64)]) -> Self {
        let boxes = (0..points.len().saturating_sub(1))
            .step_by(CHUNK)
            .map(|s| bbox(&points[s..(s + CHUNK + 1).min(points.len())]))
            .collect();
        Self { points, boxes }
    }

    fn segments(&self, chunk: usize) -> std::ops::Range<usize> {
        let s = chunk * CHUNK;
        s..(s + CHUNK).min(self.points.len() - 1)
    }
}

fn paths_cross(
    p: &ChunkedPath,
    q: &ChunkedPath,
    (c, radius): ((f64, f64), f64),
    min_sine: f64,
) -> bool {
    let far = |a: (f64, f64)| ((a.0 - c.0).powi(2) + (a.1 - c.1).powi(2)).sqrt() > radius;
    for (ci, bp) in p.boxes.iter().enumerate() {
        for (cj, bq) in q.boxes.iter().enumerate() {
            if !overlaps(bp, bq) {
                continue;
            }
            for i in p.segments(ci) {
                let (a0, a1) = (p.points[i], p.points[i + 1]);
                let ba = bbox(&[a0, a1]);
                for j in q.segments(cj) {
                    let (b0, b1) = (q.points[j], q.points[j + 1]);
                    if !overlaps(&ba, &bbox(&[b0, b1])) {
                        continue;
                    }
                    let Some(pt) = segment_intersection(a0, a1, b0, b1) else {
                        continue;
                    };
                    let r = (a1.0 - a0.0, a1.1 - a0.1);
                    let s = (b1.0 - b0.0, b1.1 - b0.1);
                    let sine = (r.0 * s.1 - r.1 * s.0).abs() / (r.0.hypot(r.1) * s.0.hypot(s.1));
                    if far(pt) && sine > min_sine {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Proper intersection point of two segments (shared endpoints and collinear overlap excluded).
pub fn segment_intersection(
    p0: (f64, f64),
    p1: (f64, f64),
    q0: (f64, f64),
    q1: (f64, f64),
) -> Option<(f64, f64)> {
    let r = (p1.0 - p0.0, p1.1 - p0.1);
    let s = (q1.0 - q0.0, q1.1 - q0.1);
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom == 0.0 {
        return None;
    }
    let d = (q0.0 - p0.0, q0.1 - p0.1);
    let t = (d.0 * s.1 - d.1 * s.0) / denom;
    let u = (d.0 * r.1 - d.1 * r.0) / denom;
    (t >= 0.0 && t < 1.0 && u >= 0.0 && u < 1.0).then(|| (p0.0 + t * r.0, p0.1 + t * r.1))
}

/// Error metrics for one method against the full system.
#[derive(Debug, Clone)]
pub struct MethodError {
    pub method: Method,
    /// `max_t ‖x − x_full‖∞ / max_t ‖x_full‖∞`.
    pub sup_relative: f64,
    /// `‖x − x_full‖₂ / ‖x_full‖₂` over the common grid.
    pub l2_relative: f64,
    pub time_to_steady: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub grid: Vec<f64>,
    pub full: Trajectory,
    pub trajectories: Vec<Trajectory>,
    /// One entry per requested method, full included.
    pub errors: Vec<MethodError>,
}

impl Comparison {
    pub fn error(&self, m: Method) -> Option<&MethodError> {
        self.errors.iter().find(|e| e.method == m)
    }

    pub fn trajectory(&self, m: Method) -> Option<&Trajectory> {
        if m == Method::Full {
            return Some(&self.full);
        }
        self.trajectories.iter().find(|t| t.method == m)
    }
}

/// Settings for [`compare_timecourses`].
#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    pub ode: OdeOptions,
    pub zmn: ZmnOptions,
    /// Channels kept for ZMs*; required when `zms-star` is requested.
    pub keep: Option<BTreeSet<ChannelKey>>,
    /// Points on the common grid (default 2001).
    pub grid_points: Option<usize>,
}

pub fn integrate_method(
    spec: &SystemSpec,
    method: Method,
    x_sub0: &[f64],
    t_end: f64,
    opts: &CompareOptions,
) -> Result<Trajectory> {
    match method {
        Method::Full => integrate_full_with(spec, x_sub0, t_end, &opts.ode),
        Method::Qss => integrate_qss_with(spec, x_sub0, t_end, &opts.ode),
        Method::Zms => integrate_zms_with(spec, x_sub0, t_end, &opts.ode),
        Method::Zmn => integrate_zmn_with(spec, x_sub0, t_end, &opts.zmn),
        Method::ZmsStar => {
            let keep = opts
                .keep
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("zms-star needs a keep set".into()))?;
            integrate_zms_star_with(spec, x_sub0, t_end, keep, &opts.ode)
        }
    }
}

pub fn compare_timecourses(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    methods: &[Method],
    opts: &CompareOptions,
) -> Result<Comparison> {
    let full = integrate_full_with(spec, x_sub0, t_end, &opts.ode)?;
    let others: Vec<Trajectory> = methods
        .iter()
        .filter(|m| **m != Method::Full)
        .map(|&m| integrate_method(spec, m, x_sub0, t_end, opts))
        .collect::<Result<_>>()?;
    let (grid, base) = full.resample(opts.grid_points.unwrap_or(2001));
    let scale = base
        .iter()
        .map(|x| max_norm(x))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let l2_base: f64 = base
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let metrics = |tr: &Trajectory| {
        let xs: Vec<Vec<f64>> = grid.iter().map(|&t| tr.sample_sub(t)).collect();
        let sup = xs
            .iter()
            .zip(&base)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max);
        let l2: f64 = xs
            .iter()
            .zip(&base)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)))
            .sum::<f64>()
            .sqrt();
        MethodError {
            method: tr.method,
            sup_relative: sup / scale,
            l2_relative: l2 / l2_base,
            time_to_steady: trajectory_time_to_steady(tr),
        }
    };
    let mut errors = vec![metrics(&full)];
    errors.extend(others.iter().map(metrics));
    Ok(Comparison {
        grid,
        full,
        trajectories: others,
        errors,
    })
}
