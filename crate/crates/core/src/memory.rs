//! Memory ingredients, the ZMn kernel and the four reduced integrators.
//!
//! At a subnetwork state `x^s` with bulk QSS `x^b*`, with `S = ∂x^b*/∂x^s`,
//! `A = ∂R_s/∂x_b` and `J = ∂R_b/∂x_b`:
//!
//! * `f0 = Aᵀ` (n_bulk × n_sub),
//! * `l_{bb'} = J_{b'b} − Σ_{s'} S_{b's'} A_{s'b}`, i.e. `lᵀ = J − S·A`,
//! * `c = −S·v` with `v = R_s(x^s, x^b*)`.
//!
//! The ZMn kernel is `M(x, τ) = f0(φ_v(x, τ))ᵀ · E(τ)ᵀ c(x)` where `E` is the
//! time-ordered exponential solving `dE/dτ = E·l(φ_v(x, τ))`, `E(0) = I`. The transposed
//! product `w = Eᵀc` obeys `dw/dτ = lᵀ(φ_v) w`, which is what the kernel trackers
//! integrate. ZMs replaces the convolution by auxiliary variables
//! `dm/dt = c(x) + lᵀ(x) m`, `m(0) = 0`, with memory term `A(x)·m`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{max_abs, norm1};
use crate::ode::{integrate, rk4_step, OdeOptions, OdeSolution, OdeSystem};
use crate::qss::{solve_qss, QssSolution, QssTracker};
use crate::system::SystemSpec;

/// `l`, `c` and `f0` at one subnetwork state.
#[derive(Debug, Clone)]
pub struct MemoryIngredients {
    pub evaluated_at: Vec<f64>,
    pub x_bulk_star: Vec<f64>,
    /// QSS drift `v(x^s)`.
    pub v: DVector<f64>,
    /// Coupling matrix `l_{bb'}` (1/time).
    pub l: DMatrix<f64>,
    /// Memory prefactors `c_b`.
    pub c: DVector<f64>,
    /// `f0_{bs} = ∂R_s/∂x_b`.
    pub f0: DMatrix<f64>,
    /// `∂x^b*/∂x^s`.
    pub sensitivity: DMatrix<f64>,
}

impl MemoryIngredients {
    pub fn from_qss(q: &QssSolution) -> Self {
        let a = &q.blocks.sb;
        let s = &q.sensitivity;
        let v = DVector::from_column_slice(&q.v);
        let l_t = &q.jac_bb - s * a;
        Self {
            evaluated_at: q.x_sub.clone(),
            x_bulk_star: q.x_bulk_star.clone(),
            c: -(s * &v),
            l: l_t.transpose(),
            f0: a.transpose(),
            sensitivity: s.clone(),
            v,
        }
    }

    /// `lᵀ`, the generator acting on bulk-deviation vectors.
    pub fn generator(&self) -> DMatrix<f64> {
        self.l.transpose()
    }

    /// Memory at zero lag, `Σ_b c_b f0_{bs}`.
    pub fn amplitude(&self) -> DVector<f64> {
        self.f0.transpose() * &self.c
    }
}

pub fn memory_ingredients(spec: &SystemSpec, x_sub: &[f64]) -> Result<MemoryIngredients> {
    Ok(MemoryIngredients::from_qss(&solve_qss(spec, x_sub, None)?))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lag τ must be ≥ 0, got {tau}"
        )))
    }
}

/// QSS flow `dx^s/dt = v(x^s)`.
pub(crate) struct QssFlow<'a> {
    pub tracker: QssTracker<'a>,
}

impl OdeSystem for QssFlow<'_> {
    fn dim(&self) -> usize {
        self.tracker.spec().n_sub()
    }
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let q = self.tracker.solve(y)?;
        dy.copy_from_slice(&q.v);
        Ok(())
    }
}

/// `φ_v(x^s, τ)` by adaptive Dormand-Prince (rtol 1e-8, atol 1e-10).
pub fn flow_qss(spec: &SystemSpec, x_sub: &[f64], tau: f64) -> Result<Vec<f64>> {
    flow_qss_with(spec, x_sub, tau, &OdeOptions::default())
}

pub fn flow_qss_with(
    spec: &SystemSpec,
    x_sub: &[f64],
    tau: f64,
    opts: &OdeOptions,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mut sys = QssFlow {
        tracker: QssTracker::new(spec),
    };
    Ok(integrate(&mut sys, 0.0, x_sub, tau, opts)?.last().to_vec())
}

/// Time-ordered exponential `E(τ)` along the QSS flow from `anchor`.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub e: DMatrix<f64>,
    pub tau: f64,
    pub anchor: Vec<f64>,
    /// `φ_v(anchor, τ)`.
    pub endpoint: Vec<f64>,
}

/// Flow plus matrix propagator, `y = (φ, vec(E))`, `dE/dτ = E·l(φ)`.
struct FlowPropagator<'a> {
    tracker: QssTracker<'a>,
    ns: usize,
    nb: usize,
}

impl OdeSystem for FlowPropagator<'_> {
    fn dim(&self) -> usize {
        self.ns + self.nb * self.nb
    }
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let (ns, nb) = (self.ns, self.nb);
        let q = self.tracker.solve(&y[..ns])?;
        let ing = MemoryIngredients::from_qss(&q);
        dy[..ns].copy_from_slice(&q.v);
        let e = DMatrix::from_column_slice(nb, nb, &y[ns..]);
        let de = e * &ing.l;
        dy[ns..].copy_from_slice(de.as_slice());
        Ok(())
    }
}

pub fn propagator(spec: &SystemSpec, x_sub: &[f64], tau: f64) -> Result<Propagator> {
    propagator_with(spec, x_sub, tau, &OdeOptions::default())
}

pub fn propagator_with(
    spec: &SystemSpec,
    x_sub: &[f64],
    tau: f64,
    opts: &OdeOptions,
) -> Result<Propagator> {
    check_tau(tau)?;
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut y0 = x_sub.to_vec();
    y0.extend(DMatrix::<f64>::identity(nb, nb).as_slice());
    let mut sys = FlowPropagator {
        tracker: QssTracker::new(spec),
        ns,
        nb,
    };
    let sol = integrate(&mut sys, 0.0, &y0, tau, opts)?;
    let y = sol.last();
    Ok(Propagator {
        e: DMatrix::from_column_slice(nb, nb, &y[ns..]),
        tau,
        anchor: x_sub.to_vec(),
        endpoint: y[..ns].to_vec(),
    })
}

/// Flow plus transposed kernel vector, `y = (φ, w)`, `dw/dτ = lᵀ(φ) w`.
struct FlowKernel<'a> {
    tracker: QssTracker<'a>,
    ns: usize,
    nb: usize,
}

impl FlowKernel<'_> {
    fn eval(&mut self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let ns = self.ns;
        let q = self.tracker.solve(&y[..ns])?;
        let gen = &q.jac_bb - &q.sensitivity * &q.blocks.sb;
        dy[..ns].copy_from_slice(&q.v);
        let w = DVector::from_column_slice(&y[ns..]);
        let dw = gen * w;
        dy[ns..].copy_from_slice(dw.as_slice());
        Ok(())
    }
}

impl OdeSystem for FlowKernel<'_> {
    fn dim(&self) -> usize {
        self.ns + self.nb
    }
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.eval(y, dy)
    }
}

fn kernel_output(q: &QssSolution, w: &[f64]) -> Vec<f64> {
    (&q.blocks.sb * DVector::from_column_slice(w))
        .as_slice()
        .to_vec()
}

/// ZMn memory function `M(x^s, τ)` on every subnetwork species.
pub fn memory_zmn(spec: &SystemSpec, x_sub_past: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(memory_zmn_series(spec, x_sub_past, &[tau])?.remove(0))
}

/// `M(x^s, τ)` at several lags from a single co-integration (lags sorted ascending).
pub fn memory_zmn_series(
    spec: &SystemSpec,
    x_sub_past: &[f64],
    taus: &[f64],
) -> Result<Vec<Vec<f64>>> {
    memory_zmn_series_with(spec, x_sub_past, taus, &OdeOptions::default())
}

pub fn memory_zmn_series_with(
    spec: &SystemSpec,
    x_sub_past: &[f64],
    taus: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<f64>>> {
    for &t in taus {
        check_tau(t)?;
    }
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "lags must be sorted ascending".into(),
        ));
    }
    let q0 = solve_qss(spec, x_sub_past, None)?;
    let ing = MemoryIngredients::from_qss(&q0);
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut sys = FlowKernel {
        tracker: QssTracker::seeded(spec, q0.x_bulk_star.clone()),
        ns,
        nb,
    };
    let mut y = x_sub_past.to_vec();
    y.extend(ing.c.iter());
    let mut t = 0.0;
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        if tau > t {
            y = integrate(&mut sys, t, &y, tau, opts)?.last().to_vec();
            t = tau;
        }
        let q = sys.tracker.solve(&y[..ns])?;
        out.push(kernel_output(&q, &y[ns..]));
    }
    Ok(out)
}

/// Approximate random force `F_s ≈ Σ_b (x_b − x_b*) f_{bs}(x^s, τ)`.
pub fn random_force_approx(
    spec: &SystemSpec,
    x_sub: &[f64],
    x_bulk: &[f64],
    tau: f64,
) -> Result<Vec<f64>> {
    if x_bulk.len() != spec.n_bulk() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_bulk(),
            got: x_bulk.len(),
        });
    }
    ensure_finite(x_bulk, "bulk state")?;
    let q0 = solve_qss(spec, x_sub, None)?;
    let dev = DVector::from_iterator(
        spec.n_bulk(),
        x_bulk.iter().zip(&q0.x_bulk_star).map(|(a, b)| a - b),
    );
    let prop = propagator(spec, x_sub, tau)?;
    let q = solve_qss(spec, &prop.endpoint, Some(&q0.x_bulk_star))?;
    let f0 = q.blocks.sb.transpose();
    let f = &prop.e * f0;
    Ok((f.transpose() * dev).as_slice().to_vec())
}

/// Integration method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Full,
    Qss,
    Zmn,
    Zms,
    ZmsStar,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Qss => "qss",
            Method::Zmn => "zmn",
            Method::Zms => "zms",
            Method::ZmsStar => "zms-star",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Method::Full,
            "qss" => Method::Qss,
            "zmn" => Method::Zmn,
            "zms" => Method::Zms,
            "zms-star" | "zms_star" => Method::ZmsStar,
            other => return Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Subnetwork time course from one method, with bulk values and auxiliary memory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub method: Method,
    pub times: Vec<f64>,
    pub states_sub: Vec<Vec<f64>>,
    /// Actual bulk for `full`, pointwise QSS values otherwise.
    pub states_bulk: Vec<Vec<f64>>,
    /// Auxiliary memory variables `m_b` (ZMs and ZMs*).
    pub aux_m: Option<Vec<Vec<f64>>>,
    pub(crate) derivs_sub: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&f64::NAN)
    }

    pub fn final_sub(&self) -> &[f64] {
        self.states_sub.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Subnetwork state at any `t` in range (cubic Hermite between stored steps).
    pub fn sample_sub(&self, t: f64) -> Vec<f64> {
        crate::ode::hermite_sample(&self.times, &self.states_sub, &self.derivs_sub, t)
    }

    /// Subnetwork coordinate `k` as a series.
    pub fn series(&self, k: usize) -> Vec<f64> {
        self.states_sub.iter().map(|x| x[k]).collect()
    }

    /// Resample onto a uniform grid of `n` points over the trajectory span.
    pub fn resample(&self, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t0 = self.times[0];
        let t1 = self.t_end();
        let ts: Vec<f64> = (0..n)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n.max(2) - 1) as f64)
            .collect();
        let xs = ts.iter().map(|&t| self.sample_sub(t)).collect();
        (ts, xs)
    }

    /// CSV `t,<species...>[,m_<bulk>...]` with 17 significant digits.
    pub fn to_csv(&self, spec: &SystemSpec) -> String {
        let part = spec.partition();
        let mut out = String::from("t");
        for name in spec.species() {
            out.push(',');
            out.push_str(name);
        }
        if self.aux_m.is_some() {
            for name in spec.bulk_names() {
                out.push_str(",m_");
                out.push_str(name);
            }
        }
        out.push('\n');
        for i in 0..self.len() {
            let full = part.scatter(&self.states_sub[i], &self.states_bulk[i]);
            out.push_str(&fmt_f64(self.times[i]));
            for v in &full {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            if let Some(m) = &self.aux_m {
                for v in &m[i] {
                    out.push(',');
                    out.push_str(&fmt_f64(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Full-precision number formatting used by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_start(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<()> {
    if x_sub0.len() != spec.n_sub() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_sub(),
            got: x_sub0.len(),
        });
    }
    ensure_finite(x_sub0, "initial condition")?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "t_end must be > 0, got {t_end}"
        )));
    }
    Ok(())
}

struct FullSystem<'a> {
    spec: &'a SystemSpec,
}

impl OdeSystem for FullSystem<'_> {
    fn dim(&self) -> usize {
        self.spec.n()
    }
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.spec.drift_into(y, dy)
    }
}

/// Full network from `(x^s_0, x^b*(x^s_0))`.
pub fn integrate_full(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<Trajectory> {
    integrate_full_with(spec, x_sub0, t_end, &OdeOptions::default())
}

pub fn integrate_full_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    check_start(spec, x_sub0, t_end)?;
    let q0 = solve_qss(spec, x_sub0, None)?;
    let sol = integrate(&mut FullSystem { spec }, 0.0, &q0.full_state, t_end, opts)?;
    Ok(full_trajectory(spec, sol))
}

pub(crate) fn full_trajectory(spec: &SystemSpec, sol: OdeSolution) -> Trajectory {
    let part = spec.partition();
    Trajectory {
        method: Method::Full,
        states_sub: sol.y.iter().map(|y| part.gather_sub(y)).collect(),
        states_bulk: sol.y.iter().map(|y| part.gather_bulk(y)).collect(),
        derivs_sub: sol.dy.iter().map(|y| part.gather_sub(y)).collect(),
        times: sol.t,
        aux_m: None,
    }
}

pub(crate) fn full_system(spec: &SystemSpec) -> impl OdeSystem + '_ {
    FullSystem { spec }
}

/// Bulk QSS values along a subnetwork path, warm-started point to point.
pub(crate) fn qss_bulk_along(spec: &SystemSpec, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut tracker = QssTracker::new(spec);
    xs.iter()
        .map(|x| tracker.solve(x).map(|q| q.x_bulk_star))
        .collect()
}

/// QSS reduction `dx^s/dt = v(x^s)`.
pub fn integrate_qss(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<Trajectory> {
    integrate_qss_with(spec, x_sub0, t_end, &OdeOptions::default())
}

pub fn integrate_qss_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    check_start(spec, x_sub0, t_end)?;
    let mut sys = QssFlow {
        tracker: QssTracker::new(spec),
    };
    let sol = integrate(&mut sys, 0.0, x_sub0, t_end, opts)?;
    qss_trajectory(spec, sol)
}

pub(crate) fn qss_trajectory(spec: &SystemSpec, sol: OdeSolution) -> Result<Trajectory> {
    Ok(Trajectory {
        method: Method::Qss,
        states_bulk: qss_bulk_along(spec, &sol.y)?,
        states_sub: sol.y,
        derivs_sub: sol.dy,
        times: sol.t,
        aux_m: None,
    })
}

pub(crate) fn qss_system(spec: &SystemSpec) -> impl OdeSystem + '_ {
    QssFlow {
        tracker: QssTracker::new(spec),
    }
}

/// ZMs augmented system `y = (x^s, m)`.
pub(crate) struct ZmsSystem<'a> {
    pub tracker: QssTracker<'a>,
}

impl OdeSystem for ZmsSystem<'_> {
    fn dim(&self) -> usize {
        let s = self.tracker.spec();
        s.n_sub() + s.n_bulk()
    }
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let ns = self.tracker.spec().n_sub();
        let q = self.tracker.solve(&y[..ns])?;
        let m = DVector::from_column_slice(&y[ns..]);
        let memory = &q.blocks.sb * &m;
        for k in 0..ns {
            dy[k] = q.v[k] + memory[k];
        }
        let v = DVector::from_column_slice(&q.v);
        let dm = -(&q.sensitivity * v) + (&q.jac_bb - &q.sensitivity * &q.blocks.sb) * m;
        dy[ns..].copy_from_slice(dm.as_slice());
        Ok(())
    }
}

/// Self-consistent memory (ZMs): subnetwork ODEs plus auxiliary `m_b`.
pub fn integrate_zms(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<Trajectory> {
    integrate_zms_with(spec, x_sub0, t_end, &OdeOptions::default())
}

pub fn integrate_zms_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    check_start(spec, x_sub0, t_end)?;
    let mut y0 = x_sub0.to_vec();
    y0.extend(std::iter::repeat_n(0.0, spec.n_bulk()));
    let mut sys = ZmsSystem {
        tracker: QssTracker::new(spec),
    };
    let sol = integrate(&mut sys, 0.0, &y0, t_end, opts)?;
    zms_trajectory(spec, sol, Method::Zms)
}

pub(crate) fn zms_trajectory(
    spec: &SystemSpec,
    sol: OdeSolution,
    method: Method,
) -> Result<Trajectory> {
    let ns = spec.n_sub();
    let states_sub: Vec<Vec<f64>> = sol.y.iter().map(|y| y[..ns].to_vec()).collect();
    Ok(Trajectory {
        method,
        states_bulk: qss_bulk_along(spec, &states_sub)?,
        aux_m: Some(sol.y.iter().map(|y| y[ns..].to_vec()).collect()),
        derivs_sub: sol.dy.iter().map(|y| y[..ns].to_vec()).collect(),
        states_sub,
        times: sol.t,
    })
}

/// ZMn solver settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZmnOptions {
    /// Fixed PECE step; defaults to `t_end / 2000`.
    pub step: Option<f64>,
    /// When set, the run is repeated at half the step and the sup-norm difference on the
    /// coarse grid must not exceed this tolerance.
    pub richardson_tol: Option<f64>,
}

/// One history point's kernel: `(φ_v(x_j, τ), E(τ)ᵀ c(x_j))` at the current lag.
struct KernelTrack {
    y: Vec<f64>,
    bulk_guess: Vec<f64>,
    substeps: usize,
    value: Vec<f64>,
}

impl KernelTrack {
    fn start(q: &QssSolution) -> Self {
        let ing = MemoryIngredients::from_qss(q);
        let mut y = q.x_sub.clone();
        y.extend(ing.c.iter());
        Self {
            value: ing.amplitude().as_slice().to_vec(),
            y,
            bulk_guess: q.x_bulk_star.clone(),
            substeps: 1,
        }
    }

    fn advance(&mut self, spec: &SystemSpec, h: f64) -> Result<()> {
        let (ns, nb) = (spec.n_sub(), spec.n_bulk());
        let mut sys = FlowKernel {
            tracker: QssTracker::seeded(spec, self.bulk_guess.clone()),
            ns,
            nb,
        };
        let dt = h / self.substeps as f64;
        for _ in 0..self.substeps {
            self.y = rk4_step(&mut sys, 0.0, &self.y, dt)?;
        }
        let q = sys.tracker.solve(&self.y[..ns])?;
        self.value = kernel_output(&q, &self.y[ns..]);
        self.bulk_guess = q.x_bulk_star;
        Ok(())
    }
}

/// Stiffness-aware substep count so RK4 stays well inside its stability region.
fn kernel_substeps(q: &QssSolution, h: f64) -> usize {
    let gen = &q.jac_bb - &q.sensitivity * &q.blocks.sb;
    let flow_jac = &q.blocks.ss + &q.blocks.sb * &q.sensitivity;
    let rate = norm1(&gen).max(norm1(&flow_jac));
    ((h * rate).ceil() as usize).clamp(1, 64)
}

/// Nonlinear ZM (ZMn): `dx_s/dt = v_s + ∫₀ᵗ M_s(x^s(t'), t − t') dt'`.
///
/// Heun predictor-corrector on a fixed grid; the memory integral uses the trapezoidal
/// rule over stored history points, each carrying its own incrementally advanced kernel.
pub fn integrate_zmn(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<Trajectory> {
    integrate_zmn_with(spec, x_sub0, t_end, &ZmnOptions::default())
}

pub fn integrate_zmn_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    opts: &ZmnOptions,
) -> Result<Trajectory> {
    check_start(spec, x_sub0, t_end)?;
    let h = opts.step.unwrap_or(t_end / 2000.0);
    if !(h > 0.0) || h > t_end {
        return Err(Error::InvalidArgument(format!("invalid ZMn step {h}")));
    }
    let steps = (t_end / h).round().max(1.0) as usize;
    let coarse = zmn_fixed(spec, x_sub0, t_end, steps)?;
    let Some(tol) = opts.richardson_tol else {
        return Ok(coarse);
    };
    let fine = zmn_fixed(spec, x_sub0, t_end, 2 * steps)?;
    let difference = zmn_step_difference(&coarse, &fine);
    if difference > tol {
        return Err(Error::StepTooCoarse {
            difference,
            tolerance: tol,
        });
    }
    Ok(fine)
}

/// Sup-norm difference between a run and its half-step rerun on the coarse grid.
pub fn zmn_step_difference(coarse: &Trajectory, fine: &Trajectory) -> f64 {
    coarse
        .states_sub
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = &fine.states_sub[2 * i];
            x.iter()
                .zip(y)
                .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()))
        })
        .fold(0.0, f64::max)
}

fn zmn_fixed(spec: &SystemSpec, x_sub0: &[f64], t_end: f64, steps: usize) -> Result<Trajectory> {
    let h = t_end / steps as f64;
    let ns = spec.n_sub();
    let mut tracker = QssTracker::new(spec);

    let mut q = tracker.solve(x_sub0)?;
    let mut tracks = vec![KernelTrack::start(&q)];
    tracks[0].substeps = kernel_substeps(&q, h);
    let mut x = x_sub0.to_vec();
    let mut drift: Vec<f64> = q.v.clone();

    let mut times = vec![0.0];
    let mut states_sub = vec![x.clone()];
    let mut states_bulk = vec![q.x_bulk_star.clone()];
    let mut derivs_sub = vec![drift.clone()];

    for n in 0..steps {
        // Predict.
        let x_pred: Vec<f64> = (0..ns).map(|k| x[k] + h * drift[k]).collect();
        ensure_finite(&x_pred, "ZMn predictor")?;

        // Advance every history kernel by one lag step.
        tracks
            .par_iter_mut()
            .map(|t| t.advance(spec, h))
            .collect::<Result<Vec<()>>>()
            .map_err(|e| Error::IntegratorFailure {
                t: (n + 1) as f64 * h,
                reason: format!("kernel propagation: {e}"),
            })?;
        // Trapezoid: endpoint j = 0 and j = n + 1 get half weight.
        let mut history = vec![0.0; ns];
        for (j, t) in tracks.iter().enumerate() {
            let w = if j == 0 { 0.5 } else { 1.0 };
            for k in 0..ns {
                history[k] += w * t.value[k];
            }
        }

        let mut evaluate = |xp: &[f64]| -> Result<(QssSolution, Vec<f64>, Vec<f64>)> {
            let qp = tracker.solve(xp)?;
            let amp = MemoryIngredients::from_qss(&qp).amplitude();
            let integ: Vec<f64> = (0..ns).map(|k| h * (history[k] + 0.5 * amp[k])).collect();
            let f: Vec<f64> = (0..ns).map(|k| qp.v[k] + integ[k]).collect();
            Ok((qp, integ, f))
        };
        let (_, _, f_pred) = evaluate(&x_pred)?;

        // Correct.
        let x_new: Vec<f64> = (0..ns)
            .map(|k| x[k] + 0.5 * h * (drift[k] + f_pred[k]))
            .collect();
        ensure_finite(&x_new, "ZMn corrector")?;
        let (q_new, _, f_new) = evaluate(&x_new)?;
        q = q_new;
        x = x_new;
        drift = f_new;

        let mut track = KernelTrack::start(&q);
        track.substeps = kernel_substeps(&q, h);
        tracks.push(track);

        times.push((n + 1) as f64 * h);
        states_sub.push(x.clone());
        states_bulk.push(q.x_bulk_star.clone());
        derivs_sub.push(drift.clone());
    }
    if max_abs(&x).is_nan() {
        return Err(Error::NonFinite("ZMn state"));
    }
    Ok(Trajectory {
        method: Method::Zmn,
        times,
        states_sub,
        states_bulk,
        aux_m: None,
        derivs_sub,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::expm;
    use crate::zoo::zoo;

    #[test]
    fn bistable_ingredients_at_one() {
        let s = zoo("bistable", &[]).unwrap();
        let ing = memory_ingredients(&s, &[1.0]).unwrap();
        // f0 = ∂R1/∂x2 = −2a x2*/(1 + x2*²)² with x2* = 2.
        assert!((ing.f0[(0, 0)] + 16.0 / 25.0).abs() < 1e-10);
    }

    #[test]
    fn flow_at_zero_lag_is_identity() {
        let s = zoo("bistable", &[]).unwrap();
        assert_eq!(flow_qss(&s, &[0.7], 0.0).unwrap(), vec![0.7]);
    }

    #[test]
    fn propagator_at_zero_lag_is_identity() {
        let s = zoo("neuraltube", &[]).unwrap();
        let p = propagator(&s, &[0.2, 0.3], 0.0).unwrap();
        assert_eq!(p.e, DMatrix::identity(2, 2));
    }

    #[test]
    fn zero_lag_kernel_matches_direct_formula() {
        let s = zoo("neuraltube", &[("p", 0.3)]).unwrap();
        let x = [0.15, 0.4];
        let m = memory_zmn(&s, &x, 0.0).unwrap();
        let ing = memory_ingredients(&s, &x).unwrap();
        let direct = ing.f0.transpose() * &ing.c;
        for k in 0..2 {
            assert!((m[k] - direct[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn random_force_vanishes_at_qss_and_is_linear() {
        let s = zoo("neuraltube", &[]).unwrap();
        let x = [0.1, 0.2];
        let q = solve_qss(&s, &x, None).unwrap();
        let f = random_force_approx(&s, &x, &q.x_bulk_star, 0.7).unwrap();
        assert!(max_abs(&f) < 1e-15);
        let d1: Vec<f64> = q.x_bulk_star.iter().map(|v| v + 0.01).collect();
        let d2: Vec<f64> = q.x_bulk_star.iter().map(|v| v + 0.02).collect();
        let f1 = random_force_approx(&s, &x, &d1, 0.7).unwrap();
        let f2 = random_force_approx(&s, &x, &d2, 0.7).unwrap();
        for k in 0..2 {
            assert!((2.0 * f1[k] - f2[k]).abs() < 1e-12 * f2[k].abs().max(1.0));
        }
    }

    #[test]
    fn random_force_zero_lag_is_linearized_drift_gap() {
        let s = zoo("bistable", &[]).unwrap();
        let q = solve_qss(&s, &[0.8], None).unwrap();
        let dev = 0.3;
        let f = random_force_approx(&s, &[0.8], &[q.x_bulk_star[0] + dev], 0.0).unwrap();
        assert!((f[0] - dev * q.blocks.sb[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Full,
            Method::Qss,
            Method::Zmn,
            Method::Zms,
            Method::ZmsStar,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("fast".parse::<Method>().is_err());
    }

    #[test]
    fn negative_lag_rejected() {
        let s = zoo("bistable", &[]).unwrap();
        assert!(matches!(
            memory_zmn(&s, &[1.0], -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    struct LinearNet;
    impl crate::system::Model for LinearNet {
        fn dim(&self) -> usize {
            3
        }
        fn drift(&self, x: &[f64], out: &mut [f64]) {
            out[0] = 1.0 - 0.5 * x[0] + 0.3 * x[1] - 0.2 * x[2];
            out[1] = 0.4 * x[0] - 2.0 * x[1] + 0.5 * x[2] + 0.1;
            out[2] = -0.3 * x[0] + 0.2 * x[1] - 1.5 * x[2];
        }
    }

    fn linear_net() -> SystemSpec {
        let p = crate::system::Partition::new(3, vec![0], vec![1, 2]).unwrap();
        SystemSpec::builder(
            "linear",
            vec!["a".into(), "b".into(), "c".into()],
            p,
            std::sync::Arc::new(LinearNet),
        )
        .build()
        .unwrap()
    }

    #[test]
    fn memory_methods_are_exact_on_a_two_bulk_linear_network() {
        let s = linear_net();
        let o = OdeOptions::with_tolerances(1e-11, 1e-13);
        let full = integrate_full_with(&s, &[2.0], 8.0, &o).unwrap();
        let zms = integrate_zms_with(&s, &[2.0], 8.0, &o).unwrap();
        let zmn = integrate_zmn_with(
            &s,
            &[2.0],
            8.0,
            &ZmnOptions {
                step: Some(0.01),
                richardson_tol: None,
            },
        )
        .unwrap();
        for k in 0..=80 {
            let t = 0.1 * k as f64;
            let f = full.sample_sub(t)[0];
            assert!((zms.sample_sub(t)[0] - f).abs() < 1e-8, "zms at t = {t}");
            assert!((zmn.sample_sub(t)[0] - f).abs() < 1e-4, "zmn at t = {t}");
        }
    }

    #[test]
    fn propagator_of_linear_network_is_matrix_exponential() {
        let s = linear_net();
        let ing = memory_ingredients(&s, &[0.4]).unwrap();
        let tau = 1.3;
        let p =
            propagator_with(&s, &[0.4], tau, &OdeOptions::with_tolerances(1e-11, 1e-13)).unwrap();
        let exact = expm(&(&ing.l * tau));
        assert!((p.e - exact).abs().max() < 1e-8);
    }

    #[test]
    fn propagator_composes_along_the_flow() {
        let s = zoo("neuraltube", &[("p", 0.2)]).unwrap();
        let o = OdeOptions::with_tolerances(1e-11, 1e-13);
        let x = [0.3, 0.1];
        let whole = propagator_with(&s, &x, 0.9, &o).unwrap();
        let first = propagator_with(&s, &x, 0.4, &o).unwrap();
        let second = propagator_with(&s, &first.endpoint, 0.5, &o).unwrap();
        let composed = &first.e * &second.e;
        assert!((whole.e - composed).abs().max() < 1e-7);
        for k in 0..2 {
            assert!((whole.endpoint[k] - second.endpoint[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_series_matches_propagator_contraction() {
        let s = zoo("neuraltube", &[("p", 0.2)]).unwrap();
        let o = OdeOptions::with_tolerances(1e-11, 1e-13);
        let x = [0.3, 0.1];
        let ing = memory_ingredients(&s, &x).unwrap();
        let series = memory_zmn_series_with(&s, &x, &[0.0, 0.5, 1.5], &o).unwrap();
        for (i, tau) in [0.0, 0.5, 1.5].into_iter().enumerate() {
            let p = propagator_with(&s, &x, tau, &o).unwrap();
            let end = memory_ingredients(&s, &p.endpoint).unwrap();
            let m = end.f0.transpose() * p.e.transpose() * &ing.c;
            for k in 0..2 {
                assert!((series[i][k] - m[k]).abs() < 1e-8, "τ={tau}");
            }
        }
    }

    #[test]
    fn kernel_vanishes_at_fixed_point() {
        let s = zoo("bistable", &[]).unwrap();
        let r = bisect_symmetric_root();
        let m = memory_zmn_series(&s, &[r], &[0.0, 1.0, 3.0]).unwrap();
        for v in m {
            assert!(v[0].abs() < 1e-9, "{v:?}");
        }
    }

    fn bisect_symmetric_root() -> f64 {
        let (mut lo, mut hi) = (1.0, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + mid * mid) < 4.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn flow_is_a_semigroup() {
        let s = zoo("repressilator", &[]).unwrap();
        let x = [0.5, 2.0];
        let o = OdeOptions::with_tolerances(1e-11, 1e-13);
        let a = flow_qss_with(&s, &x, 0.7, &o).unwrap();
        let b = flow_qss_with(&s, &flow_qss_with(&s, &x, 0.3, &o).unwrap(), 0.4, &o).unwrap();
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-8);
        }
    }
}
