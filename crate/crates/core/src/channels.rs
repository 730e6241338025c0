//! Channel decomposition of ZMn and ZMs memory, ranking, and channel ablation (ZMs*).
//!
//! A channel `(s, b, b', s')` carries memory from sender `s'` into the bulk through
//! `∂R_b'/∂x_s'`, propagates inside the bulk, and returns into receiver `s` through
//! `∂R_s/∂x_b`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::memory::{fmt_f64, propagator_with, zms_trajectory, Method, Trajectory};
use crate::ode::{integrate, OdeOptions, OdeSystem};
use crate::qss::{solve_qss, QssSolution, QssTracker};
use crate::system::SystemSpec;

const PATTERN_SAMPLES: usize = 20;
const PATTERN_SEED: u64 = 0xc4a7;

/// Channel indices: `receiver`/`sender` index the subnetwork, `incoming`/`outgoing` the bulk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelKey {
    pub receiver: usize,
    pub incoming: usize,
    pub outgoing: usize,
    pub sender: usize,
}

impl ChannelKey {
    pub fn new(receiver: usize, incoming: usize, outgoing: usize, sender: usize) -> Self {
        Self {
            receiver,
            incoming,
            outgoing,
            sender,
        }
    }

    /// `receiver:incoming:outgoing:sender` with species names.
    pub fn label(&self, spec: &SystemSpec) -> String {
        let sub = spec.sub_names();
        let bulk = spec.bulk_names();
        format!(
            "{}:{}:{}:{}",
            sub[self.receiver], bulk[self.incoming], bulk[self.outgoing], sub[self.sender]
        )
    }

    pub fn parse(spec: &SystemSpec, label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.trim().split(':').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "channel `{label}` must have the form s:b:b':s'"
            )));
        }
        let sub = spec.sub_names();
        let bulk = spec.bulk_names();
        let find = |names: &[&str], name: &str, role: &str| {
            names.iter().position(|n| *n == name).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "`{name}` is not a {role} species in channel `{label}`"
                ))
            })
        };
        Ok(Self {
            receiver: find(&sub, parts[0], "subnetwork")?,
            incoming: find(&bulk, parts[1], "bulk")?,
            outgoing: find(&bulk, parts[2], "bulk")?,
            sender: find(&sub, parts[3], "subnetwork")?,
        })
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.receiver, self.incoming, self.outgoing, self.sender
        )
    }
}

/// One channel's memory contribution along a trajectory.
#[derive(Debug, Clone)]
pub struct ChannelSeries {
    pub key: ChannelKey,
    pub times: Vec<f64>,
    pub contribution: Vec<f64>,
    /// `∫|contribution| dt` (trapezoid on the output times).
    pub score: f64,
}

impl ChannelSeries {
    fn new(key: ChannelKey, times: Vec<f64>, contribution: Vec<f64>) -> Self {
        let score = times
            .windows(2)
            .zip(contribution.windows(2))
            .map(|(t, c)| 0.5 * (t[1] - t[0]) * (c[0].abs() + c[1].abs()))
            .sum();
        Self {
            key,
            times,
            contribution,
            score,
        }
    }
}

/// Susceptibility sparsity: which `(s, b)` and `(b', s')` pairs are ever nonzero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPattern {
    /// `(receiver, incoming)` with `∂R_s/∂x_b` not identically zero.
    pub incoming: Vec<(usize, usize)>,
    /// `(outgoing, sender)` with `∂R_b'/∂x_s'` not identically zero.
    pub outgoing: Vec<(usize, usize)>,
}

impl ChannelPattern {
    pub fn channels(&self) -> Vec<ChannelKey> {
        let mut out = Vec::with_capacity(self.incoming.len() * self.outgoing.len());
        for &(s, b) in &self.incoming {
            for &(bp, sp) in &self.outgoing {
                out.push(ChannelKey::new(s, b, bp, sp));
            }
        }
        out.sort();
        out
    }
}

/// Union of Jacobian nonzeros at the default point and 20 seeded points in the box.
pub fn channel_pattern(spec: &SystemSpec) -> Result<ChannelPattern> {
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut sb = vec![false; ns * nb];
    let mut bs = vec![false; nb * ns];
    let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
    let mut points = vec![spec.default_point().to_vec()];
    for _ in 0..PATTERN_SAMPLES {
        points.push(
            spec.phys_box()
                .iter()
                .map(|&(lo, hi)| {
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect(),
        );
    }
    for x in &points {
        let blocks = spec.blocks(x)?;
        for s in 0..ns {
            for b in 0..nb {
                sb[s * nb + b] |= blocks.sb[(s, b)] != 0.0;
                bs[b * ns + s] |= blocks.bs[(b, s)] != 0.0;
            }
        }
    }
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    for s in 0..ns {
        for b in 0..nb {
            if sb[s * nb + b] {
                incoming.push((s, b));
            }
        }
    }
    for b in 0..nb {
        for s in 0..ns {
            if bs[b * ns + s] {
                outgoing.push((b, s));
            }
        }
    }
    Ok(ChannelPattern { incoming, outgoing })
}

/// `J⁻¹` at a QSS root.
fn jac_inverse(q: &QssSolution) -> Result<DMatrix<f64>> {
    let nb = q.jac_bb.nrows();
    Lu::new(&q.jac_bb)?.solve_mat(&DMatrix::identity(nb, nb))
}

/// Source of the channel ODE for outgoing pair `(b', s')`: `g_b = (J⁻¹)_{bb'} A_{b's'} v_{s'}`.
fn channel_source(
    jinv: &DMatrix<f64>,
    q: &QssSolution,
    outgoing: usize,
    sender: usize,
) -> DVector<f64> {
    let scale = q.blocks.bs[(outgoing, sender)] * q.v[sender];
    jinv.column(outgoing) * scale
}

/// ZMn memory at `(x^s, τ)` split into channels, in key order.
pub fn decompose_zmn(spec: &SystemSpec, x_sub: &[f64], tau: f64) -> Result<Vec<(ChannelKey, f64)>> {
    decompose_zmn_with(spec, x_sub, tau, &OdeOptions::default())
}

pub fn decompose_zmn_with(
    spec: &SystemSpec,
    x_sub: &[f64],
    tau: f64,
    opts: &OdeOptions,
) -> Result<Vec<(ChannelKey, f64)>> {
    let pattern = channel_pattern(spec)?;
    let q0 = solve_qss(spec, x_sub, None)?;
    let jinv = jac_inverse(&q0)?;
    let prop = propagator_with(spec, x_sub, tau, opts)?;
    let q_end = solve_qss(spec, &prop.endpoint, Some(&q0.x_bulk_star))?;
    let mut out = Vec::new();
    for key in pattern.channels() {
        // Σ_{b''} g_{b''} E_{b''b}, then the incoming susceptibility at the propagated state.
        let g = channel_source(&jinv, &q0, key.outgoing, key.sender);
        let propagated = g.dot(&prop.e.column(key.incoming));
        out.push((
            key,
            propagated * q_end.blocks.sb[(key.receiver, key.incoming)],
        ));
    }
    Ok(out)
}

/// Channel-resolved ZMs: `y = (x^s, m, u^{(b',s')}...)`; `x^s` is driven by the aggregate `m`
/// or, when a keep set is given, by the kept channels only.
struct ChannelSystem<'a> {
    tracker: QssTracker<'a>,
    pairs: Vec<(usize, usize)>,
    /// Kept channels as `(receiver, incoming, pair index)`; `None` drives with `m`.
    kept: Option<Vec<(usize, usize, usize)>>,
    with_aggregate: bool,
}

impl ChannelSystem<'_> {
    fn offsets(&self) -> (usize, usize, usize) {
        let spec = self.tracker.spec();
        let (ns, nb) = (spec.n_sub(), spec.n_bulk());
        let m_len = if self.with_aggregate { nb } else { 0 };
        (ns, nb, ns + m_len)
    }
}

impl OdeSystem for ChannelSystem<'_> {
    fn dim(&self) -> usize {
        let (_, nb, u0) = self.offsets();
        u0 + nb * self.pairs.len()
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let (ns, nb, u0) = self.offsets();
        let q = self.tracker.solve(&y[..ns])?;
        let jinv = jac_inverse(&q)?;
        let gen = &q.jac_bb - &q.sensitivity * &q.blocks.sb;
        dy[..ns].copy_from_slice(&q.v);
        if self.with_aggregate {
            let m = DVector::from_column_slice(&y[ns..ns + nb]);
            let c = -(&q.sensitivity * DVector::from_column_slice(&q.v));
            let dm = c + &gen * &m;
            dy[ns..ns + nb].copy_from_slice(dm.as_slice());
            if self.kept.is_none() {
                let mem = &q.blocks.sb * m;
                for k in 0..ns {
                    dy[k] += mem[k];
                }
            }
        }
        for (p, &(bp, sp)) in self.pairs.iter().enumerate() {
            let range = u0 + p * nb..u0 + (p + 1) * nb;
            let u = DVector::from_column_slice(&y[range.clone()]);
            let du = channel_source(&jinv, &q, bp, sp) + &gen * u;
            dy[range].copy_from_slice(du.as_slice());
        }
        if let Some(kept) = &self.kept {
            for &(s, b, p) in kept {
                dy[s] += q.blocks.sb[(s, b)] * y[u0 + p * nb + b];
            }
        }
        Ok(())
    }
}

/// ZMs trajectory with every channel's contribution recorded.
#[derive(Debug, Clone)]
pub struct ZmsDecomposition {
    pub trajectory: Trajectory,
    pub channels: Vec<ChannelSeries>,
    /// Aggregate memory term `Σ_b (∂R_s/∂x_b) m_b` per output time, one row per time.
    pub total: Vec<Vec<f64>>,
}

impl ZmsDecomposition {
    /// Per receiver and time, channel sum minus aggregate, relative to the largest term.
    pub fn max_relative_gap(&self) -> f64 {
        let ns = self.total.first().map_or(0, Vec::len);
        let mut worst = 0.0_f64;
        for (i, tot) in self.total.iter().enumerate() {
            for s in 0..ns {
                let sum: f64 = self
                    .channels
                    .iter()
                    .filter(|c| c.key.receiver == s)
                    .map(|c| c.contribution[i])
                    .sum();
                let scale = tot[s].abs().max(f64::MIN_POSITIVE);
                let channel_scale = self
                    .channels
                    .iter()
                    .filter(|c| c.key.receiver == s)
                    .map(|c| c.contribution[i].abs())
                    .fold(scale, f64::max);
                worst = worst.max((sum - tot[s]).abs() / channel_scale);
            }
        }
        worst
    }

    /// CSV `t,<s:b:b':s'>...`.
    pub fn to_csv(&self, spec: &SystemSpec) -> String {
        let mut out = String::from("t");
        for c in &self.channels {
            out.push(',');
            out.push_str(&c.key.label(spec));
        }
        out.push('\n');
        for (i, t) in self.trajectory.times.iter().enumerate() {
            out.push_str(&fmt_f64(*t));
            for c in &self.channels {
                out.push(',');
                out.push_str(&fmt_f64(c.contribution[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Ranked summary CSV `channel,score`.
pub fn ranked_csv(spec: &SystemSpec, ranked: &[ChannelSeries]) -> String {
    let mut out = String::from("channel,score\n");
    for c in ranked {
        out.push_str(&format!("{},{}\n", c.key.label(spec), fmt_f64(c.score)));
    }
    out
}

fn check_start(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<()> {
    if x_sub0.len() != spec.n_sub() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_sub(),
            got: x_sub0.len(),
        });
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "t_end must be > 0, got {t_end}"
        )));
    }
    crate::error::ensure_finite(x_sub0, "initial condition")
}

pub fn decompose_zms(spec: &SystemSpec, x_sub0: &[f64], t_end: f64) -> Result<ZmsDecomposition> {
    decompose_zms_with(spec, x_sub0, t_end, &OdeOptions::default())
}

pub fn decompose_zms_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<ZmsDecomposition> {
    check_start(spec, x_sub0, t_end)?;
    let pattern = channel_pattern(spec)?;
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut sys = ChannelSystem {
        tracker: QssTracker::new(spec),
        pairs: pattern.outgoing.clone(),
        kept: None,
        with_aggregate: true,
    };
    let mut y0 = x_sub0.to_vec();
    y0.resize(sys.dim(), 0.0);
    let sol = integrate(&mut sys, 0.0, &y0, t_end, opts)?;

    let mut tracker = QssTracker::new(spec);
    let a_sb: Vec<DMatrix<f64>> = sol
        .y
        .iter()
        .map(|y| tracker.solve(&y[..ns]).map(|q| q.blocks.sb))
        .collect::<Result<_>>()?;
    let total = sol
        .y
        .iter()
        .zip(&a_sb)
        .map(|(y, a)| {
            (a * DVector::from_column_slice(&y[ns..ns + nb]))
                .as_slice()
                .to_vec()
        })
        .collect();
    let u0 = ns + nb;
    let channels = pattern
        .channels()
        .into_iter()
        .map(|key| {
            let p = pattern
                .outgoing
                .iter()
                .position(|&o| o == (key.outgoing, key.sender))
                .unwrap();
            let contribution = sol
                .y
                .iter()
                .zip(&a_sb)
                .map(|(y, a)| a[(key.receiver, key.incoming)] * y[u0 + p * nb + key.incoming])
                .collect();
            ChannelSeries::new(key, sol.t.clone(), contribution)
        })
        .collect();
    let trimmed = crate::ode::OdeSolution {
        t: sol.t.clone(),
        y: sol.y.iter().map(|y| y[..ns + nb].to_vec()).collect(),
        dy: sol.dy.iter().map(|y| y[..ns + nb].to_vec()).collect(),
    };
    Ok(ZmsDecomposition {
        trajectory: zms_trajectory(spec, trimmed, Method::Zms)?,
        channels,
        total,
    })
}

/// Descending by score, ties broken by key.
pub fn rank_channels(mut series: Vec<ChannelSeries>) -> Vec<ChannelSeries> {
    series.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)));
    series
}

/// ZMs with only the channels in `keep` feeding back into the subnetwork.
pub fn integrate_zms_star(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    keep: &BTreeSet<ChannelKey>,
) -> Result<Trajectory> {
    integrate_zms_star_with(spec, x_sub0, t_end, keep, &OdeOptions::default())
}

pub fn integrate_zms_star_with(
    spec: &SystemSpec,
    x_sub0: &[f64],
    t_end: f64,
    keep: &BTreeSet<ChannelKey>,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    check_start(spec, x_sub0, t_end)?;
    let available: BTreeSet<ChannelKey> = channel_pattern(spec)?.channels().into_iter().collect();
    if let Some(bad) = keep.iter().find(|k| !available.contains(k)) {
        return Err(Error::InvalidArgument(format!(
            "channel {} has an identically zero susceptibility",
            bad.label(spec)
        )));
    }
    let mut pairs: Vec<(usize, usize)> = keep.iter().map(|k| (k.outgoing, k.sender)).collect();
    pairs.sort();
    pairs.dedup();
    let kept = keep
        .iter()
        .map(|k| {
            let p = pairs.binary_search(&(k.outgoing, k.sender)).unwrap();
            (k.receiver, k.incoming, p)
        })
        .collect();
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut sys = ChannelSystem {
        tracker: QssTracker::new(spec),
        pairs,
        kept: Some(kept),
        with_aggregate: false,
    };
    let mut y0 = x_sub0.to_vec();
    y0.resize(sys.dim(), 0.0);
    let n_pairs = sys.pairs.len();
    let sol = integrate(&mut sys, 0.0, &y0, t_end, opts)?;
    // Aggregate auxiliary over the tracked outgoing pairs.
    let fold = |y: &Vec<f64>| {
        let mut out = y[..ns].to_vec();
        out.extend((0..nb).map(|b| (0..n_pairs).map(|p| y[ns + p * nb + b]).sum::<f64>()));
        out
    };
    let trimmed = crate::ode::OdeSolution {
        t: sol.t.clone(),
        y: sol.y.iter().map(fold).collect(),
        dy: sol.dy.iter().map(fold).collect(),
    };
    zms_trajectory(spec, trimmed, Method::ZmsStar)
}
