//! Linearized memory near fixed points and the two comparison kernels (Gouasmi vanilla
//! and its QSS adaptation G-QSS).

use nalgebra::{DMatrix, DVector};

use crate::analysis::{find_fixed_points, SystemKind};
use crate::error::{Error, Result};
use crate::linalg::{expm, max_abs};
use crate::memory::{fmt_f64, memory_ingredients, MemoryIngredients};
use crate::qss::solve_qss;
use crate::system::SystemSpec;
use crate::zoo::zoo;

/// Memory kernel linearized about a full fixed point.
#[derive(Debug, Clone)]
pub struct LinearKernel {
    pub fixed_point: Vec<f64>,
    /// `l` at the fixed point.
    pub l: DMatrix<f64>,
    /// `∂c_b/∂x_s'` (n_bulk × n_sub).
    pub c_jacobian: DMatrix<f64>,
    /// `f0` at the fixed point (n_bulk × n_sub).
    pub f0: DMatrix<f64>,
}

impl LinearKernel {
    /// `K(τ)_{ss'} = Σ_{b,b'} (∂c_b'/∂x_s') (e^{lτ})_{b'b} f0_{bs}`.
    pub fn kernel(&self, tau: f64) -> DMatrix<f64> {
        let e = expm(&(&self.l * tau));
        self.f0.transpose() * e.transpose() * &self.c_jacobian
    }

    /// Memory on every receiver from a past subnetwork deviation `x^s(t') − x^s*`.
    pub fn memory(&self, deviation: &[f64], tau: f64) -> Vec<f64> {
        (self.kernel(tau) * DVector::from_column_slice(deviation))
            .as_slice()
            .to_vec()
    }

    /// Zero-lag amplitude of receiver `s` from sender `s'` through bulk channel `b`:
    /// `(∂c_b/∂x_s') f0_{bs}`.
    pub fn channel_amplitude(&self, receiver: usize, sender: usize, bulk: usize) -> f64 {
        self.c_jacobian[(bulk, sender)] * self.f0[(bulk, receiver)]
    }
}

/// Linearize the ZMn/ZMs memory about `fixed_point` (full state).
pub fn linearize_memory(spec: &SystemSpec, fixed_point: &[f64]) -> Result<LinearKernel> {
    let residual = max_abs(&spec.drift_full(fixed_point)?);
    if !(residual < 1e-10) {
        return Err(Error::NotFixedPoint(residual));
    }
    let part = spec.partition();
    let sub = part.gather_sub(fixed_point);
    let bulk = part.gather_bulk(fixed_point);
    let at = |x: &[f64]| solve_qss(spec, x, Some(&bulk)).map(|q| MemoryIngredients::from_qss(&q));
    let centre = at(&sub)?;
    let (ns, nb) = (spec.n_sub(), spec.n_bulk());
    let mut dc = DMatrix::zeros(nb, ns);
    let mut x = sub.clone();
    let mut central = |k: usize, h: f64| -> Result<DVector<f64>> {
        x[k] = sub[k] + h;
        let plus = at(&x)?.c;
        x[k] = sub[k] - h;
        let minus = at(&x)?.c;
        x[k] = sub[k];
        Ok((plus - minus) / (2.0 * h))
    };
    for k in 0..ns {
        // Richardson-extrapolated central differences (fourth order).
        let h = 1e-4 * sub[k].abs().max(1.0);
        let coarse = central(k, h)?;
        let fine = central(k, 0.5 * h)?;
        dc.set_column(k, &((fine * 4.0 - coarse) / 3.0));
    }
    Ok(LinearKernel {
        fixed_point: fixed_point.to_vec(),
        l: centre.l,
        c_jacobian: dc,
        f0: centre.f0,
    })
}

/// Gouasmi vanilla memory: projection onto zero bulk,
/// `M_s = Σ (∂R_s/∂x_b')(e^{kτ})_{b'b} R_b` with every factor at `(x^s, 0)`.
pub fn memory_gouasmi(spec: &SystemSpec, x_sub: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lag τ must be ≥ 0, got {tau}"
        )));
    }
    let part = spec.partition();
    let x = part.scatter(x_sub, &vec![0.0; spec.n_bulk()]);
    let drift = spec.drift_full(&x)?;
    let blocks = spec.blocks(&x)?;
    let r_b = DVector::from_vec(part.gather_bulk(&drift));
    let m = &blocks.sb * expm(&(&blocks.bb * tau)) * r_b;
    Ok(m.as_slice().to_vec())
}

/// G-QSS memory: the ZMn ingredients frozen at `x^s`,
/// `M̃_s = Σ_b' c_b' [e^{lτ} f0]_{b's}`.
pub fn memory_gqss(spec: &SystemSpec, x_sub: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lag τ must be ≥ 0, got {tau}"
        )));
    }
    let ing = memory_ingredients(spec, x_sub)?;
    let f = expm(&(&ing.l * tau)) * &ing.f0;
    Ok((f.transpose() * &ing.c).as_slice().to_vec())
}

/// One row of the linear amplitude sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeRow {
    pub p: f64,
    pub branch_id: usize,
    pub receiver: String,
    pub sender: String,
    pub channel: String,
    pub amplitude: f64,
}

/// Zero-lag linearized amplitudes along the neural tube, per stable branch and bulk channel.
///
/// Branch ids follow stable fixed points across positions by nearest match (in the
/// subnetwork coordinates) to the previous position's points.
pub fn linear_amplitude_sweep(
    positions: &[f64],
    overrides: &[(&str, f64)],
) -> Result<Vec<AmplitudeRow>> {
    if let Some(p) = positions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "position {p} outside [0, 1]"
        )));
    }
    let mut rows = Vec::new();
    let mut branches: Vec<Vec<f64>> = Vec::new();
    let mut previous: Vec<(usize, Vec<f64>)> = Vec::new();
    for &p in positions {
        let mut params: Vec<(&str, f64)> = overrides.to_vec();
        params.push(("p", p));
        let spec = zoo("neuraltube", &params)?;
        let fps = find_fixed_points(&spec, SystemKind::Full, 128)?;
        let stable: Vec<_> = fps.stable().collect();
        if stable.is_empty() {
            return Err(Error::NoFixedPoints(format!(
                "no stable fixed point at p = {p}"
            )));
        }
        let mut current = Vec::with_capacity(stable.len());
        let mut taken = vec![false; previous.len()];
        for fp in stable {
            let nearest = previous
                .iter()
                .enumerate()
                .filter(|(k, _)| !taken[*k])
                .map(|(k, (id, x))| (k, *id, crate::linalg::max_abs(&diff(x, &fp.sub))))
                .min_by(|a, b| a.2.total_cmp(&b.2));
            let id = match nearest {
                Some((k, id, d)) if d < 0.1 => {
                    taken[k] = true;
                    id
                }
                _ => {
                    branches.push(fp.sub.clone());
                    branches.len() - 1
                }
            };
            current.push((id, fp.sub.clone()));
            let kernel = linearize_memory(&spec, &fp.full_state)?;
            let sub = spec.sub_names();
            let bulk = spec.bulk_names();
            for (r, rn) in sub.iter().enumerate() {
                for (s, sn) in sub.iter().enumerate() {
                    for (b, bn) in bulk.iter().enumerate() {
                        rows.push(AmplitudeRow {
                            p,
                            branch_id: id,
                            receiver: rn.to_string(),
                            sender: sn.to_string(),
                            channel: bn.to_string(),
                            amplitude: kernel.channel_amplitude(r, s, b),
                        });
                    }
                }
            }
        }
        previous = current;
    }
    Ok(rows)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// CSV `p,branch_id,receiver,sender,channel,amplitude`.
pub fn amplitude_csv(rows: &[AmplitudeRow]) -> String {
    let mut out = String::from("p,branch_id,receiver,sender,channel,amplitude\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(r.p),
            r.branch_id,
            r.receiver,
            r.sender,
            r.channel,
            fmt_f64(r.amplitude)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::memory_zmn;
    use crate::zoo::zoo;

    #[test]
    fn gqss_matches_zmn_at_zero_lag() {
        let s = zoo("neuraltube", &[("p", 0.4)]).unwrap();
        let x = [0.3, 0.6];
        let a = memory_gqss(&s, &x, 0.0).unwrap();
        let b = memory_zmn(&s, &x, 0.0).unwrap();
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gouasmi_zero_lag_closed_form() {
        let s = zoo("bistable", &[]).unwrap();
        // At x2 = 0: ∂R1/∂x2 = 0, so the vanilla memory vanishes for all lags.
        for tau in [0.0, 1.0, 4.0] {
            assert_eq!(memory_gouasmi(&s, &[0.7], tau).unwrap(), vec![0.0]);
        }
        let w = zoo("wilhelm", &[]).unwrap();
        // Wilhelm at x2 = 0: R1 depends on x2 through 2k1 − k3 x1, R2 = k2 x1².
        let x1 = 1.5;
        let m = memory_gouasmi(&w, &[x1], 0.0).unwrap();
        let expected = (2.0 * 10.0 - 2.0 * x1) * (1.0 * x1 * x1);
        assert!((m[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn linear_kernel_requires_fixed_point() {
        let s = zoo("bistable", &[]).unwrap();
        assert!(matches!(
            linearize_memory(&s, &[1.0, 1.0]),
            Err(Error::NotFixedPoint(_))
        ));
    }

    #[test]
    fn linear_kernel_of_zero_deviation_is_zero() {
        let s = zoo("bistable", &[]).unwrap();
        let fp = find_fixed_points(&s, SystemKind::Full, 32).unwrap();
        let k = linearize_memory(&s, &fp.stable().next().unwrap().full_state).unwrap();
        assert_eq!(k.memory(&[0.0], 1.0), vec![0.0]);
    }

    #[test]
    fn olig2_only_receives_through_irx3() {
        let rows = linear_amplitude_sweep(&[0.1, 0.65], &[]).unwrap();
        assert!(!rows.is_empty());
        for r in rows
            .iter()
            .filter(|r| r.receiver == "Olig2" && r.channel == "Pax6")
        {
            assert_eq!(r.amplitude, 0.0);
        }
    }
}
