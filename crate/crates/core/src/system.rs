//! Partitioned dynamical systems `dx/dt = R(x)`.
//!
//! A [`SystemSpec`] couples a drift (and optionally an analytic Jacobian) with the
//! subnetwork/bulk partition. The partition is stored as index sets into the fixed species
//! order; reduced views are obtained by gathering, never by reordering the model.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{ensure_finite, Error, Result};

/// Drift of an ODE network in a fixed species order.
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Analytic Jacobian `∂R_i/∂x_j`, if the model provides one.
    fn jacobian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Disjoint subnetwork (S) and bulk (B) index sets covering every species once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sub: Vec<usize>,
    bulk: Vec<usize>,
}

impl Partition {
    pub fn new(n: usize, sub: Vec<usize>, bulk: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in sub.iter().chain(&bulk) {
            if i >= n {
                return Err(Error::InvalidPartition(format!(
                    "index {i} out of range for {n} species"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidPartition(format!(
                    "species index {i} assigned twice"
                )));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!(
                "species index {i} in neither subnetwork nor bulk"
            )));
        }
        if sub.is_empty() {
            return Err(Error::InvalidPartition("subnetwork is empty".into()));
        }
        if bulk.is_empty() {
            return Err(Error::EmptyBulk);
        }
        Ok(Self { sub, bulk })
    }

    pub fn sub(&self) -> &[usize] {
        &self.sub
    }

    pub fn bulk(&self) -> &[usize] {
        &self.bulk
    }

    pub fn n_sub(&self) -> usize {
        self.sub.len()
    }

    pub fn n_bulk(&self) -> usize {
        self.bulk.len()
    }

    pub fn n(&self) -> usize {
        self.sub.len() + self.bulk.len()
    }

    pub fn gather_sub(&self, x: &[f64]) -> Vec<f64> {
        self.sub.iter().map(|&i| x[i]).collect()
    }

    pub fn gather_bulk(&self, x: &[f64]) -> Vec<f64> {
        self.bulk.iter().map(|&i| x[i]).collect()
    }

    pub fn scatter(&self, x_sub: &[f64], x_bulk: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n()];
        self.scatter_into(x_sub, x_bulk, &mut x);
        x
    }

    pub fn scatter_into(&self, x_sub: &[f64], x_bulk: &[f64], x: &mut [f64]) {
        for (k, &i) in self.sub.iter().enumerate() {
            x[i] = x_sub[k];
        }
        for (k, &i) in self.bulk.iter().enumerate() {
            x[i] = x_bulk[k];
        }
    }
}

/// Per-species sampling bounds used for multi-start searches.
pub type PhysBox = Vec<(f64, f64)>;

/// Jacobian blocks at one full state: `ss = ∂R_s/∂x_s`, `sb = ∂R_s/∂x_b`, etc.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub ss: DMatrix<f64>,
    pub sb: DMatrix<f64>,
    pub bs: DMatrix<f64>,
    pub bb: DMatrix<f64>,
}

/// A partitioned network with resolved parameters.
#[derive(Clone)]
pub struct SystemSpec {
    id: String,
    species: Vec<String>,
    partition: Partition,
    params: Vec<(String, f64)>,
    model: Arc<dyn Model>,
    phys_box: PhysBox,
    default_point: Vec<f64>,
    bulk_linear: bool,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("id", &self.id)
            .field("species", &self.species)
            .field("partition", &self.partition)
            .field("params", &self.params)
            .finish()
    }
}

pub struct SystemBuilder {
    spec: SystemSpec,
}

impl SystemBuilder {
    pub fn phys_box(mut self, b: PhysBox) -> Self {
        self.spec.phys_box = b;
        self
    }

    pub fn default_point(mut self, p: Vec<f64>) -> Self {
        self.spec.default_point = p;
        self
    }

    pub fn bulk_linear(mut self, flag: bool) -> Self {
        self.spec.bulk_linear = flag;
        self
    }

    pub fn params(mut self, params: Vec<(String, f64)>) -> Self {
        self.spec.params = params;
        self
    }

    pub fn build(self) -> Result<SystemSpec> {
        let s = self.spec;
        let n = s.model.dim();
        if s.species.len() != n || s.partition.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.species.len(),
            });
        }
        if s.phys_box.len() != n || s.default_point.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.phys_box.len(),
            });
        }
        Ok(s)
    }
}

impl SystemSpec {
    pub fn builder(
        id: impl Into<String>,
        species: Vec<String>,
        partition: Partition,
        model: Arc<dyn Model>,
    ) -> SystemBuilder {
        let n = species.len();
        SystemBuilder {
            spec: SystemSpec {
                id: id.into(),
                species,
                partition,
                params: Vec::new(),
                model,
                phys_box: vec![(0.0, 1.0); n],
                default_point: vec![0.5; n],
                bulk_linear: false,
            },
        }
    }

    /// Same model with a different partition.
    pub fn with_partition(&self, partition: Partition) -> Result<Self> {
        if partition.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: partition.n(),
            });
        }
        let mut s = self.clone();
        s.partition = partition;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn species_index(&self, name: &str) -> Result<usize> {
        self.species
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpecies(name.to_string()))
    }

    pub fn sub_names(&self) -> Vec<&str> {
        self.partition
            .sub()
            .iter()
            .map(|&i| self.species[i].as_str())
            .collect()
    }

    pub fn bulk_names(&self) -> Vec<&str> {
        self.partition
            .bulk()
            .iter()
            .map(|&i| self.species[i].as_str())
            .collect()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn phys_box(&self) -> &PhysBox {
        &self.phys_box
    }

    pub fn default_point(&self) -> &[f64] {
        &self.default_point
    }

    pub fn is_bulk_linear(&self) -> bool {
        self.bulk_linear
    }

    pub fn n(&self) -> usize {
        self.species.len()
    }

    pub fn n_sub(&self) -> usize {
        self.partition.n_sub()
    }

    pub fn n_bulk(&self) -> usize {
        self.partition.n_bulk()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.model.jacobian(&self.default_point).is_some()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        ensure_finite(x, "state")
    }

    /// Full drift `(R_s, R_b)` in species order.
    pub fn drift_full(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.n()];
        self.model.drift(x, &mut out);
        ensure_finite(&out, "drift")?;
        Ok(out)
    }

    pub(crate) fn drift_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.drift(x, out);
        ensure_finite(out, "drift")
    }

    /// `∂R_i/∂x_j`, analytic when available, central differences otherwise.
    pub fn jacobian_full(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let j = match self.model.jacobian(x) {
            Some(j) => j,
            None => self.jacobian_fd_unchecked(x),
        };
        ensure_finite(j.as_slice(), "jacobian")?;
        Ok(j)
    }

    /// Central finite differences with step `√ε·max(1, |x_j|)`.
    pub fn jacobian_fd(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let j = self.jacobian_fd_unchecked(x);
        ensure_finite(j.as_slice(), "jacobian")?;
        Ok(j)
    }

    fn jacobian_fd_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.model.drift(&xp, &mut fp);
            xp[j] = x[j] - h;
            self.model.drift(&xp, &mut fm);
            xp[j] = x[j];
            let dh = (x[j] + h) - (x[j] - h);
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / dh;
            }
        }
        jac
    }

    /// Jacobian split into subnetwork/bulk blocks.
    pub fn blocks(&self, x: &[f64]) -> Result<Blocks> {
        let j = self.jacobian_full(x)?;
        Ok(self.split(&j))
    }

    pub(crate) fn split(&self, j: &DMatrix<f64>) -> Blocks {
        let s = self.partition.sub();
        let b = self.partition.bulk();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |r, c| j[(rows[r], cols[c])])
        };
        Blocks {
            ss: pick(s, s),
            sb: pick(s, b),
            bs: pick(b, s),
            bb: pick(b, b),
        }
    }
}

/// Central-difference step `√ε·max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.sqrt() * x.abs().max(1.0)
}
