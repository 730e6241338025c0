//! Built-in networks with analytic Jacobians.
//!
//! | id | species | default S / B |
//! |----|---------|---------------|
//! | `bistable` | x1, x2 | {x1} / {x2} |
//! | `tetrastable` | x1, x2, x3 | {x1, x2} / {x3} |
//! | `repressilator` | x1, x2, x3 | {x1, x2} / {x3} |
//! | `brusselator` | x1, x2 | {x1} / {x2} |
//! | `wilhelm` | x1, x2 | {x1} / {x2} |
//! | `neuraltube` | Pax6, Olig2, Nkx2.2, Irx3 | {Nkx2.2, Olig2} / {Irx3, Pax6} |

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::system::{Model, Partition, PhysBox, SystemSpec};

/// Static description of a zoo model.
#[derive(Debug, Clone)]
pub struct ZooEntry {
    pub id: &'static str,
    pub description: &'static str,
    pub species: Vec<&'static str>,
    pub default_params: Vec<(&'static str, f64)>,
    pub default_sub: Vec<&'static str>,
    pub default_bulk: Vec<&'static str>,
    pub bulk_linear: bool,
}

pub const ZOO_IDS: [&str; 6] = [
    "bistable",
    "tetrastable",
    "repressilator",
    "brusselator",
    "wilhelm",
    "neuraltube",
];

const NEURAL_TUBE_PARAMS: [(&str, f64); 23] = [
    ("alpha_P", 2.0),
    ("alpha_O", 2.0),
    ("alpha_N", 2.0),
    ("alpha_I", 2.0),
    ("beta_P", 2.0),
    ("beta_O", 2.0),
    ("beta_N", 2.0),
    ("beta_I", 2.0),
    ("k_PO", 1.9),
    ("k_PN", 26.7),
    ("k_ON", 60.6),
    ("k_OI", 28.4),
    ("k_NP", 4.8),
    ("k_NO", 27.1),
    ("k_NI", 47.1),
    ("k_IO", 58.8),
    ("k_IN", 76.2),
    ("w_P", 3.84),
    ("w_O", 2.01263),
    ("w_N", 0.572324),
    ("w_I", 18.72),
    ("k_Oin", 180.0),
    ("k_Nin", 373.0),
];

pub fn entries() -> Vec<ZooEntry> {
    ZOO_IDS
        .iter()
        .map(|id| entry(id).expect("zoo id"))
        .collect()
}

pub fn entry(id: &str) -> Result<ZooEntry> {
    let e = match id {
        "bistable" => ZooEntry {
            id: "bistable",
            description: "two mutually repressive Hill genes",
            species: vec!["x1", "x2"],
            default_params: vec![("a", 4.0), ("n", 2.0)],
            default_sub: vec!["x1"],
            default_bulk: vec!["x2"],
            bulk_linear: false,
        },
        "tetrastable" => ZooEntry {
            id: "tetrastable",
            description: "three genes with or-logic mutual repression",
            species: vec!["x1", "x2", "x3"],
            default_params: vec![("a", 4.0), ("n", 2.0)],
            default_sub: vec!["x1", "x2"],
            default_bulk: vec!["x3"],
            bulk_linear: false,
        },
        "repressilator" => ZooEntry {
            id: "repressilator",
            description: "three-gene repression ring",
            species: vec!["x1", "x2", "x3"],
            default_params: vec![("a", 3.0), ("n", 3.0)],
            default_sub: vec!["x1", "x2"],
            default_bulk: vec!["x3"],
            bulk_linear: false,
        },
        "brusselator" => ZooEntry {
            id: "brusselator",
            description: "Brusselator oscillator",
            species: vec!["x1", "x2"],
            default_params: vec![("A", 1.0), ("B", 3.0)],
            default_sub: vec!["x1"],
            default_bulk: vec!["x2"],
            bulk_linear: true,
        },
        "wilhelm" => ZooEntry {
            id: "wilhelm",
            description: "minimal bistable mass-action network",
            species: vec!["x1", "x2"],
            default_params: vec![("k1", 10.0), ("k2", 1.0), ("k3", 2.0), ("k4", 1.0)],
            default_sub: vec!["x1"],
            default_bulk: vec!["x2"],
            bulk_linear: true,
        },
        "neuraltube" => ZooEntry {
            id: "neuraltube",
            description: "ventral neural tube patterning network",
            species: vec!["Pax6", "Olig2", "Nkx2.2", "Irx3"],
            default_params: {
                let mut v = NEURAL_TUBE_PARAMS.to_vec();
                v.push(("p", 0.1));
                v
            },
            default_sub: vec!["Nkx2.2", "Olig2"],
            default_bulk: vec!["Irx3", "Pax6"],
            bulk_linear: false,
        },
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    Ok(e)
}

fn resolve_params(e: &ZooEntry, overrides: &[(&str, f64)]) -> Result<Vec<(String, f64)>> {
    let mut params: Vec<(String, f64)> = e
        .default_params
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    for (name, value) in overrides {
        match params.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = *value,
            None => {
                return Err(Error::UnknownParameter {
                    model: e.id.to_string(),
                    name: name.to_string(),
                })
            }
        }
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} = {value}"
            )));
        }
    }
    Ok(params)
}

/// Zoo model with its default partition.
pub fn zoo(id: &str, overrides: &[(&str, f64)]) -> Result<SystemSpec> {
    let e = entry(id)?;
    zoo_with_partition(id, &e.default_sub, &e.default_bulk, overrides)
}

/// Zoo model with a partition given by species names.
pub fn zoo_with_partition(
    id: &str,
    sub: &[&str],
    bulk: &[&str],
    overrides: &[(&str, f64)],
) -> Result<SystemSpec> {
    let e = entry(id)?;
    let params = resolve_params(&e, overrides)?;
    let get = |k: &str| {
        params
            .iter()
            .find(|(n, _)| n == k)
            .map(|(_, v)| *v)
            .unwrap()
    };
    let idx = |name: &str| {
        e.species
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| Error::UnknownSpecies(name.to_string()))
    };
    let sub_idx = sub.iter().map(|s| idx(s)).collect::<Result<Vec<_>>>()?;
    let bulk_idx = bulk.iter().map(|s| idx(s)).collect::<Result<Vec<_>>>()?;
    let n = e.species.len();
    let partition = Partition::new(n, sub_idx, bulk_idx)?;

    let (model, phys_box, default_point): (Arc<dyn Model>, PhysBox, Vec<f64>) = match e.id {
        "bistable" | "tetrastable" => {
            let a = get("a");
            (
                Arc::new(OrRepression {
                    n_species: n,
                    a,
                    n: get("n"),
                }),
                vec![(0.0, a + 1.0); n],
                vec![1.0; n],
            )
        }
        "repressilator" => {
            let a = get("a");
            (
                Arc::new(Repressilator { a, n: get("n") }),
                vec![(0.0, a + 1.0); 3],
                vec![1.0; 3],
            )
        }
        "brusselator" => {
            let (a, b) = (get("A"), get("B"));
            (
                Arc::new(Brusselator { a, b }),
                vec![(0.2, 3.0 * a + 3.0), (0.0, 3.0 * b / a.max(1e-3) + 3.0)],
                vec![a, b / a],
            )
        }
        "wilhelm" => (
            Arc::new(Wilhelm {
                k1: get("k1"),
                k2: get("k2"),
                k3: get("k3"),
                k4: get("k4"),
            }),
            vec![(0.0, 15.0), (0.0, 30.0)],
            vec![1.0, 0.1],
        ),
        "neuraltube" => (
            Arc::new(NeuralTube::from_params(&get)),
            vec![(0.0, 1.0); 4],
            vec![0.5; 4],
        ),
        _ => unreachable!(),
    };

    SystemSpec::builder(
        e.id,
        e.species.iter().map(|s| s.to_string()).collect(),
        partition,
        model,
    )
    .params(params)
    .phys_box(phys_box)
    .default_point(default_point)
    .bulk_linear(e.bulk_linear)
    .build()
}

/// `x^n` extended to negative `x` (exact power for integer `n`, even extension otherwise).
fn hill_pow(x: f64, n: f64) -> f64 {
    if n.fract() == 0.0 && n.abs() < 64.0 {
        x.powi(n as i32)
    } else {
        x.abs().powf(n)
    }
}

/// `d/dx hill_pow(x, n)`.
fn hill_pow_deriv(x: f64, n: f64) -> f64 {
    if n.fract() == 0.0 && n.abs() < 64.0 {
        n * x.powi(n as i32 - 1)
    } else {
        n * x.abs().powf(n - 1.0) * x.signum()
    }
}

/// `dx_j/dt = a / (1 + Σ_{i≠j} x_i^n) − x_j`.
struct OrRepression {
    n_species: usize,
    a: f64,
    n: f64,
}

impl Model for OrRepression {
    fn dim(&self) -> usize {
        self.n_species
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let total: f64 = x.iter().map(|&v| hill_pow(v, self.n)).sum();
        for j in 0..self.n_species {
            let d = 1.0 + total - hill_pow(x[j], self.n);
            out[j] = self.a / d - x[j];
        }
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let m = self.n_species;
        let total: f64 = x.iter().map(|&v| hill_pow(v, self.n)).sum();
        Some(DMatrix::from_fn(m, m, |j, k| {
            if j == k {
                -1.0
            } else {
                let d = 1.0 + total - hill_pow(x[j], self.n);
                -self.a * hill_pow_deriv(x[k], self.n) / (d * d)
            }
        }))
    }
}

/// `dx_j/dt = a / (1 + x_{j−1}^n) − x_j`, with `x_0 ≡ x_3`.
struct Repressilator {
    a: f64,
    n: f64,
}

impl Model for Repressilator {
    fn dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..3 {
            let prev = x[(j + 2) % 3];
            out[j] = self.a / (1.0 + hill_pow(prev, self.n)) - x[j];
        }
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::from_diagonal_element(3, 3, -1.0);
        for j in 0..3 {
            let p = (j + 2) % 3;
            let d = 1.0 + hill_pow(x[p], self.n);
            jac[(j, p)] = -self.a * hill_pow_deriv(x[p], self.n) / (d * d);
        }
        Some(jac)
    }
}

struct Brusselator {
    a: f64,
    b: f64,
}

impl Model for Brusselator {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let q = x[0] * x[0] * x[1];
        out[0] = self.a - (self.b + 1.0) * x[0] + q;
        out[1] = self.b * x[0] - q;
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (x1, x2) = (x[0], x[1]);
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                -(self.b + 1.0) + 2.0 * x1 * x2,
                x1 * x1,
                self.b - 2.0 * x1 * x2,
                -x1 * x1,
            ],
        ))
    }
}

/// Minimal bistable mass-action network; the second species enters linearly.
struct Wilhelm {
    k1: f64,
    k2: f64,
    k3: f64,
    k4: f64,
}

impl Model for Wilhelm {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        out[0] = 2.0 * self.k1 * x2 - self.k2 * x1 * x1 - self.k3 * x1 * x2 - self.k4 * x1;
        out[1] = self.k2 * x1 * x1 - self.k1 * x2;
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (x1, x2) = (x[0], x[1]);
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                -2.0 * self.k2 * x1 - self.k3 * x2 - self.k4,
                2.0 * self.k1 - self.k3 * x1,
                2.0 * self.k2 * x1,
                -self.k1,
            ],
        ))
    }
}

/// `α W / (W + Π_j (1 + k_j x_j)²) − β x_self`.
#[derive(Debug, Clone)]
struct RepressedGene {
    target: usize,
    alpha: f64,
    beta: f64,
    w: f64,
    repressors: Vec<(usize, f64)>,
}

impl RepressedGene {
    fn q(&self, x: &[f64]) -> f64 {
        self.repressors
            .iter()
            .map(|&(i, k)| (1.0 + k * x[i]).powi(2))
            .product()
    }

    fn rate(&self, x: &[f64]) -> f64 {
        self.alpha * self.w / (self.w + self.q(x)) - self.beta * x[self.target]
    }

    fn grad(&self, x: &[f64], row: &mut [f64]) {
        let q = self.q(x);
        let denom = (self.w + q).powi(2);
        for (m, &(i, k)) in self.repressors.iter().enumerate() {
            let others: f64 = self
                .repressors
                .iter()
                .enumerate()
                .filter(|(l, _)| *l != m)
                .map(|(_, &(j, kj))| (1.0 + kj * x[j]).powi(2))
                .product();
            let dq = 2.0 * k * (1.0 + k * x[i]) * others;
            row[i] -= self.alpha * self.w * dq / denom;
        }
        row[self.target] -= self.beta;
    }
}

/// Pax6 (0), Olig2 (1), Nkx2.2 (2), Irx3 (3); Shh input `x_in = exp(−p/0.15)`.
struct NeuralTube {
    genes: [RepressedGene; 4],
}

impl NeuralTube {
    fn from_params(get: &dyn Fn(&str) -> f64) -> Self {
        let (pa, ol, nk, ir) = (0, 1, 2, 3);
        let x_in = (-get("p") / 0.15).exp();
        let w_o = get("w_O") * (1.0 + get("k_Oin") * x_in);
        let w_n = get("w_N") * (1.0 + get("k_Nin") * x_in);
        Self {
            genes: [
                RepressedGene {
                    target: pa,
                    alpha: get("alpha_P"),
                    beta: get("beta_P"),
                    w: get("w_P"),
                    repressors: vec![(ol, get("k_PO")), (nk, get("k_PN"))],
                },
                RepressedGene {
                    target: ol,
                    alpha: get("alpha_O"),
                    beta: get("beta_O"),
                    w: w_o,
                    repressors: vec![(ir, get("k_OI")), (nk, get("k_ON"))],
                },
                RepressedGene {
                    target: nk,
                    alpha: get("alpha_N"),
                    beta: get("beta_N"),
                    w: w_n,
                    repressors: vec![(pa, get("k_NP")), (ol, get("k_NO")), (ir, get("k_NI"))],
                },
                RepressedGene {
                    target: ir,
                    alpha: get("alpha_I"),
                    beta: get("beta_I"),
                    w: get("w_I"),
                    repressors: vec![(ol, get("k_IO")), (nk, get("k_IN"))],
                },
            ],
        }
    }
}

impl Model for NeuralTube {
    fn dim(&self) -> usize {
        4
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.genes) {
            *o = g.rate(x);
        }
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(4, 4);
        let mut row = [0.0; 4];
        for (r, g) in self.genes.iter().enumerate() {
            row.fill(0.0);
            g.grad(x, &mut row);
            for c in 0..4 {
                jac[(r, c)] = row[c];
            }
        }
        Some(jac)
    }
}
