use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight `α` on the unit sphere, evaluated at the quadrature nodes and renormalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SphereWeight {
    Uniform,
    /// All mass at one point (normalized onto the sphere).
    Atom { point: Vec<f64> },
    /// `α(a) ∝ 1 + amp · a_0`, `|amp| <= 1`.
    Tilted { amp: f64 },
}

/// Quadrature of the sphere-mixture of bridge kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopQuadrature {
    dim: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

/// Smallest distance to the terminal time at which the drift is evaluated.
pub const TERMINAL_GUARD: f64 = 1e-9;

impl LoopQuadrature {
    pub fn new(dim: usize, weight: &SphereWeight, n_nodes: usize) -> Result<Self> {
        let nodes = match weight {
            SphereWeight::Atom { point } => {
                if point.len() != dim {
                    return Err(Error::Mismatch {
                        what: "atom dimension",
                        expected: dim,
                        found: point.len(),
                    });
                }
                let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) {
                    return Err(Error::InvalidArgument("atom must be nonzero".into()));
                }
                point.iter().map(|v| v / norm).collect()
            }
            _ => sphere_nodes(dim, n_nodes)?,
        };
        let m = nodes.len() / dim;
        let raw: Vec<f64> = (0..m)
            .map(|i| match weight {
                SphereWeight::Uniform | SphereWeight::Atom { .. } => 1.0,
                SphereWeight::Tilted { amp } => 1.0 + amp * nodes[i * dim],
            })
            .collect();
        if let SphereWeight::Tilted { amp } = weight {
            if amp.abs() > 1.0 {
                return Err(Error::InvalidArgument("tilt amplitude must be in [-1, 1]".into()));
            }
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("sphere weight has no mass on the nodes".into()));
        }
        let log_weights = raw
            .iter()
            .map(|w| if *w > 0.0 { (w / total).ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self {
            dim,
            nodes,
            log_weights,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.log_weights.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    fn check_time(t: f64) -> Result<f64> {
        let s = 1.0 - t;
        if s < TERMINAL_GUARD {
            return Err(Error::TerminalSingularity { t });
        }
        Ok(s)
    }

    /// `log h(t, x)` with the prefactor `(1 / (π (1 - t)))^{n/2}`.
    pub fn log_h(&self, t: f64, x: &[f64]) -> Result<f64> {
        let s = Self::check_time(t)?;
        let pre = -0.5 * self.dim as f64 * (PI * s).ln();
        let logs: Vec<f64> = (0..self.n_nodes()).map(|i| self.log_kernel(i, s, x)).collect();
        Ok(pre + log_sum_exp(&logs))
    }

    fn log_kernel(&self, i: usize, s: f64, x: &[f64]) -> f64 {
        let a = self.node(i);
        let d2: f64 = a.iter().zip(x).map(|(ai, xi)| (xi - ai) * (xi - ai)).sum();
        self.log_weights[i] - d2 / (2.0 * s)
    }

    /// `∇_x log h(t, x)`; the prefactor does not depend on `x` and drops out.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let s = Self::check_time(t)?;
        let m = self.n_nodes();
        let mut best = f64::NEG_INFINITY;
        let mut logs = [0.0f64; 256];
        let mut heap;
        let logs: &mut [f64] = if m <= 256 {
            &mut logs[..m]
        } else {
            heap = vec![0.0; m];
            &mut heap
        };
        for (i, l) in logs.iter_mut().enumerate() {
            *l = self.log_kernel(i, s, x);
            best = best.max(*l);
        }
        out.fill(0.0);
        let mut z = 0.0;
        for (i, l) in logs.iter().enumerate() {
            let p = (l - best).exp();
            z += p;
            for (o, a) in out.iter_mut().zip(self.node(i)) {
                *o += p * a;
            }
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o = (*o / z - xi) / s;
        }
        Ok(())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Equal-weight nodes on the unit sphere of `R^dim`.
fn sphere_nodes(dim: usize, n: usize) -> Result<Vec<f64>> {
    match dim {
        1 => Ok(vec![-1.0, 1.0]),
        2 => {
            let n = n.max(64);
            Ok((0..n)
                .flat_map(|i| {
                    let th = 2.0 * PI * i as f64 / n as f64;
                    [th.cos(), th.sin()]
                })
                .collect())
        }
        3 => {
            // Fibonacci lattice.
            let n = n.max(128);
            let golden = PI * (3.0 - 5f64.sqrt());
            Ok((0..n)
                .flat_map(|i| {
                    let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    [r * th.cos(), r * th.sin(), z]
                })
                .collect())
        }
        _ => Err(Error::Unsupported(format!(
            "loop measure quadrature for dimension {dim}"
        ))),
    }
}
