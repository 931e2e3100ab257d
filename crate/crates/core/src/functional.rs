//! Registry of path functionals `f` used as objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_engine::SamplePath;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    /// `f ≡ value`.
    Constant { value: f64 },
    /// `f = weights · W(1)`.
    TerminalLinear { weights: Vec<f64> },
    /// `f = scale |W(1) - center|^2`.
    TerminalQuadratic {
        scale: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    /// `f = scale ∫ |W|^2 dt` (left-point).
    IntegralQuadratic { scale: f64 },
    /// `f = ∫ weights · W dt` (left-point).
    IntegralLinear { weights: Vec<f64> },
    /// `f = amp cos(freq W_0(1))`.
    TerminalCosine { amp: f64, freq: f64 },
    Sum { terms: Vec<Functional> },
}

/// Names and one-line descriptions, for listing.
pub const CATALOG: &[(&str, &str)] = &[
    ("constant", "f = value"),
    ("terminal_linear", "f = weights . W(1)"),
    ("terminal_quadratic", "f = scale |W(1) - center|^2 (center defaults to 0)"),
    ("integral_quadratic", "f = scale * integral of |W(t)|^2 dt"),
    ("integral_linear", "f = integral of weights . W(t) dt"),
    ("terminal_cosine", "f = amp cos(freq W_0(1))"),
    ("sum", "f = sum of terms"),
];

impl Functional {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let check = |what: &'static str, v: &[f64]| {
            if v.len() != dim {
                Err(Error::Mismatch {
                    what,
                    expected: dim,
                    found: v.len(),
                })
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(Error::InvalidArgument(format!("{what} must be finite")))
            } else {
                Ok(())
            }
        };
        match self {
            Functional::TerminalLinear { weights } => check("terminal weights", weights),
            Functional::IntegralLinear { weights } => check("integral weights", weights),
            Functional::TerminalQuadratic { center, .. } if !center.is_empty() => {
                check("quadratic center", center)
            }
            Functional::Sum { terms } => terms.iter().try_for_each(|t| t.validate(dim)),
            _ => Ok(()),
        }
    }

    pub fn value(&self, w: &SamplePath) -> f64 {
        let n = w.grid.n_steps();
        let dt = w.grid.dt();
        let end = w.terminal();
        match self {
            Functional::Constant { value } => *value,
            Functional::TerminalLinear { weights } => dot(weights, end),
            Functional::TerminalQuadratic { scale, center } => {
                scale
                    * end
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let c = center.get(i).copied().unwrap_or(0.0);
                            (x - c) * (x - c)
                        })
                        .sum::<f64>()
            }
            Functional::IntegralQuadratic { scale } => {
                scale * dt * w.values[..n * w.dim].iter().map(|x| x * x).sum::<f64>()
            }
            Functional::IntegralLinear { weights } => {
                dt * (0..n).map(|k| dot(weights, w.row(k))).sum::<f64>()
            }
            Functional::TerminalCosine { amp, freq } => amp * (freq * end[0]).cos(),
            Functional::Sum { terms } => terms.iter().map(|t| t.value(w)).sum(),
        }
    }

    /// Adds `∂f/∂W(t_k)` for every node into `out` (`(n_steps + 1) * dim`).
    pub fn add_gradient(&self, w: &SamplePath, out: &mut [f64]) {
        let n = w.grid.n_steps();
        let d = w.dim;
        let dt = w.grid.dt();
        let last = n * d;
        match self {
            Functional::Constant { .. } => {}
            Functional::TerminalLinear { weights } => {
                for i in 0..d {
                    out[last + i] += weights[i];
                }
            }
            Functional::TerminalQuadratic { scale, center } => {
                for i in 0..d {
                    let c = center.get(i).copied().unwrap_or(0.0);
                    out[last + i] += 2.0 * scale * (w.values[last + i] - c);
                }
            }
            Functional::IntegralQuadratic { scale } => {
                for j in 0..last {
                    out[j] += 2.0 * scale * dt * w.values[j];
                }
            }
            Functional::IntegralLinear { weights } => {
                for k in 0..n {
                    for i in 0..d {
                        out[k * d + i] += weights[i] * dt;
                    }
                }
            }
            Functional::TerminalCosine { amp, freq } => {
                out[last] += -amp * freq * (freq * w.values[last]).sin();
            }
            Functional::Sum { terms } => terms.iter().for_each(|t| t.add_gradient(w, out)),
        }
    }

    /// True when `f` only reads `W(1)`.
    pub fn is_terminal(&self) -> bool {
        match self {
            Functional::IntegralQuadratic { .. } | Functional::IntegralLinear { .. } => false,
            Functional::Sum { terms } => terms.iter().all(|t| t.is_terminal()),
            _ => true,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::{make_grid, sample_brownian, RngStream};

    fn all() -> Vec<Functional> {
        vec![
            Functional::Constant { value: 2.0 },
            Functional::TerminalLinear { weights: vec![1.5, -0.5] },
            Functional::TerminalQuadratic {
                scale: 0.7,
                center: vec![0.1, 0.2],
            },
            Functional::IntegralQuadratic { scale: 1.1 },
            Functional::IntegralLinear { weights: vec![0.3, 1.0] },
            Functional::TerminalCosine { amp: 0.8, freq: 2.0 },
            Functional::Sum {
                terms: vec![
                    Functional::TerminalQuadratic {
                        scale: 1.0,
                        center: vec![],
                    },
                    Functional::IntegralLinear { weights: vec![1.0, 1.0] },
                ],
            },
        ]
    }

    #[test]
    fn gradients_match_differences() {
        let g = make_grid(8).unwrap();
        let w = sample_brownian(&RngStream::new(4, 4), g, 2);
        for f in all() {
            f.validate(2).unwrap();
            let mut grad = vec![0.0; w.values.len()];
            f.add_gradient(&w, &mut grad);
            for j in 0..w.values.len() {
                let mut p = w.clone();
                let mut m = w.clone();
                p.values[j] += 1e-6;
                m.values[j] -= 1e-6;
                let fd = (f.value(&p) - f.value(&m)) / 2e-6;
                assert!((fd - grad[j]).abs() < 1e-6, "{f:?} node {j}: {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn simple_values() {
        let g = make_grid(4).unwrap();
        let mut w = SamplePath::zeros(g, 1);
        w.values = vec![0.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(Functional::TerminalLinear { weights: vec![3.0] }.value(&w), 6.0);
        assert_eq!(Functional::IntegralQuadratic { scale: 1.0 }.value(&w), 0.75);
        assert!(Functional::TerminalLinear { weights: vec![1.0, 2.0] }.validate(1).is_err());
    }

    #[test]
    fn catalog_covers_every_variant() {
        for f in all() {
            let s = serde_json::to_value(&f).unwrap();
            let name = s["name"].as_str().unwrap().to_string();
            assert!(CATALOG.iter().any(|(n, _)| *n == name));
        }
    }
}
