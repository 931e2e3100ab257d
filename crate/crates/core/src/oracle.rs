//! Brute-force entropy oracle for shifts of one-dimensional Brownian motion
//! on coarse grids.
//!
//! With `x` the vector of `N(0, dt)` increments and `T` the discrete shift
//! map on increments, change of variables gives, for injective `T`,
//!
//! `E[L log L] = E_x[(|T x|^2 - |x|^2) / (2 dt) - log |det DT(x)|]`
//!
//! which is integrated on a tensor Gauss–Hermite grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::path_engine::TimeGrid;
use crate::policy::DriftPolicy;

/// Largest grid the oracle accepts.
pub const MAX_ORACLE_STEPS: usize = 4;

/// Gauss–Hermite rule for the standard normal law: `E g(Z) ≈ Σ w_i g(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal physicists' Hermite recurrence.
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let s2 = std::f64::consts::SQRT_2;
    let spi = std::f64::consts::PI.sqrt();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * s2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v / spi).collect();
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OracleOutcome {
    Value {
        /// `E[L log L]`.
        entropy: f64,
        /// `½ E |u|_H^2`.
        half_energy: f64,
        /// Difference between the `nodes` and `nodes + 20` rules.
        quadrature_error: f64,
    },
    /// The Jacobian changes sign or vanishes somewhere on the grid.
    NotLeftInvertible { reason: String },
}

/// Entropy of the pushforward of `N(0, dt I_n)` under `x ↦ shift(x)`.
/// `shift` writes the shifted increments `T x`.
pub fn grid_density_oracle<F>(grid: TimeGrid, nodes: usize, shift: F) -> Result<OracleOutcome>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    let n = grid.n_steps();
    if n > MAX_ORACLE_STEPS {
        return Err(Error::InvalidArgument(format!(
            "oracle grids have at most {MAX_ORACLE_STEPS} steps, got {n}"
        )));
    }
    if nodes < 41 {
        return Err(Error::InvalidArgument("oracle needs at least 41 nodes per axis".into()));
    }
    let coarse = integrate(grid, nodes, &shift)?;
    let fine = integrate(grid, nodes + 20, &shift)?;
    match (coarse, fine) {
        (Ok((e, h)), Ok((e2, h2))) => Ok(OracleOutcome::Value {
            entropy: e2,
            half_energy: h2,
            quadrature_error: (e - e2).abs().max((h - h2).abs()),
        }),
        (Err(r), _) | (_, Err(r)) => Ok(OracleOutcome::NotLeftInvertible { reason: r }),
    }
}

type Integral = std::result::Result<(f64, f64), String>;

fn integrate<F>(grid: TimeGrid, nodes: usize, shift: &F) -> Result<Integral>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    let n = grid.n_steps();
    let dt = grid.dt();
    let sd = dt.sqrt();
    let (z, w) = gauss_hermite(nodes);
    let total = nodes.pow(n as u32);
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut yp = vec![0.0; n];
    let mut ym = vec![0.0; n];
    let (mut ent, mut half) = (0.0, 0.0);
    let mut sign = 0.0f64;
    for idx in 0..total {
        let mut r = idx;
        let mut weight = 1.0;
        for xi in x.iter_mut() {
            let j = r % nodes;
            r /= nodes;
            *xi = sd * z[j];
            weight *= w[j];
        }
        shift(&x, &mut y)?;
        for c in 0..n {
            let h = 1e-5 * sd.max(x[c].abs());
            let keep = x[c];
            x[c] = keep + h;
            shift(&x, &mut yp)?;
            x[c] = keep - h;
            shift(&x, &mut ym)?;
            x[c] = keep;
            for r in 0..n {
                jac[r * n + c] = (yp[r] - ym[r]) / (2.0 * h);
            }
        }
        let det = determinant(&mut jac.clone(), n);
        if !(det.abs() > 1e-10) {
            return Ok(Err(format!("Jacobian vanishes at node {idx}")));
        }
        if sign == 0.0 {
            sign = det.signum();
        } else if det.signum() != sign {
            return Ok(Err("Jacobian changes sign: not left-invertible at grid scale".into()));
        }
        let (mut sy, mut sx, mut su) = (0.0, 0.0, 0.0);
        for k in 0..n {
            sy += y[k] * y[k];
            sx += x[k] * x[k];
            su += (y[k] - x[k]) * (y[k] - x[k]);
        }
        ent += weight * ((sy - sx) / (2.0 * dt) - det.abs().ln());
        half += weight * su / (2.0 * dt);
    }
    Ok(Ok((ent, half)))
}

/// Determinant by Gaussian elimination with partial pivoting (destroys `a`).
fn determinant(a: &mut [f64], n: usize) -> f64 {
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .unwrap_or(c);
        if a[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        det *= a[c * n + c];
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    det
}

/// Shift map of a drift policy on one-dimensional Brownian increments.
pub fn policy_shift_map<'a>(
    model: &'a Model,
    grid: TimeGrid,
    policy: &'a DriftPolicy,
) -> Result<impl Fn(&[f64], &mut [f64]) -> Result<()> + Sync + 'a> {
    if !model.is_wiener() || model.dim() != 1 {
        return Err(Error::Unsupported("oracle only covers one-dimensional Wiener shifts".into()));
    }
    policy.validate(&grid, 1)?;
    Ok(move |x: &[f64], out: &mut [f64]| {
        let pair = model.shift_with_increments(grid, x, policy)?;
        out.copy_from_slice(&pair.w_path.increments());
        Ok(())
    })
}
