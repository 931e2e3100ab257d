use rand::Rng;

use crate::error::{Error, Result};
use crate::path_engine::standard_normal;

/// Maximum number of recursive step halvings near a collision.
pub const MAX_HALVINGS: u32 = 8;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ParticleParams {
    pub sigma: f64,
    pub b: f64,
    pub c: f64,
    pub gamma: f64,
}

impl ParticleParams {
    fn drift(&self, x: &[f64], i: usize) -> f64 {
        let xi = x[i];
        let mut rep = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            if j != i {
                rep += 1.0 / (xi - xj);
            }
        }
        self.b * xi + self.c + self.gamma * rep
    }

    /// Advances `x` over `[t, t + h)` with driving increment `dbeta + ud * h`,
    /// halving the step (Brownian-bridge split of `dbeta`) while a gap would
    /// shrink below `10 σ √h`.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        x: &mut [f64],
        h: f64,
        dbeta: &[f64],
        ud: &[f64],
        depth: u32,
        rng: &mut R,
        step: usize,
    ) -> Result<()> {
        let n = x.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = x[i] + self.drift(x, i) * h + self.sigma * (dbeta[i] + ud[i] * h);
        }
        let eps = 10.0 * self.sigma.abs() * h.sqrt();
        let risky = (0..n.saturating_sub(1)).any(|i| {
            let old = x[i + 1] - x[i];
            let new = y[i + 1] - y[i];
            new < old && new < eps
        });
        if !risky || depth >= MAX_HALVINGS {
            if !y.iter().all(|v| v.is_finite()) || y.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Collision { step });
            }
            x.copy_from_slice(&y);
            return Ok(());
        }
        let half = 0.5 * h;
        let sd = (0.25 * h).sqrt();
        let first: Vec<f64> = dbeta
            .iter()
            .map(|d| 0.5 * d + sd * standard_normal(rng))
            .collect();
        let second: Vec<f64> = dbeta.iter().zip(&first).map(|(d, f)| d - f).collect();
        self.advance(x, half, &first, ud, depth + 1, rng, step)?;
        self.advance(x, half, &second, ud, depth + 1, rng, step)
    }
}
