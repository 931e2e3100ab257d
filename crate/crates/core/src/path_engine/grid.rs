use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit time horizon shared by every model.
pub const HORIZON: f64 = 1.0;

/// Uniform discretization of `[0, 1]`.
///
/// `dt` is computed once; node `k` sits at `k * dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    n_steps: usize,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    n_steps: usize,
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        make_grid(r.n_steps)
    }
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        GridRepr { n_steps: g.n_steps }
    }
}

/// Builds the uniform grid with `n_steps` intervals on `[0, 1]`.
pub fn make_grid(n_steps: usize) -> Result<TimeGrid> {
    if n_steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "time grid needs at least 2 steps, got {n_steps}"
        )));
    }
    Ok(TimeGrid {
        n_steps,
        dt: HORIZON / n_steps as f64,
    })
}

impl TimeGrid {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        HORIZON
    }

    /// Time of node `k`.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// First node index whose time is `>= t` (clamped to `n_steps`).
    pub fn index_at_or_after(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let raw = (t / self.dt - 1e-9).ceil();
        if raw >= self.n_steps as f64 {
            self.n_steps
        } else {
            raw as usize
        }
    }

    /// Converts a duration that must be a whole number of steps.
    pub fn steps_for(&self, duration: f64) -> Result<usize> {
        let j = duration / self.dt;
        let r = j.round();
        if duration < 0.0 || (j - r).abs() > 1e-9 * j.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "duration {duration} is not a multiple of dt = {}",
                self.dt
            )));
        }
        Ok(r as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_steps() {
        let g = make_grid(4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn rejects_single_step() {
        assert!(make_grid(1).is_err());
        assert!(make_grid(0).is_err());
    }

    #[test]
    fn power_of_two_spacing_is_exact() {
        let g = make_grid(256).unwrap();
        assert_eq!(g.dt(), 1.0 / 256.0);
        for k in 0..256 {
            assert_eq!(g.t(k + 1) - g.t(k), g.dt());
        }
        assert_eq!(g.t(256), 1.0);
    }

    #[test]
    fn index_lookup() {
        let g = make_grid(4).unwrap();
        assert_eq!(g.index_at_or_after(0.5), 2);
        assert_eq!(g.index_at_or_after(0.3), 2);
        assert_eq!(g.index_at_or_after(0.0), 0);
        assert_eq!(g.index_at_or_after(2.0), 4);
        assert_eq!(g.steps_for(0.5).unwrap(), 2);
        assert!(g.steps_for(0.3).is_err());
    }
}
