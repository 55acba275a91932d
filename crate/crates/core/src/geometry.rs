use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned box in world coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Bounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite()) || self.max[a] <= self.min[a] {
                return Err(Error::InvalidConfig(format!(
                    "degenerate bounds on axis {a}: [{}, {}]",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    /// Closed-interval containment. NaN coordinates are never contained.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| p[a].clamp(self.min[a], self.max[a]))
    }

    /// Maps `p` to the unit cube; errors when `p` is outside.
    pub fn normalize(&self, p: &[f64; 3]) -> Result<[f64; 3]> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds { point: *p });
        }
        let e = self.extent();
        Ok([
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ])
    }
}
