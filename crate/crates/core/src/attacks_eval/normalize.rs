use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::mop_policy::InputEncoder;
use crate::sim::{Observation, FEATURES, PRESENCE};

use super::EvalError;

const FEATURE_NAMES: [&str; FEATURES] = ["presence", "x", "y", "vx", "vy"];

/// Per-feature affine map of the continuous features onto `[0, 1]` using
/// dataset min/max ranges. Features with a degenerate range pass through unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; FEATURES],
    pub max: [f64; FEATURES],
    pub warnings: Vec<String>,
}

impl Normalizer {
    pub fn new(min: [f64; FEATURES], max: [f64; FEATURES]) -> Self {
        let warnings = (0..FEATURES)
            .filter(|&c| c != PRESENCE && max[c] <= min[c])
            .map(|c| format!("feature {} has degenerate range [{}, {}]; passed through unscaled", FEATURE_NAMES[c], min[c], max[c]))
            .collect();
        Self { min, max, warnings }
    }

    pub fn from_dataset(d: &Dataset) -> Result<Self, EvalError> {
        let (lo, hi) = d.ranges().ok_or(EvalError::MissingRanges)?;
        Ok(Self::new(lo, hi))
    }

    /// Uses the ranges a network was built with.
    pub fn from_encoder(e: &InputEncoder) -> Self {
        Self::new(e.feature_min, e.feature_max)
    }

    /// Multiplier from normalized to raw units: the range, or 1 when degenerate.
    pub fn span(&self, c: usize) -> f64 {
        let r = self.max[c] - self.min[c];
        if c == PRESENCE || r <= 0.0 {
            1.0
        } else {
            r
        }
    }

    fn offset(&self, c: usize) -> f64 {
        if c == PRESENCE || self.max[c] <= self.min[c] {
            0.0
        } else {
            self.min[c]
        }
    }

    /// In-place map of flat `[rows, FEATURES]` data to normalized space.
    pub fn normalize_rows(&self, data: &mut [f64]) {
        for row in data.chunks_mut(FEATURES) {
            for (c, v) in row.iter_mut().enumerate().skip(1) {
                *v = (*v - self.offset(c)) / self.span(c);
            }
        }
    }

    pub fn denormalize_rows(&self, data: &mut [f64]) {
        for row in data.chunks_mut(FEATURES) {
            for (c, v) in row.iter_mut().enumerate().skip(1) {
                *v = *v * self.span(c) + self.offset(c);
            }
        }
    }

    pub fn normalize(&self, obs: &Observation) -> Observation {
        let mut o = obs.clone();
        self.normalize_rows(o.data_mut());
        o
    }

    pub fn denormalize(&self, obs: &Observation) -> Observation {
        let mut o = obs.clone();
        self.denormalize_rows(o.data_mut());
        o
    }
}
