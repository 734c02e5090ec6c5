use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;

pub const SPEED_LEVELS: usize = 9;
pub const MAX_TARGET_SPEED: f64 = 32.0;

/// Target speeds `0, 4, ..., 32` m/s.
pub fn target_speeds() -> [f64; SPEED_LEVELS] {
    std::array::from_fn(|i| MAX_TARGET_SPEED * i as f64 / (SPEED_LEVELS - 1) as f64)
}

/// Discrete high-level driving command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaAction {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

pub const NUM_ACTIONS: usize = 5;

impl MetaAction {
    pub const ALL: [MetaAction; NUM_ACTIONS] =
        [MetaAction::LaneLeft, MetaAction::Idle, MetaAction::LaneRight, MetaAction::Faster, MetaAction::Slower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaAction::LaneLeft => "lane_left",
            MetaAction::Idle => "idle",
            MetaAction::LaneRight => "lane_right",
            MetaAction::Faster => "faster",
            MetaAction::Slower => "slower",
        }
    }
}

impl fmt::Display for MetaAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaAction {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|a| a.name() == lower)
            .ok_or_else(|| SimError::Config(format!("unknown meta-action {s:?}")))
    }
}

/// Highway scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub lanes: usize,
    pub density: f64,
    #[serde(default = "default_vehicles")]
    pub observed_vehicles: usize,
    #[serde(default = "default_duration")]
    pub duration: usize,
}

fn default_vehicles() -> usize {
    15
}

fn default_duration() -> usize {
    30
}

/// The three benchmark scenarios, in increasing difficulty.
pub const STANDARD_ENV_IDS: [&str; 3] = ["lane-3-density-2", "lane-4-density-2.5", "lane-5-density-3"];

impl EnvConfig {
    pub fn new(lanes: usize, density: f64) -> Result<Self, SimError> {
        let c = Self { lanes, density, observed_vehicles: default_vehicles(), duration: default_duration() };
        c.validate()?;
        Ok(c)
    }

    /// Parses identifiers of the form `lane-<L>-density-<D>`.
    pub fn from_id(id: &str) -> Result<Self, SimError> {
        let bad = || SimError::Config(format!("unknown environment id {id:?} (expected lane-<L>-density-<D>)"));
        let rest = id.strip_prefix("lane-").ok_or_else(bad)?;
        let (lanes, density) = rest.split_once("-density-").ok_or_else(bad)?;
        let lanes: usize = lanes.parse().map_err(|_| bad())?;
        let density: f64 = density.parse().map_err(|_| bad())?;
        Self::new(lanes, density)
    }

    pub fn id(&self) -> String {
        format!("lane-{}-density-{}", self.lanes, self.density)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(2..=8).contains(&self.lanes) {
            return Err(SimError::Config(format!("lanes must be in 2..=8, got {}", self.lanes)));
        }
        if !(self.density.is_finite() && (0.0..=10.0).contains(&self.density)) {
            return Err(SimError::Config(format!("density must be in [0, 10], got {}", self.density)));
        }
        if self.observed_vehicles == 0 {
            return Err(SimError::Config("observed_vehicles must be at least 1".into()));
        }
        if self.duration == 0 {
            return Err(SimError::Config("duration must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of background vehicles spawned per episode.
    pub fn spawn_count(&self) -> usize {
        (10.0 * self.density).ceil() as usize
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::new(3, 2.0).expect("valid default")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_speed_grid() {
        let s = target_speeds();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[8], 32.0);
        for w in s.windows(2) {
            assert_eq!(w[1] - w[0], 4.0);
        }
    }

    #[test]
    fn standard_ids_round_trip() {
        for id in STANDARD_ENV_IDS {
            let c = EnvConfig::from_id(id).unwrap();
            assert_eq!(c.id(), id);
            assert_eq!(c.observed_vehicles, 15);
            assert_eq!(c.duration, 30);
        }
        assert_eq!(EnvConfig::from_id("lane-5-density-3").unwrap().spawn_count(), 30);
        assert!(EnvConfig::from_id("highway-v0").is_err());
        assert!(EnvConfig::from_id("lane-1-density-2").is_err());
    }

    #[test]
    fn action_names_parse_case_insensitively() {
        for a in MetaAction::ALL {
            assert_eq!(a.name().to_uppercase().parse::<MetaAction>().unwrap(), a);
            assert_eq!(MetaAction::from_index(a.index()), Some(a));
        }
        assert!("accelerate".parse::<MetaAction>().is_err());
    }
}
