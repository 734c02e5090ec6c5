//! Scripted rule-based teacher driven by time-to-collision.

use crate::sim::{lane_of, MetaAction, Observation, SPEED_LEVELS, VEHICLE_LENGTH};

pub const TTC_FASTER: f64 = 8.0;
pub const TTC_EVADE: f64 = 4.0;
pub const MIN_FRONT_GAP: f64 = 20.0;
pub const MIN_REAR_GAP: f64 = 10.0;
/// Speed gain of one `faster` step, used when probing the lead vehicle.
const PROBE_SPEEDUP: f64 = 4.0;

/// A nearby vehicle relative to the ego.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub lane: usize,
    pub dx: f64,
    pub v: f64,
}

/// The ego lane, speed and present neighbours of an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub lanes: usize,
    pub ego_lane: usize,
    pub ego_v: f64,
    pub neighbors: Vec<Neighbor>,
}

impl Scene {
    pub fn from_observation(obs: &Observation, lanes: usize) -> Self {
        let ego = obs.row(0);
        let neighbors = (1..obs.vehicles())
            .filter(|&i| obs.present(i))
            .map(|i| {
                let r = obs.row(i);
                Neighbor { lane: lane_of(r[2], lanes), dx: r[1] - ego[1], v: r[3] }
            })
            .collect();
        Self { lanes, ego_lane: lane_of(ego[2], lanes), ego_v: ego[3], neighbors }
    }

    pub fn speed_index(&self) -> usize {
        ((self.ego_v / 4.0).round().max(0.0) as usize).min(SPEED_LEVELS - 1)
    }

    /// Nearest vehicle with `dx >= 0` in `lane`.
    pub fn leader(&self, lane: usize) -> Option<Neighbor> {
        self.neighbors
            .iter()
            .filter(|n| n.lane == lane && n.dx >= 0.0)
            .min_by(|a, b| a.dx.total_cmp(&b.dx))
            .copied()
    }

    /// Nearest vehicle with `dx < 0` in `lane`.
    pub fn follower(&self, lane: usize) -> Option<Neighbor> {
        self.neighbors
            .iter()
            .filter(|n| n.lane == lane && n.dx < 0.0)
            .max_by(|a, b| a.dx.total_cmp(&b.dx))
            .copied()
    }

    /// Bumper gap to the leader in `lane`, infinite when the lane is clear.
    pub fn front_gap(&self, lane: usize) -> f64 {
        self.leader(lane).map_or(f64::INFINITY, |n| n.dx - VEHICLE_LENGTH)
    }

    pub fn rear_gap(&self, lane: usize) -> f64 {
        self.follower(lane).map_or(f64::INFINITY, |n| -n.dx - VEHICLE_LENGTH)
    }

    /// Time to collision with the ego-lane leader if the ego were one speed step faster.
    pub fn probe_ttc(&self) -> f64 {
        match self.leader(self.ego_lane) {
            None => f64::INFINITY,
            Some(n) => {
                let gap = n.dx - VEHICLE_LENGTH;
                let closing = self.ego_v + PROBE_SPEEDUP - n.v;
                if gap <= 0.0 {
                    0.0
                } else if closing <= 0.0 {
                    f64::INFINITY
                } else {
                    gap / closing
                }
            }
        }
    }

    /// Adjacent lanes paired with the lane-change action that reaches them.
    pub fn adjacent_lanes(&self) -> Vec<(MetaAction, usize)> {
        let mut out = Vec::with_capacity(2);
        if self.ego_lane > 0 {
            out.push((MetaAction::LaneLeft, self.ego_lane - 1));
        }
        if self.ego_lane + 1 < self.lanes {
            out.push((MetaAction::LaneRight, self.ego_lane + 1));
        }
        out
    }

    pub fn lane_change_is_safe(&self, lane: usize) -> bool {
        self.front_gap(lane) > MIN_FRONT_GAP && self.rear_gap(lane) > MIN_REAR_GAP
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedOracle {
    lanes: usize,
}

impl ScriptedOracle {
    pub fn new(lanes: usize) -> Self {
        Self { lanes }
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn decide(&self, obs: &Observation) -> MetaAction {
        let scene = Scene::from_observation(obs, self.lanes);
        let ttc = scene.probe_ttc();
        if ttc > TTC_FASTER && scene.speed_index() < SPEED_LEVELS - 1 {
            return MetaAction::Faster;
        }
        if ttc < TTC_EVADE {
            let best = scene
                .adjacent_lanes()
                .into_iter()
                .filter(|&(_, lane)| scene.lane_change_is_safe(lane))
                .fold(None::<(MetaAction, f64)>, |best, (a, lane)| {
                    let gap = scene.front_gap(lane);
                    match best {
                        Some((_, g)) if g >= gap => best,
                        _ => Some((a, gap)),
                    }
                });
            return best.map_or(MetaAction::Slower, |(a, _)| a);
        }
        MetaAction::Idle
    }
}
