use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::config::{target_speeds, EnvConfig, MetaAction, SPEED_LEVELS};
use super::observation::{Observation, FEATURES};
use super::SimError;

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;
pub const LANE_WIDTH: f64 = 4.0;
pub const DECISION_DT: f64 = 1.0;
pub const SUBSTEPS: usize = 4;
pub const EGO_MAX_ACCEL: f64 = 4.0;
/// Mean bumper-to-bumper spawn gap at density 1.
pub const BASE_SPACING: f64 = 40.0;

const IDM_S0: f64 = 2.0;
const IDM_T: f64 = 1.0;
const IDM_A: f64 = 3.0;
const IDM_B: f64 = 5.0;
const IDM_DELTA: f64 = 4.0;
const IDM_MIN_ACCEL: f64 = -9.0;
const BG_SPEED_RANGE: (f64, f64) = (18.0, 26.0);
const P_AHEAD: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub lane: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

impl VehicleState {
    /// A vehicle centred in `lane`.
    pub fn in_lane(lane: usize, x: f64, v: f64) -> Self {
        Self { lane, x, y: lane_center(lane), v }
    }
}

/// A background vehicle with its IDM desired speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundVehicle {
    pub state: VehicleState,
    pub desired_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collided: bool,
    pub speed: f64,
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub fn lane_center(lane: usize) -> f64 {
    lane as f64 * LANE_WIDTH
}

/// Lane whose centre is closest to lateral position `y`.
pub fn lane_of(y: f64, lanes: usize) -> usize {
    ((y / LANE_WIDTH).round().max(0.0) as usize).min(lanes - 1)
}

/// Normalized highway reward in `[0, 1]`.
pub fn compute_reward(state: &VehicleState, collided: bool, lanes: usize) -> f64 {
    let collision = if collided { -1.0 } else { 0.0 };
    let right_lane = 0.1 * state.lane as f64 / (lanes.max(2) - 1) as f64;
    let speed = 0.4 * ((state.v - 20.0) / (30.0 - 20.0)).clamp(0.0, 1.0);
    let raw = collision + right_lane + speed;
    ((raw + 1.0) / 1.5).clamp(0.0, 1.0)
}

fn idm_accel(v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / desired.max(1e-6)).powf(IDM_DELTA);
    let acc = match leader {
        None => IDM_A * free,
        Some((gap, _)) if gap <= 0.0 => IDM_MIN_ACCEL,
        Some((gap, lead_v)) => {
            let s_star = IDM_S0 + (v * IDM_T + v * (v - lead_v) / (2.0 * (IDM_A * IDM_B).sqrt())).max(0.0);
            IDM_A * (free - (s_star / gap).powi(2))
        }
    };
    acc.clamp(IDM_MIN_ACCEL, IDM_A)
}

/// Seeded multi-lane highway with one controllable ego vehicle.
#[derive(Debug, Clone)]
pub struct Highway {
    config: EnvConfig,
    speeds: [f64; SPEED_LEVELS],
    ego: VehicleState,
    ego_vy: f64,
    target_lane: usize,
    speed_index: usize,
    others: Vec<BackgroundVehicle>,
    spawn_gaps: Vec<f64>,
    steps: usize,
    done: bool,
}

impl Highway {
    /// Creates an environment and resets it with `seed`.
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let mut env = Self {
            speeds: target_speeds(),
            ego: VehicleState::in_lane(0, 0.0, 0.0),
            ego_vy: 0.0,
            target_lane: 0,
            speed_index: 0,
            others: Vec::new(),
            spawn_gaps: Vec::new(),
            steps: 0,
            done: false,
            config,
        };
        env.reset(seed);
        Ok(env)
    }

    /// Builds an environment from an explicit scene. The ego targets `speed_index`.
    pub fn from_scene(
        config: EnvConfig,
        ego: VehicleState,
        speed_index: usize,
        others: Vec<BackgroundVehicle>,
    ) -> Result<Self, SimError> {
        config.validate()?;
        if speed_index >= SPEED_LEVELS {
            return Err(SimError::Config(format!("speed index {speed_index} out of range")));
        }
        for v in std::iter::once(&ego).chain(others.iter().map(|o| &o.state)) {
            if v.lane >= config.lanes || v.v < 0.0 || !v.x.is_finite() || !v.y.is_finite() {
                return Err(SimError::Config(format!("invalid vehicle state {v:?}")));
            }
        }
        Ok(Self {
            speeds: target_speeds(),
            ego,
            ego_vy: 0.0,
            target_lane: ego.lane,
            speed_index,
            others,
            spawn_gaps: Vec::new(),
            steps: 0,
            done: false,
            config,
        })
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lanes = self.config.lanes;
        let lane = rng.random_range(0..lanes);
        self.speed_index = rng.random_range(3..=5);
        self.ego = VehicleState::in_lane(lane, 0.0, self.speeds[self.speed_index]);
        self.ego_vy = 0.0;
        self.target_lane = lane;
        self.steps = 0;
        self.done = false;
        self.others.clear();
        self.spawn_gaps.clear();

        let n = self.config.spawn_count();
        if n > 0 {
            let gap_dist = Exp::new(self.config.density / BASE_SPACING).expect("positive rate");
            let mut front = vec![0.0; lanes];
            let mut back = vec![0.0; lanes];
            for _ in 0..n {
                let lane = rng.random_range(0..lanes);
                let ahead = rng.random_bool(P_AHEAD);
                let gap: f64 = gap_dist.sample(&mut rng);
                let desired = rng.random_range(BG_SPEED_RANGE.0..=BG_SPEED_RANGE.1);
                self.spawn_gaps.push(gap);
                let x = if ahead {
                    front[lane] += VEHICLE_LENGTH + gap;
                    front[lane]
                } else {
                    back[lane] -= VEHICLE_LENGTH + gap;
                    back[lane]
                };
                self.others.push(BackgroundVehicle { state: VehicleState::in_lane(lane, x, desired), desired_speed: desired });
            }
            self.cap_initial_speeds();
        }
        self.observe()
    }

    /// Limits each background vehicle's initial speed so it can stop behind its leader
    /// with comfortable braking.
    fn cap_initial_speeds(&mut self) {
        for lane in 0..self.config.lanes {
            let mut idx: Vec<usize> = (0..self.others.len()).filter(|&i| self.others[i].state.lane == lane).collect();
            idx.sort_by(|&a, &b| self.others[b].state.x.total_cmp(&self.others[a].state.x));
            let ego_here = self.ego.lane == lane;
            let mut leader: Option<(f64, f64)> = None;
            let mut ego_pending = ego_here;
            for i in idx {
                let s = self.others[i].state;
                if ego_pending && s.x < self.ego.x {
                    leader = Some((self.ego.x, self.ego.v));
                    ego_pending = false;
                }
                if let Some((lx, lv)) = leader {
                    let gap = (lx - s.x - VEHICLE_LENGTH).max(0.0);
                    let cap = lv + (2.0 * IDM_B * gap).sqrt();
                    self.others[i].state.v = s.v.min(cap);
                }
                leader = Some((s.x, self.others[i].state.v));
            }
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn speed_index(&self) -> usize {
        self.speed_index
    }

    pub fn target_speed(&self) -> f64 {
        self.speeds[self.speed_index]
    }

    pub fn target_lane(&self) -> usize {
        self.target_lane
    }

    pub fn others(&self) -> &[BackgroundVehicle] {
        &self.others
    }

    /// Bumper-to-bumper gaps drawn at the last reset, in spawn order.
    pub fn spawn_gaps(&self) -> &[f64] {
        &self.spawn_gaps
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: MetaAction) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        let lanes = self.config.lanes;
        match action {
            MetaAction::LaneLeft if self.target_lane > 0 => self.target_lane -= 1,
            MetaAction::LaneRight if self.target_lane + 1 < lanes => self.target_lane += 1,
            MetaAction::Faster => self.speed_index = (self.speed_index + 1).min(SPEED_LEVELS - 1),
            MetaAction::Slower => self.speed_index = self.speed_index.saturating_sub(1),
            _ => {}
        }

        let dt = DECISION_DT / SUBSTEPS as f64;
        let target_v = self.speeds[self.speed_index];
        let start_y = self.ego.y;
        let lateral_rate = (lane_center(self.target_lane) - start_y) / DECISION_DT;
        let mut collided = false;
        for sub in 1..=SUBSTEPS {
            self.advance_background(dt);
            let v = self.ego.v;
            let a = ((target_v - v) / dt).clamp(-EGO_MAX_ACCEL, EGO_MAX_ACCEL);
            let v_new = (v + a * dt).max(0.0);
            self.ego.x += 0.5 * (v + v_new) * dt;
            self.ego.v = v_new;
            self.ego.y = if sub == SUBSTEPS {
                lane_center(self.target_lane)
            } else {
                start_y + lateral_rate * dt * sub as f64
            };
            self.ego.lane = lane_of(self.ego.y, lanes);
            self.ego_vy = lateral_rate;
            if self.ego_collides() {
                collided = true;
                break;
            }
        }

        self.steps += 1;
        self.done = collided || self.steps >= self.config.duration;
        let reward = compute_reward(&self.ego, collided, lanes);
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo { collided, speed: self.ego.v, lane: self.ego.lane },
        })
    }

    fn ego_collides(&self) -> bool {
        self.others.iter().any(|o| {
            (o.state.x - self.ego.x).abs() < VEHICLE_LENGTH && (o.state.y - self.ego.y).abs() < VEHICLE_WIDTH
        })
    }

    /// One synchronous IDM update of every background vehicle.
    fn advance_background(&mut self, dt: f64) {
        let lanes = self.config.lanes;
        let ego_lane = lane_of(self.ego.y, lanes);
        let accels: Vec<f64> = self
            .others
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let s = &o.state;
                let mut best: Option<(f64, f64)> = None;
                let mut consider = |x: f64, v: f64| {
                    if x > s.x && best.is_none_or(|(bx, _)| x < bx) {
                        best = Some((x, v));
                    }
                };
                for (j, other) in self.others.iter().enumerate() {
                    if j != i && other.state.lane == s.lane {
                        consider(other.state.x, other.state.v);
                    }
                }
                if ego_lane == s.lane {
                    consider(self.ego.x, self.ego.v);
                }
                idm_accel(s.v, o.desired_speed, best.map(|(x, v)| (x - s.x - VEHICLE_LENGTH, v)))
            })
            .collect();
        for (o, a) in self.others.iter_mut().zip(accels) {
            let v = o.state.v;
            let v_new = (v + a * dt).max(0.0);
            o.state.x += 0.5 * (v + v_new) * dt;
            o.state.v = v_new;
        }
    }

    /// Ego row, then the nearest `V - 1` background vehicles by longitudinal distance.
    pub fn observe(&self) -> Observation {
        let v_count = self.config.observed_vehicles;
        let mut obs = Observation::zeros(v_count);
        obs.row_mut(0).copy_from_slice(&[1.0, self.ego.x, self.ego.y, self.ego.v, self.ego_vy]);
        let mut order: Vec<&BackgroundVehicle> = self.others.iter().collect();
        order.sort_by(|a, b| {
            let da = a.state.x - self.ego.x;
            let db = b.state.x - self.ego.x;
            da.abs()
                .total_cmp(&db.abs())
                .then(a.state.lane.cmp(&b.state.lane))
                .then((da < 0.0).cmp(&(db < 0.0)))
        });
        for (row, o) in (1..v_count).zip(order) {
            let s = &o.state;
            let values: [f64; FEATURES] = [1.0, s.x, s.y, s.v, 0.0];
            obs.row_mut(row).copy_from_slice(&values);
        }
        obs
    }
}
