//! Deterministic multi-lane highway simulator.

mod config;
mod env;
mod observation;

pub use config::{target_speeds, EnvConfig, MetaAction, MAX_TARGET_SPEED, NUM_ACTIONS, SPEED_LEVELS, STANDARD_ENV_IDS};
pub use env::{
    compute_reward, lane_center, lane_of, BackgroundVehicle, Highway, StepInfo, StepResult, VehicleState,
    BASE_SPACING, DECISION_DT, EGO_MAX_ACCEL, LANE_WIDTH, SUBSTEPS, VEHICLE_LENGTH, VEHICLE_WIDTH,
};
pub use observation::{Observation, FEATURES, PRESENCE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("episode is finished; call reset first")]
    EpisodeDone,
}

#[cfg(test)]
mod tests;
