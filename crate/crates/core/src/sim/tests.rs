use proptest::prelude::*;

use super::*;

fn alone(lanes: usize, lane: usize, v: f64, speed_index: usize) -> Highway {
    let config = EnvConfig::new(lanes, 0.0).unwrap();
    Highway::from_scene(config, VehicleState::in_lane(lane, 0.0, v), speed_index, vec![]).unwrap()
}

fn parked(lane: usize, x: f64) -> BackgroundVehicle {
    BackgroundVehicle { state: VehicleState::in_lane(lane, x, 0.0), desired_speed: 0.0 }
}

#[test]
fn reset_is_deterministic() {
    let config = EnvConfig::from_id("lane-4-density-2.5").unwrap();
    let a = Highway::new(config.clone(), 17).unwrap();
    let b = Highway::new(config, 17).unwrap();
    assert_eq!(a.observe().data(), b.observe().data());
    assert_eq!(a.spawn_gaps(), b.spawn_gaps());
}

#[test]
fn ego_row_is_always_present() {
    let config = EnvConfig::from_id("lane-5-density-3").unwrap();
    let mut env = Highway::new(config, 0).unwrap();
    for seed in 0..50 {
        let obs = env.reset(seed);
        assert_eq!(obs.row(0)[PRESENCE], 1.0);
        assert_eq!(obs.vehicles(), 15);
        assert!((3..=5).contains(&env.speed_index()));
    }
}

#[test]
fn spawn_gap_mean_scales_inversely_with_density() {
    let mean_gap = |density: f64| {
        let mut env = Highway::new(EnvConfig::new(3, density).unwrap(), 0).unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..1000 {
            env.reset(seed);
            sum += env.spawn_gaps().iter().sum::<f64>();
            n += env.spawn_gaps().len();
        }
        sum / n as f64
    };
    let ratio = mean_gap(3.0) / mean_gap(2.0);
    assert!((ratio / (2.0 / 3.0) - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn faster_raises_target_by_one_level() {
    let mut env = alone(3, 0, 16.0, 4);
    env.step(MetaAction::Faster).unwrap();
    assert_eq!(env.target_speed(), 20.0);
    assert!((env.ego().v - 20.0).abs() < 1e-12);
}

#[test]
fn idle_at_constant_speed_advances_twenty_meters() {
    let mut env = alone(3, 1, 20.0, 5);
    let r = env.step(MetaAction::Idle).unwrap();
    assert!((env.ego().x - 20.0).abs() < 1e-9);
    assert!(!r.done);
}

#[test]
fn faster_into_stopped_vehicle_collides() {
    let config = EnvConfig::new(3, 0.0).unwrap();
    let ego = VehicleState::in_lane(1, 0.0, 16.0);
    let lead = parked(1, VEHICLE_LENGTH + 3.0);
    let mut env = Highway::from_scene(config, ego, 4, vec![lead]).unwrap();
    let r = env.step(MetaAction::Faster).unwrap();
    assert!(r.info.collided);
    assert!(r.done);
    assert!(env.is_done());
    assert_eq!(env.step(MetaAction::Idle).unwrap_err(), SimError::EpisodeDone);
}

#[test]
fn lane_change_at_road_edge_acts_as_idle() {
    let mut env = alone(3, 0, 20.0, 5);
    env.step(MetaAction::LaneLeft).unwrap();
    assert_eq!(env.ego().lane, 0);
    assert_eq!(env.ego().y, 0.0);
    env.step(MetaAction::LaneRight).unwrap();
    assert_eq!(env.ego().lane, 1);
    assert_eq!(env.ego().y, LANE_WIDTH);
}

#[test]
fn reward_formula_examples() {
    let slow0 = VehicleState::in_lane(0, 0.0, 10.0);
    assert_eq!(compute_reward(&slow0, true, 3), 0.0);
    for lane in 0..3 {
        for v in [0.0, 25.0, 32.0] {
            assert!(compute_reward(&VehicleState::in_lane(lane, 0.0, v), true, 3) <= 1.0 / 3.0 + 1e-12);
        }
    }
    assert!((compute_reward(&VehicleState::in_lane(2, 0.0, 30.0), false, 3) - 1.0).abs() < 1e-12);
    assert!((compute_reward(&VehicleState::in_lane(0, 0.0, 20.0), false, 3) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn empty_road_faster_policy_reaches_top_speed() {
    let mut env = alone(3, 2, 16.0, 4);
    let mut rewards = Vec::new();
    loop {
        let r = env.step(MetaAction::Faster).unwrap();
        rewards.push((env.ego().v, r.reward));
        if r.done {
            break;
        }
    }
    assert_eq!(rewards.len(), 30);
    assert_eq!(env.ego().v, 32.0);
    for (v, r) in rewards {
        if v >= 30.0 {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn observation_pads_and_is_unnormalized() {
    let config = EnvConfig::new(3, 0.0).unwrap();
    let ego = VehicleState::in_lane(1, 100.0, 20.0);
    let other = BackgroundVehicle { state: VehicleState::in_lane(2, 130.5, 22.25), desired_speed: 25.0 };
    let env = Highway::from_scene(config, ego, 5, vec![other]).unwrap();
    let obs = env.observe();
    assert_eq!(obs.row(0), &[1.0, 100.0, 4.0, 20.0, 0.0]);
    assert_eq!(obs.row(1), &[1.0, 130.5, 8.0, 22.25, 0.0]);
    for i in 2..15 {
        assert!(obs.row(i).iter().all(|&v| v == 0.0));
        assert!(!obs.present(i));
    }
}

#[test]
fn equidistant_vehicles_tie_break_by_lane_then_ahead() {
    let config = EnvConfig::new(3, 0.0).unwrap();
    let ego = VehicleState::in_lane(1, 0.0, 20.0);
    let others = vec![parked(2, 10.0), parked(0, -10.0), parked(0, 10.0), parked(1, -30.0)];
    let env = Highway::from_scene(config, ego, 5, others).unwrap();
    let obs = env.observe();
    let xs_lanes: Vec<(f64, f64)> = (1..5).map(|i| (obs.row(i)[1], obs.row(i)[2])).collect();
    assert_eq!(xs_lanes, vec![(10.0, 0.0), (-10.0, 0.0), (10.0, 8.0), (-30.0, 4.0)]);
}

#[test]
fn background_vehicles_keep_their_lane_and_do_not_reverse() {
    let config = EnvConfig::from_id("lane-3-density-2").unwrap();
    let mut env = Highway::new(config, 5).unwrap();
    let lanes: Vec<usize> = env.others().iter().map(|o| o.state.lane).collect();
    while !env.is_done() {
        env.step(MetaAction::Idle).unwrap();
        for (o, &l) in env.others().iter().zip(&lanes) {
            assert_eq!(o.state.lane, l);
            assert!(o.state.v >= 0.0);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(EnvConfig::new(3, -1.0).is_err());
    assert!(EnvConfig::new(9, 2.0).is_err());
    let bad_lane = VehicleState::in_lane(5, 0.0, 10.0);
    assert!(Highway::from_scene(EnvConfig::default(), bad_lane, 4, vec![]).is_err());
    assert!(Highway::from_scene(EnvConfig::default(), VehicleState::in_lane(0, 0.0, 1.0), 9, vec![]).is_err());
}

fn rollout(config: &EnvConfig, seed: u64, actions: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut env = Highway::new(config.clone(), seed).unwrap();
    let mut rewards = Vec::new();
    let mut obs = vec![env.observe().data().to_vec()];
    for &a in actions.iter().cycle() {
        let r = env.step(MetaAction::from_index(a).unwrap()).unwrap();
        rewards.push(r.reward);
        obs.push(r.observation.data().to_vec());
        assert_eq!(r.done, r.info.collided || env.steps() == config.duration);
        if r.done {
            break;
        }
    }
    (rewards, obs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episode_return_is_bounded(seed in any::<u64>(), actions in proptest::collection::vec(0usize..5, 1..30), env_idx in 0usize..3) {
        let config = EnvConfig::from_id(STANDARD_ENV_IDS[env_idx]).unwrap();
        let (rewards, _) = rollout(&config, seed, &actions);
        let ret: f64 = rewards.iter().sum();
        prop_assert!((0.0..=30.0).contains(&ret));
        prop_assert!(rewards.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn trajectories_are_bit_identical(seed in any::<u64>(), actions in proptest::collection::vec(0usize..5, 1..30)) {
        let config = EnvConfig::from_id("lane-3-density-2").unwrap();
        prop_assert_eq!(rollout(&config, seed, &actions), rollout(&config, seed, &actions));
    }

    #[test]
    fn absent_rows_are_zero(seed in any::<u64>()) {
        let config = EnvConfig::new(3, 0.5).unwrap();
        let env = Highway::new(config, seed).unwrap();
        let obs = env.observe();
        for i in 0..obs.vehicles() {
            let row = obs.row(i);
            prop_assert!(row[PRESENCE] == 0.0 || row[PRESENCE] == 1.0);
            if row[PRESENCE] == 0.0 {
                prop_assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }
}
