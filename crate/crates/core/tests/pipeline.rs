use mopdrive::attacks_eval::{eval_seeds, evaluate, router_report, AttackKind, AttackSpec, GreedyPolicy, Normalizer};
use mopdrive::datasets::{mix, MixSpec};
use mopdrive::mop_policy::{InputEncoder, MopConfig, NetworkConfig, QNet};
use mopdrive::sim::EnvConfig;
use mopdrive::teacher::{collect_rollouts, replay_mismatches, RandomTeacher, ScriptedOracle};
use mopdrive::training::{offline_train, online_adapt, Algorithm, TrainConfig};

#[test]
fn distill_then_adapt_then_attack() {
    let env = EnvConfig::from_id("lane-3-density-2").unwrap();
    let teacher = collect_rollouts(&env, &mut ScriptedOracle::new(env.lanes), 800, 1).unwrap();
    let random = collect_rollouts(&env, &mut RandomTeacher::new(2), 800, 2).unwrap();
    assert!(replay_mismatches(&teacher).unwrap().is_empty());
    let data = mix(&teacher, &random, &MixSpec { p: 0.25, total: 800, seed: 0 }).unwrap();

    let network = NetworkConfig { mop: MopConfig { proj_width: 8, token_width: 8, ..MopConfig::default() }, ..NetworkConfig::default() };
    let net = network.build(InputEncoder::from_dataset(&data), 0).unwrap();
    let offline = TrainConfig {
        algorithm: Algorithm::Rapid,
        total_steps: 100,
        eval_every: 50,
        eval_episodes: 2,
        inner_steps: 3,
        batch_size: Some(16),
        ..TrainConfig::default()
    };
    let (distilled, out) = offline_train(&data, net, &offline).unwrap();
    assert_eq!(out.metrics.rows.len(), 2);
    assert!(distilled.as_mop().unwrap().gate().unwrap().iter().all(|&g| g == 0.0));
    let closed = router_report(&env, distilled.as_mop().unwrap(), &[9]).unwrap();
    assert!((0..15).all(|v| closed.adapt(v) == 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("phase2.ckpt");
    distilled.save(&path).unwrap();
    let distilled = QNet::load(&path).unwrap();

    let target = EnvConfig::from_id("lane-4-density-2.5").unwrap();
    let online = TrainConfig { total_steps: 1000, eval_every: 500, eval_episodes: 2, batch_size: Some(16), ..TrainConfig::default() };
    let (adapted, _) = online_adapt(&target, distilled.clone(), &online).unwrap();
    let (before, after) = (distilled.params(), adapted.params());
    for id in before.group_ids("theta_p1") {
        assert_eq!(before.value(id), after.value(id));
    }
    let gate = adapted.as_mop().unwrap().gate().unwrap();
    assert!(gate.iter().map(|g| g * g).sum::<f64>().sqrt() > 0.0);
    let open = router_report(&target, adapted.as_mop().unwrap(), &[9]).unwrap();
    assert!(open.adapt(0) > 0.0);

    let norm = Normalizer::from_dataset(&data).unwrap();
    let seeds = eval_seeds(3, 2);
    for kind in AttackKind::ALL {
        let spec = AttackSpec::new(kind);
        let r = evaluate(&target, &mut GreedyPolicy::new(&adapted), &seeds, &spec, Some(&norm)).unwrap();
        assert_eq!(r.returns.len(), 2);
        assert!(r.mean.is_finite() && r.mean >= 0.0);
    }
}
