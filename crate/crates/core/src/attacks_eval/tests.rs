use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::Dataset;
use crate::mop_policy::{stack_observations, InputEncoder, MopConfig, NetworkConfig, QNet};
use crate::seeding;
use crate::sim::{EnvConfig, Highway, Observation, FEATURES};
use crate::teacher::{collect_rollouts, RandomTeacher, ScriptedOracle};
use crate::training::{evaluate_greedy, TrainConfig};

fn env() -> EnvConfig {
    EnvConfig::from_id("lane-3-density-2").unwrap()
}

fn norm() -> Normalizer {
    Normalizer::new([0.0, 0.0, 0.0, 0.0, -4.0], [1.0, 1000.0, 12.0, 32.0, 4.0])
}

fn small_mop(seed: u64) -> QNet {
    let cfg = MopConfig { proj_width: 8, token_width: 8, ..MopConfig::default() };
    NetworkConfig { mop: cfg, ..NetworkConfig::default() }.build(InputEncoder::default(), seed).unwrap()
}

fn observations(n: usize, seed: u64) -> Vec<Observation> {
    let mut sim = Highway::new(env(), seed).unwrap();
    let mut out = vec![sim.observe()];
    while out.len() < n && !sim.is_done() {
        sim.step(crate::sim::MetaAction::Idle).unwrap();
        out.push(sim.observe());
    }
    out
}

fn rngs(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
    (0..n).map(|i| seeding::rng(seeding::derive_seed(seed, i as u64), seeding::streams::ATTACK)).collect()
}

fn refs(v: &[Observation]) -> Vec<&Observation> {
    v.iter().collect()
}

#[test]
fn normalization_maps_range_endpoints_and_round_trips() {
    let n = norm();
    let mut rows = vec![1.0, 0.0, 0.0, 0.0, -4.0, 1.0, 1000.0, 12.0, 32.0, 4.0];
    let orig = rows.clone();
    n.normalize_rows(&mut rows);
    assert_eq!(rows, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    n.denormalize_rows(&mut rows);
    assert_eq!(rows, orig);
    for obs in observations(20, 3) {
        let back = n.denormalize(&n.normalize(&obs));
        for (a, b) in back.data().iter().zip(obs.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_range_is_reported_not_divided() {
    let n = Normalizer::new([0.0, 0.0, 4.0, 0.0, 0.0], [1.0, 10.0, 4.0, 1.0, 1.0]);
    assert_eq!(n.span(2), 1.0);
    assert!(n.warnings.iter().any(|w| w.contains('y')), "{:?}", n.warnings);
    let mut row = vec![1.0, 5.0, 4.0, 0.5, 0.5];
    n.normalize_rows(&mut row);
    assert!(row.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_budget_returns_clean_observation() {
    let net = small_mop(0);
    let obs = observations(4, 1);
    for kind in AttackKind::ALL {
        let spec = AttackSpec::new(kind).with_eps(0.0);
        let out = attack_batch(&refs(&obs), Some(&net), &spec, &norm(), &mut rngs(obs.len(), 0)).unwrap();
        assert_eq!(out, obs, "{kind}");
    }
}

#[test]
fn gradient_attacks_need_a_network() {
    let obs = observations(1, 2);
    for kind in [AttackKind::Fgsm, AttackKind::Pgd] {
        let err = attack(&obs[0], None, &AttackSpec::new(kind), &norm(), &mut rngs(1, 0).remove(0)).unwrap_err();
        assert!(matches!(err, EvalError::GradientUnavailable(k) if k == kind));
    }
}

#[test]
fn fgsm_steps_by_gradient_sign_in_normalized_space() {
    let net = small_mop(1);
    let n = norm();
    let obs = observations(6, 4);
    let x = stack_observations(&refs(&obs), 15).unwrap();
    let actions = net.greedy_actions(&refs(&obs)).unwrap();
    let (grad, _) = ce_input_gradient(&net, &x, obs.len(), &actions).unwrap();
    let adv = fgsm(&net, &n, &x, obs.len(), &actions, 0.1).unwrap();
    let (mut z0, mut z1) = (x.data().to_vec(), adv.data().to_vec());
    n.normalize_rows(&mut z0);
    n.normalize_rows(&mut z1);
    let mut checked = 0;
    for i in 0..x.len() {
        let (r, c) = (i / FEATURES, i % FEATURES);
        if x.data()[r * FEATURES] == 0.0 || c == 0 {
            assert_eq!(adv.data()[i], x.data()[i]);
            continue;
        }
        let g = grad.data()[i] * n.span(c);
        let want = (z0[i] + 0.1 * g.signum() * (g != 0.0) as u8 as f64).clamp(0.0, 1.0);
        assert!((z1[i] - want).abs() < 1e-9, "coord {i}: {} vs {want}", z1[i]);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn fgsm_equals_single_full_step_pgd() {
    let net = small_mop(2);
    let obs = observations(5, 5);
    let x = stack_observations(&refs(&obs), 15).unwrap();
    let actions = net.greedy_actions(&refs(&obs)).unwrap();
    let a = fgsm(&net, &norm(), &x, obs.len(), &actions, 0.05).unwrap();
    let b = pgd_linf(&net, &norm(), &x, obs.len(), &actions, 0.05, 1, 0.05).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

fn max_linf(n: &Normalizer, a: &Observation, b: &Observation) -> f64 {
    let (za, zb) = (n.normalize(a), n.normalize(b));
    za.data().iter().zip(zb.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn every_attack_respects_budget_and_presence() {
    let net = small_mop(3);
    let n = norm();
    let obs = observations(8, 6);
    for kind in AttackKind::ALL {
        let spec = AttackSpec::new(kind).with_eps(0.1);
        let out = attack_batch(&refs(&obs), Some(&net), &spec, &n, &mut rngs(obs.len(), 1)).unwrap();
        for (a, o) in out.iter().zip(&obs) {
            assert!(max_linf(&n, a, o) <= 0.1 + 1e-9, "{kind}");
            for v in 0..o.vehicles() {
                assert_eq!(a.row(v)[0], o.row(v)[0]);
                if !o.present(v) {
                    assert_eq!(a.row(v), o.row(v));
                }
            }
            if kind.needs_gradient() {
                let z = n.normalize(a);
                assert!(z.data().iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)), "{kind}");
            }
        }
    }
}

#[test]
fn noise_is_reproducible_per_seed() {
    let obs = observations(3, 7);
    let spec = AttackSpec::new(AttackKind::Gaussian).with_eps(0.2);
    let a = attack_batch(&refs(&obs), None, &spec, &norm(), &mut rngs(3, 9)).unwrap();
    let b = attack_batch(&refs(&obs), None, &spec, &norm(), &mut rngs(3, 9)).unwrap();
    let c = attack_batch(&refs(&obs), None, &spec, &norm(), &mut rngs(3, 10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn pgd_does_not_lower_target_loss_much() {
    let net = small_mop(4);
    let obs = observations(6, 8);
    let x = stack_observations(&refs(&obs), 15).unwrap();
    let actions = net.greedy_actions(&refs(&obs)).unwrap();
    let (_, clean) = ce_input_gradient(&net, &x, obs.len(), &actions).unwrap();
    let adv = pgd_linf(&net, &norm(), &x, obs.len(), &actions, 0.1, 10, 0.01).unwrap();
    let (_, attacked) = ce_input_gradient(&net, &adv, obs.len(), &actions).unwrap();
    let (c, a) = (clean.iter().sum::<f64>(), attacked.iter().sum::<f64>());
    assert!(a >= c, "{a} < {c}");
}

#[test]
fn random_policy_ignores_observation_noise() {
    let seeds = eval_seeds(0, 12);
    let clean = evaluate(&env(), &mut RandomPolicy::new(5), &seeds, &AttackSpec::none(), None).unwrap();
    let spec = AttackSpec::new(AttackKind::Uniform).with_seed(3);
    let noisy = evaluate(&env(), &mut RandomPolicy::new(5), &seeds, &spec, Some(&norm())).unwrap();
    assert_eq!(clean.returns, noisy.returns);
}

#[test]
fn clean_eval_matches_trainer_eval() {
    let net = small_mop(5);
    let cfg = TrainConfig { eval_episodes: 3, seed: 11, ..TrainConfig::default() };
    let a = evaluate_greedy(&env(), &net, &cfg).unwrap();
    let b = evaluate(&env(), &mut GreedyPolicy::new(&net), &eval_seeds(11, 3), &AttackSpec::none(), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lockstep_batching_does_not_change_episode_returns() {
    let net = small_mop(6);
    let seeds = eval_seeds(2, 4);
    let all = evaluate(&env(), &mut GreedyPolicy::new(&net), &seeds, &AttackSpec::none(), None).unwrap();
    for (k, &s) in seeds.iter().enumerate() {
        let one = evaluate(&env(), &mut GreedyPolicy::new(&net), &[s], &AttackSpec::none(), None).unwrap();
        assert_eq!(one.returns[0], all.returns[k]);
    }
}

#[test]
fn attacked_eval_requires_ranges() {
    let net = small_mop(7);
    let err = evaluate(&env(), &mut GreedyPolicy::new(&net), &[1], &AttackSpec::new(AttackKind::Fgsm), None);
    assert!(matches!(err, Err(EvalError::MissingRanges)));
}

#[test]
fn report_statistics_and_json_round_trip() {
    let r = EvalReport::new("e".into(), "p".into(), vec![1.0, 3.0], AttackSpec::none(), vec![7, 8]);
    assert_eq!((r.mean, r.std), (2.0, 1.0));
    let pooled = EvalReport::pooled(&[r.clone(), r.clone()]).unwrap();
    assert_eq!(pooled.returns.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    r.save_json(&path).unwrap();
    assert_eq!(EvalReport::load_json(&path).unwrap(), r);
}

#[test]
fn router_report_with_closed_gate_is_all_distilled() {
    let net = small_mop(8);
    let rep = router_report(&env(), net.as_mop().unwrap(), &[1, 2]).unwrap();
    assert_eq!(rep.counts[0], rep.counts.iter().copied().max().unwrap());
    for v in 0..15 {
        if rep.counts[v] > 0 {
            assert_eq!(rep.adapt(v), 0.0);
            assert!((rep.distil(v) - 1.0).abs() < 1e-12);
        }
    }
    assert!(rep.to_csv().starts_with("vehicle,distil,adapt,count\n"));
}

#[test]
fn router_report_rows_sum_to_one_with_open_gate() {
    let mut net = small_mop(9);
    let mop = net.as_mop_mut().unwrap();
    mop.set_gate(&[0.7; 15]).unwrap();
    let rep = router_report(&env(), mop, &[3]).unwrap();
    for v in 0..15 {
        if rep.counts[v] > 0 {
            assert!((rep.distil(v) + rep.adapt(v) - 1.0).abs() < 1e-9);
            assert!(rep.adapt(v) > 0.0);
        }
    }
}

fn sources() -> (Dataset, Dataset) {
    let e = env();
    let t = collect_rollouts(&e, &mut ScriptedOracle::new(3), 120, 1).unwrap();
    let r = collect_rollouts(&e, &mut RandomTeacher::new(2), 120, 2).unwrap();
    (t, r)
}

fn tiny_sweep() -> SweepConfig {
    let mut network = NetworkConfig::with_arch(crate::mop_policy::Arch::Mlp);
    network.mlp.hidden = 8;
    SweepConfig {
        seeds: vec![0, 1],
        total: 100,
        network,
        train: TrainConfig { total_steps: 4, eval_every: 4, eval_episodes: 1, ..TrainConfig::default() },
        ..SweepConfig::default()
    }
}

#[test]
fn sweep_covers_grid_in_order() {
    let (t, r) = sources();
    let rows = ratio_sweep(&t, &r, &tiny_sweep(), 1).unwrap();
    assert_eq!(rows.len(), 5 * 2 * 2);
    assert_eq!((rows[0].p, rows[0].teacher_transitions), (0.0, 0));
    assert_eq!((rows[19].p, rows[19].teacher_transitions), (1.0, 100));
    assert_eq!(rows.iter().filter(|r| r.p == 0.25).map(|r| r.teacher_transitions).max(), Some(25));
    let csv = SweepRow::to_csv(&rows);
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn sweep_output_independent_of_jobs() {
    let (t, r) = sources();
    let mut cfg = tiny_sweep();
    cfg.p_values = vec![0.0, 1.0];
    let a = SweepRow::to_csv(&ratio_sweep(&t, &r, &cfg, 1).unwrap());
    let b = SweepRow::to_csv(&ratio_sweep(&t, &r, &cfg, 3).unwrap());
    assert_eq!(a, b);
}

#[test]
fn sweep_rejects_bad_ratio() {
    let (t, r) = sources();
    let cfg = SweepConfig { p_values: vec![1.5], ..tiny_sweep() };
    assert!(matches!(ratio_sweep(&t, &r, &cfg, 1), Err(EvalError::Invalid(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_stays_within_budget(seed in 0u64..1000, eps in 0.001f64..0.5, gaussian in any::<bool>()) {
        let obs = observations(2, seed % 17);
        let kind = if gaussian { AttackKind::Gaussian } else { AttackKind::Uniform };
        let spec = AttackSpec::new(kind).with_eps(eps).with_seed(seed);
        let n = norm();
        let out = attack_batch(&refs(&obs), None, &spec, &n, &mut rngs(obs.len(), seed)).unwrap();
        for (a, o) in out.iter().zip(&obs) {
            prop_assert!(max_linf(&n, a, o) <= eps + 1e-9);
        }
    }
}
