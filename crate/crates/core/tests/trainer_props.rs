//! Training-loop invariants: clean equivalence, stored adversarial next
//! states, exploration statistics and replay-buffer bookkeeping.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use voltgrid::attacks::AttackKind;
use voltgrid::env::{ActionVector, Scenario, StateVector};
use voltgrid::qnet::{NetConfig, QNetwork};
use voltgrid::trainer::{
    epsilon_greedy, greedy_action, stream_rng, streams, train, train_with, GradientAdversary,
    NoAdversary, ReplayBuffer, TrainConfig, TrainOutput, Transition,
};

fn scenario() -> Arc<Scenario> {
    Arc::new(Scenario::builtin("5bus").unwrap())
}

fn quick(attack_kind: AttackKind) -> TrainConfig {
    TrainConfig {
        episodes: 12,
        batch_size: 16,
        warmup: 32,
        buffer_capacity: 400,
        target_sync: 40,
        net: NetConfig {
            hidden_layers: 1,
            hidden_width: 16,
        },
        attack_kind,
        p_attack: 1.0,
        e_attack: Some(4),
        seed: 3,
        ..TrainConfig::desk()
    }
}

fn assert_same_run(a: &TrainOutput, b: &TrainOutput) {
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.log.gradient_steps, b.log.gradient_steps);
    assert_eq!(a.net, b.net);
}

#[test]
fn disabled_attack_paths_reduce_to_clean_ddqn() {
    let sc = scenario();
    let reference = train_with(&quick(AttackKind::None), sc.clone(), &mut NoAdversary, |_, _| Ok(()))
        .unwrap();
    assert_eq!(reference.log.attacked_episodes(), 0);

    let variants = [
        quick(AttackKind::None),
        TrainConfig {
            p_attack: 0.0,
            ..quick(AttackKind::Pgd)
        },
        TrainConfig {
            e_attack: None,
            ..quick(AttackKind::Pgd)
        },
        TrainConfig {
            e_attack: Some(usize::MAX),
            ..quick(AttackKind::Fgsm)
        },
    ];
    for config in &variants {
        let out = train(config, sc.clone()).unwrap();
        assert_eq!(out.log.attacked_transitions, 0);
        assert_same_run(&reference, &out);
    }
}

#[test]
fn attacked_run_differs_and_is_reproducible() {
    let sc = scenario();
    let clean = train(&quick(AttackKind::None), sc.clone()).unwrap();
    let a = train(&quick(AttackKind::Pgd), sc.clone()).unwrap();
    let b = train(&quick(AttackKind::Pgd), sc).unwrap();
    assert_same_run(&a, &b);
    assert!(a.log.attacked_episodes() > 0);
    assert_ne!(a.net, clean.net);
}

#[test]
fn stored_adversarial_next_states_are_admissible() {
    let sc = scenario();
    let config = TrainConfig {
        e_attack: Some(0),
        buffer_capacity: 10_000,
        ..quick(AttackKind::Pgd)
    };
    let layout = sc.layout();
    let mask = layout.voltage_mask();
    let delta = config.attack.delta;
    let mut adversary = GradientAdversary::new(
        AttackKind::Pgd,
        config.attack.clone().with_scope(mask.clone()),
        stream_rng(config.seed, streams::ATTACK_NOISE),
    );
    adversary.record = Some(Vec::new());
    let out = train_with(&config, sc, &mut adversary, |_, _| Ok(())).unwrap();

    let record = adversary.record.unwrap();
    assert_eq!(record.len(), out.buffer.len());
    for p in &record {
        assert!(p.meta.linf <= delta);
    }

    // Rollouts continue from the clean next state, so the gap between a stored
    // next state and the following transition's state is the recorded η.
    let stored: Vec<&Transition> = out.buffer.iter().collect();
    let mut checked = 0;
    for (pair, p) in stored.windows(2).zip(&record) {
        assert_eq!(&pair[0].s_next, &p.s_adv);
        if pair[0].done {
            continue;
        }
        for (i, ((adv, clean), eta)) in pair[0].s_next.0.iter().zip(&pair[1].s.0).zip(&p.eta).enumerate() {
            assert_eq!(*adv, clean + eta);
            assert!(eta.abs() <= delta, "entry {i}: |η| = {}", eta.abs());
            if !mask[i] {
                assert_eq!(*eta, 0.0, "entry {i} outside the voltage mask moved");
            }
        }
        checked += 1;
    }
    assert!(checked > 200);
}

#[test]
fn on_episode_hook_sees_every_episode() {
    let mut seen = Vec::new();
    train_with(&quick(AttackKind::None), scenario(), &mut NoAdversary, |ep, net| {
        assert!(net.is_finite());
        seen.push(ep);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
}

/// Upper 1% point of χ²(df) via the Wilson–Hilferty approximation.
fn chi2_critical_99(df: f64) -> f64 {
    let z = 2.326_347_874;
    let h = 2.0 / (9.0 * df);
    df * (1.0 - h + z * h.sqrt()).powi(3)
}

#[test]
fn full_exploration_is_uniform_per_head() {
    let sc = scenario();
    let devices = &sc.feeder.devices;
    let sizes = devices.head_sizes();
    let net = QNetwork::new(sc.layout().len(), &sizes, &NetConfig::DESK, 1);
    let state = vec![1.0; sc.layout().len()];
    let mut rng = stream_rng(11, streams::EXPLORE);
    let n = 10_000;
    let mut counts: Vec<Vec<usize>> = sizes.iter().map(|&k| vec![0; k]).collect();
    for _ in 0..n {
        let heads = epsilon_greedy(&net, &state, 1.0, devices, &mut rng).unwrap().to_heads();
        for (h, &a) in heads.iter().enumerate() {
            counts[h][a] += 1;
        }
    }
    for (h, c) in counts.iter().enumerate() {
        let expected = n as f64 / c.len() as f64;
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let critical = chi2_critical_99((c.len() - 1) as f64);
        assert!(stat < critical, "head {h}: χ² = {stat:.2} ≥ {critical:.2}");
    }
}

#[test]
fn zero_epsilon_is_greedy() {
    let sc = scenario();
    let devices = &sc.feeder.devices;
    let dim = sc.layout().len();
    let net = QNetwork::new(dim, &devices.head_sizes(), &NetConfig::DESK, 2);
    let mut rng = stream_rng(5, 99);
    let mut explore = stream_rng(5, streams::EXPLORE);
    for _ in 0..500 {
        let state: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.1)).collect();
        let a = epsilon_greedy(&net, &state, 0.0, devices, &mut explore).unwrap();
        assert_eq!(a, greedy_action(&net, &state, devices).unwrap());
    }
}

fn tagged(i: usize) -> Transition {
    Transition {
        s: StateVector(vec![i as f64]),
        a: ActionVector {
            si_levels: vec![],
            cb_statuses: vec![0],
            taps: vec![],
            bat_levels: vec![],
        },
        r: -(i as f64),
        s_next: StateVector(vec![i as f64 + 1.0]),
        done: false,
    }
}

proptest! {
    #[test]
    fn buffer_is_bounded_fifo(capacity in 1usize..50, pushes in 0usize..200) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..pushes {
            buf.push(tagged(i));
            prop_assert!(buf.len() <= capacity);
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        let kept: Vec<f64> = buf.iter().map(|t| t.s.0[0]).collect();
        let expected: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn sampling_needs_a_full_batch(capacity in 1usize..40, pushes in 0usize..40, batch in 1usize..20) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..pushes {
            buf.push(tagged(i));
        }
        let mut rng = stream_rng(0, streams::SAMPLE);
        let sample = buf.sample(batch, &mut rng);
        prop_assert_eq!(sample.is_some(), buf.len() >= batch);
        if let Some(s) = sample {
            prop_assert_eq!(s.len(), batch);
        }
    }
}
