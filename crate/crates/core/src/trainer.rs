//! Offline adversarial double-DQN training.
//!
//! Rollouts act ε-greedily on clean states. In attacked episodes every
//! stored next state is replaced by an adversarial observation generated
//! against the current online network before it enters the replay buffer,
//! so TD targets bootstrap from perturbed observations.
//!
//! Randomness: one master seed feeds independent ChaCha8 streams (network
//! init, episode sampling, exploration, minibatch sampling, attack coin,
//! attack noise). Disabling attacks therefore leaves every other stream,
//! and hence the whole run, unchanged.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb, AttackConfig, AttackKind, PerturbedState};
use crate::devices::DeviceSet;
use crate::env::{ActionVector, EpisodeConfig, Scenario, StateVector, VoltVarEnv};
use crate::error::{Error, Result};
use crate::qnet::{
    argmax, greedy_heads, param_gradient_and_update, sync_target, AdamState, NetConfig, QNetwork,
    TdSample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: StateVector,
    pub a: ActionVector,
    pub r: f64,
    /// Stored next state; adversarial in attacked episodes.
    pub s_next: StateVector,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if self.s.len() != self.s_next.len() {
            return Err(Error::ShapeMismatch {
                what: "transition next state",
                expected: self.s.len(),
                got: self.s_next.len(),
            });
        }
        let finite = self.r.is_finite()
            && self.s.0.iter().chain(&self.s_next.0).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("transition".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO replay memory with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `batch` uniformly drawn entries; `None` until the buffer holds at least `batch`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(
            (0..batch)
                .map(|_| &self.items[rng.gen_range(0..self.items.len())])
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackDraw {
    /// One Bernoulli(p_attack) coin per episode.
    PerEpisode,
    /// One coin per environment step.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub eps_init: f64,
    pub eps_final: f64,
    /// Multiplicative per-episode decay.
    pub eps_decay: f64,
    /// Gradient steps between target-network copies.
    pub target_sync: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected before the first gradient step.
    pub warmup: usize,
    /// Gradient steps per environment step once the buffer is warm.
    pub updates_per_step: usize,
    pub clip_norm: f64,
    pub net: NetConfig,
    /// Attack used on stored next states (`none` trains a clean agent).
    pub attack_kind: AttackKind,
    pub attack: AttackConfig,
    pub p_attack: f64,
    /// First episode eligible for attacks; `null` disables attacks.
    pub e_attack: Option<usize>,
    pub attack_draw: AttackDraw,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-size hyperparameters (9,000 episodes, 4×512 trunk, batch 512).
    pub fn full_scale() -> Self {
        Self {
            episodes: 9_000,
            gamma: 0.995,
            lr: 5e-5,
            eps_init: 1.0,
            eps_final: 0.01,
            eps_decay: 0.9995,
            target_sync: 2_000,
            batch_size: 512,
            buffer_capacity: 100_000,
            warmup: 1_000,
            updates_per_step: 1,
            clip_norm: 10.0,
            net: NetConfig::FULL,
            attack_kind: AttackKind::Pgd,
            attack: AttackConfig::default(),
            p_attack: 0.5,
            e_attack: Some(1_000),
            attack_draw: AttackDraw::PerEpisode,
            seed: 0,
        }
    }

    /// Single-core budget: 5-bus feeder, 2×128 trunk, 1,500 episodes.
    pub fn desk() -> Self {
        Self {
            episodes: 1_500,
            lr: 5e-4,
            eps_decay: 0.997,
            target_sync: 500,
            batch_size: 64,
            buffer_capacity: 20_000,
            updates_per_step: 4,
            net: NetConfig::DESK,
            e_attack: Some(300),
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if self.episodes == 0 {
            return fail("episodes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("eps_init", self.eps_init),
            ("eps_final", self.eps_final),
            ("eps_decay", self.eps_decay),
            ("p_attack", self.p_attack),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.target_sync == 0 || self.batch_size == 0 || self.updates_per_step == 0 {
            return fail("target_sync, batch_size and updates_per_step must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return fail("buffer_capacity must be at least batch_size".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive".into());
        }
        if self.net.hidden_layers == 0 || self.net.hidden_width == 0 {
            return fail("network needs at least one hidden layer of nonzero width".into());
        }
        if self.attack_kind != AttackKind::None {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// `ε_t = max(eps_final, eps_init · eps_decay^t)` for episode `t`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        (self.eps_init * self.eps_decay.powi(episode as i32)).max(self.eps_final)
    }

    fn attacks_enabled(&self) -> bool {
        self.attack_kind != AttackKind::None && self.p_attack > 0.0 && self.e_attack.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub reward: f64,
    pub epsilon: f64,
    /// Whether any stored next state of this episode was perturbed.
    pub attacked: bool,
    /// Mean TD loss over this episode's gradient steps (`None` before warmup).
    pub loss: Option<f64>,
    pub violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    /// Gradient-step counter at each target sync.
    pub target_syncs: Vec<u64>,
    pub gradient_steps: u64,
    pub attacked_transitions: u64,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "episode,reward,epsilon,attacked,loss,violations";

    /// One row per episode; `loss` is empty before the first update.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.episodes {
            let loss = e.loss.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.episode, e.reward, e.epsilon, e.attacked as u8, loss, e.violations
            );
        }
        out
    }

    pub fn attacked_episodes(&self) -> usize {
        self.episodes.iter().filter(|e| e.attacked).count()
    }

    /// Mean episode reward over `range` (clamped to the log).
    pub fn mean_reward(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.episodes.len());
        let slice = &self.episodes[range.start.min(end)..end];
        slice.iter().map(|e| e.reward).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Per-sample, per-head double-Q targets.
///
/// `y_h = r + γ·Q⁻_h(s', argmax_a Q_h(s', a))`, or `r` for terminal samples.
pub fn ddqn_target(
    batch: &[&Transition],
    net: &QNetwork,
    target_net: &QNetwork,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    let dim = net.input_dim();
    let mut next = ndarray::Array2::zeros((batch.len(), dim));
    for (b, t) in batch.iter().enumerate() {
        if t.s_next.len() != dim {
            return Err(Error::ShapeMismatch {
                what: "next state",
                expected: dim,
                got: t.s_next.len(),
            });
        }
        next.row_mut(b).assign(&ndarray::ArrayView1::from(t.s_next.as_slice()));
    }
    let online = net.forward_batch(next.view())?.q;
    let target = target_net.forward_batch(next.view())?.q;
    let mut out = Vec::with_capacity(batch.len());
    for (b, t) in batch.iter().enumerate() {
        let ys: Vec<f64> = online
            .iter()
            .zip(&target)
            .map(|(q_on, q_tg)| {
                if t.done {
                    t.r
                } else {
                    let row = q_on.row(b);
                    let best = argmax(row.as_slice().expect("row-major batch"));
                    t.r + gamma * q_tg[(b, best)]
                }
            })
            .collect();
        if let Some(y) = ys.iter().find(|y| !y.is_finite()) {
            return Err(Error::NonFinite(format!("TD target {y} for sample {b} (reward {})", t.r)));
        }
        out.push(ys);
    }
    Ok(out)
}

/// Per-head greedy action.
pub fn greedy_action(net: &QNetwork, state: &[f64], devices: &DeviceSet) -> Result<ActionVector> {
    ActionVector::from_heads(&greedy_heads(net, state)?, devices)
}

/// Per head: uniform random grid index with probability `epsilon`, else greedy.
///
/// Draws exactly one coin per head, plus one index for each exploring head.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &[f64],
    epsilon: f64,
    devices: &DeviceSet,
    rng: &mut R,
) -> Result<ActionVector> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let sizes = devices.head_sizes();
    let mut explore = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        explore.push(if rng.gen::<f64>() < epsilon {
            Some(rng.gen_range(0..n))
        } else {
            None
        });
    }
    let greedy = if explore.iter().any(Option::is_none) {
        greedy_heads(net, state)?
    } else {
        vec![0; sizes.len()]
    };
    let heads: Vec<usize> = explore
        .iter()
        .zip(&greedy)
        .map(|(e, &g)| e.unwrap_or(g))
        .collect();
    ActionVector::from_heads(&heads, devices)
}

/// Produces the next state stored in the replay buffer for attacked steps.
pub trait NextStateAdversary {
    fn perturb(&mut self, net: &QNetwork, s_next: &StateVector) -> Result<StateVector>;
}

/// Leaves next states untouched; the reference for clean-equivalence checks.
pub struct NoAdversary;

impl NextStateAdversary for NoAdversary {
    fn perturb(&mut self, _net: &QNetwork, s_next: &StateVector) -> Result<StateVector> {
        Ok(s_next.clone())
    }
}

/// White-box FGSM/PGD against the current online network.
pub struct GradientAdversary {
    pub kind: AttackKind,
    pub config: AttackConfig,
    rng: ChaCha8Rng,
    /// Every perturbation produced, when recording is on.
    pub record: Option<Vec<PerturbedState>>,
}

impl GradientAdversary {
    pub fn new(kind: AttackKind, config: AttackConfig, rng: ChaCha8Rng) -> Self {
        Self {
            kind,
            config,
            rng,
            record: None,
        }
    }
}

impl NextStateAdversary for GradientAdversary {
    fn perturb(&mut self, net: &QNetwork, s_next: &StateVector) -> Result<StateVector> {
        let out = perturb(self.kind, net, s_next.as_slice(), &self.config, &mut self.rng)?;
        let s_adv = out.s_adv.clone();
        if let Some(rec) = &mut self.record {
            rec.push(out);
        }
        Ok(s_adv)
    }
}

/// Stream ids for [`stream_rng`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const EPISODES: u64 = 2;
    pub const EXPLORE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const ATTACK_COIN: u64 = 5;
    pub const ATTACK_NOISE: u64 = 6;
}

/// Independent generator `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: QNetwork,
    pub log: TrainingLog,
    pub buffer: ReplayBuffer,
}

/// Trains with the adversary implied by `config`.
pub fn train(config: &TrainConfig, scenario: Arc<Scenario>) -> Result<TrainOutput> {
    let attack = config.attack.clone().with_scope(scenario.layout().voltage_mask());
    let mut adversary = GradientAdversary::new(
        config.attack_kind,
        attack,
        stream_rng(config.seed, streams::ATTACK_NOISE),
    );
    train_with(config, scenario, &mut adversary, |_, _| Ok(()))
}

/// Untrained network a run with `config` starts from.
pub fn initial_network(config: &TrainConfig, scenario: &Scenario) -> QNetwork {
    let init_seed = stream_rng(config.seed, streams::INIT).gen::<u64>();
    QNetwork::new(scenario.layout().len(), &scenario.head_sizes(), &config.net, init_seed)
}

/// Full training loop with a caller-supplied adversary and a per-episode hook
/// (called with the finished episode index and the current online network).
pub fn train_with<A, F>(
    config: &TrainConfig,
    scenario: Arc<Scenario>,
    adversary: &mut A,
    mut on_episode: F,
) -> Result<TrainOutput>
where
    A: NextStateAdversary + ?Sized,
    F: FnMut(usize, &QNetwork) -> Result<()>,
{
    config.validate()?;
    if scenario.split.train.is_empty() {
        return Err(Error::InvalidInput("no training profiles".into()));
    }
    let devices = scenario.feeder.devices.clone();
    let mut net = initial_network(config, &scenario);
    let mut target = sync_target(&net);
    let mut adam = AdamState::new(&net, config.lr);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut log = TrainingLog::default();

    let mut rng_episodes = stream_rng(config.seed, streams::EPISODES);
    let mut rng_explore = stream_rng(config.seed, streams::EXPLORE);
    let mut rng_sample = stream_rng(config.seed, streams::SAMPLE);
    let mut rng_coin = stream_rng(config.seed, streams::ATTACK_COIN);
    let mut env = VoltVarEnv::new(Arc::clone(&scenario));
    let warmup = config.warmup.max(config.batch_size);

    for episode in 0..config.episodes {
        let epsilon = config.epsilon(episode);
        let profile = scenario.split.train[rng_episodes.gen_range(0..scenario.split.train.len())];
        let env_seed = rng_episodes.gen::<u64>();
        let eligible = config.attacks_enabled() && config.e_attack.is_some_and(|e| episode >= e);
        let episode_coin = eligible
            && config.attack_draw == AttackDraw::PerEpisode
            && rng_coin.gen::<f64>() < config.p_attack;

        let mut state = env.reset(&EpisodeConfig::new(profile, env_seed))?;
        let mut reward = 0.0;
        let mut violations = 0;
        let mut attacked = false;
        let mut loss_sum = 0.0;
        let mut updates = 0usize;
        loop {
            let action = epsilon_greedy(&net, state.as_slice(), epsilon, &devices, &mut rng_explore)?;
            let outcome = env.step(&action)?;
            reward += outcome.reward.total;
            violations += outcome.info.violations;

            let attack_now = match config.attack_draw {
                AttackDraw::PerEpisode => episode_coin,
                AttackDraw::PerStep => eligible && rng_coin.gen::<f64>() < config.p_attack,
            };
            let s_next = if attack_now {
                attacked = true;
                log.attacked_transitions += 1;
                adversary.perturb(&net, &outcome.state)?
            } else {
                outcome.state.clone()
            };
            let transition = Transition {
                s: state,
                a: action,
                r: outcome.reward.total,
                s_next,
                done: outcome.done,
            };
            transition.validate()?;
            buffer.push(transition);

            if buffer.len() >= warmup {
                for _ in 0..config.updates_per_step {
                    let batch = buffer
                        .sample(config.batch_size, &mut rng_sample)
                        .expect("buffer holds a full batch");
                    let targets = ddqn_target(&batch, &net, &target, config.gamma)?;
                    let heads: Vec<Vec<usize>> = batch.iter().map(|t| t.a.to_heads()).collect();
                    let samples: Vec<TdSample> = batch
                        .iter()
                        .zip(&heads)
                        .zip(&targets)
                        .map(|((t, a), y)| TdSample {
                            state: t.s.as_slice(),
                            actions: a,
                            targets: y,
                        })
                        .collect();
                    loss_sum += param_gradient_and_update(&mut net, &samples, &mut adam, Some(config.clip_norm))?;
                    updates += 1;
                    log.gradient_steps += 1;
                    if log.gradient_steps % config.target_sync as u64 == 0 {
                        target = sync_target(&net);
                        log.target_syncs.push(log.gradient_steps);
                    }
                }
            }

            state = outcome.state;
            if outcome.done {
                break;
            }
        }
        log.episodes.push(EpisodeRecord {
            episode,
            reward,
            epsilon,
            attacked,
            loss: (updates > 0).then(|| loss_sum / updates as f64),
            violations,
        });
        on_episode(episode, &net)?;
    }
    Ok(TrainOutput { net, log, buffer })
}
