//! Greedy-policy evaluation under observation attacks.
//!
//! The attacker perturbs what the agent sees; the feeder always evolves
//! from the true state. Episode `i` runs test profile `i mod n_test` with
//! its own seed stream, so results do not depend on worker count.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb, AttackConfig, AttackKind, AttackMeta};
use crate::env::{ActionVector, EpisodeConfig, RewardConfig, Scenario, VoltVarEnv, HORIZON};
use crate::error::{Error, Result};
use crate::qnet::{argmax, QNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub attack_kind: AttackKind,
    pub attack: AttackConfig,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 0,
            attack_kind: AttackKind::None,
            attack: AttackConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_reward: f64,
    pub q_value_reduction: f64,
    pub total_voltage_violations: usize,
    pub violations_per_timestep: f64,
    pub pct_at_max_delta: f64,
    pub switches_per_timestep: f64,
    pub episodes: usize,
}

/// One evaluated timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: ActionVector,
    pub reward: f64,
    pub violations: usize,
    pub switches: f64,
    /// True post-action bus voltages.
    pub v_mag: Vec<f64>,
    pub converged: bool,
    /// Present on attacked steps.
    pub attack: Option<AttackMeta>,
    pub q_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub profile: usize,
    pub env_seed: u64,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub traces: Vec<EpisodeTrace>,
}

impl EvalReport {
    /// One JSON object per evaluated step.
    pub fn steps_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            episode: usize,
            profile: usize,
            #[serde(flatten)]
            step: &'a StepRecord,
        }
        let mut out = String::new();
        for trace in &self.traces {
            for step in &trace.steps {
                out.push_str(&serde_json::to_string(&Line {
                    episode: trace.episode,
                    profile: trace.profile,
                    step,
                })?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn envelope(&self) -> VoltageEnvelope {
        voltage_envelope(&self.traces)
    }
}

/// Mean over heads of the clean-state value lost by acting on `q_adv_choice`
/// instead of the clean greedy choice.
pub fn q_value_reduction(q_clean: &[Vec<f64>], adv_choice: &[usize]) -> f64 {
    let n = q_clean.len().max(1) as f64;
    let best: f64 = q_clean.iter().map(|q| q[argmax(q)]).sum::<f64>() / n;
    let chosen: f64 = q_clean.iter().zip(adv_choice).map(|(q, &a)| q[a]).sum::<f64>() / n;
    best - chosen
}

/// Number of (bus, timestep) pairs outside the voltage band.
pub fn count_violations<'a>(
    config: &RewardConfig,
    stream: impl IntoIterator<Item = &'a [f64]>,
) -> usize {
    stream
        .into_iter()
        .map(|v| v.iter().filter(|&&x| config.is_violation(x)).count())
        .sum()
}

fn check_agent(net: &QNetwork, scenario: &Scenario) -> Result<()> {
    let layout = scenario.layout();
    if net.input_dim() != layout.len() {
        return Err(Error::ShapeMismatch {
            what: "agent input width vs feeder state",
            expected: layout.len(),
            got: net.input_dim(),
        });
    }
    if net.head_sizes() != scenario.head_sizes() {
        return Err(Error::InvalidInput(format!(
            "agent heads {:?} do not match feeder devices {:?}",
            net.head_sizes(),
            scenario.head_sizes()
        )));
    }
    Ok(())
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + episode as u64);
    rng
}

fn run_episode(
    net: &QNetwork,
    scenario: &Arc<Scenario>,
    config: &EvalConfig,
    attack: &AttackConfig,
    episode: usize,
) -> Result<EpisodeTrace> {
    let test = &scenario.split.test;
    let profile = test[episode % test.len()];
    let mut rng = episode_rng(config.seed, episode);
    let env_seed = rng.gen::<u64>();
    let devices = &scenario.feeder.devices;
    let mut env = VoltVarEnv::new(Arc::clone(scenario));
    let mut state = env.reset(&EpisodeConfig::new(profile, env_seed))?;
    let mut steps = Vec::with_capacity(HORIZON);
    loop {
        let q_clean = net.forward(state.as_slice())?;
        let (heads, meta, q_reduction) = if config.attack_kind == AttackKind::None {
            (q_clean.iter().map(|q| argmax(q)).collect::<Vec<_>>(), None, None)
        } else {
            let adv = perturb(config.attack_kind, net, state.as_slice(), attack, &mut rng)?;
            let q_adv = net.forward(adv.s_adv.as_slice())?;
            let heads: Vec<usize> = q_adv.iter().map(|q| argmax(q)).collect();
            let red = q_value_reduction(&q_clean, &heads);
            (heads, Some(adv.meta), Some(red))
        };
        let action = ActionVector::from_heads(&heads, devices)?;
        let outcome = env.step(&action)?;
        steps.push(StepRecord {
            t: outcome.info.t,
            action,
            reward: outcome.reward.total,
            violations: outcome.info.violations,
            switches: outcome.info.switches,
            v_mag: outcome.info.v_mag.clone(),
            converged: outcome.info.converged,
            attack: meta,
            q_reduction,
        });
        state = outcome.state;
        if outcome.done {
            break;
        }
    }
    Ok(EpisodeTrace {
        episode,
        profile,
        env_seed,
        steps,
    })
}

/// Runs `config.episodes` greedy episodes on the test profiles.
pub fn evaluate(net: &QNetwork, scenario: &Arc<Scenario>, config: &EvalConfig) -> Result<EvalReport> {
    check_agent(net, scenario)?;
    if scenario.split.test.is_empty() {
        return Err(Error::InvalidInput("no test profiles".into()));
    }
    let attack = config.attack.clone().with_scope(scenario.layout().voltage_mask());
    if config.attack_kind != AttackKind::None {
        attack.validate()?;
    }
    let workers = config.workers.clamp(1, config.episodes.max(1));
    let traces: Vec<EpisodeTrace> = if workers == 1 {
        (0..config.episodes)
            .map(|i| run_episode(net, scenario, config, &attack, i))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<EpisodeTrace>>> = (0..config.episodes).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (w, chunk) in slots.chunks_mut(config.episodes.div_ceil(workers)).enumerate() {
                let attack = &attack;
                let base = w * config.episodes.div_ceil(workers);
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_episode(net, scenario, config, attack, base + k));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every episode evaluated"))
            .collect::<Result<_>>()?
    };
    let metrics = summarize(&traces);
    Ok(EvalReport { metrics, traces })
}

fn summarize(traces: &[EpisodeTrace]) -> EvalMetrics {
    let episodes = traces.len();
    let slots = (episodes * HORIZON).max(1) as f64;
    let steps = || traces.iter().flat_map(|t| &t.steps);
    let total_voltage_violations: usize = steps().map(|s| s.violations).sum();
    let reductions: Vec<f64> = steps().filter_map(|s| s.q_reduction).collect();
    let (at_max, perturbed) = steps()
        .filter_map(|s| s.attack)
        .fold((0usize, 0usize), |(a, p), m| (a + m.at_max_count, p + m.perturbed_count));
    EvalMetrics {
        mean_reward: traces.iter().map(EpisodeTrace::reward).sum::<f64>() / episodes.max(1) as f64,
        q_value_reduction: if reductions.is_empty() {
            0.0
        } else {
            reductions.iter().sum::<f64>() / reductions.len() as f64
        },
        total_voltage_violations,
        violations_per_timestep: total_voltage_violations as f64 / slots,
        pct_at_max_delta: if perturbed == 0 {
            0.0
        } else {
            100.0 * at_max as f64 / perturbed as f64
        },
        switches_per_timestep: steps().map(|s| s.switches).sum::<f64>() / slots,
        episodes,
    }
}

/// Per-timestep bus-voltage extremes and mean across episodes and buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageEnvelope {
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

impl VoltageEnvelope {
    pub const CSV_HEADER: &'static str = "t,min,mean,max";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for t in 0..self.min.len() {
            let _ = writeln!(out, "{t},{},{},{}", self.min[t], self.mean[t], self.max[t]);
        }
        out
    }
}

/// Envelope over all steps of `traces`; timesteps no episode reached are NaN.
pub fn voltage_envelope(traces: &[EpisodeTrace]) -> VoltageEnvelope {
    let mut min = vec![f64::INFINITY; HORIZON];
    let mut max = vec![f64::NEG_INFINITY; HORIZON];
    let mut sum = vec![0.0; HORIZON];
    let mut count = vec![0usize; HORIZON];
    for step in traces.iter().flat_map(|t| &t.steps) {
        let t = step.t;
        for &v in &step.v_mag {
            min[t] = min[t].min(v);
            max[t] = max[t].max(v);
            sum[t] += v;
            count[t] += 1;
        }
    }
    for t in 0..HORIZON {
        if count[t] == 0 {
            min[t] = f64::NAN;
            max[t] = f64::NAN;
        }
    }
    VoltageEnvelope {
        mean: sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        min,
        max,
    }
}

/// Label of the training regime in cross-attack outputs.
pub fn train_label(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::None => "clean",
        other => other.as_str(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttackCell {
    pub train_attack: String,
    pub test_attack: AttackKind,
    pub metrics: EvalMetrics,
}

pub const CROSS_CSV_HEADER: &str = "train_attack,test_attack,mean_reward,q_value_reduction,total_voltage_violations,violations_per_timestep,pct_at_max_delta,switches_per_timestep,episodes";

/// Evaluates every agent under every test attack, row-major by agent.
pub fn cross_attack_matrix(
    agents: &[(AttackKind, &QNetwork)],
    scenario: &Arc<Scenario>,
    tests: &[AttackKind],
    base: &EvalConfig,
) -> Result<Vec<CrossAttackCell>> {
    for (_, net) in agents {
        check_agent(net, scenario)?;
    }
    let mut cells = Vec::with_capacity(agents.len() * tests.len());
    for &(train, net) in agents {
        for &test in tests {
            let config = EvalConfig {
                attack_kind: test,
                ..base.clone()
            };
            cells.push(CrossAttackCell {
                train_attack: train_label(train).to_string(),
                test_attack: test,
                metrics: evaluate(net, scenario, &config)?.metrics,
            });
        }
    }
    Ok(cells)
}

pub fn cross_attack_csv(cells: &[CrossAttackCell]) -> String {
    let mut out = format!("{CROSS_CSV_HEADER}\n");
    for c in cells {
        let m = &c.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.train_attack,
            c.test_attack,
            m.mean_reward,
            m.q_value_reduction,
            m.total_voltage_violations,
            m.violations_per_timestep,
            m.pct_at_max_delta,
            m.switches_per_timestep,
            m.episodes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetConfig;

    fn scenario() -> Arc<Scenario> {
        Arc::new(Scenario::builtin("5bus").unwrap())
    }

    fn agent(sc: &Scenario, seed: u64) -> QNetwork {
        QNetwork::new(sc.layout().len(), &sc.head_sizes(), &NetConfig::DESK, seed)
    }

    #[test]
    fn q_reduction_hand_toy() {
        // Two heads; the attack flips head 0 from action 1 to action 0.
        let q = vec![vec![1.0, 3.5], vec![-2.0, 0.0]];
        assert_eq!(q_value_reduction(&q, &[1, 1]), 0.0);
        assert!((q_value_reduction(&q, &[0, 1]) - 2.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn counting_rule() {
        let config = RewardConfig::default();
        let flat = vec![vec![1.0; 4]; 24];
        assert_eq!(count_violations(&config, flat.iter().map(Vec::as_slice)), 0);
        let mut hot = flat.clone();
        for row in hot.iter_mut().take(3) {
            row[2] = 1.06;
        }
        assert_eq!(count_violations(&config, hot.iter().map(Vec::as_slice)), 3);
    }

    #[test]
    fn envelope_of_flat_trajectory() {
        let step = |t| StepRecord {
            t,
            action: ActionVector {
                si_levels: vec![],
                cb_statuses: vec![],
                taps: vec![],
                bat_levels: vec![],
            },
            reward: 0.0,
            violations: 0,
            switches: 0.0,
            v_mag: vec![1.0, 1.0],
            converged: true,
            attack: None,
            q_reduction: None,
        };
        let trace = EpisodeTrace {
            episode: 0,
            profile: 0,
            env_seed: 0,
            steps: (0..HORIZON).map(step).collect(),
        };
        let env = voltage_envelope(&[trace]);
        assert_eq!(env.to_csv().lines().count(), HORIZON + 1);
        assert!(env.min.iter().zip(&env.max).all(|(a, b)| a == b));
        assert_eq!(env.mean, vec![1.0; HORIZON]);
    }

    #[test]
    fn evaluation_is_deterministic_and_worker_independent() {
        let sc = scenario();
        let net = agent(&sc, 4);
        let config = EvalConfig {
            episodes: 6,
            attack_kind: AttackKind::Pgd,
            attack: AttackConfig { steps: 8, ..Default::default() },
            ..Default::default()
        };
        let a = evaluate(&net, &sc, &config).unwrap();
        let b = evaluate(&net, &sc, &EvalConfig { workers: 3, ..config.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.episodes, 6);
        assert!((0.0..=100.0).contains(&a.metrics.pct_at_max_delta));
        let expect = a.metrics.total_voltage_violations as f64 / (6.0 * 24.0);
        assert_eq!(a.metrics.violations_per_timestep, expect);
    }

    #[test]
    fn constant_agent_is_unaffected_by_attacks() {
        let sc = scenario();
        let mut ckpt = agent(&sc, 5).to_checkpoint();
        for l in ckpt.trunk.iter_mut().chain(ckpt.heads.iter_mut()) {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        ckpt.heads[2].bias[20] = 1.0;
        let net = QNetwork::from_checkpoint(&ckpt).unwrap();
        let clean = evaluate(&net, &sc, &EvalConfig { episodes: 3, ..Default::default() }).unwrap();
        for kind in [AttackKind::Fgsm, AttackKind::Pgd] {
            let config = EvalConfig {
                episodes: 3,
                attack_kind: kind,
                ..Default::default()
            };
            let attacked = evaluate(&net, &sc, &config).unwrap();
            let m = attacked.metrics;
            assert_eq!(m.mean_reward, clean.metrics.mean_reward);
            assert_eq!(m.total_voltage_violations, clean.metrics.total_voltage_violations);
            assert_eq!(m.q_value_reduction, 0.0);
            assert_eq!(m.pct_at_max_delta, 0.0);
        }
    }

    #[test]
    fn attack_only_acts_through_actions() {
        let sc = scenario();
        let net = agent(&sc, 6);
        let config = EvalConfig {
            episodes: 2,
            attack_kind: AttackKind::Fgsm,
            ..Default::default()
        };
        let report = evaluate(&net, &sc, &config).unwrap();
        for trace in &report.traces {
            let mut env = VoltVarEnv::new(Arc::clone(&sc));
            env.reset(&EpisodeConfig::new(trace.profile, trace.env_seed)).unwrap();
            for step in &trace.steps {
                let out = env.step(&step.action).unwrap();
                assert_eq!(out.info.v_mag, step.v_mag);
                assert_eq!(out.reward.total, step.reward);
            }
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let sc = scenario();
        let wrong = QNetwork::new(4, &[2], &NetConfig::DESK, 0);
        assert!(evaluate(&wrong, &sc, &EvalConfig::default()).is_err());
        assert!(cross_attack_matrix(&[(AttackKind::None, &wrong)], &sc, &AttackKind::ALL, &EvalConfig::default()).is_err());
    }

    #[test]
    fn cross_grid_clean_column_matches_evaluate() {
        let sc = scenario();
        let a = agent(&sc, 1);
        let b = agent(&sc, 2);
        let base = EvalConfig {
            episodes: 2,
            attack: AttackConfig { steps: 8, ..Default::default() },
            ..Default::default()
        };
        let agents = [(AttackKind::None, &a), (AttackKind::Pgd, &b)];
        let cells = cross_attack_matrix(&agents, &sc, &AttackKind::ALL, &base).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[3].train_attack, "pgd");
        assert_eq!(cells[3].metrics, evaluate(&b, &sc, &base).unwrap().metrics);
        let csv = cross_attack_csv(&cells);
        assert_eq!(csv.lines().next().unwrap(), CROSS_CSV_HEADER);
        assert_eq!(csv.lines().count(), 7);
    }
}
