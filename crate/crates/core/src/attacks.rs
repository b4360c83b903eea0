//! ℓ∞-bounded observation attacks (FGSM and PGD) on the bus-voltage channel.
//!
//! Both attacks ascend the surrogate objective of [`crate::qnet::LossSpec`]
//! toward the per-head worst actions at the clean state. PGD iterates in
//! perturbation space, `η ← clamp(η + α·sign(∇J)·mask, −δ, δ)`, so a single
//! step of size `δ` from zero reproduces FGSM exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::StateVector;
use crate::error::{Error, Result};
use crate::qnet::{argmin, input_gradient, LossSpec, QNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::None, AttackKind::Fgsm, AttackKind::Pgd];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "clean" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::InvalidInput(format!(
                "unknown attack '{other}' (expected none, fgsm or pgd)"
            ))),
        }
    }
}

/// Attack budget and PGD schedule.
///
/// `scope_mask` marks the state entries the attacker may touch. It is not
/// part of the config file; callers fill it from
/// [`crate::env::StateLayout::voltage_mask`] via [`AttackConfig::with_scope`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub delta: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    #[serde(skip)]
    pub scope_mask: Vec<bool>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            alpha: 0.0125,
            steps: 20,
            random_start: true,
            scope_mask: Vec::new(),
        }
    }
}

impl AttackConfig {
    pub fn with_scope(mut self, mask: Vec<bool>) -> Self {
        self.scope_mask = mask;
        self
    }

    /// Checks the budget parameters (the mask is checked against each state).
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidInput(format!("attack delta must be positive, got {}", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.delta) {
            return Err(Error::InvalidInput(format!(
                "attack alpha must satisfy 0 < alpha <= delta, got {}",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("attack steps must be at least 1".into()));
        }
        // A small tolerance so that 8 × 0.0125 counts as reaching 0.1.
        if self.steps as f64 * self.alpha < self.delta * (1.0 - 1e-12) {
            return Err(Error::InvalidInput(format!(
                "steps * alpha = {} cannot reach delta = {}",
                self.steps as f64 * self.alpha,
                self.delta
            )));
        }
        Ok(())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        self.validate()?;
        if self.scope_mask.len() != state.len() {
            return Err(Error::ShapeMismatch {
                what: "attack scope mask",
                expected: state.len(),
                got: self.scope_mask.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub kind: AttackKind,
    /// In-scope entries with `|η| = δ` (to within 1e-9).
    pub at_max_count: usize,
    /// In-scope entries with `η ≠ 0`.
    pub perturbed_count: usize,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedState {
    pub s_adv: StateVector,
    pub eta: Vec<f64>,
    pub meta: AttackMeta,
}

impl PerturbedState {
    fn new(kind: AttackKind, state: &[f64], eta: Vec<f64>, config: &AttackConfig) -> Self {
        let s_adv = state.iter().zip(&eta).map(|(s, e)| s + e).collect::<Vec<_>>();
        let in_scope = || eta.iter().zip(&config.scope_mask).filter(|(_, &m)| m).map(|(e, _)| e.abs());
        let meta = AttackMeta {
            kind,
            at_max_count: in_scope().filter(|&e| e >= config.delta - 1e-9).count(),
            perturbed_count: in_scope().filter(|&e| e > 0.0).count(),
            linf: eta.iter().fold(0.0, |acc, e| acc.max(e.abs())),
        };
        Self {
            s_adv: StateVector(s_adv),
            eta,
            meta,
        }
    }

    /// The unperturbed pass-through used for clean evaluation.
    pub fn clean(state: &[f64]) -> Self {
        Self {
            s_adv: StateVector(state.to_vec()),
            eta: vec![0.0; state.len()],
            meta: AttackMeta {
                kind: AttackKind::None,
                at_max_count: 0,
                perturbed_count: 0,
                linf: 0.0,
            },
        }
    }
}

/// Per-head argmin of Q at `state`, lowest index on ties.
pub fn worst_actions(net: &QNetwork, state: &[f64]) -> Result<Vec<usize>> {
    Ok(net.forward(state)?.iter().map(|q| argmin(q)).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-step attack: `η = δ·sign(∇_s J)·mask`.
pub fn fgsm(net: &QNetwork, state: &[f64], config: &AttackConfig) -> Result<PerturbedState> {
    config.check_state(state)?;
    let spec = LossSpec::new(worst_actions(net, state)?);
    let grad = input_gradient(net, state, &spec)?;
    let eta = grad
        .iter()
        .zip(&config.scope_mask)
        .map(|(&g, &m)| if m { config.delta * sign(g) } else { 0.0 })
        .collect();
    Ok(PerturbedState::new(AttackKind::Fgsm, state, eta, config))
}

/// Iterated projected sign-gradient ascent inside the δ-ball around `state`.
pub fn pgd<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &[f64],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<PerturbedState> {
    config.check_state(state)?;
    let spec = LossSpec::new(worst_actions(net, state)?);
    let delta = config.delta;
    let mut eta: Vec<f64> = config
        .scope_mask
        .iter()
        .map(|&m| {
            if m && config.random_start {
                rng.gen_range(-delta..=delta)
            } else {
                0.0
            }
        })
        .collect();
    let mut candidate = vec![0.0; state.len()];
    for _ in 0..config.steps {
        for ((c, s), e) in candidate.iter_mut().zip(state).zip(&eta) {
            *c = s + e;
        }
        let grad = input_gradient(net, &candidate, &spec)?;
        for ((e, &g), &m) in eta.iter_mut().zip(&grad).zip(&config.scope_mask) {
            if m {
                *e = (*e + config.alpha * sign(g)).clamp(-delta, delta);
            }
        }
    }
    Ok(PerturbedState::new(AttackKind::Pgd, state, eta, config))
}

/// Dispatches on `kind`; `None` returns the clean state.
pub fn perturb<R: Rng + ?Sized>(
    kind: AttackKind,
    net: &QNetwork,
    state: &[f64],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<PerturbedState> {
    match kind {
        AttackKind::None => Ok(PerturbedState::clean(state)),
        AttackKind::Fgsm => fgsm(net, state, config),
        AttackKind::Pgd => pgd(net, state, config, rng),
    }
}

/// Per-entry clamp of `candidate` into `[center − δ, center + δ]`.
pub fn project_linf(candidate: &[f64], center: &[f64], delta: f64) -> Result<StateVector> {
    if candidate.len() != center.len() {
        return Err(Error::ShapeMismatch {
            what: "projection center",
            expected: candidate.len(),
            got: center.len(),
        });
    }
    Ok(StateVector(
        candidate
            .iter()
            .zip(center)
            .map(|(x, c)| x.clamp(c - delta, c + delta))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::{Dense, NetConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(n: usize, voltages: usize) -> Vec<bool> {
        (0..n).map(|i| i < voltages).collect()
    }

    fn net() -> QNetwork {
        QNetwork::new(7, &[5, 2, 9], &NetConfig { hidden_layers: 2, hidden_width: 32 }, 21)
    }

    const STATE: [f64; 7] = [1.0, 0.99, 0.97, 0.96, 0.4, 0.25, -0.5];

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = [
            AttackConfig { alpha: 0.2, ..Default::default() },
            AttackConfig { alpha: 0.0, ..Default::default() },
            AttackConfig { steps: 0, ..Default::default() },
            AttackConfig { steps: 7, ..Default::default() },
            AttackConfig { delta: -0.1, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(AttackConfig { steps: 8, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn worst_actions_hand_set() {
        let heads = vec![
            Dense { weights: ndarray::Array2::zeros((1, 3)), bias: ndarray::arr1(&[0.5, -1.0, 2.0]) },
            Dense { weights: ndarray::Array2::zeros((1, 2)), bias: ndarray::arr1(&[1.0, 1.0]) },
        ];
        let net = QNetwork::from_layers(vec![], heads).unwrap();
        assert_eq!(worst_actions(&net, &[0.3]).unwrap(), vec![1, 0]);
        assert_eq!(crate::qnet::greedy_heads(&net, &[0.3]).unwrap(), vec![2, 0]);
    }

    #[test]
    fn fgsm_on_zero_net_is_identity() {
        let mut zero = net().to_checkpoint();
        for l in zero.trunk.iter_mut().chain(zero.heads.iter_mut()) {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let zero = QNetwork::from_checkpoint(&zero).unwrap();
        let config = AttackConfig::default().with_scope(mask(7, 4));
        let out = fgsm(&zero, &STATE, &config).unwrap();
        assert_eq!(out.s_adv.0, STATE.to_vec());
        assert_eq!(out.meta.perturbed_count, 0);
    }

    #[test]
    fn fgsm_saturates_scope_and_spares_rest() {
        let config = AttackConfig::default().with_scope(mask(7, 4));
        let out = fgsm(&net(), &STATE, &config).unwrap();
        for i in 4..7 {
            assert_eq!(out.eta[i], 0.0);
            assert_eq!(out.s_adv.0[i], STATE[i]);
        }
        assert_eq!(out.meta.at_max_count, out.meta.perturbed_count);
        assert!(out.meta.perturbed_count > 0);
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let config = AttackConfig {
            alpha: 0.1,
            steps: 1,
            random_start: false,
            ..Default::default()
        }
        .with_scope(mask(7, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = fgsm(&net(), &STATE, &config).unwrap();
        let b = pgd(&net(), &STATE, &config, &mut rng).unwrap();
        assert_eq!(a.s_adv, b.s_adv);
        assert_eq!(a.eta, b.eta);
    }

    #[test]
    fn pgd_raises_surrogate_over_clean() {
        let network = net();
        let config = AttackConfig::default().with_scope(mask(7, 4));
        let spec = LossSpec::new(worst_actions(&network, &STATE).unwrap());
        let clean = crate::qnet::surrogate_loss(&network, &STATE, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = pgd(&network, &STATE, &config, &mut rng).unwrap();
        let adv = crate::qnet::surrogate_loss(&network, out.s_adv.as_slice(), &spec).unwrap();
        assert!(adv > clean, "{adv} <= {clean}");
    }

    #[test]
    fn mask_length_must_match() {
        let config = AttackConfig::default().with_scope(mask(5, 4));
        assert!(fgsm(&net(), &STATE, &config).is_err());
    }

    #[test]
    fn projection_examples() {
        let c = [1.0, 0.0];
        assert_eq!(project_linf(&[1.05, -0.02], &c, 0.1).unwrap().0, vec![1.05, -0.02]);
        assert_eq!(project_linf(&[1.2, 0.0], &c, 0.1).unwrap().0, vec![1.1, 0.0]);
        assert!(project_linf(&[1.0], &c, 0.1).is_err());
    }

    #[test]
    fn attack_kind_parses() {
        assert_eq!("PGD".parse::<AttackKind>().unwrap(), AttackKind::Pgd);
        assert_eq!("none".parse::<AttackKind>().unwrap(), AttackKind::None);
        assert!("cw".parse::<AttackKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pgd_output_is_admissible(
            seed in 0u64..500,
            state in proptest::collection::vec(0.85f64..1.15, 7),
            delta in 0.01f64..0.2,
            steps in 1usize..12,
            random_start: bool,
        ) {
            let alpha = delta / steps.min(4) as f64;
            let config = AttackConfig { delta, alpha, steps, random_start, ..Default::default() }
                .with_scope(mask(7, 4));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = pgd(&net(), &state, &config, &mut rng).unwrap();
            for i in 0..7 {
                prop_assert!(out.eta[i].abs() <= delta + 1e-12);
                prop_assert_eq!(out.s_adv.0[i], state[i] + out.eta[i]);
                if i >= 4 {
                    prop_assert_eq!(out.eta[i], 0.0);
                }
            }
        }

        #[test]
        fn projection_is_idempotent(
            x in proptest::collection::vec(-2.0f64..2.0, 6),
            c in proptest::collection::vec(-1.0f64..1.0, 6),
            delta in 0.0f64..0.5,
        ) {
            let once = project_linf(&x, &c, delta).unwrap();
            let twice = project_linf(once.as_slice(), &c, delta).unwrap();
            prop_assert_eq!(&once, &twice);
            for (p, ci) in once.0.iter().zip(&c) {
                prop_assert!((p - ci).abs() <= delta + 1e-12);
            }
        }
    }
}
