//! Finite-horizon volt-var control MDP over a radial feeder.
//!
//! Each step applies a factored device action, solves AC power flow at the
//! current hour's load, and scores the post-action state.

mod profile;
mod reward;
mod state;

pub use profile::{LoadProfile, BUILTIN_PROFILE_COUNT, HORIZON};
pub use reward::{
    compute_reward, divergence_reward, voltage_penalty, ControlEffort, RewardBreakdown,
    RewardConfig,
};
pub use state::{
    normalize_si, normalize_tap, ActionVector, Observation, Segment, SegmentRole, StateLayout,
    StateVector,
};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{
    battery_step, regulator_setpoint, si_reactive_power, tap_position, DT_HOURS,
};
use crate::error::{Error, Result};
use crate::feeder::Feeder;
use crate::grid::{solve_power_flow, Controls, Injections, PowerFlowSolution};

/// Which profiles feed training, validation and test episodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub test: Vec<usize>,
}

impl Default for ProfileSplit {
    fn default() -> Self {
        Self {
            train: (0..10).collect(),
            eval: (10..12).collect(),
            test: (12..15).collect(),
        }
    }
}

impl ProfileSplit {
    pub fn validate(&self, n_profiles: usize) -> Result<()> {
        let all: Vec<usize> = self.train.iter().chain(&self.eval).chain(&self.test).copied().collect();
        if let Some(i) = all.iter().find(|&&i| i >= n_profiles) {
            return Err(Error::Profile(format!(
                "split references profile {i}, only {n_profiles} available"
            )));
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(Error::Profile("train/eval/test splits overlap".into()));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Profile("train and test splits must be non-empty".into()));
        }
        Ok(())
    }
}

/// Immutable description of the simulated system, shared by every
/// environment instance built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub feeder: Feeder,
    pub profiles: Vec<LoadProfile>,
    pub split: ProfileSplit,
    pub reward: RewardConfig,
}

impl Scenario {
    pub fn new(
        feeder: Feeder,
        profiles: Vec<LoadProfile>,
        split: ProfileSplit,
        reward: RewardConfig,
    ) -> Result<Self> {
        for p in &profiles {
            p.validate()?;
        }
        split.validate(profiles.len())?;
        Ok(Self {
            feeder,
            profiles,
            split,
            reward,
        })
    }

    /// Built-in feeder with the 15 built-in profiles and default split.
    pub fn builtin(feeder: &str) -> Result<Self> {
        Self::new(
            Feeder::builtin(feeder)?,
            LoadProfile::builtin_set(),
            ProfileSplit::default(),
            RewardConfig::default(),
        )
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::for_devices(self.feeder.network.bus_count(), &self.feeder.devices)
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.feeder.devices.head_sizes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    /// Index into the scenario's profile list.
    pub profile: usize,
    /// Bounds of the per-episode uniform load/PV scale factor.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(profile: usize, seed: u64) -> Self {
        Self {
            horizon: HORIZON,
            profile,
            scale_range: (0.8, 1.2),
            seed,
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub t: usize,
    pub converged: bool,
    pub iterations: usize,
    pub p_loss_mw: f64,
    pub p_load_mw: f64,
    /// Buses outside the voltage band after the action (all buses on divergence).
    pub violations: usize,
    pub v_mag: Vec<f64>,
    pub soc: Vec<f64>,
    pub p_bat_mw: Vec<f64>,
    pub switches: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: StateVector,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct VoltVarEnv {
    scenario: Arc<Scenario>,
    layout: StateLayout,
    t: usize,
    done: bool,
    profile: usize,
    scale: f64,
    action: ActionVector,
    soc: Vec<f64>,
    q_dg: Vec<f64>,
    v_mag: Vec<f64>,
}

impl VoltVarEnv {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let layout = scenario.layout();
        let devices = &scenario.feeder.devices;
        let n_bus = scenario.feeder.network.bus_count();
        Self {
            action: ActionVector::neutral(devices),
            soc: devices.batteries.iter().map(|b| b.soc_init).collect(),
            q_dg: vec![0.0; devices.inverters.len()],
            v_mag: vec![1.0; n_bus],
            layout,
            t: 0,
            done: true,
            profile: 0,
            scale: 1.0,
            scenario,
        }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn episode_scale(&self) -> f64 {
        self.scale
    }

    /// The action most recently applied (neutral right after reset).
    pub fn last_action(&self) -> &ActionVector {
        &self.action
    }

    pub fn reset(&mut self, config: &EpisodeConfig) -> Result<StateVector> {
        if config.horizon != HORIZON {
            return Err(Error::InvalidInput(format!(
                "episode horizon must be {HORIZON}, got {}",
                config.horizon
            )));
        }
        let profile = self.scenario.profiles.get(config.profile).ok_or_else(|| {
            Error::Profile(format!("profile {} does not exist", config.profile))
        })?;
        let (lo, hi) = config.scale_range;
        if !(lo <= hi && lo >= 0.0) {
            return Err(Error::InvalidInput(format!("bad scale range {lo}..{hi}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };

        // PV must fit every inverter rating at every hour of this episode.
        let devices = &self.scenario.feeder.devices;
        for t in 0..HORIZON {
            for si in &devices.inverters {
                si.validate_output(si.p_rated * profile.pv_scale[t] * scale)?;
            }
        }

        self.profile = config.profile;
        self.scale = scale;
        self.t = 0;
        self.done = false;
        self.action = ActionVector::neutral(devices);
        self.soc = devices.batteries.iter().map(|b| b.soc_init).collect();
        self.q_dg = vec![0.0; devices.inverters.len()];

        let p_bat = vec![0.0; devices.batteries.len()];
        let solution = self.solve(0, &self.action.clone(), &p_bat)?;
        if !solution.converged {
            return Err(Error::Diverged {
                iterations: solution.iterations,
                mismatch: solution.max_mismatch,
            });
        }
        self.v_mag = solution.v_mag;
        self.observe()
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::InvalidInput("step called on a finished episode; reset first".into()));
        }
        let scenario = Arc::clone(&self.scenario);
        let devices = &scenario.feeder.devices;
        let profile = &scenario.profiles[self.profile];
        action.validate(devices)?;
        let t = self.t;

        // Inverters: reactive output from the new setpoint and current PV.
        let mut q_dg = Vec::with_capacity(devices.inverters.len());
        let mut si_change = 0.0;
        for (k, si) in devices.inverters.iter().enumerate() {
            let p_out = si.p_rated * profile.pv_scale[t] * self.scale;
            let q = si_reactive_power(si, p_out, action.si_levels[k])?;
            let headroom = si.q_headroom(p_out)?;
            if headroom > 0.0 {
                si_change += (q - self.q_dg[k]).abs() / headroom;
            }
            q_dg.push(q);
        }

        // Batteries.
        let mut p_bat = Vec::with_capacity(devices.batteries.len());
        let mut soc = Vec::with_capacity(devices.batteries.len());
        let mut bat_usage = 0.0;
        for (k, bat) in devices.batteries.iter().enumerate() {
            let step = battery_step(bat, self.soc[k], action.bat_levels[k], DT_HOURS)?;
            bat_usage += step.p_bat.abs() / bat.p_max;
            p_bat.push(step.p_bat);
            soc.push(step.new_soc);
        }

        let cb_toggles = action
            .cb_statuses
            .iter()
            .zip(&self.action.cb_statuses)
            .filter(|(a, b)| a != b)
            .count();
        let tap_steps: usize = action
            .taps
            .iter()
            .zip(&self.action.taps)
            .map(|(a, b)| a.abs_diff(*b))
            .sum();
        let effort = ControlEffort {
            switches: (cb_toggles + tap_steps) as f64,
            si_change,
            bat_usage,
        };
        let head_switches = action
            .to_heads()
            .iter()
            .zip(self.action.to_heads())
            .filter(|(a, b)| **a != *b)
            .count() as f64;

        self.q_dg = q_dg.clone();
        let solution = self.solve_with_q(t, action, &p_bat, &q_dg)?;
        let p_load = profile.load_scale[t] * self.scale * self.total_base_load();

        self.action = action.clone();
        self.soc = soc;
        self.t += 1;

        let n_bus = scenario.feeder.network.bus_count();
        let (reward, violations, converged) = if solution.converged {
            self.v_mag = solution.v_mag.clone();
            let reward = compute_reward(&scenario.reward, &solution.v_mag, solution.p_loss, p_load, &effort);
            let violations = solution
                .v_mag
                .iter()
                .filter(|&&v| scenario.reward.is_violation(v))
                .count();
            (reward, violations, true)
        } else {
            (divergence_reward(&scenario.reward, &effort), n_bus, false)
        };
        self.done = !converged || self.t >= HORIZON;

        let info = StepInfo {
            t,
            converged,
            iterations: solution.iterations,
            p_loss_mw: if converged { solution.p_loss } else { f64::NAN },
            p_load_mw: p_load,
            violations,
            v_mag: if converged { solution.v_mag } else { self.v_mag.clone() },
            soc: self.soc.clone(),
            p_bat_mw: p_bat,
            switches: head_switches,
        };
        Ok(StepOutcome {
            state: self.observe()?,
            reward,
            done: self.done,
            info,
        })
    }

    fn total_base_load(&self) -> f64 {
        self.scenario.feeder.network.buses.iter().map(|b| b.base_load_p).sum()
    }

    fn solve(&self, t: usize, action: &ActionVector, p_bat: &[f64]) -> Result<PowerFlowSolution> {
        let devices = &self.scenario.feeder.devices;
        let profile = &self.scenario.profiles[self.profile];
        let mut q_dg = Vec::with_capacity(devices.inverters.len());
        for (k, si) in devices.inverters.iter().enumerate() {
            let p_out = si.p_rated * profile.pv_scale[t] * self.scale;
            q_dg.push(si_reactive_power(si, p_out, action.si_levels[k])?);
        }
        self.solve_with_q(t, action, p_bat, &q_dg)
    }

    fn solve_with_q(
        &self,
        t: usize,
        action: &ActionVector,
        p_bat: &[f64],
        q_dg: &[f64],
    ) -> Result<PowerFlowSolution> {
        let feeder = &self.scenario.feeder;
        let net = &feeder.network;
        let devices = &feeder.devices;
        let profile = &self.scenario.profiles[self.profile];
        let load = profile.load_scale[t] * self.scale;
        let pv = profile.pv_scale[t] * self.scale;

        let mut inj = Injections::from_loads(net, load);
        for (k, si) in devices.inverters.iter().enumerate() {
            inj.p[si.bus] += si.p_rated * pv;
            inj.q[si.bus] += q_dg[k];
        }
        for (k, bat) in devices.batteries.iter().enumerate() {
            inj.p[bat.bus] += p_bat[k];
        }

        let mut controls = Controls::nominal(net);
        for (k, reg) in devices.regulators.iter().enumerate() {
            controls.tap_ratios[reg.branch] = regulator_setpoint(tap_position(action.taps[k])?)?;
        }
        for (k, cb) in devices.capacitors.iter().enumerate() {
            controls.cb_on[cb.bus] = action.cb_statuses[k] == 1;
        }
        solve_power_flow(net, &inj, &controls)
    }

    fn observe(&self) -> Result<StateVector> {
        let obs = Observation {
            v_mag: self.v_mag.clone(),
            soc: self.soc.clone(),
            taps: self.action.taps.iter().map(|&i| normalize_tap(i)).collect(),
            cb: self.action.cb_statuses.iter().map(|&c| c as f64).collect(),
            si: self.action.si_levels.iter().map(|&i| normalize_si(i)).collect(),
        };
        self.layout.encode(&obs)
    }
}
