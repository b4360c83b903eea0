use serde::{Deserialize, Serialize};

/// Reward weights and the voltage band. All values are overridable from the
/// experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight on squared out-of-band voltage deviation.
    pub c_v: f64,
    /// Weight on loss normalized by total load.
    pub c_p: f64,
    /// Cost per capacitor toggle or regulator tap step.
    pub c_sw: f64,
    /// Cost per unit of inverter reactive change relative to headroom.
    pub c_si: f64,
    /// Cost per unit of battery power relative to rating.
    pub c_bat: f64,
    /// Penalty replacing the reward when power flow fails.
    pub r_div: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c_v: 100.0,
            c_p: 1.0,
            c_sw: 0.1,
            c_si: 0.05,
            c_bat: 0.05,
            r_div: 1000.0,
            v_min: 0.95,
            v_max: 1.05,
        }
    }
}

impl RewardConfig {
    pub fn half_band(&self) -> f64 {
        0.5 * (self.v_max - self.v_min)
    }

    pub fn nominal(&self) -> f64 {
        0.5 * (self.v_max + self.v_min)
    }

    pub fn is_violation(&self, v: f64) -> bool {
        !(self.v_min..=self.v_max).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub f_volt: f64,
    pub f_ctrl: f64,
    pub f_power: f64,
    /// Non-zero only when power flow failed.
    pub f_div: f64,
    pub total: f64,
}

/// Device activity between two consecutive control intervals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlEffort {
    /// Capacitor toggles plus regulator tap steps moved.
    pub switches: f64,
    /// `Σ |ΔQ_DG| / Q̄_DG` over inverters.
    pub si_change: f64,
    /// `Σ |p_bat| / p_max` over batteries.
    pub bat_usage: f64,
}

/// `Σ max(0, ||U_i| − 1| − half_band)²` scaled by `c_v`.
pub fn voltage_penalty(config: &RewardConfig, v_mag: &[f64]) -> f64 {
    let nominal = config.nominal();
    let band = config.half_band();
    config.c_v
        * v_mag
            .iter()
            .map(|v| ((v - nominal).abs() - band).max(0.0).powi(2))
            .sum::<f64>()
}

/// Reward of a solved post-action state: `-(f_volt + f_ctrl + f_power)`.
pub fn compute_reward(
    config: &RewardConfig,
    v_mag: &[f64],
    p_loss_mw: f64,
    p_load_mw: f64,
    effort: &ControlEffort,
) -> RewardBreakdown {
    let f_volt = voltage_penalty(config, v_mag);
    let f_ctrl = control_penalty(config, effort);
    let f_power = if p_load_mw > 0.0 {
        config.c_p * (p_loss_mw / p_load_mw).max(0.0)
    } else {
        0.0
    };
    RewardBreakdown {
        f_volt,
        f_ctrl,
        f_power,
        f_div: 0.0,
        total: -(f_volt + f_ctrl + f_power),
    }
}

/// Reward when the transition could not be solved.
pub fn divergence_reward(config: &RewardConfig, effort: &ControlEffort) -> RewardBreakdown {
    let f_ctrl = control_penalty(config, effort);
    RewardBreakdown {
        f_volt: 0.0,
        f_ctrl,
        f_power: 0.0,
        f_div: config.r_div,
        total: -(f_ctrl + config.r_div),
    }
}

fn control_penalty(config: &RewardConfig, effort: &ControlEffort) -> f64 {
    config.c_sw * effort.switches + config.c_si * effort.si_change + config.c_bat * effort.bat_usage
}
