//! Voltage-regulating devices and their discrete action grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SI_LEVELS: usize = 21;
pub const SI_STEP: f64 = 0.1;
pub const CB_LEVELS: usize = 2;
pub const TAP_MAX: i32 = 16;
pub const TAP_LEVELS: usize = 2 * TAP_MAX as usize + 1;
/// Regulator voltage change per tap step, p.u.
pub const TAP_STEP: f64 = 0.00625;
pub const BATTERY_LEVELS: usize = 33;
pub const BATTERY_STEP: f64 = 0.0625;
/// Control interval in hours.
pub const DT_HOURS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartInverter {
    pub bus: usize,
    /// Apparent power rating, MVA.
    pub s_rating: f64,
    /// PV output at a profile scale of 1.0, MW.
    pub p_rated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitorBank {
    pub bus: usize,
    /// p.u.
    pub susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regulator {
    /// Index into the network's branch list.
    pub branch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub bus: usize,
    /// MWh
    pub capacity: f64,
    /// MW
    pub p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceSet {
    pub inverters: Vec<SmartInverter>,
    pub capacitors: Vec<CapacitorBank>,
    pub regulators: Vec<Regulator>,
    pub batteries: Vec<Battery>,
}

/// SI setpoint `a_DG` for grid index `0..21`: `-1.0, -0.9, …, 1.0`.
pub fn si_level(index: usize) -> Result<f64> {
    if index >= SI_LEVELS {
        return Err(Error::InvalidInput(format!(
            "inverter level {index} outside 0..{SI_LEVELS}"
        )));
    }
    Ok((index as f64 - 10.0) / 10.0)
}

/// Index of the zero-reactive-power inverter setpoint.
pub const SI_NEUTRAL: usize = 10;

/// Battery setpoint `a_bat` for grid index `0..33`: `-1, -1 + d, …, 1`.
pub fn battery_level(index: usize) -> Result<f64> {
    if index >= BATTERY_LEVELS {
        return Err(Error::InvalidInput(format!(
            "battery level {index} outside 0..{BATTERY_LEVELS}"
        )));
    }
    Ok((index as f64 - 16.0) * BATTERY_STEP)
}

pub const BATTERY_NEUTRAL: usize = 16;

/// Tap position for grid index `0..33`: `-16..=16`.
pub fn tap_position(index: usize) -> Result<i32> {
    if index >= TAP_LEVELS {
        return Err(Error::InvalidInput(format!(
            "tap index {index} outside 0..{TAP_LEVELS}"
        )));
    }
    Ok(index as i32 - TAP_MAX)
}

pub const TAP_NEUTRAL: usize = TAP_MAX as usize;

/// Regulator voltage ratio `1 + tap · ΔU_VR`.
pub fn regulator_setpoint(tap: i32) -> Result<f64> {
    if tap.abs() > TAP_MAX {
        return Err(Error::InvalidInput(format!(
            "tap {tap} outside -{TAP_MAX}..={TAP_MAX}"
        )));
    }
    Ok(1.0 + tap as f64 * TAP_STEP)
}

impl SmartInverter {
    pub fn validate_output(&self, p_output: f64) -> Result<()> {
        if !(0.0..=self.s_rating).contains(&p_output) {
            return Err(Error::Profile(format!(
                "inverter at bus {}: active output {p_output} MW outside [0, {}] MVA rating",
                self.bus, self.s_rating
            )));
        }
        Ok(())
    }

    /// Reactive headroom `√(S² − P²)` at the given active output, MVAr.
    pub fn q_headroom(&self, p_output: f64) -> Result<f64> {
        self.validate_output(p_output)?;
        Ok((self.s_rating * self.s_rating - p_output * p_output).max(0.0).sqrt())
    }
}

/// Reactive output `a_DG · √(S² − P²)` for an inverter grid level, MVAr.
pub fn si_reactive_power(si: &SmartInverter, p_output: f64, level_index: usize) -> Result<f64> {
    let a = si_level(level_index)?;
    Ok(a * si.q_headroom(p_output)?)
}

/// Shunt susceptance a capacitor adds to its bus diagonal.
pub fn cb_injection(cb: &CapacitorBank, on: bool) -> f64 {
    if on {
        cb.susceptance
    } else {
        0.0
    }
}

/// Result of one battery control interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    /// Discharge-positive power actually delivered, MW.
    pub p_bat: f64,
    pub new_soc: f64,
    /// True when the SoC limits cut the requested power.
    pub curtailed: bool,
}

/// Applies `p = a · p_max` (discharge positive) for `dt` hours.
///
/// The state of charge follows `σ' = σ − p·dt/E`, so a negative setpoint
/// charges. Requests that would leave `[σ_min, σ_max]` are curtailed to land
/// exactly on the bound.
pub fn battery_step(bat: &Battery, soc: f64, level_index: usize, dt: f64) -> Result<BatteryStep> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("battery dt must be positive, got {dt}")));
    }
    let a = battery_level(level_index)?;
    let requested = a * bat.p_max;
    let new_soc = soc - requested * dt / bat.capacity;
    if new_soc > bat.soc_max {
        let p_bat = (soc - bat.soc_max) * bat.capacity / dt;
        Ok(BatteryStep {
            p_bat: p_bat.min(0.0),
            new_soc: bat.soc_max,
            curtailed: true,
        })
    } else if new_soc < bat.soc_min {
        let p_bat = (soc - bat.soc_min) * bat.capacity / dt;
        Ok(BatteryStep {
            p_bat: p_bat.max(0.0),
            new_soc: bat.soc_min,
            curtailed: true,
        })
    } else {
        Ok(BatteryStep {
            p_bat: requested,
            new_soc,
            curtailed: false,
        })
    }
}

impl DeviceSet {
    /// Action-grid size of each factored head, in head order:
    /// inverters, capacitors, regulators, batteries.
    pub fn head_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.head_count());
        sizes.extend(std::iter::repeat(SI_LEVELS).take(self.inverters.len()));
        sizes.extend(std::iter::repeat(CB_LEVELS).take(self.capacitors.len()));
        sizes.extend(std::iter::repeat(TAP_LEVELS).take(self.regulators.len()));
        sizes.extend(std::iter::repeat(BATTERY_LEVELS).take(self.batteries.len()));
        sizes
    }

    pub fn head_count(&self) -> usize {
        self.inverters.len() + self.capacitors.len() + self.regulators.len() + self.batteries.len()
    }

    pub fn validate(&self, net: &crate::grid::NetworkModel) -> Result<()> {
        let n = net.bus_count();
        for si in &self.inverters {
            if si.bus >= n {
                return Err(Error::InvalidDevice(format!("inverter bus {} not in network", si.bus)));
            }
            if !(si.s_rating > 0.0) || !(si.p_rated >= 0.0) {
                return Err(Error::InvalidDevice(format!(
                    "inverter at bus {} needs s_rating > 0 and p_rated >= 0",
                    si.bus
                )));
            }
        }
        for cb in &self.capacitors {
            if cb.bus >= n {
                return Err(Error::InvalidDevice(format!("capacitor bus {} not in network", cb.bus)));
            }
            if !(cb.susceptance > 0.0) {
                return Err(Error::InvalidDevice(format!(
                    "capacitor at bus {} needs positive susceptance",
                    cb.bus
                )));
            }
            if net.buses[cb.bus].shunt_susceptance != cb.susceptance {
                return Err(Error::InvalidDevice(format!(
                    "capacitor at bus {} disagrees with the bus shunt susceptance",
                    cb.bus
                )));
            }
        }
        for reg in &self.regulators {
            match net.branches.get(reg.branch) {
                Some(br) if br.regulator => {}
                Some(_) => {
                    return Err(Error::InvalidDevice(format!(
                        "branch {} is not marked as a regulator branch",
                        reg.branch
                    )))
                }
                None => {
                    return Err(Error::InvalidDevice(format!(
                        "regulator branch {} not in network",
                        reg.branch
                    )))
                }
            }
        }
        for bat in &self.batteries {
            if bat.bus >= n {
                return Err(Error::InvalidDevice(format!("battery bus {} not in network", bat.bus)));
            }
            let limits_ok = 0.0 <= bat.soc_min
                && bat.soc_min <= bat.soc_init
                && bat.soc_init <= bat.soc_max
                && bat.soc_max <= 1.0;
            if !(bat.capacity > 0.0) || !(bat.p_max > 0.0) || !limits_ok {
                return Err(Error::InvalidDevice(format!(
                    "battery at bus {} has inconsistent ratings or SoC limits",
                    bat.bus
                )));
            }
        }
        Ok(())
    }
}
