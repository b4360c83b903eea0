//! Feeder definition files.
//!
//! A feeder file is JSON with `buses[]`, `branches[]`, `base_mva`,
//! `base_kv`, and an optional `devices` section:
//!
//! ```json
//! {
//!   "base_mva": 10.0, "base_kv": 12.47,
//!   "buses": [{ "id": 0, "kind": "slack", "p_load_mw": 0.0, "q_load_mvar": 0.0, "cb_susceptance_pu": 0.0 }],
//!   "branches": [{ "from": 0, "to": 1, "r_pu": 0.002, "x_pu": 0.008, "regulator": true }],
//!   "devices": {
//!     "inverters": [{ "bus": 4, "s_rating_mva": 3.8, "p_rated_mw": 3.0 }],
//!     "capacitors": [{ "bus": 3 }],
//!     "regulators": [{ "branch": 0 }],
//!     "batteries": [{ "bus": 2, "capacity_mwh": 4.0, "p_max_mw": 1.0,
//!                     "soc_min": 0.1, "soc_max": 0.9, "soc_init": 0.5 }]
//!   }
//! }
//! ```
//!
//! A capacitor takes its susceptance from the `cb_susceptance_pu` of its bus.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devices::{Battery, CapacitorBank, DeviceSet, Regulator, SmartInverter};
use crate::error::{Error, Result};
use crate::grid::{Branch, Bus, BusKind, NetworkModel};

const FEEDER_5BUS: &str = include_str!("../data/feeder_5bus.json");
const FEEDER_13BUS: &str = include_str!("../data/feeder_13bus.json");

/// Names accepted by [`Feeder::builtin`].
pub const BUILTIN_FEEDERS: [&str; 2] = ["5bus", "13bus"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederFile {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub base_kv: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub devices: DeviceRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub p_load_mw: f64,
    #[serde(default)]
    pub q_load_mvar: f64,
    #[serde(default)]
    pub cb_susceptance_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    #[serde(default)]
    pub regulator: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecords {
    #[serde(default)]
    pub inverters: Vec<InverterRecord>,
    #[serde(default)]
    pub capacitors: Vec<CapacitorRecord>,
    #[serde(default)]
    pub regulators: Vec<RegulatorRecord>,
    #[serde(default)]
    pub batteries: Vec<BatteryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterRecord {
    pub bus: usize,
    pub s_rating_mva: f64,
    pub p_rated_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitorRecord {
    pub bus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorRecord {
    pub branch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryRecord {
    pub bus: usize,
    pub capacity_mwh: f64,
    pub p_max_mw: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    #[serde(default = "default_soc_init")]
    pub soc_init: f64,
}

fn default_soc_init() -> f64 {
    0.5
}

/// A validated network together with its controllable devices.
#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    pub name: String,
    pub network: NetworkModel,
    pub devices: DeviceSet,
}

impl Feeder {
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "5bus" => FEEDER_5BUS,
            "13bus" => FEEDER_13BUS,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown built-in feeder '{other}' (expected one of {BUILTIN_FEEDERS:?})"
                )))
            }
        };
        Self::from_json(text)
    }

    /// Loads `builtin:<name>` or a path to a feeder JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        match spec.strip_prefix("builtin:") {
            Some(name) => Self::builtin(name),
            None => Self::from_path(spec),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FeederFile = serde_json::from_str(text)?;
        file.into_feeder()
    }

    pub fn to_file(&self) -> FeederFile {
        FeederFile {
            name: self.name.clone(),
            base_mva: self.network.base_mva,
            base_kv: self.network.base_kv,
            buses: self
                .network
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: b.kind,
                    p_load_mw: b.base_load_p,
                    q_load_mvar: b.base_load_q,
                    cb_susceptance_pu: b.shunt_susceptance,
                })
                .collect(),
            branches: self
                .network
                .branches
                .iter()
                .map(|b| BranchRecord {
                    from: b.from,
                    to: b.to,
                    r_pu: b.resistance,
                    x_pu: b.reactance,
                    regulator: b.regulator,
                })
                .collect(),
            devices: DeviceRecords {
                inverters: self
                    .devices
                    .inverters
                    .iter()
                    .map(|s| InverterRecord {
                        bus: s.bus,
                        s_rating_mva: s.s_rating,
                        p_rated_mw: s.p_rated,
                    })
                    .collect(),
                capacitors: self
                    .devices
                    .capacitors
                    .iter()
                    .map(|c| CapacitorRecord { bus: c.bus })
                    .collect(),
                regulators: self
                    .devices
                    .regulators
                    .iter()
                    .map(|r| RegulatorRecord { branch: r.branch })
                    .collect(),
                batteries: self
                    .devices
                    .batteries
                    .iter()
                    .map(|b| BatteryRecord {
                        bus: b.bus,
                        capacity_mwh: b.capacity,
                        p_max_mw: b.p_max,
                        soc_min: b.soc_min,
                        soc_max: b.soc_max,
                        soc_init: b.soc_init,
                    })
                    .collect(),
            },
        }
    }
}

impl FeederFile {
    pub fn into_feeder(self) -> Result<Feeder> {
        let network = NetworkModel {
            buses: self
                .buses
                .iter()
                .map(|b| Bus {
                    id: b.id,
                    kind: b.kind,
                    base_load_p: b.p_load_mw,
                    base_load_q: b.q_load_mvar,
                    shunt_susceptance: b.cb_susceptance_pu,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    from: b.from,
                    to: b.to,
                    resistance: b.r_pu,
                    reactance: b.x_pu,
                    tap_ratio: 1.0,
                    regulator: b.regulator,
                })
                .collect(),
            base_mva: self.base_mva,
            base_kv: self.base_kv,
        };
        network.validate()?;

        let mut capacitors = Vec::with_capacity(self.devices.capacitors.len());
        for c in &self.devices.capacitors {
            let susceptance = network
                .buses
                .get(c.bus)
                .map(|b| b.shunt_susceptance)
                .ok_or_else(|| Error::InvalidDevice(format!("capacitor bus {} not in network", c.bus)))?;
            capacitors.push(CapacitorBank {
                bus: c.bus,
                susceptance,
            });
        }
        let devices = DeviceSet {
            inverters: self
                .devices
                .inverters
                .iter()
                .map(|s| SmartInverter {
                    bus: s.bus,
                    s_rating: s.s_rating_mva,
                    p_rated: s.p_rated_mw,
                })
                .collect(),
            capacitors,
            regulators: self
                .devices
                .regulators
                .iter()
                .map(|r| Regulator { branch: r.branch })
                .collect(),
            batteries: self
                .devices
                .batteries
                .iter()
                .map(|b| Battery {
                    bus: b.bus,
                    capacity: b.capacity_mwh,
                    p_max: b.p_max_mw,
                    soc_min: b.soc_min,
                    soc_max: b.soc_max,
                    soc_init: b.soc_init,
                })
                .collect(),
        };
        devices.validate(&network)?;
        Ok(Feeder {
            name: self.name,
            network,
            devices,
        })
    }
}
