//! Radial distribution network model and balanced AC power flow.
//!
//! Everything inside this module works in per-unit on the network's
//! `base_mva`. Loads and injections are stored in MW / MVAr and converted
//! at the solver boundary.

mod admittance;
mod powerflow;

pub use admittance::{build_admittance, Admittance};
pub use powerflow::{
    compute_power_loss, power_mismatch, solve_power_flow, solve_power_flow_with, SolverOptions,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest and highest regulator ratio the admittance assembly accepts.
pub const TAP_RATIO_MIN: f64 = 0.9;
pub const TAP_RATIO_MAX: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    #[serde(alias = "PQ")]
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// MW
    pub base_load_p: f64,
    /// MVAr
    pub base_load_q: f64,
    /// Installed capacitor susceptance in p.u., zero when the bus has none.
    pub shunt_susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub resistance: f64,
    pub reactance: f64,
    /// Off-nominal ratio of the ideal transformer on the `from` side.
    pub tap_ratio: f64,
    pub regulator: bool,
}

impl Branch {
    /// Series admittance `1 / (r + jx)` as `(g, b)`.
    pub fn series_admittance(&self) -> Result<(f64, f64)> {
        let (r, x) = (self.resistance, self.reactance);
        let z2 = r * r + x * x;
        if z2 == 0.0 {
            return Err(Error::InvalidNetwork(format!(
                "branch {}-{} has zero impedance",
                self.from, self.to
            )));
        }
        Ok((r / z2, -x / z2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_mva: f64,
    pub base_kv: f64,
}

impl NetworkModel {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .unwrap_or(0)
    }

    /// Checks every structural invariant: dense ids, one slack bus, physical
    /// impedances, and a connected radial tree.
    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        if n == 0 {
            return Err(Error::InvalidNetwork("network has no buses".into()));
        }
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            return Err(Error::InvalidNetwork("base_mva must be positive".into()));
        }
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.id != i {
                return Err(Error::InvalidNetwork(format!(
                    "bus ids must be dense 0..{n}; position {i} has id {}",
                    bus.id
                )));
            }
            if !bus.base_load_p.is_finite() || !bus.base_load_q.is_finite() {
                return Err(Error::InvalidNetwork(format!("bus {i} has non-finite load")));
            }
            if !(bus.shunt_susceptance >= 0.0 && bus.shunt_susceptance.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "bus {i} has negative or non-finite shunt susceptance"
                )));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(Error::InvalidNetwork(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} references a bus outside 0..{n}"
                )));
            }
            if br.from == br.to {
                return Err(Error::InvalidNetwork(format!("branch {k} is a self-loop")));
            }
            if !(br.resistance >= 0.0) || !br.reactance.is_finite() || !br.resistance.is_finite()
            {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} has negative or non-finite resistance"
                )));
            }
            if br.reactance == 0.0 && br.resistance == 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} has zero impedance (r = x = 0)"
                )));
            }
            if !(TAP_RATIO_MIN..=TAP_RATIO_MAX).contains(&br.tap_ratio) {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} tap ratio {} outside [{TAP_RATIO_MIN}, {TAP_RATIO_MAX}]",
                    br.tap_ratio
                )));
            }
        }
        if self.branches.len() != n - 1 {
            return Err(Error::InvalidNetwork(format!(
                "a radial network with {n} buses needs {} branches, found {}",
                n - 1,
                self.branches.len()
            )));
        }
        if !self.is_connected() {
            return Err(Error::InvalidNetwork("network graph is disconnected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.buses.len();
        let mut adjacency = vec![Vec::new(); n];
        for br in &self.branches {
            adjacency[br.from].push(br.to);
            adjacency[br.to].push(br.from);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Switchable quantities that enter the admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    /// One ratio per branch; non-regulator branches keep their static ratio.
    pub tap_ratios: Vec<f64>,
    /// One flag per bus; only buses with installed susceptance are affected.
    pub cb_on: Vec<bool>,
}

impl Controls {
    pub fn nominal(net: &NetworkModel) -> Self {
        Self {
            tap_ratios: net.branches.iter().map(|b| b.tap_ratio).collect(),
            cb_on: vec![false; net.bus_count()],
        }
    }

    pub fn validate(&self, net: &NetworkModel) -> Result<()> {
        if self.tap_ratios.len() != net.branches.len() {
            return Err(Error::ShapeMismatch {
                what: "tap ratios",
                expected: net.branches.len(),
                got: self.tap_ratios.len(),
            });
        }
        if self.cb_on.len() != net.bus_count() {
            return Err(Error::ShapeMismatch {
                what: "capacitor status",
                expected: net.bus_count(),
                got: self.cb_on.len(),
            });
        }
        for (k, &t) in self.tap_ratios.iter().enumerate() {
            if !(TAP_RATIO_MIN..=TAP_RATIO_MAX).contains(&t) {
                return Err(Error::InvalidInput(format!(
                    "tap ratio {t} on branch {k} outside [{TAP_RATIO_MIN}, {TAP_RATIO_MAX}]"
                )));
            }
        }
        Ok(())
    }
}

/// Net bus injections `P^G - P^L`, `Q^G - Q^L` in MW / MVAr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Negated base loads scaled by `k`.
    pub fn from_loads(net: &NetworkModel, k: f64) -> Self {
        Self {
            p: net.buses.iter().map(|b| -k * b.base_load_p).collect(),
            q: net.buses.iter().map(|b| -k * b.base_load_q).collect(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (what, v) in [("active injections", &self.p), ("reactive injections", &self.q)] {
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what.to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// |U_i| in p.u.
    pub v_mag: Vec<f64>,
    /// θ_i in radians; slack is zero.
    pub v_ang: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Total series loss in MW.
    pub p_loss: f64,
    /// Active power delivered by the slack bus, MW.
    pub slack_p: f64,
    /// Reactive power delivered by the slack bus, MVAr.
    pub slack_q: f64,
    /// Largest absolute mismatch of the final iterate, p.u.
    pub max_mismatch: f64,
    /// Max mismatch before each Newton update, for divergence diagnostics.
    pub mismatch_trace: Vec<f64>,
}
