use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::devices::{
    DeviceSet, BATTERY_LEVELS, BATTERY_NEUTRAL, CB_LEVELS, SI_LEVELS, SI_NEUTRAL, TAP_LEVELS,
    TAP_MAX, TAP_NEUTRAL,
};
use crate::error::{Error, Result};

/// Flat observation vector fed to the Q-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    VoltageMagnitude,
    StateOfCharge,
    TapPosition,
    CapacitorStatus,
    InverterLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Maps observation indices to their physical meaning.
///
/// Order: bus voltage magnitudes, battery SoC, regulator taps scaled to
/// `[-1, 1]`, capacitor status in `{0, 1}`, inverter setpoints in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    segments: Vec<Segment>,
}

/// Observation split back into its channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub v_mag: Vec<f64>,
    pub soc: Vec<f64>,
    pub taps: Vec<f64>,
    pub cb: Vec<f64>,
    pub si: Vec<f64>,
}

impl StateLayout {
    pub fn new(n_bus: usize, n_bat: usize, n_reg: usize, n_cb: usize, n_si: usize) -> Self {
        let mut start = 0;
        let segments = [
            (SegmentRole::VoltageMagnitude, n_bus),
            (SegmentRole::StateOfCharge, n_bat),
            (SegmentRole::TapPosition, n_reg),
            (SegmentRole::CapacitorStatus, n_cb),
            (SegmentRole::InverterLevel, n_si),
        ]
        .into_iter()
        .map(|(role, len)| {
            let seg = Segment { role, start, len };
            start += len;
            seg
        })
        .collect();
        Self { segments }
    }

    pub fn for_devices(n_bus: usize, devices: &DeviceSet) -> Self {
        Self::new(
            n_bus,
            devices.batteries.len(),
            devices.regulators.len(),
            devices.capacitors.len(),
            devices.inverters.len(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, role: SegmentRole) -> Range<usize> {
        self.segments
            .iter()
            .find(|s| s.role == role)
            .map(Segment::range)
            .unwrap_or(0..0)
    }

    pub fn mask(&self, role: SegmentRole) -> Vec<bool> {
        let range = self.segment(role);
        (0..self.len()).map(|i| range.contains(&i)).collect()
    }

    /// True exactly on the bus-voltage entries.
    pub fn voltage_mask(&self) -> Vec<bool> {
        self.mask(SegmentRole::VoltageMagnitude)
    }

    pub fn encode(&self, obs: &Observation) -> Result<StateVector> {
        let mut out = Vec::with_capacity(self.len());
        for seg in &self.segments {
            let part = match seg.role {
                SegmentRole::VoltageMagnitude => &obs.v_mag,
                SegmentRole::StateOfCharge => &obs.soc,
                SegmentRole::TapPosition => &obs.taps,
                SegmentRole::CapacitorStatus => &obs.cb,
                SegmentRole::InverterLevel => &obs.si,
            };
            if part.len() != seg.len {
                return Err(Error::ShapeMismatch {
                    what: "observation segment",
                    expected: seg.len,
                    got: part.len(),
                });
            }
            out.extend_from_slice(part);
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state entry {i}")));
        }
        Ok(StateVector(out))
    }

    pub fn decode(&self, state: &StateVector) -> Result<Observation> {
        if state.len() != self.len() {
            return Err(Error::ShapeMismatch {
                what: "state vector",
                expected: self.len(),
                got: state.len(),
            });
        }
        let part = |role| state.0[self.segment(role)].to_vec();
        Ok(Observation {
            v_mag: part(SegmentRole::VoltageMagnitude),
            soc: part(SegmentRole::StateOfCharge),
            taps: part(SegmentRole::TapPosition),
            cb: part(SegmentRole::CapacitorStatus),
            si: part(SegmentRole::InverterLevel),
        })
    }
}

/// Tap grid index mapped affinely onto `[-1, 1]`.
pub fn normalize_tap(index: usize) -> f64 {
    (index as f64 - TAP_MAX as f64) / TAP_MAX as f64
}

/// Inverter grid index mapped onto `[-1, 1]` (equal to the setpoint `a_DG`).
pub fn normalize_si(index: usize) -> f64 {
    (index as f64 - SI_NEUTRAL as f64) / SI_NEUTRAL as f64
}

/// One discrete grid index per controllable device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector {
    pub si_levels: Vec<usize>,
    pub cb_statuses: Vec<usize>,
    pub taps: Vec<usize>,
    pub bat_levels: Vec<usize>,
}

impl ActionVector {
    /// Taps at 0, capacitors off, inverters at zero Q, batteries idle.
    pub fn neutral(devices: &DeviceSet) -> Self {
        Self {
            si_levels: vec![SI_NEUTRAL; devices.inverters.len()],
            cb_statuses: vec![0; devices.capacitors.len()],
            taps: vec![TAP_NEUTRAL; devices.regulators.len()],
            bat_levels: vec![BATTERY_NEUTRAL; devices.batteries.len()],
        }
    }

    /// Flattens to Q-network head order: inverters, capacitors, regulators, batteries.
    pub fn to_heads(&self) -> Vec<usize> {
        self.si_levels
            .iter()
            .chain(&self.cb_statuses)
            .chain(&self.taps)
            .chain(&self.bat_levels)
            .copied()
            .collect()
    }

    pub fn from_heads(heads: &[usize], devices: &DeviceSet) -> Result<Self> {
        if heads.len() != devices.head_count() {
            return Err(Error::ShapeMismatch {
                what: "action heads",
                expected: devices.head_count(),
                got: heads.len(),
            });
        }
        let (si, rest) = heads.split_at(devices.inverters.len());
        let (cb, rest) = rest.split_at(devices.capacitors.len());
        let (taps, bat) = rest.split_at(devices.regulators.len());
        let action = Self {
            si_levels: si.to_vec(),
            cb_statuses: cb.to_vec(),
            taps: taps.to_vec(),
            bat_levels: bat.to_vec(),
        };
        action.validate(devices)?;
        Ok(action)
    }

    pub fn validate(&self, devices: &DeviceSet) -> Result<()> {
        let groups = [
            ("inverter levels", &self.si_levels, devices.inverters.len(), SI_LEVELS),
            ("capacitor statuses", &self.cb_statuses, devices.capacitors.len(), CB_LEVELS),
            ("regulator taps", &self.taps, devices.regulators.len(), TAP_LEVELS),
            ("battery levels", &self.bat_levels, devices.batteries.len(), BATTERY_LEVELS),
        ];
        for (what, values, count, levels) in groups {
            if values.len() != count {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: count,
                    got: values.len(),
                });
            }
            if let Some(v) = values.iter().find(|&&v| v >= levels) {
                return Err(Error::InvalidInput(format!("{what}: index {v} outside 0..{levels}")));
            }
        }
        Ok(())
    }
}
