//! Daily load and PV profiles.
//!
//! CSV format, one file per profile: a header `t,load_scale,pv_scale`
//! followed by exactly 24 rows, `t` running 0..23. `load_scale` multiplies
//! every bus's base load; `pv_scale` multiplies every inverter's rated PV
//! output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HORIZON: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub name: String,
    pub load_scale: Vec<f64>,
    pub pv_scale: Vec<f64>,
}

/// Shared residential shape, peak-normalized.
const RESIDENTIAL: [f64; HORIZON] = [
    0.50, 0.46, 0.44, 0.43, 0.44, 0.50, 0.62, 0.75, 0.80, 0.78, 0.74, 0.72, 0.70, 0.69, 0.70,
    0.74, 0.82, 0.93, 1.00, 0.98, 0.92, 0.82, 0.68, 0.57,
];

/// Number of built-in profiles.
pub const BUILTIN_PROFILE_COUNT: usize = 15;

impl LoadProfile {
    pub fn validate(&self) -> Result<()> {
        for (what, series) in [("load_scale", &self.load_scale), ("pv_scale", &self.pv_scale)] {
            if series.len() != HORIZON {
                return Err(Error::Profile(format!(
                    "profile '{}': {what} has {} entries, expected {HORIZON}",
                    self.name,
                    series.len()
                )));
            }
            if let Some(t) = series.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Profile(format!(
                    "profile '{}': {what}[{t}] is negative or non-finite",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// All-zero loads and PV, useful for flat-start checks.
    pub fn zero() -> Self {
        Self {
            name: "zero".into(),
            load_scale: vec![0.0; HORIZON],
            pv_scale: vec![0.0; HORIZON],
        }
    }

    pub fn constant(load: f64, pv: f64) -> Self {
        Self {
            name: format!("constant-{load}-{pv}"),
            load_scale: vec![load; HORIZON],
            pv_scale: vec![pv; HORIZON],
        }
    }

    /// Synthetic daily profile `index` of the built-in set (0..15).
    ///
    /// Each profile stretches the residential shape, shifts it by up to an
    /// hour, and pairs it with a clear-sky PV curve attenuated by a
    /// per-day cloud factor.
    pub fn builtin(index: usize) -> Result<Self> {
        if index >= BUILTIN_PROFILE_COUNT {
            return Err(Error::Profile(format!(
                "built-in profile {index} outside 0..{BUILTIN_PROFILE_COUNT}"
            )));
        }
        let k = index as f64;
        let golden = 0.618_033_988_749_895;
        let amplitude = 0.85 + 0.3 * (k * golden).fract();
        let shift = (index % 3) as isize - 1;
        let clearness = 0.55 + 0.45 * (k * 0.414_213_562_373_095 + 0.3).fract();

        let load_scale = (0..HORIZON)
            .map(|t| {
                let src = (t as isize - shift).rem_euclid(HORIZON as isize) as usize;
                round6(amplitude * RESIDENTIAL[src])
            })
            .collect();
        let pv_scale = (0..HORIZON)
            .map(|t| {
                let hours_from_dawn = t as f64 - 6.0;
                if (0.0..=12.0).contains(&hours_from_dawn) {
                    let clear = (std::f64::consts::PI * hours_from_dawn / 12.0).sin().max(0.0);
                    // Passing clouds on a few afternoon hours for the hazier days.
                    let dip = if clearness < 0.75 && (t + index) % 4 == 0 { 0.7 } else { 1.0 };
                    round6(clearness * clear * dip)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            name: format!("builtin-{index:02}"),
            load_scale,
            pv_scale,
        })
    }

    pub fn builtin_set() -> Vec<Self> {
        (0..BUILTIN_PROFILE_COUNT)
            .map(|i| Self::builtin(i).expect("index in range"))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,load_scale,pv_scale\n");
        for t in 0..HORIZON {
            out.push_str(&format!("{t},{},{}\n", self.load_scale[t], self.pv_scale[t]));
        }
        out
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Profile(format!("profile '{name}': empty file")))?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        if columns != ["t", "load_scale", "pv_scale"] {
            return Err(Error::Profile(format!(
                "profile '{name}': header must be 't,load_scale,pv_scale', got '{header}'"
            )));
        }
        let mut load_scale = Vec::with_capacity(HORIZON);
        let mut pv_scale = Vec::with_capacity(HORIZON);
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    Error::Profile(format!("profile '{name}', line {}: bad number '{s}'", row + 2))
                })
            };
            if fields.len() != 3 {
                return Err(Error::Profile(format!(
                    "profile '{name}', line {}: expected 3 columns",
                    row + 2
                )));
            }
            let t = parse(fields[0])?;
            if t != row as f64 {
                return Err(Error::Profile(format!(
                    "profile '{name}', line {}: expected t = {row}",
                    row + 2
                )));
            }
            load_scale.push(parse(fields[1])?);
            pv_scale.push(parse(fields[2])?);
        }
        let profile = Self {
            name: name.to_string(),
            load_scale,
            pv_scale,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Reads every `*.csv` in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Self::from_csv(&name, &std::fs::read_to_string(p)?)
            })
            .collect()
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
