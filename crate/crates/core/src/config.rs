//! Campaign configuration: one TOML file with a section per module, plus
//! dotted-path overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmpc::ControllerConfig;
use crate::route::{ArrivalTolerance, RouteProfile};
use crate::vehicle::{FuelParams, VehicleParams};

/// Prefix selecting a generated route instead of a file.
pub const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouteConfig {
    /// CSV file, relative to the config file, or `builtin:<name>`.
    pub path: String,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            path: format!("{BUILTIN_PREFIX}rolling_1km"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Number of learning iterations J after the baseline trip.
    pub iterations: usize,
    /// Reference speed of the baseline tracker (m/s).
    pub baseline_speed: f64,
    /// Fraction of the speed error the baseline removes per step.
    pub baseline_gain: f64,
    /// Deceleration of the stopping ramp (m/s^2).
    pub stop_decel: f64,
    pub output_dir: String,
    /// Reserved for noise models; nothing random runs today.
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            baseline_speed: 11.0,
            baseline_gain: 0.2,
            stop_decel: 1.5,
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub position_nodes: usize,
    /// Extra position range past the goal (m), room to brake into it.
    pub position_margin: f64,
    /// Upper end of the velocity axis (m/s), capped at v_max.
    pub velocity_top: f64,
    pub velocity_nodes: usize,
    /// Force nodes over [f_min, f_max]; inputs are the moves between them.
    pub force_nodes: usize,
    /// Terminal cost per metre or m/s outside the goal region.
    pub terminal_penalty: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            position_nodes: 101,
            position_margin: 10.0,
            velocity_top: 10.0,
            velocity_nodes: 41,
            force_nodes: 11,
            terminal_penalty: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub route: RouteConfig,
    pub vehicle: VehicleParams,
    pub fuel: FuelParams,
    pub arrival: ArrivalTolerance,
    pub controller: ControllerConfig,
    pub harness: HarnessConfig,
    pub dp: DpConfig,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            route: RouteConfig::default(),
            vehicle: VehicleParams {
                t_s: 0.2,
                ..VehicleParams::default()
            },
            fuel: FuelParams::default(),
            arrival: ArrivalTolerance::default(),
            controller: ControllerConfig::default(),
            harness: HarnessConfig::default(),
            dp: DpConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl CampaignConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: CampaignConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.vehicle.validate().map_err(cfg_err)?;
        self.fuel.validate().map_err(cfg_err)?;
        self.controller.validate()?;
        let h = &self.harness;
        if h.iterations == 0 {
            return Err(Error::Config("harness.iterations must be at least 1".into()));
        }
        if !(h.baseline_speed > 0.0 && h.baseline_speed <= self.vehicle.v_max) {
            return Err(Error::Config(format!(
                "harness.baseline_speed must lie in (0, v_max], got {}",
                h.baseline_speed
            )));
        }
        if !(h.baseline_gain > 0.0 && h.baseline_gain <= 1.0) || !(h.stop_decel > 0.0) {
            return Err(Error::Config("harness.baseline_gain must lie in (0, 1] and stop_decel be positive".into()));
        }
        let a = &self.arrival;
        if !(a.eps_s > 0.0 && a.eps_v > 0.0 && a.eps_force > 0.0) {
            return Err(Error::Config("arrival tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Path of the route file, or `None` for a builtin route.
    pub fn route_path(&self) -> Option<PathBuf> {
        if self.route.path.starts_with(BUILTIN_PREFIX) {
            None
        } else {
            Some(self.base_dir.join(&self.route.path))
        }
    }

    pub fn load_route(&self) -> Result<RouteProfile> {
        match self.route.path.strip_prefix(BUILTIN_PREFIX) {
            Some(name) => RouteProfile::builtin(name).ok_or_else(|| Error::Config(format!("unknown builtin route {name:?}"))),
            None => {
                let path = self.base_dir.join(&self.route.path);
                if !path.is_file() {
                    return Err(Error::Config(format!("route file not found: {}", path.display())));
                }
                RouteProfile::load(&path)
            }
        }
    }
}

/// Sets `a.b.c=value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
