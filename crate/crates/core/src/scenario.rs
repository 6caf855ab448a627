//! Mission scenario and the canonical unit system.
//!
//! Canonical units: LU (length), TU (time), VU = LU/TU (velocity), MU (mass).
//! The gravitational parameter is normalized to exactly 1, so the printed TU
//! of a mission table is treated as a display value; the velocity unit is
//! always derived as LU/TU when a scenario is loaded.

use nalgebra::Vector3;
use serde::Deserialize;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Seconds per civil calendar day (no leap seconds).
pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("non-positive {0}")]
    NonPositive(&'static str),
    #[error("flight window must satisfy tf > t0 (got t0={t0}, tf={tf})")]
    BadWindow { t0: f64, tf: f64 },
    #[error("velocity unit {vu} inconsistent with LU/TU = {derived} (relative error {rel:.3e})")]
    InconsistentVelocityUnit { vu: f64, derived: f64, rel: f64 },
    #[error("bad epoch {0:?}: expected YYYY-MM-DD")]
    BadEpoch(String),
    #[error("flight time missing: provide tof_days or both depart_epoch and arrive_epoch")]
    MissingFlightTime,
    #[error("unknown unit tag {0:?}")]
    UnknownUnit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Physical dimension tags for unit conversion.
///
/// Physical-side units are fixed per tag: km, s, km/s, kg, N, m/s².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Length,
    Time,
    Velocity,
    Mass,
    Force,
    Acceleration,
}

impl FromStr for Unit {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        match s {
            "length" => Ok(Unit::Length),
            "time" => Ok(Unit::Time),
            "velocity" => Ok(Unit::Velocity),
            "mass" => Ok(Unit::Mass),
            "force" => Ok(Unit::Force),
            "acceleration" => Ok(Unit::Acceleration),
            other => Err(ScenarioError::UnknownUnit(other.to_string())),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Unit::Length => "length",
            Unit::Time => "time",
            Unit::Velocity => "velocity",
            Unit::Mass => "mass",
            Unit::Force => "force",
            Unit::Acceleration => "acceleration",
        };
        f.write_str(s)
    }
}

/// Canonical unit system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSystem {
    /// km per LU
    pub length_unit: f64,
    /// s per TU
    pub time_unit: f64,
    /// km/s per VU
    pub velocity_unit: f64,
    /// kg per MU
    pub mass_unit: f64,
    /// sea-level gravitational acceleration, m/s²
    pub gravity_sea_level: f64,
}

impl UnitSystem {
    /// Build a unit system, checking positivity and VU = LU/TU (1e-9 relative).
    pub fn new(
        length_unit: f64,
        time_unit: f64,
        velocity_unit: f64,
        mass_unit: f64,
        gravity_sea_level: f64,
    ) -> Result<Self, ScenarioError> {
        if !(length_unit > 0.0) {
            return Err(ScenarioError::NonPositive("length unit"));
        }
        if !(time_unit > 0.0) {
            return Err(ScenarioError::NonPositive("time unit"));
        }
        if !(velocity_unit > 0.0) {
            return Err(ScenarioError::NonPositive("velocity unit"));
        }
        if !(mass_unit > 0.0) {
            return Err(ScenarioError::NonPositive("mass unit"));
        }
        if !(gravity_sea_level > 0.0) {
            return Err(ScenarioError::NonPositive("sea-level gravity"));
        }
        let derived = length_unit / time_unit;
        let rel = ((velocity_unit - derived) / derived).abs();
        if rel > 1e-9 {
            return Err(ScenarioError::InconsistentVelocityUnit {
                vu: velocity_unit,
                derived,
                rel,
            });
        }
        Ok(Self {
            length_unit,
            time_unit,
            velocity_unit,
            mass_unit,
            gravity_sea_level,
        })
    }

    /// Derive VU = LU/TU instead of taking it as input.
    pub fn from_lu_tu_mu(
        length_unit: f64,
        time_unit: f64,
        mass_unit: f64,
        gravity_sea_level: f64,
    ) -> Result<Self, ScenarioError> {
        Self::new(
            length_unit,
            time_unit,
            length_unit / time_unit,
            mass_unit,
            gravity_sea_level,
        )
    }

    /// Physical magnitude of one canonical unit of `unit`
    /// (km, s, km/s, kg, N, m/s² respectively).
    pub fn physical_per_canonical(&self, unit: Unit) -> f64 {
        match unit {
            Unit::Length => self.length_unit,
            Unit::Time => self.time_unit,
            Unit::Velocity => self.velocity_unit,
            Unit::Mass => self.mass_unit,
            // MU·LU/TU² expressed in newtons (kg·m/s²)
            Unit::Force => {
                self.mass_unit * (self.length_unit * 1.0e3) / (self.time_unit * self.time_unit)
            }
            // LU/TU² expressed in m/s²
            Unit::Acceleration => {
                (self.length_unit * 1.0e3) / (self.time_unit * self.time_unit)
            }
        }
    }

    /// Physical quantity -> canonical scalar.
    pub fn to_canonical(&self, value: f64, unit: Unit) -> f64 {
        value / self.physical_per_canonical(unit)
    }

    /// Canonical scalar -> physical quantity.
    pub fn from_canonical(&self, value: f64, unit: Unit) -> f64 {
        value * self.physical_per_canonical(unit)
    }
}

/// Point-mass gravity plus engine constants, everything canonical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynParamsSeed {
    pub mu: f64,
    pub thrust_max: f64,
    pub exhaust_velocity: f64,
}

/// A fully nondimensionalized mission definition.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub units: UnitSystem,
    /// gravitational parameter, canonical (normalized to 1)
    pub mu: f64,
    pub t0: f64,
    pub tf: f64,
    pub r0: Vector3<f64>,
    pub v0: Vector3<f64>,
    /// initial mass, MU
    pub m0: f64,
    pub rf: Vector3<f64>,
    pub vf: Vector3<f64>,
    /// maximum thrust, canonical force
    pub thrust_max: f64,
    /// exhaust velocity c = Isp·g0, VU
    pub exhaust_velocity: f64,
    /// specific impulse, seconds (kept for reporting)
    pub isp: f64,
}

impl Scenario {
    pub fn flight_time(&self) -> f64 {
        self.tf - self.t0
    }

    /// Marching step bound from a fraction of the flight time
    /// (the mission default is 0.0005).
    pub fn h_max(&self, frac: f64) -> f64 {
        frac * self.flight_time()
    }

    pub fn dyn_params(&self) -> crate::dynamics::DynParams {
        crate::dynamics::DynParams {
            mu: self.mu,
            thrust_max: self.thrust_max,
            exhaust_velocity: self.exhaust_velocity,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioConfig {
    #[allow(dead_code)]
    mu_km3_s2: f64,
    g0_m_s2: f64,
    #[serde(rename = "LU_km")]
    lu_km: f64,
    #[serde(rename = "TU_s")]
    tu_s: f64,
    #[serde(rename = "MU_kg")]
    mu_kg: f64,
    m0_kg: f64,
    #[serde(rename = "Tmax_N")]
    tmax_n: f64,
    #[serde(rename = "Isp_s")]
    isp_s: f64,
    depart_epoch: Option<String>,
    arrive_epoch: Option<String>,
    tof_days: Option<f64>,
    #[serde(rename = "r0_LU")]
    r0_lu: [f64; 3],
    #[serde(rename = "v0_VU")]
    v0_vu: [f64; 3],
    #[serde(rename = "rf_LU")]
    rf_lu: [f64; 3],
    #[serde(rename = "vf_VU")]
    vf_vu: [f64; 3],
}

fn parse_epoch(s: &str) -> Result<chrono::NaiveDate, ScenarioError> {
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| ScenarioError::BadEpoch(s.to_string()))
}

/// Load a scenario from a JSON document and nondimensionalize it.
///
/// Flight time comes from `tof_days` when present, otherwise from the
/// civil-calendar day difference of the two epochs (x 86400 s, no leap
/// seconds). mu is normalized to exactly 1; t0 is 0.
pub fn load_scenario(json: &str) -> Result<Scenario, ScenarioError> {
    let cfg: ScenarioConfig =
        serde_json::from_str(json).map_err(|e| ScenarioError::Parse(e.to_string()))?;

    if !(cfg.m0_kg > 0.0) {
        return Err(ScenarioError::NonPositive("initial mass"));
    }
    if !(cfg.tmax_n > 0.0) {
        return Err(ScenarioError::NonPositive("maximum thrust"));
    }
    if !(cfg.isp_s > 0.0) {
        return Err(ScenarioError::NonPositive("specific impulse"));
    }
    if !(cfg.mu_km3_s2 > 0.0) {
        return Err(ScenarioError::NonPositive("gravitational parameter"));
    }

    let units = UnitSystem::from_lu_tu_mu(cfg.lu_km, cfg.tu_s, cfg.mu_kg, cfg.g0_m_s2)?;

    let tof_days = match (cfg.tof_days, &cfg.depart_epoch, &cfg.arrive_epoch) {
        (Some(d), _, _) => d,
        (None, Some(dep), Some(arr)) => {
            let d0 = parse_epoch(dep)?;
            let d1 = parse_epoch(arr)?;
            (d1 - d0).num_days() as f64
        }
        _ => return Err(ScenarioError::MissingFlightTime),
    };
    let tf = units.to_canonical(tof_days * SECONDS_PER_DAY, Unit::Time);
    if !(tf > 0.0) {
        return Err(ScenarioError::BadWindow { t0: 0.0, tf });
    }

    // c = Isp·g0 [m/s] -> km/s -> VU
    let c_km_s = cfg.isp_s * cfg.g0_m_s2 * 1.0e-3;

    Ok(Scenario {
        units,
        mu: 1.0,
        t0: 0.0,
        tf,
        r0: Vector3::from(cfg.r0_lu),
        v0: Vector3::from(cfg.v0_vu),
        m0: units.to_canonical(cfg.m0_kg, Unit::Mass),
        rf: Vector3::from(cfg.rf_lu),
        vf: Vector3::from(cfg.vf_vu),
        thrust_max: units.to_canonical(cfg.tmax_n, Unit::Force),
        exhaust_velocity: units.to_canonical(c_km_s, Unit::Velocity),
        isp: cfg.isp_s,
    })
}

pub fn load_scenario_file<P: AsRef<Path>>(path: P) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    load_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) const TABLE_JSON: &str = r#"{
        "mu_km3_s2": 1.327124e11,
        "g0_m_s2": 9.80655,
        "LU_km": 1.495979e8,
        "TU_s": 5.022643e6,
        "MU_kg": 25.0,
        "m0_kg": 25.0,
        "Tmax_N": 1.5e-3,
        "Isp_s": 3000.0,
        "depart_epoch": "2020-10-01",
        "arrive_epoch": "2023-12-01",
        "r0_LU": [1.001367, 0.140622, -6.594513e-6],
        "v0_VU": [-0.155386, 0.986258, -4.827818e-5],
        "rf_LU": [-1.044138, -0.122918, -0.018183],
        "vf_VU": [0.222668, -0.875235, 0.051944]
    }"#;

    #[test]
    fn loads_mission_table() {
        let sc = load_scenario(TABLE_JSON).unwrap();
        assert_eq!(sc.mu, 1.0);
        assert_eq!(sc.m0, 1.0);
        assert_relative_eq!(sc.r0.x, 1.001367);
        assert_relative_eq!(sc.r0.y, 0.140622);
        // printed with a doubled minus sign in the source table; adopted as a
        // single negative
        assert_relative_eq!(sc.r0.z, -6.594513e-6);
        assert_relative_eq!(sc.vf.z, 0.051944);
    }

    #[test]
    fn calendar_window_is_1156_days() {
        let sc = load_scenario(TABLE_JSON).unwrap();
        let expect = 1156.0 * 86400.0 / 5.022643e6;
        assert_relative_eq!(sc.flight_time(), expect, max_relative = 1e-14);
        assert_relative_eq!(sc.flight_time(), 19.8855, max_relative = 1e-5);

        // explicit tof_days must agree with the epoch pair
        let json = TABLE_JSON.replace(
            "\"depart_epoch\": \"2020-10-01\",\n        \"arrive_epoch\": \"2023-12-01\",",
            "\"tof_days\": 1156.0,",
        );
        let sc2 = load_scenario(&json).unwrap();
        assert_eq!(sc.tf, sc2.tf);
    }

    #[test]
    fn zero_isp_is_rejected() {
        let json = TABLE_JSON.replace("\"Isp_s\": 3000.0", "\"Isp_s\": 0.0");
        let err = load_scenario(&json).unwrap_err();
        assert_eq!(err.to_string(), "non-positive specific impulse");
    }

    #[test]
    fn thrust_nondimensionalization() {
        let sc = load_scenario(TABLE_JSON).unwrap();
        // direct evaluation: Tmax / (MU·LU/TU²)
        let force_unit = 25.0 * 1.495979e11 / (5.022643e6f64 * 5.022643e6);
        assert_relative_eq!(sc.thrust_max, 1.5e-3 / force_unit, max_relative = 1e-14);
        assert_relative_eq!(sc.thrust_max, 1.0118e-2, max_relative = 1e-4);
    }

    #[test]
    fn exhaust_velocity_nondimensionalization() {
        let sc = load_scenario(TABLE_JSON).unwrap();
        let c_km_s = 3000.0 * 9.80655e-3;
        assert_relative_eq!(c_km_s, 29.41965, max_relative = 1e-12);
        assert_relative_eq!(
            sc.exhaust_velocity,
            c_km_s / (1.495979e8 / 5.022643e6),
            max_relative = 1e-14
        );
        assert_relative_eq!(sc.exhaust_velocity, 0.98775, max_relative = 1e-4);
    }

    #[test]
    fn unit_definitions() {
        let sc = load_scenario(TABLE_JSON).unwrap();
        let u = sc.units;
        assert_relative_eq!(u.to_canonical(1.495979e8, Unit::Length), 1.0);
        // one canonical velocity in km/s; the mission table prints 29.784692,
        // consistent with LU/TU only to its own print precision
        assert_relative_eq!(
            u.from_canonical(1.0, Unit::Velocity),
            29.784692,
            max_relative = 2e-6
        );
        assert_relative_eq!(u.from_canonical(0.84248, Unit::Mass), 21.062, max_relative = 1e-12);
    }

    #[test]
    fn velocity_unit_consistency_is_enforced() {
        let err = UnitSystem::new(1.495979e8, 5.022643e6, 30.0, 25.0, 9.80655).unwrap_err();
        assert!(matches!(err, ScenarioError::InconsistentVelocityUnit { .. }));
        UnitSystem::new(1.0, 2.0, 0.5, 3.0, 9.8).unwrap();
    }

    #[test]
    fn unit_tag_parsing() {
        assert_eq!("force".parse::<Unit>().unwrap(), Unit::Force);
        let err = "charge".parse::<Unit>().unwrap_err();
        assert_eq!(err.to_string(), "unknown unit tag \"charge\"");
    }

    proptest! {
        #[test]
        fn canonical_round_trip(
            value in -1e6f64..1e6f64,
            tag in prop_oneof![
                Just(Unit::Length), Just(Unit::Time), Just(Unit::Velocity),
                Just(Unit::Mass), Just(Unit::Force), Just(Unit::Acceleration)
            ],
        ) {
            let u = UnitSystem::from_lu_tu_mu(1.495979e8, 5.022643e6, 25.0, 9.80655).unwrap();
            let back = u.from_canonical(u.to_canonical(value, tag), tag);
            prop_assert!((back - value).abs() <= 1e-14 * value.abs().max(1e-300));
        }
    }
}
