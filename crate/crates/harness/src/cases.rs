//! Perturbation case definitions: initial-state scalings of a fixed base
//! vector, terminal-position cube vertices, and thrust-magnitude offsets.

use crate::HarnessError;
use mpsp_core::continuation::BoundaryConditions;
use mpsp_core::scenario::Scenario;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Base perturbation of the initial state, scaled by the case multiplier:
/// first three components position (LU), last three velocity (VU).
pub const BASE_DELTA_X0: [f64; 6] = [
    1.6712e-2, -1.0659e-2, -4.1460e-2, 1.0876e-2, 2.3763e-2, 4.6091e-2,
];

/// Terminal-position cube half side, LU.
pub const TERMINAL_HALF_SIDE_LU: f64 = 0.02;

/// Initial-state case multipliers, in table order.
pub const INITIAL_KAPPAS: [f64; 9] = [-3.0, -2.5, -2.0, -1.0, 1.0, 2.0, 2.5, 3.0, 3.5];

/// Thrust-offset percentages, in table order.
pub const THRUSTER_ETAS: [f64; 6] = [-10.0, -6.0, -3.0, 3.0, 6.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseSpec {
    /// x0 + kappa * BASE_DELTA_X0
    InitialState { kappa: f64 },
    /// rf offset to one cube vertex; each sign is +1 or -1
    TerminalPosition { vertex: [i8; 3] },
    /// T_max scaled by (1 + eta/100)
    Thruster { eta_percent: f64 },
}

impl CaseSpec {
    pub fn id(&self) -> String {
        match self {
            CaseSpec::InitialState { kappa } => format!("initial_{kappa:+.2}"),
            CaseSpec::TerminalPosition { vertex } => {
                let s = vertex
                    .iter()
                    .map(|&v| if v > 0 { 'p' } else { 'm' })
                    .collect::<String>();
                format!("terminal_{s}")
            }
            CaseSpec::Thruster { eta_percent } => format!("thruster_{eta_percent:+.1}pct"),
        }
    }

    /// Parse the CLI shorthand: `initial:-2.5`, `terminal:+--`, `thruster:-10`.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let bad = || HarnessError::BadCaseSpec(s.to_string());
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "initial" => Ok(CaseSpec::InitialState {
                kappa: arg.parse().map_err(|_| bad())?,
            }),
            "terminal" => {
                let signs: Vec<i8> = arg
                    .chars()
                    .map(|c| match c {
                        '+' | 'p' => Ok(1),
                        '-' | 'm' => Ok(-1),
                        _ => Err(bad()),
                    })
                    .collect::<Result<_, _>>()?;
                let vertex: [i8; 3] = signs.try_into().map_err(|_| bad())?;
                Ok(CaseSpec::TerminalPosition { vertex })
            }
            "thruster" => Ok(CaseSpec::Thruster {
                eta_percent: arg.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }

    /// Short human column for sweep summaries.
    pub fn param_label(&self) -> String {
        match self {
            CaseSpec::InitialState { kappa } => format!("kappa={kappa}"),
            CaseSpec::TerminalPosition { vertex } => format!(
                "vertex=({},{},{})",
                vertex[0], vertex[1], vertex[2]
            ),
            CaseSpec::Thruster { eta_percent } => format!("eta={eta_percent}%"),
        }
    }
}

/// Perturbed boundary conditions of a case.
pub fn build_case(spec: &CaseSpec, sc: &Scenario) -> BoundaryConditions {
    let mut c = BoundaryConditions::reference(sc);
    match spec {
        CaseSpec::InitialState { kappa } => {
            for i in 0..3 {
                c.r0[i] += kappa * BASE_DELTA_X0[i];
                c.v0[i] += kappa * BASE_DELTA_X0[3 + i];
            }
        }
        CaseSpec::TerminalPosition { vertex } => {
            let d = Vector3::new(
                vertex[0] as f64 * TERMINAL_HALF_SIDE_LU,
                vertex[1] as f64 * TERMINAL_HALF_SIDE_LU,
                vertex[2] as f64 * TERMINAL_HALF_SIDE_LU,
            );
            c.rf += d;
        }
        CaseSpec::Thruster { eta_percent } => {
            c.thrust_max *= 1.0 + eta_percent / 100.0;
        }
    }
    c
}

/// The 9 initial-state cases.
pub fn table3_suite() -> Vec<CaseSpec> {
    INITIAL_KAPPAS
        .iter()
        .map(|&kappa| CaseSpec::InitialState { kappa })
        .collect()
}

/// The 8 terminal cube-vertex cases, in table order.
pub fn table4_suite() -> Vec<CaseSpec> {
    let mut out = Vec::with_capacity(8);
    for &sx in &[1i8, -1] {
        for &sy in &[1i8, -1] {
            for &sz in &[1i8, -1] {
                out.push(CaseSpec::TerminalPosition {
                    vertex: [sx, sy, sz],
                });
            }
        }
    }
    out
}

/// The 6 thrust-offset cases.
pub fn table5_suite() -> Vec<CaseSpec> {
    THRUSTER_ETAS
        .iter()
        .map(|&eta_percent| CaseSpec::Thruster { eta_percent })
        .collect()
}

pub fn suite_by_name(name: &str) -> Result<Vec<CaseSpec>, HarnessError> {
    match name {
        "table3" => Ok(table3_suite()),
        "table4" => Ok(table4_suite()),
        "table5" => Ok(table5_suite()),
        other => Err(HarnessError::BadSuite(other.to_string())),
    }
}
