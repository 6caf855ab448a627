//! Fuel-optimal bang-off-bang low-thrust transfers and MPSP re-targeting.
//!
//! The crate solves the fixed-time fuel-optimal low-thrust rendezvous problem
//! by indirect single shooting, then re-targets the stored solution under
//! perturbed boundary conditions or thruster parameters with a two-loop
//! model-predictive static programming (MPSP) scheme:
//!
//! * [`scenario`] — canonical unit system (LU/TU/VU/MU) and mission loading.
//! * [`dynamics`] — pointwise dynamics, switching function, control law.
//! * [`fourier`] — Fourier-basis control parameterization and least-squares
//!   initialization from a sampled reference control.
//! * [`propagate`] — fixed-step RK4 with bisection switching detection and
//!   evenly-gridded segment assembly.
//! * [`sensitivity`] — terminal-output Jacobians by backward recursion with
//!   analytic RK4 step Jacobians and jump compensation at switching points.
//! * [`nominal`] — indirect fuel-optimal solver (smoothing continuation plus
//!   exact-switching polish).
//! * [`mpsp`] — inner-loop Newton iteration on the basis weights and the
//!   initial mass costate, guarded by the thrust-segment count.
//! * [`continuation`] — outer-loop boundary-condition continuation with
//!   adaptive stepping and segment-tolerance escalation.
//!
//! All flight-level quantities are canonical (mu = 1) unless a name says
//! otherwise; conversions live in [`scenario::UnitSystem`].

pub mod continuation;
pub mod control;
pub mod dynamics;
pub mod fourier;
pub mod mpsp;
pub mod nominal;
pub mod propagate;
pub mod scenario;
pub mod sensitivity;

pub use continuation::{blend_conditions, outer_loop, BoundaryConditions, GuidanceSolution};
pub use control::{ControlProfile, SampledControl};
pub use dynamics::{AugmentedState, ControlValue, DynParams, FullCostate};
pub use fourier::{BasisMap, FourierWeights};
pub use mpsp::{inner_loop, ConvergenceSpec, InnerLoopResult, NewtonWeights};
pub use nominal::{solve_fuel_optimal, NominalOptions, NominalSolution};
pub use propagate::{propagate_segmented, SegmentedTrajectory, TrajectorySegment};
pub use scenario::{load_scenario, load_scenario_file, Scenario, Unit, UnitSystem};
pub use sensitivity::{accumulate, SensitivityBundle};
