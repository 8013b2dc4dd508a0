//! Finite-size analysis and simulation of sending-or-not-sending twin-field QKD.
//!
//! The pipeline runs from category-resolved detection counts through decoy
//! estimation ([`decoy`]), odd-parity pairing ([`aopp`]) and the final key
//! rate ([`keyrate`]). [`bounds`] gives the repeaterless and single-repeater
//! capacities to compare against, and [`montecarlo`] simulates the whole link
//! photon by photon.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aopp;
pub mod bounds;
pub mod decoy;
pub mod error;
pub mod finitestats;
pub mod io;
pub mod keyrate;
pub mod model;
pub mod montecarlo;

pub use error::{Error, Result};
pub use finitestats::{binary_entropy, bound_expected, hbar, BoundedValue, Chernoff, Direction};
pub use model::{
    synthesize_pattern, transmissivities, validate_params, ArmSplit, Basis, Category,
    DetectorParams, EncodedPattern, LinkBudget, Party, ProtocolParams, PulseClass, PulsePair,
    SecurityParams, SideParams, Transmissivities, ValidationReport,
};
