//! Trace semantics, bounded verification, and constraint-guided synthesis of
//! mappings between event-structured models.
//!
//! The crate is organized bottom-up:
//!
//! * [`semantics`] defines labels, events, traces, and processes, together
//!   with plain and mapping-mediated parallel composition.
//! * [`machine`] defines guarded state machines, their unfolding into
//!   processes, and a product construction that composes machines without
//!   materializing each operand's full behavior.
//! * [`verify`] checks trace properties against bounded behaviors and
//!   verifies mappings and mapping constraints.
//! * [`constraint`] represents mapping constraints symbolically, enumerates
//!   the mappings they denote, and enumerates candidate constraints from a
//!   grammar.
//! * [`synth`] searches the candidate space for a valid constraint and
//!   generalizes it to a weakest valid strengthening of the search space.
//! * [`studies`] builds the bundled case studies: a two-channel write model
//!   and two web authorization protocols.
//! * [`model`] parses and prints the textual model format used by the CLI.

pub mod constraint;
pub mod machine;
pub mod model;
pub mod semantics;
pub mod studies;
pub mod synth;
pub mod verify;
