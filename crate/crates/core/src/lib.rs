//! Closed-form knowledge editing on synthetic linear associative memories.
//!
//! The crate builds multi-layer linear memories with controllable key
//! geometry, solves constrained least-squares weight edits, diagnoses
//! spectral suppression of protected keys, and refines edit targets with a
//! look-ahead meta-optimizer that differentiates through the solver's
//! closed form.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fidelity;
pub mod harness;
pub mod linalg;
pub mod memory_model;
pub mod meta_opt;
pub mod solvers;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use memory_model::{gen_model, GeometryConfig, LayerMemory, SyntheticModel};
pub use meta_opt::{metake_run, EditRequest, MetaParams, MetaTrace, StructuralGate};
pub use solvers::{solve_closed_form, solve_multilayer, AllocationScheme};
