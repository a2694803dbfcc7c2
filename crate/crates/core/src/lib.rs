//! Ahead-of-time compiler from a JSON neural-network description to
//! self-contained C99.
//!
//! The pipeline: [`model_format`] parses the model, [`frontend`] converts it
//! to the dataflow IR in [`hir`], [`accel`] assigns ops to registered
//! accelerators, [`tir`] lowers the rest to loop nests, [`planner`] packs
//! intermediates into one arena and [`emit`] writes the C tree. [`interp`]
//! is the numerical reference for every stage and [`driver`] wires the
//! stages together.

pub mod accel;
pub mod driver;
pub mod emit;
pub mod exec;
pub mod frontend;
pub mod hir;
pub mod interp;
pub mod model_format;
pub mod planner;
pub mod tir;
pub mod zoo;
