#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod align;
pub mod auxbranch;
pub mod checkpoint;
pub mod config;
pub mod coordatt;
pub mod detect;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
