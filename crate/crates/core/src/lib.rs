#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod gat;
pub mod graph_build;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod ssm;
pub mod survival;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
