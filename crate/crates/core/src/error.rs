//! Error type shared across the solver crates.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unisolvency failure at node {node}: {detail}")]
    Unisolvency { node: usize, detail: String },

    #[error("assembly failure: {0}")]
    Assembly(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("refinement did not terminate: {0}")]
    RefinementStalled(String),

    #[error("time integration failed: {0}")]
    TimeIntegration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
