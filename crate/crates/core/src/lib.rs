pub mod action;
pub mod error;
pub mod field;
pub mod flow_match;
pub mod io;
pub mod jet;
pub mod mlp;
pub mod node;
pub mod optim;
pub mod pdpo;
pub mod ot;
pub mod potentials;
pub mod problems;
pub mod spline;
pub mod tape;
pub mod verify;

pub use error::{Error, Result};
