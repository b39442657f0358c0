pub mod baselines;
pub mod clothoid;
pub mod config;
pub mod demo;
pub mod error;
pub mod eval;
pub mod expert;
pub mod interp;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod policy;
pub mod promp;
pub mod serve;
pub mod sim;
pub mod track;
pub mod turing;
pub mod vehicle;

pub use error::{Error, Result};
