//! Verification suite, experiment runner and command-line front end for
//! `opolo-core`.

pub mod cli;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod output;
pub mod verify;

pub use error::HarnessError;
pub use experiment::{run_experiment, ExperimentSpec, Summary};
pub use verify::{run_verify, VerifyOptions, VerifyReportBundle};
