//! Run-directory orchestration for the `bridgekit` command: configuration,
//! fingerprinted artifacts, resumable stages and exit-code classes.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{Context, InferenceOverrides, StageOutcome, TrainOptions};
pub use run::{RunDir, StageId};
