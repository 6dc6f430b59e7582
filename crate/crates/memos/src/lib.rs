//! Run directories, file formats, checkpoints, timing and the `memos`
//! command line, on top of the algorithms in `memos-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod timing;

pub use config::RunConfig;
pub use error::{LabError, Result};
pub use pipeline::{Backbone, Lab, Method};
