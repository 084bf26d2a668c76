pub mod cli;
pub mod closed_loop;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod rsc;
pub mod tasks;
pub mod tensor;
pub mod vfn;

pub use error::{Error, Result};
