//! MeanFlow training through forward-mode JVP targets and few-step samplers,
//! including the three-stage, two-evaluation HybridFlow sampler, evaluated on
//! synthetic conditional tasks with closed-form velocity oracles.

pub mod clock;
pub mod error;
pub mod flowcore;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod numkit;
pub mod samplers;
pub mod tasks;

pub use error::{Error, Result};
