pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixture;
pub mod models;
pub mod pipeline;
pub mod synth;

pub use error::{Result, TaseError};
