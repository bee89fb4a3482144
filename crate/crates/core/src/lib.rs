pub mod error;
pub mod gamma;
pub mod glm;
pub mod iv;
pub mod linalg;
pub mod panel;
pub mod quantile;
pub mod pfs;
pub mod pipeline;
pub mod regress;
pub mod spi;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
