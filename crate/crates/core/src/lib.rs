pub mod data;
pub mod em;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod net;
pub mod train;

pub use error::{ApenError, Result};
