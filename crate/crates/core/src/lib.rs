pub mod analysis;
pub mod backbone;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod model;
pub mod params;
pub mod train;
pub mod windowing;

pub use error::{LimmError, Result};
