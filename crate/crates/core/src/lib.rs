pub mod checkpoint;
pub mod colmap;
pub mod cscm;
pub mod cvpm;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod raster;
pub mod scene;
pub mod synth;
#[doc(hidden)]
pub mod testing;
pub mod train;

pub use error::{Error, Result};
