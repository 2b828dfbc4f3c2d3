//! Rasters, sensor mosaics, preprocessing, synthetic data, calibration and
//! verification for gridded precipitation nowcasting.

pub mod calibrate;
pub mod error;
pub mod geogrid;
pub mod mosaic;
pub mod pipeline;
pub mod synthdata;
pub mod verify;

pub use error::{Error, Result};
