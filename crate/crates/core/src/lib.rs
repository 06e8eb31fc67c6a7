//! Pre-training target generation and centroid-heatmap detection tooling for
//! fluorescence microscopy images.
//!
//! The crate is organised around a handful of pure building blocks:
//!
//! * [`model`] and [`io`]: raster and annotation types plus their file formats
//!   (PFM, PNG, TIFF, JSON).
//! * [`pseudocolor`]: colormap lookup and perceived-brightness analysis.
//! * [`masking`]: padded and MAE-style binary masks.
//! * [`codec`]: annotations to heatmap/size-map targets and back to boxes.
//! * [`metrics`]: SSIM, heatmap mIoU, COCO-style AP and the training losses.
//! * [`context`]: adjacent-slice triplets and the context block forward pass.
//! * [`preprocess`] and [`synth`]: median/min-max preprocessing and a
//!   synthetic cell image generator.
//! * [`pipeline`]: batch commands composing the above over directories.

pub mod codec;
pub mod context;
pub mod dataset;
pub mod error;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod pseudocolor;
pub mod synth;

pub use error::{Error, Result};
pub use model::{CellAnnotation, Detection, GrayImage, RgbImage, TargetMaps, VolumeStack};
