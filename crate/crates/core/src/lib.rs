//! Alignment-free guided depth super-resolution by multi-order matching.
//!
//! The pipeline encodes a low-resolution depth map and a misaligned
//! high-resolution RGB image into feature maps, repeatedly retrieves the
//! RGB patches that best match each depth patch in raw, gradient and
//! Hessian space, gates them with a Hessian-eigenvalue structure detector,
//! fuses them into the depth stream and finally predicts a residual over
//! bicubic upsampling.
//!
//! Modules, bottom up:
//! - [`grid`]: feature/depth containers, patches, convolution, resampling,
//!   pixel shuffle and Netpbm I/O.
//! - [`diffops`]: gradient magnitude, Hessian field/norm, eigenvalues.
//! - [`matcher`]: correlation, top-k retrieval, matching selection.
//! - [`structdet`]: structure descriptor and gated refinement.
//! - [`fusion`]: encoders, aggregation step, reconstruction, full pipeline.
//! - [`losses`]: reconstruction, gradient and Hessian losses; RMSE; noise.
//! - [`trainer`]: finite-difference fitting of the small parameter set.
//! - [`scene`]: procedural RGB-D scenes with controlled misalignment.

pub mod diffops;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod losses;
pub mod matcher;
pub mod scene;
pub mod structdet;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{DepthMap, FeatureMap, RgbImage};
