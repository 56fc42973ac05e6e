//! Adaptive Wing loss for heatmap regression.
//!
//! The crate covers the whole pipeline of a heatmap-based landmark
//! localizer at desk scale:
//!
//! - [`heatmap`]: Gaussian rendering, quarter-pixel decoding, pixel classes
//!   and the binary/text file formats.
//! - [`losses`]: MSE, L1, Wing and Adaptive Wing with analytic gradients.
//! - [`loss_map`]: the dilation-based weighted loss map.
//! - [`coords`]: X/Y/radius and boundary-masked coordinate channels.
//! - [`boundary`]: boundary lines from landmarks via a distance transform.
//! - [`metrics`]: NME, failure rate, CED/AUC and PCK.
//! - [`trainer`]: a tiny convolutional regressor with hand-written
//!   backpropagation and the synthetic data it trains on.
//! - [`cli`]: the `awing` command-line front end.

pub mod boundary;
pub mod cli;
pub mod coords;
pub mod error;
pub mod heatmap;
pub mod io;
pub mod loss_map;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
pub use heatmap::{Frame, HeatmapStack, LandmarkSet, Visibility};
pub use losses::{LossKind, LossParams, LossSurface};
