//! Desk-scale multi-task learning workbench for monocular satellite pose
//! estimation.
//!
//! The pipeline end to end:
//!
//! 1. **Scene synthesis** ([`model`], [`render`], [`dataset`]) — a stand-in
//!    satellite mesh rendered with a z-buffer rasterizer into small grayscale
//!    images with full ground truth (pose, 18 keypoints, box, mask).
//! 2. **Network** ([`tape`], [`net`]) — a reverse-mode autodiff engine and a
//!    micro convolutional trunk with four toggleable heads: direct pose (P),
//!    keypoint heatmaps (H), bounding box (B), segmentation (S).
//! 3. **Losses and balancing** ([`losses`], [`balance`]) — pose loss, C-IoU,
//!    pixel MSE, combined under EW / RLW / DWA / GradNorm task weighting.
//! 4. **Pose recovery** ([`heatmap`], [`pnp`]) — Gaussian heatmap decoding
//!    and DLT + Levenberg-Marquardt PnP for the indirect pose path.
//! 5. **Experiments** ([`harness`]) — training loop, task-set x strategy
//!    matrix, median/IQR scoring, and percent-change reports.

pub mod balance;
pub mod dataset;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod net;
pub mod pnp;
pub mod render;
pub mod tape;
pub mod tensorfile;

mod util;
