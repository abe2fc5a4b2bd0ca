//! Dense geometry toolkit for two-frame depth, optical flow and scene flow.
//!
//! The crate covers the full loop from synthetic data to evaluated estimates:
//!
//! 1. render an oracle scene with exact ground truth ([`scene`]),
//! 2. triangulate per-pixel depth from optical flow and camera motion in
//!    closed form ([`triangulate`]),
//! 3. warp images and fields with occlusion reasoning ([`sampler`]),
//! 4. score estimates with a photometric / smoothness / consistency loss
//!    stack ([`loss`]),
//! 5. refine per-pixel log-depth and scene flow by first-order descent with
//!    analytic gradients ([`optim`]),
//! 6. evaluate with standard depth, flow and scene-flow metrics
//!    ([`metrics`]),
//! 7. persist everything in simple binary tensors, 16-bit PNGs and flat text
//!    records ([`io`]).
//!
//! # Conventions
//!
//! * Pixel centers sit at integer coordinates, origin at the top-left pixel
//!   center, x right, y down.
//! * Depth is the positive z-coordinate in the camera frame, in meters.
//! * Optical flow maps frame-t pixels to frame-t+1 positions in pixels.
//! * Scene flow is the 3D motion of the observed point in meters, expressed
//!   in the frame-t camera coordinates (backward fields mirror this in the
//!   frame-t+1 camera).
//! * Pose transforms map frame-t camera coordinates of a static point to
//!   frame-t+1 camera coordinates.
//! * Masks are `true` where a pixel is usable; reductions over masked means
//!   report the live pixel count.
//! * All dense math runs in `f64` with fixed-order reductions, so results
//!   are reproducible bit for bit.
//!
//! # Examples
//!
//! Each capability has a runnable example:
//!
//! ```text
//! cargo run --release -p drift --example render_scene
//! cargo run --release -p drift --example triangulate_depth
//! cargo run --release -p drift --example warp_and_photometric
//! cargo run --release -p drift --example occlusion_masks
//! cargo run --release -p drift --example loss_stack
//! cargo run --release -p drift --example variational_depth
//! cargo run --release -p drift --example sceneflow_ablation
//! cargo run --release -p drift --example evaluate_metrics
//! cargo run --release -p drift --example tensor_and_png_io
//! ```
//!
//! The `drift` binary wraps the same library calls behind `gen`,
//! `triangulate`, `masks`, `losses`, `optimize`, `eval` and `selftest`
//! subcommands for file-driven pipelines.

pub mod cli;
pub mod error;
pub mod field;
pub mod geom;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod sampler;
pub mod scene;
pub mod selftest;
pub mod triangulate;

pub use error::DriftError;
pub use field::{DepthMap, Field, FlowField, Image, MaskMap, NormalMap, SceneFlowField};
pub use geom::{Intrinsics, PoseTransform};

/// Smallest admissible z-coordinate (meters) when projecting; anything at or
/// below counts as behind the camera.
pub const EPSILON_Z: f64 = 1e-6;

/// Depth slack (meters) for the oracle's visibility depth test.
pub const EPSILON_OCC: f64 = 1e-4;

/// Parallax threshold below which triangulation is numerically meaningless.
pub const TAU_PARALLAX: f64 = 1e-6;

/// Relative occlusion-check coefficient of the forward-backward criterion.
pub const OCC_ALPHA1: f64 = 0.01;

/// Absolute occlusion-check offset in squared pixels.
pub const OCC_ALPHA2: f64 = 0.5;

/// SSIM-vs-L1 blend for the photometric loss.
pub const ALPHA_SSIM: f64 = 0.85;

/// Huber transition point (meters) for supervised depth.
pub const HUBER_BETA: f64 = 1.0;

/// Dead zone for the derivative of |t|: inside it the zero subgradient is
/// chosen, so last-ulp residuals on ground truth do not excite L1 terms.
pub const L1_GRAD_DEADZONE: f64 = 1e-12;
