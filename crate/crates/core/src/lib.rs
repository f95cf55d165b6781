//! Rigid point cloud registration built around learned correspondences.
//!
//! The pipeline extracts per-point graph features, sharpens them with
//! self attention, exchanges information between the two clouds with
//! cross attention, selects keypoints and candidate matches from a score
//! matrix, forms virtual corresponding points as convex combinations of
//! candidates, and solves for the rigid motion in closed form via SVD.
//! Everything trainable runs on a small reverse-mode tape ([`numeric`])
//! so gradients are exact and the whole stack stays dependency-light and
//! deterministic: same seed, same bytes out.
//!
//! Crate layout:
//! - [`numeric`]: tensors, the autodiff graph, MLPs, checkpoints, FD checks
//! - [`geometry`]: transforms, Euler conventions, sampling, metrics
//! - [`features`]: graph-based per-point feature extraction
//! - [`attention`]: self attention, cross attention, score matrix
//! - [`correspondence`]: keypoint/candidate selection, soft pointer, SVD solve
//! - [`losses`]: correspondence / transformation / combined / triplet losses
//! - [`pretrain`]: self-supervised feature pre-training on synthetic pairs
//! - [`data`]: point cloud types, file formats, benchmark pair protocols
//! - [`baseline`]: classical ICP for comparison and refinement
//! - [`pipeline`]: the assembled network, training loop and benchmark runner

pub mod attention;
pub mod baseline;
pub mod correspondence;
pub mod data;
pub mod error;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod numeric;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};
