//! Motion-language representation learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`]: 6D rotations, the 22-joint kinematic tree, forward kinematics.
//! * [`data`]: motion clips, frame-rate normalisation, span masking, batching,
//!   file formats and the procedural synthetic benchmark.
//! * [`nn`]: tensors, a reverse-mode tape, layers, Adam, the cosine schedule
//!   and the binary checkpoint format.
//! * [`motion`] / [`text`]: the two transformer encoders.
//! * [`objectives`]: masked-motion loss and the contrastive loss with
//!   auxiliary reconstruction.
//! * [`train`]: training stages, recognition / retrieval evaluation and the
//!   ablation grid.

pub mod data;
pub mod error;
pub mod geom;
pub mod model;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod text;
pub mod train;

pub use error::{Error, Result};

/// Number of skeleton joints.
pub const NUM_JOINTS: usize = 22;
/// Scalars per joint rotation.
pub const ROT_DIM: usize = 6;
/// Scalars per frame (`NUM_JOINTS * ROT_DIM`).
pub const FRAME_DIM: usize = NUM_JOINTS * ROT_DIM;
/// Canonical frame rate after normalisation.
pub const TARGET_FPS: f64 = 30.0;
/// Maximum clip length in frames (5 s at 30 fps).
pub const MAX_FRAMES: usize = 150;
