//! Dense ordinal regression for 3D hand keypoints from single depth crops.
//!
//! A scalar coordinate is not regressed directly. Each axis is covered by a
//! well-ordered set of thresholds and the network predicts, densely over the
//! feature grid, the probability that a joint coordinate exceeds each
//! threshold. Soft-summing those probabilities against the interval lengths
//! recovers the coordinate; averaging over the spatial replicates makes the
//! estimate robust. The crate contains the whole pipeline at desk scale:
//!
//! - [`geometry`]: image extents, UV coordinate planes, depth normalization.
//! - [`grid`]: uniform in-plane grids and the center-dense depth grid.
//! - [`codec`]: ground-truth binary map encoding and soft decoding.
//! - [`tensor`] / [`net`]: a small f64 tensor type, a reverse-mode tape, and
//!   the convolutional encoder with ordinal or offset heads.
//! - [`losses`]: dense ordinal (binary cross-entropy) and smooth-L1 joint
//!   losses with their weighted total.
//! - [`data`]: synthetic depth-hand generator, corruptions, on-disk datasets.
//! - [`train`] / [`eval`] / [`bench`]: AdamW training loop, metrics, and the
//!   ablation matrix harness.
//! - [`cli`]: the `ordpose` command-line interface.

pub mod bench;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
