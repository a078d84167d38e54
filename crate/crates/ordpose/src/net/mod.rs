//! Differentiable tensor core, the convolutional encoder, and the
//! prediction heads that turn feature maps into joint coordinates.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod tape;

pub use model::{ForwardPass, HeadConfig, HeadKind, Model, ModelConfig, ProbIds};
pub use tape::{Gradients, Tape, ValueId};
