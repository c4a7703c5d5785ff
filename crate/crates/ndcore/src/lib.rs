//! Minimal differentiable compute for small convolutional models on CPU.
//!
//! - [`Tensor`]: dense row-major storage, generic over `f32`/`f64`.
//! - [`Tape`]: reverse-mode differentiation of the ops the models need
//!   (convolutions, linear, group norm, SiLU, resizing, channel mixing).
//! - [`layers`]: parameterized layers whose weights live in a
//!   [`ParameterTree`], so frozen and trainable sets can be split by name.
//! - [`OptimizerState`]: Adam with bias correction.
//! - [`gradcheck`]: central finite differences.
//! - [`container`]: the tensor container file format.

pub mod adam;
pub mod container;
pub mod conv;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, OptimizerState};
pub use container::Container;
pub use error::{NdError, Result};
pub use float::Float;
pub use layers::{Backprop, Layer, LayerStack};
pub use param::{Parameter, ParameterTree};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
