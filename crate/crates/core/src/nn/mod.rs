//! Minimal f64 tensor and reverse-mode autograd engine for 3D networks.

pub(crate) mod conv;
pub mod norm;
pub mod params;
mod tape;
mod tensor;

pub use norm::{group_normalize, BatchStats};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
