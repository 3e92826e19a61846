//! Dense 64-bit tensor kernel with reverse-mode automatic differentiation.
//!
//! Everything the topic-routing network needs is here: affine maps, 1-D
//! convolution, LeakyReLU / sigmoid / softmax / global max pooling, a fused
//! state-space scan, and a recording [`Tape`] that composes per-op backward
//! functions. Gradients are verified against central finite differences via
//! [`check::grad_check`]; no external differentiation dependency is used.
//!
//! All ops are deterministic and pure over immutable inputs. The tape is
//! confined to one thread at a time.

pub mod check;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, DEFAULT_GRAD_CHECK_EPS};
pub use tape::{Padding, Tape, ValueId};
pub use tensor::{NumericsError, Tensor};
