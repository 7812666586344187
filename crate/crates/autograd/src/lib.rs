//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Just enough machinery for convolutional encoders, style-modulated
//! generators and latent-code networks: a define-by-run [`Tape`], a [`Var`]
//! handle with differentiable ops, and a finite-difference checker.
//!
//! ```
//! use latentswap_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2], vec![3.0, 4.0]));
//! let norm = x.square().sum().sqrt();
//! let grads = tape.backward(norm);
//! let g = grads.get(x).unwrap();
//! assert!((g.data()[0] - 0.6).abs() < 1e-12 && (g.data()[1] - 0.8).abs() < 1e-12);
//! ```

mod gemm;
pub mod gradcheck;
mod ops;
mod spatial;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradComparison};
pub use spatial::Conv2dSpec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
