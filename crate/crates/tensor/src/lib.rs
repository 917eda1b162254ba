//! Deterministic tensor engine: dense tensors generic over the scalar type,
//! a reverse-mode autodiff tape, AdamW, and purpose-labelled RNG streams.
//!
//! ```
//! use par_tensor::{Tape, Tensor64};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor64::new(&[2], vec![1.0, 2.0]).unwrap(), true);
//! let loss = x.square().unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use kernels::Boundary;
pub use optim::{AdamW, OptimizerState};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{Purpose, RngStream};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
