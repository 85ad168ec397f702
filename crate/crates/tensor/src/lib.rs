//! Reverse-mode automatic differentiation over dense tensors, restricted to
//! the primitives of a spatio-temporal encoder/decoder saliency network.
//!
//! ```
//! use hd2s_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::new(vec![2], vec![0.0, 3.0]).unwrap());
//! let y = tape.sigmoid(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap()[0], 0.25);
//! ```

mod error;
mod gradcheck;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_scaled};
pub use ops::conv::{conv_out_extent, Conv2dSpec, Conv3dSpec};
pub use ops::norm::{BnMode, BnStats, DomainBnStats, DomainTag};
pub use ops::smooth::{gaussian_blur, gaussian_kernel1d, gaussian_kernel_side};
pub use scalar::Scalar;
pub use tape::{Backward, Gradients, Grads, Tape, Values, Var};
pub use tensor::Tensor;
