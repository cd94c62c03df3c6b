//! Adaptive token dictionary restoration transformer, from first principles.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`ops`], [`conv`], [`attention`]: a small
//!   dense tensor with reverse-mode differentiation and the primitives the
//!   network needs.
//! * [`dictionary`]: the learnable token dictionary and token-dictionary
//!   cross-attention with the dictionary-size-aware softmax scale.
//! * [`categorize`]: content-adaptive token grouping and category-based
//!   multi-head self-attention.
//! * [`window`]: shifted-window self-attention.
//! * [`cffn`]: the category-aware feed-forward network.
//! * [`model`], [`checkpoint`]: network assembly and the `ATDC` file format.
//! * [`sparse_coding`]: a classical ISTA lasso reference.
//! * [`image`], [`metrics`]: PNG I/O, bicubic resampling, PSNR and SSIM.
//! * [`train`], [`gradcheck`]: AdamW training and finite-difference checks.
//! * [`bench`]: category attention against global attention, FLOPs and time.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod categorize;
pub mod cffn;
pub mod checkpoint;
pub mod conv;
pub mod dictionary;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod sparse_coding;
pub mod tensor;
#[cfg(test)]
mod test_util;
pub mod train;
pub mod window;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use image::Image;
pub use model::{AtdModel, Branches, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
