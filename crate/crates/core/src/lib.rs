//! CPU inference engine and architecture analysis toolkit for the EResFD
//! face detector.
//!
//! - [`tensor`] / [`kernels`]: NCHW tensors and convolution, pooling,
//!   upsampling and fusion kernels with naive reference paths.
//! - [`graph`]: block, backbone, SepFPN, CCPM and head builders plus the
//!   forward executor.
//! - [`cost`]: MAC/FLOP, parameter and receptive-field analysis.
//! - [`bench`]: latency microbenchmarks for layers, blocks and graphs.
//! - [`detect`]: anchors, box decoding, NMS, box voting and the detection
//!   pipeline.
//! - [`weights`] / [`image`]: weight container and image I/O.

pub mod bench;
pub mod cost;
pub mod detect;
pub mod error;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
