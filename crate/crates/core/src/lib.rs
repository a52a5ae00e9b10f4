//! Convolutional sparse coding built around the locally competitive algorithm
//! (LCA): pluggable thresholding operators, ISTA dictionary learning, a small
//! fully-convolutional predictor that warm-starts the solver's membrane
//! states, evaluation metrics, binary tensor storage, and the experiment
//! pipeline behind the `warp-lca` CLI.

pub mod dictionary;
pub mod error;
pub mod lca;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod storage;
pub mod tensor;
pub mod threshold;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Padding, Tensor4};
