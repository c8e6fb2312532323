//! A from-scratch convolutional object detector: a YOLO-style single-shot
//! network with a dense-connection block and a stride-1 spatial pyramid
//! pooling block, plus everything needed to train and evaluate it on a CPU.

pub mod anchors;
pub mod cli;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Shape, Tensor};

/// The guide's code blocks, compiled and run as doctests so the book and the
/// library stay in step.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/anchors.md")]
    mod anchors {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
