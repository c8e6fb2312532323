//! Primitive layers, each with a forward pass and an exact backward pass.
//!
//! Layers are plain values holding their parameters. Forward passes return
//! whatever the backward pass needs (caches, argmax indices) rather than
//! stashing it internally, so the graph module decides what to keep.

mod activation;
mod batchnorm;
mod conv;
mod pool;
mod reorg;

pub use activation::LeakyRelu;
pub use batchnorm::{BatchNorm, BnCache, BnGrads, BN_EPSILON, BN_MOMENTUM};
pub use conv::{Conv2d, ConvGrads};
pub use pool::{MaxPool2d, PoolCache};
pub use reorg::{reorg_backward, reorg_forward, reorg_shape};
