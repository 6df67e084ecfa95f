//! Minimal neural-network layer over `candle-core` tensors.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Conv2d, LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{FreezeMask, Init, Param, ParamBuilder, ParamKind, ParamStore};
