//! Privacy-preserving image classification with block-wise orthogonal
//! encryption and key-transformed ConvMixer models.

pub mod cipher;
pub mod codec;
pub mod eval;
pub mod model;
pub mod nnengine;
pub mod protocol;
pub mod rnglinalg;
