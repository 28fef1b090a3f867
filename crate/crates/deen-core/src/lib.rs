//! Cross-modality metric learning with diverse embedding expansion.
//!
//! A self-contained CPU implementation: a small dense-tensor kernel with
//! reverse-mode gradients, a two-stream staged backbone with embedding
//! expansion and multistage feature aggregation, the four training losses,
//! a synthetic two-modality benchmark, and the cross-modality retrieval
//! evaluation protocol.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalproto;
pub mod losses;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{DeenError, Result};
pub use tensor::Tensor;
