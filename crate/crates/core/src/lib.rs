//! Linear predictability among attention-head activations.
//!
//! The crate measures how well one head's K/Q/V states are reconstructed
//! by least squares from other heads, picks heads whose KV cache can be
//! dropped in favour of on-the-fly linear reconstruction, and simulates the
//! resulting memory/error trade-off on a toy attention stack.

pub mod actv;
pub mod error;
pub mod kvcache;
pub mod linalg;
pub mod predictor;
pub mod probe;
pub mod selection;
pub mod subspace;
pub mod synth;
pub mod theory;
pub mod toy;

pub use error::{Error, Result};
