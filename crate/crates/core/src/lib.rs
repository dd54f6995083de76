//! Conversion of MHA/GQA attention into multi-head latent attention with
//! partial rotary embeddings and per-modality low-rank KV factors.

pub mod adapt;
pub mod cachekit;
pub mod checkpoint;
pub mod convert;
pub mod error;
pub mod mdsvd;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
