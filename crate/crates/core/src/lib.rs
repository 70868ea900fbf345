//! Question-attended span extraction (QASE) for a generative reader.
//!
//! A small encoder-decoder language model is fine-tuned to generate answers
//! while an auxiliary head tags context tokens as inside/outside the answer.
//! The two objectives are combined as `lml + beta * qase`; at inference time
//! only the generator runs.

pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod plm;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
