//! Toy encoder-decoder language model standing in for a pretrained generator.

pub mod checkpoint;
pub mod model;
pub mod prompt;
pub mod vocab;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use model::{argmax, Generator, LoraConfig, PlmConfig, GEN_PREFIX};
pub use prompt::{build_prompt, EncodedPrompt, PromptOrdering, PromptTemplate, INSTRUCTION};
pub use vocab::{Vocab, BOS, EOS, PAD, SEP, UNK};
