//! Multi-task semantic parsing for conversational question answering over a
//! knowledge base.
//!
//! The crate is layered bottom-up: [`kb`] stores triples, [`grammar`] defines
//! the typed operator language, [`executor`] evaluates logical forms,
//! [`linker`] maps detected mentions to entities, [`bfs`] recovers training
//! programs from answers, [`nn`] holds the neural parser and its multi-task
//! loss, [`inference`] runs grammar-guided beam search, and [`pipeline`] ties
//! everything into datasets, metrics and experiments.

pub mod bfs;
pub mod error;
pub mod executor;
pub mod grammar;
pub mod inference;
pub mod kb;
pub mod linker;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod text;

pub use error::{Error, Result};

pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
