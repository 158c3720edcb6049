//! Desk-scale multilingual language model.

pub mod error;
pub mod numerics;
pub mod tokenizer;
pub mod corpus;
pub mod moe;
pub mod model;
pub mod training;
pub mod eval;
pub mod recipes;
pub mod cli;

pub use error::{Error, Result};
