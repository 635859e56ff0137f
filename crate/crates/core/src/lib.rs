//! Multi-label diagnosis-code classification over a clinical-terminology
//! code inventory.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod splitter;
pub mod terminology;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
