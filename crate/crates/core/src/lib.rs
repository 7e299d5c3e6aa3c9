//! Joint visual question answering and question-steered captioning.
pub mod autograd;
pub mod caption_embed;
pub mod captioner;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod microworld;
pub mod model;
pub mod nn;
pub mod selector;
pub mod selfcheck;
#[cfg(test)]
mod oracle;
pub mod vqa_head;
pub use error::{Error, Result};
