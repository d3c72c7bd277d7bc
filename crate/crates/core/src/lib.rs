#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Testing with Concept Activation Vectors (TCAV) for contextual LSTM
//! emotion classifiers over multimodal conversation data.

pub mod cav;
pub mod concepts;
pub mod config;
pub mod error;
pub mod net;
pub mod oracle;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tcav;
pub mod tensor;
pub mod validate;

pub use error::{Error, Result};
