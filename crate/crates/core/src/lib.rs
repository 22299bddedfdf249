//! Graph-based multimodal user/item tokenization for generative
//! recommendation and personalized generation.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fmat;
pub mod gcn;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod par;
pub mod quantizer;
pub mod rng;
pub mod sampling;
pub mod scorer;
pub mod stage1;
pub mod stage2;
pub mod synth;

pub use error::{Error, Result};
