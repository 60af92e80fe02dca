//! Toolkit for recognizing, transferring, and explaining illustrator style.

pub mod artifact;
pub mod bowsvm;
pub mod cli;
pub mod convnet;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod image;
pub mod mining;
pub mod numerics;
pub mod transfer;

pub use error::{Error, Result};
