//! Entry-level differentially-private fingerprinting of relational databases.

pub mod attacks;
pub mod crypto_rand;
pub mod datamodel;
pub mod error;
pub mod extractor;
pub mod fingerprinter;
pub mod svt;
pub mod synthetic;
pub mod theory;
pub mod utility;

pub use error::{Error, Result};
