//! Sequential recommendation trained as replaced-item detection.
//!
//! A generator encoder is trained with next-item prediction and proposes
//! plausible replacements for a fraction of each sequence's targets; a
//! discriminator encoder learns to tell the real targets from the sampled
//! ones. Both share the item-embedding table. After training the generator is
//! dropped and the discriminator ranks the full item set.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
