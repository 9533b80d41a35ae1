//! Open-set domain adaptation with a multi-classifier adversarial network.
//!
//! A feature generator is trained against a domain classifier with an extra
//! "unknown" output. Each unlabeled target sample is weighted by how much it
//! resembles the source domain, using a supplementary leaky-softmax source
//! classifier and the domain classifier's unknown probability, and the
//! adversarial loss pushes high-weight samples towards the known classes and
//! low-weight samples towards "unknown". A fixed-threshold baseline, a
//! source-only baseline and two ablations share the same trainer.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
