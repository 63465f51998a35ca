//! Document-level relation extraction head.
//!
//! The pipeline runs on top of a (stubbed) encoder's token embeddings `H` and
//! token attention `A`:
//!
//! 1. [`cgmi`] pools each entity's mentions by cross-attention against a
//!    context vector localised to the entity pair.
//! 2. [`pairgraph`] turns every ordered pair into a node, links pairs that
//!    share an entity and runs attention message passing over them.
//! 3. [`classifier`] scores relations against a learned threshold class.
//!
//! [`training`] differentiates the whole composition with a small reverse-mode
//! tape ([`autodiff`]) and fits it with AdamW. [`metrics`] scores predicted
//! triplets.

pub mod autodiff;
pub mod cgmi;
pub mod classifier;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod pairgraph;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
