//! KV-cache eviction for multimodal decoding.
//!
//! Prefill pruning of visual tokens ([`prune`]), recycle-bin eviction during
//! decoding ([`decode`]), a greedy heavy-hitter baseline, a synthetic
//! attention stream ([`sim`]), closed-form loss bounds ([`theory`]) and an
//! experiment harness ([`harness`]).

pub mod attention;
pub mod decode;
pub mod error;
pub mod harness;
pub mod policy;
pub mod prune;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
