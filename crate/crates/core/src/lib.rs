//! Zero-shot object-goal navigation in a synthetic gridworld.
//!
//! The policy never sees class identities: its input is a detection row
//! per seen or irrelevant class plus the cosine similarity between that
//! class's word embedding and the target's. A target class that was never
//! trained on enters only through its embedding.

pub mod seeds;
pub mod semantic;
pub mod config;
pub mod eval;
pub mod model;
pub mod reward;
pub mod training;
pub mod world;

#[cfg(test)]
mod testutil;
