//! Small fixtures shared by unit tests.

use crate::semantic::{synth_embeddings, ClassSplit, EmbeddingTable};

pub fn small_split() -> ClassSplit {
    ClassSplit::new(&["s1", "s2"], &["u"], &["i1", "i2"]).unwrap()
}

/// `s1` and `u` share cluster 0; `s2` and `i2` share cluster 1.
pub fn small_table() -> EmbeddingTable {
    synth_embeddings(17, &["s1", "s2", "u", "i1", "i2"], 8, &[0, 1, 0, 2, 1]).unwrap()
}
