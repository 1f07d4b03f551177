//! Stable identity for a training sample flowing through batching,
//! shard assignment, and the feedback pool.

use serde::{Deserialize, Serialize};

/// Identifies one trainable prompt/target pair. `example` is the corpus
/// edit id; `variant` 0 is the edit prompt itself, 1.. are its rephrases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub example: u32,
    pub variant: u32,
}

impl SampleId {
    pub fn new(example: u32, variant: u32) -> Self {
        SampleId { example, variant }
    }

    pub fn is_edit_prompt(&self) -> bool {
        self.variant == 0
    }
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.example, self.variant)
    }
}
