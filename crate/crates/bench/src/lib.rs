//! Fixtures shared by the benchmark suite.

use turnpack_core::{synth_conversation, ValidatedConversation};

/// Equal-segment conversation over the usual 97-token vocabulary: `n_turns`
/// turns whose human, reasoning, and response segments are all `seg_len`
/// tokens. Deterministic in its arguments.
pub fn fixture(n_turns: usize, seg_len: usize) -> ValidatedConversation {
    let seed = 7u64 ^ (n_turns as u64).wrapping_mul(0x9e37_79b9);
    synth_conversation(n_turns, seg_len, seg_len, seg_len, 97, seed)
        .expect("fixture parameters satisfy the data-model rules")
}
