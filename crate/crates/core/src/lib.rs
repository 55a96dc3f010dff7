//! Single-forward-pass packing for multi-turn reasoning conversations.
//!
//! Training a model on every turn of an N-turn conversation normally takes N
//! forward passes, one per turn, because intermediate reasoning is shown to
//! the model while it generates a response but is dropped from the history
//! afterwards. This crate packs all N turns into one input by duplicating
//! each response into a context copy and a generation copy, then restoring
//! the per-turn semantics with three aligned artifacts:
//!
//! * a token-level attention mask that lets each query see exactly the
//!   tokens it would have seen in its own pass,
//! * position IDs equal to each token's index in that pass, and
//! * target/include arrays marking which predictions carry loss.
//!
//! The [`oracle`] module proves the construction: it expands a conversation
//! into the naive per-turn passes, runs both through the same reference
//! transformer ([`model`]), and checks that per-token losses agree. The
//! [`cost`] module sizes the win (attention cells, flops, peak mask memory).

pub mod convo;
pub mod cost;
pub mod mask;
pub mod model;
pub mod oracle;
pub mod pack;

pub use convo::{
    apply_delimiters, conversation_stats, validate_conversation, Conversation, ConversationStats,
    TokenId, Turn, ValidatedConversation, ValidationError,
};
pub use cost::{
    attention_cells, cost_report, equal_segment_crossover, fit_loglog_slope, input_tokens,
    peak_mask_cells, run_scaling_study, synth_conversation, CostError, CostMode, CostReport,
    ScalingFit, StudyReport, StudyRow, StudySpec, STUDY_CSV_HEADER,
};
pub use mask::BoolMask;
pub use model::{
    grad_check, init_model, nll, ForwardOutput, Model, ModelConfig, ModelError, NllOutput,
    PositionalFamily, Precision, Scalar,
};
pub use oracle::{
    compare_packed_to_passes, expand_to_passes, labeled_predictions, run_equivalence,
    token_correspondence, verify_with_config, CorrespondenceMap, EquivalenceReport,
    LabeledPrediction, OracleError, PassInput, PassLocation,
};
pub use pack::{
    assign_position_ids, build_layout, build_token_mask, build_targets, pack, pack_batch,
    pack_batch_with, pack_with, segment_visibility, PackError, PackOptions, PackedBatch,
    PackedConversation, Segment, SegmentKind, SegmentTable, DEFAULT_DENSE_MASK_CAP,
};
