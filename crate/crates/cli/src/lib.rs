//! I/O layer around the packing library: JSONL corpus reading and writing,
//! a binary tensor container for packed outputs, and mask renderings.

pub mod container;
pub mod corpus;
pub mod render;

pub use container::{
    read_container, read_container_bytes, write_container, write_container_bytes, Contents,
    ContainerError,
};
pub use corpus::{
    read_corpus, read_corpus_validated, write_corpus, ConversationRecord, CorpusError, TurnRecord,
};
pub use render::{render_mask_ascii, render_mask_pgm, RenderMode};
