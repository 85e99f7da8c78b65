//! Compiles image-caption corpora into position-guided prompt corpora.
//!
//! Each image is split into an N×N grid of blocks. Objects are placed in
//! blocks either from precomputed detections (top-K by confidence, then by
//! box center) or from precomputed per-block embeddings scored against a
//! phrase table. Block tags become short sentences such as
//! `"The block 4 has a dog."` that are appended to the caption.
//!
//! The [`pipeline`] module ties the stages together over line-delimited
//! corpora; [`prompt`] also produces cloze probes and pretext word flags.

pub mod geometry;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod tagging;
pub mod vocab;

pub use geometry::{apply_affine, compose, Affine2D, BBox, BlockGrid};
pub use ingest::{parse_embedding_table, parse_record, validate_record, DetectedObject, EmbeddingMatrix, ImageRecord};
pub use pipeline::{compute_stats, process_record, run, run_streams, DatasetStats, PipelineConfig, TagMode};
pub use prompt::{make_cloze, pretext_sequence, render, MaskKind, PromptedSample, Template};
pub use tagging::{assign_to_blocks, embed_tag, select_top_k, tag_blocks_by_embedding, BlockTagMap};
pub use vocab::{build_vocabulary, extract_candidates, Vocabulary};
