//! Per-block object tags, from detections (top-K then center-in-block) or
//! from block embeddings scored against the phrase table.
//!
//! The embedding path scores with the raw dot product `hᵀe`. Callers that
//! want cosine similarity must normalize both the table rows and the block
//! vectors before handing them over.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_affine, Affine2D, BBox, BlockGrid};
use crate::ingest::{DetectedObject, EmbeddingMatrix, ImageRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaggingError {
    #[error("block vector has dimension {found}, table has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record has no block embeddings")]
    MissingEmbeddings,
    #[error("record has {found} block embeddings, grid needs {expected}")]
    EmbeddingCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSource {
    Detector,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTag {
    pub tag: String,
    pub confidence: f64,
    pub source: TagSource,
    /// The (possibly transformed) box; `None` on the embedding path.
    pub bbox: Option<BBox>,
}

/// Tags per block plus the objects pushed off the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTagMap {
    grid: BlockGrid,
    blocks: Vec<Vec<BlockTag>>,
    pub out_of_border: Vec<BlockTag>,
}

impl BlockTagMap {
    pub fn new(grid: BlockGrid) -> Self {
        BlockTagMap {
            grid,
            blocks: vec![Vec::new(); grid.block_count()],
            out_of_border: Vec::new(),
        }
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn grid_n(&self) -> u32 {
        self.grid.n()
    }

    /// Panics if `block` is outside the grid.
    pub fn push(&mut self, block: u32, tag: BlockTag) {
        self.blocks[block as usize].push(tag);
    }

    pub fn block(&self, block: u32) -> &[BlockTag] {
        self.blocks.get(block as usize).map_or(&[], Vec::as_slice)
    }

    /// Non-empty blocks in ascending index order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, &[BlockTag])> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, tags)| !tags.is_empty())
            .map(|(i, tags)| (i as u32, tags.as_slice()))
    }

    /// Number of tags per block, indexed by block.
    pub fn occupancy(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.len() as u32).collect()
    }

    pub fn in_canvas_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.out_of_border.is_empty() && self.blocks.iter().all(Vec::is_empty)
    }
}

fn rank(a: &DetectedObject, ai: usize, b: &DetectedObject, bi: usize) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.tag.cmp(&b.tag))
        .then(ai.cmp(&bi))
}

/// The `k` most confident detections, ordered by confidence (descending),
/// then tag, then input position.
pub fn select_top_k(detections: &[DetectedObject], k: usize) -> Vec<DetectedObject> {
    let mut idx: Vec<usize> = (0..detections.len()).collect();
    let by_rank = |&i: &usize, &j: &usize| rank(&detections[i], i, &detections[j], j);
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    idx.into_iter().map(|i| detections[i].clone()).collect()
}

/// Places every object in the block holding its (optionally transformed)
/// box center. Objects centered off the canvas go to `out_of_border`.
pub fn assign_to_blocks(
    grid: &BlockGrid,
    objects: &[DetectedObject],
    transform: Option<&Affine2D>,
) -> BlockTagMap {
    let mut map = BlockTagMap::new(*grid);
    for obj in objects {
        let bbox = match transform {
            Some(t) => apply_affine(t, &obj.bbox),
            None => obj.bbox,
        };
        let (cx, cy) = bbox.center();
        let tag = BlockTag {
            tag: obj.tag.clone(),
            confidence: obj.confidence,
            source: TagSource::Detector,
            bbox: Some(bbox),
        };
        match grid.block_of_point(cx, cy) {
            Some(block) => map.push(block, tag),
            None => map.out_of_border.push(tag),
        }
    }
    map
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Index and phrase of the table row with the largest dot product against
/// `block_vector` (lowest index on ties), plus that score.
///
/// Softmax is strictly monotone, so this is the argmax of the normalized
/// similarity distribution without evaluating any exponentials.
pub fn embed_tag_scored<'t>(
    block_vector: &[f32],
    table: &'t EmbeddingMatrix,
) -> Result<(usize, &'t str, f64), TaggingError> {
    if block_vector.len() != table.dim() {
        return Err(TaggingError::DimensionMismatch {
            expected: table.dim(),
            found: block_vector.len(),
        });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in table.rows().enumerate() {
        let s = dot(block_vector, row);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok((best.0, table.phrase(best.0), best.1))
}

pub fn embed_tag<'t>(
    block_vector: &[f32],
    table: &'t EmbeddingMatrix,
) -> Result<(usize, &'t str), TaggingError> {
    embed_tag_scored(block_vector, table).map(|(i, p, _)| (i, p))
}

/// One tag per block from the record's block embeddings (row-major order).
pub fn tag_blocks_by_embedding(
    rec: &ImageRecord,
    table: &EmbeddingMatrix,
    grid: &BlockGrid,
) -> Result<BlockTagMap, TaggingError> {
    let vectors = rec
        .block_embeddings
        .as_ref()
        .ok_or(TaggingError::MissingEmbeddings)?;
    let expected = grid.block_count();
    if vectors.len() != expected {
        return Err(TaggingError::EmbeddingCount {
            expected,
            found: vectors.len(),
        });
    }
    let mut map = BlockTagMap::new(*grid);
    for (b, v) in vectors.iter().enumerate() {
        let (_, phrase, score) = embed_tag_scored(v, table)?;
        map.push(
            b as u32,
            BlockTag {
                tag: phrase.to_string(),
                confidence: score,
                source: TagSource::Embedding,
                bbox: None,
            },
        );
    }
    Ok(map)
}
