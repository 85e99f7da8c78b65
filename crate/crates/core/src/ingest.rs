//! Input parsing: line-delimited image records and the binary phrase
//! embedding sidecar.
//!
//! Record lines are JSON objects:
//!
//! ```text
//! {"id":"a","width":224,"height":224,"captions":["a dog"],
//!  "detections":[{"box":[10,10,30,40],"tag":"dog","confidence":0.9}],
//!  "block_embeddings":[[...], ...]}
//! ```
//!
//! Boxes are `[x, y, w, h]` with `(x, y)` the top-left corner. A missing
//! `confidence` reads as `1.0`; `block_embeddings` is optional.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::pipeline::PipelineConfig;
use crate::prompt::Template;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("schema error at byte {offset}, field `{field}`: {message}")]
    Schema {
        offset: u64,
        field: String,
        message: String,
    },
    #[error("geometry error at byte {offset}, field `{field}`: {message}")]
    Geometry {
        offset: u64,
        field: String,
        message: String,
    },
    #[error("invalid UTF-8 at byte {offset}")]
    Encoding { offset: u64, field: String },
}

impl IngestError {
    pub fn offset(&self) -> u64 {
        match self {
            IngestError::Schema { offset, .. }
            | IngestError::Geometry { offset, .. }
            | IngestError::Encoding { offset, .. } => *offset,
        }
    }

    pub fn field(&self) -> &str {
        match self {
            IngestError::Schema { field, .. }
            | IngestError::Geometry { field, .. }
            | IngestError::Encoding { field, .. } => field,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Schema { .. } => "SchemaError",
            IngestError::Geometry { .. } => "GeometryError",
            IngestError::Encoding { .. } => "EncodingError",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("bad embedding table header: {0}")]
    Format(String),
    #[error("embedding table truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncation {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate phrase {phrase:?} at row {row}")]
    DuplicatePhrase { phrase: String, row: usize },
    #[error("phrase {row} is not valid UTF-8")]
    Encoding { row: usize },
}

/// One detected (or annotated) object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    1.0
}

impl DetectedObject {
    pub fn new(bbox: BBox, tag: impl Into<String>, confidence: f64) -> Self {
        DetectedObject {
            bbox,
            tag: tag.into(),
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub captions: Vec<String>,
    #[serde(default)]
    pub detections: Vec<DetectedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_embeddings: Option<Vec<Vec<f32>>>,
}

impl ImageRecord {
    /// Serializes as a single JSON line (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

// Wire shape before invariant checks: integer dimensions are read signed so a
// negative width is reported as geometry, not as a type mismatch.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    width: i64,
    height: i64,
    captions: Vec<String>,
    #[serde(default)]
    detections: Vec<RawDetection>,
    #[serde(default)]
    block_embeddings: Option<Vec<Vec<f32>>>,
}

#[derive(Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    tag: String,
    #[serde(default)]
    confidence: Option<f64>,
}

/// Parses one record line. `offset` is the line's byte offset in the corpus
/// and is carried into every error.
pub fn parse_record(line: &[u8], offset: u64) -> Result<ImageRecord, IngestError> {
    let text = match std::str::from_utf8(line) {
        Ok(t) => t,
        Err(e) => {
            return Err(IngestError::Encoding {
                offset: offset + e.valid_up_to() as u64,
                field: String::new(),
            })
        }
    };
    let text = text.trim_end_matches(['\n', '\r']);
    let raw: RawRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(_) => return Err(schema_error_with_path(text, offset)),
    };
    let schema = |field: String, message: &str| IngestError::Schema {
        offset,
        field,
        message: message.to_string(),
    };
    let geometry = |field: String, message: String| IngestError::Geometry {
        offset,
        field,
        message,
    };

    if raw.id.is_empty() {
        return Err(schema("id".into(), "must be non-empty"));
    }
    let width = dimension(raw.width).ok_or_else(|| {
        geometry("width".into(), format!("must be a positive integer, got {}", raw.width))
    })?;
    let height = dimension(raw.height).ok_or_else(|| {
        geometry("height".into(), format!("must be a positive integer, got {}", raw.height))
    })?;
    if raw.captions.is_empty() {
        return Err(schema("captions".into(), "must contain at least one caption"));
    }

    let mut detections = Vec::with_capacity(raw.detections.len());
    for (i, d) in raw.detections.into_iter().enumerate() {
        let bbox = BBox::from(d.bbox);
        if !bbox.is_valid() {
            return Err(geometry(
                format!("detections[{i}].box"),
                "coordinates must be finite with w >= 0 and h >= 0".into(),
            ));
        }
        if d.tag.trim().is_empty() {
            return Err(schema(format!("detections[{i}].tag"), "must be non-empty"));
        }
        let confidence = d.confidence.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&confidence) {
            return Err(schema(
                format!("detections[{i}].confidence"),
                "must lie in [0, 1]",
            ));
        }
        detections.push(DetectedObject {
            bbox,
            tag: d.tag,
            confidence,
        });
    }

    if let Some(rows) = &raw.block_embeddings {
        if let Some(first) = rows.first() {
            if first.is_empty() {
                return Err(schema("block_embeddings[0]".into(), "vectors must be non-empty"));
            }
            if let Some(i) = rows.iter().position(|r| r.len() != first.len()) {
                return Err(schema(
                    format!("block_embeddings[{i}]"),
                    "all block vectors must share one dimension",
                ));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(schema("block_embeddings".into(), "values must be finite"));
        }
    }

    Ok(ImageRecord {
        id: raw.id,
        width,
        height,
        captions: raw.captions,
        detections,
        block_embeddings: raw.block_embeddings,
    })
}

fn dimension(v: i64) -> Option<u32> {
    if v >= 1 {
        u32::try_from(v).ok()
    } else {
        None
    }
}

// Slow path, only taken on failure: re-run the parse with path tracking so the
// error names the offending field.
fn schema_error_with_path(text: &str, offset: u64) -> IngestError {
    let mut de = serde_json::Deserializer::from_str(text);
    let err = match serde_path_to_error::deserialize::<_, RawRecord>(&mut de) {
        Ok(_) => match de.end() {
            Ok(()) => {
                return IngestError::Schema {
                    offset,
                    field: String::new(),
                    message: "unparseable record".into(),
                }
            }
            Err(e) => {
                return IngestError::Schema {
                    offset: offset + column_offset(&e),
                    field: String::new(),
                    message: e.to_string(),
                }
            }
        },
        Err(e) => e,
    };
    let path = err.path().to_string();
    let inner = err.into_inner();
    let message = inner.to_string();
    let named = backticked(&message);
    let field = match (path.as_str(), named) {
        (".", Some(f)) | ("", Some(f)) => f.to_string(),
        (p, Some(f)) if message.contains("missing field") || message.contains("duplicate field") => {
            format!("{p}.{f}")
        }
        (".", None) => String::new(),
        (p, _) => p.to_string(),
    };
    IngestError::Schema {
        offset: offset + column_offset(&inner),
        field,
        message,
    }
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn column_offset(e: &serde_json::Error) -> u64 {
    e.column().saturating_sub(1) as u64
}

/// A single rule violation found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    BoxOutOfBounds { detection: usize },
    EmbeddingCountMismatch { expected: usize, found: usize },
    EmbeddingDimensionMismatch { expected: usize, found: usize },
    TemplateUnsupported { template: String, grid: u32 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::BoxOutOfBounds { detection } => {
                write!(f, "detection {detection}: box outside image bounds")
            }
            Violation::EmbeddingCountMismatch { expected, found } => write!(
                f,
                "embedding count mismatch: expected {expected} block vectors, found {found}"
            ),
            Violation::EmbeddingDimensionMismatch { expected, found } => write!(
                f,
                "embedding dimension mismatch: table has {expected}, record has {found}"
            ),
            Violation::TemplateUnsupported { template, grid } => {
                write!(f, "template {template} cannot render a {grid}x{grid} grid")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a parsed record against the run configuration. `table` is the
/// loaded embedding sidecar, when there is one.
pub fn validate_record(
    rec: &ImageRecord,
    config: &PipelineConfig,
    table: Option<&EmbeddingMatrix>,
) -> ValidationReport {
    let mut violations = Vec::new();
    let (w, h) = (f64::from(rec.width), f64::from(rec.height));
    for (i, d) in rec.detections.iter().enumerate() {
        let b = &d.bbox;
        if b.x < 0.0 || b.y < 0.0 || b.right() > w || b.bottom() > h {
            violations.push(Violation::BoxOutOfBounds { detection: i });
        }
    }
    if let Some(rows) = &rec.block_embeddings {
        let expected = (config.grid_n as usize).pow(2);
        if rows.len() != expected {
            violations.push(Violation::EmbeddingCountMismatch {
                expected,
                found: rows.len(),
            });
        }
        if let (Some(table), Some(first)) = (table, rows.first()) {
            if first.len() != table.dim() {
                violations.push(Violation::EmbeddingDimensionMismatch {
                    expected: table.dim(),
                    found: first.len(),
                });
            }
        }
    }
    if config.grid_n != 3 && config.template == Template::NounBlockHasO {
        violations.push(Violation::TemplateUnsupported {
            template: config.template.id().to_string(),
            grid: config.grid_n,
        });
    }
    ValidationReport { violations }
}

/// Phrase vocabulary paired with one embedding row per phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    phrases: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

pub const TABLE_MAGIC: &[u8; 4] = b"PTPE";
pub const TABLE_VERSION: u16 = 1;

impl EmbeddingMatrix {
    /// `rows` must hold `phrases.len()` rows of `dim` values, row-major.
    pub fn new(phrases: Vec<String>, dim: usize, rows: Vec<f32>) -> Result<Self, TableError> {
        if phrases.is_empty() || dim == 0 {
            return Err(TableError::Format("M and D must both be at least 1".into()));
        }
        if rows.len() != phrases.len() * dim {
            return Err(TableError::Format(format!(
                "expected {} values, got {}",
                phrases.len() * dim,
                rows.len()
            )));
        }
        let mut seen = HashSet::with_capacity(phrases.len());
        for (row, p) in phrases.iter().enumerate() {
            if !seen.insert(p.as_str()) {
                return Err(TableError::DuplicatePhrase {
                    phrase: p.clone(),
                    row,
                });
            }
        }
        Ok(EmbeddingMatrix {
            phrases,
            dim,
            data: rows,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Writes the binary sidecar layout: magic, version, M, D, then
    /// `u32`-length-prefixed phrases and little-endian `f32` rows.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.phrases.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for p in &self.phrases {
            w.write_all(&(p.len() as u32).to_le_bytes())?;
            w.write_all(p.as_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TableError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(TableError::Truncation {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TableError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TableError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn parse_embedding_table(bytes: &[u8]) -> Result<EmbeddingMatrix, TableError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != TABLE_MAGIC {
        return Err(TableError::Format("missing PTPE magic".into()));
    }
    let version = cur.u16()?;
    if version != TABLE_VERSION {
        return Err(TableError::Format(format!("unsupported version {version}")));
    }
    let m = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    if m == 0 || d == 0 {
        return Err(TableError::Format(format!("M={m}, D={d}; both must be >= 1")));
    }
    // Each phrase needs at least its length prefix.
    if m.saturating_mul(4) > bytes.len() - cur.pos {
        return Err(TableError::Truncation {
            offset: cur.pos,
            needed: m * 4,
            available: bytes.len() - cur.pos,
        });
    }
    let mut phrases = Vec::with_capacity(m);
    let mut seen = HashSet::with_capacity(m);
    for row in 0..m {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        let phrase = std::str::from_utf8(raw).map_err(|_| TableError::Encoding { row })?;
        if !seen.insert(phrase) {
            return Err(TableError::DuplicatePhrase {
                phrase: phrase.to_string(),
                row,
            });
        }
        phrases.push(phrase.to_string());
    }
    let n_values = m
        .checked_mul(d)
        .ok_or_else(|| TableError::Format("M×D overflows".into()))?;
    let body = cur.take(n_values.checked_mul(4).ok_or_else(|| TableError::Format("M×D overflows".into()))?)?;
    if cur.pos != bytes.len() {
        return Err(TableError::Format(format!(
            "{} trailing bytes after the value section",
            bytes.len() - cur.pos
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingMatrix {
        phrases,
        dim: d,
        data,
    })
}
