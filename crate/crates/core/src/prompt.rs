//! Prompt sentences built from block tags, caption composition, cloze
//! masking and pretext word flags.
//!
//! Every sentence is rendered through a span-recording writer, so each
//! substituted value (position, object, coordinates) is tracked as a byte
//! span of the final composed text.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::tagging::{BlockTag, BlockTagMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("noun positions need a 3x3 grid, got {0}x{0}")]
    UnsupportedGrid(u32),
    #[error("template {template} is missing its {slot} slot")]
    MissingSlot {
        template: &'static str,
        slot: &'static str,
    },
    #[error("MULTI_TAG takes 1 to 3 objects, got {0}")]
    TooManyTags(usize),
    #[error("MULTI_POS takes 1 to 3 positions, got {0}")]
    TooManyPositions(usize),
    #[error("MIXED is resolved per sentence and cannot be rendered directly")]
    MixedNotRenderable,
    #[error("block {block} is outside a {n}x{n} grid")]
    BlockOutOfRange { block: u32, n: u32 },
    #[error("no candidates to sample from")]
    EmptyCandidates,
    #[error("sample has no {0:?} slot")]
    NoSuchSlot(MaskKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Template {
    OInBlock,
    BlockLooksLike,
    QaWhichBlock,
    OLocatedIn,
    CoordHasO,
    NounBlockHasO,
    BlockHasO,
    MultiTag,
    MultiPos,
    RegionSynonym,
    Mixed,
}

impl Template {
    /// The seven single-object templates that MIXED draws from.
    pub const BASE: [Template; 7] = [
        Template::OInBlock,
        Template::BlockLooksLike,
        Template::QaWhichBlock,
        Template::OLocatedIn,
        Template::CoordHasO,
        Template::NounBlockHasO,
        Template::BlockHasO,
    ];

    pub const ALL: [Template; 11] = [
        Template::OInBlock,
        Template::BlockLooksLike,
        Template::QaWhichBlock,
        Template::OLocatedIn,
        Template::CoordHasO,
        Template::NounBlockHasO,
        Template::BlockHasO,
        Template::MultiTag,
        Template::MultiPos,
        Template::RegionSynonym,
        Template::Mixed,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Template::OInBlock => "O_IN_BLOCK",
            Template::BlockLooksLike => "BLOCK_LOOKS_LIKE",
            Template::QaWhichBlock => "QA_WHICH_BLOCK",
            Template::OLocatedIn => "O_LOCATED_IN",
            Template::CoordHasO => "COORD_HAS_O",
            Template::NounBlockHasO => "NOUN_BLOCK_HAS_O",
            Template::BlockHasO => "BLOCK_HAS_O",
            Template::MultiTag => "MULTI_TAG",
            Template::MultiPos => "MULTI_POS",
            Template::RegionSynonym => "REGION_SYNONYM",
            Template::Mixed => "MIXED",
        }
    }

    /// Accepts the canonical id (any case, `-` or `_`) or the roman
    /// numerals `i`..`vii` of the original prompt ablation list, where `vi`
    /// is BLOCK_HAS_O and `vii` the noun-position variant.
    pub fn from_id(s: &str) -> Option<Template> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let roman = [
            ("I", Template::OInBlock),
            ("II", Template::BlockLooksLike),
            ("III", Template::QaWhichBlock),
            ("IV", Template::OLocatedIn),
            ("V", Template::CoordHasO),
            ("VI", Template::BlockHasO),
            ("VII", Template::NounBlockHasO),
        ];
        if let Some((_, t)) = roman.iter().find(|(r, _)| *r == norm) {
            return Some(*t);
        }
        Template::ALL.into_iter().find(|t| t.id() == norm)
    }

    fn needs_noun_positions(self) -> bool {
        self == Template::NounBlockHasO
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    P,
    O,
    X,
    #[serde(rename = "COORD")]
    Coord,
}

/// A substituted value and its byte span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Slot {
    fn shifted(&self, by: usize) -> Slot {
        Slot {
            start: self.start + by,
            end: self.end + by,
            ..self.clone()
        }
    }
}

/// One rendered prompt sentence with its slot spans (relative to `text`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub template: Template,
    pub text: String,
    pub slots: Vec<Slot>,
}

#[derive(Default)]
struct SpanWriter {
    text: String,
    slots: Vec<Slot>,
}

impl SpanWriter {
    fn lit(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn slot(&mut self, kind: SlotKind, value: &str) -> &mut Self {
        let start = self.text.len();
        self.text.push_str(value);
        self.slots.push(Slot {
            kind,
            start,
            end: self.text.len(),
            text: value.to_string(),
        });
        self
    }

    fn pos(&mut self, value: &str) -> &mut Self {
        let kind = if value == OFF_CANVAS { SlotKind::X } else { SlotKind::P };
        self.slot(kind, value)
    }

    // "a", "a and b", "a, b and c"
    fn list(&mut self, values: &[String], each: impl Fn(&mut Self, &str)) -> &mut Self {
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.lit(if i + 1 == values.len() { " and " } else { ", " });
            }
            each(self, v);
        }
        self
    }

    fn finish(self, template: Template) -> Sentence {
        Sentence {
            template,
            text: self.text,
            slots: self.slots,
        }
    }
}

/// Position value used for objects pushed off the canvas.
pub const OFF_CANVAS: &str = "X";

/// Reading-order names for the nine cells of a 3×3 grid.
pub const NOUN_POSITIONS: [&str; 9] = [
    "upper left",
    "upper middle",
    "upper right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom middle",
    "bottom right",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionStyle {
    Numeric,
    Noun,
}

pub fn position_phrase(block: Option<u32>, grid_n: u32, style: PositionStyle) -> Result<String, PromptError> {
    if style == PositionStyle::Noun && grid_n != 3 {
        return Err(PromptError::UnsupportedGrid(grid_n));
    }
    if let Some(b) = block {
        if u64::from(b) >= u64::from(grid_n) * u64::from(grid_n) {
            return Err(PromptError::BlockOutOfRange { block: b, n: grid_n });
        }
    }
    Ok(match (block, style) {
        (None, _) => OFF_CANVAS.to_string(),
        (Some(b), PositionStyle::Numeric) => b.to_string(),
        (Some(b), PositionStyle::Noun) => NOUN_POSITIONS[b as usize].to_string(),
    })
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fill {
    pub positions: Vec<String>,
    pub objects: Vec<String>,
    pub coords: Option<BBox>,
}

impl Fill {
    pub fn single(p: impl Into<String>, o: impl Into<String>) -> Self {
        Fill {
            positions: vec![p.into()],
            objects: vec![o.into()],
            coords: None,
        }
    }

    pub fn with_coords(mut self, coords: BBox) -> Self {
        self.coords = Some(coords);
        self
    }
}

fn rounded(v: f64) -> String {
    let r = v.round_ties_even();
    // avoid rendering "-0"
    if r == 0.0 {
        "0".to_string()
    } else {
        r.to_string()
    }
}

pub fn format_coords(b: &BBox) -> String {
    format!("{}, {}, {}, {}", rounded(b.x), rounded(b.y), rounded(b.w), rounded(b.h))
}

pub fn render(template: Template, fill: &Fill) -> Result<String, PromptError> {
    render_sentence(template, fill).map(|s| s.text)
}

pub fn render_sentence(template: Template, fill: &Fill) -> Result<Sentence, PromptError> {
    let id = template.id();
    let p = || {
        fill.positions
            .first()
            .map(String::as_str)
            .ok_or(PromptError::MissingSlot { template: id, slot: "P" })
    };
    let o = || {
        fill.objects
            .first()
            .map(String::as_str)
            .ok_or(PromptError::MissingSlot { template: id, slot: "O" })
    };
    let mut w = SpanWriter::default();
    match template {
        Template::OInBlock => {
            let (p, o) = (p()?, o()?);
            w.lit("The ").slot(SlotKind::O, o).lit(" is in the block ").pos(p).lit(".");
        }
        Template::BlockLooksLike => {
            let (p, o) = (p()?, o()?);
            w.lit("The block ").pos(p).lit(" looks like ").slot(SlotKind::O, o).lit(".");
        }
        Template::QaWhichBlock => {
            let (p, o) = (p()?, o()?);
            w.lit("The ").slot(SlotKind::O, o).lit(" is in which block? In ").pos(p).lit(".");
        }
        Template::OLocatedIn => {
            let (p, o) = (p()?, o()?);
            w.lit("The ").slot(SlotKind::O, o).lit(" is located in block ").pos(p).lit(".");
        }
        Template::CoordHasO => {
            let o = o()?;
            w.lit("(");
            match (&fill.coords, fill.positions.first()) {
                (Some(b), _) => {
                    w.slot(SlotKind::Coord, &format_coords(b));
                }
                (None, Some(x)) if x == OFF_CANVAS => {
                    w.slot(SlotKind::X, x);
                }
                _ => return Err(PromptError::MissingSlot { template: id, slot: "coords" }),
            }
            w.lit(") has a ").slot(SlotKind::O, o).lit(".");
        }
        Template::NounBlockHasO => {
            let (p, o) = (p()?, o()?);
            w.lit("The block in ").pos(p).lit(" has a ").slot(SlotKind::O, o).lit(".");
        }
        Template::BlockHasO => {
            let (p, o) = (p()?, o()?);
            w.lit("The block ").pos(p).lit(" has a ").slot(SlotKind::O, o).lit(".");
        }
        Template::MultiTag => {
            let p = p()?;
            match fill.objects.len() {
                0 => return Err(PromptError::MissingSlot { template: id, slot: "O" }),
                1..=3 => {}
                n => return Err(PromptError::TooManyTags(n)),
            }
            w.lit("The block ").pos(p).lit(" has objects ");
            w.list(&fill.objects, |w, v| {
                w.slot(SlotKind::O, v);
            });
            w.lit(".");
        }
        Template::MultiPos => {
            let o = o()?;
            match fill.positions.len() {
                0 => return Err(PromptError::MissingSlot { template: id, slot: "P" }),
                1..=3 => {}
                n => return Err(PromptError::TooManyPositions(n)),
            }
            w.lit("The ").slot(SlotKind::O, o).lit(" is located in which region? In ");
            w.list(&fill.positions, |w, v| {
                w.pos(v);
            });
            w.lit(".");
        }
        Template::RegionSynonym => {
            let (p, o) = (p()?, o()?);
            w.lit("The object in region ").pos(p).lit(" looks like ").slot(SlotKind::O, o).lit(".");
        }
        Template::Mixed => return Err(PromptError::MixedNotRenderable),
    }
    Ok(w.finish(template))
}

/// Uniform pick from `candidates`.
pub fn sample_object<'a, T, R: Rng + ?Sized>(candidates: &'a [T], rng: &mut R) -> Result<&'a T, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    Ok(&candidates[rng.gen_range(0..candidates.len())])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub template: Template,
    pub emit_x: bool,
    /// Defaults to one sentence per block (N²).
    pub max_sentences: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            template: Template::BlockHasO,
            emit_x: true,
            max_sentences: None,
        }
    }
}

// MIXED pool on grids where noun positions do not exist.
const BASE_WITHOUT_NOUN: [Template; 6] = [
    Template::OInBlock,
    Template::BlockLooksLike,
    Template::QaWhichBlock,
    Template::OLocatedIn,
    Template::CoordHasO,
    Template::BlockHasO,
];

fn distinct_tags<'a>(tags: impl IntoIterator<Item = &'a BlockTag>, limit: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tags {
        if out.len() == limit {
            break;
        }
        if !out.contains(&t.tag) {
            out.push(t.tag.clone());
        }
    }
    out
}

/// Prompt sentences for one image.
///
/// Single-object templates emit one sentence per occupied block (ascending)
/// with a uniformly sampled tag, followed by one sentence per off-canvas
/// object at position `X` when `emit_x` is set. Under MIXED the template of
/// each sentence is drawn before its object. MULTI_TAG groups up to three
/// distinct tags per block; MULTI_POS lists up to three blocks per distinct
/// tag.
pub fn build_prompts<R: Rng + ?Sized>(
    tagmap: &BlockTagMap,
    config: &PromptConfig,
    rng: &mut R,
) -> Result<Vec<Sentence>, PromptError> {
    let grid = tagmap.grid();
    let n = grid.n();
    let cap = config.max_sentences.unwrap_or(grid.block_count());
    let mut out = Vec::new();
    if cap == 0 {
        return Ok(out);
    }
    match config.template {
        Template::MultiTag => {
            for (block, tags) in tagmap.entries() {
                let fill = Fill {
                    positions: vec![block.to_string()],
                    objects: distinct_tags(tags, 3),
                    coords: None,
                };
                out.push(render_sentence(Template::MultiTag, &fill)?);
                if out.len() == cap {
                    return Ok(out);
                }
            }
            if config.emit_x && !tagmap.out_of_border.is_empty() {
                let fill = Fill {
                    positions: vec![OFF_CANVAS.to_string()],
                    objects: distinct_tags(&tagmap.out_of_border, 3),
                    coords: None,
                };
                out.push(render_sentence(Template::MultiTag, &fill)?);
            }
        }
        Template::MultiPos => {
            let mut order: Vec<(String, Vec<String>)> = Vec::new();
            for (block, tags) in tagmap.entries() {
                for t in tags {
                    let pos = block.to_string();
                    match order.iter_mut().find(|(tag, _)| *tag == t.tag) {
                        Some((_, ps)) => {
                            if ps.len() < 3 && !ps.contains(&pos) {
                                ps.push(pos);
                            }
                        }
                        None => order.push((t.tag.clone(), vec![pos])),
                    }
                }
            }
            if config.emit_x {
                for t in &tagmap.out_of_border {
                    match order.iter_mut().find(|(tag, _)| *tag == t.tag) {
                        Some((_, ps)) => {
                            if ps.len() < 3 && !ps.iter().any(|p| p == OFF_CANVAS) {
                                ps.push(OFF_CANVAS.to_string());
                            }
                        }
                        None => order.push((t.tag.clone(), vec![OFF_CANVAS.to_string()])),
                    }
                }
            }
            for (tag, positions) in order.into_iter().take(cap) {
                let fill = Fill {
                    positions,
                    objects: vec![tag],
                    coords: None,
                };
                out.push(render_sentence(Template::MultiPos, &fill)?);
            }
        }
        fixed => {
            if fixed.needs_noun_positions() && n != 3 {
                return Err(PromptError::UnsupportedGrid(n));
            }
            let pool: &[Template] = if n == 3 { &Template::BASE } else { &BASE_WITHOUT_NOUN };
            let pick_template = |rng: &mut R| -> Template {
                if fixed == Template::Mixed {
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    fixed
                }
            };
            for (block, tags) in tagmap.entries() {
                if out.len() == cap {
                    return Ok(out);
                }
                let template = pick_template(rng);
                let chosen = sample_object(tags, rng)?;
                let style = if template.needs_noun_positions() {
                    PositionStyle::Noun
                } else {
                    PositionStyle::Numeric
                };
                let mut fill = Fill::single(position_phrase(Some(block), n, style)?, chosen.tag.clone());
                if template == Template::CoordHasO {
                    fill.coords = chosen.bbox.or_else(|| grid.block_rect(block));
                }
                out.push(render_sentence(template, &fill)?);
            }
            if config.emit_x {
                for t in &tagmap.out_of_border {
                    if out.len() == cap {
                        return Ok(out);
                    }
                    let template = pick_template(rng);
                    out.push(render_sentence(template, &Fill::single(OFF_CANVAS, t.tag.clone()))?);
                }
            }
        }
    }
    out.truncate(cap);
    Ok(out)
}

/// Bookkeeping carried alongside each sample for corpus statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Captions on the source record.
    pub captions: u32,
    /// Detections on the source record (before top-K).
    pub boxes: u32,
    /// Tags per block after assignment.
    pub occupancy: Vec<u32>,
    /// Template of each emitted sentence, in order.
    pub sentence_templates: Vec<Template>,
}

/// Output unit: caption `w`, prompt `q` and their composition `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedSample {
    pub id: String,
    pub caption: String,
    pub prompt: String,
    pub composed: String,
    pub template: Template,
    pub slots: Vec<Slot>,
    pub seed_used: u64,
    #[serde(default)]
    pub meta: SampleMeta,
}

impl PromptedSample {
    pub fn is_prompted(&self) -> bool {
        !self.prompt.is_empty()
    }

    /// Byte offset where the prompt begins in `composed`, if there is one.
    pub fn prompt_start(&self) -> Option<usize> {
        self.is_prompted().then(|| self.composed.len() - self.prompt.len())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }
}

pub const SEPARATOR: &str = " ";

/// `caption + " " + sentences joined by " "`, or the caption unchanged when
/// there are no sentences. `id`, `template` and `seed_used` are left for the
/// caller to fill in.
pub fn compose(caption: &str, sentences: &[Sentence]) -> PromptedSample {
    let mut prompt = String::new();
    let mut slots = Vec::new();
    let base = caption.len() + SEPARATOR.len();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            prompt.push_str(SEPARATOR);
        }
        let at = base + prompt.len();
        slots.extend(s.slots.iter().map(|slot| slot.shifted(at)));
        prompt.push_str(&s.text);
    }
    let composed = if prompt.is_empty() {
        caption.to_string()
    } else {
        let mut c = String::with_capacity(base + prompt.len());
        c.push_str(caption);
        c.push_str(SEPARATOR);
        c.push_str(&prompt);
        c
    };
    PromptedSample {
        id: String::new(),
        caption: caption.to_string(),
        prompt,
        composed,
        template: sentences.first().map_or(Template::BlockHasO, |s| s.template),
        slots,
        seed_used: 0,
        meta: SampleMeta {
            sentence_templates: sentences.iter().map(|s| s.template).collect(),
            ..SampleMeta::default()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    P,
    O,
}

impl MaskKind {
    fn matches(self, kind: SlotKind) -> bool {
        matches!((self, kind), (MaskKind::P, SlotKind::P) | (MaskKind::O, SlotKind::O))
    }
}

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

/// A masked ground truth; `start..end` indexes `masked_text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeTarget {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub id: String,
    pub masked_text: String,
    pub mask_kind: MaskKind,
    pub targets: Vec<ClozeTarget>,
}

impl ClozeRecord {
    /// Puts every target back in place of its mask.
    pub fn restore(&self) -> String {
        let mut out = String::with_capacity(self.masked_text.len());
        let mut at = 0;
        for t in &self.targets {
            out.push_str(&self.masked_text[at..t.start]);
            out.push_str(&t.text);
            at = t.end;
        }
        out.push_str(&self.masked_text[at..]);
        out
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("cloze serialization is infallible")
    }
}

pub fn make_cloze(sample: &PromptedSample, kind: MaskKind, mask_token: &str) -> Result<ClozeRecord, PromptError> {
    let mut masked = String::with_capacity(sample.composed.len());
    let mut targets = Vec::new();
    let mut at = 0;
    for slot in sample.slots.iter().filter(|s| kind.matches(s.kind)) {
        masked.push_str(&sample.composed[at..slot.start]);
        let start = masked.len();
        masked.push_str(mask_token);
        targets.push(ClozeTarget {
            start,
            end: masked.len(),
            text: slot.text.clone(),
        });
        at = slot.end;
    }
    if targets.is_empty() {
        return Err(PromptError::NoSuchSlot(kind));
    }
    masked.push_str(&sample.composed[at..]);
    Ok(ClozeRecord {
        id: sample.id.clone(),
        masked_text: masked,
        mask_kind: kind,
        targets,
    })
}

/// Whitespace-separated words of the composed text, each flagged `true` when
/// it belongs to the prompt region (the tokens a pretext LM loss would cover).
pub fn pretext_sequence(sample: &PromptedSample) -> Vec<(&str, bool)> {
    let boundary = sample.prompt_start().unwrap_or(usize::MAX);
    let base = sample.composed.as_ptr() as usize;
    sample
        .composed
        .split_whitespace()
        .map(|w| (w, w.as_ptr() as usize - base >= boundary))
        .collect()
}
