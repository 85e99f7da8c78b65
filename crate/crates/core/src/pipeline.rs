//! Corpus orchestration: per-record processing, ordered parallel runs with a
//! rejects file, and dataset statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose as compose_affine, Affine2D, BlockGrid, GeometryError};
use crate::ingest::{
    parse_embedding_table, parse_record, validate_record, EmbeddingMatrix, ImageRecord, IngestError,
    TableError, Violation,
};
use crate::par;
use crate::prompt::{build_prompts, compose, PromptConfig, PromptError, PromptedSample, Template};
use crate::tagging::{assign_to_blocks, select_top_k, tag_blocks_by_embedding, BlockTagMap, TaggingError};
use crate::vocab::DEFAULT_VOCAB_SIZE;

pub const DEFAULT_GRID: u32 = 3;
pub const DEFAULT_TOP_K: usize = 10;

/// Lines handed to the workers per batch; also the reorder window.
const CHUNK_LINES: usize = 8192;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record has no usable annotations and partial output is disabled")]
    NoAnnotations,
    #[error("record has no block embeddings")]
    MissingEmbeddings,
    #[error("record failed validation: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::NoAnnotations => "NoAnnotations",
            PipelineError::MissingEmbeddings => "MissingEmbeddings",
            PipelineError::Invalid(_) => "ValidationError",
            PipelineError::DuplicateId(_) => "DuplicateId",
            PipelineError::Ingest(e) => e.kind(),
            PipelineError::Tagging(_) => "TaggingError",
            PipelineError::Prompt(_) => "PromptError",
            PipelineError::Geometry(_) => "GeometryError",
            PipelineError::Table(_) => "TableError",
            PipelineError::Config(_) => "ConfigError",
            PipelineError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    Detector,
    Embedding,
}

/// Geometric policies. Photometric operations never move boxes, so they are
/// accepted by [`Augmentation::parse`] and treated as the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometricPolicy {
    Identity,
    HFlip,
    VFlip,
    Rot180,
    /// Two ops drawn (with replacement) from Identity, AutoContrast,
    /// Brightness, Sharpness, Equalize, ShearX, ShearY, TranslateX,
    /// TranslateY and Rotate, each applied with probability 0.5 at magnitude
    /// 5 of 10: ±15°, shear ±0.15, translate ±5 px.
    RandAugment,
}

const PHOTOMETRIC: [&str; 9] = [
    "autocontrast",
    "equalize",
    "brightness",
    "sharpness",
    "color",
    "contrast",
    "posterize",
    "solarize",
    "invert",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    /// A fixed transform; `canvas` overrides the output canvas size when the
    /// transform changes it (crops, resizes).
    Explicit {
        transform: Affine2D,
        canvas: Option<(f64, f64)>,
    },
    Policy(GeometricPolicy),
}

impl Augmentation {
    /// `none`, `hflip`, `vflip`, `rot180`, `randaugment`, a photometric op
    /// name, or `affine:a,b,c,d,tx,ty[@WxH]`.
    pub fn parse(spec: &str) -> Result<Self, PipelineError> {
        let s = spec.trim().to_ascii_lowercase();
        let bad = || PipelineError::Config(format!("unrecognized augmentation {spec:?}"));
        if let Some(rest) = s.strip_prefix("affine:") {
            let (coeffs, canvas) = match rest.split_once('@') {
                Some((c, wh)) => {
                    let (w, h) = wh.split_once('x').ok_or_else(bad)?;
                    let w: f64 = w.trim().parse().map_err(|_| bad())?;
                    let h: f64 = h.trim().parse().map_err(|_| bad())?;
                    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                        return Err(bad());
                    }
                    (c, Some((w, h)))
                }
                None => (rest, None),
            };
            let v: Vec<f64> = coeffs
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad())?;
            let [a, b, c, d, tx, ty] = v[..] else {
                return Err(bad());
            };
            let transform = Affine2D::new(a, b, c, d, tx, ty)?;
            return Ok(Augmentation::Explicit { transform, canvas });
        }
        let policy = match s.as_str() {
            "none" | "identity" => GeometricPolicy::Identity,
            "hflip" => GeometricPolicy::HFlip,
            "vflip" => GeometricPolicy::VFlip,
            "rot180" => GeometricPolicy::Rot180,
            "randaugment" => GeometricPolicy::RandAugment,
            p if PHOTOMETRIC.contains(&p) => GeometricPolicy::Identity,
            _ => return Err(bad()),
        };
        Ok(Augmentation::Policy(policy))
    }

    /// The transform for one image and the canvas it produces.
    pub fn resolve<R: Rng + ?Sized>(&self, width: f64, height: f64, rng: &mut R) -> (Affine2D, (f64, f64)) {
        let same = (width, height);
        match *self {
            Augmentation::Explicit { transform, canvas } => (transform, canvas.unwrap_or(same)),
            Augmentation::Policy(p) => {
                let t = match p {
                    GeometricPolicy::Identity => Affine2D::IDENTITY,
                    GeometricPolicy::HFlip => Affine2D { a: -1.0, tx: width, ..Affine2D::IDENTITY },
                    GeometricPolicy::VFlip => Affine2D { d: -1.0, ty: height, ..Affine2D::IDENTITY },
                    GeometricPolicy::Rot180 => {
                        compose_affine(&Affine2D::translate(width, height), &Affine2D::scale(-1.0, -1.0))
                    }
                    GeometricPolicy::RandAugment => rand_augment(width, height, rng),
                };
                (t, same)
            }
        }
    }
}

fn rand_augment<R: Rng + ?Sized>(width: f64, height: f64, rng: &mut R) -> Affine2D {
    const OPS: usize = 10;
    let mut t = Affine2D::IDENTITY;
    for _ in 0..2 {
        let op = rng.gen_range(0..OPS);
        let apply = rng.gen_bool(0.5);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if !apply {
            continue;
        }
        let step = match op {
            5 => Affine2D::shear(0.15 * sign, 0.0),
            6 => Affine2D::shear(0.0, 0.15 * sign),
            7 => Affine2D::translate(5.0 * sign, 0.0),
            8 => Affine2D::translate(0.0, 5.0 * sign),
            9 => Affine2D::rotate_about(15.0 * sign, width / 2.0, height / 2.0),
            // identity and the photometric ops
            _ => Affine2D::IDENTITY,
        };
        t = compose_affine(&step, &t);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid_n: u32,
    pub top_k: usize,
    pub mode: TagMode,
    pub template: Template,
    pub vocab_size: usize,
    pub global_seed: u64,
    pub partial_ok: bool,
    pub emit_x: bool,
    /// Sentence cap per image; `None` means N².
    pub max_sentences: Option<usize>,
    pub augmentation: Option<Augmentation>,
    /// Worker threads; `0` lets the thread pool decide.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid_n: DEFAULT_GRID,
            top_k: DEFAULT_TOP_K,
            mode: TagMode::Detector,
            template: Template::BlockHasO,
            vocab_size: DEFAULT_VOCAB_SIZE,
            global_seed: 0,
            partial_ok: true,
            emit_x: true,
            max_sentences: None,
            augmentation: None,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.grid_n == 0 {
            return Err(PipelineError::Config("grid must be at least 1".into()));
        }
        if self.grid_n > 1024 {
            return Err(PipelineError::Config("grid may be at most 1024".into()));
        }
        if self.top_k == 0 {
            return Err(PipelineError::Config("top-k must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(PipelineError::Config("vocab size must be at least 1".into()));
        }
        if self.template == Template::NounBlockHasO && self.grid_n != 3 {
            return Err(PipelineError::Config(format!(
                "{} needs a 3x3 grid",
                Template::NounBlockHasO
            )));
        }
        Ok(())
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            template: self.template,
            emit_x: self.emit_x,
            max_sentences: self.max_sentences,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-record seed derived from the run seed and the record id only, so
/// scheduling can never change a record's random choices.
pub fn record_seed(global_seed: u64, id: &str) -> u64 {
    splitmix64(global_seed ^ splitmix64(fnv1a(id.as_bytes())))
}

/// Prompt sampling stream for a record.
pub fn record_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Augmentation draws come from their own stream so that turning augmentation
// on does not shift prompt sampling.
fn augmentation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Block tags for a record, or `None` when the record carries nothing to tag.
fn tag_record(
    rec: &ImageRecord,
    config: &PipelineConfig,
    table: Option<&EmbeddingMatrix>,
    seed: u64,
) -> Result<Option<BlockTagMap>, PipelineError> {
    let (w, h) = (f64::from(rec.width), f64::from(rec.height));
    match config.mode {
        TagMode::Detector => {
            if rec.detections.is_empty() {
                return Ok(None);
            }
            let top = select_top_k(&rec.detections, config.top_k);
            let (transform, (cw, ch)) = match &config.augmentation {
                Some(aug) => {
                    let (t, canvas) = aug.resolve(w, h, &mut augmentation_rng(seed));
                    (Some(t), canvas)
                }
                None => (None, (w, h)),
            };
            let grid = BlockGrid::new(config.grid_n, cw, ch)?;
            Ok(Some(assign_to_blocks(&grid, &top, transform.as_ref())))
        }
        TagMode::Embedding => {
            let table = table.ok_or_else(|| PipelineError::Config("embedding mode needs an embedding table".into()))?;
            if rec.block_embeddings.is_none() {
                return Ok(None);
            }
            let grid = BlockGrid::new(config.grid_n, w, h)?;
            Ok(Some(tag_blocks_by_embedding(rec, table, &grid)?))
        }
    }
}

/// Tags, prompts and composes one record.
pub fn process_record(
    rec: &ImageRecord,
    config: &PipelineConfig,
    table: Option<&EmbeddingMatrix>,
) -> Result<PromptedSample, PipelineError> {
    let seed = record_seed(config.global_seed, &rec.id);
    let mut rng = record_rng(seed);
    let caption_idx = if rec.captions.len() > 1 {
        rng.gen_range(0..rec.captions.len())
    } else {
        0
    };
    let caption = &rec.captions[caption_idx];

    let tagmap = tag_record(rec, config, table, seed)?;
    let (sentences, occupancy) = match &tagmap {
        Some(map) => (build_prompts(map, &config.prompt_config(), &mut rng)?, map.occupancy()),
        None => (Vec::new(), vec![0; (config.grid_n as usize).pow(2)]),
    };
    if sentences.is_empty() && !config.partial_ok {
        return Err(match (config.mode, tagmap.is_none()) {
            (TagMode::Embedding, true) => PipelineError::MissingEmbeddings,
            _ => PipelineError::NoAnnotations,
        });
    }

    let mut sample = compose(caption, &sentences);
    sample.id = rec.id.clone();
    sample.template = config.template;
    sample.seed_used = seed;
    sample.meta.captions = rec.captions.len() as u32;
    sample.meta.boxes = rec.detections.len() as u32;
    sample.meta.occupancy = occupancy;
    Ok(sample)
}

/// Counts over a generated corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: u64,
    pub captions: u64,
    pub records_with_boxes: u64,
    pub prompted: u64,
    pub unprompted: u64,
    /// Emitted sentences per template.
    pub per_template: BTreeMap<Template, u64>,
    /// In-canvas objects per block index.
    pub occupancy: Vec<u64>,
}

impl DatasetStats {
    pub fn add(&mut self, sample: &PromptedSample) {
        let meta = &sample.meta;
        self.images += 1;
        self.captions += u64::from(meta.captions);
        self.records_with_boxes += u64::from(meta.boxes > 0);
        if sample.is_prompted() {
            self.prompted += 1;
        } else {
            self.unprompted += 1;
        }
        for t in &meta.sentence_templates {
            *self.per_template.entry(*t).or_insert(0) += 1;
        }
        if self.occupancy.len() < meta.occupancy.len() {
            self.occupancy.resize(meta.occupancy.len(), 0);
        }
        for (acc, &v) in self.occupancy.iter_mut().zip(&meta.occupancy) {
            *acc += u64::from(v);
        }
    }

    pub fn merge(mut self, other: DatasetStats) -> DatasetStats {
        self.images += other.images;
        self.captions += other.captions;
        self.records_with_boxes += other.records_with_boxes;
        self.prompted += other.prompted;
        self.unprompted += other.unprompted;
        for (t, c) in other.per_template {
            *self.per_template.entry(t).or_insert(0) += c;
        }
        if self.occupancy.len() < other.occupancy.len() {
            self.occupancy.resize(other.occupancy.len(), 0);
        }
        for (acc, v) in self.occupancy.iter_mut().zip(other.occupancy) {
            *acc += v;
        }
        self
    }

    pub fn occupancy_total(&self) -> u64 {
        self.occupancy.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub stats: DatasetStats,
    pub rejected: u64,
}

#[derive(Debug, Serialize)]
struct RejectLine<'a> {
    line: u64,
    offset: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    kind: &'static str,
    error: String,
}

struct RawLine {
    number: u64,
    offset: u64,
    bytes: Vec<u8>,
}

struct Produced {
    id: String,
    line: String,
    sample: PromptedSample,
}

fn process_line(
    raw: &RawLine,
    config: &PipelineConfig,
    table: Option<&EmbeddingMatrix>,
) -> Result<Produced, (Option<String>, PipelineError)> {
    let rec = parse_record(&raw.bytes, raw.offset).map_err(|e| (None, e.into()))?;
    let report = validate_record(&rec, config, table);
    if !report.is_admissible() {
        return Err((Some(rec.id), PipelineError::Invalid(report.violations)));
    }
    match process_record(&rec, config, table) {
        Ok(sample) => Ok(Produced {
            line: sample.to_line(),
            id: rec.id,
            sample,
        }),
        Err(e) => Err((Some(rec.id), e)),
    }
}

/// Reads up to `max` non-blank lines. Returns `false` at end of input.
fn read_chunk<R: BufRead>(
    reader: &mut R,
    chunk: &mut Vec<RawLine>,
    max: usize,
    number: &mut u64,
    offset: &mut u64,
) -> io::Result<bool> {
    chunk.clear();
    while chunk.len() < max {
        let mut bytes = Vec::new();
        let n = reader.read_until(b'\n', &mut bytes)?;
        if n == 0 {
            return Ok(false);
        }
        *number += 1;
        let at = *offset;
        *offset += n as u64;
        if bytes.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        chunk.push(RawLine {
            number: *number,
            offset: at,
            bytes,
        });
    }
    Ok(true)
}

/// Streams records from `input` to `output` in input order. Records that
/// fail go to `rejects` with their error. Output bytes depend only on the
/// input bytes and `config` (never on `config.workers`).
pub fn run_streams<R, W, J>(
    config: &PipelineConfig,
    table: Option<&EmbeddingMatrix>,
    input: R,
    mut output: W,
    mut rejects: J,
) -> Result<RunReport, PipelineError>
where
    R: BufRead + Send,
    W: Write + Send,
    J: Write + Send,
{
    config.check()?;
    if config.mode == TagMode::Embedding && table.is_none() {
        return Err(PipelineError::Config("embedding mode needs --embeddings".into()));
    }
    let mut input = input;
    par::with_workers(config.workers, || -> Result<RunReport, PipelineError> {
        let mut report = RunReport::default();
        let mut seen: HashSet<String> = HashSet::new();
        let mut chunk = Vec::with_capacity(CHUNK_LINES);
        let (mut number, mut offset) = (0u64, 0u64);
        loop {
            let more = read_chunk(&mut input, &mut chunk, CHUNK_LINES, &mut number, &mut offset)?;
            let results = par::map_ordered(&chunk, |raw| process_line(raw, config, table));
            for (raw, result) in chunk.iter().zip(results) {
                let failure = match result {
                    Ok(p) => {
                        if seen.insert(p.id.clone()) {
                            output.write_all(p.line.as_bytes())?;
                            output.write_all(b"\n")?;
                            report.stats.add(&p.sample);
                            continue;
                        }
                        (Some(p.id.clone()), PipelineError::DuplicateId(p.id))
                    }
                    Err(f) => f,
                };
                let (id, err) = failure;
                let rec = RejectLine {
                    line: raw.number,
                    offset: match &err {
                        PipelineError::Ingest(e) => e.offset(),
                        _ => raw.offset,
                    },
                    id: id.as_deref(),
                    kind: err.kind(),
                    error: err.to_string(),
                };
                serde_json::to_writer(&mut rejects, &rec).map_err(io::Error::other)?;
                rejects.write_all(b"\n")?;
                report.rejected += 1;
            }
            if !more {
                break;
            }
        }
        output.flush()?;
        rejects.flush()?;
        Ok(report)
    })?
}

#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Defaults to `<output>.rejects.jsonl`.
    pub rejects: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl RunPaths {
    pub fn rejects_path(&self) -> PathBuf {
        self.rejects.clone().unwrap_or_else(|| {
            let mut p = self.output.clone().into_os_string();
            p.push(".rejects.jsonl");
            PathBuf::from(p)
        })
    }
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingMatrix, PipelineError> {
    let bytes = std::fs::read(path)?;
    Ok(parse_embedding_table(&bytes)?)
}

/// File-based [`run_streams`].
pub fn run(config: &PipelineConfig, paths: &RunPaths) -> Result<RunReport, PipelineError> {
    config.check()?;
    let table = match (&paths.embeddings, config.mode) {
        (Some(p), _) => Some(load_embedding_table(p)?),
        (None, TagMode::Embedding) => {
            return Err(PipelineError::Config("embedding mode needs --embeddings".into()))
        }
        (None, TagMode::Detector) => None,
    };
    let input = BufReader::with_capacity(1 << 20, File::open(&paths.input)?);
    let output = BufWriter::with_capacity(1 << 20, File::create(&paths.output)?);
    let rejects = BufWriter::new(File::create(paths.rejects_path())?);
    run_streams(config, table.as_ref(), input, output, rejects)
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("schema error on line {line}: {message}")]
    Schema { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Recounts [`DatasetStats`] from a generated corpus.
pub fn compute_stats<R: BufRead + Send>(input: R) -> Result<DatasetStats, StatsError> {
    let mut input = input;
    let mut total = DatasetStats::default();
    let mut chunk = Vec::with_capacity(CHUNK_LINES);
    let (mut number, mut offset) = (0u64, 0u64);
    loop {
        let more = read_chunk(&mut input, &mut chunk, CHUNK_LINES, &mut number, &mut offset)?;
        let part = par::fold_merge(
            &chunk,
            || Ok(DatasetStats::default()),
            |acc: Result<DatasetStats, StatsError>, raw| {
                let mut acc = acc?;
                let sample: PromptedSample =
                    serde_json::from_slice(&raw.bytes).map_err(|e| StatsError::Schema {
                        line: raw.number,
                        message: e.to_string(),
                    })?;
                acc.add(&sample);
                Ok(acc)
            },
            |a, b| match (a, b) {
                (Ok(a), Ok(b)) => Ok(a.merge(b)),
                // keep the earliest failing line so the error is deterministic
                (Err(StatsError::Schema { line: la, message: ma }), Err(StatsError::Schema { line: lb, message: mb })) => {
                    Err(if la <= lb {
                        StatsError::Schema { line: la, message: ma }
                    } else {
                        StatsError::Schema { line: lb, message: mb }
                    })
                }
                (Err(e), _) | (_, Err(e)) => Err(e),
            },
        )?;
        total = total.merge(part);
        if !more {
            break;
        }
    }
    Ok(total)
}
