use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ptp_corpus::ingest::parse_record;
use ptp_corpus::par;
use ptp_corpus::pipeline::{self, Augmentation, PipelineConfig, RunPaths, TagMode, DEFAULT_GRID, DEFAULT_TOP_K};
use ptp_corpus::prompt::{make_cloze, MaskKind, PromptError, PromptedSample, Template, DEFAULT_MASK_TOKEN};
use ptp_corpus::vocab::{build_vocabulary, DEFAULT_VOCAB_SIZE};

#[derive(Parser)]
#[command(name = "ptp", version, about = "Position-guided prompt corpus compiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a prompted corpus from image records.
    Generate(GenerateArgs),
    /// Build the phrase vocabulary from captions.
    Vocab(VocabArgs),
    /// Turn a generated corpus into masked cloze probes.
    Cloze(ClozeArgs),
    /// Count images, captions, prompts and block occupancy in a generated corpus.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Detector,
    Embedding,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Defaults to `<output>.rejects.jsonl`.
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[arg(long = "grid", default_value_t = DEFAULT_GRID)]
    grid: u32,
    #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "detector")]
    mode: ModeArg,
    /// Template id (e.g. BLOCK_HAS_O, MULTI_TAG) or `mixed`.
    #[arg(long, default_value = "BLOCK_HAS_O")]
    template: String,
    #[arg(long = "vocab-size", default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "partial-ok", overrides_with = "no_partial_ok")]
    partial_ok: bool,
    /// Reject records that end up without any prompt sentence.
    #[arg(long = "no-partial-ok")]
    no_partial_ok: bool,
    #[arg(long = "emit-x", overrides_with = "no_emit_x")]
    emit_x: bool,
    /// Drop objects pushed off the canvas instead of emitting position X.
    #[arg(long = "no-emit-x")]
    no_emit_x: bool,
    /// Cap on sentences per image (default: one per block).
    #[arg(long = "max-sentences")]
    max_sentences: Option<usize>,
    /// none | hflip | vflip | rot180 | randaugment | affine:a,b,c,d,tx,ty[@WxH].
    /// Blocks are always laid out on the post-augmentation canvas.
    #[arg(long)]
    augment: Option<String>,
    /// Phrase embedding table (required in embedding mode).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, env = "PTP_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VocabFormat {
    /// Image records, one JSON object per line.
    Records,
    /// One caption per line.
    Text,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long = "vocab-size", default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long, value_enum, default_value = "records")]
    format: VocabFormat,
    #[arg(long, env = "PTP_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    P,
    O,
    Both,
}

#[derive(Args)]
struct ClozeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mask: MaskArg,
    #[arg(long = "mask-token", default_value = DEFAULT_MASK_TOKEN)]
    mask_token: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, env = "PTP_WORKERS", default_value_t = 0)]
    workers: usize,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::with_capacity(1 << 20, f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::with_capacity(1 << 20, f))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let template = Template::from_id(&args.template)
        .with_context(|| format!("unknown template {:?}", args.template))?;
    let augmentation = args.augment.as_deref().map(Augmentation::parse).transpose()?;
    let config = PipelineConfig {
        grid_n: args.grid,
        top_k: args.top_k,
        mode: match args.mode {
            ModeArg::Detector => TagMode::Detector,
            ModeArg::Embedding => TagMode::Embedding,
        },
        template,
        vocab_size: args.vocab_size,
        global_seed: args.seed,
        partial_ok: !args.no_partial_ok,
        emit_x: !args.no_emit_x,
        max_sentences: args.max_sentences,
        augmentation,
        workers: args.workers,
    };
    let paths = RunPaths {
        input: args.input,
        output: args.output,
        rejects: args.rejects,
        embeddings: args.embeddings,
    };
    let report = pipeline::run(&config, &paths)?;
    if report.rejected > 0 {
        eprintln!(
            "{} record(s) rejected, see {}",
            report.rejected,
            paths.rejects_path().display()
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn vocab(args: VocabArgs) -> Result<()> {
    let mut captions = Vec::new();
    let mut skipped = 0u64;
    let mut offset = 0u64;
    for line in open(&args.input)?.split(b'\n') {
        let line = line?;
        let at = offset;
        offset += line.len() as u64 + 1;
        match args.format {
            VocabFormat::Text => captions.push(String::from_utf8_lossy(&line).into_owned()),
            VocabFormat::Records => {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match parse_record(&line, at) {
                    Ok(rec) => captions.extend(rec.captions),
                    Err(_) => skipped += 1,
                }
            }
        }
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} unparseable record(s)");
    }
    let vocab = par::with_workers(args.workers, || build_vocabulary(&captions, args.vocab_size))??;
    let mut out = create(&args.output)?;
    vocab.write_tsv(&mut out)?;
    out.flush()?;
    eprintln!("{} phrases from {} captions", vocab.len(), captions.len());
    Ok(())
}

fn cloze(args: ClozeArgs) -> Result<()> {
    let kinds: &[MaskKind] = match args.mask {
        MaskArg::P => &[MaskKind::P],
        MaskArg::O => &[MaskKind::O],
        MaskArg::Both => &[MaskKind::P, MaskKind::O],
    };
    let mut out = create(&args.output)?;
    let (mut written, mut skipped) = (0u64, 0u64);
    for (i, line) in open(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: PromptedSample =
            serde_json::from_str(&line).with_context(|| format!("line {}: not a generated sample", i + 1))?;
        for &kind in kinds {
            match make_cloze(&sample, kind, &args.mask_token) {
                Ok(c) => {
                    writeln!(out, "{}", c.to_line())?;
                    written += 1;
                }
                Err(PromptError::NoSuchSlot(_)) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    out.flush()?;
    eprintln!("{written} cloze record(s) written, {skipped} sample/mask pair(s) without slots");
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let input = open(&args.input)?;
    let stats = par::with_workers(args.workers, || pipeline::compute_stats(input))??;
    let text = serde_json::to_string_pretty(&stats)?;
    match args.output {
        Some(p) => {
            let mut out = create(&p)?;
            writeln!(out, "{text}")?;
            out.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Vocab(a) => vocab(a),
        Command::Cloze(a) => cloze(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
