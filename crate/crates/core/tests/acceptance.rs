//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --test acceptance` (add `--release` for timing
//! numbers representative of production builds).

mod common;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ptp_corpus::geometry::{apply_affine, compose, Affine2D, BBox, BlockGrid};
use ptp_corpus::ingest::EmbeddingMatrix;
use ptp_corpus::pipeline::{
    self, compute_stats, process_record, run_streams, PipelineConfig, RunPaths, DEFAULT_GRID, DEFAULT_TOP_K,
};
use ptp_corpus::prompt::{make_cloze, render, Fill, MaskKind, PromptError, Template, DEFAULT_MASK_TOKEN};
use ptp_corpus::tagging::{embed_tag, select_top_k};
use ptp_corpus::vocab::{build_vocabulary, DEFAULT_VOCAB_SIZE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, took: Duration) -> Result<(), String> {
    ensure(took < limit, || format!("took {took:.2?}, budget {limit:?}"))
}

fn c01_grid_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut checked = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8u32);
        let w = f64::from(rng.gen_range(1..=4096u32));
        let h = f64::from(rng.gen_range(1..=4096u32));
        let grid = BlockGrid::new(n, w, h).map_err(|e| e.to_string())?;
        for k in 0..100 {
            // a quarter of the points sit exactly on a published edge
            let (px, py) = if k % 4 == 0 {
                let i = rng.gen_range(0..=n);
                let j = rng.gen_range(0..=n);
                (f64::from(i) * w / f64::from(n), f64::from(j) * h / f64::from(n))
            } else {
                (rng.gen_range(-0.1 * w..1.1 * w), rng.gen_range(-0.1 * h..1.1 * h))
            };
            let got = grid.block_of_point(px, py);
            let want = common::brute_block(n, w, h, px, py);
            ensure(got == want, || format!("n={n} {w}x{h} point ({px},{py}): got {got:?}, brute force {want:?}"))?;
            if let Some(b) = got {
                ensure(b < n * n, || format!("index {b} outside 0..{}", n * n))?;
            }
            checked += 1;
        }
    }
    let took = start.elapsed();
    within(Duration::from_secs(5), took)?;
    Ok(format!("{checked} points agree with brute force in {took:.2?}"))
}

fn c02_template_golden() -> Outcome {
    let start = Instant::now();
    let coords = BBox::new(10.0, 10.0, 30.0, 40.0);
    let single = Fill::single("4", "dog");
    let cases: Vec<(Template, Fill, &str)> = vec![
        (Template::OInBlock, single.clone(), "The dog is in the block 4."),
        (Template::BlockLooksLike, single.clone(), "The block 4 looks like dog."),
        (Template::QaWhichBlock, single.clone(), "The dog is in which block? In 4."),
        (Template::OLocatedIn, single.clone(), "The dog is located in block 4."),
        (Template::CoordHasO, single.clone().with_coords(coords), "(10, 10, 30, 40) has a dog."),
        (Template::NounBlockHasO, Fill::single("upper left", "dog"), "The block in upper left has a dog."),
        (Template::BlockHasO, single.clone(), "The block 4 has a dog."),
        (
            Template::MultiTag,
            Fill {
                positions: vec!["4".into()],
                objects: vec!["dog".into(), "cat".into(), "man".into()],
                coords: None,
            },
            "The block 4 has objects dog, cat and man.",
        ),
        (
            Template::MultiPos,
            Fill {
                positions: vec!["4".into(), "5".into(), "7".into()],
                objects: vec!["dog".into()],
                coords: None,
            },
            "The dog is located in which region? In 4, 5 and 7.",
        ),
        (Template::RegionSynonym, single, "The object in region 4 looks like dog."),
    ];
    for (t, fill, want) in &cases {
        let got = render(*t, fill).map_err(|e| format!("{t}: {e}"))?;
        ensure(got == *want, || format!("{t}: got {got:?}, want {want:?}"))?;
    }
    let took = start.elapsed();
    within(Duration::from_secs(1), took)?;
    Ok(format!("{} templates byte-exact in {took:.2?}", cases.len()))
}

fn random_table(rng: &mut ChaCha8Rng, m: usize, d: usize) -> (EmbeddingMatrix, Vec<Vec<f32>>) {
    let rows: Vec<Vec<f32>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let phrases = (0..m).map(|i| format!("phrase{i}")).collect();
    let table = EmbeddingMatrix::new(phrases, d, rows.concat()).expect("valid table");
    (table, rows)
}

fn c03_eq1_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let start = Instant::now();
    let (mut matched, mut invariant) = (0, 0);
    for case in 0..500 {
        let m = rng.gen_range(1..=50);
        let d = rng.gen_range(1..=16);
        let (table, rows) = random_table(&mut rng, m, d);
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (got, _) = embed_tag(&v, &table).map_err(|e| e.to_string())?;
        let want = common::softmax_argmax(&v, &rows);
        ensure(got == want, || format!("case {case}: embed_tag {got}, softmax oracle {want}"))?;
        matched += 1;

        let scale = 2f32.powi(rng.gen_range(-8..=8));
        let scaled: Vec<f32> = v.iter().map(|x| x * scale).collect();
        let (again, _) = embed_tag(&scaled, &table).map_err(|e| e.to_string())?;
        ensure(again == got, || format!("case {case}: scaling by {scale} moved argmax {got} -> {again}"))?;
        invariant += 1;
    }
    let took = start.elapsed();
    within(Duration::from_secs(5), took)?;
    Ok(format!("{matched}/500 oracle matches, {invariant}/500 scale-invariant, {took:.2?}"))
}

fn c04_affine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..1000 {
        let b = BBox::new(
            rng.gen_range(-500.0..500.0),
            rng.gen_range(-500.0..500.0),
            rng.gen_range(0.0..500.0),
            rng.gen_range(0.0..500.0),
        );
        let got = apply_affine(&Affine2D::IDENTITY, &b);
        ensure(got == b, || format!("identity moved {b:?} to {got:?}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t1 = compose(
            &Affine2D::translate(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
            &Affine2D::scale(rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0)),
        );
        let t2 = compose(
            &Affine2D::scale(rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0)),
            &Affine2D::translate(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
        );
        let both = compose(&t2, &t1);
        let (px, py) = (rng.gen_range(-1000.0..1000.0), rng.gen_range(-1000.0..1000.0));
        let (sx, sy) = t1.apply_point(px, py);
        let (sx, sy) = t2.apply_point(sx, sy);
        let (cx, cy) = both.apply_point(px, py);
        worst = worst.max((sx - cx).abs()).max((sy - cy).abs());
    }
    ensure(worst < 1e-9, || format!("composition pointwise error {worst:e}"))?;

    let rot = Affine2D::rotate_about(90.0, 50.0, 50.0);
    let hull = apply_affine(&rot, &BBox::new(0.0, 0.0, 10.0, 20.0));
    let stated = BBox::new(40.0, 0.0, 20.0, 10.0);
    let other = apply_affine(&Affine2D::rotate_about(-90.0, 50.0, 50.0), &BBox::new(0.0, 0.0, 10.0, 20.0));
    ensure(hull == stated, || {
        format!(
            "identity exact, composition error {worst:e}; 90 degree hull is {:?} (-90 gives {:?}), expected {:?}",
            [hull.x, hull.y, hull.w, hull.h],
            [other.x, other.y, other.w, other.h],
            [stated.x, stated.y, stated.w, stated.h]
        )
    })?;
    Ok(format!("identity exact on 1000 boxes, composition error {worst:e}, rotation hull matches"))
}

fn run_bytes(config: &PipelineConfig, input: &[u8]) -> Result<(Vec<u8>, u64), String> {
    let mut out = Vec::new();
    let mut rejects = Vec::new();
    let report = run_streams(config, None, input, &mut out, &mut rejects).map_err(|e| e.to_string())?;
    Ok((out, report.rejected))
}

fn c05_determinism() -> Outcome {
    let input = common::corpus_bytes(505, 100_000, 10, 3);
    let start = Instant::now();
    let one = PipelineConfig {
        global_seed: 7,
        workers: 1,
        ..PipelineConfig::default()
    };
    let eight = PipelineConfig { workers: 8, ..one.clone() };
    let (a, ra) = run_bytes(&one, &input)?;
    let (b, rb) = run_bytes(&eight, &input)?;
    let took = start.elapsed();
    ensure(ra == 0 && rb == 0, || format!("unexpected rejects: {ra} / {rb}"))?;
    ensure(a == b, || {
        let at = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        format!("outputs differ at byte {at} ({} vs {} bytes)", a.len(), b.len())
    })?;
    within(Duration::from_secs(120), took)?;
    Ok(format!("{} identical bytes at workers 1 and 8, {took:.2?} for both runs", a.len()))
}

fn c06_fallback() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let config = PipelineConfig::default();
    for i in 0..10_000 {
        let mut rec = common::record(&mut rng, i, 0, 1);
        rec.detections.clear();
        let sample = process_record(&rec, &config, None).map_err(|e| format!("{}: {e}", rec.id))?;
        ensure(sample.composed.as_bytes() == rec.captions[0].as_bytes(), || {
            format!("{}: composed {:?} != caption {:?}", rec.id, sample.composed, rec.captions[0])
        })?;
        ensure(sample.slots.is_empty() && sample.prompt.is_empty(), || format!("{}: stray prompt", rec.id))?;
    }
    Ok("10000 zero-detection records compose to their caption".into())
}

fn c07_cloze() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let templates = [
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
    let mut round_trips = 0;
    for i in 0..10_000 {
        let mut rec = common::record(&mut rng, i, 10, 2);
        if rec.detections.is_empty() {
            let (w, h) = (rec.width, rec.height);
            rec.detections.push(common::detection(&mut rng, w, h));
        }
        let config = PipelineConfig {
            template: templates[i % templates.len()],
            ..PipelineConfig::default()
        };
        let sample = process_record(&rec, &config, None).map_err(|e| format!("{}: {e}", rec.id))?;
        for kind in [MaskKind::P, MaskKind::O] {
            match make_cloze(&sample, kind, DEFAULT_MASK_TOKEN) {
                Ok(c) => {
                    let back = c.restore();
                    ensure(back == sample.composed, || format!("{} {kind:?}: {back:?} != {:?}", rec.id, sample.composed))?;
                    round_trips += 1;
                }
                // COORD sentences carry no position slot
                Err(PromptError::NoSuchSlot(MaskKind::P))
                    if kind == MaskKind::P && sample.meta.sentence_templates.iter().all(|t| *t == Template::CoordHasO) => {}
                Err(e) => return Err(format!("{} {kind:?}: {e}", rec.id)),
            }
        }
    }
    Ok(format!("10000 samples, {round_trips} masked/restored pairs reproduce composed"))
}

fn c08_top_k() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..1000 {
        let (w, h) = (rng.gen_range(32..1024), rng.gen_range(32..1024));
        let n = rng.gen_range(0..60);
        let dets: Vec<_> = (0..n).map(|_| common::detection(&mut rng, w, h)).collect();
        let k = rng.gen_range(1..=20);
        let got = select_top_k(&dets, k);
        let want = common::sort_top_k(&dets, k);
        ensure(got == want, || format!("case {case}: n={n} k={k} disagrees with full sort"))?;
    }
    Ok("1000 detection lists match the full-sort oracle".into())
}

fn oracle_tokens(caption: &str) -> Vec<String> {
    let stop = ptp_corpus::vocab::stopwords();
    let mut words: Vec<Option<String>> = Vec::new();
    let mut cur = String::new();
    for ch in caption.chars().chain(std::iter::once(' ')) {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            let keep = !stop.contains(cur.as_str()) && !cur.chars().all(char::is_numeric);
            words.push(keep.then(|| cur.clone()));
            cur.clear();
        }
    }
    let mut out: Vec<String> = words.iter().flatten().cloned().collect();
    for i in 1..words.len() {
        if let (Some(a), Some(b)) = (&words[i - 1], &words[i]) {
            out.push(format!("{a} {b}"));
        }
    }
    out
}

fn c09_vocab() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    // skewed draws over a large word list so the M cut falls inside ties
    let captions: Vec<String> = (0..50_000)
        .map(|_| {
            let n = rng.gen_range(3..12);
            (0..n)
                .map(|_| {
                    let r: f64 = rng.gen_range(0.0..1.0);
                    let w = (r * r * 3000.0) as usize;
                    if w < common::WORDS.len() { common::WORDS[w].to_string() } else { format!("w{w}") }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut shuffled = captions.clone();
    shuffled.shuffle(&mut rng);
    let a = build_vocabulary(&captions, DEFAULT_VOCAB_SIZE).map_err(|e| e.to_string())?;
    let b = build_vocabulary(&shuffled, DEFAULT_VOCAB_SIZE).map_err(|e| e.to_string())?;
    ensure(a == b, || "shuffled corpus changed the rank list".into())?;

    let mut counts: HashMap<String, u64> = HashMap::new();
    for c in &captions {
        for t in oracle_tokens(c) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut all: Vec<(String, u64)> = counts.into_iter().collect();
    all.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    all.truncate(DEFAULT_VOCAB_SIZE);
    let got: Vec<(String, u64)> = a.iter().map(|(p, c)| (p.to_string(), c)).collect();
    ensure(got == all, || "rank list differs from the single-threaded count oracle".into())?;
    ensure(a.len() == DEFAULT_VOCAB_SIZE, || format!("only {} phrases", a.len()))?;
    let cut = a.counts[DEFAULT_VOCAB_SIZE - 1];
    Ok(format!("top {} phrases (cut at count {cut}), shuffle-invariant and equal to the sequential oracle", a.len()))
}

fn c10_defaults() -> Outcome {
    let c = PipelineConfig::default();
    ensure(c.grid_n == 3 && DEFAULT_GRID == 3, || format!("grid {}", c.grid_n))?;
    ensure(c.top_k == 10 && DEFAULT_TOP_K == 10, || format!("top-k {}", c.top_k))?;
    ensure(c.vocab_size == 3000 && DEFAULT_VOCAB_SIZE == 3000, || format!("vocab {}", c.vocab_size))?;
    Ok("N=3, K=10, M=3000".into())
}

fn c11_throughput() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("records.jsonl");
    let file = File::create(&input).map_err(|e| e.to_string())?;
    common::write_corpus(BufWriter::with_capacity(1 << 20, file), 1111, 1_000_000, 10, 1).map_err(|e| e.to_string())?;
    let paths = RunPaths {
        input,
        output: dir.path().join("out.jsonl"),
        rejects: None,
        embeddings: None,
    };
    let config = PipelineConfig {
        template: Template::BlockHasO,
        ..PipelineConfig::default()
    };
    let start = Instant::now();
    let report = pipeline::run(&config, &paths).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(report.stats.images == 1_000_000, || format!("{} images written", report.stats.images))?;
    within(Duration::from_secs(120), took)?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(format!(
        "1000000 records in {took:.2?} ({:.0} rec/s, {cores} core(s))",
        1e6 / took.as_secs_f64()
    ))
}

fn c12_stats_echo() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("coco.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    {
        use std::io::Write;
        let mut w = BufWriter::new(File::create(&input).map_err(|e| e.to_string())?);
        for i in 0..110_000 {
            let mut rec = common::record(&mut rng, i, 10, 1);
            rec.captions = (0..5).map(|_| common::caption(&mut rng)).collect();
            writeln!(w, "{}", rec.to_line()).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
    }
    let paths = RunPaths {
        input,
        output: dir.path().join("coco.out.jsonl"),
        rejects: None,
        embeddings: None,
    };
    let report = pipeline::run(&PipelineConfig::default(), &paths).map_err(|e| e.to_string())?;
    let file = File::open(&paths.output).map_err(|e| e.to_string())?;
    let stats = compute_stats(BufReader::new(file)).map_err(|e| e.to_string())?;
    ensure(stats.images == 110_000 && stats.captions == 550_000, || {
        format!("counted {} images, {} captions", stats.images, stats.captions)
    })?;
    ensure(stats == report.stats, || "recount differs from the run report".into())?;
    Ok("0.11M images, 0.55M captions counted back exactly".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("01 grid partition", c01_grid_partition),
        ("02 template golden suite", c02_template_golden),
        ("03 embedding argmax oracle", c03_eq1_oracle),
        ("04 affine properties", c04_affine),
        ("05 determinism differential", c05_determinism),
        ("06 partial-annotation fallback", c06_fallback),
        ("07 cloze round-trip", c07_cloze),
        ("08 top-k oracle", c08_top_k),
        ("09 vocabulary determinism", c09_vocab),
        ("10 defaults", c10_defaults),
        ("11 throughput", c11_throughput),
        ("12 stats echo", c12_stats_echo),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
