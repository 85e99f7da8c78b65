//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use ptp_corpus::geometry::BBox;
use ptp_corpus::ingest::{DetectedObject, ImageRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TAGS: [&str; 24] = [
    "dog", "cat", "man", "woman", "car", "tree", "sky", "grass", "building", "window", "table", "chair",
    "horse", "boat", "water", "sign", "pole", "shirt", "hat", "plate", "pizza", "bus", "train", "cloud",
];

pub const WORDS: [&str; 32] = [
    "a", "the", "dog", "runs", "on", "grass", "red", "panda", "eats", "bamboo", "near", "two", "men",
    "ride", "horses", "beach", "at", "sunset", "city", "street", "with", "cars", "blue", "sky", "over",
    "mountain", "lake", "small", "boat", "in", "white", "clouds",
];

pub fn caption<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(3..12);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn detection<R: Rng>(rng: &mut R, width: u32, height: u32) -> DetectedObject {
    let (w, h) = (f64::from(width), f64::from(height));
    let bw = (rng.gen_range(0.0..w) * 100.0).round() / 100.0;
    let bh = (rng.gen_range(0.0..h) * 100.0).round() / 100.0;
    let x = (rng.gen_range(0.0..=(w - bw)) * 100.0).floor() / 100.0;
    let y = (rng.gen_range(0.0..=(h - bh)) * 100.0).floor() / 100.0;
    // two-decimal confidences so ties actually occur
    let confidence = f64::from(rng.gen_range(0..=100u32)) / 100.0;
    DetectedObject::new(BBox::new(x, y, bw, bh), TAGS[rng.gen_range(0..TAGS.len())], confidence)
}

/// `max_dets` bounds detections per record; `captions` bounds captions.
pub fn record<R: Rng>(rng: &mut R, i: usize, max_dets: usize, max_captions: usize) -> ImageRecord {
    let width = rng.gen_range(32..1024);
    let height = rng.gen_range(32..1024);
    let n_caps = rng.gen_range(1..=max_captions);
    let n_dets = rng.gen_range(0..=max_dets);
    ImageRecord {
        id: format!("img-{i:08}"),
        width,
        height,
        captions: (0..n_caps).map(|_| caption(rng)).collect(),
        detections: (0..n_dets).map(|_| detection(rng, width, height)).collect(),
        block_embeddings: None,
    }
}

pub fn records(seed: u64, n: usize, max_dets: usize, max_captions: usize) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| record(&mut rng, i, max_dets, max_captions)).collect()
}

pub fn write_corpus<W: Write>(mut w: W, seed: u64, n: usize, max_dets: usize, max_captions: usize) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        writeln!(w, "{}", record(&mut rng, i, max_dets, max_captions).to_line())?;
    }
    w.flush()
}

pub fn corpus_bytes(seed: u64, n: usize, max_dets: usize, max_captions: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, seed, n, max_dets, max_captions).unwrap();
    buf
}

/// Brute-force cell scan: half-open cells, with the last column/row closed.
pub fn brute_block(n: u32, width: f64, height: f64, px: f64, py: f64) -> Option<u32> {
    let nf = f64::from(n);
    for row in 0..n {
        let (y0, y1) = (f64::from(row) * height / nf, if row + 1 == n { height } else { f64::from(row + 1) * height / nf });
        let in_row = py >= y0 && (py < y1 || (row + 1 == n && py <= y1));
        if !in_row {
            continue;
        }
        for col in 0..n {
            let (x0, x1) = (f64::from(col) * width / nf, if col + 1 == n { width } else { f64::from(col + 1) * width / nf });
            let in_col = px >= x0 && (px < x1 || (col + 1 == n && px <= x1));
            if in_col {
                return Some(row * n + col);
            }
        }
    }
    None
}

/// Literal softmax argmax: exponentiate every logit, normalize, pick the
/// first maximum.
pub fn softmax_argmax(v: &[f32], rows: &[Vec<f32>]) -> usize {
    let logits: Vec<f64> = rows
        .iter()
        .map(|e| {
            let mut s = 0.0f64;
            for d in (0..v.len()).rev() {
                s += f64::from(v[d]) * f64::from(e[d]);
            }
            s
        })
        .collect();
    let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Full-sort top-K oracle.
pub fn sort_top_k(dets: &[DetectedObject], k: usize) -> Vec<DetectedObject> {
    let mut all: Vec<(usize, &DetectedObject)> = dets.iter().enumerate().collect();
    all.sort_by(|(ia, a), (ib, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.tag.cmp(&b.tag))
            .then(ia.cmp(ib))
    });
    all.into_iter().take(k).map(|(_, d)| d.clone()).collect()
}
