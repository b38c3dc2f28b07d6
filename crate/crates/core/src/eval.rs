//! Fidelity, compression and throughput reporting.

use crate::color::{delta_e00, delta_e76, psnr, srgb_to_lab, Rgb};
use crate::glut::{apply_prepared, GlutModel, PreparedGlut};
use crate::lut_io::{build_split, CubeLut, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub delta_e00: f64,
    pub delta_e76: f64,
    pub sample_count: usize,
    pub wall_ms: u64,
}

/// Aggregates PSNR and mean ΔE over paired predictions and targets.
/// `wall_ms` is left at zero for the caller to fill in.
///
/// # Panics
/// If the slices differ in length or are empty.
pub fn evaluate_pairs(pred: &[Rgb], target: &[Rgb]) -> EvalReport {
    assert!(!pred.is_empty(), "no samples to evaluate");
    let p = psnr(pred, target).expect("prediction and target counts differ");
    let (de00, de76) = pred
        .par_iter()
        .zip(target)
        .with_min_len(1024)
        .map(|(&a, &b)| {
            let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
            (delta_e00(la, lb), delta_e76(la, lb))
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
    let n = pred.len() as f64;
    EvalReport {
        psnr: p,
        delta_e00: de00 / n,
        delta_e76: de76 / n,
        sample_count: pred.len(),
        wall_ms: 0,
    }
}

/// Something that maps colors, evaluated against a reference.
pub trait ColorMap: Sync {
    fn map(&self, c: Rgb) -> Rgb;
}

impl ColorMap for PreparedGlut {
    fn map(&self, c: Rgb) -> Rgb {
        self.evaluate(c)
    }
}

impl ColorMap for CubeLut {
    fn map(&self, c: Rgb) -> Rgb {
        self.sample_normalized(c)
    }
}

impl<F: Fn(Rgb) -> Rgb + Sync> ColorMap for F {
    fn map(&self, c: Rgb) -> Rgb {
        self(c)
    }
}

/// Evaluates `candidate` against `reference` on `colors`. Targets are
/// clamped to `[0,1]`.
pub fn eval_on_colors(candidate: &dyn ColorMap, reference: &dyn ColorMap, colors: &[Rgb]) -> EvalReport {
    let start = Instant::now();
    let pred: Vec<Rgb> = colors.par_iter().map(|&c| candidate.map(c)).collect();
    let target: Vec<Rgb> = colors.par_iter().map(|&c| reference.map(c).clamp01()).collect();
    let mut r = evaluate_pairs(&pred, &target);
    r.wall_ms = start.elapsed().as_millis() as u64;
    r
}

/// Evaluates on the held-out colors of the `q_train` lattice split, using
/// at most `max_samples` of them (strided, deterministic).
pub fn eval_on_split(
    candidate: &dyn ColorMap,
    reference: &dyn ColorMap,
    q_train: usize,
    max_samples: usize,
) -> EvalReport {
    let colors = build_split(q_train).test_subset(max_samples);
    eval_on_colors(candidate, reference, &colors)
}

pub fn eval_model_on_split(model: &GlutModel, reference: &dyn ColorMap, q_train: usize, max_samples: usize) -> EvalReport {
    eval_on_split(&model.prepare(), reference, q_train, max_samples)
}

/// Model size as a percentage of a grid LUT's size.
pub fn compression_ratio(model_bytes: usize, cube_bytes: usize) -> f64 {
    assert!(cube_bytes > 0, "empty grid LUT");
    100.0 * model_bytes as f64 / cube_bytes as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub width: usize,
    pub height: usize,
    pub primitives: usize,
    pub threads: usize,
    pub keep_fraction: Option<f64>,
    pub runs: usize,
    pub mean_ms: f64,
    pub fps: f64,
}

/// Benchmark resolutions: 512², HD and 4K.
pub const RESOLUTIONS: [(&str, usize, usize); 3] = [("512x512", 512, 512), ("HD", 1280, 720), ("4K", 3840, 2160)];

pub const BENCH_WARMUPS: usize = 3;
pub const BENCH_MIN_RUNS: usize = 20;

/// Uniform noise image; cost is content-independent so noise stands in
/// for natural images.
pub fn noise_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..width * height)
        .map(|_| Rgb::new(rng.random(), rng.random(), rng.random()))
        .collect();
    Image::new(width, height, pixels)
}

/// Times `apply` over a synthetic frame: three untimed warmups followed by
/// `runs` timed passes (at least 20). Image generation is not timed.
pub fn throughput_bench(
    model: &GlutModel,
    label: &str,
    width: usize,
    height: usize,
    threads: usize,
    keep_fraction: Option<f64>,
    runs: usize,
) -> BenchReport {
    let runs = runs.max(BENCH_MIN_RUNS);
    let img = noise_image(width, height, 0);
    let prep = model.prepare();
    for _ in 0..BENCH_WARMUPS {
        std::hint::black_box(apply_prepared(&prep, &img, threads, keep_fraction));
    }
    let start = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(apply_prepared(&prep, &img, threads, keep_fraction));
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / runs as f64;
    BenchReport {
        label: label.to_string(),
        width,
        height,
        primitives: model.len(),
        threads,
        keep_fraction,
        runs,
        mean_ms,
        fps: 1e3 / mean_ms,
    }
}

/// Aligned-column table of fidelity rows.
pub fn eval_table(rows: &[(String, EvalReport)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<w$}  {:>9}  {:>8}  {:>8}  {:>9}\n", "model", "PSNR", "dE00", "dE76", "samples");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>9.3}  {:>8.4}  {:>8.4}  {:>9}",
            name, r.psnr, r.delta_e00, r.delta_e76, r.sample_count
        );
    }
    s
}

pub fn bench_table(rows: &[BenchReport]) -> String {
    let mut s = format!(
        "{:<10}  {:>4}  {:>7}  {:>5}  {:>10}  {:>9}\n",
        "resolution", "N", "threads", "keep", "ms/frame", "FPS"
    );
    for r in rows {
        let keep = r.keep_fraction.map_or("-".to_string(), |k| format!("{k:.2}"));
        let _ = writeln!(
            s,
            "{:<10}  {:>4}  {:>7}  {:>5}  {:>10.2}  {:>9.2}",
            r.label, r.primitives, r.threads, keep, r.mean_ms, r.fps
        );
    }
    s
}
