//! Evaluation and benchmarking: exact rank-based pixel AUC, split
//! evaluation reports, memory and throughput measurement, and Fig.
//! 2-style comparison renderings.

use std::path::Path;
use std::time::Instant;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datasynth::{synthetic_base, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::memtrack;
use crate::model::{HrfNet, ModelConfig};
use crate::ops::act::softmax2_tampered;
use crate::parallel;
use crate::tensor::{tensor_from_rgb, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    Pooled,
    PerImageMean,
}

/// Exact Mann-Whitney AUC with midrank tie handling over one pooled
/// score/label collection.
fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes for AUC, got {n_pos} positive and {n_neg} negative pixels"
        )));
    }
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    parallel::sort_by_f64_key(&mut order, |&i| scores[i as usize]);
    let mut rank_sum_pos = 0.0f64;
    let mut start = 0usize;
    while start < order.len() {
        let mut end = start + 1;
        let s = scores[order[start] as usize];
        while end < order.len() && scores[order[end] as usize] == s {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share one midrank
        let midrank = (start + 1 + end) as f64 / 2.0;
        let pos_in_run = order[start..end]
            .iter()
            .filter(|&&i| labels[i as usize])
            .count();
        rank_sum_pos += midrank * pos_in_run as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn check_pairs(scores: &[Tensor], targets: &[Tensor]) -> Result<()> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "score/target lists must pair up, got {} and {}",
            scores.len(),
            targets.len()
        )));
    }
    for (i, (s, t)) in scores.iter().zip(targets).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "pair {i}: score shape {:?} != target shape {:?}",
                s.shape(),
                t.shape()
            )));
        }
        if !s.is_finite() {
            return Err(Error::Numeric(format!("pair {i}: non-finite scores")));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("pair {i}: target is not binary")));
        }
    }
    Ok(())
}

/// Pixel-level ROC AUC across paired probability maps and binary masks.
pub fn pixel_auc(scores: &[Tensor], targets: &[Tensor], mode: AucMode) -> Result<f64> {
    check_pairs(scores, targets)?;
    match mode {
        AucMode::Pooled => {
            let total: usize = scores.iter().map(Tensor::numel).sum();
            let mut s = Vec::with_capacity(total);
            let mut l = Vec::with_capacity(total);
            for (sc, tg) in scores.iter().zip(targets) {
                s.extend_from_slice(sc.data());
                l.extend(tg.data().iter().map(|&v| v == 1.0));
            }
            rank_auc(&s, &l)
        }
        AucMode::PerImageMean => {
            let (aucs, excluded) = per_image_aucs(scores, targets)?;
            if aucs.is_empty() {
                return Err(Error::UndefinedAuc(format!(
                    "all {excluded} images are single-class"
                )));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

/// Per-image AUCs, skipping single-class images; returns (aucs, skipped).
fn per_image_aucs(scores: &[Tensor], targets: &[Tensor]) -> Result<(Vec<f64>, usize)> {
    let mut aucs = Vec::new();
    let mut excluded = 0usize;
    for (sc, tg) in scores.iter().zip(targets) {
        let labels: Vec<bool> = tg.data().iter().map(|&v| v == 1.0).collect();
        match rank_auc(sc.data(), &labels) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedAuc(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((aucs, excluded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    TrackedHeap,
    ProcessPeakRss,
    Unavailable,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MemoryReading {
    pub mb: Option<f64>,
    pub mode: MemoryMode,
}

impl MemoryReading {
    pub fn display(&self) -> String {
        match self.mb {
            Some(mb) => format!("{mb:.2}"),
            None => "unavailable".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub auc_mode: AucMode,
    pub per_image_auc: Vec<f64>,
    pub excluded_single_class: usize,
    pub n_images: usize,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub fps: f64,
    pub memory_mb: Option<f64>,
    pub memory_mode: MemoryMode,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: AucMode,
    pub threshold_metrics: bool,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: AucMode::Pooled,
            threshold_metrics: true,
            threshold: 0.5,
        }
    }
}

/// Run batch-1 inference over one manifest split and aggregate metrics.
pub fn evaluate(
    model: &HrfNet,
    data_root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let entries: Vec<_> = manifest.entries_for(split).collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("manifest has no entries for {split:?}")));
    }
    let started = Instant::now();
    let outputs: Vec<Result<(Tensor, Tensor)>> = parallel::map_indices(entries.len(), |i| {
        let (img, mask) = crate::train::load_pair(data_root, entries[i])?;
        let logits = model.forward(&img)?;
        Ok((softmax2_tampered(&logits), mask))
    });
    let elapsed = started.elapsed().as_secs_f64();
    let mut scores = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for r in outputs {
        let (s, t) = r?;
        scores.push(s);
        targets.push(t);
    }
    let auc = pixel_auc(&scores, &targets, opts.mode)?;
    let (per_image, excluded) = per_image_aucs(&scores, &targets)?;
    let (f1, iou) = if opts.threshold_metrics {
        let (f1, iou) = threshold_metrics(&scores, &targets, opts.threshold);
        (Some(f1), Some(iou))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        auc,
        auc_mode: opts.mode,
        per_image_auc: per_image,
        excluded_single_class: excluded,
        n_images: entries.len(),
        f1,
        iou,
        fps: entries.len() as f64 / elapsed.max(1e-9),
        memory_mb: None,
        memory_mode: MemoryMode::Unavailable,
    })
}

/// Pooled F1 and IoU of thresholded scores.
fn threshold_metrics(scores: &[Tensor], targets: &[Tensor], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (s, t) in scores.iter().zip(targets) {
        for (sv, tv) in s.data().iter().zip(t.data()) {
            let pred = *sv >= threshold;
            let truth = *tv == 1.0;
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let f1_den = 2 * tp + fp + fn_;
    let f1 = if f1_den == 0 { 1.0 } else { 2.0 * tp as f64 / f1_den as f64 };
    let iou_den = tp + fp + fn_;
    let iou = if iou_den == 0 { 1.0 } else { tp as f64 / iou_den as f64 };
    (f1, iou)
}

/// Peak memory of building the model and running one gradient-free
/// batch-1 forward pass, relative to the pre-model baseline. Uses the
/// tracking allocator when installed, process peak RSS otherwise, and
/// reports which mode produced the number.
///
/// Must run exclusively: concurrent allocations in the same process (or
/// other processes, in RSS mode) inflate the reading.
pub fn measure_memory(config: &ModelConfig, seed: u64) -> Result<MemoryReading> {
    let (h, w) = config.full_res;
    let run = |model: &HrfNet, input: &Tensor| -> Result<()> {
        model.forward(input)?;
        Ok(())
    };
    if memtrack::installed() {
        let baseline = memtrack::current_bytes();
        let model = HrfNet::new(config.clone(), seed)?;
        let input = tensor_from_rgb(&synthetic_base(w, h, seed));
        run(&model, &input)?; // warm-up
        memtrack::reset_peak();
        run(&model, &input)?;
        let peak = memtrack::peak_bytes();
        Ok(MemoryReading {
            mb: Some((peak.saturating_sub(baseline)) as f64 / (1 << 20) as f64),
            mode: MemoryMode::TrackedHeap,
        })
    } else {
        let Some(before) = memtrack::process_peak_rss_bytes() else {
            return Ok(MemoryReading { mb: None, mode: MemoryMode::Unavailable });
        };
        let model = HrfNet::new(config.clone(), seed)?;
        let input = tensor_from_rgb(&synthetic_base(w, h, seed));
        run(&model, &input)?;
        run(&model, &input)?;
        let after = memtrack::process_peak_rss_bytes().unwrap_or(before);
        Ok(MemoryReading {
            mb: Some(after.saturating_sub(before) as f64 / (1 << 20) as f64),
            mode: MemoryMode::ProcessPeakRss,
        })
    }
}

/// Throughput of gradient-free batch-1 forward passes, after warm-up.
/// CPU execution needs no device synchronization; timing brackets the
/// full synchronous call.
///
/// Must run exclusively: concurrent load on the machine skews the
/// timing, so callers serialize benchmark work in a single process.
pub fn measure_fps(model: &HrfNet, iters: usize, warmup: usize) -> Result<f64> {
    if iters < 10 {
        return Err(Error::Parameter(format!("iters must be at least 10, got {iters}")));
    }
    if warmup < 3 {
        return Err(Error::Parameter(format!("warmup must be at least 3, got {warmup}")));
    }
    let (h, w) = model.config().full_res;
    let input = tensor_from_rgb(&synthetic_base(w, h, 0));
    for _ in 0..warmup {
        model.forward(&input)?;
    }
    let started = Instant::now();
    for _ in 0..iters {
        model.forward(&input)?;
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(iters as f64 / elapsed.max(1e-12))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub memory: MemoryReading,
    pub fps: f64,
}

/// Fixed-width method / memory / FPS summary table.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>12} {:>10}\n", "Method", "Memory (MB)", "FPS"));
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>12} {:>10.2}\n",
            r.method,
            r.memory.display(),
            r.fps
        ));
    }
    out
}

const TILE_MARGIN: usize = 4;
const TITLE_BAR: usize = 12;

/// One row of the comparison figure.
pub struct ComparisonSample {
    pub image: RgbImage,
    pub gt: GrayImage,
    pub predictions: Vec<(String, GrayImage)>,
}

/// Render rows of input | ground truth | predictions with column titles.
/// All tiles are placed 1:1 (nearest, no resampling); masks render as
/// pure black and white.
pub fn render_comparison(samples: &[ComparisonSample]) -> Result<RgbImage> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("no samples to render".into()))?;
    let (tw, th) = first.image.dimensions();
    let n_pred = first.predictions.len();
    for (i, s) in samples.iter().enumerate() {
        let dims_ok = s.image.dimensions() == (tw, th)
            && s.gt.dimensions() == (tw, th)
            && s.predictions.iter().all(|(_, p)| p.dimensions() == (tw, th));
        if !dims_ok || s.predictions.len() != n_pred {
            return Err(Error::Shape(format!("sample {i} does not match the first sample's layout")));
        }
    }
    let (tw, th) = (tw as usize, th as usize);
    let cols = 2 + n_pred;
    let rows = samples.len();
    let width = TILE_MARGIN + cols * (tw + TILE_MARGIN);
    let height = TITLE_BAR + TILE_MARGIN + rows * (th + TILE_MARGIN);
    let mut fig = RgbImage::from_pixel(width as u32, height as u32, Rgb([40, 40, 40]));

    let mut titles = vec!["INPUT".to_string(), "GT".to_string()];
    titles.extend(first.predictions.iter().map(|(n, _)| n.to_uppercase()));
    for (c, title) in titles.iter().enumerate() {
        draw_text(&mut fig, TILE_MARGIN + c * (tw + TILE_MARGIN), 2, title);
    }
    for (r, s) in samples.iter().enumerate() {
        let y0 = TITLE_BAR + TILE_MARGIN + r * (th + TILE_MARGIN);
        blit_rgb(&mut fig, TILE_MARGIN, y0, &s.image);
        blit_mask(&mut fig, TILE_MARGIN + (tw + TILE_MARGIN), y0, &s.gt);
        for (c, (_, p)) in s.predictions.iter().enumerate() {
            blit_mask(&mut fig, TILE_MARGIN + (c + 2) * (tw + TILE_MARGIN), y0, p);
        }
    }
    Ok(fig)
}

fn blit_rgb(fig: &mut RgbImage, x0: usize, y0: usize, tile: &RgbImage) {
    for (x, y, p) in tile.enumerate_pixels() {
        fig.put_pixel(x0 as u32 + x, y0 as u32 + y, *p);
    }
}

fn blit_mask(fig: &mut RgbImage, x0: usize, y0: usize, tile: &GrayImage) {
    for (x, y, p) in tile.enumerate_pixels() {
        let v = if p[0] == 0 { 0 } else { 255 };
        fig.put_pixel(x0 as u32 + x, y0 as u32 + y, Rgb([v, v, v]));
    }
}

/// 5x7 bitmap glyphs; each byte is one row, bit 4 leftmost.
const FONT: &[(char, [u8; 7])] = &[
    ('A', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('B', [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E]),
    ('C', [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E]),
    ('D', [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E]),
    ('E', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('F', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10]),
    ('G', [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F]),
    ('H', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('I', [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('M', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('N', [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11]),
    ('O', [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('P', [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10]),
    ('Q', [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D]),
    ('R', [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11]),
    ('S', [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E]),
    ('T', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('U', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('V', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('W', [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11]),
    ('X', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04]),
    ('Z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('-', [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00]),
    ('_', [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C]),
    ('/', [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10]),
    (' ', [0x00; 7]),
];

fn draw_text(img: &mut RgbImage, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for ch in text.chars() {
        if let Some((_, rows)) = FONT.iter().find(|(c, _)| *c == ch) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..5 {
                    if row & (0x10 >> dx) != 0 {
                        let (px, py) = ((x + dx) as u32, (y0 + dy) as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([240, 240, 240]));
                        }
                    }
                }
            }
        }
        x += 6;
    }
}
