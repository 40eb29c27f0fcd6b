//! Subcommand implementations. Each command resolves its inputs from
//! the merged [`RunConfig`], runs the owning module's pipeline, and
//! writes the resolved config next to its artifacts.

use image::{GrayImage, RgbImage};

use hrfnet::checkpoint;
use hrfnet::datasynth::{generate_dataset, synthetic_base, DatasetManifest};
use hrfnet::eval::{
    bench_table, evaluate, measure_fps, measure_memory, render_comparison, BenchRow,
    ComparisonSample, EvalOptions,
};
use hrfnet::model::HrfNet;
use hrfnet::tensor::{tensor_from_rgb, Tensor};
use hrfnet::{Error, Result};

use crate::config::RunConfig;

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let bases = cfg.require_bases()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    if cfg.synth_make_bases > 0 {
        std::fs::create_dir_all(&bases)?;
        let (h, w) = cfg.data_size;
        for i in 0..cfg.synth_make_bases {
            let img = synthetic_base(w, h, cfg.seed.wrapping_add(i as u64));
            img.save(bases.join(format!("base_{i:03}.png")))?;
        }
    }
    let manifest = generate_dataset(&bases, &out, &cfg.synth_config())?;
    manifest.save(&out.join("manifest.json"))?;
    let cfg_path = cfg.write_beside(&out)?;
    println!(
        "wrote {} image/mask pairs at {}x{} to {}",
        manifest.entries.len(),
        manifest.size.0,
        manifest.size.1,
        out.display()
    );
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.require_data()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    let manifest = DatasetManifest::load(&data.join("manifest.json"))?;
    let mut model = HrfNet::new(cfg.model_config(), cfg.seed)?;
    let outcome = hrfnet::train::train_loop(&mut model, &data, &manifest, &cfg.train_config(), &out)?;
    let cfg_path = cfg.write_beside(&out)?;
    println!(
        "trained {} steps over {} epochs; final train loss {:.6}",
        outcome.steps,
        outcome.history.len(),
        outcome.final_loss
    );
    if let (Some(auc), Some(epoch)) = (outcome.best_val_auc, outcome.best_epoch) {
        println!("best val AUC {auc:.4} at epoch {epoch}");
    }
    println!("checkpoints and history -> {}", out.display());
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let data = cfg.require_data()?;
    let ckpt = cfg.require_checkpoint()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    let manifest = DatasetManifest::load(&data.join("manifest.json"))?;
    let model = checkpoint::load(&ckpt)?.model;
    let opts = EvalOptions {
        mode: cfg.eval.auc_mode,
        threshold_metrics: true,
        threshold: cfg.eval.threshold,
    };
    let report = evaluate(&model, &data, &manifest, cfg.eval.split, &opts)?;
    report.save(&out.join("metrics.json"))?;
    let cfg_path = cfg.write_beside(&out)?;
    println!(
        "split {:?}: {} images, pixel AUC {:.4} ({:?})",
        cfg.eval.split, report.n_images, report.auc, report.auc_mode
    );
    if let (Some(f1), Some(iou)) = (report.f1, report.iou) {
        println!("threshold {:.2}: F1 {f1:.4}, IoU {iou:.4}", cfg.eval.threshold);
    }
    println!("throughput {:.2} images/s", report.fps);
    println!("metrics -> {}", out.join("metrics.json").display());
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for &width in &cfg.bench.widths {
        let mut mc = cfg.model_config();
        mc.width_multiplier = width;
        let memory = measure_memory(&mc, cfg.seed)?;
        let model = HrfNet::new(mc, cfg.seed)?;
        let fps = measure_fps(&model, cfg.bench.iters, cfg.bench.warmup)?;
        let method = if width == 1.0 {
            "HRFNet".to_string()
        } else {
            format!("HRFNet w{width:.3}")
        };
        rows.push(BenchRow { method, memory, fps });
    }
    print!("{}", bench_table(&rows));
    std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
    let cfg_path = cfg.write_beside(&out)?;
    println!("bench table -> {}", out.join("bench.json").display());
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let image_path = cfg.require_image()?;
    let ckpt = cfg.require_checkpoint()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    let model = checkpoint::load(&ckpt)?.model;
    let rgb = image::open(&image_path)?.to_rgb8();
    let input = tensor_from_rgb(&rgb);
    let (probs, mask) = model.predict_mask(&input, cfg.eval.threshold)?;
    gray_from_unit(&probs).save(out.join("probability.png"))?;
    gray_from_binary(&mask).save(out.join("mask.png"))?;
    let tampered = mask.data().iter().filter(|&&v| v == 1.0).count();
    let cfg_path = cfg.write_beside(&out)?;
    println!(
        "{}: {} of {} pixels flagged at threshold {:.2}",
        image_path.display(),
        tampered,
        mask.numel(),
        cfg.eval.threshold
    );
    println!("probability map and mask -> {}", out.display());
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

pub fn cmd_visualize(cfg: &RunConfig) -> Result<()> {
    let data = cfg.require_data()?;
    let ckpt = cfg.require_checkpoint()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    let manifest = DatasetManifest::load(&data.join("manifest.json"))?;
    let model = checkpoint::load(&ckpt)?.model;
    let entries: Vec<_> = manifest
        .entries_for(cfg.eval.split)
        .take(cfg.eval.samples)
        .collect();
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no {:?}-split entries to visualize",
            cfg.eval.split
        )));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let rgb: RgbImage = image::open(data.join(&entry.image_path))?.to_rgb8();
        let gt: GrayImage = image::open(data.join(&entry.mask_path))?.to_luma8();
        let (_, mask) = model.predict_mask(&tensor_from_rgb(&rgb), cfg.eval.threshold)?;
        samples.push(ComparisonSample {
            image: rgb,
            gt,
            predictions: vec![("HRFNet".to_string(), gray_from_binary(&mask))],
        });
    }
    let fig = render_comparison(&samples)?;
    let fig_path = out.join("comparison.png");
    fig.save(&fig_path)?;
    let cfg_path = cfg.write_beside(&out)?;
    println!("comparison grid ({} rows) -> {}", samples.len(), fig_path.display());
    println!("run config -> {}", cfg_path.display());
    Ok(())
}

/// [1,1,H,W] map of probabilities in 0..=1 to an 8-bit grayscale image.
fn gray_from_unit(t: &Tensor) -> GrayImage {
    let [_, _, h, w] = t.shape();
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    })
}

/// [1,1,H,W] map of {0,1} values to a black/white mask image.
fn gray_from_binary(t: &Tensor) -> GrayImage {
    let [_, _, h, w] = t.shape();
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if d[y as usize * w + x as usize] == 0.0 { 0 } else { 255 }])
    })
}
