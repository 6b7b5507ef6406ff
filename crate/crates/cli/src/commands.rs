//! Subcommand implementations: each one wires the library end to end and
//! writes images, logs or metric tables. All randomness flows from the
//! config seed through named streams, so identical invocations produce
//! identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;

use ssdbn::data::{
    load_dataset, load_model, load_pgm, preprocess, save_dataset, save_image, save_model,
    TextureDataset,
};
use ssdbn::dbn::center_free_mask;
use ssdbn::metrics::{autocorr_spectrum, mssim, tss, MetricReport, REPORT_HEADER};
use ssdbn::rng::{indexed_rng, stream_rng, Stream};
use ssdbn::train::train_dbn;
use ssdbn::Dbn;

use crate::config::RunConfig;

/// Dataset from either a cached file (`.tex`) or a PGM texture.
pub fn resolve_dataset(
    cfg: &RunConfig,
    texture: Option<&Path>,
    dataset: Option<&Path>,
) -> Result<TextureDataset<f64>> {
    match (texture, dataset) {
        (_, Some(path)) => Ok(load_dataset(path)
            .with_context(|| format!("loading dataset {}", path.display()))?),
        (Some(path), None) => {
            let image: Array2<f64> = load_pgm(path)
                .with_context(|| format!("loading texture {}", path.display()))?;
            let name = cfg.texture_name.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "texture".into())
            });
            let target = cfg.target_size.min(image.nrows().min(image.ncols()));
            Ok(preprocess(&image, target, name)?)
        }
        (None, None) => bail!("either --texture or --dataset is required"),
    }
}

pub fn prepare(cfg: &RunConfig, texture: &Path, out: &Path) -> Result<()> {
    let ds = resolve_dataset(cfg, Some(texture), None)?;
    save_dataset(&ds, out)?;
    println!(
        "prepared '{}': train {}x{}, test {}x{}, mean {:.6}, std {:.6} -> {}",
        ds.name,
        ds.train.nrows(),
        ds.train.ncols(),
        ds.test.nrows(),
        ds.test.ncols(),
        ds.mean,
        ds.std,
        out.display()
    );
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    texture: Option<&Path>,
    dataset: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let ds = resolve_dataset(cfg, texture, dataset)?;
    let spec = cfg.dbn_spec();
    let layer_cfgs = cfg.layer_configs()?;
    let model = match log_path {
        Some(p) => {
            let mut file = fs::File::create(p)
                .with_context(|| format!("creating log {}", p.display()))?;
            train_dbn(&ds, &spec, &layer_cfgs, &mut file)?
        }
        None => train_dbn(&ds, &spec, &layer_cfgs, &mut std::io::sink())?,
    };
    save_model(&model, out)?;
    println!(
        "trained {}-layer model on '{}' ({} updates/layer, seed {}) -> {}",
        spec.layers,
        ds.name,
        cfg.updates,
        cfg.seed,
        out.display()
    );
    Ok(())
}

pub fn sample(cfg: &RunConfig, model_path: &Path, out_dir: &Path) -> Result<()> {
    let model: Dbn = load_model(model_path)?;
    fs::create_dir_all(out_dir)?;
    let mut rng = stream_rng(cfg.seed, Stream::Generation);
    let images = model.generate(
        cfg.sample_count,
        cfg.burn_in,
        cfg.thin,
        cfg.sample_size,
        &mut rng,
    )?;
    for (i, img) in images.iter().enumerate() {
        let path = out_dir.join(format!("sample_{i:03}.pgm"));
        save_image(img, &model.normalization, &path)?;
    }
    println!(
        "wrote {} samples of {}x{} to {}",
        images.len(),
        cfg.sample_size,
        cfg.sample_size,
        out_dir.display()
    );
    Ok(())
}

pub fn inpaint(
    cfg: &RunConfig,
    model_path: &Path,
    texture: Option<&Path>,
    dataset: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let model: Dbn = load_model(model_path)?;
    let ds = resolve_dataset(cfg, texture, dataset)?;
    fs::create_dir_all(out_dir)?;
    let mask = center_free_mask(cfg.inpaint_frame, cfg.inpaint_center)?;
    for frame_idx in 0..cfg.inpaint_frames {
        let mut frame_rng = indexed_rng(cfg.seed, Stream::Inpainting, frame_idx as u64);
        let truth = ds
            .sample_test_patches(cfg.inpaint_frame, 1, &mut frame_rng)?
            .remove(0);
        save_image(
            &truth,
            &model.normalization,
            out_dir.join(format!("truth_f{frame_idx:02}.pgm")),
        )?;
        let mut frame = truth.clone();
        for ((r, c), v) in frame.indexed_iter_mut() {
            if !mask[(r, c)] {
                *v = 0.0;
            }
        }
        save_image(
            &frame,
            &model.normalization,
            out_dir.join(format!("frame_f{frame_idx:02}.pgm")),
        )?;
        for seed_idx in 0..cfg.inpaint_seeds {
            let mut rng = indexed_rng(
                cfg.seed,
                Stream::Inpainting,
                1_000_000 + (frame_idx * cfg.inpaint_seeds + seed_idx) as u64,
            );
            let result = model.inpaint(&frame, &mask, cfg.inpaint_iters, &mut rng)?;
            save_image(
                &result,
                &model.normalization,
                out_dir.join(format!("inpaint_f{frame_idx:02}_s{seed_idx}.pgm")),
            )?;
        }
    }
    println!(
        "wrote {} frames x {} seeds ({} iterations each) to {}",
        cfg.inpaint_frames,
        cfg.inpaint_seeds,
        cfg.inpaint_iters,
        out_dir.display()
    );
    Ok(())
}

fn write_table(out: Option<&Path>, rows: &[String]) -> Result<()> {
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// TSS of every sample in a directory against the dataset's test half.
/// Samples are mapped back into normalized space before scoring.
pub fn eval_tss(
    cfg: &RunConfig,
    samples_dir: &Path,
    texture: Option<&Path>,
    dataset: Option<&Path>,
    model_name: &str,
    out: Option<&Path>,
) -> Result<()> {
    let ds = resolve_dataset(cfg, texture, dataset)?;
    let mut files: Vec<PathBuf> = fs::read_dir(samples_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .pgm samples in {}", samples_dir.display());
    }
    let mut scores = Vec::with_capacity(files.len());
    for path in &files {
        let img: Array2<f64> = load_pgm(path)?;
        let normalized = img.mapv(|x| (x - ds.mean) / ds.std);
        scores.push(tss(&normalized, &ds.test, cfg.tss_patch)?);
    }
    let report = MetricReport::from_scores(scores);
    write_table(out, &[report.tsv_row(&ds.name, model_name, "tss")])?;
    Ok(())
}

/// MSSIM of every `inpaint_fNN_sK.pgm` against its `truth_fNN.pgm`, scored
/// over the free center region in 8-bit space.
pub fn eval_mssim(
    cfg: &RunConfig,
    dir: &Path,
    texture_name: &str,
    model_name: &str,
    out: Option<&Path>,
) -> Result<()> {
    let mut scores = Vec::new();
    let off = (cfg.inpaint_frame - cfg.inpaint_center) / 2;
    let crop = |img: &Array2<f64>| {
        img.slice(ndarray::s![
            off..off + cfg.inpaint_center,
            off..off + cfg.inpaint_center
        ])
        .mapv(|x| x * 255.0)
    };
    for frame_idx in 0.. {
        let truth_path = dir.join(format!("truth_f{frame_idx:02}.pgm"));
        if !truth_path.exists() {
            break;
        }
        let truth: Array2<f64> = load_pgm(&truth_path)?;
        let truth_crop = crop(&truth);
        for seed_idx in 0.. {
            let result_path = dir.join(format!("inpaint_f{frame_idx:02}_s{seed_idx}.pgm"));
            if !result_path.exists() {
                break;
            }
            let result: Array2<f64> = load_pgm(&result_path)?;
            scores.push(mssim(&crop(&result), &truth_crop)?);
        }
    }
    if scores.is_empty() {
        bail!("no inpaint/truth pairs in {}", dir.display());
    }
    let report = MetricReport::from_scores(scores);
    write_table(out, &[report.tsv_row(texture_name, model_name, "mssim")])?;
    Ok(())
}

/// Consecutive-sweep sample chain and its autocorrelation spectrum.
pub fn mixing(cfg: &RunConfig, model_path: &Path, out: Option<&Path>) -> Result<()> {
    let model: Dbn = load_model(model_path)?;
    let mut rng = stream_rng(cfg.seed, Stream::Generation);
    let chain = model.generate(
        cfg.mixing_length,
        cfg.mixing_burn_in.max(1),
        1,
        cfg.mixing_size,
        &mut rng,
    )?;
    let spectrum = autocorr_spectrum(&chain, cfg.mixing_max_lag)?;
    let mut text = String::from("lag\tautocorrelation\n");
    for (lag, r) in spectrum.iter().enumerate() {
        text.push_str(&format!("{lag}\t{r:.6}\n"));
    }
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Write then reread a config round trip for `--dump-config`.
pub fn dump_config(cfg: &RunConfig, mut w: impl Write) -> Result<()> {
    writeln!(w, "[data]")?;
    writeln!(w, "target_size = {}", cfg.target_size)?;
    writeln!(w, "\n[model]")?;
    writeln!(w, "patch = {}", cfg.patch)?;
    writeln!(w, "kernel = {}", cfg.kernel)?;
    writeln!(w, "tilings = {}", cfg.tilings)?;
    writeln!(w, "filters = {}", cfg.filters)?;
    writeln!(w, "layers = {}", cfg.layers)?;
    writeln!(
        w,
        "upper_filters = {}",
        cfg.upper_filters
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )?;
    writeln!(w, "upper_kernel = {}", cfg.upper_kernel)?;
    writeln!(w, "bias_shift = {}", cfg.bias_shift)?;
    writeln!(w, "\n[train]")?;
    writeln!(w, "k = {}", cfg.gibbs_steps)?;
    writeln!(w, "learning_rate = {}", cfg.learning_rate)?;
    writeln!(w, "lr_decay_start = {}", cfg.lr_decay_start)?;
    writeln!(w, "momentum = {}", cfg.momentum)?;
    writeln!(w, "minibatch = {}", cfg.minibatch)?;
    writeln!(w, "n_chains = {}", cfg.n_chains)?;
    writeln!(w, "restart_prob = {}", cfg.restart_prob)?;
    writeln!(w, "fast_decay = {}", cfg.fast_decay)?;
    writeln!(w, "updates = {}", cfg.updates)?;
    writeln!(w, "seed = {}", cfg.seed)?;
    writeln!(w, "\n[sample]")?;
    writeln!(w, "count = {}", cfg.sample_count)?;
    writeln!(w, "size = {}", cfg.sample_size)?;
    writeln!(w, "burn_in = {}", cfg.burn_in)?;
    writeln!(w, "thin = {}", cfg.thin)?;
    writeln!(w, "\n[inpaint]")?;
    writeln!(w, "frame = {}", cfg.inpaint_frame)?;
    writeln!(w, "center = {}", cfg.inpaint_center)?;
    writeln!(w, "iters = {}", cfg.inpaint_iters)?;
    writeln!(w, "frames = {}", cfg.inpaint_frames)?;
    writeln!(w, "seeds = {}", cfg.inpaint_seeds)?;
    writeln!(w, "\n[eval]")?;
    writeln!(w, "tss_patch = {}", cfg.tss_patch)?;
    writeln!(w, "\n[mixing]")?;
    writeln!(w, "length = {}", cfg.mixing_length)?;
    writeln!(w, "burn_in = {}", cfg.mixing_burn_in)?;
    writeln!(w, "max_lag = {}", cfg.mixing_max_lag)?;
    writeln!(w, "size = {}", cfg.mixing_size)?;
    Ok(())
}
