//! End-to-end operations behind the command line: training with
//! checkpointing and bitwise-reproducible resumption, sequence inference
//! (optionally tiled), metric evaluation of predicted frames, and
//! temporal-profile rendering.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::datapipe::{
    apply_augment, apply_draw_frame, crop_frame, crop_window, draw_augment, draw_crop,
    load_ground_truth, load_sequence, make_window, pad_to_multiple, FrameWindow, Manifest,
};
use crate::error::{Error, Result};
use crate::fusion::{forward_window, init_model_params};
use crate::graph::Graph;
use crate::losses::{
    frequency_loss, l1_loss, perceptual_loss, temporal_loss, total_loss, LossParts,
};
use crate::metrics::{frame_metrics, temporal_profile, MetricReport};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::perceptual::FeatureExtractor;
use crate::radiometry::ExposureFrame;
use crate::tensor::Tensor;
use crate::{checkpoint, imageio};

/// File name of the rolling checkpoint inside the output directory.
pub const LATEST_CHECKPOINT: &str = "ckpt_latest.hvck";
/// File name of the per-step JSON-lines training log.
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Key prefix separating optimizer state from model parameters inside a
/// checkpoint.
const OPTIM_PREFIX: &str = "optim.";
/// Widest blend band between neighbouring inference tiles, in pixels.
const MAX_TILE_OVERLAP: usize = 32;

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// What a completed (or intentionally empty) training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Absolute step counter after the run (counts previous runs when
    /// resumed).
    pub steps_run: u64,
    /// Batch loss of the last executed step; `None` when no step ran.
    pub final_loss: Option<f64>,
    pub latest_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// One line of the training log.
#[derive(Debug, Serialize)]
struct LogRecord {
    step: u64,
    pixel: f64,
    frequency: f64,
    temporal: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    perceptual: Option<f64>,
    total: f64,
    lr: f64,
}

/// One fully decoded training sequence.
struct LoadedSequence {
    frames: Vec<ExposureFrame>,
    /// Ground truth padded to the same multiple-of-4 geometry the window
    /// builder applies to the inputs, so one crop fits both.
    gt: Vec<Tensor>,
    pattern: Vec<f64>,
    phase: usize,
}

/// Derive the RNG for one batch item of one step purely from (seed, step,
/// item). Sampling never depends on how many steps ran before, so a resumed
/// run replays exactly the steps the uninterrupted run would have taken.
fn step_rng(seed: u64, step: u64, item: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(item.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_train_set(cfg: &RunConfig) -> Result<Vec<LoadedSequence>> {
    let manifest = Manifest::load(&cfg.paths.manifest)?;
    let root = cfg.data_root();
    manifest.validate(&root)?;
    let need = 2 * cfg.pattern_size + 1;
    let mut seqs = Vec::new();
    for rec in &manifest.sequences {
        if rec.pattern_size != cfg.pattern_size {
            return Err(Error::Config(format!(
                "sequence {} uses a {}-exposure pattern but the run is configured for {}",
                rec.id, rec.pattern_size, cfg.pattern_size
            )));
        }
        if rec.frame_paths.len() < need {
            return Err(Error::Data(format!(
                "sequence {} has {} frames; a window needs at least {need}",
                rec.id,
                rec.frame_paths.len(),
            )));
        }
        let frames = load_sequence(rec, &root)?;
        let gt = load_ground_truth(rec, &root)?
            .iter()
            .map(|t| pad_to_multiple(t, 4))
            .collect();
        seqs.push(LoadedSequence {
            frames,
            gt,
            pattern: rec.exposure_values()?,
            phase: rec.phase,
        });
    }
    if seqs.is_empty() {
        return Err(Error::Data("manifest lists no sequences".into()));
    }
    Ok(seqs)
}

fn store_to_map(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Write `ckpt_step{step}` plus the rolling latest copy; returns the
/// step-stamped path.
fn save_checkpoint(
    dir: &Path,
    hash: [u8; 32],
    step: u64,
    store: &ParamStore,
    opt: &AdamW,
) -> Result<PathBuf> {
    let mut ck = checkpoint::Checkpoint::new(hash, step);
    ck.insert_all(&store_to_map(store));
    ck.insert_all(&opt.export_state(OPTIM_PREFIX));
    let path = dir.join(format!("ckpt_step{step}.hvck"));
    checkpoint::save(&path, &ck)?;
    checkpoint::save(&dir.join(LATEST_CHECKPOINT), &ck)?;
    Ok(path)
}

fn params_from_checkpoint(ck: &checkpoint::Checkpoint) -> ParamStore {
    ParamStore::from_map(
        ck.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    )
}

fn enrich_divergence(e: Error, step: u64, last_good: &Path) -> Error {
    match e {
        Error::TrainingDiverged { msg, .. } => Error::TrainingDiverged {
            step,
            msg,
            last_good: Some(last_good.to_path_buf()),
        },
        other => other,
    }
}

/// Train (or resume) the reconstruction model described by `cfg`.
///
/// The output directory receives step-stamped checkpoints, a rolling
/// `ckpt_latest.hvck`, and an appended `train_log.jsonl`. When the rolling
/// checkpoint already exists, training continues from its step counter —
/// and, because every random decision is keyed off the absolute step, the
/// resumed trajectory is bitwise identical to an uninterrupted one.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = cfg.paths.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let seqs = load_train_set(cfg)?;
    let hash = cfg.config_hash();
    let weights = cfg.loss_weights();

    let extractor = if weights.lambda_per > 0.0 {
        let path = cfg.loss.perceptual_weights.as_ref().ok_or_else(|| {
            Error::Config(
                "loss.lambda_per > 0 requires loss.perceptual_weights to point at a \
                 feature-extractor checkpoint"
                    .into(),
            )
        })?;
        Some(FeatureExtractor::load(path, &cfg.loss.perceptual_layer)?)
    } else {
        None
    };

    let latest_path = out_dir.join(LATEST_CHECKPOINT);
    let (mut store, mut opt, start_step) = if latest_path.exists() {
        let ck = checkpoint::load(&latest_path)?;
        if ck.config_hash != hash {
            return Err(Error::CheckpointMismatch(format!(
                "{} was produced under a different model configuration; \
                 refusing to resume onto mismatched weights",
                latest_path.display()
            )));
        }
        let mut opt = AdamW::new(cfg.adamw_cfg());
        opt.import_state("", &ck.take_prefixed(OPTIM_PREFIX));
        (params_from_checkpoint(&ck), opt, ck.step)
    } else {
        (
            init_model_params(&cfg.model_cfg(), cfg.seed),
            AdamW::new(cfg.adamw_cfg()),
            0,
        )
    };

    // A fresh run records its initial state immediately: with max_steps = 0
    // that is the entire run, and any later divergence has a fallback.
    let mut last_good = if start_step == 0 {
        save_checkpoint(&out_dir, hash, 0, &store, &opt)?
    } else {
        latest_path.clone()
    };

    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut final_loss = None;
    for step in start_step + 1..=cfg.train.max_steps {
        let record = run_step(cfg, &seqs, &mut store, &mut opt, extractor.as_ref(), step)
            .map_err(|e| enrich_divergence(e, step, &last_good))?;
        final_loss = Some(record.total);
        if step % cfg.train.log_every == 0 || step == cfg.train.max_steps {
            let line = serde_json::to_string(&record).expect("log record serialises");
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
        }
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.max_steps {
            last_good = save_checkpoint(&out_dir, hash, step, &store, &opt)?;
        }
    }

    Ok(TrainOutcome {
        steps_run: cfg.train.max_steps.max(start_step),
        final_loss,
        latest_checkpoint: latest_path,
        log_path,
    })
}

/// One optimizer step: sample a batch, run the temporal pair of windows
/// through a single tape, and apply the averaged gradient.
fn run_step(
    cfg: &RunConfig,
    seqs: &[LoadedSequence],
    store: &mut ParamStore,
    opt: &mut AdamW,
    extractor: Option<&FeatureExtractor>,
    step: u64,
) -> Result<LogRecord> {
    let weights = cfg.loss_weights();
    let n = cfg.pattern_size;
    let batch = cfg.train.batch;
    let size = cfg.train.crop;
    let mut g = Graph::new();
    let bound = store.bind(&mut g);

    let mut totals = Vec::with_capacity(batch);
    let (mut sum_pix, mut sum_freq, mut sum_temp) = (0.0, 0.0, 0.0);
    let mut sum_per: Option<f64> = extractor.map(|_| 0.0);

    for item in 0..batch {
        let mut rng = step_rng(cfg.seed, step, item as u64);
        let seq = &seqs[rng.gen_range(0..seqs.len())];
        let len = seq.frames.len();
        // Prefer centres whose predecessor also has a full window, so the
        // temporal term compares two genuine reconstructions. The shortest
        // legal sequence admits exactly one window; duplicating it gives a
        // zero delta difference, and the term sits exactly at its
        // Charbonnier floor.
        let (t, t_prev) = if len == 2 * n + 1 {
            (n, n)
        } else {
            let t = rng.gen_range(n + 1..len - n);
            (t, t - 1)
        };
        let w_t = make_window(&seq.frames, &seq.pattern, seq.phase, t, cfg.gamma)?;
        let w_p = if t_prev == t {
            w_t.clone()
        } else {
            make_window(&seq.frames, &seq.pattern, seq.phase, t_prev, cfg.gamma)?
        };

        // One crop origin and one augmentation draw, replayed across both
        // windows and both ground-truth frames: every tensor of the pair
        // sees the same geometry, channel order, and flip.
        let (h, w) = (w_t.frames[0].pixels.h(), w_t.frames[0].pixels.w());
        let (y0, x0) = draw_crop(h, w, size, &mut rng)?;
        let d = draw_augment(&cfg.augment, &mut rng);
        let w_t = apply_augment(&crop_window(&w_t, size, y0, x0)?, &d, cfg.gamma)?;
        let w_p = apply_augment(&crop_window(&w_p, size, y0, x0)?, &d, cfg.gamma)?;
        let gt_t = apply_draw_frame(&crop_frame(&seq.gt[t], y0, x0, size, size), &d);
        let gt_p = apply_draw_frame(&crop_frame(&seq.gt[t_prev], y0, x0, size, size), &d);

        let pred_t = forward_window(&mut g, &bound, &w_t.frames, w_t.reference_index, cfg.gamma)?;
        let pred_p = forward_window(&mut g, &bound, &w_p.frames, w_p.reference_index, cfg.gamma)?;
        let gt_t = g.leaf(gt_t);
        let gt_p = g.leaf(gt_p);

        let parts = LossParts {
            l1: l1_loss(&mut g, pred_t, gt_t, cfg.mu),
            perceptual: extractor.map(|fx| perceptual_loss(&mut g, fx, pred_t, gt_t, cfg.mu)),
            frequency: frequency_loss(&mut g, pred_t, gt_t, cfg.mu),
            temporal: temporal_loss(&mut g, pred_t, pred_p, gt_t, gt_p, cfg.mu, weights.epsilon),
        };
        let item_total = total_loss(&mut g, &parts, &weights)?;
        totals.push((item_total, 1.0 / (batch as f64)));

        sum_pix += g.value(parts.l1).item();
        sum_freq += g.value(parts.frequency).item();
        sum_temp += g.value(parts.temporal).item();
        if let (Some(acc), Some(p)) = (sum_per.as_mut(), parts.perceptual) {
            *acc += g.value(p).item();
        }
    }

    let batch_total = g.weighted_sum(&totals);
    let total_value = g.value(batch_total).item();

    let grads = g.backward(batch_total);
    let mut grad_map = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(t) = grads.get(*var) {
            grad_map.insert(name.clone(), t.clone());
        }
    }
    opt.apply(store, &grad_map);

    let b = batch as f64;
    Ok(LogRecord {
        step,
        pixel: sum_pix / b,
        frequency: sum_freq / b,
        temporal: sum_temp / b,
        perceptual: sum_per.map(|s| s / b),
        total: total_value,
        lr: cfg.train.lr,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Reconstruct every valid centre frame of every sequence in a manifest.
///
/// Loads only the LDR frames — ground-truth entries in the manifest are
/// never opened. The checkpoint must carry the configuration hash of `cfg`.
/// Outputs land in `{out_dir}/{sequence id}/frame_{t:04}.exr` at the
/// original (pre-padding) frame size. `tile` bounds the square region
/// reconstructed per forward pass; overlaps are blended linearly.
pub fn infer(
    cfg: &RunConfig,
    ckpt_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    tile: Option<usize>,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ck = checkpoint::load(ckpt_path)?;
    if ck.config_hash != cfg.config_hash() {
        return Err(Error::CheckpointMismatch(format!(
            "{} was produced under a different model configuration than this run",
            ckpt_path.display()
        )));
    }
    let store = params_from_checkpoint(&ck);
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if manifest.sequences.is_empty() {
        return Err(Error::Data("manifest lists no sequences".into()));
    }

    let mut written = Vec::new();
    for rec in &manifest.sequences {
        if rec.pattern_size != cfg.pattern_size {
            return Err(Error::Config(format!(
                "sequence {} uses a {}-exposure pattern but the run is configured for {}",
                rec.id, rec.pattern_size, cfg.pattern_size
            )));
        }
        let pattern = rec.exposure_values()?;
        let frames = load_sequence(rec, &root)?;
        let n = rec.pattern_size;
        if frames.len() < 2 * n + 1 {
            return Err(Error::Data(format!(
                "sequence {} has {} frames; a window needs at least {}",
                rec.id,
                frames.len(),
                2 * n + 1
            )));
        }
        let seq_dir = out_dir.join(&rec.id);
        fs::create_dir_all(&seq_dir).map_err(io_err(&seq_dir))?;
        for t in n..frames.len() - n {
            let w = make_window(&frames, &pattern, rec.phase, t, cfg.gamma)?;
            let pred = match tile {
                Some(ts) => forward_tiled(&store, &w, ts, cfg.gamma)?,
                None => forward_full(&store, &w, cfg.gamma)?,
            };
            let (oh, ow) = w.original_hw;
            let pred = crop_frame(&pred, 0, 0, oh, ow);
            let path = seq_dir.join(format!("frame_{t:04}.exr"));
            imageio::write_hdr_frame(&pred, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn forward_full(store: &ParamStore, w: &FrameWindow, gamma: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = forward_window(&mut g, &bound, &w.frames, w.reference_index, gamma)?;
    Ok(g.value(out).clone())
}

/// Blend band for a given tile edge: capped at [`MAX_TILE_OVERLAP`], at most
/// half the tile, and kept a multiple of 4 so tile origins stay aligned.
fn overlap_for(tile: usize) -> usize {
    let ov = MAX_TILE_OVERLAP.min(tile / 2);
    ov - ov % 4
}

/// Tile origins along one axis: fixed stride, with the final origin clamped
/// so the last tile ends exactly at the boundary.
fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0 && tile <= extent);
    let mut v = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= extent {
            v.push(extent - tile);
            return v;
        }
        v.push(o);
        o += stride;
    }
}

/// Per-axis blending weight: a linear ramp over `overlap + 1` pixels at each
/// tile edge, flat at 1 in between. Two neighbouring tiles overlapping by
/// `overlap` pixels produce complementary ramps, so the normalised blend is
/// the linear cross-fade of their predictions.
fn axis_weight(i: usize, tile: usize, overlap: usize) -> f64 {
    let ramp = overlap + 1;
    (i + 1).min(tile - i).min(ramp) as f64 / ramp as f64
}

/// Reconstruct one window tile-by-tile with linearly blended overlaps.
/// A tile covering the whole frame reproduces the untiled result exactly.
fn forward_tiled(store: &ParamStore, w: &FrameWindow, tile: usize, gamma: f64) -> Result<Tensor> {
    if tile == 0 || tile % 4 != 0 {
        return Err(Error::Config(format!(
            "tile size must be a positive multiple of 4, got {tile}"
        )));
    }
    let (h, wid) = (w.frames[0].pixels.h(), w.frames[0].pixels.w());
    let (th, tw) = (tile.min(h), tile.min(wid));
    let (ov_h, ov_w) = (overlap_for(th), overlap_for(tw));
    let ys = tile_origins(h, th, th - ov_h);
    let xs = tile_origins(wid, tw, tw - ov_w);
    if ys.len() == 1 && xs.len() == 1 {
        return forward_full(store, w, gamma);
    }

    let mut acc = vec![0.0; 3 * h * wid];
    let mut wsum = vec![0.0; h * wid];
    for &y0 in &ys {
        for &x0 in &xs {
            let frames: Vec<ExposureFrame> = w
                .frames
                .iter()
                .map(|f| ExposureFrame::new(crop_frame(&f.pixels, y0, x0, th, tw), f.exposure))
                .collect::<Result<_>>()?;
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let out = forward_window(&mut g, &bound, &frames, w.reference_index, gamma)?;
            let pred = g.value(out);
            for yy in 0..th {
                let wy = axis_weight(yy, th, ov_h);
                for xx in 0..tw {
                    let wgt = wy * axis_weight(xx, tw, ov_w);
                    let (gy, gx) = (y0 + yy, x0 + xx);
                    wsum[gy * wid + gx] += wgt;
                    for c in 0..3 {
                        acc[(c * h + gy) * wid + gx] += wgt * pred.at3(c, yy, xx);
                    }
                }
            }
        }
    }
    for gy in 0..h {
        for gx in 0..wid {
            let s = wsum[gy * wid + gx];
            debug_assert!(s > 0.0, "every pixel is covered by some tile");
            for c in 0..3 {
                acc[(c * h + gy) * wid + gx] /= s;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, wid], acc))
}

// ---------------------------------------------------------------------------
// Evaluation and profiling
// ---------------------------------------------------------------------------

/// The `.exr`/`.hdr` files directly under `dir`, sorted by file name.
pub fn list_hdr_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|s| s.to_str())
                    .map(|s| s.to_ascii_lowercase())
                    .as_deref(),
                Some("exr") | Some("hdr")
            )
        })
        .collect();
    v.sort();
    Ok(v)
}

/// Score predicted frames against ground truth, pairing the two directories'
/// HDR files in sorted order. Optionally writes the report as JSON.
pub fn eval(pred_dir: &Path, gt_dir: &Path, mu: f64, out_path: Option<&Path>) -> Result<MetricReport> {
    let preds = list_hdr_frames(pred_dir)?;
    let gts = list_hdr_frames(gt_dir)?;
    if preds.is_empty() {
        return Err(Error::Data(format!(
            "no .exr/.hdr frames under {}",
            pred_dir.display()
        )));
    }
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predicted frames but {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let mut frames = Vec::with_capacity(preds.len());
    for (p, q) in preds.iter().zip(&gts) {
        let a = imageio::read_hdr_frame(p)?;
        let b = imageio::read_hdr_frame(q)?;
        frames.push(frame_metrics(&a, &b, mu)?);
    }
    let report = MetricReport::from_frames(frames)?;
    if let Some(path) = out_path {
        let text = serde_json::to_string_pretty(&report).expect("report serialises");
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(report)
}

/// Render the flicker profile of one scanline across an HDR frame
/// directory: a `[3, frame count, width]` image of the tonemapped row over
/// time, written as PNG. Returns the profile tensor.
pub fn profile(frames_dir: &Path, row: usize, mu: f64, out_path: &Path) -> Result<Tensor> {
    let paths = list_hdr_frames(frames_dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .exr/.hdr frames under {}",
            frames_dir.display()
        )));
    }
    let frames: Vec<Tensor> = paths
        .iter()
        .map(|p| imageio::read_hdr_frame(p))
        .collect::<Result<_>>()?;
    let prof = temporal_profile(&frames, row, mu)?;
    imageio::write_ldr_png(&prof, out_path)?;
    Ok(prof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::datapipe::{exposure_values, synthesize_exposures, NoiseCfg, SequenceRecord};
    use tempfile::TempDir;

    fn moving_scene(h: usize, w: usize, t: usize) -> Tensor {
        let mut v = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let phase = 0.25 * t as f64 + 0.1 * c as f64;
                    let a = (x as f64 / w as f64 * std::f64::consts::TAU + phase).sin();
                    let b = (y as f64 / h as f64 * std::f64::consts::TAU + 0.5 * phase).cos();
                    v[(c * h + y) * w + x] = (0.5 + 0.4 * a * b).clamp(0.05, 0.95);
                }
            }
        }
        Tensor::from_vec(&[3, h, w], v)
    }

    /// Synthesize an alternating-exposure sequence with ground truth under
    /// `dir` and return the manifest path.
    fn build_dataset(dir: &Path, cfg: &RunConfig, frame_count: usize, h: usize, w: usize) -> PathBuf {
        let pattern = exposure_values(cfg.pattern_size, cfg.stops).unwrap();
        let seq_dir = dir.join("seq");
        fs::create_dir_all(&seq_dir).unwrap();
        let mut frame_paths = Vec::new();
        let mut gt_paths = Vec::new();
        for t in 0..frame_count {
            let clean = moving_scene(h, w, t);
            let e = pattern[t % pattern.len()];
            let mut rng = ChaCha20Rng::seed_from_u64(40 + t as u64);
            let ldr =
                synthesize_exposures(&clean, e, cfg.gamma, &NoiseCfg::default(), &mut rng).unwrap();
            imageio::write_ldr_png(&ldr.pixels, &seq_dir.join(format!("f{t:02}.png"))).unwrap();
            imageio::write_hdr_frame(&clean, &seq_dir.join(format!("g{t:02}.exr"))).unwrap();
            frame_paths.push(PathBuf::from(format!("seq/f{t:02}.png")));
            gt_paths.push(PathBuf::from(format!("seq/g{t:02}.exr")));
        }
        let manifest = Manifest {
            sequences: vec![SequenceRecord {
                id: "seq".into(),
                frame_paths,
                ground_truth_paths: Some(gt_paths),
                pattern_size: cfg.pattern_size,
                stops: cfg.stops,
                phase: 0,
            }],
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        path
    }

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.kq_channels = 4;
        cfg.model.value_channels = 4;
        cfg.model.blend_channels = 6;
        cfg.model.bottleneck_channels = 8;
        cfg.model.fused_channels = 4;
        cfg.model.merge_channels = 6;
        cfg.model.merge_blocks = 1;
        cfg.train.batch = 1;
        cfg.train.crop = 16;
        cfg.train.max_steps = 3;
        cfg.train.checkpoint_every = 2;
        cfg.train.log_every = 1;
        cfg.loss.lambda_per = 0.0;
        cfg.paths.manifest = dir.join("manifest.json");
        cfg.paths.out_dir = dir.join("run");
        cfg
    }

    fn read_log(path: &Path) -> Vec<serde_json::Value> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    fn assert_checkpoints_bitwise_equal(a: &Path, b: &Path) {
        let ca = checkpoint::load(a).unwrap();
        let cb = checkpoint::load(b).unwrap();
        assert_eq!(ca.step, cb.step);
        assert_eq!(
            ca.tensors.keys().collect::<Vec<_>>(),
            cb.tensors.keys().collect::<Vec<_>>()
        );
        for (k, ta) in &ca.tensors {
            let tb = &cb.tensors[k];
            assert_eq!(ta.shape(), tb.shape(), "{k}");
            for (x, y) in ta.data().iter().zip(tb.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{k}");
            }
        }
    }

    #[test]
    fn training_runs_steps_logs_and_checkpoints() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_cfg(dir.path());
        build_dataset(dir.path(), &cfg, 7, 16, 16);
        let out = train(&cfg).unwrap();
        assert_eq!(out.steps_run, 3);
        assert!(out.final_loss.unwrap().is_finite());
        let run = dir.path().join("run");
        for name in ["ckpt_step0.hvck", "ckpt_step2.hvck", "ckpt_step3.hvck", LATEST_CHECKPOINT] {
            assert!(run.join(name).exists(), "missing {name}");
        }
        let log = read_log(&out.log_path);
        assert_eq!(log.len(), 3);
        for (i, rec) in log.iter().enumerate() {
            assert_eq!(rec["step"].as_u64().unwrap(), i as u64 + 1);
            assert!(rec["total"].as_f64().unwrap().is_finite());
            assert!(rec["pixel"].as_f64().unwrap() >= 0.0);
            assert!(rec["temporal"].as_f64().unwrap() > 0.0);
            assert!(rec.get("perceptual").is_none(), "weight 0 leaves no entry");
        }
        let latest = checkpoint::load(&out.latest_checkpoint).unwrap();
        assert_eq!(latest.step, 3);
        assert!(latest.tensors.keys().any(|k| k.starts_with("optim.")));
    }

    #[test]
    fn zero_max_steps_saves_only_the_initial_checkpoint() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        build_dataset(dir.path(), &cfg, 5, 16, 16);
        let out = train(&cfg).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.final_loss.is_none());
        let run = dir.path().join("run");
        assert!(run.join("ckpt_step0.hvck").exists());
        assert!(run.join(LATEST_CHECKPOINT).exists());
        assert!(!run.join("ckpt_step1.hvck").exists());
        assert_eq!(fs::read_to_string(out.log_path).unwrap(), "");
        let ck = checkpoint::load(&run.join(LATEST_CHECKPOINT)).unwrap();
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let mut latest = Vec::new();
        let mut dirs = Vec::new();
        for _ in 0..2 {
            let dir = TempDir::new().unwrap();
            let mut cfg = tiny_cfg(dir.path());
            cfg.train.max_steps = 2;
            build_dataset(dir.path(), &cfg, 7, 16, 16);
            let out = train(&cfg).unwrap();
            latest.push(out.latest_checkpoint);
            dirs.push(dir);
        }
        assert_checkpoints_bitwise_equal(&latest[0], &latest[1]);
    }

    #[test]
    fn resume_matches_a_single_uninterrupted_run() {
        // One shot: four steps.
        let dir_a = TempDir::new().unwrap();
        let mut cfg_a = tiny_cfg(dir_a.path());
        cfg_a.train.max_steps = 4;
        build_dataset(dir_a.path(), &cfg_a, 7, 16, 16);
        let out_a = train(&cfg_a).unwrap();

        // Interrupted: two steps, then resume to four.
        let dir_b = TempDir::new().unwrap();
        let mut cfg_b = tiny_cfg(dir_b.path());
        cfg_b.train.max_steps = 2;
        build_dataset(dir_b.path(), &cfg_b, 7, 16, 16);
        train(&cfg_b).unwrap();
        cfg_b.train.max_steps = 4;
        let out_b = train(&cfg_b).unwrap();
        assert_eq!(out_b.steps_run, 4);

        assert_checkpoints_bitwise_equal(&out_a.latest_checkpoint, &out_b.latest_checkpoint);
        // The interrupted run logged 1,2 then 3,4.
        let steps: Vec<u64> = read_log(&out_b.log_path)
            .iter()
            .map(|r| r["step"].as_u64().unwrap())
            .collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn resume_refuses_a_checkpoint_from_another_configuration() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        build_dataset(dir.path(), &cfg, 5, 16, 16);
        train(&cfg).unwrap();
        cfg.model.kq_channels += 1;
        cfg.train.max_steps = 1;
        match train(&cfg) {
            Err(Error::CheckpointMismatch(_)) => {}
            other => panic!("expected a checkpoint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn divergence_names_the_step_and_the_last_good_checkpoint() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 1;
        build_dataset(dir.path(), &cfg, 7, 16, 16);
        train(&cfg).unwrap();

        // Corrupt the learned weights in place: every parameter becomes NaN,
        // so the next step's forward pass and losses are NaN and training
        // must stop rather than write garbage on top of a good run.
        let latest = dir.path().join("run").join(LATEST_CHECKPOINT);
        let ck = checkpoint::load(&latest).unwrap();
        let mut poisoned = checkpoint::Checkpoint::new(ck.config_hash, ck.step);
        for (k, t) in &ck.tensors {
            let nan = Tensor::from_vec(
                t.shape(),
                t.data()
                    .iter()
                    .map(|_| if k.starts_with("optim.") { 0.0 } else { f64::NAN })
                    .collect(),
            );
            poisoned
                .tensors
                .insert(k.clone(), if k == "optim.step" { t.clone() } else { nan });
        }
        checkpoint::save(&latest, &poisoned).unwrap();

        cfg.train.max_steps = 2;
        match train(&cfg) {
            Err(Error::TrainingDiverged { step, msg, last_good }) => {
                assert_eq!(step, 2);
                assert!(msg.contains("loss is"), "{msg}");
                assert_eq!(last_good.unwrap(), latest);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shortest_sequence_reaches_the_temporal_floor_exactly() {
        // Five frames with a two-exposure pattern admit exactly one window;
        // the temporal pair degenerates to a duplicate and the temporal term
        // must sit exactly at the Charbonnier floor.
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 1;
        build_dataset(dir.path(), &cfg, 5, 16, 16);
        let out = train(&cfg).unwrap();
        let log = read_log(&out.log_path);
        let eps = cfg.loss_weights().epsilon;
        assert_eq!(log[0]["temporal"].as_f64().unwrap(), eps);
    }

    #[test]
    fn inference_writes_one_frame_per_valid_centre() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        let manifest = build_dataset(dir.path(), &cfg, 5, 16, 16);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let out_dir = dir.path().join("pred");
        let written = infer(&cfg, &ckpt, &manifest, &out_dir, None).unwrap();
        // Five frames, two-exposure pattern: exactly one centre, frame 2.
        assert_eq!(written.len(), 1);
        assert!(written[0].ends_with("seq/frame_0002.exr"));
        let pred = imageio::read_hdr_frame(&written[0]).unwrap();
        assert_eq!(pred.shape(), &[3, 16, 16]);
        assert!(pred.data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn inference_restores_sizes_off_the_alignment_grid() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        cfg.train.crop = 8;
        let manifest = build_dataset(dir.path(), &cfg, 5, 10, 14);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let written = infer(&cfg, &ckpt, &manifest, &dir.path().join("pred"), None).unwrap();
        let pred = imageio::read_hdr_frame(&written[0]).unwrap();
        assert_eq!(pred.shape(), &[3, 10, 14], "padding is cropped back off");
    }

    #[test]
    fn inference_never_opens_ground_truth() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        let manifest_path = build_dataset(dir.path(), &cfg, 5, 16, 16);
        train(&cfg).unwrap();

        // Point every ground-truth entry at a file that does not exist; a
        // reconstruction pass must not notice.
        let mut manifest = Manifest::load(&manifest_path).unwrap();
        manifest.sequences[0].ground_truth_paths =
            Some(vec![PathBuf::from("seq/absent.exr"); 5]);
        manifest.save(&manifest_path).unwrap();

        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let written = infer(&cfg, &ckpt, &manifest_path, &dir.path().join("pred"), None).unwrap();
        assert_eq!(written.len(), 1);
    }

    #[test]
    fn inference_refuses_a_mismatched_checkpoint() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        let manifest = build_dataset(dir.path(), &cfg, 5, 16, 16);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let mut other = cfg.clone();
        other.model.kq_channels += 1;
        match infer(&other, &ckpt, &manifest, &dir.path().join("pred"), None) {
            Err(Error::CheckpointMismatch(_)) => {}
            other => panic!("expected a checkpoint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn whole_frame_tile_matches_untiled_inference_bitwise() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        let manifest = build_dataset(dir.path(), &cfg, 5, 16, 16);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let full = infer(&cfg, &ckpt, &manifest, &dir.path().join("a"), None).unwrap();
        let tiled = infer(&cfg, &ckpt, &manifest, &dir.path().join("b"), Some(16)).unwrap();
        let fa = imageio::read_hdr_frame(&full[0]).unwrap();
        let fb = imageio::read_hdr_frame(&tiled[0]).unwrap();
        for (x, y) in fa.data().iter().zip(fb.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tiled_inference_covers_and_blends_the_whole_frame() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.train.max_steps = 0;
        cfg.train.crop = 8;
        let manifest = build_dataset(dir.path(), &cfg, 5, 24, 16);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("run").join(LATEST_CHECKPOINT);
        let written = infer(&cfg, &ckpt, &manifest, &dir.path().join("pred"), Some(8)).unwrap();
        let pred = imageio::read_hdr_frame(&written[0]).unwrap();
        assert_eq!(pred.shape(), &[3, 24, 16]);
        assert!(pred.data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        // An undersized or misaligned tile is a configuration error.
        match infer(&cfg, &ckpt, &manifest, &dir.path().join("bad"), Some(6)) {
            Err(Error::Config(_)) => {}
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn tile_grid_covers_every_pixel_with_complementary_ramps() {
        // 24-wide axis, 8-pixel tiles, 4-pixel overlap: origins march in
        // strides of 4 and the last tile ends at the boundary.
        assert_eq!(tile_origins(24, 8, 4), vec![0, 4, 8, 12, 16]);
        assert_eq!(tile_origins(16, 16, 8), vec![0]);
        // An 8-pixel tile with a 4-pixel band is all ramp; a 16-pixel tile
        // has a flat interior plateau at 1 between linear edges.
        let ov = 4;
        let w8: Vec<f64> = (0..8).map(|i| axis_weight(i, 8, ov)).collect();
        assert_eq!(w8, [0.2, 0.4, 0.6, 0.8, 0.8, 0.6, 0.4, 0.2]);
        let w16: Vec<f64> = (0..16).map(|i| axis_weight(i, 16, ov)).collect();
        assert_eq!(&w16[..5], &[0.2, 0.4, 0.6, 0.8, 1.0]);
        assert!(w16[5..12].iter().all(|v| *v == 1.0));
        assert_eq!(&w16[12..], &[0.8, 0.6, 0.4, 0.2]);
        // Interior neighbours at stride = tile − overlap cross-fade to a
        // partition of unity: the ramp span ov+1 makes the sums exact.
        for tile in [8usize, 16] {
            for i in 0..ov {
                let total = axis_weight(tile - ov + i, tile, ov) + axis_weight(i, tile, ov);
                assert_eq!(total, 1.0, "tile {tile}, overlap pixel {i}");
            }
        }
        assert_eq!(overlap_for(8), 4);
        assert_eq!(overlap_for(64), 32);
        assert_eq!(overlap_for(4), 0);
    }

    #[test]
    fn evaluation_scores_identical_directories_as_perfect() {
        let dir = TempDir::new().unwrap();
        let (pa, pb) = (dir.path().join("pred"), dir.path().join("gt"));
        fs::create_dir_all(&pa).unwrap();
        fs::create_dir_all(&pb).unwrap();
        for t in 0..2 {
            let f = moving_scene(12, 12, t);
            imageio::write_hdr_frame(&f, &pa.join(format!("f{t}.exr"))).unwrap();
            imageio::write_hdr_frame(&f, &pb.join(format!("f{t}.exr"))).unwrap();
        }
        let report_path = dir.path().join("report.json");
        let report = eval(&pa, &pb, 5000.0, Some(&report_path)).unwrap();
        assert_eq!(report.frame_count, 2);
        assert!(matches!(report.mean_psnr_t, crate::metrics::Psnr::Infinite));
        assert_eq!(report.mean_ssim_t, 1.0);
        assert_eq!(report.mean_ssim_pu, 1.0);
        let text = fs::read_to_string(&report_path).unwrap();
        assert!(text.contains("\"infinite\""));
        let parsed: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.frame_count, 2);
    }

    #[test]
    fn evaluation_rejects_empty_or_mismatched_directories() {
        let dir = TempDir::new().unwrap();
        let (pa, pb) = (dir.path().join("pred"), dir.path().join("gt"));
        fs::create_dir_all(&pa).unwrap();
        fs::create_dir_all(&pb).unwrap();
        match eval(&pa, &pb, 5000.0, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("no .exr/.hdr")),
            other => panic!("expected a data error, got {other:?}"),
        }
        imageio::write_hdr_frame(&moving_scene(8, 8, 0), &pa.join("a.exr")).unwrap();
        imageio::write_hdr_frame(&moving_scene(8, 8, 0), &pb.join("a.exr")).unwrap();
        imageio::write_hdr_frame(&moving_scene(8, 8, 1), &pb.join("b.exr")).unwrap();
        match eval(&pa, &pb, 5000.0, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("1 predicted")),
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn profile_renders_one_row_per_frame() {
        let dir = TempDir::new().unwrap();
        let frames = dir.path().join("frames");
        fs::create_dir_all(&frames).unwrap();
        for t in 0..3 {
            imageio::write_hdr_frame(&moving_scene(8, 10, t), &frames.join(format!("f{t}.exr")))
                .unwrap();
        }
        let out = dir.path().join("profile.png");
        let prof = profile(&frames, 4, 5000.0, &out).unwrap();
        assert_eq!(prof.shape(), &[3, 3, 10]);
        let png = imageio::read_ldr_frame(&out).unwrap();
        assert_eq!(png.shape(), &[3, 3, 10]);
    }
}
