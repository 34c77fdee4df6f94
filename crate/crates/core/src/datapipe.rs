//! Dataset plumbing: alternating-exposure synthesis from clean frames,
//! manifest records, window assembly, and window-coherent augmentation.
//!
//! A training/inference sample is a window of `2N+1` consecutive LDR frames
//! whose exposure times follow a cyclic pattern of `N` distinct values
//! (`N = 2` → 5 frames, `N = 3` → 7 frames), centred on the reference frame.
//! Everything that transforms a window applies one shared draw to every
//! frame so cross-frame correspondence is preserved, and linear-radiance
//! companions are rebuilt from the transformed LDR values so the pair stays
//! consistent by construction.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::radiometry::{ldr_to_linear, ExposureFrame, LinearFrame};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Exposure synthesis
// ---------------------------------------------------------------------------

/// Optional sensor-noise model for synthesis, disabled when both terms are
/// zero. The per-pixel standard deviation is `sqrt(shot²·x + read²)` with
/// `x` the clipped linear intensity; the draw is added after gamma
/// re-encoding, immediately before quantization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseCfg {
    pub shot: f64,
    pub read: f64,
}

impl NoiseCfg {
    pub fn enabled(&self) -> bool {
        self.shot != 0.0 || self.read != 0.0
    }
}

/// Cyclic exposure values `2^(stops·i)` for `i in 0..pattern_size`:
/// `{1, 4}` for two exposures at 2 stops, `{1, 4, 16}` for three.
pub fn exposure_values(pattern_size: usize, stops: f64) -> Result<Vec<f64>> {
    if !(pattern_size == 2 || pattern_size == 3) {
        return Err(Error::Config(format!(
            "exposure pattern size must be 2 or 3, got {pattern_size}"
        )));
    }
    if !(stops > 0.0) || !stops.is_finite() {
        return Err(Error::Config(format!(
            "exposure gap must be a positive number of stops, got {stops}"
        )));
    }
    Ok((0..pattern_size)
        .map(|i| (2f64).powf(stops * i as f64))
        .collect())
}

fn quantize8(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render one LDR exposure of a clean `[0,1]` frame: linearize through the
/// display gamma, scale by the exposure value, clip, re-encode, optionally
/// add noise, and quantize to 8 bits.
pub fn synthesize_exposures<R: Rng>(
    clean: &Tensor,
    e: f64,
    gamma: f64,
    noise: &NoiseCfg,
    rng: &mut R,
) -> Result<ExposureFrame> {
    if clean.shape().len() != 3 || clean.c() != 3 {
        return Err(Error::InvalidInput(format!(
            "clean frame must be [3,h,w], got {:?}",
            clean.shape()
        )));
    }
    if clean.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvalidInput(
            "clean frame values must lie in [0,1]".into(),
        ));
    }
    let encoded = if noise.enabled() {
        let d = clean.data();
        let mut out = Vec::with_capacity(d.len());
        for &c in d {
            let lin = (c.powf(gamma) * e).clamp(0.0, 1.0);
            let sigma = (noise.shot * noise.shot * lin + noise.read * noise.read).sqrt();
            let v = lin.powf(1.0 / gamma) + sigma * standard_normal(rng);
            out.push(quantize8(v.clamp(0.0, 1.0)));
        }
        Tensor::from_vec(clean.shape(), out)
    } else {
        clean.map(|c| quantize8((c.powf(gamma) * e).clamp(0.0, 1.0).powf(1.0 / gamma)))
    };
    ExposureFrame::new(encoded, e)
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

/// One sequence in a dataset manifest: ordered LDR frame paths, an optional
/// matching list of ground-truth HDR paths, and the exposure pattern the
/// sequence was captured (or synthesized) with. `phase` is the pattern
/// index of frame 0.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub frame_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_paths: Option<Vec<PathBuf>>,
    pub pattern_size: usize,
    pub stops: f64,
    #[serde(default)]
    pub phase: usize,
}

impl SequenceRecord {
    pub fn exposure_values(&self) -> Result<Vec<f64>> {
        exposure_values(self.pattern_size, self.stops)
    }

    /// Structural checks plus existence of every referenced file under
    /// `root` (relative paths are resolved against it).
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.exposure_values()?;
        if self.phase >= self.pattern_size {
            return Err(Error::Config(format!(
                "sequence {}: phase {} outside pattern of size {}",
                self.id, self.phase, self.pattern_size
            )));
        }
        if self.frame_paths.is_empty() {
            return Err(Error::Data(format!("sequence {}: no frames listed", self.id)));
        }
        if let Some(gt) = &self.ground_truth_paths {
            if gt.len() != self.frame_paths.len() {
                return Err(Error::Data(format!(
                    "sequence {}: {} frames but {} ground-truth entries",
                    self.id,
                    self.frame_paths.len(),
                    gt.len()
                )));
            }
        }
        for p in self
            .frame_paths
            .iter()
            .chain(self.ground_truth_paths.iter().flatten())
        {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::Data(format!(
                    "sequence {}: missing file {}",
                    self.id,
                    full.display()
                )));
            }
        }
        Ok(())
    }
}

/// A dataset manifest: the list of sequences, stored as JSON.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub sequences: Vec<SequenceRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!(
            "{}: {e}",
            path.display()
        )))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Data("manifest lists no sequences".into()));
        }
        for s in &self.sequences {
            s.validate(root)?;
        }
        Ok(())
    }
}

/// Decode every LDR frame of a sequence and tag it with its pattern
/// exposure.
pub fn load_sequence(record: &SequenceRecord, root: &Path) -> Result<Vec<ExposureFrame>> {
    let pattern = record.exposure_values()?;
    record
        .frame_paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pixels = imageio::read_ldr_frame(&root.join(p))?;
            ExposureFrame::new(pixels, pattern[(record.phase + i) % pattern.len()])
        })
        .collect()
}

/// Decode the ground-truth HDR frames of a sequence.
pub fn load_ground_truth(record: &SequenceRecord, root: &Path) -> Result<Vec<Tensor>> {
    let gt = record.ground_truth_paths.as_ref().ok_or_else(|| {
        Error::Data(format!("sequence {}: no ground truth listed", record.id))
    })?;
    gt.iter().map(|p| imageio::read_hdr_frame(&root.join(p))).collect()
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// A `2N+1`-frame alternating-exposure window centred on the reference
/// frame, with per-frame linear-radiance companions. All frames share one
/// padded geometry (dims are multiples of 4); `original_hw` remembers the
/// pre-padding size so outputs can be cropped back.
#[derive(Clone, Debug)]
pub struct FrameWindow {
    pub frames: Vec<ExposureFrame>,
    pub linear: Vec<LinearFrame>,
    pub reference_index: usize,
    pub pattern: Vec<f64>,
    pub original_hw: (usize, usize),
}

impl FrameWindow {
    pub fn validate(&self) -> Result<()> {
        let p = self.pattern.len();
        if !(p == 2 || p == 3) {
            return Err(Error::InvalidInput(format!(
                "window pattern must have 2 or 3 exposures, got {p}"
            )));
        }
        if self.frames.len() != 2 * p + 1 {
            return Err(Error::InvalidInput(format!(
                "window with {} exposures must hold {} frames, got {}",
                p,
                2 * p + 1,
                self.frames.len()
            )));
        }
        if self.reference_index != p {
            return Err(Error::InvalidInput(format!(
                "reference index must be the centre {}, got {}",
                p, self.reference_index
            )));
        }
        if self.linear.len() != self.frames.len() {
            return Err(Error::InvalidInput(
                "each frame needs a linear companion".into(),
            ));
        }
        let (h, w) = (self.frames[0].pixels.h(), self.frames[0].pixels.w());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "window dims must be multiples of 4, got {h}×{w}"
            )));
        }
        for f in &self.frames {
            if f.pixels.h() != h || f.pixels.w() != w {
                return Err(Error::InvalidInput("window frames must share dims".into()));
            }
            if !self.pattern.iter().any(|&e| e == f.exposure) {
                return Err(Error::Data(format!(
                    "frame exposure {} is not in the pattern {:?}",
                    f.exposure, self.pattern
                )));
            }
        }
        for pair in self.frames.windows(2) {
            if pair[0].exposure == pair[1].exposure {
                return Err(Error::Data(format!(
                    "consecutive frames share exposure {}",
                    pair[0].exposure
                )));
            }
        }
        Ok(())
    }
}

/// Replicate the bottom/right edges until both dims are multiples of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> Tensor {
    assert!(m > 0, "padding multiple must be positive");
    let (c, h, w) = (t.c(), t.h(), t.w());
    let h2 = h.div_ceil(m) * m;
    let w2 = w.div_ceil(m) * m;
    if h2 == h && w2 == w {
        return t.clone();
    }
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let sy = y.min(h - 1);
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = t.at3(ch, sy, x.min(w - 1));
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out)
}

/// Assemble the window centred at sequence index `t` from tagged frames.
/// `t` must have `pattern.len()` valid neighbours on each side; boundary
/// indices are rejected rather than padded.
pub fn make_window(
    frames: &[ExposureFrame],
    pattern: &[f64],
    phase: usize,
    t: usize,
    gamma: f64,
) -> Result<FrameWindow> {
    let p = pattern.len();
    if !(p == 2 || p == 3) {
        return Err(Error::Config(format!(
            "exposure pattern must list 2 or 3 values, got {p}"
        )));
    }
    let n = p; // half-width: 5 frames for 2 exposures, 7 for 3
    if t < n || t + n >= frames.len() {
        return Err(Error::InvalidInput(format!(
            "frame {t} lacks {n} neighbours on each side in a {}-frame sequence",
            frames.len()
        )));
    }
    let (h, w) = (frames[t].pixels.h(), frames[t].pixels.w());
    let mut window = Vec::with_capacity(2 * n + 1);
    let mut linear = Vec::with_capacity(2 * n + 1);
    for i in (t - n)..=(t + n) {
        let f = &frames[i];
        let expected = pattern[(phase + i) % p];
        if f.exposure != expected {
            return Err(Error::Data(format!(
                "frame {i} tagged with exposure {} but the pattern expects {expected}",
                f.exposure
            )));
        }
        if f.pixels.h() != h || f.pixels.w() != w {
            return Err(Error::Data(format!(
                "frame {i} is {}×{} but the reference is {h}×{w}",
                f.pixels.h(),
                f.pixels.w()
            )));
        }
        let padded = ExposureFrame::new(pad_to_multiple(&f.pixels, 4), f.exposure)?;
        linear.push(ldr_to_linear(&padded, gamma)?);
        window.push(padded);
    }
    let out = FrameWindow {
        frames: window,
        linear,
        reference_index: n,
        pattern: pattern.to_vec(),
        original_hw: (h, w),
    };
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Which augmentation families may be drawn. Geometric and colour draws are
/// shared by every frame in a window; exposure tags are never touched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentCfg {
    pub flip: bool,
    pub rotate: bool,
    pub channel_permute: bool,
    /// Uniform gain range applied to the encoded values, e.g. `(0.9, 1.1)`.
    #[serde(default)]
    pub gain_jitter: Option<(f64, f64)>,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            flip: true,
            rotate: true,
            channel_permute: true,
            gain_jitter: None,
        }
    }
}

const CHANNEL_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn rot90_ccw(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.c(), t.h(), t.w());
    let mut out = vec![0.0; c * h * w];
    // Output is [c, w, h]; out(y', x') = in(x', w−1−y').
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out[(ch * w + y) * h + x] = t.at3(ch, x, w - 1 - y);
            }
        }
    }
    Tensor::from_vec(&[c, w, h], out)
}

fn flip_h(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.c(), t.h(), t.w());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = t.at3(ch, y, w - 1 - x);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn permute_channels(t: &Tensor, perm: [usize; 3]) -> Tensor {
    if perm == [0, 1, 2] {
        return t.clone();
    }
    let (h, w) = (t.h(), t.w());
    let hw = h * w;
    let mut out = vec![0.0; 3 * hw];
    for c in 0..3 {
        out[c * hw..(c + 1) * hw]
            .copy_from_slice(&t.data()[perm[c] * hw..(perm[c] + 1) * hw]);
    }
    Tensor::from_vec(t.shape(), out)
}

/// Horizontal flip (first) then `quarter_turns` 90° counter-clockwise
/// rotations. The identity draw `(false, 0)` returns the input unchanged.
pub fn apply_geometry(t: &Tensor, flip: bool, quarter_turns: usize) -> Tensor {
    let mut out = if flip { flip_h(t) } else { t.clone() };
    for _ in 0..(quarter_turns % 4) {
        out = rot90_ccw(&out);
    }
    out
}

/// One concrete augmentation decision. Drawing is separated from applying
/// so a single draw can be replayed onto several related tensors — both
/// windows of a temporal pair and their ground-truth frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub quarter_turns: usize,
    pub perm: [usize; 3],
    /// Encoded-domain gain applied to the LDR inputs only; ground truth is
    /// never gain-jittered (the perturbation trains exposure robustness).
    pub gain: Option<f64>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            quarter_turns: 0,
            perm: [0, 1, 2],
            gain: None,
        }
    }
}

/// Sample one shared transform according to the configuration.
pub fn draw_augment<R: Rng>(cfg: &AugmentCfg, rng: &mut R) -> AugmentDraw {
    AugmentDraw {
        flip: cfg.flip && rng.gen::<bool>(),
        quarter_turns: if cfg.rotate { rng.gen_range(0..4usize) } else { 0 },
        perm: if cfg.channel_permute {
            CHANNEL_PERMS[rng.gen_range(0..CHANNEL_PERMS.len())]
        } else {
            [0, 1, 2]
        },
        gain: cfg.gain_jitter.map(|(lo, hi)| {
            assert!(lo > 0.0 && hi >= lo, "gain range must be positive and ordered");
            rng.gen_range(lo..=hi)
        }),
    }
}

/// The geometric and channel parts of a draw, for any `[3,h,w]` frame.
/// This is what ground-truth frames receive: gain is deliberately skipped.
pub fn apply_draw_frame(t: &Tensor, d: &AugmentDraw) -> Tensor {
    permute_channels(&apply_geometry(t, d.flip, d.quarter_turns), d.perm)
}

/// Replay one draw onto every frame of a window. Linear companions are
/// rebuilt from the transformed LDR values, so the LDR/linear pair stays
/// exactly consistent under any draw.
pub fn apply_augment(w: &FrameWindow, d: &AugmentDraw, gamma: f64) -> Result<FrameWindow> {
    if d.quarter_turns % 2 == 1 {
        assert_eq!(
            w.frames[0].pixels.h(),
            w.frames[0].pixels.w(),
            "90° rotations need square crops"
        );
    }
    let mut frames = Vec::with_capacity(w.frames.len());
    let mut linear = Vec::with_capacity(w.frames.len());
    for f in &w.frames {
        let mut px = apply_draw_frame(&f.pixels, d);
        if let Some(g) = d.gain {
            px = px.map(|v| (v * g).clamp(0.0, 1.0));
        }
        let frame = ExposureFrame::new(px, f.exposure)?;
        linear.push(ldr_to_linear(&frame, gamma)?);
        frames.push(frame);
    }
    let out = FrameWindow {
        frames,
        linear,
        reference_index: w.reference_index,
        pattern: w.pattern.clone(),
        original_hw: w.original_hw,
    };
    out.validate()?;
    Ok(out)
}

/// Draw one shared transform and apply it to every frame.
pub fn augment<R: Rng>(
    w: &FrameWindow,
    cfg: &AugmentCfg,
    gamma: f64,
    rng: &mut R,
) -> Result<FrameWindow> {
    let d = draw_augment(cfg, rng);
    apply_augment(w, &d, gamma)
}

/// Copy the `h×w` region at `(y0, x0)` out of a `[c,·,·]` tensor.
pub fn crop_frame(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    assert!(y0 + h <= t.h() && x0 + w <= t.w(), "crop exceeds the frame");
    let c = t.c();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = t.at3(ch, y0 + y, x0 + x);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Sample a square crop origin valid for an `h×w` frame.
pub fn draw_crop<R: Rng>(h: usize, w: usize, size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if size == 0 || size % 4 != 0 {
        return Err(Error::Config(format!(
            "crop size must be a positive multiple of 4, got {size}"
        )));
    }
    if size > h || size > w {
        return Err(Error::Data(format!("crop {size} exceeds the {h}×{w} frame")));
    }
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

/// Apply one shared square crop to every frame of a window.
pub fn crop_window(w: &FrameWindow, size: usize, y0: usize, x0: usize) -> Result<FrameWindow> {
    let frames: Vec<ExposureFrame> = w
        .frames
        .iter()
        .map(|f| ExposureFrame::new(crop_frame(&f.pixels, y0, x0, size, size), f.exposure))
        .collect::<Result<_>>()?;
    let linear = w
        .linear
        .iter()
        .map(|l| LinearFrame {
            pixels: crop_frame(&l.pixels, y0, x0, size, size),
        })
        .collect();
    let out = FrameWindow {
        frames,
        linear,
        reference_index: w.reference_index,
        pattern: w.pattern.clone(),
        original_hw: (size, size),
    };
    out.validate()?;
    Ok(out)
}

/// One shared random square crop across the whole window.
pub fn random_crop<R: Rng>(w: &FrameWindow, size: usize, rng: &mut R) -> Result<FrameWindow> {
    let (h, wid) = (w.frames[0].pixels.h(), w.frames[0].pixels.w());
    let (y0, x0) = draw_crop(h, wid, size, rng)?;
    crop_window(w, size, y0, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiometry::DEFAULT_GAMMA;
    use crate::testutil::{assert_slices_bitwise, pseudo_tensor_in};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const G: f64 = DEFAULT_GAMMA;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn quiet() -> NoiseCfg {
        NoiseCfg::default()
    }

    /// Tagged frames of a synthetic sequence: frame i encodes its index in
    /// a deterministic texture so geometric checks can trace pixels.
    fn sequence(len: usize, pattern: &[f64], phase: usize, h: usize, w: usize) -> Vec<ExposureFrame> {
        (0..len)
            .map(|i| {
                let pixels = pseudo_tensor_in(&[3, h, w], 100 + i as u64, 0.0, 1.0);
                ExposureFrame::new(pixels, pattern[(phase + i) % pattern.len()]).unwrap()
            })
            .collect()
    }

    #[test]
    fn exposure_values_follow_the_stop_ladder() {
        assert_eq!(exposure_values(2, 2.0).unwrap(), vec![1.0, 4.0]);
        assert_eq!(exposure_values(3, 2.0).unwrap(), vec![1.0, 4.0, 16.0]);
        assert_eq!(exposure_values(2, 1.0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(exposure_values(2, 0.0), Err(Error::Config(_))));
        assert!(matches!(exposure_values(2, -1.0), Err(Error::Config(_))));
        assert!(matches!(exposure_values(4, 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn unit_exposure_synthesis_is_quantization() {
        let clean = pseudo_tensor_in(&[3, 5, 6], 1, 0.0, 1.0);
        let f = synthesize_exposures(&clean, 1.0, G, &quiet(), &mut rng(0)).unwrap();
        for (c, v) in clean.iter().zip(f.pixels.iter()) {
            // linearize→×1→clip→re-gamma is the identity up to float noise;
            // the only surviving effect is the 8-bit rounding.
            assert!((quantize8(*c) - v).abs() < 1e-9, "{c} → {v}");
        }
    }

    #[test]
    fn bright_exposure_clips_and_dim_exposure_matches_the_scalar_pipeline() {
        // A pixel with linear value 0.5 saturates at e = 4.
        let l = 0.5f64.powf(1.0 / G);
        let clean = Tensor::filled(&[3, 2, 2], l);
        let bright = synthesize_exposures(&clean, 4.0, G, &quiet(), &mut rng(0)).unwrap();
        assert!(bright.pixels.iter().all(|&v| v == 1.0));

        // The same pixel at e = 0.25 lands on gamma(0.125), quantized.
        let dim = synthesize_exposures(&clean, 0.25, G, &quiet(), &mut rng(0)).unwrap();
        let expected = quantize8(0.125f64.powf(1.0 / G));
        assert!(dim.pixels.iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn synthesis_round_trips_through_the_radiance_estimate() {
        // ldr_to_linear of a synthesized frame must recover clip(c^γ·e)/e
        // within 8-bit quantization, measured post-gamma.
        for (seed, &e) in [1.0, 4.0, 0.25].iter().enumerate() {
            let clean = pseudo_tensor_in(&[3, 8, 8], 40 + seed as u64, 0.0, 1.0);
            let f = synthesize_exposures(&clean, e, G, &quiet(), &mut rng(0)).unwrap();
            let lin = ldr_to_linear(&f, G).unwrap();
            for (c, x) in clean.iter().zip(lin.pixels.iter()) {
                let expected = (c.powf(G) * e).clamp(0.0, 1.0) / e;
                let got_post_gamma = (x * e).powf(1.0 / G);
                let want_post_gamma = (expected * e).powf(1.0 / G);
                assert!(
                    (got_post_gamma - want_post_gamma).abs() <= 0.5 / 255.0 + 1e-9,
                    "clean {c}, e {e}: {got_post_gamma} vs {want_post_gamma}"
                );
            }
        }
    }

    #[test]
    fn noise_is_off_by_default_reproducible_and_bounded() {
        let clean = pseudo_tensor_in(&[3, 6, 6], 50, 0.0, 1.0);
        let a = synthesize_exposures(&clean, 1.0, G, &quiet(), &mut rng(1)).unwrap();
        let b = synthesize_exposures(&clean, 1.0, G, &quiet(), &mut rng(2)).unwrap();
        assert_slices_bitwise(a.pixels.data(), b.pixels.data(), "disabled noise is pure");

        let noisy_cfg = NoiseCfg { shot: 0.05, read: 0.01 };
        let n1 = synthesize_exposures(&clean, 1.0, G, &noisy_cfg, &mut rng(3)).unwrap();
        let n2 = synthesize_exposures(&clean, 1.0, G, &noisy_cfg, &mut rng(3)).unwrap();
        let n3 = synthesize_exposures(&clean, 1.0, G, &noisy_cfg, &mut rng(4)).unwrap();
        assert_slices_bitwise(n1.pixels.data(), n2.pixels.data(), "seeded noise repeats");
        assert!(n1.pixels.data() != n3.pixels.data(), "different seeds differ");
        assert!(n1.pixels.data() != a.pixels.data(), "noise changes values");
        assert!(n1.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn windows_have_the_pattern_determined_arity_and_tags() {
        let pattern = [1.0, 4.0];
        for phase in 0..2 {
            let frames = sequence(6, &pattern, phase, 8, 8);
            let w = make_window(&frames, &pattern, phase, 2, G).unwrap();
            assert_eq!(w.frames.len(), 5);
            assert_eq!(w.reference_index, 2);
            let tags: Vec<f64> = w.frames.iter().map(|f| f.exposure).collect();
            let want: Vec<f64> = (0..5).map(|i| pattern[(phase + i) % 2]).collect();
            assert_eq!(tags, want);
            assert_slices_bitwise(
                w.frames[2].pixels.data(),
                frames[2].pixels.data(),
                "reference is the centre frame",
            );
        }

        let pattern3 = [1.0, 4.0, 16.0];
        let frames = sequence(9, &pattern3, 0, 8, 8);
        let w = make_window(&frames, &pattern3, 0, 4, G).unwrap();
        assert_eq!(w.frames.len(), 7);
        assert_eq!(w.reference_index, 3);
    }

    #[test]
    fn boundary_and_mistagged_windows_are_rejected() {
        let pattern = [1.0, 4.0];
        let frames = sequence(6, &pattern, 0, 8, 8);
        assert!(make_window(&frames, &pattern, 0, 0, G).is_err());
        assert!(make_window(&frames, &pattern, 0, 1, G).is_err());
        assert!(make_window(&frames, &pattern, 0, 4, G).is_err());
        assert!(make_window(&frames, &pattern, 0, 5, G).is_err());
        assert!(make_window(&frames, &pattern, 0, 3, G).is_ok());

        let mut bad = sequence(6, &pattern, 0, 8, 8);
        bad[2] = ExposureFrame::new(bad[2].pixels.clone(), 4.0).unwrap();
        assert!(matches!(
            make_window(&bad, &pattern, 0, 2, G),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn windows_alternate_exposures_for_every_valid_centre_and_phase() {
        for (p, len) in [(vec![1.0, 4.0], 10), (vec![1.0, 4.0, 16.0], 12)] {
            let n = p.len();
            for phase in 0..n {
                let frames = sequence(len, &p, phase, 8, 8);
                for t in n..len - n {
                    let w = make_window(&frames, &p, phase, t, G).unwrap();
                    for pair in w.frames.windows(2) {
                        assert_ne!(pair[0].exposure, pair[1].exposure);
                    }
                    w.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn padding_replicates_edges_only_when_needed() {
        let t = pseudo_tensor_in(&[3, 8, 8], 60, 0.0, 1.0);
        let same = pad_to_multiple(&t, 4);
        assert_slices_bitwise(same.data(), t.data(), "already a multiple");

        let odd = pseudo_tensor_in(&[3, 5, 7], 61, 0.0, 1.0);
        let padded = pad_to_multiple(&odd, 4);
        assert_eq!(padded.shape(), &[3, 8, 8]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = odd.at3(c, y.min(4), x.min(6));
                    assert_eq!(padded.at3(c, y, x), want, "edge replication at {c},{y},{x}");
                }
            }
        }
    }

    #[test]
    fn geometry_ops_satisfy_the_group_identities() {
        let t = pseudo_tensor_in(&[3, 6, 6], 70, 0.0, 1.0);
        let r4 = apply_geometry(&t, false, 4);
        assert_slices_bitwise(r4.data(), t.data(), "four quarter turns");
        let ff = apply_geometry(&apply_geometry(&t, true, 0), true, 0);
        assert_slices_bitwise(ff.data(), t.data(), "flip twice");

        // Two quarter turns equal the explicit 180° index map.
        let r2 = apply_geometry(&t, false, 2);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(r2.at3(c, y, x), t.at3(c, 5 - y, 5 - x));
                }
            }
        }

        // Odd turns swap dims on rectangles.
        let rect = pseudo_tensor_in(&[3, 4, 8], 71, 0.0, 1.0);
        assert_eq!(apply_geometry(&rect, false, 1).shape(), &[3, 8, 4]);
        assert_eq!(apply_geometry(&rect, false, 1).h(), 8);
    }

    #[test]
    fn augment_identity_config_is_bitwise_transparent() {
        let pattern = [1.0, 4.0];
        let frames = sequence(6, &pattern, 0, 8, 8);
        let w = make_window(&frames, &pattern, 0, 2, G).unwrap();
        let off = AugmentCfg {
            flip: false,
            rotate: false,
            channel_permute: false,
            gain_jitter: None,
        };
        let out = augment(&w, &off, G, &mut rng(5)).unwrap();
        for i in 0..w.frames.len() {
            assert_slices_bitwise(out.frames[i].pixels.data(), w.frames[i].pixels.data(), "ldr");
            assert_slices_bitwise(out.linear[i].pixels.data(), w.linear[i].pixels.data(), "linear");
            assert_eq!(out.frames[i].exposure, w.frames[i].exposure);
        }
    }

    #[test]
    fn augment_is_window_coherent_and_keeps_tags_and_linear_consistency() {
        let pattern = [1.0, 4.0];
        // Mark one pixel with full white in every frame; background < 0.6
        // so the marker survives gain jitter as each frame's maximum.
        let frames: Vec<ExposureFrame> = (0..6)
            .map(|i| {
                let mut px = pseudo_tensor_in(&[3, 8, 8], 200 + i, 0.0, 0.6);
                for c in 0..3 {
                    let hw = 64;
                    px.data_mut()[c * hw + 3 * 8 + 5] = 1.0;
                }
                ExposureFrame::new(px, pattern[(i % 2) as usize]).unwrap()
            })
            .collect();
        let w = make_window(&frames, &pattern, 0, 2, G).unwrap();
        let cfg = AugmentCfg {
            gain_jitter: Some((0.9, 1.1)),
            ..AugmentCfg::default()
        };
        for seed in 0..8 {
            let out = augment(&w, &cfg, G, &mut rng(seed)).unwrap();
            let find_marker = |t: &Tensor| {
                let mut best = (0, 0.0f64);
                for (i, v) in t.iter().enumerate() {
                    if *v > best.1 {
                        best = (i, *v);
                    }
                }
                let hw = t.h() * t.w();
                (best.0 % hw / t.w(), best.0 % hw % t.w())
            };
            let reference_pos = find_marker(&out.frames[0].pixels);
            for (i, f) in out.frames.iter().enumerate() {
                assert_eq!(
                    find_marker(&f.pixels),
                    reference_pos,
                    "seed {seed}: frame {i} moved differently"
                );
                assert_eq!(f.exposure, w.frames[i].exposure, "tags untouched");
                let relinear = ldr_to_linear(f, G).unwrap();
                assert_slices_bitwise(
                    out.linear[i].pixels.data(),
                    relinear.pixels.data(),
                    "linear companion consistency",
                );
            }
        }
    }

    #[test]
    fn random_crop_shares_offsets_and_validates_sizes() {
        let pattern = [1.0, 4.0];
        // Encode coordinates in the pixel values so the crop offset is
        // readable from any output pixel.
        let coord_field = |_: u64| {
            let mut d = vec![0.0; 3 * 16 * 16];
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        d[(c * 16 + y) * 16 + x] = (y * 16 + x) as f64 / 256.0;
                    }
                }
            }
            Tensor::from_vec(&[3, 16, 16], d)
        };
        let frames: Vec<ExposureFrame> = (0..6)
            .map(|i| ExposureFrame::new(coord_field(i), pattern[(i % 2) as usize]).unwrap())
            .collect();
        let w = make_window(&frames, &pattern, 0, 2, G).unwrap();
        let out = random_crop(&w, 8, &mut rng(9)).unwrap();
        assert_eq!(out.frames[0].pixels.shape(), &[3, 8, 8]);
        let origin = out.frames[0].pixels.at3(0, 0, 0);
        for (i, f) in out.frames.iter().enumerate() {
            assert_eq!(f.pixels.at3(0, 0, 0), origin, "frame {i} offset differs");
            let relinear = ldr_to_linear(f, G).unwrap();
            assert_slices_bitwise(
                out.linear[i].pixels.data(),
                relinear.pixels.data(),
                "cropped linear matches recompute",
            );
        }
        assert!(random_crop(&w, 0, &mut rng(0)).is_err());
        assert!(random_crop(&w, 6, &mut rng(0)).is_err(), "not a multiple of 4");
        assert!(random_crop(&w, 32, &mut rng(0)).is_err(), "larger than frame");
    }

    #[test]
    fn manifests_round_trip_and_validate_their_files() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for i in 0..4 {
            let px = pseudo_tensor_in(&[3, 4, 4], 300 + i, 0.0, 1.0);
            imageio::write_ldr_png(&px, &root.join(format!("f{i}.png"))).unwrap();
            imageio::write_hdr_frame(&px, &root.join(format!("g{i}.exr"))).unwrap();
        }
        let record = SequenceRecord {
            id: "seq0".into(),
            frame_paths: (0..4).map(|i| PathBuf::from(format!("f{i}.png"))).collect(),
            ground_truth_paths: Some((0..4).map(|i| PathBuf::from(format!("g{i}.exr"))).collect()),
            pattern_size: 2,
            stops: 2.0,
            phase: 1,
        };
        let manifest = Manifest { sequences: vec![record.clone()] };
        let mpath = root.join("manifest.json");
        manifest.save(&mpath).unwrap();
        let back = Manifest::load(&mpath).unwrap();
        assert_eq!(back, manifest);
        back.validate(root).unwrap();

        let frames = load_sequence(&record, root).unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[0].exposure, 4.0, "phase 1 starts on the bright tag");
        assert_eq!(frames[1].exposure, 1.0);
        let gt = load_ground_truth(&record, root).unwrap();
        assert_eq!(gt.len(), 4);

        // Validation failures: missing file, count mismatch, bad pattern.
        let mut missing = record.clone();
        missing.frame_paths[0] = PathBuf::from("absent.png");
        let err = missing.validate(root).unwrap_err();
        assert!(err.to_string().contains("absent.png"), "{err}");
        let mut short_gt = record.clone();
        short_gt.ground_truth_paths = Some(vec![PathBuf::from("g0.exr")]);
        assert!(matches!(short_gt.validate(root), Err(Error::Data(_))));
        let mut bad_pattern = record.clone();
        bad_pattern.pattern_size = 5;
        assert!(matches!(bad_pattern.validate(root), Err(Error::Config(_))));
        let mut bad_phase = record;
        bad_phase.phase = 2;
        assert!(matches!(bad_phase.validate(root), Err(Error::Config(_))));
        assert!(Manifest::default().validate(root).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantization_lands_on_the_8_bit_lattice(v in 0.0f64..=1.0) {
            let q = quantize8(v);
            let k = q * 255.0;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!((q - v).abs() <= 0.5 / 255.0 + 1e-12);
        }

        #[test]
        fn synthesis_round_trip_bound_holds_for_random_pixels(
            c in 0.0f64..=1.0,
            e in prop::sample::select(vec![0.25f64, 1.0, 4.0, 16.0]),
        ) {
            let clean = Tensor::filled(&[3, 4, 4], c);
            let f = synthesize_exposures(&clean, e, G, &NoiseCfg::default(), &mut rng(0)).unwrap();
            let expected_post_gamma = (c.powf(G) * e).clamp(0.0, 1.0).powf(1.0 / G);
            let got = f.pixels.at3(0, 0, 0);
            prop_assert!((got - expected_post_gamma).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
