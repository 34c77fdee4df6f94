//! Evaluation metrics: PSNR/SSIM on tonemapped frames, PSNR/SSIM in the
//! perceptually-uniform luminance domain, temporal profiles, and the
//! serializable per-sequence report.
//!
//! PSNR of identical frames is reported as an explicit flag, never a float
//! sentinel. SSIM uses the standard 11×11 Gaussian window (σ = 1.5,
//! K1 = 0.01, K2 = 0.03) evaluated on the valid region only, so identical
//! inputs score exactly 1. The PU variants map the ground-truth peak to the
//! display peak luminance and encode *both* frames with that one scale, so
//! jointly rescaling pred and gt leaves the scores unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::radiometry::{mu_tonemap, pu_peak_code, pu_scalar, PU_PEAK_LUMINANCE};
use crate::tensor::Tensor;

/// A PSNR score: finite decibels, or an explicit perfect-match flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    #[serde(rename = "infinite")]
    Infinite,
    #[serde(untagged)]
    Finite(f64),
}

impl Psnr {
    pub fn as_db(&self) -> Option<f64> {
        match self {
            Psnr::Finite(db) => Some(*db),
            Psnr::Infinite => None,
        }
    }
}

fn check_same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidInput(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if t.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvalidInput(format!(
            "{what} must be normalized to [0,1] for tonemapped metrics"
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio `10·log10(peak²/MSE)` in dB.
pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<Psnr> {
    check_same_shape(pred, gt)?;
    assert!(peak > 0.0, "PSNR peak must be positive");
    let diff = pred.zip(gt, |a, b| {
        let d = a - b;
        d * d
    });
    let mse = diff.sum() / diff.len() as f64;
    if mse == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Finite(10.0 * (peak * peak / mse).log10()))
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let (y, x) = ((i / SSIM_WINDOW) as f64 - c, (i % SSIM_WINDOW) as f64 - c);
        *v = (-(y * y + x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Single-scale structural similarity, mean over the valid region (window
/// fully inside the frame) of all channels. Identical inputs score exactly
/// 1; the function is symmetric in its arguments.
pub fn ssim(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    assert!(peak > 0.0, "SSIM peak must be positive");
    let (c, h, w) = (pred.c(), pred.h(), pred.w());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "frames must be at least {SSIM_WINDOW}×{SSIM_WINDOW} for SSIM, got {h}×{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let (vh, vw) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let rows: Vec<Vec<f64>> = exec::map_collect(c * vh, |ri| {
        let (ch, oy) = (ri / vh, ri % vh);
        let px = pred.data();
        let gx = gt.data();
        let base = ch * h * w;
        let mut row = Vec::with_capacity(vw);
        for ox in 0..vw {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                let line = base + (oy + ky) * w + ox;
                for kx in 0..SSIM_WINDOW {
                    let wgt = win[ky * SSIM_WINDOW + kx];
                    let a = px[line + kx];
                    let b = gx[line + kx];
                    mx += wgt * a;
                    my += wgt * b;
                    mxx += wgt * (a * a);
                    myy += wgt * (b * b);
                    // Grouped so the product commutes bitwise when the
                    // arguments swap: SSIM must be exactly symmetric.
                    mxy += wgt * (a * b);
                }
            }
            let (sx, sy, sxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
            let num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2);
            let den = (mx * mx + my * my + c1) * (sx + sy + c2);
            row.push(num / den);
        }
        row
    });
    let map: Vec<f64> = rows.into_iter().flatten().collect();
    let n = map.len();
    Ok(Tensor::from_vec(&[n], map).sum() / n as f64)
}

/// PSNR on μ-law tonemapped frames, peak 1. Both frames must already be
/// normalized to `[0,1]`.
pub fn psnr_t(pred: &Tensor, gt: &Tensor, mu: f64) -> Result<Psnr> {
    check_same_shape(pred, gt)?;
    check_unit_range(pred, "prediction")?;
    check_unit_range(gt, "ground truth")?;
    psnr(&mu_tonemap(pred, mu), &mu_tonemap(gt, mu), 1.0)
}

/// SSIM on μ-law tonemapped frames, peak 1.
pub fn ssim_t(pred: &Tensor, gt: &Tensor, mu: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    check_unit_range(pred, "prediction")?;
    check_unit_range(gt, "ground truth")?;
    ssim(&mu_tonemap(pred, mu), &mu_tonemap(gt, mu), 1.0)
}

/// Encode both frames with the single scale that maps the ground-truth
/// peak to the display peak luminance, normalized by the display-peak code
/// so the effective signal peak is 1.
fn pu_pair(pred: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same_shape(pred, gt)?;
    let peak = gt.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !(peak > 0.0) {
        return Err(Error::DegenerateInput(
            "PU metrics need a ground truth with a positive peak".into(),
        ));
    }
    let scale = PU_PEAK_LUMINANCE / peak;
    let code_peak = pu_peak_code(PU_PEAK_LUMINANCE);
    let enc = |t: &Tensor| t.map(|v| pu_scalar(v.max(0.0) * scale) / code_peak);
    Ok((enc(pred), enc(gt)))
}

/// PSNR in the perceptually-uniform domain.
pub fn psnr_pu(pred: &Tensor, gt: &Tensor) -> Result<Psnr> {
    let (p, g) = pu_pair(pred, gt)?;
    psnr(&p, &g, 1.0)
}

/// SSIM in the perceptually-uniform domain.
pub fn ssim_pu(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = pu_pair(pred, gt)?;
    ssim(&p, &g, 1.0)
}

/// Stack row `row` of each tonemapped frame in time order: a `[3,T,W]`
/// image whose vertical axis is time. Static content yields identical
/// rows; exposure flicker shows as horizontal stripes.
pub fn temporal_profile(frames: &[Tensor], row: usize, mu: f64) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("temporal profile needs at least one frame".into()));
    }
    let (c, h, w) = (frames[0].c(), frames[0].h(), frames[0].w());
    if c != 3 {
        return Err(Error::InvalidInput("temporal profile expects RGB frames".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.c() != 3 || f.w() != w {
            return Err(Error::InvalidInput(format!(
                "frame {i} is {:?}, expected width {w}",
                f.shape()
            )));
        }
        if row >= f.h() {
            return Err(Error::InvalidInput(format!(
                "profile row {row} out of range for frame {i} of height {}",
                f.h()
            )));
        }
    }
    let _ = h;
    let t = frames.len();
    let mut out = vec![0.0; 3 * t * w];
    for (ti, f) in frames.iter().enumerate() {
        let toned = mu_tonemap(f, mu);
        for ch in 0..3 {
            for x in 0..w {
                out[(ch * t + ti) * w + x] = toned.at3(ch, row, x);
            }
        }
    }
    Ok(Tensor::from_vec(&[3, t, w], out))
}

/// Scores for one frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr_t: Psnr,
    pub ssim_t: f64,
    pub psnr_pu: Psnr,
    pub ssim_pu: f64,
}

/// All four metrics for one prediction/ground-truth pair.
pub fn frame_metrics(pred: &Tensor, gt: &Tensor, mu: f64) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        psnr_t: psnr_t(pred, gt, mu)?,
        ssim_t: ssim_t(pred, gt, mu)?,
        psnr_pu: psnr_pu(pred, gt)?,
        ssim_pu: ssim_pu(pred, gt)?,
    })
}

/// Per-frame scores plus sequence means. A PSNR mean is flagged infinite
/// when any contributing frame is (the arithmetic mean diverges); the
/// `hdr_vdp2` slot is reserved for externally computed scores and is never
/// filled by this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frame_count: usize,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_t: Psnr,
    pub mean_ssim_t: f64,
    pub mean_psnr_pu: Psnr,
    pub mean_ssim_pu: f64,
    pub hdr_vdp2: Option<f64>,
}

fn psnr_mean<I: Iterator<Item = Psnr>>(vals: I) -> Psnr {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in vals {
        match v {
            Psnr::Infinite => return Psnr::Infinite,
            Psnr::Finite(db) => {
                sum += db;
                n += 1;
            }
        }
    }
    Psnr::Finite(sum / n as f64)
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Result<MetricReport> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("metric report needs at least one frame".into()));
        }
        let n = frames.len() as f64;
        Ok(MetricReport {
            frame_count: frames.len(),
            mean_psnr_t: psnr_mean(frames.iter().map(|f| f.psnr_t)),
            mean_ssim_t: frames.iter().map(|f| f.ssim_t).sum::<f64>() / n,
            mean_psnr_pu: psnr_mean(frames.iter().map(|f| f.psnr_pu)),
            mean_ssim_pu: frames.iter().map(|f| f.ssim_pu).sum::<f64>() / n,
            hdr_vdp2: None,
            frames,
        })
    }
}
