//! Radiometric domain types and conversions: LDR frames with exposure tags,
//! linearisation, exposure matching, luminance extraction, μ-law range
//! compression, and the perceptually uniform encoding used by the metrics.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Display gamma assumed for LDR frames.
pub const DEFAULT_GAMMA: f64 = 2.2;

/// μ-law compression strength used by losses and tonemapped metrics.
pub const DEFAULT_MU: f64 = 5000.0;

/// Peak display luminance (cd/m²) that HDR frames are mapped to before
/// perceptually uniform encoding.
pub const PU_PEAK_LUMINANCE: f64 = 4000.0;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// μ-law tonemap parameters shared by losses and metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapParams {
    pub mu: f64,
}

impl Default for TonemapParams {
    fn default() -> Self {
        TonemapParams { mu: DEFAULT_MU }
    }
}

/// An 8-bit-origin LDR frame in `[0,1]` with its exposure time.
#[derive(Clone, Debug)]
pub struct ExposureFrame {
    /// `[3,h,w]` gamma-encoded values in `[0,1]`.
    pub pixels: Tensor,
    /// Relative exposure time `e > 0`.
    pub exposure: f64,
}

impl ExposureFrame {
    pub fn new(pixels: Tensor, exposure: f64) -> Result<Self> {
        let frame = ExposureFrame { pixels, exposure };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.shape().len() != 3 || self.pixels.c() != 3 {
            return Err(Error::InvalidInput(format!(
                "exposure frame must be [3,h,w], got {:?}",
                self.pixels.shape()
            )));
        }
        if !(self.exposure > 0.0) || !self.exposure.is_finite() {
            return Err(Error::InvalidInput(format!(
                "exposure time must be positive and finite, got {}",
                self.exposure
            )));
        }
        for (i, v) in self.pixels.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite pixel at flat index {i}"
                )));
            }
            if *v < 0.0 || *v > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "LDR pixel {v} outside [0,1] at flat index {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Estimated linear scene radiance for one frame.
#[derive(Clone, Debug)]
pub struct LinearFrame {
    /// `[3,h,w]` linear values.
    pub pixels: Tensor,
}

/// Invert the display gamma and divide by exposure time:
/// `X = L^γ / e`. This is the per-frame radiance estimate the network sees
/// alongside the raw LDR values.
pub fn ldr_to_linear(frame: &ExposureFrame, gamma: f64) -> Result<LinearFrame> {
    frame.validate()?;
    let e = frame.exposure;
    Ok(LinearFrame {
        pixels: frame.pixels.map(|l| l.powf(gamma) / e),
    })
}

/// Re-render an LDR frame as if captured at a different exposure:
/// `clip(L · (e_to/e_from)^(1/γ), 0, 1)`. Used to bring the reference to a
/// neighbour's brightness before luminance matching.
pub fn adjust_exposure(ldr: &Tensor, e_from: f64, e_to: f64, gamma: f64) -> Tensor {
    assert!(e_from > 0.0 && e_to > 0.0, "exposures must be positive");
    let k = (e_to / e_from).powf(1.0 / gamma);
    ldr.map(|l| (l * k).clamp(0.0, 1.0))
}

/// BT.601 luma of an RGB map: `[3,h,w]` → `[1,h,w]`.
pub fn rgb_to_luma(rgb: &Tensor) -> Tensor {
    assert_eq!(rgb.c(), 3, "luma needs an RGB input");
    let (h, w) = (rgb.h(), rgb.w());
    let hw = h * w;
    let d = rgb.data();
    let mut out = vec![0.0; hw];
    exec::for_each_chunk_mut(&mut out, crate::tensor::CHUNK, |ci, chunk| {
        let lo = ci * crate::tensor::CHUNK;
        for (k, o) in chunk.iter_mut().enumerate() {
            let p = lo + k;
            *o = LUMA_WEIGHTS[0] * d[p] + LUMA_WEIGHTS[1] * d[hw + p] + LUMA_WEIGHTS[2] * d[2 * hw + p];
        }
    });
    Tensor::from_vec(&[1, h, w], out)
}

/// The six-channel network input for one frame: the LDR values concatenated
/// with their linearised counterpart along channels.
pub fn six_channel(frame: &ExposureFrame, gamma: f64) -> Result<Tensor> {
    let lin = ldr_to_linear(frame, gamma)?;
    let (h, w) = (frame.pixels.h(), frame.pixels.w());
    let mut data = Vec::with_capacity(6 * h * w);
    data.extend_from_slice(frame.pixels.data());
    data.extend_from_slice(lin.pixels.data());
    Ok(Tensor::from_vec(&[6, h, w], data))
}

/// μ-law range compression `T(x) = ln(1 + μx) / ln(1 + μ)` for `x ∈ [0,1]`.
pub fn mu_tonemap_scalar(x: f64, mu: f64) -> f64 {
    (1.0 + mu * x).ln() / (1.0 + mu).ln()
}

/// Inverse of [`mu_tonemap_scalar`].
pub fn mu_tonemap_inv_scalar(y: f64, mu: f64) -> f64 {
    ((1.0 + mu).powf(y) - 1.0) / mu
}

/// Elementwise μ-law compression of a tensor.
pub fn mu_tonemap(x: &Tensor, mu: f64) -> Tensor {
    x.map(|v| mu_tonemap_scalar(v, mu))
}

/// Perceptually uniform encoding fit (banding + glare variant): maps
/// absolute luminance in cd/m² (clamped to [0.005, 10000]) to a code value
/// scaled so ~100 cd/m² sits near 256.
const PU_FIT: [f64; 7] = [
    0.353487901,
    0.3734658629,
    8.277049286e-05,
    0.9062562627,
    0.09150303166,
    0.9099517204,
    596.3148142,
];

/// PU code value of one absolute luminance (cd/m²).
pub fn pu_scalar(y_cd_m2: f64) -> f64 {
    let y = y_cd_m2.clamp(0.005, 10000.0);
    let yp = y.powf(PU_FIT[3]);
    PU_FIT[6] * (((PU_FIT[0] + PU_FIT[1] * yp) / (1.0 + PU_FIT[2] * yp)).powf(PU_FIT[4]) - PU_FIT[5])
}

/// PU code value assigned to the display peak; the effective peak signal
/// for PU-domain PSNR/SSIM.
pub fn pu_peak_code(peak_luminance: f64) -> f64 {
    pu_scalar(peak_luminance)
}

/// Encode a relative HDR frame for perceptual metrics: scale so the frame
/// peak maps to `peak_luminance` cd/m², then apply the PU curve per pixel.
/// All-zero (or non-positive-peak) frames are degenerate.
pub fn pu_encode(hdr: &Tensor, peak_luminance: f64) -> Result<Tensor> {
    let peak = hdr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !(peak > 0.0) {
        return Err(Error::DegenerateInput(
            "PU encoding needs a frame with a positive peak".into(),
        ));
    }
    let scale = peak_luminance / peak;
    Ok(hdr.map(|v| pu_scalar(v.max(0.0) * scale)))
}
