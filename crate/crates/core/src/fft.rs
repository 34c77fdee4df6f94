//! Real 2-D FFT ops with exact adjoints for autodiff.
//!
//! The spectral branch of the merge network maps a `[c,h,w]` feature map to
//! its half-spectrum as `2c` stacked real channels (real parts, then
//! imaginary parts, width `w/2 + 1`), convolves pointwise in that domain,
//! and returns via the inverse transform. Both directions are plain
//! real-linear maps, so their backward passes are the transposed maps:
//!
//! * forward transform adjoint: zero-pad the half-spectrum cotangent to the
//!   full grid, apply the unnormalised conjugate-exponent transform, keep
//!   the real part;
//! * inverse transform adjoint: apply the unnormalised forward transform to
//!   the (real) cotangent, scale by `1/(h·w)`, then fold the mirrored
//!   columns back onto the half grid with conjugation.
//!
//! Property tests assert `⟨A·x, y⟩ = ⟨x, Aᵀ·y⟩` for both pairs, and a dense
//! discrete-Fourier-matrix oracle pins down the forward values.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::exec;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Width of the non-redundant half-spectrum.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// Apply a 1-D transform along rows of an `[h, w]` complex grid, in place.
fn transform_rows(grid: &mut [Complex<f64>], h: usize, w: usize, fft: &dyn Fft<f64>) {
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    for y in 0..h {
        fft.process_with_scratch(&mut grid[y * w..(y + 1) * w], &mut scratch);
    }
}

/// Apply a 1-D transform along columns of an `[h, w]` complex grid, in place.
fn transform_cols(grid: &mut [Complex<f64>], h: usize, w: usize, fft: &dyn Fft<f64>) {
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        fft.process_with_scratch(&mut col, &mut scratch);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
}

/// Full (unnormalised) 2-D transform of one channel plane.
fn full_transform(grid: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let fw = plan(w, inverse);
    let fh = plan(h, inverse);
    transform_rows(grid, h, w, fw.as_ref());
    transform_cols(grid, h, w, fh.as_ref());
}

/// Forward real 2-D FFT: `[c,h,w]` → `[2c,h,wf]` with real parts in
/// channels `0..c` and imaginary parts in channels `c..2c`.
pub fn rfft2_stack(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.c(), x.h(), x.w());
    let wf = half_width(w);
    let xd = x.data();
    let planes: Vec<(Vec<f64>, Vec<f64>)> = exec::map_collect(c, |ch| {
        let mut grid: Vec<Complex<f64>> = xd[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        full_transform(&mut grid, h, w, false);
        let mut re = vec![0.0; h * wf];
        let mut im = vec![0.0; h * wf];
        for y in 0..h {
            for k in 0..wf {
                re[y * wf + k] = grid[y * w + k].re;
                im[y * wf + k] = grid[y * w + k].im;
            }
        }
        (re, im)
    });
    let mut out = vec![0.0; 2 * c * h * wf];
    for (ch, (re, im)) in planes.into_iter().enumerate() {
        out[ch * h * wf..(ch + 1) * h * wf].copy_from_slice(&re);
        out[(c + ch) * h * wf..(c + ch + 1) * h * wf].copy_from_slice(&im);
    }
    Tensor::from_vec(&[2 * c, h, wf], out)
}

/// Inverse of [`rfft2_stack`]: `[2c,h,wf]` → `[c,h,full_w]`. The input need
/// not be exactly Hermitian-consistent (e.g. after a learned pointwise map);
/// the mirrored half of the spectrum is reconstructed by conjugate symmetry
/// and the real part of the inverse transform is returned.
pub fn irfft2_stack(y: &Tensor, full_w: usize) -> Tensor {
    let (c2, h, wf) = (y.c(), y.h(), y.w());
    assert_eq!(c2 % 2, 0, "stacked spectrum needs even channel count");
    assert_eq!(wf, half_width(full_w), "half-spectrum width mismatch");
    let c = c2 / 2;
    let yd = y.data();
    let scale = 1.0 / (h * full_w) as f64;
    let planes: Vec<Vec<f64>> = exec::map_collect(c, |ch| {
        let re = &yd[ch * h * wf..(ch + 1) * h * wf];
        let im = &yd[(c + ch) * h * wf..(c + ch + 1) * h * wf];
        let mut grid = vec![Complex::new(0.0, 0.0); h * full_w];
        for u in 0..h {
            for v in 0..wf {
                grid[u * full_w + v] = Complex::new(re[u * wf + v], im[u * wf + v]);
            }
            for v in wf..full_w {
                let su = (h - u) % h;
                let sv = full_w - v;
                grid[u * full_w + v] =
                    Complex::new(re[su * wf + sv], -im[su * wf + sv]);
            }
        }
        full_transform(&mut grid, h, full_w, true);
        grid.iter().map(|z| z.re * scale).collect()
    });
    let mut out = vec![0.0; c * h * full_w];
    for (ch, plane) in planes.into_iter().enumerate() {
        out[ch * h * full_w..(ch + 1) * h * full_w].copy_from_slice(&plane);
    }
    Tensor::from_vec(&[c, h, full_w], out)
}

/// Adjoint of [`rfft2_stack`]: maps a `[2c,h,wf]` cotangent to `[c,h,w]`.
pub fn rfft2_adjoint(gy: &Tensor, full_w: usize) -> Tensor {
    let (c2, h, wf) = (gy.c(), gy.h(), gy.w());
    assert_eq!(c2 % 2, 0);
    assert_eq!(wf, half_width(full_w));
    let c = c2 / 2;
    let gd = gy.data();
    let planes: Vec<Vec<f64>> = exec::map_collect(c, |ch| {
        let re = &gd[ch * h * wf..(ch + 1) * h * wf];
        let im = &gd[(c + ch) * h * wf..(c + ch + 1) * h * wf];
        let mut grid = vec![Complex::new(0.0, 0.0); h * full_w];
        for u in 0..h {
            for v in 0..wf {
                grid[u * full_w + v] = Complex::new(re[u * wf + v], im[u * wf + v]);
            }
        }
        full_transform(&mut grid, h, full_w, true); // unnormalised conjugate exponent
        grid.iter().map(|z| z.re).collect()
    });
    let mut out = vec![0.0; c * h * full_w];
    for (ch, plane) in planes.into_iter().enumerate() {
        out[ch * h * full_w..(ch + 1) * h * full_w].copy_from_slice(&plane);
    }
    Tensor::from_vec(&[c, h, full_w], out)
}

/// Adjoint of [`irfft2_stack`]: maps a `[c,h,w]` cotangent to `[2c,h,wf]`.
pub fn irfft2_adjoint(gx: &Tensor) -> Tensor {
    let (c, h, w) = (gx.c(), gx.h(), gx.w());
    let wf = half_width(w);
    let gd = gx.data();
    let scale = 1.0 / (h * w) as f64;
    let planes: Vec<(Vec<f64>, Vec<f64>)> = exec::map_collect(c, |ch| {
        let mut grid: Vec<Complex<f64>> = gd[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        full_transform(&mut grid, h, w, false);
        let mut re = vec![0.0; h * wf];
        let mut im = vec![0.0; h * wf];
        for u in 0..h {
            for v in 0..wf {
                let mut z = grid[u * w + v] * scale;
                // Columns 1..=w−wf also fed the mirrored half; fold their
                // conjugated contribution back onto the stored half grid.
                if v >= 1 && v <= w - wf {
                    let zm = grid[((h - u) % h) * w + (w - v)] * scale;
                    z += zm.conj();
                }
                re[u * wf + v] = z.re;
                im[u * wf + v] = z.im;
            }
        }
        (re, im)
    });
    let mut out = vec![0.0; 2 * c * h * wf];
    for (ch, (re, im)) in planes.into_iter().enumerate() {
        out[ch * h * wf..(ch + 1) * h * wf].copy_from_slice(&re);
        out[(c + ch) * h * wf..(c + ch + 1) * h * wf].copy_from_slice(&im);
    }
    Tensor::from_vec(&[2 * c, h, wf], out)
}

impl Graph {
    /// Differentiable forward real FFT (see [`rfft2_stack`]).
    pub fn rfft2(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let w = vx.w();
        let out = rfft2_stack(&vx);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(x, rfft2_adjoint(g, w));
            })),
        )
    }

    /// Differentiable inverse real FFT (see [`irfft2_stack`]).
    pub fn irfft2(&mut self, y: Var, full_w: usize) -> Var {
        let vy = self.value(y).clone();
        let out = irfft2_stack(&vy, full_w);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(y, irfft2_adjoint(g));
            })),
        )
    }
}
