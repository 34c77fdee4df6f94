//! 2-D convolution (cross-correlation) kernels and their autodiff op.
//!
//! Forward runs im2col over fixed column slabs feeding `dgemm`; the weight
//! gradient re-materialises each slab and folds per-slab partials in slab
//! order; the input gradient is computed as a stride-1 convolution with
//! spatially flipped, channel-transposed weights (with an explicit gather
//! for strided convolutions, where the transposed geometry is asymmetric).
//! All loops follow the fixed-chunk rules in [`crate::exec`], so forward and
//! backward are bitwise deterministic.

use crate::exec;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a convolution. Weights are `[out_ch, in_ch, ksize, ksize]`,
/// bias `[out_ch]`, zero padding on all sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, pad: usize) -> Self {
        assert!(ksize == 1 || ksize == 3, "unsupported kernel size {ksize}");
        assert!(stride == 1 || stride == 2, "unsupported stride {stride}");
        ConvSpec { in_ch, out_ch, ksize, stride, pad }
    }

    /// Standard 3×3, stride-1, pad-1 (shape-preserving) convolution.
    pub fn same3(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec::new(in_ch, out_ch, 3, 1, 1)
    }

    /// 3×3, stride-2, pad-1 downsampling convolution.
    pub fn down3(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec::new(in_ch, out_ch, 3, 2, 1)
    }

    /// 1×1 pointwise convolution.
    pub fn point(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec::new(in_ch, out_ch, 1, 1, 0)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.ksize) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.ksize) / self.stride + 1;
        (oh, ow)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.ksize, self.ksize]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.ksize * self.ksize
    }
}

/// Columns per im2col slab. Fixed so slab boundaries never depend on the
/// machine (see [`crate::exec`]).
const SLAB: usize = 2048;

fn fill_cols(
    cols: &mut [f64],
    x: &[f64],
    h: usize,
    w: usize,
    ow: usize,
    spec: &ConvSpec,
    j0: usize,
    nc: usize,
) {
    let k = spec.ksize;
    for kk in 0..spec.patch_len() {
        let ci = kk / (k * k);
        let ky = (kk / k) % k;
        let kx = kk % k;
        let row = &mut cols[kk * nc..(kk + 1) * nc];
        let mut oy = (j0) / ow;
        let mut ox = (j0) % ow;
        for slot in row.iter_mut() {
            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
            *slot = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                x[(ci * h + iy as usize) * w + ix as usize]
            } else {
                0.0
            };
            ox += 1;
            if ox == ow {
                ox = 0;
                oy += 1;
            }
        }
    }
}

/// Forward convolution. `x` is `[in_ch, h, w]`; returns `[out_ch, oh, ow]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    assert_eq!(x.c(), spec.in_ch, "conv input channel mismatch");
    assert_eq!(
        weight.shape(),
        &spec.weight_shape(),
        "conv weight shape mismatch"
    );
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[spec.out_ch], "conv bias shape mismatch");
    }
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = spec.out_hw(h, w);
    let n = oh * ow;
    let kp = spec.patch_len();
    let xd = x.data();
    let wd = weight.data();

    let slabs = exec::chunk_count(n, SLAB);
    let bufs: Vec<(usize, usize, Vec<f64>)> = exec::map_collect(slabs, |si| {
        let (j0, j1) = exec::chunk_bounds(n, SLAB, si);
        let nc = j1 - j0;
        let mut cols = vec![0.0f64; kp * nc];
        fill_cols(&mut cols, xd, h, w, ow, spec, j0, nc);
        let mut out = vec![0.0f64; spec.out_ch * nc];
        unsafe {
            matrixmultiply::dgemm(
                spec.out_ch,
                kp,
                nc,
                1.0,
                wd.as_ptr(),
                kp as isize,
                1,
                cols.as_ptr(),
                nc as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                nc as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bd = b.data();
            for oc in 0..spec.out_ch {
                let bv = bd[oc];
                for v in &mut out[oc * nc..(oc + 1) * nc] {
                    *v += bv;
                }
            }
        }
        (j0, nc, out)
    });

    let mut out = vec![0.0f64; spec.out_ch * n];
    for (j0, nc, buf) in bufs {
        for oc in 0..spec.out_ch {
            out[oc * n + j0..oc * n + j0 + nc].copy_from_slice(&buf[oc * nc..(oc + 1) * nc]);
        }
    }
    Tensor::from_vec(&[spec.out_ch, oh, ow], out)
}

/// Weight gradient: `dW = dOut · colsᵀ`, accumulated over fixed slabs.
pub fn conv2d_grad_weight(x: &Tensor, dout: &Tensor, spec: &ConvSpec) -> Tensor {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = spec.out_hw(h, w);
    let n = oh * ow;
    assert_eq!(dout.shape(), &[spec.out_ch, oh, ow]);
    let kp = spec.patch_len();
    let xd = x.data();
    let dd = dout.data();

    let slabs = exec::chunk_count(n, SLAB);
    let partials: Vec<Vec<f64>> = exec::map_collect(slabs, |si| {
        let (j0, j1) = exec::chunk_bounds(n, SLAB, si);
        let nc = j1 - j0;
        let mut cols = vec![0.0f64; kp * nc];
        fill_cols(&mut cols, xd, h, w, ow, spec, j0, nc);
        let mut dw = vec![0.0f64; spec.out_ch * kp];
        unsafe {
            matrixmultiply::dgemm(
                spec.out_ch,
                nc,
                kp,
                1.0,
                dd.as_ptr().add(j0),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                nc as isize,
                0.0,
                dw.as_mut_ptr(),
                kp as isize,
                1,
            );
        }
        dw
    });
    let mut dw = vec![0.0f64; spec.out_ch * kp];
    for p in partials {
        for (a, b) in dw.iter_mut().zip(&p) {
            *a += b;
        }
    }
    Tensor::from_vec(&spec.weight_shape(), dw)
}

/// Bias gradient: per-channel sum of `dOut`.
pub fn conv2d_grad_bias(dout: &Tensor) -> Tensor {
    let c = dout.c();
    let hw = dout.h() * dout.w();
    let dd = dout.data();
    let mut db = vec![0.0f64; c];
    exec::for_each_chunk_mut(&mut db, 1, |oc, slot| {
        let mut s = 0.0;
        for v in &dd[oc * hw..(oc + 1) * hw] {
            s += *v;
        }
        slot[0] = s;
    });
    Tensor::from_vec(&[c], db)
}

/// Input gradient.
pub fn conv2d_grad_input(
    weight: &Tensor,
    dout: &Tensor,
    in_h: usize,
    in_w: usize,
    spec: &ConvSpec,
) -> Tensor {
    let k = spec.ksize;
    if spec.stride == 1 {
        // Transposed convolution of a stride-1 conv is itself a stride-1
        // conv with flipped kernels, swapped channel axes and pad k−1−pad.
        let wd = weight.data();
        let kp = spec.patch_len();
        let mut rot = vec![0.0f64; spec.in_ch * spec.out_ch * k * k];
        for ci in 0..spec.in_ch {
            for co in 0..spec.out_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        rot[((ci * spec.out_ch + co) * k + ky) * k + kx] =
                            wd[co * kp + (ci * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        let rot = Tensor::from_vec(&[spec.in_ch, spec.out_ch, k, k], rot);
        let back = ConvSpec::new(spec.out_ch, spec.in_ch, k, 1, k - 1 - spec.pad);
        let dx = conv2d(dout, &rot, None, &back);
        assert_eq!(dx.shape(), &[spec.in_ch, in_h, in_w]);
        return dx;
    }

    // Strided case: direct gather. For every input pixel, enumerate the
    // (output pixel, kernel tap) pairs that read it and sum their
    // contributions in fixed order.
    let (oh, ow) = spec.out_hw(in_h, in_w);
    let n = oh * ow;
    assert_eq!(dout.shape(), &[spec.out_ch, oh, ow]);
    let taps = |in_pos: usize, out_len: usize| -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for kt in 0..k {
            let num = in_pos as isize + spec.pad as isize - kt as isize;
            if num >= 0 && num % spec.stride as isize == 0 {
                let o = (num / spec.stride as isize) as usize;
                if o < out_len {
                    v.push((o, kt));
                }
            }
        }
        v
    };
    let ytaps: Vec<Vec<(usize, usize)>> = (0..in_h).map(|iy| taps(iy, oh)).collect();
    let xtaps: Vec<Vec<(usize, usize)>> = (0..in_w).map(|ix| taps(ix, ow)).collect();
    let wd = weight.data();
    let dd = dout.data();
    let kp = spec.patch_len();
    let mut dx = vec![0.0f64; spec.in_ch * in_h * in_w];
    exec::for_each_chunk_mut(&mut dx, in_h * in_w, |ci, plane| {
        for iy in 0..in_h {
            for ix in 0..in_w {
                let mut acc = 0.0;
                for &(oy, ky) in &ytaps[iy] {
                    for &(ox, kx) in &xtaps[ix] {
                        let wk = (ci * k + ky) * k + kx;
                        let o = oy * ow + ox;
                        for co in 0..spec.out_ch {
                            acc += wd[co * kp + wk] * dd[co * n + o];
                        }
                    }
                }
                plane[iy * in_w + ix] = acc;
            }
        }
    });
    Tensor::from_vec(&[spec.in_ch, in_h, in_w], dx)
}

impl Graph {
    /// Differentiable convolution node. `weight` and optional `bias` are
    /// ordinary graph nodes (typically parameter leaves).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = bias.map(|b| self.value(b).clone());
        let (in_h, in_w) = (vx.h(), vx.w());
        let out = conv2d(&vx, &vw, vb.as_ref(), &spec);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(x, conv2d_grad_input(&vw, g, in_h, in_w, &spec));
                sink.accum(weight, conv2d_grad_weight(&vx, g, &spec));
                if let Some(b) = bias {
                    sink.accum(b, conv2d_grad_bias(g));
                }
            })),
        )
    }
}
