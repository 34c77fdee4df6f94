//! Spatial resampling: nearest-neighbour ×2 upsampling and 2×2 max-pooling
//! as autodiff ops, plus a plain ×4 area downsample used when deriving
//! quarter-resolution luminance inputs (which sit upstream of every
//! trainable parameter and therefore never need gradients).

use crate::exec;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Nearest-neighbour ×2 upsample of a `[c,h,w]` map.
    pub fn upsample2_nearest(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let (c, h, w) = (vx.c(), vx.h(), vx.w());
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        {
            let xd = vx.data();
            exec::for_each_chunk_mut(&mut out, oh * ow, |ch, plane| {
                let base = ch * h * w;
                for oy in 0..oh {
                    let iy = oy / 2;
                    for ox in 0..ow {
                        plane[oy * ow + ox] = xd[base + iy * w + ox / 2];
                    }
                }
            });
        }
        let out = Tensor::from_vec(&[c, oh, ow], out);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                exec::for_each_chunk_mut(&mut dx, h * w, |ch, plane| {
                    let base = ch * oh * ow;
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut s = 0.0;
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    s += gd[base + (2 * iy + dy) * ow + 2 * ix + dxx];
                                }
                            }
                            plane[iy * w + ix] = s;
                        }
                    }
                });
                sink.accum(x, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }

    /// 2×2 max-pool with stride 2. Requires even height and width. Ties take
    /// the first element in scan order, so the backward scatter is unique.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let (c, h, w) = (vx.c(), vx.h(), vx.w());
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut arg = vec![0u32; c * oh * ow];
        {
            let xd = vx.data();
            let arg_ptr = SendPtr(arg.as_mut_ptr());
            exec::for_each_chunk_mut(&mut out, oh * ow, |ch, plane| {
                let base = ch * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let at = (2 * oy + dy) * w + 2 * ox + dx;
                                let v = xd[base + at];
                                if v > best {
                                    best = v;
                                    best_at = at;
                                }
                            }
                        }
                        plane[oy * ow + ox] = best;
                        // Each output cell owns a distinct 2×2 window, so
                        // these writes never collide across chunks.
                        unsafe {
                            *arg_ptr.get().add(ch * oh * ow + oy * ow + ox) = best_at as u32;
                        }
                    }
                }
            });
        }
        let out = Tensor::from_vec(&[c, oh, ow], out);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                exec::for_each_chunk_mut(&mut dx, h * w, |ch, plane| {
                    let obase = ch * oh * ow;
                    for o in 0..oh * ow {
                        plane[arg[obase + o] as usize] += gd[obase + o];
                    }
                });
                sink.accum(x, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    // Accessor rather than direct field use so closures capture the whole
    // (Sync) wrapper, not the bare pointer field.
    fn get(&self) -> *mut T {
        self.0
    }
}

/// ×4 area downsample (mean over non-overlapping 4×4 cells) of a `[c,h,w]`
/// tensor. Dimensions must be multiples of 4; callers pad frames first.
pub fn downsample4_area(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.c(), x.h(), x.w());
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "area downsample needs dims divisible by 4, got {h}x{w}"
    );
    let (oh, ow) = (h / 4, w / 4);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    exec::for_each_chunk_mut(&mut out, oh * ow, |ch, plane| {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += xd[base + (4 * oy + dy) * w + 4 * ox + dx];
                    }
                }
                plane[oy * ow + ox] = s / 16.0;
            }
        }
    });
    Tensor::from_vec(&[c, oh, ow], out)
}
