//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records one forward pass; every op appends a node holding its
//! output tensor and a backward closure that maps the node's output gradient
//! to input-gradient contributions. [`Graph::backward`] seeds a scalar root
//! with 1 and walks the tape in reverse. Gradients accumulate in node order,
//! and all kernels route through [`crate::exec`], so a whole
//! forward/backward pass is bitwise deterministic and identical between the
//! parallel and sequential execution paths.
//!
//! This file holds the engine plus elementwise/reduction ops; convolution,
//! resampling, patch and FFT ops live in sibling modules as further
//! `impl Graph` blocks.

use crate::exec;
use crate::tensor::{Tensor, CHUNK};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &mut Gradients)>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

/// Per-node gradient accumulator produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add `g` into the slot for `v`.
    pub fn accum(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value held by `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Insert a leaf (input or parameter). Leaves have no backward function;
    /// their accumulated gradients are read out of [`Gradients`] directly.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub(crate) fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Panics if `root` is not a
    /// single-element tensor.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut grads = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        grads.grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(back) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.grads[i].take() else {
                continue;
            };
            back(&g, &mut grads);
            grads.grads[i] = Some(g);
        }
        grads
    }

    // ----- elementwise binary ops -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.clone());
                sink.accum(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.clone());
                sink.accum(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.zip(&vb, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.zip(&vb, |gi, y| gi * y));
                sink.accum(b, g.zip(&va, |gi, x| gi * x));
            })),
        )
    }

    /// Multiply a `[c,h,w]` tensor by a single-channel `[1,h,w]` map,
    /// broadcasting over channels.
    pub fn mul_bcast_hw(&mut self, x: Var, s: Var) -> Var {
        let vx = self.value(x).clone();
        let vs = self.value(s).clone();
        let (c, h, w) = (vx.c(), vx.h(), vx.w());
        assert_eq!(vs.shape(), &[1, h, w], "broadcast map must be [1,h,w]");
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        {
            let xd = vx.data();
            let sd = vs.data();
            exec::for_each_chunk_mut(&mut out, hw, |ch, plane| {
                let base = ch * hw;
                for (k, o) in plane.iter_mut().enumerate() {
                    *o = xd[base + k] * sd[k];
                }
            });
        }
        let out = Tensor::from_vec(&[c, h, w], out);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let sd = vs.data();
                let xd = vx.data();
                let mut dx = vec![0.0; c * hw];
                exec::for_each_chunk_mut(&mut dx, hw, |ch, plane| {
                    let base = ch * hw;
                    for (k, o) in plane.iter_mut().enumerate() {
                        *o = gd[base + k] * sd[k];
                    }
                });
                let mut ds = vec![0.0; hw];
                exec::for_each_chunk_mut(&mut ds, CHUNK, |ci, piece| {
                    let lo = ci * CHUNK;
                    for (k, o) in piece.iter_mut().enumerate() {
                        let p = lo + k;
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += gd[ch * hw + p] * xd[ch * hw + p];
                        }
                        *o = acc;
                    }
                });
                sink.accum(x, Tensor::from_vec(&[c, h, w], dx));
                sink.accum(s, Tensor::from_vec(&[1, h, w], ds));
            })),
        )
    }

    // ----- elementwise unary ops -----

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.accum(a, g.map(|x| k * x)))),
        )
    }

    /// ELU with α = 1: `x` for `x > 0`, `exp(x) − 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // d/dx = 1 for x > 0, exp(x) = y + 1 otherwise.
                sink.accum(a, g.zip(&saved, |gi, y| gi * if y > 0.0 { 1.0 } else { y + 1.0 }));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.zip(&saved, |gi, y| gi * y * (1.0 - y)));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.zip(&saved, |gi, y| if y > 0.0 { gi } else { 0.0 }));
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(|x| x.abs());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(
                    a,
                    g.zip(&va, |gi, x| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }),
                );
            })),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(|x| x * x);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.zip(&va, |gi, x| 2.0 * x * gi));
            })),
        )
    }

    /// Smooth absolute value `sqrt(x² + eps²)`.
    pub fn charbonnier(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a).clone();
        let out = va.map(|x| (x * x + eps * eps).sqrt());
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let dx = g.zip(&va, |gi, x| gi * x).zip(&saved, |t, y| t / y);
                sink.accum(a, dx);
            })),
        )
    }

    /// Log-domain range compression `ln(1 + mu·x) / ln(1 + mu)`.
    /// Inputs must be non-negative.
    pub fn mu_compress(&mut self, a: Var, mu: f64) -> Var {
        let va = self.value(a).clone();
        let denom = (1.0 + mu).ln();
        let out = va.map(|x| (1.0 + mu * x).ln() / denom);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, g.zip(&va, |gi, x| gi * mu / ((1.0 + mu * x) * denom)));
            })),
        )
    }

    /// Per-channel affine map with constant (non-differentiated)
    /// coefficients: `out[c] = gain[c]·x[c] + bias[c]`.
    pub fn affine_channels(&mut self, a: Var, gain: Vec<f64>, bias: Vec<f64>) -> Var {
        let va = self.value(a).clone();
        let (c, h, w) = (va.c(), va.h(), va.w());
        assert_eq!(gain.len(), c);
        assert_eq!(bias.len(), c);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        {
            let xd = va.data();
            exec::for_each_chunk_mut(&mut out, hw, |ch, plane| {
                let (gn, bs) = (gain[ch], bias[ch]);
                let base = ch * hw;
                for (k, o) in plane.iter_mut().enumerate() {
                    *o = gn * xd[base + k] + bs;
                }
            });
        }
        let out = Tensor::from_vec(&[c, h, w], out);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![0.0; c * hw];
                exec::for_each_chunk_mut(&mut dx, hw, |ch, plane| {
                    let gn = gain[ch];
                    let base = ch * hw;
                    for (k, o) in plane.iter_mut().enumerate() {
                        *o = gn * gd[base + k];
                    }
                });
                sink.accum(a, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }

    // ----- shape ops -----

    /// Concatenate `[cᵢ,h,w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let h = self.value(parts[0]).h();
        let w = self.value(parts[0]).w();
        let mut total_c = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!((v.h(), v.w()), (h, w), "concat spatial mismatch");
            total_c += v.c();
        }
        let hw = h * w;
        let mut out = vec![0.0; total_c * hw];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            out[off * hw..(off + v.c()) * hw].copy_from_slice(v.data());
            offsets.push((p, off, v.c()));
            off += v.c();
        }
        let out = Tensor::from_vec(&[total_c, h, w], out);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                for &(p, off, pc) in &offsets {
                    let slice = gd[off * hw..(off + pc) * hw].to_vec();
                    sink.accum(p, Tensor::from_vec(&[pc, h, w], slice));
                }
            })),
        )
    }

    /// Reinterpret the element buffer under a new shape (same element count).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        assert_eq!(va.len(), n, "reshape cannot change the element count");
        let old_shape = va.shape().to_vec();
        let out = Tensor::from_vec(shape, va.data().to_vec());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, Tensor::from_vec(&old_shape, g.data().to_vec()));
            })),
        )
    }

    /// Take channels `[c0, c1)` of a `[c,h,w]` tensor.
    pub fn slice_channels(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let va = self.value(a).clone();
        let (c, h, w) = (va.c(), va.h(), va.w());
        assert!(c0 < c1 && c1 <= c, "channel slice [{c0},{c1}) out of 0..{c}");
        let hw = h * w;
        let out = Tensor::from_vec(&[c1 - c0, h, w], va.data()[c0 * hw..c1 * hw].to_vec());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; c * hw];
                dx[c0 * hw..c1 * hw].copy_from_slice(g.data());
                sink.accum(a, Tensor::from_vec(&[c, h, w], dx));
            })),
        )
    }

    // ----- reductions -----

    /// Mean over all elements, returning a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let n = va.len() as f64;
        let out = Tensor::scalar(va.sum() / n);
        let shape = va.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.accum(a, Tensor::filled(&shape, g.item() / n));
            })),
        )
    }

    /// Weighted sum of scalar nodes: `Σ wᵢ·sᵢ`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum needs scalar terms");
            total += w * self.value(v).item();
        }
        let terms = terms.to_vec();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, sink| {
                for &(v, w) in &terms {
                    sink.accum(v, Tensor::scalar(w * g.item()));
                }
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check_scalar, pseudo_tensor, pseudo_tensor_in};

    #[test]
    fn add_mul_chain_gradients() {
        // f(a, b) = mean((a + b) ⊙ a); check against finite differences.
        let a0 = pseudo_tensor(&[3, 4, 4], 11);
        let b0 = pseudo_tensor(&[3, 4, 4], 12);
        let f = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let a = g.leaf(inputs[0].clone());
            let b = g.leaf(inputs[1].clone());
            let s = g.add(a, b);
            let p = g.mul(s, a);
            let m = g.mean_all(p);
            (g, vec![a, b], m)
        };
        fd_check_scalar(&[a0, b0], f, 1e-3, 1e-9);
    }

    #[test]
    fn nonlinearity_gradients() {
        // Each case keeps its inputs away from curvature spikes (charbonnier
        // near 0, the elu kink) so the central-difference reference is
        // trustworthy at the chosen step.
        let cases: Vec<(Tensor, u8)> = vec![
            (pseudo_tensor_in(&[2, 5, 5], 21, 0.05, 1.0), 0), // elu, positive branch
            (pseudo_tensor_in(&[2, 5, 5], 22, -1.0, -0.05), 0), // elu, negative branch
            (pseudo_tensor(&[2, 5, 5], 23), 1),               // sigmoid
            (pseudo_tensor(&[2, 5, 5], 24), 2),               // square
            (pseudo_tensor_in(&[2, 5, 5], 25, 0.05, 1.0), 3), // smooth abs
            (pseudo_tensor_in(&[2, 5, 5], 26, -1.0, -0.05), 3),
            (pseudo_tensor(&[2, 5, 5], 27), 4),               // log compression
            (pseudo_tensor(&[2, 5, 5], 28), 5),               // channel affine
        ];
        for (x0, which) in cases {
            let f = |inputs: &[Tensor]| {
                let mut g = Graph::new();
                let x = g.leaf(inputs[0].clone());
                let y = match which {
                    0 => g.elu(x),
                    1 => g.sigmoid(x),
                    2 => g.square(x),
                    3 => g.charbonnier(x, 1e-3),
                    4 => {
                        let s = g.sigmoid(x); // bounded away from zero
                        g.mu_compress(s, 5000.0)
                    }
                    _ => g.affine_channels(x, vec![0.7, -1.3], vec![0.2, -0.3]),
                };
                let m = g.mean_all(y);
                (g, vec![x], m)
            };
            fd_check_scalar(std::slice::from_ref(&x0), f, 1e-4, 1e-6);
        }
    }

    #[test]
    fn relu_and_abs_subgradients_are_exact_masks() {
        let x0 = Tensor::from_vec(&[6], vec![-2.0, -0.5, 0.0, 0.25, 1.5, -1e-9]);
        let mut g = Graph::new();
        let x = g.leaf(x0);
        let r = g.relu(x);
        let m = g.mean_all(r);
        let grads = g.backward(m);
        let gr = grads.get(x).unwrap();
        let expect = [0.0, 0.0, 0.0, 1.0 / 6.0, 1.0 / 6.0, 0.0];
        for (a, b) in gr.iter().zip(expect.iter()) {
            assert_eq!(a, b);
        }

        let x0 = Tensor::from_vec(&[4], vec![-2.0, 0.0, 0.5, -0.25]);
        let mut g = Graph::new();
        let x = g.leaf(x0);
        let a = g.abs(x);
        let m = g.mean_all(a);
        let grads = g.backward(m);
        let ga = grads.get(x).unwrap();
        let expect = [-0.25, 0.0, 0.25, -0.25];
        for (u, v) in ga.iter().zip(expect.iter()) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let a0 = pseudo_tensor(&[2, 3, 3], 31);
        let b0 = pseudo_tensor(&[1, 3, 3], 32);
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let cat = g.concat_channels(&[a, b]);
        assert_eq!(g.shape(cat), &[3, 3, 3]);
        let back = g.slice_channels(cat, 2, 3);
        for (x, y) in g.value(back).iter().zip(b0.iter()) {
            assert_eq!(x, y);
        }
        // Gradient of mean(slice(concat)) flows only into b.
        let m = g.mean_all(back);
        let grads = g.backward(m);
        assert!(grads.get(a).unwrap().iter().all(|&v| v == 0.0));
        let gb = grads.get(b).unwrap();
        assert!(gb.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn broadcast_mul_gradients() {
        let x0 = pseudo_tensor(&[4, 3, 5], 41);
        let s0 = pseudo_tensor(&[1, 3, 5], 42);
        let f = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let x = g.leaf(inputs[0].clone());
            let s = g.leaf(inputs[1].clone());
            let y = g.mul_bcast_hw(x, s);
            let m = g.mean_all(y);
            (g, vec![x, s], m)
        };
        fd_check_scalar(&[x0, s0], f, 1e-4, 1e-9);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(-3.0));
        let t = g.weighted_sum(&[(a, 1.0), (b, 0.5)]);
        assert!((g.value(t).item() - 0.5).abs() < 1e-15);
        let grads = g.backward(t);
        assert_eq!(grads.get(a).unwrap().item(), 1.0);
        assert_eq!(grads.get(b).unwrap().item(), 0.5);
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = mean(x ⊙ x) via two separate uses of x: grad = 2x/n.
        let x0 = pseudo_tensor(&[10], 55);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = g.mul(x, x);
        let m = g.mean_all(y);
        let grads = g.backward(m);
        let gx = grads.get(x).unwrap();
        for (gi, xi) in gx.iter().zip(x0.iter()) {
            assert!((gi - 2.0 * xi / 10.0).abs() < 1e-14);
        }
    }
}
