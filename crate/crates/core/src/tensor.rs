//! A minimal dense tensor: a shape plus shared `f64` storage.
//!
//! Everything in this crate runs in `f64`. That keeps finite-difference
//! gradient checks and the tight numeric tolerances in the test suite
//! meaningful, and on CPU the throughput difference against `f32` is far
//! smaller than on accelerators. Storage is behind an `Arc` so autodiff
//! nodes can retain inputs for their backward pass without copying.

use std::sync::Arc;

use crate::exec;

/// Dense row-major tensor. Rank is dynamic; the crate mostly uses
/// `[c, h, w]` feature maps, `[n, d]` matrices and scalars `[]`.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            len,
            "shape {shape:?} needs {len} elements, got {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Channel count of a `[c, h, w]` tensor.
    pub fn c(&self) -> usize {
        assert_eq!(self.shape.len(), 3, "expected [c,h,w], got {:?}", self.shape);
        self.shape[0]
    }

    pub fn h(&self) -> usize {
        assert_eq!(self.shape.len(), 3, "expected [c,h,w], got {:?}", self.shape);
        self.shape[1]
    }

    pub fn w(&self) -> usize {
        assert_eq!(self.shape.len(), 3, "expected [c,h,w], got {:?}", self.shape);
        self.shape[2]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Elementwise map into a new tensor (parallel over fixed chunks).
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        exec::for_each_chunk_mut(&mut out, CHUNK, |ci, c| {
            let lo = ci * CHUNK;
            for (k, o) in c.iter_mut().enumerate() {
                *o = f(src[lo + k]);
            }
        });
        Tensor::from_vec(&self.shape, out)
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; a.len()];
        exec::for_each_chunk_mut(&mut out, CHUNK, |ci, c| {
            let lo = ci * CHUNK;
            for (k, o) in c.iter_mut().enumerate() {
                *o = f(a[lo + k], b[lo + k]);
            }
        });
        Tensor::from_vec(&self.shape, out)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let b = other.data.clone();
        let dst = self.data_mut();
        exec::for_each_chunk_mut(dst, CHUNK, |ci, c| {
            let lo = ci * CHUNK;
            for (k, o) in c.iter_mut().enumerate() {
                *o += b[lo + k];
            }
        });
    }

    /// Deterministic sum of all elements: pairwise within fixed chunks and
    /// pairwise across the chunk partials. The fixed tree makes the result
    /// identical on the parallel and sequential paths, bounds rounding error
    /// by O(log n) instead of O(n), and keeps the mean of a constant field
    /// exact whenever the tree-node multiples of the constant are
    /// representable (e.g. constant fields over power-of-two image dims).
    pub fn sum(&self) -> f64 {
        let d = self.data();
        let n = d.len();
        let partials = exec::map_collect(exec::chunk_count(n, CHUNK), |ci| {
            let (lo, hi) = exec::chunk_bounds(n, CHUNK, ci);
            pairwise_sum(&d[lo..hi])
        });
        pairwise_sum(&partials)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Fixed chunk length for elementwise kernels. Constant across machines so
/// chunk boundaries — and therefore floating-point summation order — never
/// depend on the executing hardware.
pub const CHUNK: usize = 4096;

/// Balanced pairwise summation down to singleton leaves. The split points
/// depend only on the slice length, so the addition tree — and the rounded
/// result — is a pure function of the input values.
fn pairwise_sum(d: &[f64]) -> f64 {
    match d.len() {
        0 => 0.0,
        1 => d[0],
        2 => d[0] + d[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&d[..mid]) + pairwise_sum(&d[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors_and_indexing() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|i| i as f64).collect());
        assert_eq!((t.c(), t.h(), t.w()), (2, 3, 4));
        assert_eq!(t.at3(1, 2, 3), 23.0);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(1, 0, 1), 13.0);
    }

    #[test]
    fn map_zip_add_assign() {
        let a = Tensor::from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = a.map(|x| 2.0 * x);
        assert_eq!(b.data(), &[2.0, 4.0, 6.0, 8.0, 10.0]);
        let c = a.zip(&b, |x, y| y - x);
        assert_eq!(c.data(), a.data());
        let mut d = a.clone();
        d.add_assign(&c);
        assert_eq!(d.data(), b.data());
    }

    #[test]
    fn sum_uses_a_fixed_pairwise_tree_over_fixed_chunks() {
        // Mirror the chunked pairwise tree independently and demand bitwise
        // agreement, so any change to the summation order is caught.
        fn tree(d: &[f64]) -> f64 {
            match d.len() {
                0 => 0.0,
                1 => d[0],
                2 => d[0] + d[1],
                n => tree(&d[..n / 2]) + tree(&d[n / 2..]),
            }
        }
        let n = 3 * CHUNK + 17;
        let t = Tensor::from_vec(&[n], (0..n).map(|i| (i as f64).sqrt()).collect());
        let partials: Vec<f64> = t.data().chunks(CHUNK).map(tree).collect();
        assert_eq!(t.sum().to_bits(), tree(&partials).to_bits());
    }

    #[test]
    fn mean_of_a_constant_field_is_exact_where_the_tree_multiples_fit() {
        // Power-of-two lengths: every tree node is a power-of-two multiple
        // of the constant, i.e. an exact scaling — exact for any constant.
        for &c in &[1e-3f64, 0.7, 1.0 / 3.0] {
            for &n in &[64usize, 4096, 2 * CHUNK] {
                let t = Tensor::filled(&[n], c);
                assert_eq!((t.sum() / n as f64).to_bits(), c.to_bits(), "mean of {c} over {n}");
            }
        }
        // 3·2^k lengths (three-channel power-of-two images) additionally
        // need 3·c representable; fl(1e-3) has two trailing zero mantissa
        // bits, so it is. This is the temporal-loss ε floor case.
        for &n in &[48usize, 192, 3 * 256 * 256] {
            let t = Tensor::filled(&[n], 1e-3);
            assert_eq!((t.sum() / n as f64).to_bits(), 1e-3f64.to_bits(), "mean of 1e-3 over {n}");
        }
    }

    #[test]
    fn clone_shares_storage_until_mutation() {
        let a = Tensor::zeros(&[16]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
