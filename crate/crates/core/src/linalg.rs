//! GEMM wrappers with deterministic parallel splits.
//!
//! `matrixmultiply::dgemm` does the per-block arithmetic; this module owns
//! how problems are cut into blocks. Splits are fixed functions of the
//! problem shape and both execution paths run the identical block sequence,
//! so results are bitwise reproducible (see [`crate::exec`]).

use matrixmultiply::dgemm;

use crate::exec;

/// Column-chunk width for `matmul_nn`. Fixed so block boundaries (and hence
/// summation order) never vary between runs or machines.
const NN_COL_CHUNK: usize = 4096;
/// Row-chunk height for `matmul_nt`.
const NT_ROW_CHUNK: usize = 64;

/// `c[m,n] = a[m,k] · b[k,n]`, all row-major.
///
/// Parallelised over fixed column chunks of `c`; each chunk is computed into
/// a task-local buffer by one `dgemm` call and copied back in order.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let chunks = exec::chunk_count(n, NN_COL_CHUNK);
    let bufs: Vec<(usize, usize, Vec<f64>)> = exec::map_collect(chunks, |ci| {
        let (j0, j1) = exec::chunk_bounds(n, NN_COL_CHUNK, ci);
        let nc = j1 - j0;
        let mut buf = vec![0.0f64; m * nc];
        unsafe {
            dgemm(
                m,
                k,
                nc,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr().add(j0),
                n as isize,
                1,
                0.0,
                buf.as_mut_ptr(),
                nc as isize,
                1,
            );
        }
        (j0, nc, buf)
    });
    for (j0, nc, buf) in bufs {
        for i in 0..m {
            c[i * n + j0..i * n + j0 + nc].copy_from_slice(&buf[i * nc..(i + 1) * nc]);
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`, all row-major.
///
/// Parallelised over fixed row chunks of `c`; rows of `c` are contiguous so
/// chunks write disjoint slices directly.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    matmul_nt_into(&mut c, a, b, m, k, n);
    c
}

/// As [`matmul_nt`] but writing into a caller-provided buffer of length
/// `m * n` (overwritten).
pub fn matmul_nt_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    exec::for_each_chunk_mut(c, NT_ROW_CHUNK * n, |ci, rows| {
        let i0 = ci * NT_ROW_CHUNK;
        let mc = rows.len() / n;
        unsafe {
            dgemm(
                mc,
                k,
                n,
                1.0,
                a_ptr.get().add(i0 * k),
                k as isize,
                1,
                b_ptr.get(),
                1,
                k as isize,
                0.0,
                rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

struct SendConstPtr(*const f64);
unsafe impl Send for SendConstPtr {}
unsafe impl Sync for SendConstPtr {}

impl SendConstPtr {
    // Accessor rather than direct field use so closures capture the whole
    // (Sync) wrapper, not the bare pointer field.
    fn get(&self) -> *const f64 {
        self.0
    }
}
