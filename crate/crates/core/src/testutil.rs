//! Support code for tests and benchmarks: deterministic pseudo-random
//! tensors and a finite-difference gradient checker.
//!
//! The checker is intentionally part of the library rather than test-only
//! code: the integration suite uses it to validate gradients of every
//! trainable building block, and keeping a single implementation avoids
//! subtle drift between what unit tests and end-to-end tests accept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Deterministic tensor with values uniform in (-1, 1).
pub fn pseudo_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data)
}

/// Deterministic tensor with values uniform in `(lo, hi)`.
pub fn pseudo_tensor_in(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect();
    Tensor::from_vec(shape, data)
}

/// Maximum relative mismatch between analytic and central-difference
/// gradients, probing `max_coords` coordinates per input.
///
/// `build` must construct a fresh graph from the given input tensors and
/// return the graph, the leaf [`Var`]s corresponding to each input (in
/// order), and the scalar root.
pub fn fd_max_rel_err(
    inputs: &[Tensor],
    build: impl Fn(&[Tensor]) -> (Graph, Vec<Var>, Var),
    step: f64,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let (graph, vars, root) = build(inputs);
    assert_eq!(vars.len(), inputs.len(), "one Var per input expected");
    let grads = graph.backward(root);
    let eval = |perturbed: &[Tensor]| -> f64 {
        let (g2, _, r2) = build(perturbed);
        g2.value(r2).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]);
        let n = input.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for &ci in &coords {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[idx].data_mut()[ci] += step;
            minus[idx].data_mut()[ci] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let an = analytic.map(|t| t.data()[ci]).unwrap_or(0.0);
            let denom = fd.abs().max(an.abs());
            if denom < 1e-10 {
                continue; // both effectively zero
            }
            let rel = (fd - an).abs() / denom.max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Assert analytic gradients match central differences to `rel_tol`,
/// probing every coordinate of inputs up to 64 elements (random 64 beyond).
pub fn fd_check_scalar(
    inputs: &[Tensor],
    build: impl Fn(&[Tensor]) -> (Graph, Vec<Var>, Var),
    step: f64,
    rel_tol: f64,
) {
    let worst = fd_max_rel_err(inputs, build, step, 64, 7);
    assert!(
        worst <= rel_tol.max(1e-12),
        "finite-difference mismatch: max relative error {worst:.3e} > {rel_tol:.1e}"
    );
}

/// Brute-force O(n²) cosine top-1 reference: nested loops, explicit
/// per-row normalisation with the given floor, lowest-index tie-breaking.
/// Deliberately shares no code with the tiled matcher it checks.
pub fn cosine_top1_oracle(q: &Tensor, k: &Tensor, eps: f64) -> (Vec<usize>, Vec<f64>) {
    assert_eq!(q.shape()[1], k.shape()[1]);
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let mut indices = Vec::with_capacity(nq);
    let mut scores = Vec::with_capacity(nq);
    for i in 0..nq {
        let qi = &q.data()[i * d..(i + 1) * d];
        let qn = norm(qi);
        let mut best_j = 0usize;
        let mut best = f64::NEG_INFINITY;
        for j in 0..nk {
            let kj = &k.data()[j * d..(j + 1) * d];
            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (qn * norm(kj));
            if s > best {
                best = s;
                best_j = j;
            }
        }
        indices.push(best_j);
        scores.push(best);
    }
    (indices, scores)
}

/// Assert two slices match elementwise within `tol`.
pub fn assert_slices_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{what}: element {i} differs: {x} vs {y} (tol {tol:.1e})"
        );
    }
}

/// Assert two slices are bitwise identical.
pub fn assert_slices_bitwise(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(
            x.to_bits(),
            y.to_bits(),
            "{what}: element {i} differs bitwise: {x} vs {y}"
        );
    }
}

/// Re-colour pixels of an RGB map while keeping the value of `luma_of`
/// bit-identical per pixel. `luma_of` must replicate, operation for
/// operation, the luminance computation under test (including any exposure
/// adjustment applied before the weighting). Pixels where no bit-exact
/// solution is found within a few ulps keep their original colour. Returns
/// the perturbed map and the number of pixels actually changed.
pub fn luma_preserving_chroma_jitter(
    rgb: &Tensor,
    luma_of: impl Fn(f64, f64, f64) -> f64,
    seed: u64,
) -> (Tensor, usize) {
    assert_eq!(rgb.shape()[0], 3, "chroma jitter needs an RGB input");
    let hw: usize = rgb.shape()[1..].iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rgb.data().to_vec();
    let mut changed = 0usize;
    for p in 0..hw {
        let target = luma_of(out[p], out[hw + p], out[2 * hw + p]);
        'tries: for _ in 0..24 {
            let nr: f64 = rng.gen_range(0.0..1.0);
            let ng: f64 = rng.gen_range(0.0..1.0);
            // The chains under test are monotone non-decreasing in the blue
            // channel, so bracket and bisect, then walk ulps to exact bits.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            if luma_of(nr, ng, lo) > target || luma_of(nr, ng, hi) < target {
                continue 'tries;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if luma_of(nr, ng, mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let center = 0.5 * (lo + hi);
            let bits = center.to_bits();
            for k in 0..=128u64 {
                for cand_bits in [bits.saturating_add(k), bits.saturating_sub(k)] {
                    let cand = f64::from_bits(cand_bits);
                    if !(0.0..=1.0).contains(&cand) {
                        continue;
                    }
                    if luma_of(nr, ng, cand).to_bits() == target.to_bits() {
                        out[p] = nr;
                        out[hw + p] = ng;
                        out[2 * hw + p] = cand;
                        changed += 1;
                        break 'tries;
                    }
                }
            }
        }
    }
    (Tensor::from_vec(rgb.shape(), out), changed)
}

/// A smooth synthetic HDR "video" frame: phase-shifted colour sinusoids
/// whose content drifts with `t`, valued in [0.05, 0.95] so no exposure in
/// a small ladder saturates it completely.
pub fn moving_scene(h: usize, w: usize, t: usize) -> Tensor {
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

/// Write a complete synthetic alternating-exposure dataset (LDR PNG frames,
/// HDR EXR ground truth, JSON manifest) under `dir` and return the manifest
/// path. The sequence id is `seq`; frame `t` lives at `seq/f{t:02}.png` with
/// ground truth `seq/g{t:02}.exr`.
pub fn write_synthetic_dataset(
    dir: &std::path::Path,
    pattern_size: usize,
    stops: f64,
    gamma: f64,
    frame_count: usize,
    h: usize,
    w: usize,
) -> std::path::PathBuf {
    use crate::datapipe::{exposure_values, synthesize_exposures, Manifest, NoiseCfg, SequenceRecord};

    let pattern = exposure_values(pattern_size, stops).unwrap();
    let seq_dir = dir.join("seq");
    std::fs::create_dir_all(&seq_dir).unwrap();
    let mut frame_paths = Vec::new();
    let mut gt_paths = Vec::new();
    for t in 0..frame_count {
        let clean = moving_scene(h, w, t);
        let e = pattern[t % pattern.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(40 + t as u64);
        let ldr = synthesize_exposures(&clean, e, gamma, &NoiseCfg::default(), &mut rng).unwrap();
        crate::imageio::write_ldr_png(&ldr.pixels, &seq_dir.join(format!("f{t:02}.png"))).unwrap();
        crate::imageio::write_hdr_frame(&clean, &seq_dir.join(format!("g{t:02}.exr"))).unwrap();
        frame_paths.push(std::path::PathBuf::from(format!("seq/f{t:02}.png")));
        gt_paths.push(std::path::PathBuf::from(format!("seq/g{t:02}.exr")));
    }
    let manifest = Manifest {
        sequences: vec![SequenceRecord {
            id: "seq".into(),
            frame_paths,
            ground_truth_paths: Some(gt_paths),
            pattern_size,
            stops,
            phase: 0,
        }],
    };
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}
