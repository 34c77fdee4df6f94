//! Gated-convolution hallucination path.
//!
//! Saturated or near-black regions of the neighbour carry no usable content,
//! so this path generates it: both the neighbour's and the reference's
//! six-channel stacks, each tagged with a continuous luminance mask, feed a
//! gated-convolution encoder-decoder. The encoder half produces features
//! `F_h` at half resolution (where they are blended with the aligned
//! features); the decoder half lifts the blended result back to full
//! resolution. Every layer is a gated convolution
//! `F_o = ρ(conv(W_f, F)) ⊙ σ(conv(W_g, F))` with ELU ρ, so the network can
//! learn where to trust its own synthesis.

use crate::alignment::{Feat, Scale};
use crate::conv::ConvSpec;
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::radiometry::{rgb_to_luma, ExposureFrame};
use crate::tensor::Tensor;

/// Channel widths of the hallucination path.
#[derive(Clone, Copy, Debug)]
pub struct HallucCfg {
    /// Width of `F_h` at half scale; must match the aligned features so the
    /// two can be blended.
    pub blend_channels: usize,
    /// Width of the quarter-scale bottleneck.
    pub bottleneck_channels: usize,
    /// Width of the full-resolution per-neighbour output features.
    pub out_channels: usize,
}

/// Channels of the stacked encoder input: two six-channel frames plus two
/// luminance masks.
pub const ENCODER_IN_CHANNELS: usize = 14;

/// Register the hallucination parameters under the `hallucination.` prefix.
/// Each gated layer owns a feature (`.f`) and a gate (`.g`) convolution of
/// identical geometry.
pub fn init_params(init: &mut Initializer, store: &mut ParamStore, cfg: &HallucCfg) {
    let stages: [(&str, ConvSpec); 6] = [
        ("enc1", ConvSpec::down3(ENCODER_IN_CHANNELS, cfg.blend_channels)),
        ("enc2", ConvSpec::down3(cfg.blend_channels, cfg.bottleneck_channels)),
        ("bott1", ConvSpec::same3(cfg.bottleneck_channels, cfg.bottleneck_channels)),
        ("bott2", ConvSpec::same3(cfg.bottleneck_channels, cfg.bottleneck_channels)),
        ("dec1", ConvSpec::same3(cfg.bottleneck_channels, cfg.blend_channels)),
        ("dec2", ConvSpec::same3(cfg.blend_channels, cfg.out_channels)),
    ];
    for (name, spec) in stages {
        init.conv(store, &format!("hallucination.{name}.f"), &spec);
        init.conv(store, &format!("hallucination.{name}.g"), &spec);
    }
}

/// Gated convolution from explicit weight nodes:
/// `ρ(conv(W_f, x) + b_f) ⊙ σ(conv(W_g, x) + b_g)`.
pub fn gated_conv_raw(
    g: &mut Graph,
    x: Var,
    w_f: Var,
    b_f: Var,
    w_g: Var,
    b_g: Var,
    spec: ConvSpec,
) -> Var {
    assert_eq!(
        g.shape(w_f),
        g.shape(w_g),
        "feature and gate kernels must share geometry"
    );
    let feat = g.conv2d(x, w_f, Some(b_f), spec);
    let gate = g.conv2d(x, w_g, Some(b_g), spec);
    let rho = g.elu(feat);
    let sig = g.sigmoid(gate);
    g.mul(rho, sig)
}

/// Gated convolution using the stored layer under `prefix` at `stride`.
pub fn gated_conv(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, stride: usize) -> Var {
    let w_f = p.var(&format!("{prefix}.f.w"));
    let b_f = p.var(&format!("{prefix}.f.b"));
    let w_g = p.var(&format!("{prefix}.g.w"));
    let b_g = p.var(&format!("{prefix}.g.b"));
    let ws = g.shape(w_f);
    assert_eq!(
        g.shape(x)[0],
        ws[1],
        "gated layer {prefix}: input channels {} vs kernel {}",
        g.shape(x)[0],
        ws[1]
    );
    let spec = ConvSpec::new(ws[1], ws[0], ws[2], stride, 1);
    gated_conv_raw(g, x, w_f, b_f, w_g, b_g, spec)
}

/// Continuous luminance mask of a frame: its luma plane, untouched. Dark
/// regions sit near 0, saturated regions near 1, with everything in between
/// preserved rather than thresholded away.
pub fn make_luminance_mask(frame: &ExposureFrame) -> Tensor {
    rgb_to_luma(&frame.pixels)
}

/// Encoder half plus the first decoder stage: full-resolution inputs down to
/// the quarter-scale bottleneck and back up to `F_h` at half scale, with the
/// half-scale encoder features added back in.
pub fn hallucinate_encode(
    g: &mut Graph,
    p: &BoundParams,
    neighbor_six: Var,
    ref_six: Var,
    neighbor_mask: Var,
    ref_mask: Var,
) -> Feat {
    let (h, w) = {
        let s = g.shape(neighbor_six);
        assert_eq!(s[0], 6, "neighbour stack must have six channels");
        (s[1], s[2])
    };
    assert_eq!(g.shape(ref_six), &[6, h, w], "reference stack shape");
    assert_eq!(g.shape(neighbor_mask), &[1, h, w], "neighbour mask shape");
    assert_eq!(g.shape(ref_mask), &[1, h, w], "reference mask shape");
    assert!(h % 4 == 0 && w % 4 == 0, "frames must be padded to multiples of 4");

    let stacked = g.concat_channels(&[neighbor_six, ref_six, neighbor_mask, ref_mask]);
    let e1 = gated_conv(g, p, "hallucination.enc1", stacked, 2);
    let e2 = gated_conv(g, p, "hallucination.enc2", e1, 2);
    let b1 = gated_conv(g, p, "hallucination.bott1", e2, 1);
    let b2 = gated_conv(g, p, "hallucination.bott2", b1, 1);
    let up = g.upsample2_nearest(b2);
    let d1 = gated_conv(g, p, "hallucination.dec1", up, 1);
    let f_h = g.add(d1, e1);
    Feat::new(f_h, Scale::Half)
}

/// Remaining decoder stage: blended half-scale features up to the
/// full-resolution per-neighbour output handed to the merging network.
pub fn hallucinate_decode(g: &mut Graph, p: &BoundParams, blended: Feat) -> Feat {
    assert_eq!(blended.scale, Scale::Half, "decode expects half-scale input");
    let up = g.upsample2_nearest(blended.var);
    let out = gated_conv(g, p, "hallucination.dec2", up, 1);
    Feat::new(out, Scale::Full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check_scalar, pseudo_tensor, pseudo_tensor_in};

    fn tiny_cfg() -> HallucCfg {
        HallucCfg {
            blend_channels: 6,
            bottleneck_channels: 8,
            out_channels: 5,
        }
    }

    fn make_params(cfg: &HallucCfg, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        init_params(&mut init, &mut store, cfg);
        store
    }

    fn zero_biases(store: &mut ParamStore) {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .cloned()
            .collect();
        for n in names {
            let shape = store.get(&n).shape().to_vec();
            store.update(&n, Tensor::zeros(&shape));
        }
    }

    #[test]
    fn zero_gate_weights_halve_the_feature_branch() {
        let spec = ConvSpec::same3(2, 3);
        let mut g = Graph::new();
        let x = g.leaf(pseudo_tensor(&[2, 5, 5], 1));
        let w_f = g.leaf(pseudo_tensor(&[3, 2, 3, 3], 2));
        let b_f = g.leaf(pseudo_tensor(&[3], 3));
        let w_g = g.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b_g = g.leaf(Tensor::zeros(&[3]));
        let out = gated_conv_raw(&mut g, x, w_f, b_f, w_g, b_g, spec);
        let feat = g.conv2d(x, w_f, Some(b_f), spec);
        let rho = g.elu(feat);
        for (o, f) in g.value(out).data().iter().zip(g.value(rho).data()) {
            assert!((o - 0.5 * f).abs() < 1e-12, "{o} vs 0.5·{f}");
        }
    }

    #[test]
    fn zero_input_with_zero_biases_is_silent() {
        let spec = ConvSpec::same3(2, 3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 5, 5]));
        let w_f = g.leaf(pseudo_tensor(&[3, 2, 3, 3], 4));
        let b_f = g.leaf(Tensor::zeros(&[3]));
        let w_g = g.leaf(pseudo_tensor(&[3, 2, 3, 3], 5));
        let b_g = g.leaf(Tensor::zeros(&[3]));
        let out = gated_conv_raw(&mut g, x, w_f, b_f, w_g, b_g, spec);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_instance_matches_the_scalar_oracle() {
        let spec = ConvSpec::point(1, 1);
        let x = pseudo_tensor(&[1, 4, 4], 6);
        let (wf, bf, wg, bg) = (0.7, -0.2, -1.3, 0.4);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wfv = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![wf]));
        let bfv = g.leaf(Tensor::from_vec(&[1], vec![bf]));
        let wgv = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![wg]));
        let bgv = g.leaf(Tensor::from_vec(&[1], vec![bg]));
        let out = gated_conv_raw(&mut g, xv, wfv, bfv, wgv, bgv, spec);
        for (o, &v) in g.value(out).data().iter().zip(x.data()) {
            let pre = wf * v + bf;
            let rho = if pre > 0.0 { pre } else { pre.exp_m1() };
            let sig = 1.0 / (1.0 + (-(wg * v + bg)).exp());
            assert!((o - rho * sig).abs() < 1e-12, "{o} vs {}", rho * sig);
        }
    }

    #[test]
    fn gate_ratio_stays_inside_the_unit_interval() {
        let spec = ConvSpec::same3(2, 3);
        let mut g = Graph::new();
        let x = g.leaf(pseudo_tensor(&[2, 6, 6], 7));
        let w_f = g.leaf(pseudo_tensor(&[3, 2, 3, 3], 8));
        let b_f = g.leaf(pseudo_tensor(&[3], 9));
        let w_g = g.leaf(pseudo_tensor(&[3, 2, 3, 3], 10));
        let b_g = g.leaf(pseudo_tensor(&[3], 11));
        let out = gated_conv_raw(&mut g, x, w_f, b_f, w_g, b_g, spec);
        let feat = g.conv2d(x, w_f, Some(b_f), spec);
        let rho = g.elu(feat);
        for (o, f) in g.value(out).data().iter().zip(g.value(rho).data()) {
            if f.abs() > 1e-6 {
                let ratio = o / f;
                assert!(ratio > 0.0 && ratio < 1.0, "gate ratio {ratio} escaped (0,1)");
            }
        }
    }

    #[test]
    fn gated_conv_gradients_match_finite_differences() {
        let spec = ConvSpec::same3(2, 2);
        let inputs = vec![
            pseudo_tensor_in(&[2, 5, 5], 12, -1.0, 1.0),
            pseudo_tensor_in(&[2, 2, 3, 3], 13, -0.7, 0.7),
            pseudo_tensor_in(&[2], 14, -0.3, 0.3),
            pseudo_tensor_in(&[2, 2, 3, 3], 15, -0.7, 0.7),
            pseudo_tensor_in(&[2], 16, -0.3, 0.3),
        ];
        fd_check_scalar(
            &inputs,
            |ts| {
                let mut g = Graph::new();
                let vars: Vec<_> = ts.iter().map(|t| g.leaf(t.clone())).collect();
                let out = gated_conv_raw(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], spec);
                let sq = g.square(out);
                let root = g.mean_all(sq);
                (g, vars, root)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn luminance_masks_preserve_gray_and_saturate_extremes() {
        let white = ExposureFrame::new(Tensor::filled(&[3, 3, 4], 1.0), 1.0).unwrap();
        assert!(make_luminance_mask(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let black = ExposureFrame::new(Tensor::zeros(&[3, 3, 4]), 1.0).unwrap();
        assert!(make_luminance_mask(&black).data().iter().all(|&v| v == 0.0));

        let hw = 12;
        let ramp: Vec<f64> = (0..hw).map(|i| i as f64 / (hw - 1) as f64).collect();
        let mut data = ramp.clone();
        data.extend_from_slice(&ramp);
        data.extend_from_slice(&ramp);
        let gray = ExposureFrame::new(Tensor::from_vec(&[3, 3, 4], data), 1.0).unwrap();
        let mask = make_luminance_mask(&gray);
        for (m, r) in mask.data().iter().zip(&ramp) {
            assert!((m - r).abs() < 1e-12, "gray ramp mask {m} vs {r}");
        }
    }

    #[test]
    fn encoder_shapes_halve_and_decoder_shapes_restore() {
        let cfg = tiny_cfg();
        let store = make_params(&cfg, 21);
        for (h, w) in [(16, 16), (32, 16)] {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let nb = g.leaf(pseudo_tensor_in(&[6, h, w], 22, 0.0, 1.0));
            let rf = g.leaf(pseudo_tensor_in(&[6, h, w], 23, 0.0, 1.0));
            let mn = g.leaf(pseudo_tensor_in(&[1, h, w], 24, 0.0, 1.0));
            let mr = g.leaf(pseudo_tensor_in(&[1, h, w], 25, 0.0, 1.0));
            let f_h = hallucinate_encode(&mut g, &p, nb, rf, mn, mr);
            assert_eq!(f_h.scale, Scale::Half);
            assert_eq!(g.shape(f_h.var), &[cfg.blend_channels, h / 2, w / 2]);
            let full = hallucinate_decode(&mut g, &p, f_h);
            assert_eq!(full.scale, Scale::Full);
            assert_eq!(g.shape(full.var), &[cfg.out_channels, h, w]);
        }
    }

    #[test]
    fn silent_inputs_stay_silent_through_the_whole_path() {
        let cfg = tiny_cfg();
        let mut store = make_params(&cfg, 26);
        zero_biases(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let nb = g.leaf(Tensor::zeros(&[6, 16, 16]));
        let rf = g.leaf(Tensor::zeros(&[6, 16, 16]));
        let mn = g.leaf(Tensor::zeros(&[1, 16, 16]));
        let mr = g.leaf(Tensor::zeros(&[1, 16, 16]));
        let f_h = hallucinate_encode(&mut g, &p, nb, rf, mn, mr);
        assert!(g.value(f_h.var).data().iter().all(|&v| v == 0.0));
        let full = hallucinate_decode(&mut g, &p, f_h);
        assert!(g.value(full.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masks_steer_the_output() {
        // The gate path must expose mask changes: gradient w.r.t. the mask
        // plane is nonzero somewhere.
        let cfg = tiny_cfg();
        let store = make_params(&cfg, 27);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let nb = g.leaf(pseudo_tensor_in(&[6, 16, 16], 28, 0.0, 1.0));
        let rf = g.leaf(pseudo_tensor_in(&[6, 16, 16], 29, 0.0, 1.0));
        let mn = g.leaf(pseudo_tensor_in(&[1, 16, 16], 30, 0.0, 1.0));
        let mr = g.leaf(pseudo_tensor_in(&[1, 16, 16], 31, 0.0, 1.0));
        let f_h = hallucinate_encode(&mut g, &p, nb, rf, mn, mr);
        let sq = g.square(f_h.var);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        let gm = grads.get(mn).expect("mask gradient missing");
        let peak = gm.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(peak > 1e-12, "mask gradient is identically zero");
    }

    #[test]
    fn pattern_translation_moves_the_features_with_it() {
        // Zero background, zero biases: shifting the input by a stride-aligned
        // offset shifts F_h by half that offset in its interior.
        let cfg = tiny_cfg();
        let mut store = make_params(&cfg, 33);
        zero_biases(&mut store);
        let (h, w) = (24, 24);
        let pat6 = pseudo_tensor_in(&[6, 8, 8], 34, 0.1, 1.0);
        let pat1 = pseudo_tensor_in(&[1, 8, 8], 35, 0.1, 1.0);
        let place = |pat: &Tensor, oy: usize, ox: usize| {
            let c = pat.c();
            let mut data = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..8 {
                    for x in 0..8 {
                        data[(ch * h + oy + y) * w + ox + x] = pat.at3(ch, y, x);
                    }
                }
            }
            Tensor::from_vec(&[c, h, w], data)
        };
        let run = |oy: usize, ox: usize| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let nb = g.leaf(place(&pat6, oy, ox));
            let rf = g.leaf(place(&pat6, oy, ox));
            let mn = g.leaf(place(&pat1, oy, ox));
            let mr = g.leaf(place(&pat1, oy, ox));
            let f_h = hallucinate_encode(&mut g, &p, nb, rf, mn, mr);
            g.value(f_h.var).clone()
        };
        let a = run(4, 4);
        let b = run(8, 12); // shifted by (4, 8): stride-aligned
        for c in 0..tiny_cfg().blend_channels {
            for y in 1..3 {
                for x in 1..3 {
                    let va = a.at3(c, 2 + y, 2 + x);
                    let vb = b.at3(c, 4 + y, 6 + x);
                    assert!(
                        (va - vb).abs() < 1e-12,
                        "translation equivariance broken at c={c} y={y} x={x}: {va} vs {vb}"
                    );
                }
            }
        }
    }
}
