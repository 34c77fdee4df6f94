//! Adaptive blending, per-neighbour network assembly, and the merging
//! network that turns all per-frame features into one HDR frame.
//!
//! For each supporting frame the aligned features `F_a` and hallucinated
//! features `F_h` meet at half resolution, where a sigmoid head predicts a
//! blend map `M` and the paths combine as `F_h + M ⊙ F_a` — trusting
//! alignment where matching succeeded and synthesis elsewhere. The blended
//! features are decoded to full resolution, and the merging network —
//! a convolution, a stack of residual blocks with spatial and
//! frequency-domain branches, a final convolution and a sigmoid — produces
//! the reconstructed frame. The reference itself runs through the same
//! weight-shared per-neighbour network against itself, so the merge always
//! sees a uniform set of feature maps.

use crate::alignment::{self, Feat, Scale};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hallucination::{self, make_luminance_mask};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::radiometry::{six_channel, ExposureFrame};
use crate::tensor::Tensor;

/// Channel widths and depth of the whole model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCfg {
    /// Shared key/query extractor width.
    pub kq_channels: usize,
    /// Value extractor width.
    pub value_channels: usize,
    /// Width at the half-scale blending point.
    pub blend_channels: usize,
    /// Quarter-scale bottleneck width of the hallucination path.
    pub bottleneck_channels: usize,
    /// Width of each per-neighbour full-resolution feature map.
    pub fused_channels: usize,
    /// Width inside the merging network.
    pub merge_channels: usize,
    /// Number of residual frequency blocks in the merging network.
    pub merge_blocks: usize,
    /// Frames per window (5 for two exposures, 7 for three).
    pub frames: usize,
}

impl ModelCfg {
    pub fn align_cfg(&self) -> alignment::AlignCfg {
        alignment::AlignCfg {
            kq_channels: self.kq_channels,
            value_channels: self.value_channels,
            blend_channels: self.blend_channels,
        }
    }

    pub fn halluc_cfg(&self) -> hallucination::HallucCfg {
        hallucination::HallucCfg {
            blend_channels: self.blend_channels,
            bottleneck_channels: self.bottleneck_channels,
            out_channels: self.fused_channels,
        }
    }
}

/// Register every parameter group and return the populated store.
pub fn init_model_params(cfg: &ModelCfg, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    alignment::init_params(&mut init, &mut store, &cfg.align_cfg());
    hallucination::init_params(&mut init, &mut store, &cfg.halluc_cfg());
    init.conv(
        &mut store,
        "blend.head",
        &ConvSpec::same3(2 * cfg.blend_channels, 1),
    );
    init.conv(
        &mut store,
        "merge.head",
        &ConvSpec::same3(cfg.frames * cfg.fused_channels, cfg.merge_channels),
    );
    for i in 0..cfg.merge_blocks {
        let c = cfg.merge_channels;
        init.conv(&mut store, &format!("merge.block{i}.s1"), &ConvSpec::same3(c, c));
        init.conv(&mut store, &format!("merge.block{i}.s2"), &ConvSpec::same3(c, c));
        init.conv(&mut store, &format!("merge.block{i}.f1"), &ConvSpec::point(2 * c, 2 * c));
        init.conv(&mut store, &format!("merge.block{i}.f2"), &ConvSpec::point(2 * c, 2 * c));
    }
    init.conv(&mut store, "merge.tail", &ConvSpec::same3(cfg.merge_channels, 3));
    store
}

/// Blended features plus the map that produced them.
pub struct BlendResult {
    /// `F_h + M ⊙ F_a` at half scale.
    pub fused: Feat,
    /// `M ∈ [0,1]`, shape `[1, H/2, W/2]`.
    pub blend_map: Var,
}

/// Blend from an explicit head convolution: `M = σ(conv(concat(F_a, F_h)))`,
/// `fused = F_h + M ⊙ F_a`.
pub fn adaptive_blend_raw(g: &mut Graph, f_a: Var, f_h: Var, w: Var, b: Var) -> BlendResult {
    assert_eq!(g.shape(f_a), g.shape(f_h), "blend inputs must match");
    let ws = g.shape(w);
    let spec = ConvSpec::same3(ws[1], ws[0]);
    let cat = g.concat_channels(&[f_a, f_h]);
    let head = g.conv2d(cat, w, Some(b), spec);
    let m = g.sigmoid(head);
    let weighted = g.mul_bcast_hw(f_a, m);
    let fused = g.add(f_h, weighted);
    BlendResult {
        fused: Feat::new(fused, Scale::Half),
        blend_map: m,
    }
}

/// Blend aligned against hallucinated features with the stored head.
pub fn adaptive_blend(g: &mut Graph, p: &BoundParams, f_a: Feat, f_h: Feat) -> BlendResult {
    assert_eq!(f_a.scale, Scale::Half, "aligned features must be half scale");
    assert_eq!(f_h.scale, Scale::Half, "hallucinated features must be half scale");
    let w = p.var("blend.head.w");
    let b = p.var("blend.head.b");
    adaptive_blend_raw(g, f_a.var, f_h.var, w, b)
}

/// One per-neighbour pass: align, hallucinate, blend, decode. Every
/// invocation reads the same parameter store, so all supporting frames share
/// weights.
pub fn lan_forward(
    g: &mut Graph,
    p: &BoundParams,
    neighbor: &ExposureFrame,
    reference: &ExposureFrame,
    gamma: f64,
) -> Result<Feat> {
    let aligned = alignment::align(g, p, neighbor, reference, gamma)?;
    let nb_six = g.leaf(six_channel(neighbor, gamma)?);
    let rf_six = g.leaf(six_channel(reference, gamma)?);
    let nb_mask = g.leaf(make_luminance_mask(neighbor));
    let rf_mask = g.leaf(make_luminance_mask(reference));
    let f_h = hallucination::hallucinate_encode(g, p, nb_six, rf_six, nb_mask, rf_mask);
    let blended = adaptive_blend(g, p, aligned.feat, f_h);
    Ok(hallucination::hallucinate_decode(g, p, blended.fused))
}

/// Explicit weights of one residual frequency block.
pub struct ResFftWeights {
    /// Two shape-preserving spatial convolutions (ReLU between).
    pub s1: (Var, Var),
    pub s2: (Var, Var),
    /// Two pointwise convolutions over stacked real/imaginary spectra.
    pub f1: (Var, Var),
    pub f2: (Var, Var),
}

/// Residual block with a spatial and a frequency branch:
/// `x + conv(relu(conv(x))) + ift(conv(relu(conv(ft(x)))))`, where `ft`
/// stacks the real and imaginary half-spectrum planes as channels. The
/// frequency branch gives every output pixel a whole-frame receptive field.
pub fn res_fft_conv_block_raw(g: &mut Graph, x: Var, w: &ResFftWeights) -> Var {
    let c = g.shape(x)[0];
    let full_w = g.shape(x)[2];
    let spatial_spec = ConvSpec::same3(c, c);
    let freq_spec = ConvSpec::point(2 * c, 2 * c);

    let s = g.conv2d(x, w.s1.0, Some(w.s1.1), spatial_spec);
    let s = g.relu(s);
    let s = g.conv2d(s, w.s2.0, Some(w.s2.1), spatial_spec);

    let spec = g.rfft2(x);
    let f = g.conv2d(spec, w.f1.0, Some(w.f1.1), freq_spec);
    let f = g.relu(f);
    let f = g.conv2d(f, w.f2.0, Some(w.f2.1), freq_spec);
    let f = g.irfft2(f, full_w);

    let xs = g.add(x, s);
    g.add(xs, f)
}

/// The stored-parameter form of the residual frequency block.
pub fn res_fft_conv_block(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let w = ResFftWeights {
        s1: (p.var(&format!("{prefix}.s1.w")), p.var(&format!("{prefix}.s1.b"))),
        s2: (p.var(&format!("{prefix}.s2.w")), p.var(&format!("{prefix}.s2.b"))),
        f1: (p.var(&format!("{prefix}.f1.w")), p.var(&format!("{prefix}.f1.b"))),
        f2: (p.var(&format!("{prefix}.f2.w")), p.var(&format!("{prefix}.f2.b"))),
    };
    res_fft_conv_block_raw(g, x, &w)
}

/// Fuse all per-frame features into the reconstructed frame: concatenate,
/// convolve, run the residual frequency blocks, project to RGB, sigmoid.
pub fn merge(g: &mut Graph, p: &BoundParams, feats: &[Feat]) -> Var {
    assert!(!feats.is_empty(), "merge needs features");
    let head_w = p.var("merge.head.w");
    let per_frame = g.shape(feats[0].var)[0];
    let expected = g.shape(head_w)[1] / per_frame;
    assert_eq!(
        feats.len(),
        expected,
        "merge built for {expected} frames, got {}",
        feats.len()
    );
    let shape0 = g.shape(feats[0].var).to_vec();
    for f in feats {
        assert_eq!(f.scale, Scale::Full, "merge inputs must be full scale");
        assert_eq!(g.shape(f.var), &shape0[..], "merge input shapes must match");
    }
    let vars: Vec<Var> = feats.iter().map(|f| f.var).collect();
    let cat = g.concat_channels(&vars);
    let head_b = p.var("merge.head.b");
    let hs = g.shape(head_w);
    let head_spec = ConvSpec::same3(hs[1], hs[0]);
    let mut cur = g.conv2d(cat, head_w, Some(head_b), head_spec);
    let mut i = 0;
    while p.try_var(&format!("merge.block{i}.s1.w")).is_some() {
        cur = res_fft_conv_block(g, p, &format!("merge.block{i}"), cur);
        i += 1;
    }
    let tail_w = p.var("merge.tail.w");
    let tail_b = p.var("merge.tail.b");
    let ts = g.shape(tail_w);
    let tail_spec = ConvSpec::same3(ts[1], ts[0]);
    let rgb = g.conv2d(cur, tail_w, Some(tail_b), tail_spec);
    g.sigmoid(rgb)
}

/// One reconstructed frame, range-checked.
#[derive(Clone)]
pub struct HdrFrame {
    pub pixels: Tensor,
}

impl HdrFrame {
    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.c() != 3 {
            return Err(Error::InvalidInput(format!(
                "reconstructed frame must be [3,h,w], got {:?}",
                pixels.shape()
            )));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "reconstructed frame has values outside [0,1]".into(),
            ));
        }
        Ok(HdrFrame { pixels })
    }
}

/// Full reconstruction of one window: every frame (the reference included)
/// runs through the shared per-neighbour network against the reference, and
/// the merge consumes the features in temporal order.
pub fn forward_window(
    g: &mut Graph,
    p: &BoundParams,
    frames: &[ExposureFrame],
    reference_index: usize,
    gamma: f64,
) -> Result<Var> {
    assert!(reference_index < frames.len(), "reference index out of range");
    let reference = &frames[reference_index];
    let mut feats = Vec::with_capacity(frames.len());
    for frame in frames {
        feats.push(lan_forward(g, p, frame, reference, gamma)?);
    }
    Ok(merge(g, p, &feats))
}
