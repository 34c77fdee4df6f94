//! Attention-based alignment of a supporting frame onto the reference.
//!
//! The reference frame is exposure-adjusted to the neighbour's exposure so
//! both luma planes are photometrically comparable. Key features come from
//! the neighbour's luma, query features from the adjusted reference's luma —
//! both through ONE shared convolutional extractor — and value features come
//! from the neighbour's six-channel stack. Everything runs at quarter
//! resolution: features are unfolded into 3×3 patches, each query patch picks
//! its best key patch by cosine similarity, the value patches are rearranged
//! accordingly, fused with the original values under the confidence map, and
//! upsampled one stage (to half resolution) where adaptive blending happens.
//!
//! Matching is on luma only, so the index and confidence maps are invariant
//! to chroma changes that leave the computed luma untouched.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::radiometry::{adjust_exposure, rgb_to_luma, six_channel, ExposureFrame};
use crate::resample::downsample4_area;
use crate::tensor::Tensor;

/// Resolution a feature map lives at, relative to the window's full frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Full,
    Half,
    Quarter,
}

/// A feature map in the graph, tagged with its resolution.
#[derive(Clone, Copy, Debug)]
pub struct Feat {
    pub var: Var,
    pub scale: Scale,
}

impl Feat {
    pub fn new(var: Var, scale: Scale) -> Self {
        Feat { var, scale }
    }
}

/// Top-1 patch matching output: for each query position the chosen key
/// patch index and its cosine score (a graph node, so confidence gradients
/// reach the extractors).
pub struct MatchResult {
    pub index_map: Vec<usize>,
    pub confidence: Var,
}

/// Channel widths of the alignment path.
#[derive(Clone, Copy, Debug)]
pub struct AlignCfg {
    /// Channels of the shared key/query extractor.
    pub kq_channels: usize,
    /// Channels of the value extractor.
    pub value_channels: usize,
    /// Channels the aligned features are projected to for blending.
    pub blend_channels: usize,
}

const EXTRACTOR_DEPTH: usize = 3;

/// Register the alignment parameters under the `alignment.` prefix.
pub fn init_params(init: &mut Initializer, store: &mut ParamStore, cfg: &AlignCfg) {
    for i in 0..EXTRACTOR_DEPTH {
        let in_ch = if i == 0 { 1 } else { cfg.kq_channels };
        init.conv(
            store,
            &format!("alignment.kq.c{i}"),
            &ConvSpec::same3(in_ch, cfg.kq_channels),
        );
        let vin = if i == 0 { 6 } else { cfg.value_channels };
        init.conv(
            store,
            &format!("alignment.value.c{i}"),
            &ConvSpec::same3(vin, cfg.value_channels),
        );
    }
    init.conv(
        store,
        "alignment.up.c0",
        &ConvSpec::same3(2 * cfg.value_channels, cfg.blend_channels),
    );
}

/// One conv+ELU stack reusing the stored weights under `prefix`.
fn extractor3(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let mut cur = x;
    for i in 0..EXTRACTOR_DEPTH {
        let w = p.var(&format!("{prefix}.c{i}.w"));
        let b = p.var(&format!("{prefix}.c{i}.b"));
        let ws = g.shape(w);
        let spec = ConvSpec::same3(ws[1], ws[0]);
        let conv = g.conv2d(cur, w, Some(b), spec);
        cur = g.elu(conv);
    }
    cur
}

/// Run the SHARED key/query extractor on the neighbour luma and the
/// exposure-adjusted reference luma (both single-channel, quarter scale).
/// Returns `(K_feat, Q_feat)`.
pub fn extract_key_query(
    g: &mut Graph,
    p: &BoundParams,
    y_neighbor: Var,
    y_ref_adjusted: Var,
) -> (Var, Var) {
    assert_eq!(g.shape(y_neighbor)[0], 1, "key input must be luma-only");
    assert_eq!(g.shape(y_ref_adjusted)[0], 1, "query input must be luma-only");
    let k = extractor3(g, p, "alignment.kq", y_neighbor);
    let q = extractor3(g, p, "alignment.kq", y_ref_adjusted);
    (k, q)
}

/// Value extractor over the neighbour's quarter-scale six-channel stack.
pub fn extract_values(g: &mut Graph, p: &BoundParams, six_quarter: Var) -> Var {
    assert_eq!(
        g.shape(six_quarter)[0],
        6,
        "value input must be the six-channel stack"
    );
    extractor3(g, p, "alignment.value", six_quarter)
}

/// Top-1 cosine matching between query and key patch sets (`[n, d]` each).
pub fn match_top1(g: &mut Graph, q_patches: Var, k_patches: Var) -> Result<MatchResult> {
    let qs = g.shape(q_patches);
    let ks = g.shape(k_patches);
    if qs[0] == 0 || ks[0] == 0 {
        return Err(Error::InvalidInput("empty patch set".into()));
    }
    assert_eq!(qs[0], ks[0], "query/key patch counts differ");
    assert_eq!(qs[1], ks[1], "query/key patch lengths differ");
    let (index_map, confidence) = g.cosine_top1(q_patches, k_patches);
    Ok(MatchResult {
        index_map,
        confidence,
    })
}

/// Place patch `v_{I[i]}` at position `i` and rebuild the `[c,h,w]` map,
/// averaging overlapping 3×3 contributions.
pub fn rearrange_values(
    g: &mut Graph,
    v_patches: Var,
    matching: &MatchResult,
    c: usize,
    h: usize,
    w: usize,
) -> Var {
    let gathered = g.gather_rows(v_patches, matching.index_map.clone());
    g.fold3_avg(gathered, c, h, w)
}

/// Concatenate original and rearranged value maps, then weight every channel
/// by the per-position confidence.
pub fn fuse_confidence(g: &mut Graph, v: Var, v_rearranged: Var, confidence: Var) -> Var {
    let (h, w) = {
        let s = g.shape(v);
        (s[1], s[2])
    };
    assert_eq!(g.shape(v), g.shape(v_rearranged), "value map shape mismatch");
    assert_eq!(g.shape(confidence)[0], h * w, "confidence length mismatch");
    let cat = g.concat_channels(&[v, v_rearranged]);
    let s_map = g.reshape(confidence, &[1, h, w]);
    g.mul_bcast_hw(cat, s_map)
}

/// One learned 2× upsampling block: nearest-neighbour interpolation, a
/// shape-preserving convolution, and an ELU. Quarter scale in, half out.
pub fn upsample_aligned(g: &mut Graph, p: &BoundParams, fused: Feat) -> Feat {
    assert_eq!(fused.scale, Scale::Quarter, "upsample expects quarter scale");
    let up = g.upsample2_nearest(fused.var);
    let w = p.var("alignment.up.c0.w");
    let b = p.var("alignment.up.c0.b");
    let ws = g.shape(w);
    let spec = ConvSpec::same3(ws[1], ws[0]);
    let conv = g.conv2d(up, w, Some(b), spec);
    Feat::new(g.elu(conv), Scale::Half)
}

/// Aligned features plus the matching decision that produced them.
pub struct AlignOutput {
    /// `F_a` at half scale, `blend_channels` wide.
    pub feat: Feat,
    pub matching: MatchResult,
}

/// Full alignment of one supporting frame onto the reference.
pub fn align(
    g: &mut Graph,
    p: &BoundParams,
    neighbor: &ExposureFrame,
    reference: &ExposureFrame,
    gamma: f64,
) -> Result<AlignOutput> {
    let (h, w) = (neighbor.pixels.h(), neighbor.pixels.w());
    assert_eq!(
        (reference.pixels.h(), reference.pixels.w()),
        (h, w),
        "window frames must share a resolution"
    );
    assert!(h % 4 == 0 && w % 4 == 0, "frames must be padded to multiples of 4");

    // Query path: reference brought to the neighbour's exposure, luma only.
    let adjusted = adjust_exposure(&reference.pixels, reference.exposure, neighbor.exposure, gamma);
    let y_ref_q = downsample4_area(&rgb_to_luma(&adjusted));
    // Key path: neighbour luma as captured.
    let y_nb_q = downsample4_area(&rgb_to_luma(&neighbor.pixels));
    // Value path: the neighbour's six-channel stack.
    let six_q = downsample4_area(&six_channel(neighbor, gamma)?);

    let (qh, qw) = (h / 4, w / 4);
    let y_nb = g.leaf(y_nb_q);
    let y_ref = g.leaf(y_ref_q);
    let six = g.leaf(six_q);

    let (k_feat, q_feat) = extract_key_query(g, p, y_nb, y_ref);
    let v_feat = extract_values(g, p, six);
    let vc = g.shape(v_feat)[0];

    let k_patches = g.unfold3(k_feat);
    let q_patches = g.unfold3(q_feat);
    let v_patches = g.unfold3(v_feat);

    let matching = match_top1(g, q_patches, k_patches)?;
    let v_re = rearrange_values(g, v_patches, &matching, vc, qh, qw);
    let fused = fuse_confidence(g, v_feat, v_re, matching.confidence);
    let feat = upsample_aligned(g, p, Feat::new(fused, Scale::Quarter));
    Ok(AlignOutput { feat, matching })
}

/// Build a graph-independent quarter-scale luma plane for a frame, applying
/// the same exposure adjustment `align` uses for the reference. Exposed so
/// tests can probe the matching inputs directly.
pub fn quarter_luma(frame: &Tensor, e_from: f64, e_to: f64, gamma: f64) -> Tensor {
    if e_from == e_to {
        downsample4_area(&rgb_to_luma(frame))
    } else {
        downsample4_area(&rgb_to_luma(&adjust_exposure(frame, e_from, e_to, gamma)))
    }
}
