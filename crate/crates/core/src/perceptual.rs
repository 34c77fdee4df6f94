//! Fixed pretrained feature extractor for the perceptual loss.
//!
//! The extractor is a VGG-19-style convolution stack: four stages of 3×3
//! convolutions with ReLU (2, 2, 4 and 4 layers wide) separated by 2×2
//! max-pooling, evaluated up to a configurable activation — by default
//! `relu4_4`, the last activation before the fourth pooling stage. Inputs
//! are tonemapped frames in `[0,1]`, normalised to the ImageNet channel
//! statistics the published weights were trained with.
//!
//! Weights are never trained here; they load from a local archive in the
//! same container format as training checkpoints, under names
//! `vgg.conv{stage}_{index}.{w,b}`. Channel widths are read from the stored
//! shapes, so reduced-width archives (used by the test suite) work
//! identically to the published full-width ones.

use std::path::Path;

use crate::checkpoint;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Tensor;

/// Convolutions per stage in VGG-19.
pub const STAGE_CONVS: [usize; 4] = [2, 2, 4, 4];

/// ImageNet channel means the published weights expect.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// ImageNet channel standard deviations.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Parse an activation name like `relu4_4` into (stage, conv) indices.
pub fn parse_layer(name: &str) -> Result<(usize, usize)> {
    let rest = name
        .strip_prefix("relu")
        .ok_or_else(|| Error::Config(format!("unknown feature layer '{name}'")))?;
    let (s, c) = rest
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("unknown feature layer '{name}'")))?;
    let stage: usize = s
        .parse()
        .map_err(|_| Error::Config(format!("unknown feature layer '{name}'")))?;
    let conv: usize = c
        .parse()
        .map_err(|_| Error::Config(format!("unknown feature layer '{name}'")))?;
    if !(1..=4).contains(&stage) || conv < 1 || conv > STAGE_CONVS[stage - 1] {
        return Err(Error::Config(format!(
            "feature layer '{name}' outside the supported relu1_1..relu4_4 range"
        )));
    }
    Ok((stage, conv))
}

/// A loaded, fixed feature extractor.
pub struct FeatureExtractor {
    store: ParamStore,
    layer: (usize, usize),
}

impl FeatureExtractor {
    /// Load extractor weights from `path`, evaluating up to `layer`
    /// (e.g. `"relu4_4"`). A missing or unreadable file is a configuration
    /// error: the perceptual loss cannot run without its weights.
    pub fn load(path: &Path, layer: &str) -> Result<Self> {
        let parsed = parse_layer(layer)?;
        if !path.exists() {
            return Err(Error::Config(format!(
                "perceptual feature weights not found at {} (required whenever \
                 the perceptual loss weight is positive; point \
                 `loss.perceptual_weights` at a converted archive or set \
                 `loss.lambda_per = 0`)",
                path.display()
            )));
        }
        let archive = checkpoint::load(path)?;
        let store = ParamStore::from_map(archive.tensors);
        let fx = FeatureExtractor { store, layer: parsed };
        fx.validate()?;
        Ok(fx)
    }

    /// Wrap an in-memory parameter store (test support).
    pub fn from_store(store: ParamStore, layer: &str) -> Result<Self> {
        let fx = FeatureExtractor {
            store,
            layer: parse_layer(layer)?,
        };
        fx.validate()?;
        Ok(fx)
    }

    fn validate(&self) -> Result<()> {
        let mut in_ch = 3;
        for (stage, conv) in self.layers() {
            let name = format!("vgg.conv{stage}_{conv}.w");
            let w = self
                .store
                .try_get(&name)
                .ok_or_else(|| Error::Data(format!("feature archive is missing {name}")))?;
            let s = w.shape();
            if s.len() != 4 || s[2] != 3 || s[3] != 3 || s[1] != in_ch {
                return Err(Error::Data(format!(
                    "feature archive tensor {name} has shape {s:?}, expected [*, {in_ch}, 3, 3]"
                )));
            }
            let bname = format!("vgg.conv{stage}_{conv}.b");
            let b = self
                .store
                .try_get(&bname)
                .ok_or_else(|| Error::Data(format!("feature archive is missing {bname}")))?;
            if b.shape() != [s[0]] {
                return Err(Error::Data(format!(
                    "feature archive tensor {bname} has shape {:?}, expected [{}]",
                    b.shape(),
                    s[0]
                )));
            }
            in_ch = s[0];
        }
        Ok(())
    }

    /// (stage, conv) pairs evaluated, in order.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for stage in 1..=self.layer.0 {
            let convs = if stage == self.layer.0 {
                self.layer.1
            } else {
                STAGE_CONVS[stage - 1]
            };
            for conv in 1..=convs {
                out.push((stage, conv));
            }
        }
        out
    }

    /// Divisor the input height/width must satisfy (one 2× pool per
    /// completed stage before the target layer).
    pub fn required_divisor(&self) -> usize {
        1 << (self.layer.0 - 1)
    }

    /// Run the extractor on a `[3,h,w]` tonemapped frame node. Applies the
    /// ImageNet normalisation, then the convolution stack with pooling
    /// between stages, stopping at the configured activation.
    pub fn features(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.shape(x)[0], 3, "feature extractor expects RGB input");
        let gain: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let bias: Vec<f64> = IMAGENET_MEAN
            .iter()
            .zip(&IMAGENET_STD)
            .map(|(m, s)| -m / s)
            .collect();
        let mut cur = g.affine_channels(x, gain, bias);
        let mut prev_stage = 1;
        for (stage, conv) in self.layers() {
            if stage != prev_stage {
                cur = g.maxpool2(cur);
                prev_stage = stage;
            }
            let name = format!("vgg.conv{stage}_{conv}");
            let w = g.leaf(self.store.get(&format!("{name}.w")).clone());
            let b = g.leaf(self.store.get(&format!("{name}.b")).clone());
            let ws = g.shape(w);
            let spec = ConvSpec::same3(ws[1], ws[0]);
            let c = g.conv2d(cur, w, Some(b), spec);
            cur = g.relu(c);
        }
        cur
    }
}

/// Build a reduced-width randomly initialised weight store with the real
/// extractor's layout. Intended for tests and benchmarks, where published
/// full-width weights would be oversized and unnecessary.
///
/// Weights are fan-in-scaled normals boosted by a constant per-layer gain:
/// at a handful of channels, random ReLU chains shrink their activations at
/// the median (one unlucky narrow layer can silence the rest for good), and
/// without the boost deep taps like `relu4_4` end up orders of magnitude
/// below what trained full-width weights produce — quietly degrading any
/// gradient check into a comparison of near-zeros. The gain keeps reduced
/// widths in a representative magnitude regime; it rescales pre-activations
/// without changing their signs.
pub fn synthetic_weights(widths: [usize; 4], seed: u64) -> ParamStore {
    const GAIN: f64 = 1.5;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let mut in_ch = 3;
    for (si, &convs) in STAGE_CONVS.iter().enumerate() {
        for c in 1..=convs {
            let spec = ConvSpec::same3(in_ch, widths[si]);
            let prefix = format!("vgg.conv{}_{c}", si + 1);
            init.conv(&mut store, &prefix, &spec);
            let wname = format!("{prefix}.w");
            let boosted = {
                let w = store.get(&wname);
                Tensor::from_vec(w.shape(), w.data().iter().map(|v| v * GAIN).collect())
            };
            store.update(&wname, boosted);
            in_ch = widths[si];
        }
    }
    store
}
