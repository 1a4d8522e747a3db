//! Residual convolutional encoders for glimpses and for the context image.

use ndarray::{concatenate, s, Array1, Axis};
use serde::{Deserialize, Serialize};

use super::conv::{relu, relu_backward, Conv, ConvCache, FeatureMap, ResidualBlock, ResidualCache};
use super::heads::Linear;
use super::params::{LayoutBuilder, ParameterSet};
use crate::error::{Error, Result};
use crate::imaging::{ContextImage, Glimpse, CHANNELS};

/// Stem conv, residual block, stride-2 conv, residual block.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    stem: Conv,
    block1: ResidualBlock,
    down: Conv,
    block2: ResidualBlock,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    stem: ConvCache,
    stem_out: FeatureMap,
    block1: ResidualCache,
    down: ConvCache,
    down_out: FeatureMap,
    block2: ResidualCache,
}

impl ConvTrunk {
    pub fn register(b: &mut LayoutBuilder, name: &str, stem_channels: usize, stage_channels: usize) -> Self {
        ConvTrunk {
            stem: Conv::register(b, &format!("{name}.stem"), CHANNELS, stem_channels, 1, true),
            block1: ResidualBlock::register(b, &format!("{name}.res1"), stem_channels),
            down: Conv::register(b, &format!("{name}.down"), stem_channels, stage_channels, 2, true),
            block2: ResidualBlock::register(b, &format!("{name}.res2"), stage_channels),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.down.out_channels
    }

    pub fn forward(&self, p: &ParameterSet, x: &FeatureMap) -> Result<(FeatureMap, TrunkCache)> {
        let (pre, stem) = self.stem.forward(p, x)?;
        let stem_out = relu(&pre);
        let (r1, block1) = self.block1.forward(p, &stem_out)?;
        let (pre, down) = self.down.forward(p, &r1)?;
        let down_out = relu(&pre);
        let (out, block2) = self.block2.forward(p, &down_out)?;
        Ok((out, TrunkCache { stem, stem_out, block1, down, down_out, block2 }))
    }

    pub fn backward(&self, p: &ParameterSet, cache: &TrunkCache, dout: &FeatureMap, grads: &mut ParameterSet) {
        let mut d = self.block2.backward(p, &cache.block2, dout, grads, true).expect("input grad");
        relu_backward(&mut d, &cache.down_out);
        let d = self.down.backward(p, &cache.down, &d, grads, true).expect("input grad");
        let mut d = self.block1.backward(p, &cache.block1, &d, grads, true).expect("input grad");
        relu_backward(&mut d, &cache.stem_out);
        self.stem.backward(p, &cache.stem, &d, grads, false);
    }
}

/// How a trunk's output map becomes a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Per-channel spatial mean.
    GlobalAverage,
    /// Row-major flattening; keeps spatial layout.
    Flatten,
}

impl Readout {
    fn width(self, channels: usize, h: usize, w: usize) -> usize {
        match self {
            Readout::GlobalAverage => channels,
            Readout::Flatten => channels * h * w,
        }
    }

    fn apply(self, map: &FeatureMap) -> Array1<f64> {
        match self {
            Readout::GlobalAverage => {
                let (_, h, w) = map.dim();
                map.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
            }
            Readout::Flatten => map.iter().copied().collect(),
        }
    }

    fn backward(self, dv: &Array1<f64>, dim: (usize, usize, usize)) -> FeatureMap {
        let (c, h, w) = dim;
        match self {
            Readout::GlobalAverage => {
                let scale = 1.0 / (h * w) as f64;
                FeatureMap::from_shape_fn(dim, |(ci, _, _)| dv[ci] * scale)
            }
            Readout::Flatten => FeatureMap::from_shape_vec((c, h, w), dv.to_vec()).expect("shape"),
        }
    }
}

/// Pixel intensities in `[0, 1]` are mapped to `(v - INPUT_CENTER) * INPUT_GAIN`
/// before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 2.0;

/// A trunk followed by a readout and a linear map.
#[derive(Debug, Clone)]
pub struct Branch {
    trunk: ConvTrunk,
    readout: Readout,
    linear: Linear,
    input_side: usize,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    trunk: TrunkCache,
    map_dim: (usize, usize, usize),
    pooled: Array1<f64>,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        b: &mut LayoutBuilder,
        name: &str,
        input_side: usize,
        stem_channels: usize,
        stage_channels: usize,
        readout: Readout,
        features: usize,
    ) -> Self {
        let trunk = ConvTrunk::register(b, name, stem_channels, stage_channels);
        let side = input_side.div_ceil(2);
        let linear = Linear::register(b, &format!("{name}.fc"), readout.width(stage_channels, side, side), features);
        Branch { trunk, readout, linear, input_side }
    }

    pub fn features(&self) -> usize {
        self.linear.outputs
    }

    pub fn forward(&self, p: &ParameterSet, x: &FeatureMap) -> Result<(Array1<f64>, BranchCache)> {
        let (c, h, w) = x.dim();
        if c != CHANNELS || h != self.input_side || w != self.input_side {
            return Err(Error::shape(format!(
                "encoder expects {CHANNELS}x{0}x{0} input, got {c}x{h}x{w}",
                self.input_side
            )));
        }
        let x = x.mapv(|v| (v - INPUT_CENTER) * INPUT_GAIN);
        let (map, trunk) = self.trunk.forward(p, &x)?;
        let pooled = self.readout.apply(&map);
        let v = self.linear.forward(p, pooled.view());
        Ok((v, BranchCache { trunk, map_dim: map.dim(), pooled }))
    }

    pub fn backward(&self, p: &ParameterSet, cache: &BranchCache, dv: &Array1<f64>, grads: &mut ParameterSet) {
        let dpooled = self.linear.backward(p, cache.pooled.view(), dv.view(), grads);
        let dmap = self.readout.backward(&dpooled, cache.map_dim);
        self.trunk.backward(p, &cache.trunk, &dmap, grads);
    }
}

/// Encodes both patches of a glimpse and concatenates their feature vectors.
#[derive(Debug, Clone)]
pub struct GlimpseEncoder {
    /// One branch when weights are shared, otherwise fine then coarse.
    branches: Vec<Branch>,
}

#[derive(Debug, Clone)]
pub struct GlimpseCache {
    fine: BranchCache,
    coarse: BranchCache,
}

impl GlimpseEncoder {
    pub fn register(
        b: &mut LayoutBuilder,
        patch_side: usize,
        stem_channels: usize,
        stage_channels: usize,
        branch_features: usize,
        shared: bool,
    ) -> Self {
        let names: &[&str] = if shared { &["c1"] } else { &["c1.fine", "c1.coarse"] };
        let branches = names
            .iter()
            .map(|n| {
                Branch::register(b, n, patch_side, stem_channels, stage_channels, Readout::GlobalAverage, branch_features)
            })
            .collect();
        GlimpseEncoder { branches }
    }

    pub fn features(&self) -> usize {
        2 * self.branches[0].features()
    }

    fn branch(&self, coarse: bool) -> &Branch {
        if coarse && self.branches.len() > 1 {
            &self.branches[1]
        } else {
            &self.branches[0]
        }
    }

    pub fn forward(&self, p: &ParameterSet, g: &Glimpse) -> Result<(Array1<f64>, GlimpseCache)> {
        let (vf, fine) = self.branch(false).forward(p, &g.fine)?;
        let (vc, coarse) = self.branch(true).forward(p, &g.coarse)?;
        let v = concatenate(Axis(0), &[vf.view(), vc.view()]).expect("concat");
        Ok((v, GlimpseCache { fine, coarse }))
    }

    pub fn backward(&self, p: &ParameterSet, cache: &GlimpseCache, dv: &Array1<f64>, grads: &mut ParameterSet) {
        let half = dv.len() / 2;
        self.branch(false).backward(p, &cache.fine, &dv.slice(s![..half]).to_owned(), grads);
        self.branch(true).backward(p, &cache.coarse, &dv.slice(s![half..]).to_owned(), grads);
    }
}

/// Encodes the (possibly suppressed) context image.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    branch: Branch,
}

pub type ContextCache = BranchCache;

impl ContextEncoder {
    pub fn register(
        b: &mut LayoutBuilder,
        context_side: usize,
        stem_channels: usize,
        stage_channels: usize,
        readout: Readout,
        features: usize,
    ) -> Self {
        ContextEncoder { branch: Branch::register(b, "c2", context_side, stem_channels, stage_channels, readout, features) }
    }

    pub fn features(&self) -> usize {
        self.branch.features()
    }

    pub fn forward(&self, p: &ParameterSet, ctx: &ContextImage) -> Result<(Array1<f64>, ContextCache)> {
        self.branch.forward(p, &ctx.pixels)
    }

    pub fn backward(&self, p: &ParameterSet, cache: &ContextCache, dv: &Array1<f64>, grads: &mut ParameterSet) {
        self.branch.backward(p, cache, dv, grads)
    }
}
