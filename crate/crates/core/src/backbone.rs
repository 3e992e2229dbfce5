//! Shared-weight four-stage convolutional encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, ConvBn, Ctx, ParamStore};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Total downsampling between the input and the coarsest stage.
pub const MAX_STRIDE: usize = 32;

/// Four per-stage values, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<V>(pub [V; 4]);

impl<V> Pyramid<V> {
    pub fn map<U>(&self, f: impl FnMut(&V) -> U) -> Pyramid<U> {
        Pyramid(self.0.each_ref().map(f))
    }

    pub fn level(&self, stage: usize) -> &V {
        &self.0[stage - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &V> {
        self.0.iter()
    }
}

/// Per-stage encoder outputs `f1..f4` at strides 4, 8, 16 and 32.
pub type FeaturePyramid<T> = Pyramid<Tensor<T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_variant")]
    pub variant_name: String,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Residual blocks (two 3x3 conv each) after each stage's stride-2 conv.
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    /// Downsample the stem with a stride-1 conv plus 2x2 max pooling
    /// instead of a stride-2 conv.
    #[serde(default)]
    pub stem_maxpool: bool,
}

fn default_variant() -> String {
    "tiny".into()
}

fn default_input_channels() -> usize {
    3
}

fn default_blocks() -> usize {
    2
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl EncoderConfig {
    /// Desk-scale preset.
    pub fn tiny() -> Self {
        Self {
            variant_name: "tiny".into(),
            input_channels: 3,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            stem_maxpool: false,
        }
    }

    /// Stage widths of a ResNet-18.
    pub fn resnet18_like() -> Self {
        Self {
            variant_name: "resnet18-like".into(),
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            ..Self::tiny()
        }
    }

    /// Stage widths of a RegNetY-1.6GF.
    pub fn regnet_like() -> Self {
        Self {
            variant_name: "regnet-like".into(),
            stem_channels: 32,
            stage_channels: vec![48, 120, 336, 888],
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "resnet18-like" => Some(Self::resnet18_like()),
            "regnet-like" => Some(Self::regnet_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 {
            return Err(Error::config(
                "encoder.stage_channels",
                format!("expected 4 stages, got {}", self.stage_channels.len()),
            ));
        }
        if let Some(i) = self.stage_channels.iter().position(|&c| c == 0) {
            return Err(Error::config(
                format!("encoder.stage_channels[{i}]"),
                "channel count must be positive",
            ));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("encoder.stem_channels", "must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("encoder.input_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        [
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.stage_channels[3],
        ]
    }
}

/// Checks that an input extent survives five halvings.
pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    for (name, v) in [("height", height), ("width", width)] {
        if v == 0 || v % MAX_STRIDE != 0 {
            return Err(Error::Dimension {
                what: format!("input {name}"),
                detail: format!("{v} is not a positive multiple of {MAX_STRIDE}"),
            });
        }
    }
    Ok(())
}

/// Spatial extent of stage `k` (1-based) for an `h x w` input.
pub fn stage_size(h: usize, w: usize, stage: usize) -> (usize, usize) {
    (h >> (stage + 1), w >> (stage + 1))
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: ConvBn,
    second: ConvBn,
}

impl ResBlock {
    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.second.forward(ctx, self.first.forward(ctx, x));
        y.add(x).relu()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBn,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
}

impl Encoder {
    /// Registers the encoder's parameters under the builder's prefix.
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_stride = if cfg.stem_maxpool { 1 } else { 2 };
        let stem = ConvBn::new(
            &mut b.sub("stem"),
            cfg.input_channels,
            cfg.stem_channels,
            3,
            stem_stride,
            true,
        );
        let mut prev = cfg.stem_channels;
        let mut stages = Vec::new();
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let mut sb = b.sub(format!("stage{}", i + 1));
            let down = ConvBn::new(&mut sb.sub("down"), prev, c, 3, 2, true);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| {
                    let mut bb = sb.sub(format!("block{j}"));
                    ResBlock {
                        first: ConvBn::new(&mut bb.sub("conv1"), c, c, 3, 1, true),
                        second: ConvBn::new(&mut bb.sub("conv2"), c, c, 3, 1, false),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
            prev = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Maps an `[n, c, h, w]` batch to its four stage features.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Pyramid<Var<'g, T>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(Error::shape(
                "encoder input",
                &s,
                &[s.first().copied().unwrap_or(0), self.cfg.input_channels, 0, 0],
            ));
        }
        check_input_size(s[2], s[3])?;
        let mut h = self.stem.forward(ctx, x);
        if self.cfg.stem_maxpool {
            h = h.max_pool2();
        }
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            h = stage.down.forward(ctx, h);
            for block in &stage.blocks {
                h = block.forward(ctx, h);
            }
            levels.push(h);
        }
        Ok(Pyramid([levels[0], levels[1], levels[2], levels[3]]))
    }

    /// Runs both images through the same parameters in a single batch and
    /// splits the result back into one pyramid per image.
    pub fn forward_pair<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        t1: Var<'g, T>,
        t2: Var<'g, T>,
    ) -> Result<(Pyramid<Var<'g, T>>, Pyramid<Var<'g, T>>)> {
        let (s1, s2) = (t1.shape(), t2.shape());
        if s1 != s2 {
            return Err(Error::shape("bitemporal pair", &s1, &s2));
        }
        let n = s1[0];
        let both = self.forward(ctx, ops::concat(&[t1, t2], 0))?;
        Ok((
            both.map(|v| v.narrow_batch(0, n)),
            both.map(|v| v.narrow_batch(n, n)),
        ))
    }

    /// Evaluation-mode encoding of a pair of `[n, c, h, w]` batches.
    pub fn encode_pair<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        t1: &Tensor<T>,
        t2: &Tensor<T>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, store, false);
        let (a, b) = self.forward_pair(&ctx, graph.constant(t1.clone()), graph.constant(t2.clone()))?;
        Ok((a.map(|v| v.value().as_ref().clone()), b.map(|v| v.value().as_ref().clone())))
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self
                .stages
                .iter()
                .map(|s| {
                    s.down.num_params()
                        + s.blocks
                            .iter()
                            .map(|b| b.first.num_params() + b.second.num_params())
                            .sum::<usize>()
                })
                .sum::<usize>()
    }

    /// Convolution FLOPs of one forward pass on an `h x w` image.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (mut ch, mut cw) = self.stem.conv.output_size(h, w);
        let mut total = self.stem.conv.flops(ch, cw);
        if self.cfg.stem_maxpool {
            ch /= 2;
            cw /= 2;
        }
        for stage in &self.stages {
            (ch, cw) = stage.down.conv.output_size(ch, cw);
            total += stage.down.conv.flops(ch, cw);
            for block in &stage.blocks {
                total += block.first.conv.flops(ch, cw) + block.second.conv.flops(ch, cw);
            }
        }
        total
    }
}
