//! U-shape decoder: multi-scale fusion and sequence-reduced attention at
//! every level, with a sigmoid prediction head per level.

use serde::{Deserialize, Serialize};

use crate::backbone::Pyramid;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Builder, Conv2d, ConvBn, Ctx, LayerNorm, Linear, ParamStore};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability above which a pixel is labelled changed.
pub const CHANGE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsfConfig {
    /// Width of each of the four cascade branches per decoder level,
    /// finest first. Half the level width when absent.
    #[serde(default)]
    pub mid_channels: Option<Vec<usize>>,
    /// Feed the fourth branch from the second (`c'''' = Conv(c'')`)
    /// instead of the third.
    #[serde(default)]
    pub msf_literal_eq3: bool,
}

impl MsfConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mid_channels {
            if m.len() != 4 || m.contains(&0) {
                return Err(Error::config("msf.mid_channels", "needs 4 positive widths"));
            }
        }
        Ok(())
    }

    fn mid(&self, level: usize, channels: usize) -> usize {
        self.mid_channels
            .as_ref()
            .map_or((channels / 2).max(1), |m| m[level - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsaConfig {
    #[serde(default = "default_ratio")]
    pub reduction_ratio: usize,
    /// Attention heads; when absent, the largest divisor of `C` not above
    /// `max(1, C / 32)`.
    #[serde(default)]
    pub head_count: Option<usize>,
}

fn default_ratio() -> usize {
    4
}

impl Default for EsaConfig {
    fn default() -> Self {
        Self {
            reduction_ratio: 4,
            head_count: None,
        }
    }
}

impl EsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::config("esa.reduction_ratio", "must be at least 1"));
        }
        if self.head_count == Some(0) {
            return Err(Error::config("esa.head_count", "must be positive"));
        }
        Ok(())
    }

    pub fn heads_for(&self, channels: usize) -> usize {
        self.head_count
            .unwrap_or_else(|| (1..=(channels / 32).max(1)).rev().find(|h| channels % h == 0).unwrap_or(1))
    }
}

/// Multi-scale fusion: a cascade of four 3x3 conv blocks whose outputs are
/// concatenated, reduced back to the input width and added to the input.
#[derive(Clone, Debug)]
pub struct Msf {
    branches: Vec<ConvBn>,
    reduce: Conv2d,
    literal: bool,
}

impl Msf {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, mid: usize, literal: bool) -> Self {
        let branches = (0..4)
            .map(|i| {
                let cin = if i == 0 { channels } else { mid };
                ConvBn::new(&mut b.sub(format!("branch{}", i + 1)), cin, mid, 3, 1, true)
            })
            .collect();
        Self {
            branches,
            reduce: Conv2d::new(&mut b.sub("reduce"), 4 * mid, channels, 1, 1, true),
            literal,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let c1 = self.branches[0].forward(ctx, x);
        let c2 = self.branches[1].forward(ctx, c1);
        let c3 = self.branches[2].forward(ctx, c2);
        let c4 = self.branches[3].forward(ctx, if self.literal { c2 } else { c3 });
        let cat = ops::concat(&[c1, c2, c3, c4], 1);
        x.add(self.reduce.forward(ctx, cat))
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(ConvBn::num_params).sum::<usize>() + self.reduce.num_params()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.conv.flops(h, w)).sum::<u64>() + self.reduce.flops(h, w)
    }
}

/// `[b, n, h*d] -> [b*h, n, d]`
fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Var<'g, T> {
    let s = x.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    x.reshape(&[b, n, heads, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * heads, n, d])
}

fn merge_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Var<'g, T> {
    let s = x.shape();
    let (bh, n, d) = (s[0], s[1], s[2]);
    let b = bh / heads;
    x.reshape(&[b, heads, n, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, n, heads * d])
}

/// Multi-head scaled dot-product attention. `q: [b, n, c]`,
/// `k, v: [b, m, c]`. Returns the output `[b, n, c]` and the attention
/// weights `[b * heads, n, m]`.
pub fn attention<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
) -> (Var<'g, T>, Var<'g, T>) {
    let c = q.shape()[2];
    assert_eq!(c % heads, 0, "channels must divide into heads");
    let d = c / heads;
    let (qh, kh, vh) = (split_heads(q, heads), split_heads(k, heads), split_heads(v, heads));
    let scores = ops::matmul(qh, kh, false, true).scale(T::one() / T::of(d as f64).sqrt());
    let weights = scores.softmax();
    let out = ops::matmul(weights, vh, false, false);
    (merge_heads(out, heads), weights)
}

/// Zero-pads `[b, n, c]` along the sequence axis to a multiple of `ratio`,
/// then folds `ratio` consecutive tokens into one: `[b, n / ratio, c * ratio]`.
fn fold_sequence<'g, T: Scalar>(x: Var<'g, T>, ratio: usize) -> Var<'g, T> {
    let s = x.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    let padded = n.div_ceil(ratio) * ratio;
    let x = if padded == n {
        x
    } else {
        let zeros = x.graph().constant(Tensor::zeros(&[b, padded - n, c]));
        ops::concat(&[x, zeros], 1)
    };
    x.reshape(&[b, padded / ratio, c * ratio])
}

/// Sequence-reduced self-attention block with pre-normalization and a
/// residual connection.
#[derive(Clone, Debug)]
pub struct Esa {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    key_reduce: Linear,
    value_reduce: Linear,
    out: Linear,
    heads: usize,
    ratio: usize,
    channels: usize,
}

pub struct EsaTrace<'g, T: Scalar> {
    pub output: Var<'g, T>,
    pub attention: Var<'g, T>,
    /// Multiply-accumulates of the two attention products alone.
    pub attention_macs: u64,
}

impl Esa {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, cfg: &EsaConfig) -> Result<Self> {
        cfg.validate()?;
        let heads = cfg.heads_for(channels);
        if channels % heads != 0 {
            return Err(Error::config(
                "esa.head_count",
                format!("{channels} channels do not split into {heads} heads"),
            ));
        }
        let r = cfg.reduction_ratio;
        Ok(Self {
            norm: LayerNorm::new(&mut b.sub("norm"), channels),
            query: Linear::new(&mut b.sub("query"), channels, channels, true),
            key: Linear::new(&mut b.sub("key"), channels, channels, true),
            value: Linear::new(&mut b.sub("value"), channels, channels, true),
            key_reduce: Linear::new(&mut b.sub("key_reduce"), channels * r, channels, true),
            value_reduce: Linear::new(&mut b.sub("value_reduce"), channels * r, channels, true),
            out: Linear::new(&mut b.sub("out"), channels, channels, true),
            heads,
            ratio: r,
            channels,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Overwrites both reduction projections with the identity (zero bias);
    /// only meaningful when the reduction ratio is 1.
    pub fn set_identity_reduction<T: Scalar>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.ratio, 1, "identity reduction needs ratio 1");
        for lin in [&self.key_reduce, &self.value_reduce] {
            let c = self.channels;
            *store.param_mut(lin.weight) = Tensor::from_fn(&[c, c], |i| if i / c == i % c { T::one() } else { T::zero() });
            if let Some(b) = lin.bias {
                *store.param_mut(b) = Tensor::zeros(&[c]);
            }
        }
    }

    /// Token form: `x: [b, n, c] -> [b, n, c]`.
    pub fn forward_tokens<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> EsaTrace<'g, T> {
        let y = self.norm.forward(ctx, x);
        let q = self.query.forward(ctx, y);
        let k = self.key_reduce.forward(ctx, fold_sequence(self.key.forward(ctx, y), self.ratio));
        let v = self.value_reduce.forward(ctx, fold_sequence(self.value.forward(ctx, y), self.ratio));
        let before = ctx.graph().macs();
        let (att, weights) = attention(q, k, v, self.heads);
        let attention_macs = ctx.graph().macs() - before;
        EsaTrace {
            output: x.add(self.out.forward(ctx, att)),
            attention: weights,
            attention_macs,
        }
    }

    /// Image form: `x: [b, c, h, w] -> [b, c, h, w]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let s = x.shape();
        self.forward_tokens(ctx, x.to_tokens()).output.from_tokens(s[2], s[3])
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + [&self.query, &self.key, &self.value, &self.key_reduce, &self.value_reduce, &self.out]
                .iter()
                .map(|l| l.num_params())
                .sum::<usize>()
    }

    /// FLOPs of the projections plus `2 N (N/R) C` per attention product.
    pub fn flops(&self, tokens: usize) -> u64 {
        let c = self.channels as u64;
        let n = tokens as u64;
        let m = tokens.div_ceil(self.ratio) as u64;
        let projections = 2 * (4 * n * c * c + 2 * m * (c * self.ratio as u64) * c);
        projections + 2 * attention_product_macs(tokens, self.ratio, self.channels)
    }
}

/// Multiply-accumulates of one attention product (`Q K^T` or `A V`) for
/// `n` tokens of width `c` with keys reduced by `ratio`.
pub fn attention_product_macs(n: usize, ratio: usize, c: usize) -> u64 {
    (n * n.div_ceil(ratio) * c) as u64
}

#[derive(Clone, Debug)]
struct Level {
    fuse: Option<ConvBn>,
    msf: Option<Msf>,
    esa: Option<Esa>,
    head: Conv2d,
}

/// Which decoder blocks are present.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlocks {
    pub msf: bool,
    pub esa: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    levels: Vec<Level>,
    channels: [usize; 4],
}

/// Per-level change probabilities `p1..p4` (finest first), each
/// `[n, 1, H, W]` at input resolution.
pub struct PredictionVars<'g, T: Scalar>(pub [Var<'g, T>; 4]);

impl Decoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        channels: [usize; 4],
        msf: &MsfConfig,
        esa: &EsaConfig,
        blocks: DecoderBlocks,
    ) -> Result<Self> {
        msf.validate()?;
        esa.validate()?;
        let mut levels = Vec::with_capacity(4);
        for k in 1..=4 {
            let c = channels[k - 1];
            let mut lb = b.sub(format!("level{k}"));
            let fuse = (k < 4).then(|| ConvBn::new(&mut lb.sub("fuse"), channels[k] + c, c, 1, 1, true));
            let msf_block = blocks
                .msf
                .then(|| Msf::new(&mut lb.sub("msf"), c, msf.mid(k, c), msf.msf_literal_eq3));
            let esa_block = if blocks.esa {
                Some(Esa::new(&mut lb.sub("esa"), c, esa)?)
            } else {
                None
            };
            levels.push(Level {
                fuse,
                msf: msf_block,
                esa: esa_block,
                head: Conv2d::head(&mut lb.sub("head"), c, 1),
            });
        }
        Ok(Self { levels, channels })
    }

    pub fn esa(&self, level: usize) -> Option<&Esa> {
        self.levels[level - 1].esa.as_ref()
    }

    /// Decodes a difference pyramid into four probability maps at
    /// `out_h x out_w`.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        diff: &Pyramid<Var<'g, T>>,
        out_h: usize,
        out_w: usize,
    ) -> Result<PredictionVars<'g, T>> {
        for (k, d) in diff.iter().enumerate() {
            let s = d.shape();
            if s.len() != 4 || s[1] != self.channels[k] {
                return Err(Error::shape(
                    format!("decoder input level {}", k + 1),
                    &s,
                    &[s.first().copied().unwrap_or(0), self.channels[k]],
                ));
            }
        }
        let mut probs: Vec<Var<'g, T>> = Vec::with_capacity(4);
        let mut carry: Option<Var<'g, T>> = None;
        for k in (1..=4).rev() {
            let level = &self.levels[k - 1];
            let skip = *diff.level(k);
            let mut x = match (carry, &level.fuse) {
                (Some(coarse), Some(fuse)) => {
                    let up = coarse.upsample2();
                    if up.shape()[2..] != skip.shape()[2..] {
                        return Err(Error::shape(format!("decoder skip level {k}"), &up.shape(), &skip.shape()));
                    }
                    fuse.forward(ctx, ops::concat(&[up, skip], 1))
                }
                _ => skip,
            };
            if let Some(msf) = &level.msf {
                x = msf.forward(ctx, x);
            }
            if let Some(esa) = &level.esa {
                x = esa.forward(ctx, x);
            }
            let logits = level.head.forward(ctx, x).resize_bilinear(out_h, out_w);
            probs.push(logits.sigmoid());
            carry = Some(x);
        }
        probs.reverse();
        Ok(PredictionVars([probs[0], probs[1], probs[2], probs[3]]))
    }

    pub fn num_params(&self) -> usize {
        self.levels
            .iter()
            .map(|l| {
                l.fuse.as_ref().map_or(0, ConvBn::num_params)
                    + l.msf.as_ref().map_or(0, Msf::num_params)
                    + l.esa.as_ref().map_or(0, Esa::num_params)
                    + l.head.num_params()
            })
            .sum()
    }

    pub fn flops(&self, sizes: [(usize, usize); 4]) -> u64 {
        self.levels
            .iter()
            .zip(sizes)
            .map(|(l, (h, w))| {
                l.fuse.as_ref().map_or(0, |f| f.conv.flops(h, w))
                    + l.msf.as_ref().map_or(0, |m| m.flops(h, w))
                    + l.esa.as_ref().map_or(0, |e| e.flops(h * w))
                    + l.head.flops(h, w)
            })
            .sum()
    }
}

/// Evaluated predictions for a batch.
#[derive(Clone, Debug)]
pub struct PredictionSet<T> {
    /// `p1..p4`, each `[n, 1, H, W]`, finest first.
    pub probs: [Tensor<T>; 4],
    /// `p1 >= 0.5` per pixel, `[n, 1, H, W]` flattened, values 0 or 1.
    pub change_map: Vec<u8>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn from_probs(probs: [Tensor<T>; 4]) -> Self {
        let threshold = T::of(CHANGE_THRESHOLD);
        let change_map = probs[0].data().iter().map(|&p| u8::from(p >= threshold)).collect();
        Self { probs, change_map }
    }

    pub fn batch_size(&self) -> usize {
        self.probs[0].shape()[0]
    }

    /// Binary map of sample `i`.
    pub fn change_map_of(&self, i: usize) -> &[u8] {
        let per = self.probs[0].numel() / self.batch_size();
        &self.change_map[i * per..(i + 1) * per]
    }
}
