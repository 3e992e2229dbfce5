//! Cross-stage aggregation and the bitemporal difference.
//!
//! Branch `k` resamples all four backbone stages to stage `k`'s
//! resolution, concatenates them, and fuses the result with a pointwise
//! projection of `f_k` through a channel-affinity matrix product:
//!
//! ```text
//! V = project_1x1(f_k)                       (N x C)
//! G = ConvBnReLU_3x3(Cat(d1, d2, d3, d4))    (N x C)
//! c_k = V (G^T G) / N  ==  (V G^T) G / N
//! ```
//!
//! The right-hand form is the N x N spatial-affinity product; the left-hand
//! form is evaluated because it costs `O(N C^2)` instead of `O(N^2 C)`.

use serde::{Deserialize, Serialize};

use crate::backbone::Pyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Conv2d, ConvBn, Ctx, ParamStore};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// CSA outputs `c1..c4`, one per stage.
pub type AggregatedPyramid<T> = Pyramid<Tensor<T>>;
/// `|c_k(t1) - c_k(t2)|` per stage.
pub type DifferencePyramid<T> = Pyramid<Tensor<T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsaBranchConfig {
    /// 1-based stage this branch produces.
    pub branch_index: usize,
    /// Channels of each source stage after alignment, finest first.
    pub aligned_channels: Vec<usize>,
    /// Output channels; the backbone's width at this stage when absent.
    #[serde(default)]
    pub out_channels: Option<usize>,
}

impl CsaBranchConfig {
    /// 64 channels for the branch's own stage, halving per octave of
    /// distance with a floor of 16. Branch 2 gives `[32, 64, 32, 16]`.
    pub fn peaked(branch_index: usize) -> Self {
        let aligned_channels = (1..=4)
            .map(|j: usize| (64usize >> j.abs_diff(branch_index)).max(16))
            .collect();
        Self {
            branch_index,
            aligned_channels,
            out_channels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsaConfig {
    pub branches: Vec<CsaBranchConfig>,
}

impl Default for CsaConfig {
    fn default() -> Self {
        Self {
            branches: (1..=4).map(CsaBranchConfig::peaked).collect(),
        }
    }
}

impl CsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != 4 {
            return Err(Error::config(
                "csa.branches",
                format!("expected 4 branches, got {}", self.branches.len()),
            ));
        }
        for (i, b) in self.branches.iter().enumerate() {
            let field = format!("csa.branches[{i}]");
            if b.branch_index != i + 1 {
                return Err(Error::config(
                    format!("{field}.branch_index"),
                    format!("expected {}, got {}", i + 1, b.branch_index),
                ));
            }
            if b.aligned_channels.len() != 4 || b.aligned_channels.contains(&0) {
                return Err(Error::config(
                    format!("{field}.aligned_channels"),
                    "needs 4 positive channel counts",
                ));
            }
            if b.out_channels == Some(0) {
                return Err(Error::config(format!("{field}.out_channels"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Resamples one source stage to a target stage's resolution and width.
#[derive(Clone, Debug)]
pub struct Align {
    conv: Conv2d,
    pools: usize,
    ups: usize,
}

impl Align {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        source_stage: usize,
        target_stage: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(b, in_channels, out_channels, 3, 1, true),
            pools: target_stage.saturating_sub(source_stage),
            ups: source_stage.saturating_sub(target_stage),
        }
    }

    /// Finer sources: max-pool per octave, then 3x3 conv. Coarser sources:
    /// 3x3 conv, then one bilinear 2x upsample per octave.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for _ in 0..self.pools {
            h = h.max_pool2();
        }
        h = self.conv.forward(ctx, h);
        for _ in 0..self.ups {
            h = h.upsample2();
        }
        h
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct CsaBranch {
    stage: usize,
    in_channels: [usize; 4],
    aligns: Vec<Align>,
    fuse: ConvBn,
    project: Conv2d,
}

impl CsaBranch {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &CsaBranchConfig, stage_channels: [usize; 4]) -> Self {
        let k = cfg.branch_index;
        let out = cfg.out_channels.unwrap_or(stage_channels[k - 1]);
        let aligns = (1..=4)
            .map(|j| {
                Align::new(
                    &mut b.sub(format!("align{j}")),
                    j,
                    k,
                    stage_channels[j - 1],
                    cfg.aligned_channels[j - 1],
                )
            })
            .collect();
        let concat: usize = cfg.aligned_channels.iter().sum();
        Self {
            stage: k,
            in_channels: stage_channels,
            aligns,
            fuse: ConvBn::new(&mut b.sub("fuse"), concat, out, 3, 1, true),
            project: Conv2d::new(&mut b.sub("project"), stage_channels[k - 1], out, 1, 1, true),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.project.out_channels
    }

    /// Total channels entering the fusion convolution.
    pub fn concat_channels(&self) -> usize {
        self.aligns.iter().map(Align::out_channels).sum()
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, pyramid: &Pyramid<Var<'g, T>>) -> Result<Var<'g, T>> {
        for (j, f) in pyramid.iter().enumerate() {
            let s = f.shape();
            if s.len() != 4 || s[1] != self.in_channels[j] {
                return Err(Error::shape(
                    format!("csa branch {} input f{}", self.stage, j + 1),
                    &s,
                    &[s.first().copied().unwrap_or(0), self.in_channels[j]],
                ));
            }
        }
        let own = pyramid.level(self.stage);
        let (h, w) = (own.shape()[2], own.shape()[3]);
        let aligned: Vec<Var<'g, T>> = self
            .aligns
            .iter()
            .zip(pyramid.iter())
            .map(|(a, &f)| a.forward(ctx, f))
            .collect();
        for (j, a) in aligned.iter().enumerate() {
            let s = a.shape();
            if s[2] != h || s[3] != w {
                return Err(Error::shape(
                    format!("csa branch {} aligned d{}", self.stage, j + 1),
                    &s[2..],
                    &[h, w],
                ));
            }
        }
        let g = self.fuse.forward(ctx, ops::concat(&aligned, 1));
        let v = self.project.forward(ctx, *own);
        Ok(affinity_fusion(v, g))
    }

    pub fn num_params(&self) -> usize {
        self.aligns.iter().map(|a| a.conv.num_params()).sum::<usize>()
            + self.fuse.num_params()
            + self.project.num_params()
    }

    /// FLOPs for stage sizes `sizes[j] = (h_j, w_j)`: convolutions plus
    /// the two matrix products of the fusion.
    pub fn flops(&self, sizes: [(usize, usize); 4]) -> u64 {
        let (h, w) = sizes[self.stage - 1];
        let mut total = 0;
        for (j, a) in self.aligns.iter().enumerate() {
            let (sh, sw) = sizes[j];
            let (ch, cw) = if a.pools > 0 { (h, w) } else { (sh, sw) };
            total += a.conv.flops(ch, cw);
        }
        total += self.fuse.conv.flops(h, w) + self.project.flops(h, w);
        let (n, c) = ((h * w) as u64, self.out_channels() as u64);
        // G^T G and V (G^T G)
        total + 2 * n * c * c * 2
    }
}

/// `V (G^T G) / N` for NCHW tensors `v`, `g` of identical shape.
pub fn affinity_fusion<'g, T: Scalar>(v: Var<'g, T>, g: Var<'g, T>) -> Var<'g, T> {
    let s = v.shape();
    assert_eq!(s, g.shape(), "affinity fusion operands");
    let (h, w) = (s[2], s[3]);
    let n = T::of((h * w) as f64);
    let (vt, gt) = (v.to_tokens(), g.to_tokens());
    let gram = ops::matmul(gt, gt, true, false).scale(T::one() / n);
    ops::matmul(vt, gram, false, false).from_tokens(h, w)
}

#[derive(Clone, Debug)]
pub struct Csa {
    branches: Vec<CsaBranch>,
}

impl Csa {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &CsaConfig, stage_channels: [usize; 4]) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .branches
            .iter()
            .map(|bc| CsaBranch::new(&mut b.sub(format!("branch{}", bc.branch_index)), bc, stage_channels))
            .collect();
        Ok(Self { branches })
    }

    pub fn branch(&self, stage: usize) -> &CsaBranch {
        &self.branches[stage - 1]
    }

    pub fn out_channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.branches[i].out_channels())
    }

    /// Applies the four branches to one (possibly batched) pyramid.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        pyramid: &Pyramid<Var<'g, T>>,
    ) -> Result<Pyramid<Var<'g, T>>> {
        let c1 = self.branches[0].forward(ctx, pyramid)?;
        let c2 = self.branches[1].forward(ctx, pyramid)?;
        let c3 = self.branches[2].forward(ctx, pyramid)?;
        let c4 = self.branches[3].forward(ctx, pyramid)?;
        Ok(Pyramid([c1, c2, c3, c4]))
    }

    /// Both images' pyramids through the same branch parameters.
    pub fn forward_pair<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        a: &Pyramid<Var<'g, T>>,
        b: &Pyramid<Var<'g, T>>,
    ) -> Result<(Pyramid<Var<'g, T>>, Pyramid<Var<'g, T>>)> {
        for k in 0..4 {
            let (sa, sb) = (a.0[k].shape(), b.0[k].shape());
            if sa != sb {
                return Err(Error::shape(format!("pyramid level {}", k + 1), &sa, &sb));
            }
        }
        let n = a.0[0].shape()[0];
        let joined = Pyramid([0, 1, 2, 3].map(|k| ops::concat(&[a.0[k], b.0[k]], 0)));
        let out = self.forward(ctx, &joined)?;
        Ok((out.map(|v| v.narrow_batch(0, n)), out.map(|v| v.narrow_batch(n, n))))
    }

    /// Evaluation-mode aggregation of two feature pyramids.
    pub fn aggregate_pair<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        a: &Pyramid<Tensor<T>>,
        b: &Pyramid<Tensor<T>>,
    ) -> Result<(AggregatedPyramid<T>, AggregatedPyramid<T>)> {
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, store, false);
        let (ca, cb) = self.forward_pair(
            &ctx,
            &a.map(|t| graph.constant(t.clone())),
            &b.map(|t| graph.constant(t.clone())),
        )?;
        Ok((ca.map(|v| v.value().as_ref().clone()), cb.map(|v| v.value().as_ref().clone())))
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(CsaBranch::num_params).sum()
    }

    pub fn flops(&self, sizes: [(usize, usize); 4]) -> u64 {
        self.branches.iter().map(|b| b.flops(sizes)).sum()
    }
}

/// `|a_k - b_k|` per stage.
pub fn temporal_difference_vars<'g, T: Scalar>(
    a: &Pyramid<Var<'g, T>>,
    b: &Pyramid<Var<'g, T>>,
) -> Result<Pyramid<Var<'g, T>>> {
    for k in 0..4 {
        let (sa, sb) = (a.0[k].shape(), b.0[k].shape());
        if sa != sb {
            return Err(Error::shape(format!("temporal difference level {}", k + 1), &sa, &sb));
        }
    }
    Ok(Pyramid([0, 1, 2, 3].map(|k| a.0[k].abs_diff(b.0[k]))))
}

/// `|a_k - b_k|` per stage on plain tensors.
pub fn temporal_difference<T: Scalar>(
    a: &AggregatedPyramid<T>,
    b: &AggregatedPyramid<T>,
) -> Result<DifferencePyramid<T>> {
    let mut out = Vec::with_capacity(4);
    for (k, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                format!("temporal difference level {}", k + 1),
                x.shape(),
                y.shape(),
            ));
        }
        out.push(x.zip_map(y, |p, q| (p - q).abs()));
    }
    let [d1, d2, d3, d4]: [Tensor<T>; 4] = out.try_into().expect("four levels");
    Ok(Pyramid([d1, d2, d3, d4]))
}
