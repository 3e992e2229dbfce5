//! Parameter storage and the layers the network is assembled from.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::ops::{self, BatchStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Named<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Every trainable tensor and every non-trainable state tensor (running
/// normalization statistics) of a model, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.params.push(Named { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, value: Tensor<T>) -> BufferId {
        self.buffers.push(Named { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        let m = T::of(BN_MOMENTUM);
        for u in updates {
            for (id, fresh) in [(u.mean, u.stats.mean), (u.var, u.stats.var)] {
                for (r, f) in self.buffers[id.0].value.data_mut().iter_mut().zip(fresh) {
                    *r = (T::one() - m) * *r + m * f;
                }
            }
        }
    }
}

/// Batch statistics destined for a pair of running-stat buffers.
pub struct StatUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

/// Creates named parameters under a hierarchical prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn param(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.path(leaf);
        self.store.add_param(name, value)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> BufferId {
        let name = self.path(leaf);
        self.store.add_buffer(name, value)
    }

    pub fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::randn(shape, std, self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// One forward pass: binds stored parameters to graph leaves and collects
/// running-statistic updates.
pub struct Ctx<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    train: bool,
    leaves: RefCell<Vec<Option<Var<'g, T>>>>,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'g, 's, T: Scalar> Ctx<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            leaves: RefCell::new(vec![None; store.params.len()]),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// The graph leaf of a parameter; repeated uses share one leaf, so
    /// gradients from every use accumulate into it.
    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.0].get_or_insert_with(|| self.graph.leaf(self.store.param(id).clone()))
    }

    /// Gradient of every stored parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `kernel x kernel` convolution with "same" padding before stride.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        // Kaiming normal, fan-out mode
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        Self::with_std(b, cin, cout, kernel, stride, bias, std)
    }

    /// 1x1 output projection with weights of std `sqrt(1 / cin)`, so
    /// logits start near unit scale.
    pub fn head<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        Self::with_std(b, cin, cout, 1, 1, true, (1.0 / cin as f64).sqrt())
    }

    pub fn with_std<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = b.randn(&[cout, cin, kernel, kernel], std);
        let weight = b.param("weight", w);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ops::conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            ops::conv_out_size(h, self.kernel, self.stride, self.padding),
            ops::conv_out_size(w, self.kernel, self.stride, self.padding),
        )
    }

    pub fn num_params(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
            + self.bias.map_or(0, |_| self.out_channels)
    }

    /// `2 K^2 Cin Cout H W` over the output extent.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        2 * (self.kernel * self.kernel * self.in_channels * self.out_channels * out_h * out_w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.param("gamma", Tensor::ones(&[channels])),
            beta: b.param("beta", Tensor::zeros(&[channels])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ops::batch_norm(x, gamma, beta, None, T::of(BN_EPS));
            ctx.updates.borrow_mut().push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: stats.expect("batch mode returns statistics"),
            });
            y
        } else {
            let mean = ctx.store.buffer(self.running_mean).data();
            let var = ctx.store.buffer(self.running_var).data();
            ops::batch_norm(x, gamma, beta, Some((mean, var)), T::of(BN_EPS)).0
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution (no bias) followed by batch norm and optionally ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: Conv2d::new(&mut b.sub("conv"), cin, cout, kernel, stride, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), cout),
            relu,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x));
        if self.relu {
            y.relu()
        } else {
            y
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, fin: usize, fout: usize, bias: bool) -> Self {
        let w = b.randn(&[fout, fin], (1.0 / fin as f64).sqrt());
        Self::with_weight(b, w, bias)
    }

    /// A linear map with the given `[out, in]` weight matrix.
    pub fn with_weight<T: Scalar>(b: &mut Builder<'_, T>, weight: Tensor<T>, bias: bool) -> Self {
        let (fout, fin) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: b.param("weight", weight),
            bias: bias.then(|| b.param("bias", Tensor::zeros(&[fout]))),
            in_features: fin,
            out_features: fout,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        ops::linear(x, ctx.param(self.weight), self.bias.map(|id| ctx.param(id)))
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, width: usize) -> Self {
        Self {
            gamma: b.param("gamma", Tensor::ones(&[width])),
            beta: b.param("beta", Tensor::zeros(&[width])),
            width,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        ops::layer_norm(x, ctx.param(self.gamma), ctx.param(self.beta), T::of(LN_EPS))
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_param_count_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut Builder::new(&mut store, &mut rng), 3, 16, 3, 1, true);
        assert_eq!(conv.num_params(), 448);
        assert_eq!(store.num_params(), 448);
        assert_eq!(conv.flops(256, 256), 2 * 9 * 3 * 16 * 256 * 256);
    }

    #[test]
    fn names_are_hierarchical() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        ConvBn::new(&mut b.sub("stem"), 3, 8, 3, 2, true);
        let names: Vec<_> = store.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["stem.conv.weight", "stem.bn.gamma", "stem.bn.beta"]);
        assert_eq!(store.buffers()[0].name, "stem.bn.running_mean");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm2d::new(&mut Builder::new(&mut store, &mut rng), 1);
        let graph = Graph::new();
        let updates = {
            let ctx = Ctx::new(&graph, &store, true);
            let x = graph.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
            bn.forward(&ctx, x);
            ctx.take_stat_updates()
        };
        store.apply_stat_updates(updates);
        assert!((store.buffer(bn.running_mean).item() - 0.2).abs() < 1e-12);
        // unbiased variance of [1, 3] is 2
        assert!((store.buffer(bn.running_var).item() - (0.9 + 0.2)).abs() < 1e-12);
    }
}
