//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rctnet::graph::{Graph, Var};
use rctnet::nn::{Ctx, ParamStore, LN_EPS};
use rctnet::{ConfusionCounts, Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error `|a - n|_2 / max(|a|_2, |n|_2)` of one gradient tensor.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct GradReport {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input and every parameter (up to `max_per_tensor` entries each).
pub fn gradcheck(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    max_per_tensor: usize,
    f: &dyn for<'g> Fn(&Ctx<'g, '_, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
) -> Vec<GradReport> {
    const H: f64 = 1e-6;
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, true);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&ctx, &vars).value().item()
    };

    let (input_grads, param_grads) = {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, true);
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&ctx, &vars);
        let grads = g.backward(out);
        let ig: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        (ig, ctx.param_grads(&grads))
    };

    let pick = |n: usize| -> Vec<usize> {
        if n <= max_per_tensor {
            (0..n).collect()
        } else {
            let step = n as f64 / max_per_tensor as f64;
            (0..max_per_tensor).map(|i| (i as f64 * step) as usize).collect()
        }
    };

    let mut reports = Vec::new();
    let mut inputs = inputs.to_vec();
    for (t, analytic) in input_grads.iter().enumerate() {
        let idx = pick(inputs[t].numel());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + H;
            let up = eval(store, &inputs);
            inputs[t].data_mut()[i] = orig - H;
            let down = eval(store, &inputs);
            inputs[t].data_mut()[i] = orig;
            num.push((up - down) / (2.0 * H));
        }
        let ana: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        reports.push(GradReport {
            name: format!("input{t}"),
            rel_error: rel_error(&ana, &num),
            analytic_norm: l2(&ana),
            numeric_norm: l2(&num),
            checked: idx.len(),
        });
    }
    for (p, analytic) in param_grads.iter().enumerate() {
        let name = store.params()[p].name.clone();
        let n = store.params()[p].value.numel();
        let analytic = analytic.clone().unwrap_or_else(|| Tensor::zeros(&[n]));
        let idx = pick(n);
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.params()[p].value.data()[i];
            store.params_mut()[p].value.data_mut()[i] = orig + H;
            let up = eval(store, &inputs);
            store.params_mut()[p].value.data_mut()[i] = orig - H;
            let down = eval(store, &inputs);
            store.params_mut()[p].value.data_mut()[i] = orig;
            num.push((up - down) / (2.0 * H));
        }
        let ana: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        reports.push(GradReport {
            name,
            rel_error: rel_error(&ana, &num),
            analytic_norm: l2(&ana),
            numeric_norm: l2(&num),
            checked: idx.len(),
        });
    }
    reports
}

/// Sets every parameter to random values so biases and affine terms are
/// exercised too.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = T::of(rng.random_range(-scale..scale));
        }
    }
}

/// Shifts every batch-norm `beta` to be positive so the ReLU after it
/// passes part of the batch even on 1x1 maps.
pub fn keep_relus_alive<T: Scalar>(store: &mut ParamStore<T>) {
    for p in store.params_mut() {
        if p.name.ends_with("bn.beta") {
            for v in p.value.data_mut() {
                *v = T::of(v.as_f64().abs() + 0.5);
            }
        }
    }
}

/// The same parameters in double precision.
pub fn widen<T: Scalar>(store: &ParamStore<T>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for p in store.params() {
        out.add_param(p.name.clone(), p.value.cast());
    }
    out
}

pub fn param<'a, T: Scalar>(store: &'a ParamStore<T>, name: &str) -> &'a Tensor<T> {
    &store
        .params()
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
}

fn linear_rows(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|o| b.data()[o] + (0..fin).map(|i| w.data()[o * fin + i] * row[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Dense single-head self-attention block written out in loops:
/// `x + Wo softmax((LN(x) Wq)(LN(x) Wk)^T / sqrt(c)) (LN(x) Wv)` with the
/// key/value reduction maps applied after the key/value projections.
/// `prefix` names the block's parameters in `store`; `x` is `[n, c]` per
/// sample.
pub fn dense_attention_oracle(store: &ParamStore<f64>, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    let c = x[0].len();
    let (gamma, beta) = (p("norm.gamma"), p("norm.beta"));
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma.data()[j] * (v - mean) / (var + LN_EPS).sqrt() + beta.data()[j])
                .collect()
        })
        .collect();
    let q = linear_rows(&y, p("query.weight"), p("query.bias"));
    let k = linear_rows(
        &linear_rows(&y, p("key.weight"), p("key.bias")),
        p("key_reduce.weight"),
        p("key_reduce.bias"),
    );
    let v = linear_rows(
        &linear_rows(&y, p("value.weight"), p("value.bias")),
        p("value_reduce.weight"),
        p("value_reduce.bias"),
    );
    let scale = 1.0 / (c as f64).sqrt();
    let att: Vec<Vec<f64>> = q
        .iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..c).map(|ch| e.iter().zip(&v).map(|(w, vj)| w / z * vj[ch]).sum()).collect()
        })
        .collect();
    let o = linear_rows(&att, p("out.weight"), p("out.bias"));
    x.iter().zip(o).map(|(xi, oi)| xi.iter().zip(oi).map(|(a, b)| a + b).collect()).collect()
}

/// Mean clamped binary cross-entropy, one pixel at a time.
pub fn bce_oracle(p: &[f64], g: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        total += -(g[i] * q.ln() + (1.0 - g[i]) * (1.0 - q).ln());
    }
    total / p.len() as f64
}

/// Smoothed Dice loss of one sample, one pixel at a time.
pub fn dice_oracle(p: &[f64], g: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        inter += p[i] * g[i];
        sp += p[i].abs();
        sg += g[i].abs();
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Confusion counts by explicit enumeration of the four cases.
pub fn brute_force_counts(pred: &[u8], truth: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if pred[i] == 1 && truth[i] == 1 {
            c.tp += 1;
        } else if pred[i] == 0 && truth[i] == 0 {
            c.tn += 1;
        } else if pred[i] == 1 {
            c.fp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    c
}

/// Expected `[n, c, h, w]` of stage `k` (1-based) for an `s x s` input:
/// stem and every stage halve, so stage k sits at `s / 2^(k+1)`.
pub fn stage_shape(n: usize, c: usize, s: usize, k: usize) -> Vec<usize> {
    vec![n, c, s >> (k + 1), s >> (k + 1)]
}
