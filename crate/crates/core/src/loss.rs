//! Hybrid BCE + Dice loss with deep supervision.

use serde::{Deserialize, Serialize};

use crate::decoder::PredictionVars;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce_per_stage: [f64; 4],
    pub dice_per_stage: [f64; 4],
    pub total: f64,
}

fn check_target<T: Scalar>(what: &str, p: &[usize], g: &Tensor<T>) -> Result<()> {
    if p != g.shape() {
        return Err(Error::shape(what, p, g.shape()));
    }
    if let Some(v) = g.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidInput(format!("{what}: ground truth value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy `-[g log p + (1 - g) log(1 - p)]` over all
/// elements.
///
/// The backward pass evaluates the derivative at the clamped probability
/// and passes it through the clamp, so saturated predictions keep a
/// gradient.
pub fn bce_loss<'g, T: Scalar>(p: Var<'g, T>, g: &Tensor<T>) -> Result<Var<'g, T>> {
    let pv = p.value();
    check_target("bce_loss", pv.shape(), g)?;
    let (lo, hi) = (T::of(PROB_EPS), T::one() - T::of(PROB_EPS));
    let clamped = pv.map(|x| x.max(lo).min(hi));
    let n = T::of(pv.numel() as f64);
    let total = clamped
        .data()
        .iter()
        .zip(g.data())
        .fold(T::zero(), |acc, (&pc, &t)| acc - (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln()));
    let target = g.clone();
    Ok(p.graph().op(
        Tensor::scalar(total / n),
        &[p],
        Box::new(move |dy, _| {
            let scale = dy.item() / n;
            vec![Some(clamped.zip_map(&target, |pc, t| {
                scale * ((T::one() - t) / (T::one() - pc) - t / pc)
            }))]
        }),
    ))
}

/// `1 - (2 sum(p g) + s) / (|p|_1 + |g|_1 + s)` per sample, averaged over
/// the leading (batch) axis.
pub fn dice_loss<'g, T: Scalar>(p: Var<'g, T>, g: &Tensor<T>) -> Result<Var<'g, T>> {
    let pv = p.value();
    check_target("dice_loss", pv.shape(), g)?;
    let batch = if pv.shape().is_empty() { 1 } else { pv.shape()[0] };
    let per = pv.numel() / batch.max(1);
    let s = T::of(DICE_SMOOTH);
    let two = T::of(2.0);
    // (intersection, denominator) per sample
    let parts: Vec<(T, T)> = pv
        .data()
        .chunks(per.max(1))
        .zip(g.data().chunks(per.max(1)))
        .map(|(ps, gs)| {
            let inter = ps.iter().zip(gs).fold(T::zero(), |a, (&x, &t)| a + x * t);
            let l1 = ps.iter().fold(T::zero(), |a, &x| a + x.abs()) + gs.iter().fold(T::zero(), |a, &t| a + t);
            (inter, l1 + s)
        })
        .collect();
    let bf = T::of(parts.len() as f64);
    let loss = parts
        .iter()
        .fold(T::zero(), |a, &(i, d)| a + (T::one() - (two * i + s) / d))
        / bf;
    let target = g.clone();
    let shape = pv.shape().to_vec();
    Ok(p.graph().op(
        Tensor::scalar(loss),
        &[p],
        Box::new(move |dy, _| {
            let scale = dy.item() / bf;
            let mut grad = Vec::with_capacity(pv.numel());
            for ((ps, gs), &(inter, den)) in pv.data().chunks(per.max(1)).zip(target.data().chunks(per.max(1))).zip(&parts) {
                let num = two * inter + s;
                for (&x, &t) in ps.iter().zip(gs) {
                    let dl1 = x.signum();
                    grad.push(-scale * (two * t * den - num * dl1) / (den * den));
                }
            }
            vec![Some(Tensor::new(&shape, grad).expect("dice grad"))]
        }),
    ))
}

/// Sum of BCE and Dice over all four stage predictions against one target.
pub fn total_loss<'g, T: Scalar>(preds: &PredictionVars<'g, T>, g: &Tensor<T>) -> Result<(Var<'g, T>, LossReport)> {
    let mut bce = [0.0; 4];
    let mut dice = [0.0; 4];
    let mut total: Option<Var<'g, T>> = None;
    for (i, &p) in preds.0.iter().enumerate() {
        let lb = bce_loss(p, g)?;
        let ld = dice_loss(p, g)?;
        bce[i] = lb.value().item().as_f64();
        dice[i] = ld.value().item().as_f64();
        let term = lb.add(ld);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let total = total.expect("four stages");
    let report = LossReport {
        bce_per_stage: bce,
        dice_per_stage: dice,
        total: total.value().item().as_f64(),
    };
    Ok((total, report))
}
