//! Batch and layer normalization.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics measured on a training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var: Vec<T>,
}

/// Batch normalization over `(n, h, w)` of an NCHW tensor.
///
/// With `running = None` the batch's own statistics normalize the input
/// and are returned; otherwise the supplied `(mean, var)` are treated as
/// constants.
pub fn batch_norm<'g, T: Scalar>(
    x: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> (Var<'g, T>, Option<BatchStats<T>>) {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let hw = h * w;
    let m = n * hw;
    let xd = xv.data();
    let channel = move |ch: usize| (0..n).flat_map(move |s| ((s * c + ch) * hw)..((s * c + ch) * hw + hw));

    let mut stats = None;
    let (mean, var): (Vec<T>, Vec<T>) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let mf = T::of(m as f64);
            let mean: Vec<T> = (0..c)
                .map(|ch| channel(ch).fold(T::zero(), |a, i| a + xd[i]) / mf)
                .collect();
            let var: Vec<T> = (0..c)
                .map(|ch| {
                    channel(ch).fold(T::zero(), |a, i| {
                        let d = xd[i] - mean[ch];
                        a + d * d
                    }) / mf
                })
                .collect();
            let unbiased = if m > 1 {
                let f = T::of(m as f64 / (m - 1) as f64);
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            stats = Some(BatchStats {
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gv, bv) = (gamma.value(), beta.value());
    assert_eq!(gv.shape(), &[c], "batch_norm gamma shape");
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let (g, b) = (gv.data()[ch], bv.data()[ch]);
        for i in channel(ch) {
            let xh = (xd[i] - mean[ch]) * inv_std[ch];
            xhat[i] = xh;
            out[i] = g * xh + b;
        }
    }
    let shape = xv.shape().to_vec();
    let out = Tensor::new(&shape, out).expect("bn shape");
    let batch_mode = running.is_none();
    let y = x.graph().op(
        out,
        &[x, gamma, beta],
        Box::new(move |dy, need| {
            let dyd = dy.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); dyd.len()];
            let mf = T::of(m as f64);
            for ch in 0..c {
                let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
                for i in channel(ch) {
                    sum_dy += dyd[i];
                    sum_dy_xh += dyd[i] * xhat[i];
                }
                dgamma[ch] = sum_dy_xh;
                dbeta[ch] = sum_dy;
                if !need[0] {
                    continue;
                }
                let g = gv.data()[ch];
                let scale = g * inv_std[ch];
                if batch_mode {
                    for i in channel(ch) {
                        dx[i] = scale / mf * (mf * dyd[i] - sum_dy - xhat[i] * sum_dy_xh);
                    }
                } else {
                    for i in channel(ch) {
                        dx[i] = scale * dyd[i];
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(&shape, dx).expect("dx")),
                need[1].then(|| Tensor::new(&[c], dgamma).expect("dgamma")),
                need[2].then(|| Tensor::new(&[c], dbeta).expect("dbeta")),
            ]
        }),
    );
    (y, stats)
}

/// Layer normalization over the last axis.
pub fn layer_norm<'g, T: Scalar>(x: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let width = *shape.last().expect("layer_norm on scalar");
    let (gv, bv) = (gamma.value(), beta.value());
    assert_eq!(gv.shape(), &[width], "layer_norm gamma shape");
    let wf = T::of(width as f64);
    let rows = xv.numel() / width;
    let mut xhat = vec![T::zero(); xv.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xv.numel()];
    for (r, row) in xv.data().chunks(width).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / wf;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / wf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat[r * width + j] = xh;
            out[r * width + j] = gv.data()[j] * xh + bv.data()[j];
        }
    }
    let out = Tensor::new(&shape, out).expect("ln shape");
    x.graph().op(
        out,
        &[x, gamma, beta],
        Box::new(move |dy, need| {
            let dyd = dy.data();
            let mut dgamma = vec![T::zero(); width];
            let mut dbeta = vec![T::zero(); width];
            let mut dx = vec![T::zero(); dyd.len()];
            for r in 0..rows {
                let span = r * width..(r + 1) * width;
                let (dyr, xhr) = (&dyd[span.clone()], &xhat[span.clone()]);
                let (mut sum_d, mut sum_dxh) = (T::zero(), T::zero());
                for j in 0..width {
                    dgamma[j] += dyr[j] * xhr[j];
                    dbeta[j] += dyr[j];
                    let d = dyr[j] * gv.data()[j];
                    sum_d += d;
                    sum_dxh += d * xhr[j];
                }
                if need[0] {
                    let dxr = &mut dx[span];
                    for j in 0..width {
                        let d = dyr[j] * gv.data()[j];
                        dxr[j] = inv_std[r] / wf * (wf * d - sum_d - xhr[j] * sum_dxh);
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(&shape, dx).expect("dx")),
                need[1].then(|| Tensor::new(&[width], dgamma).expect("dgamma")),
                need[2].then(|| Tensor::new(&[width], dbeta).expect("dbeta")),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 1.3).sin() * 4.0 + 1.0));
        let (y, stats) = batch_norm(
            x,
            g.constant(Tensor::ones(&[3])),
            g.constant(Tensor::zeros(&[3])),
            None,
            1e-12,
        );
        let yv = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| yv.data()[(s * 3 + ch) * 4..(s * 3 + ch) * 4 + 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.unwrap().mean.len(), 3);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[4, 6], |i| i as f64 * i as f64));
        let y = layer_norm(x, g.constant(Tensor::ones(&[6])), g.constant(Tensor::zeros(&[6])), 0.0);
        for row in y.value().data().chunks(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
