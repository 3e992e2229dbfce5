//! Spatial resampling: max pooling and bilinear resizing.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "max_pool2 on {h}x{w} input");
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(&[n, c, ho, wo], out).expect("pool shape");
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dxd[src] += d;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Bilinear resize of an NCHW tensor with half-pixel centres
    /// (`align_corners = false`).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let ys = axis_taps::<T>(h, out_h);
        let xs = axis_taps::<T>(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, ty) in ys.iter().enumerate() {
                let r0 = &src[ty.i0 * w..(ty.i0 + 1) * w];
                let r1 = &src[ty.i1 * w..(ty.i1 + 1) * w];
                for (ox, tx) in xs.iter().enumerate() {
                    let top = r0[tx.i0] * tx.w0 + r0[tx.i1] * tx.w1;
                    let bot = r1[tx.i0] * tx.w0 + r1[tx.i1] * tx.w1;
                    dst[oy * out_w + ox] = top * ty.w0 + bot * ty.w1;
                }
            }
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out).expect("resize shape");
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                let gd = g.data();
                for plane in 0..n * c {
                    let src = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, ty) in ys.iter().enumerate() {
                        for (ox, tx) in xs.iter().enumerate() {
                            let d = src[oy * out_w + ox];
                            let (a, b) = (d * ty.w0, d * ty.w1);
                            dst[ty.i0 * w + tx.i0] += a * tx.w0;
                            dst[ty.i0 * w + tx.i1] += a * tx.w1;
                            dst[ty.i1 * w + tx.i0] += b * tx.w0;
                            dst[ty.i1 * w + tx.i1] += b * tx.w1;
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx).expect("dx shape"))]
            }),
        )
    }

    /// Bilinear 2x upsampling.
    pub fn upsample2(self) -> Var<'g, T> {
        let s = self.shape();
        self.resize_bilinear(2 * s[2], 2 * s[3])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Source indices and weights for every output coordinate along one axis.
pub(crate) fn axis_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::of(1.0 - frac),
                w1: T::of(frac),
            }
        })
        .collect()
}
