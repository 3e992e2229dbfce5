//! 2-D convolution lowered to matrix products (im2col).

use std::rc::Rc;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [n, cin, h, w]` with `weight: [cout, cin, k, k]`
/// plus an optional per-channel `bias: [cout]`.
pub fn conv2d<'g, T: Scalar>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
    stride: usize,
    padding: usize,
) -> Var<'g, T> {
    let xv = x.value();
    let wv = weight.value();
    let (n, cin, h, w) = xv.dims4();
    let ws = wv.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv2d: weight expects {} input channels, got {cin}", ws[1]);
    assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
    assert!(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d: input smaller than kernel");
    let geo = Geometry {
        cin,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: conv_out_size(h, k, stride, padding),
        wo: conv_out_size(w, k, stride, padding),
    };
    let (ck, hw) = (geo.col_rows(), geo.col_cols());
    let in_len = cin * h * w;
    let pointwise = geo.is_pointwise();

    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); n * ck * hw]
    };
    let mut out = vec![T::zero(); n * cout * hw];
    for s in 0..n {
        let xs = &xv.data()[s * in_len..(s + 1) * in_len];
        let col: &[T] = if pointwise {
            xs
        } else {
            let c = &mut cols[s * ck * hw..(s + 1) * ck * hw];
            im2col(xs, &geo, c);
            c
        };
        let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
        T::gemm(cout, ck, hw, T::one(), wv.data(), ck, 1, col, hw, 1, T::zero(), dst, hw, 1);
    }
    if let Some(b) = bias {
        let bv = b.value();
        assert_eq!(bv.shape(), &[cout], "conv2d bias shape");
        for s in 0..n {
            for (c, &bc) in bv.data().iter().enumerate() {
                let base = (s * cout + c) * hw;
                out[base..base + hw].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    x.graph().count_macs((n * cout * ck * hw) as u64);

    let out = Tensor::new(&[n, cout, geo.ho, geo.wo], out).expect("conv output shape");
    let cols = Rc::new(cols);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    x.graph().op(
        out,
        &parents,
        Box::new(move |dy, need| {
            let dyd = dy.data();
            let xd = xv.data();
            let wd = wv.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * in_len];
                let mut dcols = vec![T::zero(); if pointwise { 0 } else { ck * hw }];
                for s in 0..n {
                    let dys = &dyd[s * cout * hw..(s + 1) * cout * hw];
                    let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                    if pointwise {
                        T::gemm(ck, cout, hw, T::one(), wd, 1, ck, dys, hw, 1, T::zero(), dxs, hw, 1);
                    } else {
                        T::gemm(
                            ck,
                            cout,
                            hw,
                            T::one(),
                            wd,
                            1,
                            ck,
                            dys,
                            hw,
                            1,
                            T::zero(),
                            &mut dcols,
                            hw,
                            1,
                        );
                        col2im(&dcols, &geo, dxs);
                    }
                }
                Tensor::new(&[n, cin, h, w], dx).expect("dx shape")
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); cout * ck];
                for s in 0..n {
                    let dys = &dyd[s * cout * hw..(s + 1) * cout * hw];
                    let col = if pointwise {
                        &xd[s * in_len..(s + 1) * in_len]
                    } else {
                        &cols[s * ck * hw..(s + 1) * ck * hw]
                    };
                    T::gemm(cout, hw, ck, T::one(), dys, hw, 1, col, 1, hw, T::one(), &mut dw, ck, 1);
                }
                Tensor::new(&[cout, cin, k, k], dw).expect("dw shape")
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = need[2].then(|| {
                    Tensor::from_fn(&[cout], |c| {
                        (0..n).fold(T::zero(), |acc, s| {
                            let base = (s * cout + c) * hw;
                            dyd[base..base + hw].iter().fold(acc, |a, &v| a + v)
                        })
                    })
                });
                grads.push(db);
            }
            grads
        }),
    )
}
