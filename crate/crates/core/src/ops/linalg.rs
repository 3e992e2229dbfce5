//! Matrix products, affine maps and softmax.

use std::rc::Rc;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strides of a logical `rows x cols` operand stored either as is or
/// transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, rows)
    } else {
        (cols, 1)
    }
}

/// Batched product `op(a) op(b)` of rank-3 tensors, where `op` optionally
/// transposes the last two axes.
pub fn matmul<'g, T: Scalar>(
    a: Var<'g, T>,
    b: Var<'g, T>,
    transpose_a: bool,
    transpose_b: bool,
) -> Var<'g, T> {
    let (av, bv) = (a.value(), b.value());
    let (sa, sb) = (av.shape(), bv.shape());
    assert!(sa.len() == 3 && sb.len() == 3, "matmul expects rank-3 operands");
    assert_eq!(sa[0], sb[0], "matmul batch sizes differ");
    let batch = sa[0];
    let (m, k) = if transpose_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (k2, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {sa:?} x {sb:?}");

    let (rsa, csa) = strides(m, k, transpose_a);
    let (rsb, csb) = strides(k, n, transpose_b);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &av.data()[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &bv.data()[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    a.graph().count_macs((batch * m * k * n) as u64);
    let out = Tensor::new(&[batch, m, n], out).expect("matmul shape");
    let (shape_a, shape_b) = (sa.to_vec(), sb.to_vec());
    a.graph().op(
        out,
        &[a, b],
        Box::new(move |dc, need| {
            let dcd = dc.data();
            // d op(a) = dc op(b)^T, written back through op's layout
            let da = need[0].then(|| {
                let mut da = vec![T::zero(); batch * m * k];
                let (rsd, csd) = strides(m, k, transpose_a);
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &dcd[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        csb,
                        rsb,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        rsd,
                        csd,
                    );
                }
                Tensor::new(&shape_a, da).expect("da shape")
            });
            // d op(b) = op(a)^T dc
            let db = need[1].then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                let (rsd, csd) = strides(k, n, transpose_b);
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..(i + 1) * m * k],
                        csa,
                        rsa,
                        &dcd[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                        rsd,
                        csd,
                    );
                }
                Tensor::new(&shape_b, db).expect("db shape")
            });
            vec![da, db]
        }),
    )
}

/// Affine map over the last axis: `x W^T + b` with `weight: [out, in]`.
pub fn linear<'g, T: Scalar>(x: Var<'g, T>, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
    let (xv, wv) = (x.value(), weight.value());
    let xs = xv.shape().to_vec();
    let ws = wv.shape();
    assert_eq!(ws.len(), 2, "linear weight must be rank 2");
    let (fout, fin) = (ws[0], ws[1]);
    assert_eq!(*xs.last().expect("linear on scalar"), fin, "linear input width");
    let rows = xv.numel() / fin;
    let mut out = vec![T::zero(); rows * fout];
    T::gemm(rows, fin, fout, T::one(), xv.data(), fin, 1, wv.data(), 1, fin, T::zero(), &mut out, fout, 1);
    if let Some(b) = bias {
        let bv = b.value();
        assert_eq!(bv.shape(), &[fout], "linear bias shape");
        for row in out.chunks_mut(fout) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
    }
    x.graph().count_macs((rows * fin * fout) as u64);
    let mut out_shape = xs.clone();
    *out_shape.last_mut().expect("rank >= 1") = fout;
    let out = Tensor::new(&out_shape, out).expect("linear shape");
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    x.graph().op(
        out,
        &parents,
        Box::new(move |dy, need| {
            let dyd = dy.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); rows * fin];
                T::gemm(rows, fout, fin, T::one(), dyd, fout, 1, wv.data(), fin, 1, T::zero(), &mut dx, fin, 1);
                Tensor::new(&xs, dx).expect("dx shape")
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); fout * fin];
                T::gemm(fout, rows, fin, T::one(), dyd, 1, fout, xv.data(), fin, 1, T::zero(), &mut dw, fin, 1);
                Tensor::new(&[fout, fin], dw).expect("dw shape")
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut db = vec![T::zero(); fout];
                    for row in dyd.chunks(fout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(&[fout], db).expect("db shape")
                }));
            }
            grads
        }),
    )
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let width = *x.shape().last().expect("softmax on scalar");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(width) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        self.graph().op_shared(
            out,
            &[self],
            Box::new(move |dy, _| {
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                    let dot = drow.iter().zip(yrow).fold(T::zero(), |a, (&d, &p)| a + d * p);
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}
