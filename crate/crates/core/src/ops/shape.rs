//! Layout operations: reshape, axis permutation and concatenation.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut index = vec![0usize; rank];
    let data = x.data();
    for _ in 0..x.numel() {
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute shape")
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x
            .as_ref()
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("reshape back"))]),
        )
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(perm.len(), x.shape().len(), "permute rank");
        let out = permute_data(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(permute_data(g, &inverse))]),
        )
    }

    /// Samples `start..start + len` along the leading axis.
    pub fn narrow_batch(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[0], "narrow_batch out of range");
        let per: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(&out_shape, x.data()[start * per..(start + len) * per].to_vec())
            .expect("narrow shape");
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                dx.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
                vec![Some(dx)]
            }),
        )
    }

    /// `[n, c, h, w] -> [n, h*w, c]`
    pub fn to_tokens(self) -> Var<'g, T> {
        let s = self.shape();
        self.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
    }

    /// `[n, h*w, c] -> [n, c, h, w]`
    pub fn from_tokens(self, h: usize, w: usize) -> Var<'g, T> {
        let s = self.shape();
        assert_eq!(s[1], h * w, "from_tokens length");
        self.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
    }
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
    let first = parts.first().expect("concat of nothing");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    assert!(axis < base.len(), "concat axis out of range");
    for v in &values {
        let s = v.shape();
        assert_eq!(s.len(), base.len(), "concat rank");
        for d in 0..base.len() {
            assert!(d == axis || s[d] == base[d], "concat extents differ: {base:?} vs {s:?}");
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &wd) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total / inner;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let out = Tensor::new(&shape, out).expect("concat shape");
    first.graph().op(
        out,
        parts,
        Box::new(move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &wd) in widths.iter().enumerate() {
                if need[i] {
                    let mut part = Vec::with_capacity(outer * wd);
                    for o in 0..outer {
                        let start = o * total + offset;
                        part.extend_from_slice(&gd[start..start + wd]);
                    }
                    grads.push(Some(Tensor::new(&shapes[i], part).expect("concat grad")));
                } else {
                    grads.push(None);
                }
                offset += wd;
            }
            grads
        }),
    )
}
