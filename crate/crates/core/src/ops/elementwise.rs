use std::rc::Rc;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b);
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b);
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b);
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |d, y| d * y)),
                    need[1].then(|| g.zip_map(&a, |d, x| d * x)),
                ]
            }),
        )
    }

    /// `|self - other|` element-wise. The value is bitwise symmetric in its
    /// operands because IEEE subtraction satisfies `a - b == -(b - a)`.
    pub fn abs_diff(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape("abs_diff", &a, &b);
        let out = a.zip_map(&b, |x, y| (x - y).abs());
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                // d|a-b|/da = sign(a-b), zero at a == b
                let sign = a.zip_map(&b, |x, y| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                let ga = g.zip_map(&sign, |d, s| d * s);
                let gb = need[1].then(|| ga.map(|x| -x));
                vec![need[0].then_some(ga), gb]
            }),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        let out = Rc::new(self.value().map(|x| x.max(T::zero())));
        let y = Rc::clone(&out);
        self.graph().op_shared(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&y, |d, v| if v > T::zero() { d } else { T::zero() }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = Rc::new(self.value().map(sigmoid));
        let y = Rc::clone(&out);
        self.graph().op_shared(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)))]),
        )
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let out = self.value().map(|x| x * factor);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|d| d * factor))]),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `sum(self * weights)` for a constant weight tensor.
    pub fn weighted_sum(self, weights: &Tensor<T>) -> Var<'g, T> {
        let x = self.value();
        same_shape("weighted_sum", &x, weights);
        let out = Tensor::scalar(
            x.data()
                .iter()
                .zip(weights.data())
                .fold(T::zero(), |acc, (&a, &w)| acc + a * w),
        );
        let w = weights.clone();
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let d = g.item();
                vec![Some(w.map(|v| v * d))]
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
