//! Primitive differentiable operations.
//!
//! Every method appends one node to the tape. Backward closures capture only
//! small op metadata; parent values are read back from the tape.

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::conv::{conv2d_backward, conv2d_forward, conv2d_output_size, Pad};
use super::param::Param;
use super::tape::Tensor;
use super::{cst, Scalar};

fn unop<F: Scalar>(
    t: Tensor<'_, F>,
    value: ArrayD<F>,
    dfn: impl Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
) -> Tensor<'_, F> {
    t.tape.apply(
        value,
        vec![t.id],
        Box::new(move |ctx| vec![Some(dfn(ctx.grad, &ctx.parents[0], ctx.output))]),
    )
}

impl<'g, F: Scalar> Tensor<'g, F> {
    // ---- elementwise binary ----

    pub fn add(self, other: Tensor<'g, F>) -> Tensor<'g, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.tape.apply(
            &*a + &*b,
            vec![self.id, other.id],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(self, other: Tensor<'g, F>) -> Tensor<'g, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.tape.apply(
            &*a - &*b,
            vec![self.id, other.id],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(-ctx.grad.clone())]),
        )
    }

    pub fn mul(self, other: Tensor<'g, F>) -> Tensor<'g, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        self.tape.apply(
            &*a * &*b,
            vec![self.id, other.id],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad * &*ctx.parents[1]),
                    Some(ctx.grad * &*ctx.parents[0]),
                ]
            }),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| -v), |g, _, _| g.mapv(|v| -v))
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'g, F> {
        let c: F = cst(c);
        unop(self, self.value().mapv(|v| v + c), |g, _, _| g.clone())
    }

    pub fn mul_scalar(self, c: f64) -> Tensor<'g, F> {
        let c: F = cst(c);
        unop(self, self.value().mapv(|v| v * c), move |g, _, _| {
            g.mapv(|v| v * c)
        })
    }

    pub fn sqr(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| v * v), |g, x, _| {
            let two: F = cst(2.0);
            g * &x.mapv(|v| v * two)
        })
    }

    pub fn sqrt(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| v.sqrt()), |g, _, y| {
            let half: F = cst(0.5);
            g * &y.mapv(|v| half / v)
        })
    }

    pub fn exp(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| v.exp()), |g, _, y| g * y)
    }

    pub fn recip(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| F::one() / v), |g, _, y| {
            g * &y.mapv(|v| -v * v)
        })
    }

    pub fn abs(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| v.abs()), |g, x, _| {
            g * &x.mapv(|v| {
                if v > F::zero() {
                    F::one()
                } else if v < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            })
        })
    }

    pub fn relu(self) -> Tensor<'g, F> {
        unop(
            self,
            self.value().mapv(|v| if v > F::zero() { v } else { F::zero() }),
            |g, _, y| {
                g * &y.mapv(|v| if v > F::zero() { F::one() } else { F::zero() })
            },
        )
    }

    /// LeakyReLU. The output sign matches the input sign, so the backward
    /// mask can be taken from the output.
    pub fn leaky_relu(self, slope: f64) -> Tensor<'g, F> {
        let a: F = cst(slope);
        unop(
            self,
            self.value().mapv(|v| if v > F::zero() { v } else { v * a }),
            move |g, _, y| g * &y.mapv(|v| if v > F::zero() { F::one() } else { a }),
        )
    }

    pub fn tanh(self) -> Tensor<'g, F> {
        unop(self, self.value().mapv(|v| v.tanh()), |g, _, y| {
            g * &y.mapv(|v| F::one() - v * v)
        })
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Tensor<'g, F> {
        let v = self.value();
        let total = v.sum();
        let shape = v.shape().to_vec();
        self.tape.apply(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.id],
            Box::new(move |ctx| {
                let g = ctx.grad[IxDyn(&[])];
                vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    pub fn mean_all(self) -> Tensor<'g, F> {
        let n = self.value().len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Row sums of a 2-d tensor: `[B, D] -> [B]`.
    pub fn sum_axis1(self) -> Tensor<'g, F> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "sum_axis1 expects a 2-d tensor");
        let d = v.shape()[1];
        let sums = v
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .sum_axis(Axis(1));
        self.tape.apply(
            sums.into_dyn(),
            vec![self.id],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix1>().unwrap();
                let b = g.len();
                let mut out = Array2::<F>::zeros((b, d));
                for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                    row.fill(g[i]);
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }

    // ---- linear algebra ----

    /// Matrix product of 2-d tensors: `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(self, other: Tensor<'g, F>) -> Tensor<'g, F> {
        let a = self.value();
        let b = other.value();
        let av = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let y = av.dot(&bv);
        self.tape.apply(
            y.into_dyn(),
            vec![self.id, other.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let da = g.dot(&b.t());
                let db = a.t().dot(&g);
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn t2(self) -> Tensor<'g, F> {
        let v = self.value();
        let y = v
            .view()
            .into_dimensionality::<Ix2>()
            .expect("t2 expects 2-d")
            .t()
            .to_owned();
        self.tape.apply(
            y.into_dyn(),
            vec![self.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(g.t().as_standard_layout().to_owned().into_dyn())]
            }),
        )
    }

    /// Add a bias row vector to every row: `[B, D] + [D]`.
    pub fn add_rowvec(self, bias: Tensor<'g, F>) -> Tensor<'g, F> {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 2);
        assert_eq!(b.ndim(), 1);
        assert_eq!(x.shape()[1], b.shape()[0], "add_rowvec: dim mismatch");
        let y = &x.view().into_dimensionality::<Ix2>().unwrap()
            + &b.view().into_dimensionality::<Ix1>().unwrap();
        self.tape.apply(
            y.into_dyn(),
            vec![self.id, bias.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let db = g.sum_axis(Axis(0));
                vec![Some(ctx.grad.clone()), Some(db.into_dyn())]
            }),
        )
    }

    /// Scale each row of `[B, D]` by the matching entry of `[B]`.
    pub fn scale_rows(self, scale: Tensor<'g, F>) -> Tensor<'g, F> {
        let x = self.value();
        let s = scale.value();
        assert_eq!(x.ndim(), 2);
        assert_eq!(s.ndim(), 1);
        assert_eq!(x.shape()[0], s.shape()[0], "scale_rows: batch mismatch");
        let xv = x.view().into_dimensionality::<Ix2>().unwrap();
        let sv = s.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xv.to_owned();
        for (mut row, &f) in y.axis_iter_mut(Axis(0)).zip(sv.iter()) {
            row.mapv_inplace(|v| v * f);
        }
        self.tape.apply(
            y.into_dyn(),
            vec![self.id, scale.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let x = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let s = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = g.to_owned();
                for (mut row, &f) in dx.axis_iter_mut(Axis(0)).zip(s.iter()) {
                    row.mapv_inplace(|v| v * f);
                }
                let ds = (&g * &x).sum_axis(Axis(1));
                vec![Some(dx.into_dyn()), Some(ds.into_dyn())]
            }),
        )
    }

    /// Numerically stable log-softmax over the rows of `[B, C]`.
    pub fn log_softmax(self) -> Tensor<'g, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "log_softmax expects a 2-d tensor");
        let xv = x.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = xv.to_owned();
        for mut row in y.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| v - m);
            let lse = row.iter().map(|v| v.exp()).fold(F::zero(), |a, b| a + b).ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.tape.apply(
            y.into_dyn(),
            vec![self.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let y = ctx.output.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = g.to_owned();
                for ((mut drow, grow), yrow) in dx
                    .axis_iter_mut(Axis(0))
                    .zip(g.axis_iter(Axis(0)))
                    .zip(y.axis_iter(Axis(0)))
                {
                    let gsum = grow.sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = *d - yv.exp() * gsum;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(self, dims: &[usize]) -> Tensor<'g, F> {
        let v = self.value();
        let old: Vec<usize> = v.shape().to_vec();
        assert_eq!(
            v.len(),
            dims.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let y = (*v)
            .clone()
            .into_shape_with_order(IxDyn(dims))
            .expect("reshape of standard-layout tensor");
        self.tape.apply(
            y,
            vec![self.id],
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape grad");
                vec![Some(g)]
            }),
        )
    }

    /// Concatenate along axis 1 (feature/channel axis).
    pub fn concat1(self, other: Tensor<'g, F>) -> Tensor<'g, F> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), b.ndim(), "concat1: rank mismatch");
        let split = a.shape()[1];
        let y = concatenate(Axis(1), &[a.view(), b.view()]).expect("concat1 shapes");
        self.tape.apply(
            y,
            vec![self.id, other.id],
            Box::new(move |ctx| {
                let ga = ctx.grad.slice_axis(Axis(1), (0..split).into()).to_owned();
                let total = ctx.grad.shape()[1];
                let gb = ctx
                    .grad
                    .slice_axis(Axis(1), (split..total).into())
                    .to_owned();
                vec![
                    Some(ga.as_standard_layout().to_owned()),
                    Some(gb.as_standard_layout().to_owned()),
                ]
            }),
        )
    }

    // ---- spatial ----

    /// Nearest-neighbor 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2(self) -> Tensor<'g, F> {
        let v = self.value();
        let x = v.view().into_dimensionality::<Ix4>().expect("4-d input");
        let (b, c, h, w) = x.dim();
        let mut y = Array4::<F>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let val = x[[bi, ci, i, j]];
                        y[[bi, ci, 2 * i, 2 * j]] = val;
                        y[[bi, ci, 2 * i, 2 * j + 1]] = val;
                        y[[bi, ci, 2 * i + 1, 2 * j]] = val;
                        y[[bi, ci, 2 * i + 1, 2 * j + 1]] = val;
                    }
                }
            }
        }
        self.tape.apply(
            y.into_dyn(),
            vec![self.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h2, w2) = g.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array4::<F>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = g[[bi, ci, 2 * i, 2 * j]]
                                    + g[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Broadcast a `[B, C]` vector over a spatial grid: `-> [B, C, H, W]`.
    pub fn tile_spatial(self, h: usize, w: usize) -> Tensor<'g, F> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "tile_spatial expects [B, C]");
        let xv = v.view().into_dimensionality::<Ix2>().unwrap();
        let (b, c) = xv.dim();
        let mut y = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .fill(xv[[bi, ci]]);
            }
        }
        self.tape.apply(
            y.into_dyn(),
            vec![self.id],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, _, _) = g.dim();
                let mut dx = Array2::<F>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        dx[[bi, ci]] = g
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), ci)
                            .sum();
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    // ---- convolution ----

    /// 2-d convolution over `[B, Cin, H, W]` with square kernels.
    pub fn conv2d(
        self,
        weight: &Param<F>,
        bias: &Param<F>,
        stride: usize,
        pad: Pad,
    ) -> Tensor<'g, F> {
        let w = self.tape.param(weight);
        let b = self.tape.param(bias);
        self.conv2d_t(w, b, stride, pad)
    }

    /// Convolution with weight/bias already on the tape.
    pub fn conv2d_t(
        self,
        weight: Tensor<'g, F>,
        bias: Tensor<'g, F>,
        stride: usize,
        pad: Pad,
    ) -> Tensor<'g, F> {
        let x = self.value();
        let w = weight.value();
        let bv = bias.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d: input channels mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let k = ws[2];
        let (ho, wo) = conv2d_output_size(xs[2], xs[3], k, stride, pad);
        assert!(ho > 0 && wo > 0, "conv2d output collapsed to zero size");
        let xv = x.view().into_dimensionality::<Ix4>().unwrap();
        let wv = w.view().into_dimensionality::<Ix4>().unwrap();
        let bv1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let y = conv2d_forward(&xv, &wv, &bv1, stride, pad);
        self.tape.apply(
            y.into_dyn(),
            vec![self.id, weight.id, bias.id],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let w = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = conv2d_backward(&x, &w, &g, stride, pad);
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }

    /// Sum a list of same-shape tensors.
    pub fn sum_of(tensors: &[Tensor<'g, F>]) -> Tensor<'g, F> {
        assert!(!tensors.is_empty(), "sum_of needs at least one tensor");
        let mut acc = tensors[0];
        for t in &tensors[1..] {
            acc = acc.add(*t);
        }
        acc
    }
}

/// Mean of an array, as a plain value (no graph).
pub fn mean_value<F: Scalar>(a: &ArrayD<F>) -> F {
    a.sum() / cst::<F>(a.len() as f64)
}

/// Convenience: wrap an owned 1-d vector as an input leaf on a tape.
pub fn input_vec<'g, F: Scalar>(tape: &'g super::Tape<F>, v: Vec<F>) -> Tensor<'g, F> {
    tape.input(Array1::from_vec(v).into_dyn())
}
