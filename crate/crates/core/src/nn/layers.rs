//! Network building blocks: affine maps, convolutions and batch
//! normalization with train/eval semantics.

use std::cell::RefCell;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix4, IxDyn};
use rand::Rng;

use super::conv::Pad;
use super::param::Param;
use super::tape::Tensor;
use super::{cst, normal_draws, Scalar};

/// Fully-connected layer; weight is stored `[in, out]` so the forward pass
/// is a plain matmul.
pub struct Linear<F: Scalar> {
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, std: f64) -> Self {
        let w = Array2::from_shape_vec(
            (in_dim, out_dim),
            normal_draws::<F, _>(rng, in_dim * out_dim, 0.0, std),
        )
        .unwrap();
        Linear {
            w: Param::new(w.into_dyn()),
            b: Param::new(Array1::<F>::zeros(out_dim).into_dyn()),
        }
    }

    pub fn forward<'g>(&self, x: Tensor<'g, F>) -> Tensor<'g, F> {
        let w = x.tape.param(&self.w);
        let b = x.tape.param(&self.b);
        x.matmul(w).add_rowvec(b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param<F>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// 2-d convolution with square kernels.
pub struct Conv2d<F: Scalar> {
    pub w: Param<F>,
    pub b: Param<F>,
    pub stride: usize,
    pub pad: Pad,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: Pad,
        std: f64,
    ) -> Self {
        let w = Array4::from_shape_vec(
            (cout, cin, k, k),
            normal_draws::<F, _>(rng, cout * cin * k * k, 0.0, std),
        )
        .unwrap();
        Conv2d {
            w: Param::new(w.into_dyn()),
            b: Param::new(Array1::<F>::zeros(cout).into_dyn()),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, x: Tensor<'g, F>) -> Tensor<'g, F> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param<F>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Batch normalization over `[B, C, H, W]` with per-channel affine.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates; eval mode normalizes with the running estimates. The
/// running buffers are state, not parameters: they are checkpointed but
/// never touched by the optimizer.
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    running_mean: RefCell<Array1<F>>,
    running_var: RefCell<Array1<F>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Array1::<F>::ones(channels).into_dyn()),
            beta: Param::new(Array1::<F>::zeros(channels).into_dyn()),
            running_mean: RefCell::new(Array1::zeros(channels)),
            running_var: RefCell::new(Array1::ones(channels)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward<'g>(&self, x: Tensor<'g, F>, train: bool) -> Tensor<'g, F> {
        let v = x.value();
        let xv = v.view().into_dimensionality::<Ix4>().expect("bn input 4-d");
        let (b, c, h, w) = xv.dim();
        assert_eq!(c, self.channels(), "bn channel mismatch");
        let m = (b * h * w) as f64;

        let (mu, var) = if train {
            let mut mu = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            for ci in 0..c {
                let plane = xv.index_axis(Axis(1), ci);
                let mean = plane.sum() / cst::<F>(m);
                let vsum = plane.mapv(|v| (v - mean) * (v - mean)).sum();
                mu[ci] = mean;
                var[ci] = vsum / cst::<F>(m);
            }
            // fold batch stats into the running estimates (unbiased var)
            let mom: F = cst(self.momentum);
            let keep: F = cst(1.0 - self.momentum);
            let unbias: F = cst(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            {
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = keep * rm[ci] + mom * mu[ci];
                    rv[ci] = keep * rv[ci] + mom * var[ci] * unbias;
                }
            }
            (mu, var)
        } else {
            (
                self.running_mean.borrow().clone(),
                self.running_var.borrow().clone(),
            )
        };

        let eps: F = cst(self.eps);
        let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
        let gamma_t = x.tape.param(&self.gamma);
        let beta_t = x.tape.param(&self.beta);
        let gv = self.gamma.value();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.beta.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();

        let mut y = Array4::<F>::zeros((b, c, h, w));
        for ci in 0..c {
            let scale = g1[ci] * invstd[ci];
            let shift = b1[ci] - g1[ci] * invstd[ci] * mu[ci];
            let src = xv.index_axis(Axis(1), ci);
            let mut dst = y.index_axis_mut(Axis(1), ci);
            dst.assign(&src.mapv(|v| v * scale + shift));
        }

        let mu_b = mu.clone();
        let invstd_b = invstd.clone();
        x.tape.apply(
            y.into_dyn(),
            vec![x.id, gamma_t.id, beta_t.id],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let xval = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let gam = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let (b, c, h, w) = g.dim();
                let m = cst::<F>((b * h * w) as f64);
                let mut dx = Array4::<F>::zeros((b, c, h, w));
                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let istd = invstd_b[ci];
                    let mean = mu_b[ci];
                    let gplane = g.index_axis(Axis(1), ci);
                    let xplane = xval.index_axis(Axis(1), ci);
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for (&gv, &xv) in gplane.iter().zip(xplane.iter()) {
                        let xhat = (xv - mean) * istd;
                        sum_dy = sum_dy + gv;
                        sum_dy_xhat = sum_dy_xhat + gv * xhat;
                    }
                    dbeta[ci] = sum_dy;
                    dgamma[ci] = sum_dy_xhat;
                    let mut dplane = dx.index_axis_mut(Axis(1), ci);
                    if train {
                        let k = gam[ci] * istd / m;
                        for ((d, &gv), &xv) in
                            dplane.iter_mut().zip(gplane.iter()).zip(xplane.iter())
                        {
                            let xhat = (xv - mean) * istd;
                            *d = k * (m * gv - sum_dy - xhat * sum_dy_xhat);
                        }
                    } else {
                        let k = gam[ci] * istd;
                        for (d, &gv) in dplane.iter_mut().zip(gplane.iter()) {
                            *d = k * gv;
                        }
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param<F>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn named_buffers(&self, prefix: &str, out: &mut Vec<(String, ArrayD<F>)>) {
        out.push((
            format!("{prefix}.running_mean"),
            self.running_mean.borrow().clone().into_dyn(),
        ));
        out.push((
            format!("{prefix}.running_var"),
            self.running_var.borrow().clone().into_dyn(),
        ));
    }

    pub fn load_buffer(&self, name_suffix: &str, value: &ArrayD<F>) -> bool {
        let v = value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bn buffer 1-d")
            .to_owned();
        match name_suffix {
            "running_mean" => {
                *self.running_mean.borrow_mut() = v;
                true
            }
            "running_var" => {
                *self.running_var.borrow_mut() = v;
                true
            }
            _ => false,
        }
    }
}

/// Fill an arbitrary-shaped parameter with N(0, std) values.
pub fn normal_param<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Param<F> {
    let n: usize = shape.iter().product();
    let data = normal_draws::<F, _>(rng, n, 0.0, std);
    Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
}
