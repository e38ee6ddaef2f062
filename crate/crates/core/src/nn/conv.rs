//! Convolution kernels: im2col + GEMM per sample, parallelized over the
//! batch. Gradient reductions over the batch are summed in index order so
//! results do not depend on thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis, Zip};

use super::Scalar;

/// Spatial padding applied before the kernel window slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Pad with zeros on each side.
    Zero(usize),
    /// Mirror interior rows/columns (edge not repeated).
    Reflect(usize),
    /// No padding.
    Valid,
}

impl Pad {
    fn width(self) -> usize {
        match self {
            Pad::Zero(p) | Pad::Reflect(p) => p,
            Pad::Valid => 0,
        }
    }
}

/// Output spatial size for a square kernel.
pub fn conv2d_output_size(h: usize, w: usize, k: usize, stride: usize, pad: Pad) -> (usize, usize) {
    let p = pad.width();
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    assert!(hp >= k && wp >= k, "conv2d: kernel larger than padded input");
    ((hp - k) / stride + 1, (wp - k) / stride + 1)
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut r = i;
    if r < 0 {
        r = -r;
    }
    if r >= n {
        r = 2 * n - 2 - r;
    }
    debug_assert!(r >= 0 && r < n);
    r as usize
}

fn pad_sample<F: Scalar>(x: &ArrayView3<F>, pad: Pad) -> Array3<F> {
    let (c, h, w) = x.dim();
    let p = pad.width();
    if p == 0 {
        return x.to_owned();
    }
    let mut out = Array3::<F>::zeros((c, h + 2 * p, w + 2 * p));
    match pad {
        Pad::Zero(_) => {
            out.slice_mut(ndarray::s![.., p..p + h, p..p + w]).assign(x);
        }
        Pad::Reflect(_) => {
            assert!(p < h && p < w, "reflect pad wider than the input");
            for ci in 0..c {
                for i in 0..h + 2 * p {
                    let si = reflect_index(i as isize - p as isize, h);
                    for j in 0..w + 2 * p {
                        let sj = reflect_index(j as isize - p as isize, w);
                        out[[ci, i, j]] = x[[ci, si, sj]];
                    }
                }
            }
        }
        Pad::Valid => unreachable!(),
    }
    out
}

/// Fold the gradient of a padded sample back onto the unpadded input.
fn unpad_grad<F: Scalar>(dpad: &Array3<F>, pad: Pad, h: usize, w: usize) -> Array3<F> {
    let (c, hp, wp) = dpad.dim();
    let p = pad.width();
    if p == 0 {
        return dpad.clone();
    }
    match pad {
        Pad::Zero(_) => dpad.slice(ndarray::s![.., p..p + h, p..p + w]).to_owned(),
        Pad::Reflect(_) => {
            let mut dx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..hp {
                    let si = reflect_index(i as isize - p as isize, h);
                    for j in 0..wp {
                        let sj = reflect_index(j as isize - p as isize, w);
                        dx[[ci, si, sj]] = dx[[ci, si, sj]] + dpad[[ci, i, j]];
                    }
                }
            }
            dx
        }
        Pad::Valid => unreachable!(),
    }
}

fn im2col<F: Scalar>(padded: &Array3<F>, k: usize, stride: usize) -> Array2<F> {
    let (c, hp, wp) = padded.dim();
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    let src = padded.as_slice().expect("padded sample is contiguous");
    let mut col = Array2::<F>::zeros((c * k * k, ho * wo));
    {
        let dst = col.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let out_base = row * ho * wo;
                    for oi in 0..ho {
                        let in_row = oi * stride + ki;
                        let src_base = ci * hp * wp + in_row * wp + kj;
                        let dst_base = out_base + oi * wo;
                        if stride == 1 {
                            dst[dst_base..dst_base + wo]
                                .copy_from_slice(&src[src_base..src_base + wo]);
                        } else {
                            for oj in 0..wo {
                                dst[dst_base + oj] = src[src_base + oj * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    c: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
) -> Array3<F> {
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    let src = dcol.as_slice().expect("dcol contiguous");
    let mut dpad = Array3::<F>::zeros((c, hp, wp));
    {
        let dst = dpad.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let in_base = row * ho * wo;
                    for oi in 0..ho {
                        let out_row = oi * stride + ki;
                        let dst_base = ci * hp * wp + out_row * wp + kj;
                        let src_base = in_base + oi * wo;
                        for oj in 0..wo {
                            let d = dst_base + oj * stride;
                            dst[d] = dst[d] + src[src_base + oj];
                        }
                    }
                }
            }
        }
    }
    dpad
}

pub(crate) fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &ArrayView1<F>,
    stride: usize,
    pad: Pad,
) -> Array4<F> {
    let (batch, cin, h, wdt) = x.dim();
    let (cout, cin_w, k, _) = w.dim();
    assert_eq!(cin, cin_w);
    let (ho, wo) = conv2d_output_size(h, wdt, k, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((batch, cout, ho, wo));
    Zip::from(y.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut ys, xs| {
            let padded = pad_sample(&xs, pad);
            let col = im2col(&padded, k, stride);
            let out = w_mat.dot(&col);
            for (co, mut plane) in ys.axis_iter_mut(Axis(0)).enumerate() {
                let bias = b[co];
                let src = out.row(co);
                for (dst, &v) in plane.iter_mut().zip(src.iter()) {
                    *dst = v + bias;
                }
            }
        });
    y
}

pub(crate) fn conv2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    dy: &ArrayView4<F>,
    stride: usize,
    pad: Pad,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (batch, cin, h, wdt) = x.dim();
    let (cout, _, k, _) = w.dim();
    let p = pad.width();
    let (hp, wp) = (h + 2 * p, wdt + 2 * p);
    let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    let w_mat = w
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();

    let mut dx = Array4::<F>::zeros((batch, cin, h, wdt));
    // per-sample weight/bias grads, reduced afterwards in index order
    let mut dw_parts: Vec<Array2<F>> = (0..batch)
        .map(|_| Array2::zeros((cout, cin * k * k)))
        .collect();
    let mut db_parts: Vec<Array1<F>> = (0..batch).map(|_| Array1::zeros(cout)).collect();

    use rayon::prelude::*;
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .zip(dw_parts.par_iter_mut())
        .zip(db_parts.par_iter_mut())
        .for_each(|((((mut dxs, xs), dys), dw_part), db_part)| {
            let dy_mat = dys
                .to_shape((cout, ho * wo))
                .expect("dy reshape")
                .to_owned();
            let padded = pad_sample(&xs, pad);
            let col = im2col(&padded, k, stride);
            *dw_part = dy_mat.dot(&col.t());
            for (co, row) in dy_mat.axis_iter(Axis(0)).enumerate() {
                db_part[co] = row.sum();
            }
            let dcol = w_mat.t().dot(&dy_mat);
            let dpad = col2im(&dcol, cin, hp, wp, k, stride);
            dxs.assign(&unpad_grad(&dpad, pad, h, wdt));
        });

    let mut dw_mat = Array2::<F>::zeros((cout, cin * k * k));
    for part in &dw_parts {
        dw_mat += part;
    }
    let mut db = Array1::<F>::zeros(cout);
    for part in &db_parts {
        db += part;
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("dw reshape");
    (dx, dw, db)
}
