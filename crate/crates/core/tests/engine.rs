//! Gradient checks for every differentiable primitive against central
//! finite differences, plus determinism checks for the batched kernels.

use ndarray::{ArrayD, IxDyn};
use pyrgan::nn::gradcheck::{max_param_rel_err, rel_err};
use pyrgan::nn::{normal_draws, normal_param, Adam, BatchNorm2d, Conv2d, Linear, Pad, Param, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Param<f64> {
    normal_param(rng, shape, 1.0)
}

/// Build the loss twice: once for the analytic reverse pass, then repeatedly
/// for central differences on every sampled parameter coordinate.
fn check2<FBuild>(params: &[&Param<f64>], build: FBuild, max_coords: usize)
where
    FBuild: for<'g> Fn(&'g Tape<f64>) -> Tensor<'g, f64>,
{
    let tape = Tape::new();
    let loss = build(&tape);
    assert_eq!(loss.value().ndim(), 0, "loss must be scalar");
    assert!(loss.scalar().is_finite());
    let grads = tape.backward(loss);
    for p in params {
        let analytic = grads
            .get(p)
            .unwrap_or_else(|| panic!("missing grad for param {:?}", p.shape()))
            .clone();
        let mut eval = || {
            let t = Tape::new();
            build(&t).scalar()
        };
        let err = max_param_rel_err(p, &analytic, &mut eval, H, max_coords);
        assert!(err <= TOL, "gradcheck failed: max rel err {err}");
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut r = rng(1);
    let a = rand_param(&mut r, &[3, 4]);
    let b = rand_param(&mut r, &[3, 4]);
    check2(
        &[&a, &b],
        |t| {
            let x = t.param(&a);
            let y = t.param(&b);
            x.mul(y)
                .add(x.sqr())
                .sub(y.neg())
                .add_scalar(0.3)
                .mul_scalar(1.7)
                .tanh()
                .mean_all()
        },
        24,
    );
}

#[test]
fn exp_sqrt_recip_abs_match_finite_differences() {
    let mut r = rng(2);
    // keep values away from 0 so abs/sqrt/recip are smooth at the probe
    let vals: Vec<f64> = normal_draws::<f64, _>(&mut r, 12, 0.0, 1.0)
        .into_iter()
        .map(|v: f64| v.abs() + 0.5)
        .collect();
    let a = Param::new(ArrayD::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap());
    check2(
        &[&a],
        |t| {
            let x = t.param(&a);
            x.sqrt()
                .add(x.recip())
                .add(x.exp().mul_scalar(0.1))
                .add(x.abs())
                .mean_all()
        },
        12,
    );
}

#[test]
fn relu_leaky_relu_match_finite_differences() {
    let mut r = rng(3);
    // shift away from the kink at 0
    let vals: Vec<f64> = normal_draws::<f64, _>(&mut r, 20, 0.0, 1.0)
        .into_iter()
        .map(|v: f64| if v.abs() < 0.2 { v + 0.5 } else { v })
        .collect();
    let a = Param::new(ArrayD::from_shape_vec(IxDyn(&[4, 5]), vals).unwrap());
    check2(
        &[&a],
        |t| {
            let x = t.param(&a);
            x.relu().add(x.leaky_relu(0.2).sqr()).mean_all()
        },
        20,
    );
}

#[test]
fn matmul_and_linear_match_finite_differences() {
    let mut r = rng(4);
    let a = rand_param(&mut r, &[3, 4]);
    let b = rand_param(&mut r, &[4, 2]);
    let bias = rand_param(&mut r, &[2]);
    check2(
        &[&a, &b, &bias],
        |t| {
            let x = t.param(&a);
            let w = t.param(&b);
            let c = t.param(&bias);
            x.matmul(w).add_rowvec(c).sqr().mean_all()
        },
        16,
    );
}

#[test]
fn reductions_and_shape_ops_match_finite_differences() {
    let mut r = rng(5);
    let a = rand_param(&mut r, &[2, 6]);
    check2(
        &[&a],
        |t| {
            let x = t.param(&a);
            let rows = x.sqr().sum_axis1(); // [2]
            let back = x.reshape(&[3, 4]).t2().sum_all();
            rows.sum_all().add(back).mul_scalar(0.5)
        },
        12,
    );
}

#[test]
fn scale_rows_and_concat_match_finite_differences() {
    let mut r = rng(6);
    let a = rand_param(&mut r, &[3, 4]);
    let s = rand_param(&mut r, &[3]);
    let b = rand_param(&mut r, &[3, 2]);
    check2(
        &[&a, &s, &b],
        |t| {
            let x = t.param(&a);
            let sc = t.param(&s);
            let y = t.param(&b);
            x.scale_rows(sc).concat1(y).sqr().mean_all()
        },
        18,
    );
}

#[test]
fn log_softmax_matches_finite_differences() {
    let mut r = rng(7);
    let a = rand_param(&mut r, &[4, 6]);
    check2(
        &[&a],
        |t| {
            let x = t.param(&a);
            // weighted nll-style reduction to exercise off-target grads
            x.log_softmax().mul_scalar(-1.0).sqr().mean_all()
        },
        24,
    );
}

#[test]
fn conv2d_all_padding_modes_match_finite_differences() {
    for (pad, stride) in [
        (Pad::Zero(1), 1),
        (Pad::Reflect(1), 1),
        (Pad::Reflect(1), 2),
        (Pad::Valid, 1),
    ] {
        let mut r = rng(8);
        let x = rand_param(&mut r, &[2, 3, 6, 6]);
        let w = normal_param(&mut r, &[4, 3, 3, 3], 0.5);
        let b = rand_param(&mut r, &[4]);
        check2(
            &[&x, &w, &b],
            |t| {
                let xt = t.param(&x);
                let wt = t.param(&w);
                let bt = t.param(&b);
                xt.conv2d_t(wt, bt, stride, pad).sqr().mean_all()
            },
            20,
        );
    }
}

#[test]
fn conv2d_valid_4x4_collapses_to_scalar_map() {
    let mut r = rng(9);
    let x = rand_param(&mut r, &[1, 2, 4, 4]);
    let w = normal_param(&mut r, &[1, 2, 4, 4], 0.5);
    let b = rand_param(&mut r, &[1]);
    let tape = Tape::new();
    let y = tape.param(&x).conv2d(&w, &b, 1, Pad::Valid);
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    check2(
        &[&x, &w],
        |t| t.param(&x).conv2d(&w, &b, 1, Pad::Valid).mean_all(),
        16,
    );
}

#[test]
fn upsample_and_tile_match_finite_differences() {
    let mut r = rng(10);
    let x = rand_param(&mut r, &[2, 3, 3, 3]);
    let v = rand_param(&mut r, &[2, 5]);
    check2(
        &[&x],
        |t| t.param(&x).upsample_nearest2().sqr().mean_all(),
        18,
    );
    check2(
        &[&v],
        |t| t.param(&v).tile_spatial(4, 4).sqr().mean_all(),
        10,
    );
}

#[test]
fn batchnorm_train_and_eval_match_finite_differences() {
    let mut r = rng(11);
    let x = rand_param(&mut r, &[3, 2, 4, 4]);
    let bn = BatchNorm2d::<f64>::new(2);
    // train mode: batch statistics participate in the gradient
    check2(
        &[&x, &bn.gamma, &bn.beta],
        |t| bn.forward(t.param(&x), true).sqr().mean_all(),
        16,
    );
    // eval mode: running stats are constants
    check2(
        &[&x, &bn.gamma, &bn.beta],
        |t| bn.forward(t.param(&x), false).sqr().mean_all(),
        16,
    );
}

#[test]
fn batchnorm_normalizes_batch_statistics() {
    let mut r = rng(12);
    let x = rand_param(&mut r, &[4, 3, 8, 8]);
    let bn = BatchNorm2d::<f64>::new(3);
    let tape = Tape::new();
    let y = bn.forward(tape.param(&x), true);
    let v = y.value();
    // per-channel mean ~0, var ~1
    for c in 0..3 {
        let plane = v.index_axis(ndarray::Axis(1), c);
        let n = plane.len() as f64;
        let mean: f64 = plane.sum() / n;
        let var: f64 = plane.mapv(|t| (t - mean) * (t - mean)).sum() / n;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn nearest_upsample_of_constant_is_constant() {
    let x = Param::new(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 0.7f64));
    let tape = Tape::new();
    let y = tape.param(&x).upsample_nearest2();
    assert_eq!(y.shape(), vec![1, 2, 6, 6]);
    assert!(y.value().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut r = rng(13);
    let a = rand_param(&mut r, &[2, 2]);
    let tape = Tape::new();
    let x = tape.param(&a);
    let loss = x.detach().sqr().mean_all();
    let grads = tape.backward(loss);
    assert!(grads.get(&a).is_none());
}

#[test]
fn grad_accumulates_over_reused_subexpression() {
    let a = Param::new(ArrayD::from_elem(IxDyn(&[1]), 3.0f64));
    let tape = Tape::new();
    let x = tape.param(&a);
    // f = x*x + x => f' = 2x + 1 = 7
    let loss = x.mul(x).add(x).sum_all();
    let grads = tape.backward(loss);
    let g = grads.get(&a).unwrap();
    assert!((g[IxDyn(&[0])] - 7.0).abs() < 1e-12);
}

#[test]
fn adam_moves_parameters_toward_minimum() {
    let p = Param::new(ArrayD::from_elem(IxDyn(&[2]), 5.0f64));
    let mut opt = Adam::new(vec![("p".into(), p.clone())], 0.9, 0.999);
    for _ in 0..500 {
        let tape = Tape::new();
        let x = tape.param(&p);
        let loss = x.sqr().sum_all();
        let grads = tape.backward(loss);
        opt.step(&grads, 0.05);
    }
    assert!(p.value().iter().all(|v| v.abs() < 0.05));
}

#[test]
fn conv2d_is_deterministic_across_runs() {
    let mut r = rng(14);
    let x = normal_param::<f32, _>(&mut r, &[4, 8, 16, 16], 1.0);
    let w = normal_param::<f32, _>(&mut r, &[8, 8, 3, 3], 0.1);
    let b = normal_param::<f32, _>(&mut r, &[8], 0.1);
    let run = || {
        let tape = Tape::new();
        let y = tape.param(&x).conv2d(&w, &b, 2, Pad::Reflect(1));
        let loss = y.sqr().mean_all();
        let grads = tape.backward(loss);
        let g = grads.get(&w).unwrap().clone();
        (y.value().iter().cloned().collect::<Vec<f32>>(), g)
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2, "forward must be bit-identical");
    assert_eq!(
        g1.iter().cloned().collect::<Vec<f32>>(),
        g2.iter().cloned().collect::<Vec<f32>>(),
        "backward must be bit-identical"
    );
}

#[test]
fn linear_layer_shapes_and_gradcheck() {
    let mut r = rng(15);
    let lin = Linear::<f64>::new(&mut r, 6, 3, 0.5);
    let x = rand_param(&mut r, &[4, 6]);
    {
        let tape = Tape::new();
        let y = lin.forward(tape.param(&x));
        assert_eq!(y.shape(), vec![4, 3]);
    }
    check2(
        &[&x, &lin.w, &lin.b],
        |t| lin.forward(t.param(&x)).sqr().mean_all(),
        18,
    );
}

#[test]
fn conv_layer_named_params_are_stable() {
    let mut r = rng(16);
    let conv = Conv2d::<f32>::new(&mut r, 3, 8, 3, 1, Pad::Reflect(1), 0.02);
    let mut names = Vec::new();
    conv.named_params("trunk.0", &mut names);
    let got: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(got, vec!["trunk.0.w", "trunk.0.b"]);
}

#[test]
fn rel_err_floors_near_zero() {
    assert!(rel_err(0.0, 1e-9) < 1e-2);
    assert!(rel_err(1.0, 1.1) > 0.05);
}
