use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, check_params};
use super::params::ParamStore;
use super::tape::{PadMode, Tape};
use super::tensor::Tensor;
use crate::error::QarvError;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const TOL: f64 = 1e-5;

// ---- oracles ----

/// Direct quadruple loop, zero padding applied by index test.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for nn in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((nn * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((nn * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

fn naive_depthwise(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let k = w.shape()[1];
    let mut full = vec![0.0; c * c * k * k];
    for ch in 0..c {
        for i in 0..k * k {
            full[(ch * c + ch) * k * k + i] = w.data()[ch * k * k + i];
        }
    }
    let wfull = Tensor::new(vec![c, c, k, k], full).unwrap();
    let _ = (n, h, wd);
    naive_conv(x, &wfull, &vec![0.0; c], 1, pad)
}

// ---- backward basics ----

#[test]
fn quadratic_gradient() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let grads = {
        let mut tape = Tape::new(&store);
        let v = tape.param(p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap()
    };
    grads.write_to(&mut store);
    assert_eq!(store.get(p).grad.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let q = store.register("q", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    store.get_mut(p).grad = Tensor::full(&[2], 9.0);
    let grads = {
        let mut tape = Tape::new(&store);
        let v = tape.param(q);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap()
    };
    grads.write_to(&mut store);
    assert_eq!(store.get(p).grad.data(), &[0.0, 0.0]);
    assert_eq!(store.get(q).grad.data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::detached();
    let x = tape.input(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(QarvError::NonScalarLoss(_))));
}

#[test]
fn three_layer_net_matches_finite_differences() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let dims = [5, 7, 6, 3];
    let layers: Vec<_> = (0..3)
        .map(|i| {
            super::layers::Linear::new(&mut store, &format!("l{i}"), dims[i], dims[i + 1], &mut r)
        })
        .collect();
    let x = rand_tensor(&[4, 5], &mut r);
    let loss_fn = |s: &ParamStore<f64>, grads: bool| {
        let mut tape = Tape::new(s);
        let mut h = tape.constant(x.clone());
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(&mut tape, h)?;
            if i < 2 {
                h = tape.gelu(h);
            }
        }
        let sq = tape.square(h);
        let loss = tape.sum(sq);
        let value = tape.value(loss).item();
        let out = if grads {
            let mut s2 = s.clone();
            tape.backward(loss)?.write_to(&mut s2);
            Some(s2)
        } else {
            None
        };
        Ok((value, out))
    };
    for (name, err) in check_params(&store, loss_fn, 64, 1).unwrap() {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn backward_is_linear() {
    // grad(a·f + b·g) = a·grad f + b·grad g
    let mut r = rng(5);
    let x = rand_tensor(&[2, 3, 4, 4], &mut r);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::<f64>::detached();
        let v = tape.input(x.clone());
        let f = tape.gelu(v);
        let f = tape.sum(f);
        let g = tape.exp(v);
        let g = tape.sum(g);
        let fa = tape.scale(f, a);
        let gb = tape.scale(g, b);
        let loss = tape.add(fa, gb).unwrap();
        tape.backward(loss).unwrap().wrt(v).unwrap().clone()
    };
    let (a, b) = (0.7, -1.3);
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    for ((c, f), g) in combined.data().iter().zip(gf.data()).zip(gg.data()) {
        assert!((c - (a * f + b * g)).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut r = rng(8);
    let x = rand_tensor(&[3, 4, 9, 9], &mut r);
    let w = rand_tensor(&[5, 4, 3, 3], &mut r);
    let run = || {
        let mut tape = Tape::<f64>::detached();
        let xv = tape.input(x.clone());
        let wv = tape.input(w.clone());
        let y = tape.conv2d(xv, wv, None, 1).unwrap();
        let y = tape.layer_norm(y).unwrap();
        let loss = tape.sum(y);
        let loss = tape.square(loss);
        let g = tape.backward(loss).unwrap();
        (
            tape.value(y).clone(),
            g.wrt(wv).unwrap().clone(),
            g.wrt(xv).unwrap().clone(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

// ---- conv2d ----

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let x = rand_tensor(&[2, 3, 5, 4], &mut r);
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x.clone());
    let wv = tape.constant(Tensor::new(vec![3, 3, 1, 1], w).unwrap());
    let y = tape.conv2d(xv, wv, None, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_patch_shape() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::zeros(&[1, 1, 4, 4]));
    let wv = tape.input(Tensor::zeros(&[6, 1, 2, 2]));
    let y = tape.conv2d(xv, wv, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 6, 2, 2]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(2);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 0, 2), (1, 0, 1), (3, 1, 3), (1, 3, 7)] {
        let x = rand_tensor(&[2, 3, 9, 8], &mut r);
        let w = rand_tensor(&[4, 3, k, k], &mut r);
        let b = rand_tensor(&[4], &mut r);
        let mut tape = Tape::<f64>::detached();
        let xv = tape.input(x.clone());
        let xp = tape.pad2d(xv, pad, PadMode::Zero).unwrap();
        let wv = tape.input(w.clone());
        let bv = tape.input(b.clone());
        let y = tape.conv2d(xp, wv, Some(bv), stride).unwrap();
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(tape.shape(y), want.shape());
        assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
        // Output size formula.
        assert_eq!(want.shape()[2], (9 + 2 * pad - k) / stride + 1);
    }
}

#[test]
fn conv_shape_mismatch_is_error() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let wv = tape.input(Tensor::zeros(&[3, 5, 1, 1]));
    assert!(matches!(
        tape.conv2d(xv, wv, None, 1),
        Err(QarvError::Shape { .. })
    ));
}

#[test]
fn conv_gradients() {
    let mut r = rng(4);
    for &stride in &[1, 2] {
        let inputs = [
            rand_tensor(&[2, 3, 6, 6], &mut r),
            rand_tensor(&[4, 3, 2, 2], &mut r),
            rand_tensor(&[4], &mut r),
        ];
        let err =
            check_inputs(&inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride), 9).unwrap();
        assert!(err < TOL, "stride {stride}: {err}");
    }
}

// ---- depthwise ----

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut r = rng(6);
    let x = rand_tensor(&[2, 3, 6, 5], &mut r);
    let mut w = vec![0.0; 3 * 49];
    for c in 0..3 {
        w[c * 49 + 24] = 1.0;
    }
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x.clone());
    let xp = tape.pad2d(xv, 3, PadMode::Zero).unwrap();
    let wv = tape.constant(Tensor::new(vec![3, 7, 7], w).unwrap());
    let y = tape.depthwise_conv2d(xp, wv, None).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn depthwise_ones_on_constant_input() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::full(&[1, 2, 6, 6], 1.5));
    let xp = tape.pad2d(xv, 1, PadMode::Zero).unwrap();
    let wv = tape.constant(Tensor::full(&[2, 3, 3], 1.0));
    let y = tape.depthwise_conv2d(xp, wv, None).unwrap();
    let out = tape.value(y);
    for c in 0..2 {
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(out.data()[(c * 6 + i) * 6 + j], 13.5);
            }
        }
    }
}

#[test]
fn depthwise_matches_naive_loops() {
    let mut r = rng(7);
    let x = rand_tensor(&[2, 4, 8, 7], &mut r);
    let w = rand_tensor(&[4, 7, 7], &mut r);
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x.clone());
    let xp = tape.pad2d(xv, 3, PadMode::Zero).unwrap();
    let wv = tape.input(w.clone());
    let y = tape.depthwise_conv2d(xp, wv, None).unwrap();
    let want = naive_depthwise(&x, &w, 3);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
}

#[test]
fn depthwise_gradients() {
    let mut r = rng(10);
    let inputs = [
        rand_tensor(&[2, 3, 7, 6], &mut r),
        rand_tensor(&[3, 3, 3], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    let err = check_inputs(
        &inputs,
        |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2])),
        2,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

// ---- padding ----

#[test]
fn replicate_padding_copies_edges() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.pad2d(xv, 1, PadMode::Replicate).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(y).data(), &want);
}

#[test]
fn padding_gradients() {
    let mut r = rng(11);
    for mode in [PadMode::Zero, PadMode::Replicate] {
        let inputs = [rand_tensor(&[2, 2, 3, 4], &mut r)];
        let err = check_inputs(&inputs, |t, v| t.pad2d(v[0], 2, mode), 3).unwrap();
        assert!(err < TOL, "{mode:?}: {err}");
    }
}

// ---- normalization ----

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::full(&[2, 4, 3, 3], 2.5));
    let y = tape.layer_norm(xv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_statistics() {
    let mut r = rng(12);
    let x = rand_tensor(&[2, 8, 3, 5], &mut r).map(|v| 3.0 * v + 1.0);
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x);
    let y = tape.layer_norm(xv).unwrap();
    let out = tape.value(y);
    let (n, c, h, w) = out.dims4().unwrap();
    for nn in 0..n {
        for p in 0..h * w {
            let vals: Vec<f64> = (0..c)
                .map(|ch| out.data()[(nn * c + ch) * h * w + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / c as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn group_norm_with_one_channel_per_group_is_instance_norm() {
    let mut r = rng(13);
    let x = rand_tensor(&[2, 6, 4, 4], &mut r);
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x);
    let a = tape.group_norm(xv, 6).unwrap();
    let b = tape.instance_norm(xv).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn degenerate_norm_sets_are_errors() {
    let mut tape = Tape::<f64>::detached();
    let one_channel = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.layer_norm(one_channel).is_err());
    let one_pixel = tape.input(Tensor::zeros(&[1, 4, 1, 1]));
    assert!(tape.instance_norm(one_pixel).is_err());
    let uneven = tape.input(Tensor::zeros(&[1, 6, 2, 2]));
    assert!(tape.group_norm(uneven, 4).is_err());
}

#[test]
fn norm_gradients() {
    let mut r = rng(14);
    let x = [rand_tensor(&[2, 6, 3, 4], &mut r)];
    let e1 = check_inputs(&x, |t, v| t.layer_norm(v[0]), 1).unwrap();
    let e2 = check_inputs(&x, |t, v| t.group_norm(v[0], 3), 2).unwrap();
    let e3 = check_inputs(&x, |t, v| t.instance_norm(v[0]), 3).unwrap();
    assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
}

// ---- pixel shuffle ----

#[test]
fn pixel_shuffle_definition() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::from_f64(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.pixel_shuffle(xv, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn pixel_shuffle_shape_and_errors() {
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(Tensor::zeros(&[2, 16, 3, 3]));
    let y = tape.pixel_shuffle(xv, 4).unwrap();
    assert_eq!(tape.shape(y), &[2, 1, 12, 12]);
    let bad = tape.input(Tensor::zeros(&[1, 6, 2, 2]));
    assert!(tape.pixel_shuffle(bad, 2).is_err());
}

#[test]
fn pixel_shuffle_inverts_patch_rearrangement() {
    // The inverse (space-to-depth) as an explicit index map.
    let mut r = rng(15);
    let x = rand_tensor(&[2, 8, 3, 2], &mut r);
    let mut tape = Tape::<f64>::detached();
    let xv = tape.input(x.clone());
    let y = tape.pixel_shuffle(xv, 2).unwrap();
    let out = tape.value(y);
    let (n, c, h, w) = out.dims4().unwrap();
    let mut back = vec![0.0; out.numel()];
    for nn in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let ic = ch * 4 + (yy % 2) * 2 + xx % 2;
                    back[((nn * 8 + ic) * 3 + yy / 2) * 2 + xx / 2] =
                        out.data()[((nn * c + ch) * h + yy) * w + xx];
                }
            }
        }
    }
    assert_eq!(back, x.data());
}

#[test]
fn pixel_shuffle_gradient() {
    let mut r = rng(16);
    let x = [rand_tensor(&[2, 8, 2, 3], &mut r)];
    assert!(check_inputs(&x, |t, v| t.pixel_shuffle(v[0], 2), 1).unwrap() < TOL);
}

// ---- everything else ----

#[test]
fn elementwise_gradients() {
    let mut r = rng(17);
    let a = rand_tensor(&[2, 3, 2, 2], &mut r);
    let b = rand_tensor(&[2, 3, 2, 2], &mut r);
    let pair = [a.clone(), b];
    let single = [a.map(|v| 2.0 * v)];
    let cases: Vec<(&str, f64)> = vec![
        (
            "add",
            check_inputs(&pair, |t, v| t.add(v[0], v[1]), 1).unwrap(),
        ),
        (
            "sub",
            check_inputs(&pair, |t, v| t.sub(v[0], v[1]), 1).unwrap(),
        ),
        (
            "mul",
            check_inputs(&pair, |t, v| t.mul(v[0], v[1]), 1).unwrap(),
        ),
        (
            "scale",
            check_inputs(&single, |t, v| Ok(t.scale(v[0], -2.5)), 1).unwrap(),
        ),
        (
            "add_scalar",
            check_inputs(&single, |t, v| Ok(t.add_scalar(v[0], 1.0)), 1).unwrap(),
        ),
        (
            "square",
            check_inputs(&single, |t, v| Ok(t.square(v[0])), 1).unwrap(),
        ),
        (
            "exp",
            check_inputs(&single, |t, v| Ok(t.exp(v[0])), 1).unwrap(),
        ),
        (
            "gelu",
            check_inputs(&single, |t, v| Ok(t.gelu(v[0])), 1).unwrap(),
        ),
        (
            "clamp",
            check_inputs(&single, |t, v| Ok(t.clamp(v[0], -0.9, 1.1)), 1).unwrap(),
        ),
        (
            "sum",
            check_inputs(&single, |t, v| Ok(t.sum(v[0])), 1).unwrap(),
        ),
        (
            "mean",
            check_inputs(&single, |t, v| Ok(t.mean(v[0])), 1).unwrap(),
        ),
        (
            "sum_per_item",
            check_inputs(&single, |t, v| t.sum_per_item(v[0]), 1).unwrap(),
        ),
    ];
    for (name, err) in cases {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn structural_gradients() {
    let mut r = rng(18);
    let a = rand_tensor(&[2, 3, 2, 2], &mut r);
    let b = rand_tensor(&[2, 5, 2, 2], &mut r);
    let e1 = check_inputs(&[a.clone(), b.clone()], |t, v| t.concat(v[0], v[1]), 1).unwrap();
    let e2 = check_inputs(std::slice::from_ref(&b), |t, v| t.narrow(v[0], 1, 3), 1).unwrap();
    let e3 = check_inputs(
        &[rand_tensor(&[1, 3, 2, 1], &mut r)],
        |t, v| t.tile(v[0], 2, 3, 4),
        1,
    )
    .unwrap();
    assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
}

#[test]
fn affine_and_linear_gradients() {
    let mut r = rng(19);
    let x = rand_tensor(&[2, 3, 2, 3], &mut r);
    let per_channel = [
        x.clone(),
        rand_tensor(&[3], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    let per_item = [
        x,
        rand_tensor(&[2, 3], &mut r),
        rand_tensor(&[2, 3], &mut r),
    ];
    let e1 = check_inputs(&per_channel, |t, v| t.channel_affine(v[0], v[1], v[2]), 1).unwrap();
    let e2 = check_inputs(&per_item, |t, v| t.channel_affine(v[0], v[1], v[2]), 1).unwrap();
    let lin = [
        rand_tensor(&[3, 4], &mut r),
        rand_tensor(&[5, 4], &mut r),
        rand_tensor(&[5], &mut r),
    ];
    let e3 = check_inputs(&lin, |t, v| t.linear(v[0], v[1], Some(v[2])), 1).unwrap();
    assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
}

#[test]
fn rate_gradient_wrt_all_arguments() {
    let mut r = rng(20);
    let z = rand_tensor(&[2, 2, 3, 3], &mut r).map(|v| 3.0 * v);
    let mean = rand_tensor(&[2, 2, 3, 3], &mut r);
    let sigma = rand_tensor(&[2, 2, 3, 3], &mut r).map(|v| 0.3 + (v + 1.0));
    let err = check_inputs(&[z, mean, sigma], |t, v| t.rate_nats(v[0], v[1], v[2]), 4).unwrap();
    assert!(err < TOL, "{err}");
}
