use proptest::prelude::*;
use radcam_nn::{grad_check, NnError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, ho, wo], out).unwrap()
}

#[test]
fn conv_of_ones_is_nine() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 9.0);
}

#[test]
fn identity_pointwise_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xt = rand_tensor(&[2, 3, 4, 5], &mut rng);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(xt.clone());
    let w = tape.constant(Tensor::from_vec(&[3, 3], eye).unwrap());
    let y = tape.conv1x1(x, w, None).unwrap();
    assert_eq!(tape.value(y), &xt);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let wt = rand_tensor(&[4, 3, 5, 5], &mut rng);
    let bt = rand_tensor(&[4], &mut rng);
    let expected = naive_conv(&xt, &wt, Some(bt.data()), 1, 0);

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(xt.cast());
    let w = tape.constant(wt.cast());
    let b = tape.constant(bt.cast());
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    assert!(tape.value(y).cast::<f64>().max_abs_diff(&expected) < 1e-5);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w, None, 1, 0),
        Err(NnError::ShapeMismatch { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_extent_and_values(
        seed in 0u64..1000,
        h in 3usize..12,
        w in 3usize..12,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&[2, 2, h, w], &mut rng);
        let wt = rand_tensor(&[3, 2, k, k], &mut rng);
        let expected = naive_conv(&xt, &wt, None, stride, pad);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt);
        let wv = tape.constant(wt);
        let y = tape.conv2d(x, wv, None, stride, pad).unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(tape.shape(y), &[2, 3, ho, wo][..]);
        prop_assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn depthwise_matches_per_channel_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = rand_tensor(&[2, 3, 7, 6], &mut rng);
    let wt = rand_tensor(&[3, 1, 3, 3], &mut rng);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(xt.clone());
    let w = tape.constant(wt.clone());
    let y = tape.depthwise_conv2d(x, w, None, 2, 1).unwrap();
    // channel c of the output equals a single-channel naive conv on channel c
    for c in 0..3 {
        let xc: Vec<f64> = (0..2)
            .flat_map(|s| xt.data()[(s * 3 + c) * 42..(s * 3 + c + 1) * 42].to_vec())
            .collect();
        let xc = Tensor::from_vec(&[2, 1, 7, 6], xc).unwrap();
        let wc = Tensor::from_vec(&[1, 1, 3, 3], wt.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let e = naive_conv(&xc, &wc, None, 2, 1);
        let plane = 4 * 3;
        for s in 0..2 {
            let got = &tape.value(y).data()[(s * 3 + c) * plane..(s * 3 + c + 1) * plane];
            let want = &e.data()[s * plane..(s + 1) * plane];
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn maxpool_small_block() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 2.5));
    let y = tape.maxpool2x2(x).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 2.5));
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    let gx = g.get(x).unwrap().data();
    for r in 0..4 {
        for c in 0..4 {
            let want = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(gx[r * 4 + c], want, "({r},{c})");
        }
    }
}

#[test]
fn maxpool_matches_brute_force_on_sparse_radar_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (150, 240);
    let mut grid = vec![0.0f32; h * w];
    for _ in 0..40 {
        grid[rng.random_range(0..h * w)] = rng.random_range(0.005..0.05);
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(&[1, 1, h, w], grid.clone()).unwrap());
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 75, 120]);
    for r in 0..75 {
        for c in 0..120 {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dr, dc)| grid[(2 * r + dr) * w + 2 * c + dc])
                .fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(tape.value(y).data()[r * 120 + c], m);
        }
    }
}

#[test]
fn maxpool_odd_extent_pads_with_neg_infinity() {
    let mut tape = Tape::<f32>::new();
    let x = tape
        .constant(Tensor::from_vec(&[1, 3, 3], vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0, -9.0]).unwrap());
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[-1.0, -3.0, -7.0, -9.0]);
}

#[test]
fn dense_hand_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::from_vec(&[3, 2], vec![1.0, 0.5, -1.0, 2.0, 0.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    let y = tape.dense(x, w, Some(b)).unwrap();
    // [1*1 + 2*0.5 + 0.1, -1 + 4 + 0.2, 0 + 6 + 0.3]
    let want = [2.1, 3.2, 6.3];
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prelu_negative_input() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(&[2], vec![-2.0, 3.0]).unwrap());
    let a = tape.param(Tensor::scalar(0.25));
    let y = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.5, 3.0]);
}

#[test]
fn dropout_inference_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::<f32>::new();
    let t = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 3.0, 4.5]).unwrap();
    let x = tape.constant(t.clone());
    let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
    assert_eq!(y, x);
    assert_eq!(tape.value(y), &t);
}

#[test]
fn dropout_training_scales_kept_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 20000], 1.0));
    let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
    let vals = tape.value(y).data();
    assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
    let kept = vals.iter().filter(|v| **v > 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.5).abs() < 0.02);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 2.0, 0.0, 5.0, 7.0]).unwrap());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(NnError::NonScalarLoss(_))));
}

#[test]
fn inference_tape_keeps_no_gradients() {
    let mut tape = Tape::<f32>::inference();
    let x = tape.param(Tensor::full(&[1, 3], 1.0));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_none());
}

// ---------------------------------------------------------------------------
// finite-difference checks, f64

const TOL: f64 = 1e-3;
const H: f64 = 1e-4;

/// Shift values away from 0 so ReLU/PReLU kinks are not straddled by +-H.
fn away_from_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    }
    t
}

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> radcam_nn::Result<Var>, params: &[Tensor<f64>]) {
    let err = grad_check(f, params, H).unwrap();
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn gradcheck_sum_squares_of_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = [
        rand_tensor(&[3, 5], &mut rng),
        rand_tensor(&[4, 5], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    check(
        |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            Ok(t.sum_squares(y))
        },
        &params,
    );
}

#[test]
fn gradcheck_strided_conv() {
    // backbone-like block: 3x3, stride 2, padding 1
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = [
        rand_tensor(&[2, 3, 9, 10], &mut rng),
        rand_tensor(&[4, 3, 3, 3], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            Ok(t.sum_squares(y))
        },
        &params,
    );
}

#[test]
fn gradcheck_same_padded_5x5_and_pointwise() {
    // MlpConv-like: 5x5 same padding followed by a 1x1
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = [
        rand_tensor(&[1, 2, 6, 7], &mut rng),
        rand_tensor(&[3, 2, 5, 5], &mut rng),
        rand_tensor(&[2, 3], &mut rng),
        rand_tensor(&[2], &mut rng),
    ];
    check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 2)?;
            let z = t.conv1x1(y, v[2], Some(v[3]))?;
            Ok(t.sum_squares(z))
        },
        &params,
    );
}

#[test]
fn gradcheck_depthwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let params = [
        rand_tensor(&[2, 3, 6, 5], &mut rng),
        rand_tensor(&[3, 1, 3, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    check(
        |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            Ok(t.sum_squares(y))
        },
        &params,
    );
}

#[test]
fn gradcheck_relu_prelu_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let params = [
        away_from_zero(rand_tensor(&[2, 2, 6, 8], &mut rng)),
        Tensor::scalar(0.25),
    ];
    check(
        |t, v| {
            let a = t.relu(v[0]);
            let b = t.prelu(v[0], v[1])?;
            let pa = t.maxpool2x2(a)?;
            let pb = t.maxpool2x2(b)?;
            let fa = t.flatten(pa)?;
            let fb = t.flatten(pb)?;
            let c = t.concat(&[fa, fb])?;
            Ok(t.sum_squares(c))
        },
        &params,
    );
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let params = [rand_tensor(&[2, 30], &mut rng)];
    check(
        |t, v| {
            // same seed on every evaluation, so the mask is fixed
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let y = t.dropout(v[0], 0.5, &mut r, true)?;
            Ok(t.sum_squares(y))
        },
        &params,
    );
}

#[test]
fn gradcheck_composite_conv_prelu_pool_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let params = [
        rand_tensor(&[2, 3, 12, 16], &mut rng),
        rand_tensor(&[4, 3, 3, 3], &mut rng),
        rand_tensor(&[4], &mut rng),
        Tensor::scalar(0.25),
        rand_tensor(&[5, 4 * 3 * 4], &mut rng),
        rand_tensor(&[5], &mut rng),
    ];
    let err = grad_check(
        |t, v| {
            let c = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let a = t.prelu(c, v[3])?;
            let p = t.maxpool2x2(a)?;
            let f = t.flatten(p)?;
            let d = t.dense(f, v[4], Some(v[5]))?;
            Ok(t.sum_squares(d))
        },
        &params,
        H,
    )
    .unwrap();
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(rand_tensor(&[2, 3, 20, 24], &mut rng).cast());
        let w = tape.param(rand_tensor(&[8, 3, 3, 3], &mut rng).cast());
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.dropout(y, 0.5, &mut rng, true).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
