use proptest::prelude::*;
use radcam_core::calibnet::*;
use radcam_core::dataset::{RadarEntry, SparseRadarMatrix, IMAGE_LEN};
use radcam_core::geometry::UnitQuaternion;
use radcam_core::CoreError;
use radcam_nn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model<T: radcam_nn::Element>(seed: u64) -> Model<T> {
    Model::build(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..IMAGE_LEN).map(|_| rng.random_range(-1.5f32..1.5)).collect()
}

fn radar_with(cells: &[(u16, u16, f32)]) -> SparseRadarMatrix {
    SparseRadarMatrix::from_entries(
        cells
            .iter()
            .map(|&(row, col, inv_depth)| RadarEntry { row, col, inv_depth })
            .collect(),
    )
    .unwrap()
}

#[test]
fn output_is_batch_by_four() {
    let m = model::<f32>(0);
    let img = vec![0.0f32; IMAGE_LEN];
    let radar = SparseRadarMatrix::default();
    let batch = Batch::<f32>::from_parts(&[&img, &img, &img], &[&radar, &radar, &radar]).unwrap();
    let mut tape = Tape::inference();
    let (out, _) = m
        .forward(&mut tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(tape.shape(out), &[3, 4]);
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    // backbone 3x3 convs: 4*3*9+4, 8*4*9+8, 16*8*9+16
    let backbone = 112 + 296 + 1168;
    // MlpConv: 5x5 conv + two 1x1 convs, each with bias and one PReLU slope
    let pointwise = 2 * (8 * 8 + 8 + 1);
    let mlpconv = (8 * 16 * 25 + 8 + 1) + pointwise + (8 * 8 * 25 + 8 + 1) + pointwise;
    // rgb features 19 x 30 x 8, radar features 75 x 120
    let embed = (50 * 4560 + 50 + 1) + (50 * 9000 + 50 + 1);
    let head = (512 * 100 + 512 + 1) + (256 * 512 + 256 + 1) + (4 * 256 + 4);
    let total = backbone + mlpconv + embed + head;
    assert_eq!(total, 868_858);
    assert_eq!(ModelConfig::default().parameter_count(), total);
    assert_eq!(model::<f32>(0).parameter_count(), total);
    assert_eq!(ModelConfig::default().feature_extent(), (19, 30));
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(model::<f32>(5), model::<f32>(5));
    assert_ne!(model::<f32>(5), model::<f32>(6));
}

#[test]
fn invalid_head_is_rejected() {
    let cfg = ModelConfig {
        head: vec![512, 3],
        ..ModelConfig::default()
    };
    let err = Model::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, CoreError::ConfigInvalid { .. }));
}

#[test]
fn zero_inputs_give_finite_output() {
    let m = model::<f32>(1);
    let img = vec![0.0f32; IMAGE_LEN];
    let batch = Batch::<f32>::from_parts(&[&img], &[&SparseRadarMatrix::default()]).unwrap();
    let out = m.predict(&batch).unwrap();
    assert!(out[0].iter().all(|v| v.is_finite()));
}

#[test]
fn moving_a_radar_entry_changes_the_output() {
    let m = model::<f32>(2);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(2));
    let a = radar_with(&[(40, 100, 0.05), (60, 20, 0.02)]);
    // one cell to the right crosses into the neighbouring pooling window
    let b = radar_with(&[(40, 102, 0.05), (60, 20, 0.02)]);
    let out = m
        .predict(&Batch::<f32>::from_parts(&[&img, &img], &[&a, &b]).unwrap())
        .unwrap();
    assert_ne!(out[0], out[1]);
}

#[test]
fn identical_samples_give_identical_rows() {
    let m = model::<f32>(3);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(3));
    let r = radar_with(&[(10, 10, 0.1)]);
    let out = m
        .predict(&Batch::<f32>::from_parts(&[&img, &img, &img], &[&r, &r, &r]).unwrap())
        .unwrap();
    assert_eq!(out[0], out[1]);
    assert_eq!(out[1], out[2]);
}

#[test]
fn euclidean_point_values() {
    let q = UnitQuaternion::new(0.5, 0.5, 0.5, 0.5).unwrap();
    assert_eq!(loss_euclidean(&q, &q.to_array()), 0.0);
    assert_eq!(loss_euclidean(&UnitQuaternion::IDENTITY, &[0.0; 4]), 1.0);
    // differences 0.4, 0.3, 0.2, 0.1: squares sum to 0.30
    let got = loss_euclidean(&q, &[0.1, 0.2, 0.3, 0.4]);
    assert!((got - 0.30f64.sqrt()).abs() < 1e-15);
}

#[test]
fn geodesic_point_values() {
    let q = UnitQuaternion::new(0.3, -0.1, 0.8, 0.2).unwrap();
    let a = q.to_array();
    assert!(loss_geodesic(&q, &a, 0.005).unwrap().abs() < 1e-15);
    let twice = a.map(|v| 2.0 * v);
    assert!((loss_geodesic(&q, &twice, 0.005).unwrap() - 0.005).abs() < 1e-15);
    let neg = a.map(|v| -v);
    assert!(loss_geodesic(&q, &neg, 0.005).unwrap().abs() < 1e-15);
    assert!(matches!(
        loss_geodesic(&q, &[1e-9, 0.0, 0.0, 0.0], 0.005),
        Err(CoreError::DegenerateNorm(_))
    ));
}

fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 0.01)
        .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z).unwrap().canonical())
}

fn finite_diff(f: impl Fn(&[f64; 4]) -> f64, at: &[f64; 4]) -> [f64; 4] {
    let h = 1e-6;
    std::array::from_fn(|i| {
        let mut up = *at;
        let mut down = *at;
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

fn rel_err(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_sign_invariant(q in arb_quat(), raw in prop::array::uniform4(-2.0f64..2.0)) {
        prop_assume!(raw.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        prop_assert!(loss_euclidean(&q, &raw) >= 0.0);
        let g = loss_geodesic(&q, &raw, 0.005).unwrap();
        prop_assert!(g >= -1e-15);
        let neg = raw.map(|v| -v);
        prop_assert!((g - loss_geodesic(&q, &neg, 0.005).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences(q in arb_quat(), raw in prop::array::uniform4(-2.0f64..2.0)) {
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d: f64 = q.to_array().iter().zip(&raw).map(|(a, b)| a * b).sum();
        prop_assume!(d.abs() > 1e-3 && (n - 1.0).abs() > 1e-3 && n > 0.05);
        prop_assume!(loss_euclidean(&q, &raw) > 1e-3);
        let fd = finite_diff(|x| loss_euclidean(&q, x), &raw);
        prop_assert!(rel_err(&loss_euclidean_grad(&q, &raw), &fd) < 1e-3);
        let fd = finite_diff(|x| loss_geodesic(&q, x, 0.005).unwrap(), &raw);
        prop_assert!(rel_err(&loss_geodesic_grad(&q, &raw, 0.005).unwrap(), &fd) < 1e-3);
    }
}

#[test]
fn loss_on_tape_matches_gradient_check() {
    let labels = [
        UnitQuaternion::new(0.9, 0.1, -0.2, 0.1).unwrap(),
        UnitQuaternion::new(0.7, -0.3, 0.4, 0.2).unwrap(),
    ];
    let raw = Tensor::from_vec(&[2, 4], vec![0.5, 0.3, -0.1, 0.4, 1.3, -0.2, 0.6, 0.1]).unwrap();
    for kind in [LossKind::Euclidean, LossKind::Geodesic] {
        let cfg = LossConfig { kind, alpha: 0.005 };
        let err = radcam_nn::grad_check(
            |tape, vars| Ok(cfg.on_tape(tape, vars[0], &labels).unwrap()),
            std::slice::from_ref(&raw),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{kind:?}: {err}");
    }
}

/// Backprop through the whole network against central differences on a
/// sample of parameter entries from every tensor.
#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m: Model<f64> = Model::build(&cfg, &mut rng).unwrap();
    let img = random_image(&mut rng);
    let radar = radar_with(&[(30, 40, 0.03), (80, 200, 0.05), (120, 121, 0.1)]);
    let batch = Batch::<f64>::from_parts(&[&img], &[&radar]).unwrap();
    let labels = [UnitQuaternion::new(0.95, 0.1, 0.2, -0.1).unwrap()];
    let loss = LossConfig {
        kind: LossKind::Geodesic,
        alpha: 0.005,
    };
    let eval = |model: &Model<f64>| {
        let mut tape = Tape::new();
        let (out, _) = model
            .forward(&mut tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let l = loss.on_tape(&mut tape, out, &labels).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let (out, vars) = m
        .forward(&mut tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let l = loss.on_tape(&mut tape, out, &labels).unwrap();
    let grads = tape.backward(l).unwrap();

    // small step so that perturbations rarely cross a ReLU kink among the ~10^5 units
    let h = 1e-7;
    let mut checked = 0;
    for (pi, (name, t)) in m.params().iter().enumerate() {
        let g = grads.get(vars[pi]).unwrap();
        // the largest-gradient entry plus a couple of random ones
        let argmax = (0..t.numel())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap();
        let mut picks = vec![argmax];
        picks.extend((0..2).map(|_| rng.random_range(0..t.numel())));
        for j in picks {
            let analytic = g.data()[j];
            if analytic.abs() < 1e-6 {
                continue;
            }
            let mut probe = m.clone();
            let orig = t.data()[j];
            probe.tensors_mut().nth(pi).unwrap().data_mut()[j] = orig + h;
            let up = eval(&probe);
            probe.tensors_mut().nth(pi).unwrap().data_mut()[j] = orig - h;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-3, "{name}[{j}]: analytic {analytic} numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} entries checked");
}

#[test]
fn one_small_step_does_not_increase_loss() {
    let mut m = model::<f32>(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng);
    let radar = radar_with(&[(50, 50, 0.04), (70, 150, 0.02)]);
    let batch = Batch::<f32>::from_parts(&[&img], &[&radar]).unwrap();
    let labels = [UnitQuaternion::new(0.98, 0.05, -0.1, 0.02).unwrap()];
    let loss = LossConfig::default();
    let eval = |model: &Model<f32>| loss.value(&labels[0], &model.predict(&batch).unwrap()[0]).unwrap();
    let before = eval(&m);
    let mut tape = Tape::new();
    let (out, vars) = m.forward(&mut tape, &batch, false, &mut rng).unwrap();
    let l = loss.on_tape(&mut tape, out, &labels).unwrap();
    let mut grads = tape.backward(l).unwrap();
    let grads: Vec<_> = vars.iter().map(|v| grads.take(*v).unwrap()).collect();
    let mut params = m.tensors();
    let mut adam = radcam_nn::AdamState::new(&params, 1e-4);
    radcam_nn::adam_step(&mut params, &grads, &mut adam).unwrap();
    m.set_tensors(params).unwrap();
    assert!(eval(&m) <= before, "{} > {before}", eval(&m));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let m = model::<f32>(9);
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    let back = Model::<f32>::load(&ModelConfig::default(), buf.as_slice()).unwrap();
    assert_eq!(back, m);
    let other = ModelConfig {
        embed_dim: 40,
        ..ModelConfig::default()
    };
    assert!(Model::<f32>::load(&other, buf.as_slice()).is_err());
}
