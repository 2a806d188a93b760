mod common;

use common::{dataset, k, small_model_config};
use nalgebra::Matrix4;
use proptest::prelude::*;
use radcam_core::calibnet::{LossConfig, Model};
use radcam_core::cascade::*;
use radcam_core::dataset::Sample;
use radcam_core::geometry::{geodesic_angle, recover_calibration, EulerTPR, Extrinsic, UnitQuaternion};
use radcam_core::rngs::derive_rng;
use radcam_core::CoreError;

fn small_model(seed: u64) -> Model<f32> {
    Model::build(&small_model_config(), &mut derive_rng(seed, "test-init", 0)).unwrap()
}

fn train_cfg(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn quat(tilt: f64, pan: f64, roll: f64) -> UnitQuaternion {
    UnitQuaternion::from_euler(EulerTPR::new(tilt, pan, roll))
}

fn same_rotation(a: &UnitQuaternion, b: &UnitQuaternion, tol: f64) -> bool {
    a.dot(b).abs() > 1.0 - tol
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let ds = dataset();
    let model = small_model(1);
    let (out, history) = train_stage(model.clone(), &ds.train, &ds.val, &LossConfig::default(), &train_cfg(0)).unwrap();
    assert_eq!(out, model);
    assert_eq!(history, TrainHistory::default());
}

#[test]
fn empty_split_is_rejected() {
    let ds = dataset();
    let err = train_stage(small_model(1), &[], &ds.val, &LossConfig::default(), &train_cfg(1)).unwrap_err();
    assert!(matches!(err, CoreError::EmptyDataset));
    let err = train_stage(small_model(1), &ds.train, &[], &LossConfig::default(), &train_cfg(1)).unwrap_err();
    assert!(matches!(err, CoreError::EmptyDataset));
}

#[test]
fn frozen_weights_follow_the_flat_loss_schedule() {
    // A zero learning rate leaves the weights untouched, so every epoch
    // sees exactly the same validation loss.
    let ds = dataset();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..train_cfg(50)
    };
    let model = small_model(2);
    let (out, history) = train_stage(model.clone(), &ds.train[..16], &ds.val, &LossConfig::default(), &cfg).unwrap();
    assert_eq!(history.lr_reductions, vec![6, 11]);
    assert_eq!(history.stopped_early_at, Some(11));
    assert_eq!(history.epochs.len(), 11);
    assert_eq!(history.best_epoch, Some(1));
    assert!(history.epochs.iter().all(|e| e.val_loss == history.epochs[0].val_loss));
    assert_eq!(out, model);
}

#[test]
fn training_is_deterministic_and_schedule_monotone() {
    let ds = dataset();
    let run = || {
        train_stage(
            small_model(3),
            &ds.train,
            &ds.val,
            &LossConfig::default(),
            &train_cfg(3),
        )
        .unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert_eq!(ha.epochs.len(), 3);
    assert!(ha.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    let best = ha.best_epoch.unwrap();
    assert!(ha.stopped_early_at.unwrap_or(ha.epochs.len()) >= best);
    let best_val = ha.best_val_loss().unwrap();
    assert!(ha.epochs.iter().all(|e| e.val_loss >= best_val));
}

#[test]
fn oracle_coarse_stage_leaves_identity_residuals() {
    let ds = dataset();
    let transformed = transform_with_stage(&Stage::Oracle, &ds.train, &k()).unwrap();
    for s in &transformed {
        assert!(geodesic_angle(&UnitQuaternion::IDENTITY, &s.label) < 1e-6);
        assert!((s.h_init.rotation() - s.h_gt.rotation()).abs().max() < 1e-9);
    }

    let cascade = train_fine_stage(
        Stage::Oracle,
        None,
        &ds.train,
        &ds.val,
        &k(),
        &small_model_config(),
        &LossConfig::default(),
        &train_cfg(15),
    )
    .unwrap();
    let summary = cascade.metadata.transform.unwrap();
    assert!(summary.train_label_deg_after < 1e-6);
    assert!(summary.val_label_deg_before > 1.0);

    let fine = cascade.metadata.fine_history.as_ref().unwrap();
    assert!(fine.best_val_loss().unwrap() < fine.initial_val_loss.unwrap());

    // The fine stage has learned to (almost) leave things alone.
    let obs: Vec<Observation> = ds.test.iter().map(Observation::from_sample).collect();
    let results = infer_batch(&cascade, &obs, &k()).unwrap();
    let fine_deg: f64 = results
        .iter()
        .map(|r| geodesic_angle(&UnitQuaternion::IDENTITY, &r.q_fine))
        .sum::<f64>()
        / results.len() as f64;
    let initial_deg: f64 = ds
        .test
        .iter()
        .map(|s| geodesic_angle(&s.h_init.rotation_quaternion(), &s.h_gt.rotation_quaternion()))
        .sum::<f64>()
        / ds.test.len() as f64;
    assert!(fine_deg < 1.0, "fine stage still corrects by {fine_deg} deg");
    assert!(fine_deg < initial_deg);
}

#[test]
fn identity_coarse_stage_keeps_dataset_and_fine_stage_learns() {
    let ds = dataset();
    let transformed = transform_with_stage(&Stage::Identity, &ds.train, &k()).unwrap();
    for (a, b) in transformed.iter().zip(&ds.train) {
        assert_eq!(a.radar, b.radar);
        assert!(same_rotation(&a.label, &b.label, 1e-12));
        assert!(a.h_init.max_abs_diff(&b.h_init) < 1e-12);
    }
    let cascade = train_fine_stage(
        Stage::Identity,
        None,
        &ds.train,
        &ds.val,
        &k(),
        &small_model_config(),
        &LossConfig::default(),
        &train_cfg(4),
    )
    .unwrap();
    let fine = cascade.metadata.fine_history.unwrap();
    assert!(fine.best_val_loss().unwrap() < fine.initial_val_loss.unwrap());
}

#[test]
fn identity_stubs_return_h_init() {
    let ds = dataset();
    let cascade = CascadeModel::stub(Stage::Identity, Stage::Identity);
    for s in &ds.test {
        let r = infer(&cascade, &Observation::from_sample(s), &k()).unwrap();
        assert_eq!(r.h_est, s.h_init);
    }
}

#[test]
fn exact_coarse_stage_recovers_ground_truth() {
    let ds = dataset();
    let cascade = CascadeModel::stub(Stage::Oracle, Stage::Identity);
    for s in &ds.test {
        let r = infer(&cascade, &Observation::from_sample(s), &k()).unwrap();
        assert!((r.h_est.rotation() - s.h_gt.rotation()).abs().max() < 1e-9);
        assert!(same_rotation(&r.q_coarse, &s.label, 1e-12));
    }
}

#[test]
fn oracle_needs_ground_truth() {
    let s = &dataset().test[0];
    let obs = Observation {
        h_gt: None,
        ..Observation::from_sample(s)
    };
    let cascade = CascadeModel::stub(Stage::Oracle, Stage::Identity);
    assert!(infer(&cascade, &obs, &k()).is_err());
}

#[test]
fn second_stage_sees_reprojected_radar() {
    let ds = dataset();
    let a = quat(3.0, -2.0, 1.0);
    let s = &ds.test[0];
    let cascade = CascadeModel::stub(Stage::Fixed(a), Stage::Oracle);
    let r = infer(&cascade, &Observation::from_sample(s), &k()).unwrap();
    // An oracle fine stage needs the corrected calibration as its input.
    assert!((r.h_est.rotation() - s.h_gt.rotation()).abs().max() < 1e-9);
    assert!(
        (r.h_coarse.to_matrix4() - (Extrinsic::from_quaternion(&a, Default::default()) * s.h_init).to_matrix4())
            .abs()
            .max()
            < 1e-12
    );
}

fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
    (-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0).prop_map(|(t, p, r)| quat(t, p, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_stages_compose_as_matrix_products(a in arb_quat(), b in arb_quat(), idx in 0usize..16) {
        let s = &dataset().test[idx];
        let cascade = CascadeModel::stub(Stage::Fixed(a), Stage::Fixed(b));
        let r = infer(&cascade, &Observation::from_sample(s), &k()).unwrap();
        let to4 = |q: &UnitQuaternion| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&q.to_rotation_matrix());
            m
        };
        let expected = to4(&b) * to4(&a) * s.h_init.to_matrix4();
        prop_assert!((r.h_est.to_matrix4() - expected).abs().max() < 1e-9);
        let via_geometry = recover_calibration(&s.h_init, &[r.q_coarse, r.q_fine]);
        prop_assert!(r.h_est.max_abs_diff(&via_geometry) < 1e-9);
    }

    #[test]
    fn residual_labels_compose_back(a in arb_quat()) {
        let ds = dataset();
        let transformed = transform_with_stage(&Stage::Fixed(a), &ds.train[..8], &k()).unwrap();
        for (new, old) in transformed.iter().zip(&ds.train) {
            prop_assert!(same_rotation(&(new.label * a), &old.label, 1e-12));
        }
    }

    #[test]
    fn symmetric_corrections_average_to_truth(truth in arb_quat(), e in arb_quat(), coarse in arb_quat()) {
        let h_init = dataset().test[0].h_init;
        // Totals truth*e and truth*e^-1, split into coarse and fine parts.
        let fine_for = |total: UnitQuaternion| total * coarse.inverse();
        let window = [
            (coarse, fine_for(truth * e)),
            (coarse, fine_for(truth * e.inverse())),
        ];
        let refined = temporal_refine(&window, &h_init).unwrap();
        let expected = recover_calibration(&h_init, &[truth]);
        prop_assert!(refined.max_abs_diff(&expected) < 1e-9);
    }
}

#[test]
fn temporal_window_of_one_or_identical_frames_matches_infer() {
    let ds = dataset();
    let s = &ds.test[3];
    let cascade = CascadeModel::stub(Stage::Fixed(quat(2.0, 4.0, -1.0)), Stage::Fixed(quat(-0.5, 0.3, 0.8)));
    let r = infer(&cascade, &Observation::from_sample(s), &k()).unwrap();
    let single = temporal_refine(&[(r.q_coarse, r.q_fine)], &s.h_init).unwrap();
    assert!(single.max_abs_diff(&r.h_est) < 1e-9);
    let many = temporal_refine(&[(r.q_coarse, r.q_fine); 7], &s.h_init).unwrap();
    assert!(many.max_abs_diff(&r.h_est) < 1e-9);
    assert!(matches!(temporal_refine(&[], &s.h_init), Err(CoreError::EmptyWindow)));
}

#[test]
fn run_directory_round_trip() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_cfg(1);
    let (model, history) = train_stage(
        small_model(4),
        &ds.train[..16],
        &ds.val[..8],
        &LossConfig::default(),
        &cfg,
    )
    .unwrap();
    let mut cascade = CascadeModel::stub(Stage::Network(model), Stage::Identity);
    cascade.model_config = small_model_config();
    cascade.metadata.coarse_history = Some(history.clone());
    save_cascade(&cascade, dir.path()).unwrap();

    let loaded = load_cascade(dir.path()).unwrap();
    assert!(matches!(loaded.fine, Stage::Identity));
    assert_eq!(loaded.metadata, cascade.metadata);
    let test: Vec<Sample> = ds.test[..4].to_vec();
    assert_eq!(
        loaded.coarse.predict_samples(&test).unwrap(),
        cascade.coarse.predict_samples(&test).unwrap()
    );

    let rows = read_history(&dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "coarse");
    assert_eq!(rows[0].1, history.epochs[0]);
}
