//! Two-stage residual training and inference.
//!
//! A coarse network learns the full correction `Phi_dec^-1`. Its predictions
//! are folded into every training sample (corrected `H_init`, reprojected
//! radar, residual label) and a fine network of the same shape is trained on
//! what remains. At inference the two corrections are applied in sequence
//! with a reprojection in between.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use radcam_nn::{adam_step, AdamState, Tape, Tensor};

use crate::calibnet::{normalize_output, Batch, LossConfig, Model, ModelConfig};
use crate::dataset::{project_all, transform_dataset, Sample, SparseRadarMatrix};
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{geodesic_angle, quat_mean, recover_calibration, CameraIntrinsics, Extrinsic, UnitQuaternion};
use crate::rngs::{derive_rng, splitmix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate is reduced.
    pub plateau_patience: usize,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    /// A validation loss counts as an improvement only if it beats the best
    /// so far by more than this.
    pub min_improvement: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            plateau_factor: 0.2,
            plateau_patience: 5,
            early_stop_patience: 10,
            min_improvement: 1e-6,
            batch_size: 16,
            max_epochs: 150,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("train.learning_rate", "must be finite and non-negative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(invalid("train.plateau_factor", "must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 {
            return Err(invalid("train.plateau_patience", "must be at least 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(invalid("train.early_stop_patience", "must be at least 1"));
        }
        if !(self.min_improvement.is_finite() && self.min_improvement >= 0.0) {
            return Err(invalid("train.min_improvement", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// What the schedule decided after one epoch's validation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub reduced_lr: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning rate with early stopping.
///
/// Both counters reset on an improvement. A learning-rate reduction resets
/// only the plateau counter, so under a flat loss with patiences 5 and 10
/// the rate drops after epochs 6 and 11 and training stops after epoch 11.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    learning_rate: f64,
    factor: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    min_improvement: f64,
    best: f64,
    since_plateau_reset: usize,
    since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            min_improvement: cfg.min_improvement,
            best: f64::INFINITY,
            since_plateau_reset: 0,
            since_improvement: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        if val_loss < self.best - self.min_improvement {
            self.best = val_loss;
            self.since_plateau_reset = 0;
            self.since_improvement = 0;
            return ScheduleStep {
                improved: true,
                ..Default::default()
            };
        }
        self.since_plateau_reset += 1;
        self.since_improvement += 1;
        let mut step = ScheduleStep::default();
        if self.since_plateau_reset >= self.plateau_patience {
            self.learning_rate *= self.factor;
            self.since_plateau_reset = 0;
            step.reduced_lr = true;
        }
        step.stop = self.since_improvement >= self.early_stop_patience;
        step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss of the initial weights.
    pub initial_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Epochs after which the learning rate was reduced.
    pub lr_reductions: Vec<usize>,
    pub stopped_early_at: Option<usize>,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best).map(|e| e.val_loss)
    }
}

/// Mean per-sample loss of the raw network outputs, dropout off.
pub fn dataset_loss(model: &Model<f32>, samples: &[Sample], loss: &LossConfig, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let sums = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let out = model.predict(&Batch::from_samples(&refs)?)?;
            out.iter()
                .zip(chunk)
                .map(|(o, s)| loss.value(&s.label, o))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

/// Train one network with Adam, reduce-on-plateau and early stopping.
/// Returns the weights of the epoch with the best validation loss.
pub fn train_stage(
    model: Model<f32>,
    train: &[Sample],
    val: &[Sample],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainHistory)> {
    cfg.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }

    let mut model = model;
    let mut params = model.tensors();
    let mut best_params = params.clone();
    let mut adam = AdamState::new(&params, cfg.learning_rate);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();

    history.initial_val_loss = Some(dataset_loss(&model, val, loss, cfg.batch_size)?);
    log::info!("initial val loss {:.6}", history.initial_val_loss.unwrap_or(f64::NAN));

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = schedule.learning_rate();
        adam.learning_rate = lr;
        order.sort_unstable();
        order.shuffle(&mut derive_rng(cfg.seed, "shuffle", epoch as u64));
        let mut dropout_rng = derive_rng(cfg.seed, "dropout", epoch as u64);

        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<UnitQuaternion> = refs.iter().map(|s| s.label).collect();
            let batch = Batch::from_samples(&refs)?;
            let mut tape = Tape::new();
            let (out, vars) = model.forward(&mut tape, &batch, true, &mut dropout_rng)?;
            let l = loss.on_tape(&mut tape, out, &labels)?;
            let batch_loss = tape.value(l).item() as f64;
            if !batch_loss.is_finite() {
                return Err(CoreError::NonFinite(format!("training loss in epoch {epoch}")));
            }
            loss_sum += batch_loss * refs.len() as f64;
            let mut grads = tape.backward(l)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_step(&mut params, &grads, &mut adam)?;
            model.set_tensors(params.clone())?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = dataset_loss(&model, val, loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(CoreError::NonFinite(format!("validation loss in epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let step = schedule.observe(val_loss);
        if step.improved {
            best_params.clone_from(&params);
            history.best_epoch = Some(epoch);
        }
        if step.reduced_lr {
            history.lr_reductions.push(epoch);
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.2e} ({:.1}s){}",
            started.elapsed().as_secs_f64(),
            if step.improved { " *" } else { "" }
        );
        if step.stop {
            history.stopped_early_at = Some(epoch);
            break;
        }
    }
    model.set_tensors(best_params)?;
    Ok((model, history))
}

/// One stage of the cascade. Besides a trained network, fixed stand-ins are
/// available for testing and for ablations.
#[derive(Clone, Debug)]
pub enum Stage {
    Network(Model<f32>),
    /// Always predicts no correction.
    Identity,
    /// Always predicts the same correction.
    Fixed(UnitQuaternion),
    /// Predicts the exact correction from the ground truth carried by the
    /// input.
    Oracle,
}

/// What a stage sees for one sample.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub image: &'a [f32],
    pub radar: &'a SparseRadarMatrix,
    pub h_init: &'a Extrinsic,
    /// Needed only by [`Stage::Oracle`].
    pub h_gt: Option<&'a Extrinsic>,
}

impl<'a> StageInput<'a> {
    pub fn from_sample(s: &'a Sample) -> Self {
        Self {
            image: &s.image,
            radar: &s.radar,
            h_init: &s.h_init,
            h_gt: Some(&s.h_gt),
        }
    }
}

/// Batch size for inference-only forward passes.
const PREDICT_BATCH: usize = 16;

impl Stage {
    pub fn kind(&self) -> StageKind {
        match self {
            Stage::Network(_) => StageKind::Network,
            Stage::Identity => StageKind::Identity,
            Stage::Fixed(q) => StageKind::Fixed(*q),
            Stage::Oracle => StageKind::Oracle,
        }
    }

    /// Normalized corrections, one per input, in input order.
    pub fn predict(&self, inputs: &[StageInput]) -> Result<Vec<UnitQuaternion>> {
        match self {
            Stage::Identity => Ok(vec![UnitQuaternion::IDENTITY; inputs.len()]),
            Stage::Fixed(q) => Ok(vec![*q; inputs.len()]),
            Stage::Oracle => inputs
                .iter()
                .map(|inp| {
                    let h_gt = inp
                        .h_gt
                        .ok_or_else(|| invalid("stage", "oracle stage needs ground truth"))?;
                    let r = h_gt.rotation() * inp.h_init.rotation().transpose();
                    Ok(UnitQuaternion::from_rotation_matrix(&r).canonical())
                })
                .collect(),
            Stage::Network(model) => {
                let chunks = inputs
                    .par_chunks(PREDICT_BATCH)
                    .map(|chunk| {
                        let images: Vec<&[f32]> = chunk.iter().map(|i| i.image).collect();
                        let radar: Vec<&SparseRadarMatrix> = chunk.iter().map(|i| i.radar).collect();
                        model
                            .predict(&Batch::from_parts(&images, &radar)?)?
                            .iter()
                            .map(normalize_output)
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
        }
    }

    pub fn predict_samples(&self, samples: &[Sample]) -> Result<Vec<UnitQuaternion>> {
        let inputs: Vec<StageInput> = samples.iter().map(StageInput::from_sample).collect();
        self.predict(&inputs)
    }
}

/// Serializable description of a stage; network weights live in a separate
/// checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Network,
    Identity,
    Fixed(UnitQuaternion),
    Oracle,
}

/// Mean rotation angle of the labels before and after the first-stage
/// transformation, in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformSummary {
    pub train_label_deg_before: f64,
    pub train_label_deg_after: f64,
    pub val_label_deg_before: f64,
    pub val_label_deg_after: f64,
}

fn mean_label_angle(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| geodesic_angle(&UnitQuaternion::IDENTITY, &s.label))
        .sum::<f64>()
        / samples.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeMetadata {
    pub coarse_history: Option<TrainHistory>,
    pub fine_history: Option<TrainHistory>,
    pub transform: Option<TransformSummary>,
}

/// Coarse and fine stages sharing one architecture, loss and schedule.
#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub coarse: Stage,
    pub fine: Stage,
    pub model_config: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub metadata: CascadeMetadata,
}

impl CascadeModel {
    /// A cascade of fixed stages, for tests and baselines.
    pub fn stub(coarse: Stage, fine: Stage) -> Self {
        Self {
            coarse,
            fine,
            model_config: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            metadata: CascadeMetadata::default(),
        }
    }
}

fn stage_config(cfg: &TrainConfig, stage: u64) -> TrainConfig {
    TrainConfig {
        seed: splitmix64(cfg.seed ^ stage),
        ..cfg.clone()
    }
}

fn fresh_model(model_cfg: &ModelConfig, cfg: &TrainConfig, stage: u64) -> Result<Model<f32>> {
    Model::build(model_cfg, &mut derive_rng(cfg.seed, "init", stage))
}

/// Fold a stage's predictions into `samples`.
pub fn transform_with_stage(stage: &Stage, samples: &[Sample], k: &CameraIntrinsics) -> Result<Vec<Sample>> {
    let predictions = stage.predict_samples(samples)?;
    transform_dataset(samples, &predictions, k)
}

/// Train both stages from scratch.
pub fn train_cascade(
    train: &[Sample],
    val: &[Sample],
    k: &CameraIntrinsics,
    model_cfg: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<CascadeModel> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    log::info!("training coarse stage on {} samples", train.len());
    let model = fresh_model(model_cfg, cfg, 1)?;
    let (coarse, history) = train_stage(model, train, val, loss, &stage_config(cfg, 1))?;
    train_fine_stage(
        Stage::Network(coarse),
        Some(history),
        train,
        val,
        k,
        model_cfg,
        loss,
        cfg,
    )
}

/// Train the fine stage on top of a given coarse stage.
#[allow(clippy::too_many_arguments)]
pub fn train_fine_stage(
    coarse: Stage,
    coarse_history: Option<TrainHistory>,
    train: &[Sample],
    val: &[Sample],
    k: &CameraIntrinsics,
    model_cfg: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<CascadeModel> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let train2 = transform_with_stage(&coarse, train, k)?;
    let val2 = transform_with_stage(&coarse, val, k)?;
    let transform = TransformSummary {
        train_label_deg_before: mean_label_angle(train),
        train_label_deg_after: mean_label_angle(&train2),
        val_label_deg_before: mean_label_angle(val),
        val_label_deg_after: mean_label_angle(&val2),
    };
    log::info!(
        "residual labels: train {:.3} -> {:.3} deg, val {:.3} -> {:.3} deg",
        transform.train_label_deg_before,
        transform.train_label_deg_after,
        transform.val_label_deg_before,
        transform.val_label_deg_after
    );
    log::info!("training fine stage");
    let model = fresh_model(model_cfg, cfg, 2)?;
    let (fine, fine_history) = train_stage(model, &train2, &val2, loss, &stage_config(cfg, 2))?;
    Ok(CascadeModel {
        coarse,
        fine: Stage::Network(fine),
        model_config: model_cfg.clone(),
        loss: *loss,
        train: cfg.clone(),
        metadata: CascadeMetadata {
            coarse_history,
            fine_history: Some(fine_history),
            transform: Some(transform),
        },
    })
}

/// Everything inference needs for one frame.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub image: &'a [f32],
    /// Radar matrix under `h_init`.
    pub radar: &'a SparseRadarMatrix,
    /// Raw detections in the radar frame, for reprojection.
    pub detections: &'a [[f64; 3]],
    pub h_init: &'a Extrinsic,
    pub h_gt: Option<&'a Extrinsic>,
}

impl<'a> Observation<'a> {
    pub fn from_sample(s: &'a Sample) -> Self {
        Self {
            image: &s.image,
            radar: &s.radar,
            detections: &s.detections,
            h_init: &s.h_init,
            h_gt: Some(&s.h_gt),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    /// Calibration after both stages.
    pub h_est: Extrinsic,
    /// Calibration after the coarse stage only.
    pub h_coarse: Extrinsic,
    pub q_coarse: UnitQuaternion,
    pub q_fine: UnitQuaternion,
}

/// Run both stages on many frames, reprojecting between them.
pub fn infer_batch(cascade: &CascadeModel, obs: &[Observation], k: &CameraIntrinsics) -> Result<Vec<Inference>> {
    let first: Vec<StageInput> = obs
        .iter()
        .map(|o| StageInput {
            image: o.image,
            radar: o.radar,
            h_init: o.h_init,
            h_gt: o.h_gt,
        })
        .collect();
    let q_coarse = cascade.coarse.predict(&first)?;
    let h_coarse: Vec<Extrinsic> = obs
        .iter()
        .zip(&q_coarse)
        .map(|(o, q)| recover_calibration(o.h_init, &[*q]))
        .collect();
    let radar: Vec<SparseRadarMatrix> = obs
        .par_iter()
        .zip(&h_coarse)
        .map(|(o, h)| SparseRadarMatrix::from_projections(&project_all(k, h, o.detections), k))
        .collect();
    let second: Vec<StageInput> = obs
        .iter()
        .zip(&h_coarse)
        .zip(&radar)
        .map(|((o, h), r)| StageInput {
            image: o.image,
            radar: r,
            h_init: h,
            h_gt: o.h_gt,
        })
        .collect();
    let q_fine = cascade.fine.predict(&second)?;
    Ok(obs
        .iter()
        .zip(h_coarse)
        .zip(q_coarse.into_iter().zip(q_fine))
        .map(|((o, h_coarse), (q_coarse, q_fine))| Inference {
            h_est: recover_calibration(o.h_init, &[q_coarse, q_fine]),
            h_coarse,
            q_coarse,
            q_fine,
        })
        .collect())
}

pub fn infer(cascade: &CascadeModel, obs: &Observation, k: &CameraIntrinsics) -> Result<Inference> {
    infer_batch(cascade, std::slice::from_ref(obs), k)?
        .pop()
        .ok_or_else(|| CoreError::Format("no inference result".into()))
}

/// Average the per-frame total corrections `q_fine * q_coarse` over a window
/// and apply the mean once to the shared `h_init`.
pub fn temporal_refine(corrections: &[(UnitQuaternion, UnitQuaternion)], h_init: &Extrinsic) -> Result<Extrinsic> {
    if corrections.is_empty() {
        return Err(CoreError::EmptyWindow);
    }
    let totals: Vec<UnitQuaternion> = corrections.iter().map(|(coarse, fine)| *fine * *coarse).collect();
    let mean = quat_mean(&totals)?;
    Ok(recover_calibration(h_init, &[mean]))
}

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CASCADE_FILE: &str = "cascade.json";

#[derive(Serialize, Deserialize)]
struct CascadeFile {
    coarse: StageKind,
    fine: StageKind,
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    metadata: CascadeMetadata,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct HistoryRow {
    stage: String,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    lr: f64,
}

fn save_stage(stage: &Stage, path: &Path) -> Result<()> {
    if let Stage::Network(model) = stage {
        model.save(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn load_stage(kind: StageKind, cfg: &ModelConfig, path: &Path) -> Result<Stage> {
    Ok(match kind {
        StageKind::Network => Stage::Network(Model::load(cfg, BufReader::new(File::open(path)?))?),
        StageKind::Identity => Stage::Identity,
        StageKind::Fixed(q) => Stage::Fixed(q),
        StageKind::Oracle => Stage::Oracle,
    })
}

/// Write checkpoints, `history.csv` and `cascade.json` into `dir`.
pub fn save_cascade(cascade: &CascadeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_stage(&cascade.coarse, &dir.join(STAGE1_CHECKPOINT))?;
    save_stage(&cascade.fine, &dir.join(STAGE2_CHECKPOINT))?;

    let file = CascadeFile {
        coarse: cascade.coarse.kind(),
        fine: cascade.fine.kind(),
        model: cascade.model_config.clone(),
        loss: cascade.loss,
        train: cascade.train.clone(),
        metadata: cascade.metadata.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(dir.join(CASCADE_FILE), json + "\n")?;

    let mut w = csv::Writer::from_path(dir.join(HISTORY_FILE)).map_err(csv_err)?;
    let stages = [
        ("coarse", &cascade.metadata.coarse_history),
        ("fine", &cascade.metadata.fine_history),
    ];
    let mut wrote = false;
    for (name, history) in stages {
        for e in history.iter().flat_map(|h| &h.epochs) {
            w.serialize(HistoryRow {
                stage: name.into(),
                epoch: e.epoch,
                train_loss: e.train_loss,
                val_loss: e.val_loss,
                lr: e.lr,
            })
            .map_err(csv_err)?;
            wrote = true;
        }
    }
    if !wrote {
        w.write_record(["stage", "epoch", "train_loss", "val_loss", "lr"])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cascade(dir: &Path) -> Result<CascadeModel> {
    let text = fs::read_to_string(dir.join(CASCADE_FILE))?;
    let file: CascadeFile =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{CASCADE_FILE}: {e}")))?;
    Ok(CascadeModel {
        coarse: load_stage(file.coarse, &file.model, &dir.join(STAGE1_CHECKPOINT))?,
        fine: load_stage(file.fine, &file.model, &dir.join(STAGE2_CHECKPOINT))?,
        model_config: file.model,
        loss: file.loss,
        train: file.train,
        metadata: file.metadata,
    })
}

/// Rows of a `history.csv` as `(stage, record)`.
pub fn read_history(path: &Path) -> Result<Vec<(String, EpochRecord)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<HistoryRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok((
                row.stage,
                EpochRecord {
                    epoch: row.epoch,
                    train_loss: row.train_loss,
                    val_loss: row.val_loss,
                    lr: row.lr,
                },
            ))
        })
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> CoreError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CoreError::Io(io),
            other => CoreError::Format(format!("{other:?}")),
        }
    } else {
        CoreError::Format(e.to_string())
    }
}
