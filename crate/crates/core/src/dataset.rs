//! Network-ready samples, dataset generation, on-disk format and the
//! inter-stage transform.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geometry::{
    apply_decalibration, project, recover_calibration, residual_label, sample_decalibration, CameraIntrinsics,
    DecalRanges, Decalibration, Extrinsic, ProjectedDetection, UnitQuaternion, Vec3,
};
use crate::image::RgbImage;
use crate::rngs::derive_rng;
use crate::scene::{simulate_frame, Frame, RadarModel, RigConfig, RigSpec, SceneConfig};

pub const INPUT_WIDTH: usize = 240;
pub const INPUT_HEIGHT: usize = 150;
pub const INPUT_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = INPUT_WIDTH * INPUT_HEIGHT * INPUT_CHANNELS;
pub const MIN_CORRESPONDENCES: usize = 10;
pub const MAX_DECAL_ATTEMPTS: usize = 20;
pub const SAMPLE_MAGIC: &[u8; 5] = b"RCAL1";
pub const FORMAT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;

/// One occupied cell of the radar input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarEntry {
    pub row: u16,
    pub col: u16,
    /// `1 / z_c` in 1/m.
    pub inv_depth: f32,
}

/// Sparse `INPUT_HEIGHT x INPUT_WIDTH` inverse-depth image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRadarMatrix {
    entries: Vec<RadarEntry>,
}

impl SparseRadarMatrix {
    /// Rasterize projections made with native intrinsics `k`. Out-of-image
    /// points are dropped; on a cell collision the nearer point wins.
    pub fn from_projections(projections: &[ProjectedDetection], k: &CameraIntrinsics) -> Self {
        let sx = INPUT_WIDTH as f64 / k.width as f64;
        let sy = INPUT_HEIGHT as f64 / k.height as f64;
        let mut cells: Vec<(u16, u16, f64)> = projections
            .iter()
            .filter(|p| p.in_image)
            .map(|p| {
                let col = ((p.u * sx).floor() as usize).min(INPUT_WIDTH - 1);
                let row = ((p.v * sy).floor() as usize).min(INPUT_HEIGHT - 1);
                (row as u16, col as u16, 1.0 / p.z_c)
            })
            .collect();
        cells.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(b.2.total_cmp(&a.2)));
        cells.dedup_by_key(|c| (c.0, c.1));
        Self {
            entries: cells
                .into_iter()
                .map(|(row, col, inv)| RadarEntry {
                    row,
                    col,
                    inv_depth: inv as f32,
                })
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<RadarEntry>) -> Result<Self> {
        let m = Self { entries };
        m.check()?;
        Ok(m)
    }

    pub fn entries(&self) -> &[RadarEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row-major dense grid with zeros in empty cells.
    pub fn densify_into(&self, out: &mut [f32]) {
        out.fill(0.0);
        for e in &self.entries {
            out[e.row as usize * INPUT_WIDTH + e.col as usize] = e.inv_depth;
        }
    }

    pub fn densify(&self) -> Vec<f32> {
        let mut out = vec![0.0; INPUT_WIDTH * INPUT_HEIGHT];
        self.densify_into(&mut out);
        out
    }

    /// Bounds, positivity, uniqueness and row-major order.
    pub fn check(&self) -> Result<()> {
        for e in &self.entries {
            if e.row as usize >= INPUT_HEIGHT || e.col as usize >= INPUT_WIDTH {
                return Err(CoreError::Format(format!(
                    "radar cell ({}, {}) out of range",
                    e.row, e.col
                )));
            }
            if !(e.inv_depth > 0.0 && e.inv_depth.is_finite()) {
                return Err(CoreError::Format(format!("inverse depth {} not positive", e.inv_depth)));
            }
        }
        if self
            .entries
            .windows(2)
            .any(|w| (w[0].row, w[0].col) >= (w[1].row, w[1].col))
        {
            return Err(CoreError::Format("radar entries not strictly row-major".into()));
        }
        Ok(())
    }
}

/// Detections that land in the image in front of the camera.
pub fn correspondence_count(projections: &[ProjectedDetection]) -> usize {
    projections.iter().filter(|p| p.z_c > 0.0 && p.in_image).count()
}

pub fn project_all(k: &CameraIntrinsics, h: &Extrinsic, points: &[[f64; 3]]) -> Vec<ProjectedDetection> {
    points.iter().map(|x| project(k, h, &Vec3::from(*x))).collect()
}

/// Bilinear resize with half-pixel centers to a channel-last float image.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> Vec<f32> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sh, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sw, width);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| raw[(yy * sw + xx) * 3 + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation of resized training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ImageStats {
    /// Population statistics over channel-last images, floored at 1e-6.
    pub fn compute<'a, I: IntoIterator<Item = &'a [f32]>>(images: I) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            n += img.len() / 3;
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n as f64);
        let std = std::array::from_fn(|c| {
            (sum_sq[c] / n as f64 - mean[c] * mean[c])
                .max(0.0)
                .sqrt()
                .max(STD_FLOOR)
        });
        Self { mean, std }
    }

    pub fn standardize(&self, img: &mut [f32]) {
        for px in img.chunks_exact_mut(3) {
            for ((v, mean), std) in px.iter_mut().zip(self.mean).zip(self.std) {
                *v = ((*v as f64 - mean) / std.max(STD_FLOOR)) as f32;
            }
        }
    }

    pub fn destandardize(&self, img: &mut [f32]) {
        for px in img.chunks_exact_mut(3) {
            for ((v, mean), std) in px.iter_mut().zip(self.mean).zip(self.std) {
                *v = (*v as f64 * std.max(STD_FLOOR) + mean) as f32;
            }
        }
    }
}

/// 8-bit image to standardized network input.
pub fn standardize_image(img: &RgbImage, stats: &ImageStats) -> Vec<f32> {
    let mut out = resize_bilinear(img, INPUT_WIDTH, INPUT_HEIGHT);
    stats.standardize(&mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// Standardized `INPUT_HEIGHT x INPUT_WIDTH x 3`, channel-last.
    pub image: Arc<Vec<f32>>,
    pub radar: SparseRadarMatrix,
    /// Canonical rotation of `Phi_dec^-1`.
    pub label: UnitQuaternion,
    pub h_gt: Extrinsic,
    pub h_init: Extrinsic,
    pub phi_dec: Decalibration,
    pub frame_id: u64,
    pub rig_id: String,
    /// Radar detections (radar frame) used for reprojection.
    pub detections: Arc<Vec<[f64; 3]>>,
}

impl Sample {
    pub fn correspondences(&self, k: &CameraIntrinsics) -> usize {
        correspondence_count(&project_all(k, &self.h_init, &self.detections))
    }
}

fn label_for(d: &Decalibration) -> UnitQuaternion {
    d.rotation.inverse().canonical()
}

fn assemble(
    image: Arc<Vec<f32>>,
    detections: Arc<Vec<[f64; 3]>>,
    frame_id: u64,
    rig_id: &str,
    rig: &RigConfig,
    d: &Decalibration,
) -> Option<Sample> {
    let h_init = apply_decalibration(&rig.h_gt, d);
    let projections = project_all(&rig.intrinsics, &h_init, &detections);
    if correspondence_count(&projections) < MIN_CORRESPONDENCES {
        return None;
    }
    Some(Sample {
        id: 0,
        image,
        radar: SparseRadarMatrix::from_projections(&projections, &rig.intrinsics),
        label: label_for(d),
        h_gt: rig.h_gt,
        h_init,
        phi_dec: *d,
        frame_id,
        rig_id: rig_id.to_owned(),
        detections,
    })
}

/// Decalibrate a frame rendered with `rig.h_gt`; `None` when fewer than
/// [`MIN_CORRESPONDENCES`] detections project into the image.
pub fn make_sample(frame: &Frame, rig: &RigConfig, d: &Decalibration, stats: &ImageStats) -> Option<Sample> {
    let detections: Vec<[f64; 3]> = frame.detections.iter().map(|d| d.x).collect();
    assemble(
        Arc::new(standardize_image(&frame.image, stats)),
        Arc::new(detections),
        frame.frame_id,
        &frame.rig_id,
        rig,
        d,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Everything needed to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub rig: RigSpec,
    pub scene: SceneConfig,
    pub radar: RadarModel,
    pub decalibration: DecalRanges,
    pub counts: SplitCounts,
    pub seed: u64,
    /// Independent decalibrations drawn per training frame. Each one becomes
    /// its own sample sharing the frame's image; validation and test frames
    /// always yield one sample.
    #[serde(default = "one")]
    pub train_decals_per_frame: usize,
}

fn one() -> usize {
    1
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.radar.validate()?;
        self.decalibration.validate()?;
        if self.counts.train == 0 {
            return Err(invalid("counts.train", "must be at least 1"));
        }
        if self.train_decals_per_frame == 0 {
            return Err(invalid("train_decals_per_frame", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub rig_id: String,
    pub rig: RigSpec,
    pub intrinsics: CameraIntrinsics,
    pub h_gt: Extrinsic,
    pub scene: SceneConfig,
    pub radar: RadarModel,
    pub decalibration: DecalRanges,
    pub counts: SplitCounts,
    #[serde(default = "one")]
    pub train_decals_per_frame: usize,
    /// Frames dropped per split after exhausting all decalibration attempts.
    pub skipped_frames: SplitCounts,
    pub seed: u64,
    pub stats: ImageStats,
    pub layout: String,
}

const LAYOUT: &str = "samples/{split}/{id:06}.bin: magic RCAL1, f32 image 150x240x3 row-major channel-last, \
u32 entry count + (u16 row, u16 col, f32 inv_depth) entries, f32 label (w,x,y,z), f32 H_gt[16], f32 H_init[16], \
all little-endian; samples/{split}/index.jsonl: per-sample f64 extrinsics, decalibration, frame id, rig id and \
radar detections";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.manifest.intrinsics
    }
}

/// One simulated frame with its accepted decalibrations.
struct RawFrame {
    image: Vec<f32>,
    detections: Vec<[f64; 3]>,
    frame_id: u64,
    decals: Vec<Decalibration>,
}

/// Simulate a frame and draw `decals` decalibrations for it, each retried
/// up to [`MAX_DECAL_ATTEMPTS`] times. `None` when any of them fails.
fn try_frame(cfg: &GenerationConfig, rig: &RigConfig, frame_id: u64, decals: usize) -> Result<Option<RawFrame>> {
    let mut rng = derive_rng(cfg.seed, "frame", frame_id);
    let frame = simulate_frame(frame_id, &cfg.rig.name, rig, &cfg.scene, &cfg.radar, &mut rng)?;
    let detections: Vec<[f64; 3]> = frame.detections.iter().map(|d| d.x).collect();
    let mut accepted = Vec::with_capacity(decals);
    for _ in 0..decals {
        let found = (0..MAX_DECAL_ATTEMPTS).find_map(|_| {
            let d = sample_decalibration(&cfg.decalibration, &mut rng);
            let h_init = apply_decalibration(&rig.h_gt, &d);
            let projections = project_all(&rig.intrinsics, &h_init, &detections);
            (correspondence_count(&projections) >= MIN_CORRESPONDENCES).then_some(d)
        });
        match found {
            Some(d) => accepted.push(d),
            None => return Ok(None),
        }
    }
    Ok(Some(RawFrame {
        image: resize_bilinear(&frame.image, INPUT_WIDTH, INPUT_HEIGHT),
        detections,
        frame_id,
        decals: accepted,
    }))
}

/// Fill one split with `target` samples starting at frame `next_frame`.
/// Frames are simulated in parallel batches; results are consumed in
/// frame-id order, so the output does not depend on the thread count.
fn generate_split(
    cfg: &GenerationConfig,
    rig: &RigConfig,
    split: SplitName,
    target: usize,
    next_frame: &mut u64,
) -> Result<(Vec<RawFrame>, usize)> {
    let per_frame = if split == SplitName::Train {
        cfg.train_decals_per_frame
    } else {
        1
    };
    let frames_needed = target.div_ceil(per_frame);
    let mut kept: Vec<RawFrame> = Vec::with_capacity(frames_needed);
    let mut samples = 0usize;
    let mut skipped = 0usize;
    let insufficient = |skipped: usize, kept: usize| CoreError::InsufficientFrames {
        split: split.as_str().into(),
        skipped,
        kept,
    };
    while samples < target {
        let batch = (target - samples).div_ceil(per_frame) as u64;
        let ids: Vec<u64> = (*next_frame..*next_frame + batch).collect();
        let results: Vec<Result<Option<RawFrame>>> =
            ids.par_iter().map(|&id| try_frame(cfg, rig, id, per_frame)).collect();
        for r in results {
            *next_frame += 1;
            match r? {
                Some(mut f) => {
                    f.decals.truncate(target - samples);
                    samples += f.decals.len();
                    kept.push(f);
                }
                None => skipped += 1,
            }
            if skipped > frames_needed {
                return Err(insufficient(skipped, kept.len()));
            }
            if samples == target {
                break;
            }
        }
    }
    if skipped > kept.len() {
        return Err(insufficient(skipped, kept.len()));
    }
    Ok((kept, skipped))
}

/// Standardized image, detections, frame id and the frame's decalibrations.
type SharedFrame = (Arc<Vec<f32>>, Arc<Vec<[f64; 3]>>, u64, Vec<Decalibration>);

/// Generate train, val and test splits from disjoint frames. Image
/// statistics come from the training split only.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rig = cfg.rig.build()?;
    let mut next_frame = 0u64;
    let mut raw = Vec::new();
    let mut skipped = [0usize; 3];
    for (i, (split, n)) in [
        (SplitName::Train, cfg.counts.train),
        (SplitName::Val, cfg.counts.val),
        (SplitName::Test, cfg.counts.test),
    ]
    .into_iter()
    .enumerate()
    {
        let (frames, sk) = generate_split(cfg, &rig, split, n, &mut next_frame)?;
        log::info!(
            "{}: {} samples from {} frames, {} frames skipped",
            split.as_str(),
            n,
            frames.len(),
            sk
        );
        skipped[i] = sk;
        raw.push(frames);
    }
    let stats = ImageStats::compute(raw[0].iter().map(|f| f.image.as_slice()));
    let mut splits = raw.into_iter().map(|frames| {
        let frames: Vec<SharedFrame> = frames
            .into_par_iter()
            .map(|mut f| {
                stats.standardize(&mut f.image);
                (Arc::new(f.image), Arc::new(f.detections), f.frame_id, f.decals)
            })
            .collect();
        frames
            .iter()
            .flat_map(|(image, detections, frame_id, decals)| {
                decals.iter().map(move |d| (image, detections, *frame_id, d))
            })
            .enumerate()
            .map(|(id, (image, detections, frame_id, d))| {
                let mut s = assemble(image.clone(), detections.clone(), frame_id, &cfg.rig.name, &rig, d)
                    .expect("decalibration was accepted during generation");
                s.id = id as u32;
                s
            })
            .collect::<Vec<_>>()
    });
    let (train, val, test) = (
        splits.next().expect("train"),
        splits.next().expect("val"),
        splits.next().expect("test"),
    );
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            rig_id: cfg.rig.name.clone(),
            rig: cfg.rig.clone(),
            intrinsics: rig.intrinsics,
            h_gt: rig.h_gt,
            scene: cfg.scene.clone(),
            radar: cfg.radar.clone(),
            decalibration: cfg.decalibration,
            counts: cfg.counts,
            train_decals_per_frame: cfg.train_decals_per_frame,
            skipped_frames: SplitCounts {
                train: skipped[0],
                val: skipped[1],
                test: skipped[2],
            },
            seed: cfg.seed,
            stats,
            layout: LAYOUT.into(),
        },
        train,
        val,
        test,
    })
}

/// Apply first-stage corrections: `H_init' = q_hat * H_init`, reproject,
/// relabel with the residual. Samples are kept regardless of how many
/// detections remain in the image.
pub fn transform_dataset(
    samples: &[Sample],
    predictions: &[UnitQuaternion],
    k: &CameraIntrinsics,
) -> Result<Vec<Sample>> {
    if samples.len() != predictions.len() {
        return Err(CoreError::PredictionCountMismatch {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    Ok(samples
        .par_iter()
        .zip(predictions.par_iter())
        .map(|(s, q)| {
            let h_init = recover_calibration(&s.h_init, &[*q]);
            let projections = project_all(k, &h_init, &s.detections);
            Sample {
                radar: SparseRadarMatrix::from_projections(&projections, k),
                label: residual_label(&s.label, q),
                phi_dec: Decalibration::from_extrinsic(&(h_init * s.h_gt.inverse())),
                h_init,
                ..s.clone()
            }
        })
        .collect())
}

/// Problems with a stored sample; empty when every invariant holds.
pub fn lint_sample(s: &Sample, k: &CameraIntrinsics, require_correspondences: bool) -> Vec<String> {
    let mut issues = Vec::new();
    if s.image.len() != IMAGE_LEN {
        issues.push(format!("image has {} values, expected {IMAGE_LEN}", s.image.len()));
    }
    if s.image.iter().any(|v| !v.is_finite()) {
        issues.push("image contains non-finite values".into());
    }
    let expected = label_for(&s.phi_dec);
    if (s.label.to_rotation_matrix() - expected.to_rotation_matrix()).amax() > 1e-9 || s.label.w() < 0.0 {
        issues.push("label is not the canonical inverse decalibration rotation".into());
    }
    if apply_decalibration(&s.h_gt, &s.phi_dec).max_abs_diff(&s.h_init) > 1e-9 {
        issues.push("H_init differs from Phi_dec * H_gt".into());
    }
    let projections = project_all(k, &s.h_init, &s.detections);
    if require_correspondences && correspondence_count(&projections) < MIN_CORRESPONDENCES {
        issues.push(format!("only {} correspondences", correspondence_count(&projections)));
    }
    if let Err(e) = s.radar.check() {
        issues.push(e.to_string());
    }
    if s.radar != SparseRadarMatrix::from_projections(&projections, k) {
        issues.push("radar matrix does not match the reprojected detections".into());
    }
    issues
}

pub fn lint_dataset(ds: &Dataset) -> Vec<String> {
    let mut issues = Vec::new();
    for split in SplitName::ALL {
        for s in ds.split(split) {
            for issue in lint_sample(s, ds.intrinsics(), true) {
                issues.push(format!("{}/{}: {issue}", split.as_str(), s.id));
            }
        }
    }
    let train: std::collections::HashSet<u64> = ds.train.iter().map(|s| s.frame_id).collect();
    for split in [SplitName::Val, SplitName::Test] {
        if ds.split(split).iter().any(|s| train.contains(&s.frame_id)) {
            issues.push(format!("{} shares frames with train", split.as_str()));
        }
    }
    let counts = [ds.train.len(), ds.val.len(), ds.test.len()];
    let m = ds.manifest.counts;
    if counts != [m.train, m.val, m.test] {
        issues.push(format!("manifest counts {m:?} differ from stored {counts:?}"));
    }
    issues
}

/// Bookkeeping stored next to the binary samples at full precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    id: u32,
    frame_id: u64,
    rig_id: String,
    label: UnitQuaternion,
    h_gt: Extrinsic,
    h_init: Extrinsic,
    phi_dec: Decalibration,
    detections: Vec<[f64; 3]>,
}

fn put_f32s<W: Write>(w: &mut W, vals: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_sample_bin<W: Write>(mut w: W, s: &Sample) -> Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    put_f32s(&mut w, s.image.iter().copied())?;
    w.write_all(&(s.radar.len() as u32).to_le_bytes())?;
    for e in s.radar.entries() {
        w.write_all(&e.row.to_le_bytes())?;
        w.write_all(&e.col.to_le_bytes())?;
        w.write_all(&e.inv_depth.to_le_bytes())?;
    }
    put_f32s(&mut w, s.label.to_array().map(|v| v as f32))?;
    put_f32s(&mut w, s.h_gt.row_major().map(|v| v as f32))?;
    put_f32s(&mut w, s.h_init.row_major().map(|v| v as f32))?;
    w.flush()?;
    Ok(())
}

/// Contents of a `.bin` sample file.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBin {
    pub image: Vec<f32>,
    pub radar: SparseRadarMatrix,
    pub label: [f32; 4],
    pub h_gt: [f32; 16],
    pub h_init: [f32; 16],
}

pub fn read_sample_bin<R: Read>(mut r: R) -> Result<SampleBin> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != SAMPLE_MAGIC {
        return Err(CoreError::VersionMismatch {
            expected: String::from_utf8_lossy(SAMPLE_MAGIC).into(),
            found: String::from_utf8_lossy(&magic).into(),
        });
    }
    let mut bytes = vec![0u8; IMAGE_LEN * 4];
    r.read_exact(&mut bytes)?;
    let image = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    if n > INPUT_WIDTH * INPUT_HEIGHT {
        return Err(CoreError::Format(format!("{n} radar entries exceed the grid")));
    }
    let mut entries = Vec::with_capacity(n);
    let mut rec = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut rec)?;
        entries.push(RadarEntry {
            row: u16::from_le_bytes([rec[0], rec[1]]),
            col: u16::from_le_bytes([rec[2], rec[3]]),
            inv_depth: f32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]),
        });
    }
    let mut floats = |out: &mut [f32]| -> Result<()> {
        for v in out.iter_mut() {
            r.read_exact(&mut word)?;
            *v = f32::from_le_bytes(word);
        }
        Ok(())
    };
    let mut label = [0f32; 4];
    let mut h_gt = [0f32; 16];
    let mut h_init = [0f32; 16];
    floats(&mut label)?;
    floats(&mut h_gt)?;
    floats(&mut h_init)?;
    Ok(SampleBin {
        image,
        radar: SparseRadarMatrix::from_entries(entries)?,
        label,
        h_gt,
        h_init,
    })
}

fn json_err(e: serde_json::Error) -> CoreError {
    CoreError::Format(e.to_string())
}

fn sample_path(dir: &Path, split: SplitName, id: u32) -> std::path::PathBuf {
    dir.join("samples").join(split.as_str()).join(format!("{id:06}.bin"))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for split in SplitName::ALL {
        let sdir = dir.join("samples").join(split.as_str());
        fs::create_dir_all(&sdir)?;
        let mut index = BufWriter::new(File::create(sdir.join("index.jsonl"))?);
        for s in ds.split(split) {
            write_sample_bin(BufWriter::new(File::create(sample_path(dir, split, s.id))?), s)?;
            let rec = IndexRecord {
                id: s.id,
                frame_id: s.frame_id,
                rig_id: s.rig_id.clone(),
                label: s.label,
                h_gt: s.h_gt,
                h_init: s.h_init,
                phi_dec: s.phi_dec,
                detections: s.detections.to_vec(),
            };
            serde_json::to_writer(&mut index, &rec).map_err(json_err)?;
            index.write_all(b"\n")?;
        }
        index.flush()?;
    }
    let manifest = serde_json::to_string_pretty(&ds.manifest).map_err(json_err)?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    if found != Some(FORMAT_VERSION as u64) {
        return Err(CoreError::VersionMismatch {
            expected: FORMAT_VERSION.to_string(),
            found: found.map_or_else(|| "none".into(), |v| v.to_string()),
        });
    }
    serde_json::from_value(value).map_err(json_err)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut splits = Vec::new();
    for split in SplitName::ALL {
        let sdir = dir.join("samples").join(split.as_str());
        let index = BufReader::new(File::open(sdir.join("index.jsonl"))?);
        let records: Vec<IndexRecord> = crate::scene::read_jsonl(index)?;
        // samples of one frame are consecutive and share one image in memory
        let groups: Vec<&[IndexRecord]> = records.chunk_by(|a, b| a.frame_id == b.frame_id).collect();
        let samples: Vec<Sample> = groups
            .into_par_iter()
            .map(|group| {
                let mut image: Option<Arc<Vec<f32>>> = None;
                group
                    .iter()
                    .map(|rec| {
                        let bin = read_sample_bin(BufReader::new(File::open(sample_path(dir, split, rec.id))?))?;
                        let stored = rec.h_init.row_major();
                        if bin.h_init.iter().zip(stored).any(|(a, b)| (*a as f64 - b).abs() > 1e-4) {
                            return Err(CoreError::Format(format!(
                                "{}/{}: index and sample disagree",
                                split.as_str(),
                                rec.id
                            )));
                        }
                        let shared = match &image {
                            Some(img) if **img == bin.image => img.clone(),
                            _ => {
                                let img = Arc::new(bin.image);
                                image = Some(img.clone());
                                img
                            }
                        };
                        Ok(Sample {
                            id: rec.id,
                            image: shared,
                            radar: bin.radar,
                            label: rec.label,
                            h_gt: rec.h_gt,
                            h_init: rec.h_init,
                            phi_dec: rec.phi_dec,
                            frame_id: rec.frame_id,
                            rig_id: rec.rig_id.clone(),
                            detections: Arc::new(rec.detections.clone()),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        splits.push(samples);
    }
    let test = splits.pop().expect("test");
    let val = splits.pop().expect("val");
    let train = splits.pop().expect("train");
    let counts = [train.len(), val.len(), test.len()];
    let m = manifest.counts;
    if counts != [m.train, m.val, m.test] {
        return Err(CoreError::Format(format!(
            "manifest counts {m:?} differ from files {counts:?}"
        )));
    }
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}
