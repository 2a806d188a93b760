//! Evaluation protocols and report output.
//!
//! Per-axis errors are the Euler angles (tilt, pan, roll convention of
//! [`UnitQuaternion::to_euler`]) of the residual rotation `R_est * R_gt^T`;
//! the total is that rotation's angle and does not depend on the convention.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{csv_err, infer_batch, temporal_refine, CascadeModel, Inference, Observation};
use crate::dataset::{project_all, ImageStats, Sample, SparseRadarMatrix, INPUT_HEIGHT, INPUT_WIDTH};
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{
    apply_decalibration, geodesic_angle, project, sample_decalibration, CameraIntrinsics, DecalRanges, Decalibration,
    Extrinsic, UnitQuaternion, Vec3,
};
use crate::image::RgbImage;
use crate::rngs::derive_rng;

/// Angular errors in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisErrors {
    pub tilt: f64,
    pub pan: f64,
    pub roll: f64,
    pub total: f64,
}

impl AxisErrors {
    pub fn abs(&self) -> Self {
        Self {
            tilt: self.tilt.abs(),
            pan: self.pan.abs(),
            roll: self.roll.abs(),
            total: self.total.abs(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.tilt, self.pan, self.roll, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn axis(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Tilt => self.tilt,
            Axis::Pan => self.pan,
            Axis::Roll => self.roll,
            Axis::Total => self.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Tilt,
    Pan,
    Roll,
    Total,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Tilt, Axis::Pan, Axis::Roll, Axis::Total];

    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Tilt => "tilt",
            Axis::Pan => "pan",
            Axis::Roll => "roll",
            Axis::Total => "total",
        }
    }
}

/// Signed per-axis residual angles plus the total rotation angle.
pub fn signed_axis_errors(h_est: &Extrinsic, h_gt: &Extrinsic) -> Result<AxisErrors> {
    let r_res = h_est.rotation() * h_gt.rotation().transpose();
    let q = UnitQuaternion::from_rotation_matrix(&r_res);
    let e = q.to_euler()?;
    Ok(AxisErrors {
        tilt: e.tilt,
        pan: e.pan,
        roll: e.roll,
        total: geodesic_angle(&UnitQuaternion::IDENTITY, &q),
    })
}

/// Absolute per-axis residual angles plus the total rotation angle.
pub fn axis_errors(h_est: &Extrinsic, h_gt: &Extrinsic) -> Result<AxisErrors> {
    signed_axis_errors(h_est, h_gt).map(|e| e.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStage {
    Initial,
    Coarse,
    Fine,
}

impl EvalStage {
    pub const ALL: [EvalStage; 3] = [EvalStage::Initial, EvalStage::Coarse, EvalStage::Fine];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalStage::Initial => "initial",
            EvalStage::Coarse => "coarse",
            EvalStage::Fine => "fine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Signed errors of one sample before correction, after the coarse stage
/// and after both stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u32,
    pub initial: AxisErrors,
    pub coarse: AxisErrors,
    pub fine: AxisErrors,
}

impl EvalRecord {
    pub fn stage(&self, stage: EvalStage) -> &AxisErrors {
        match stage {
            EvalStage::Initial => &self.initial,
            EvalStage::Coarse => &self.coarse,
            EvalStage::Fine => &self.fine,
        }
    }

    fn stage_mut(&mut self, stage: EvalStage) -> &mut AxisErrors {
        match stage {
            EvalStage::Initial => &mut self.initial,
            EvalStage::Coarse => &mut self.coarse,
            EvalStage::Fine => &mut self.fine,
        }
    }

    pub fn from_inference(sample_id: u32, h_init: &Extrinsic, h_gt: &Extrinsic, inf: &Inference) -> Result<Self> {
        Ok(Self {
            sample_id,
            initial: signed_axis_errors(h_init, h_gt)?,
            coarse: signed_axis_errors(&inf.h_coarse, h_gt)?,
            fine: signed_axis_errors(&inf.h_est, h_gt)?,
        })
    }
}

/// Mean absolute errors per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub initial: AxisErrors,
    pub coarse: AxisErrors,
    pub fine: AxisErrors,
    pub count: usize,
}

impl ErrorTable {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mean = |stage: EvalStage| {
            let n = records.len().max(1) as f64;
            let mut acc = AxisErrors::default();
            for r in records {
                let e = r.stage(stage).abs();
                acc.tilt += e.tilt;
                acc.pan += e.pan;
                acc.roll += e.roll;
                acc.total += e.total;
            }
            AxisErrors {
                tilt: acc.tilt / n,
                pan: acc.pan / n,
                roll: acc.roll / n,
                total: acc.total / n,
            }
        };
        Self {
            initial: mean(EvalStage::Initial),
            coarse: mean(EvalStage::Coarse),
            fine: mean(EvalStage::Fine),
            count: records.len(),
        }
    }

    pub fn stage(&self, stage: EvalStage) -> &AxisErrors {
        match stage {
            EvalStage::Initial => &self.initial,
            EvalStage::Coarse => &self.coarse,
            EvalStage::Fine => &self.fine,
        }
    }
}

fn records_for(
    cascade: &CascadeModel,
    obs: &[Observation],
    ids: &[u32],
    k: &CameraIntrinsics,
) -> Result<(Vec<EvalRecord>, Vec<Inference>)> {
    let inferences = infer_batch(cascade, obs, k)?;
    let records = obs
        .iter()
        .zip(ids)
        .zip(&inferences)
        .map(|((o, id), inf)| {
            let h_gt = o.h_gt.ok_or_else(|| invalid("eval", "samples need ground truth"))?;
            EvalRecord::from_inference(*id, o.h_init, h_gt, inf)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((records, inferences))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomEval {
    pub records: Vec<EvalRecord>,
    pub table: ErrorTable,
    pub inferences: Vec<Inference>,
}

/// Each test sample keeps its own random decalibration.
pub fn eval_random(cascade: &CascadeModel, samples: &[Sample], k: &CameraIntrinsics) -> Result<RandomEval> {
    let obs: Vec<Observation> = samples.iter().map(Observation::from_sample).collect();
    let ids: Vec<u32> = samples.iter().map(|s| s.id).collect();
    let (records, inferences) = records_for(cascade, &obs, &ids, k)?;
    Ok(RandomEval {
        table: ErrorTable::from_records(&records),
        records,
        inferences,
    })
}

/// The fixed decalibrations used by the static protocol.
pub fn static_decalibrations(ranges: &DecalRanges, n: usize, seed: u64) -> Vec<Decalibration> {
    (0..n)
        .map(|j| sample_decalibration(ranges, &mut derive_rng(seed, "static-decal", j as u64)))
        .collect()
}

/// A sample seen through a different assumed calibration.
struct Redecalibrated {
    h_init: Extrinsic,
    radar: SparseRadarMatrix,
}

fn redecalibrate(samples: &[Sample], d: &Decalibration, k: &CameraIntrinsics) -> Vec<Redecalibrated> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| {
            let h_init = apply_decalibration(&s.h_gt, d);
            let radar = SparseRadarMatrix::from_projections(&project_all(k, &h_init, &s.detections), k);
            Redecalibrated { h_init, radar }
        })
        .collect()
}

fn observations<'a>(samples: &'a [Sample], redecal: &'a [Redecalibrated]) -> Vec<Observation<'a>> {
    samples
        .iter()
        .zip(redecal)
        .map(|(s, r)| Observation {
            image: &s.image,
            radar: &r.radar,
            detections: &s.detections,
            h_init: &r.h_init,
            h_gt: Some(&s.h_gt),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticDecalResult {
    pub decalibration: Decalibration,
    /// Mean absolute errors over every test frame under this decalibration.
    pub table: ErrorTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticEval {
    pub per_decal: Vec<StaticDecalResult>,
    /// Per-sample records, grouped by decalibration in `per_decal` order.
    pub records: Vec<Vec<EvalRecord>>,
}

impl StaticEval {
    /// Population standard deviation of the per-decalibration mean total
    /// error at `stage`.
    pub fn std_of_means(&self, stage: EvalStage) -> f64 {
        std_dev(self.per_decal.iter().map(|r| r.table.stage(stage).total))
    }

    /// Population standard deviation of the per-sample total error at
    /// `stage`, pooled over all decalibrations.
    pub fn std_of_samples(&self, stage: EvalStage) -> f64 {
        std_dev(self.records.iter().flatten().map(|r| r.stage(stage).total))
    }

    /// Mean absolute errors pooled over all decalibrations.
    pub fn pooled_table(&self) -> ErrorTable {
        let all: Vec<EvalRecord> = self.records.iter().flatten().copied().collect();
        ErrorTable::from_records(&all)
    }
}

pub fn std_dev<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Apply each of `decals` to every test frame and evaluate.
pub fn eval_static(
    cascade: &CascadeModel,
    samples: &[Sample],
    k: &CameraIntrinsics,
    decals: &[Decalibration],
) -> Result<StaticEval> {
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let ids: Vec<u32> = samples.iter().map(|s| s.id).collect();
    let mut per_decal = Vec::with_capacity(decals.len());
    let mut records = Vec::with_capacity(decals.len());
    for (j, d) in decals.iter().enumerate() {
        let redecal = redecalibrate(samples, d, k);
        let (recs, _) = records_for(cascade, &observations(samples, &redecal), &ids, k)?;
        let table = ErrorTable::from_records(&recs);
        log::info!(
            "static decalibration {}/{}: total {:.3} -> {:.3} -> {:.3} deg",
            j + 1,
            decals.len(),
            table.initial.total,
            table.coarse.total,
            table.fine.total
        );
        per_decal.push(StaticDecalResult {
            decalibration: *d,
            table,
        });
        records.push(recs);
    }
    Ok(StaticEval { per_decal, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalPoint {
    pub window: usize,
    /// Number of sliding windows evaluated.
    pub windows: usize,
    /// Mean absolute errors of the refined calibration.
    pub mean: AxisErrors,
}

/// Error of temporally refined calibrations against window size. All
/// frames are seen through the one static decalibration `d`, in the
/// given order.
pub fn eval_temporal(
    cascade: &CascadeModel,
    frames: &[Sample],
    k: &CameraIntrinsics,
    d: &Decalibration,
    window_sizes: &[usize],
) -> Result<Vec<TemporalPoint>> {
    let largest = window_sizes.iter().copied().max().unwrap_or(0);
    if largest > frames.len() {
        return Err(CoreError::WindowTooLarge {
            window: largest,
            frames: frames.len(),
        });
    }
    if window_sizes.contains(&0) {
        return Err(invalid("eval.window", "window sizes must be at least 1"));
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let h_gt = first.h_gt;
    if frames.iter().any(|f| f.h_gt.max_abs_diff(&h_gt) > 1e-12) {
        return Err(invalid(
            "eval.temporal",
            "frames do not share one ground-truth calibration",
        ));
    }
    let redecal = redecalibrate(frames, d, k);
    let h_init = redecal[0].h_init;
    let inferences = infer_batch(cascade, &observations(frames, &redecal), k)?;
    let corrections: Vec<(UnitQuaternion, UnitQuaternion)> =
        inferences.iter().map(|i| (i.q_coarse, i.q_fine)).collect();

    window_sizes
        .iter()
        .map(|&w| {
            let errors = corrections
                .windows(w)
                .map(|win| axis_errors(&temporal_refine(win, &h_init)?, &h_gt))
                .collect::<Result<Vec<_>>>()?;
            let n = errors.len() as f64;
            let sum = |f: fn(&AxisErrors) -> f64| errors.iter().map(f).sum::<f64>() / n;
            Ok(TemporalPoint {
                window: w,
                windows: errors.len(),
                mean: AxisErrors {
                    tilt: sum(|e| e.tilt),
                    pan: sum(|e| e.pan),
                    roll: sum(|e| e.roll),
                    total: sum(|e| e.total),
                },
            })
        })
        .collect()
}

pub const GROUND_TRUTH_COLOR: [u8; 3] = [0, 0, 255];
pub const ESTIMATE_COLOR: [u8; 3] = [255, 255, 0];
pub const OVERLAY_RADIUS: i64 = 3;

/// Pixel centers of the detections projected with `h`; points behind the
/// camera are dropped.
pub fn overlay_points(detections: &[[f64; 3]], h: &Extrinsic, k: &CameraIntrinsics) -> Vec<(i64, i64)> {
    detections
        .iter()
        .map(|x| project(k, h, &Vec3::from(*x)))
        .filter(|p| p.z_c > 0.0 && p.u.is_finite() && p.v.is_finite())
        .map(|p| (p.u.floor() as i64, p.v.floor() as i64))
        .collect()
}

/// Copy of `image` with the detections drawn in blue under `h_gt` and in
/// yellow under `h_est`.
pub fn render_overlay(
    image: &RgbImage,
    detections: &[[f64; 3]],
    h_gt: &Extrinsic,
    h_est: &Extrinsic,
    k: &CameraIntrinsics,
) -> RgbImage {
    let mut out = image.clone();
    for (pts, color) in [
        (overlay_points(detections, h_gt, k), GROUND_TRUTH_COLOR),
        (overlay_points(detections, h_est, k), ESTIMATE_COLOR),
    ] {
        for (u, v) in pts {
            out.fill_disc(u, v, OVERLAY_RADIUS, color);
        }
    }
    out
}

/// Recover a displayable 8-bit image from a standardized network input.
pub fn sample_image(sample: &Sample, stats: &ImageStats) -> RgbImage {
    let mut px = sample.image.as_ref().clone();
    stats.destandardize(&mut px);
    let data = px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(INPUT_WIDTH as u32, INPUT_HEIGHT as u32, data).expect("input image dimensions")
}

/// Overlay drawn on the sample's own (downsampled) image.
pub fn sample_overlay(sample: &Sample, stats: &ImageStats, h_est: &Extrinsic, k: &CameraIntrinsics) -> RgbImage {
    let k_small = k.rescaled(INPUT_WIDTH as u32, INPUT_HEIGHT as u32);
    render_overlay(
        &sample_image(sample, stats),
        &sample.detections,
        &sample.h_gt,
        h_est,
        &k_small,
    )
}

pub const HISTOGRAM_BIN_DEG: f64 = 0.25;
pub const HISTOGRAM_RANGE_DEG: f64 = 12.0;

/// Counts over `[-12, 12)` degrees in 0.25 degree bins, plus the number of
/// values outside that range.
pub fn histogram(values: impl IntoIterator<Item = f64>) -> (Vec<usize>, usize) {
    let bins = (2.0 * HISTOGRAM_RANGE_DEG / HISTOGRAM_BIN_DEG).round() as usize;
    let mut counts = vec![0usize; bins];
    let mut outside = 0;
    for v in values {
        let idx = ((v + HISTOGRAM_RANGE_DEG) / HISTOGRAM_BIN_DEG).floor();
        if idx >= 0.0 && (idx as usize) < bins {
            counts[idx as usize] += 1;
        } else {
            outside += 1;
        }
    }
    (counts, outside)
}

/// Self-contained bar chart of [`histogram`].
pub fn histogram_svg(title: &str, values: impl IntoIterator<Item = f64>) -> String {
    let (counts, outside) = histogram(values);
    let (width, height, margin) = (640.0, 320.0, 40.0);
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / counts.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{} (n={}, outside={})</text>"#,
        width / 2.0,
        xml_escape(title),
        counts.iter().sum::<usize>() + outside,
        outside
    );
    for (i, c) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
        let h = plot_h * *c as f64 / peak;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5"/>"##,
            margin + i as f64 * bar_w,
            margin + plot_h - h,
            bar_w,
            h
        );
    }
    let axis_y = margin + plot_h;
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        margin + plot_w
    );
    for tick in [-12, -8, -4, 0, 4, 8, 12] {
        let x = margin + (tick as f64 + HISTOGRAM_RANGE_DEG) / (2.0 * HISTOGRAM_RANGE_DEG) * plot_w;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{tick}°</text>"#,
            axis_y + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{margin}" y="{}" font-family="sans-serif" font-size="11">peak {}</text>"#,
        margin - 4.0,
        peak as usize
    );
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const ERRORS_FILE: &str = "errors.csv";
pub const TABLE_FILE: &str = "table.csv";

const ERRORS_HEADER: [&str; 6] = ["sample_id", "stage", "tilt_err", "pan_err", "roll_err", "total_err"];

/// `errors.csv`: one row per sample and stage, degrees to 6 decimals.
pub fn write_errors_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ERRORS_HEADER).map_err(csv_err)?;
    for r in records {
        for stage in EvalStage::ALL {
            let e = r.stage(stage);
            w.write_record([
                r.sample_id.to_string(),
                stage.as_str().to_string(),
                format!("{:.6}", e.tilt),
                format!("{:.6}", e.pan),
                format!("{:.6}", e.roll),
                format!("{:.6}", e.total),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_errors_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().ne(ERRORS_HEADER) {
        return Err(CoreError::Format(format!("{ERRORS_FILE}: unexpected header")));
    }
    let mut records: Vec<EvalRecord> = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| {
            row.get(i)
                .ok_or_else(|| CoreError::Format(format!("{ERRORS_FILE}: short row")))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|e| CoreError::Format(format!("{ERRORS_FILE}: {e}")))
        };
        let id: u32 = field(0)?
            .parse()
            .map_err(|e| CoreError::Format(format!("{ERRORS_FILE}: {e}")))?;
        let stage = EvalStage::parse(field(1)?)
            .ok_or_else(|| CoreError::Format(format!("{ERRORS_FILE}: unknown stage {:?}", row.get(1))))?;
        let errors = AxisErrors {
            tilt: num(2)?,
            pan: num(3)?,
            roll: num(4)?,
            total: num(5)?,
        };
        if records
            .last()
            .is_none_or(|r| r.sample_id != id || stage == EvalStage::Initial)
        {
            records.push(EvalRecord {
                sample_id: id,
                initial: AxisErrors::default(),
                coarse: AxisErrors::default(),
                fine: AxisErrors::default(),
            });
        }
        *records.last_mut().expect("pushed above").stage_mut(stage) = errors;
    }
    Ok(records)
}

/// `table.csv`: mean absolute degrees per stage, 2 decimals.
pub fn write_table_csv(table: &ErrorTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["stage", "tilt", "pan", "roll", "total", "samples"])
        .map_err(csv_err)?;
    for stage in EvalStage::ALL {
        let e = table.stage(stage);
        w.write_record([
            stage.as_str().to_string(),
            format!("{:.2}", e.tilt),
            format!("{:.2}", e.pan),
            format!("{:.2}", e.roll),
            format!("{:.2}", e.total),
            table.count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a report directory is built from.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub protocol: String,
    pub records: Vec<EvalRecord>,
    pub table: ErrorTable,
    pub static_eval: Option<Vec<StaticDecalResult>>,
    pub temporal: Option<Vec<TemporalPoint>>,
    /// Named images written as `overlays/<name>.ppm`.
    pub overlays: Vec<(String, RgbImage)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    protocol: &'a str,
    table: &'a ErrorTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    static_decalibrations: Option<&'a [StaticDecalResult]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    static_std_of_means: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temporal: Option<&'a [TemporalPoint]>,
}

/// Write `errors.csv`, `table.csv`, `summary.json`, per-axis histograms and
/// overlays into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_errors_csv(&report.records, &dir.join(ERRORS_FILE))?;
    write_table_csv(&report.table, &dir.join(TABLE_FILE))?;

    let hist_dir = dir.join("histograms");
    fs::create_dir_all(&hist_dir)?;
    for stage in EvalStage::ALL {
        for axis in Axis::ALL {
            let title = format!("{} {} error (deg)", stage.as_str(), axis.as_str());
            let svg = histogram_svg(&title, report.records.iter().map(|r| r.stage(stage).axis(axis)));
            fs::write(hist_dir.join(format!("{}_{}.svg", stage.as_str(), axis.as_str())), svg)?;
        }
    }

    if let Some(per_decal) = &report.static_eval {
        let mut w = csv::Writer::from_path(dir.join("static.csv")).map_err(csv_err)?;
        let mut header = vec![
            "decal".to_string(),
            "tilt_deg".into(),
            "pan_deg".into(),
            "roll_deg".into(),
        ];
        for stage in EvalStage::ALL {
            for axis in Axis::ALL {
                header.push(format!("{}_{}", stage.as_str(), axis.as_str()));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for (j, r) in per_decal.iter().enumerate() {
            let e = r.decalibration.rotation.to_euler()?;
            let mut row = vec![
                j.to_string(),
                format!("{:.6}", e.tilt),
                format!("{:.6}", e.pan),
                format!("{:.6}", e.roll),
            ];
            for stage in EvalStage::ALL {
                for axis in Axis::ALL {
                    row.push(format!("{:.6}", r.table.stage(stage).axis(axis)));
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        for stage in EvalStage::ALL {
            let title = format!("per-decalibration mean total error, {} (deg)", stage.as_str());
            let svg = histogram_svg(&title, per_decal.iter().map(|r| r.table.stage(stage).total));
            fs::write(hist_dir.join(format!("static_means_{}.svg", stage.as_str())), svg)?;
        }
    }

    if let Some(points) = &report.temporal {
        let mut w = csv::Writer::from_path(dir.join("temporal.csv")).map_err(csv_err)?;
        w.write_record(["window", "windows", "tilt", "pan", "roll", "total"])
            .map_err(csv_err)?;
        for p in points {
            w.write_record([
                p.window.to_string(),
                p.windows.to_string(),
                format!("{:.6}", p.mean.tilt),
                format!("{:.6}", p.mean.pan),
                format!("{:.6}", p.mean.roll),
                format!("{:.6}", p.mean.total),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }

    let summary = Summary {
        protocol: &report.protocol,
        table: &report.table,
        static_decalibrations: report.static_eval.as_deref(),
        static_std_of_means: report
            .static_eval
            .as_ref()
            .map(|v| std_dev(v.iter().map(|r| r.table.fine.total))),
        temporal: report.temporal.as_deref(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;

    if !report.overlays.is_empty() {
        let overlay_dir = dir.join("overlays");
        fs::create_dir_all(&overlay_dir)?;
        for (name, img) in &report.overlays {
            img.write_ppm(BufWriter::new(File::create(overlay_dir.join(format!("{name}.ppm")))?))?;
        }
    }
    Ok(())
}

/// Formatted like `table.csv`, for logs and terminals.
pub fn format_table(table: &ErrorTable) -> String {
    let mut s = format!("{:<8} {:>7} {:>7} {:>7} {:>7}\n", "", "tilt", "pan", "roll", "total");
    for stage in EvalStage::ALL {
        let e = table.stage(stage);
        let _ = writeln!(
            s,
            "{:<8} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            stage.as_str(),
            e.tilt,
            e.pan,
            e.roll,
            e.total
        );
    }
    s
}
