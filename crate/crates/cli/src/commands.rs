use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use radcam_core::cascade::{
    infer, load_cascade, save_cascade, train_cascade, CascadeModel, Observation, Stage, TrainHistory,
};
use radcam_core::dataset::{
    generate_dataset, lint_dataset, load_dataset, project_all, save_dataset, standardize_image, Dataset, ImageStats,
    SparseRadarMatrix,
};
use radcam_core::eval::{
    axis_errors, emit_report, eval_random, eval_static, eval_temporal, format_table, render_overlay, sample_overlay,
    static_decalibrations, ErrorTable, EvalStage, Report,
};
use radcam_core::geometry::{geodesic_angle, CameraIntrinsics, Extrinsic, UnitQuaternion};
use radcam_core::image::RgbImage;
use radcam_core::rngs::derive_rng;
use radcam_core::scene::{read_jsonl, simulate_frame, write_jsonl, RadarDetection, RigSpec, SceneConfig};

use crate::config::RunConfig;
use crate::error::CliError;

pub const INPUTS_FILE: &str = "inputs.json";
pub const RIG_FILE: &str = "rig.json";
pub const FRAMES_DIR: &str = "frames";
const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "radcam", version, about = "Targetless radar-camera rotation calibration")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for generation and evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RigChoice {
    Primary,
    Secondary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Random,
    Static,
    Temporal,
    Generalization,
}

impl Protocol {
    fn as_str(&self) -> &'static str {
        match self {
            Protocol::Random => "random",
            Protocol::Static => "static",
            Protocol::Temporal => "temporal",
            Protocol::Generalization => "generalization",
        }
    }
}

/// Fixed cascades that need no trained weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StubKind {
    /// Both stages predict no correction.
    Identity,
    /// The coarse stage predicts the exact correction.
    Oracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate frames: images, radar detections and the rig's ground truth.
    Simulate {
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, value_enum, default_value = "primary")]
        rig: RigChoice,
    },
    /// Generate a train/val/test dataset of decalibrated samples.
    GenDataset {
        #[arg(long, value_enum, default_value = "primary")]
        rig: RigChoice,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Decalibrated samples drawn from each training frame.
        #[arg(long)]
        decals_per_frame: Option<usize>,
    },
    /// Train the coarse and fine stages on a dataset.
    Train {
        /// Directory written by `gen-dataset`.
        #[arg(long)]
        dataset: PathBuf,
        /// Override the maximum epochs per stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained run (or a stub) on a dataset's test split.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long, required_unless_present = "stub")]
        run: Option<PathBuf>,
        /// Directory written by `gen-dataset`; its test split is evaluated.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        protocol: Protocol,
        #[arg(long, value_enum, conflicts_with = "run")]
        stub: Option<StubKind>,
        /// Static decalibrations for the static protocol.
        #[arg(long)]
        n_decals: Option<usize>,
        /// Window sizes for the temporal protocol, comma separated.
        #[arg(long, value_delimiter = ',')]
        window: Vec<usize>,
        /// First-rig dataset to compare against in the generalization protocol.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Recover the calibration of one simulated frame.
    Calibrate {
        /// Directory written by `train`.
        #[arg(long, required_unless_present = "stub")]
        run: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "run")]
        stub: Option<StubKind>,
        /// Output directory of `simulate`.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame_id: u64,
        /// Assumed calibration as an `H: ...` line; defaults to the ground truth.
        #[arg(long)]
        h_init: Option<String>,
    },
}

/// Rig description written next to simulated frames.
#[derive(Debug, Serialize, Deserialize)]
pub struct RigFile {
    pub rig: RigSpec,
    pub intrinsics: CameraIntrinsics,
    pub h_gt: Extrinsic,
}

/// What a run needs to preprocess raw frames like its training data.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunInputs {
    pub format_version: u32,
    pub rig_id: String,
    pub intrinsics: CameraIntrinsics,
    pub stats: ImageStats,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.out
        .clone()
        .ok_or_else(|| CliError::Config("out: no output directory given (--out or `out` in the config)".into()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Simulate { frames, rig } => cmd_simulate(&cfg, *frames, *rig),
        Command::GenDataset {
            rig,
            train,
            val,
            test,
            decals_per_frame,
        } => cmd_gen_dataset(&cfg, *rig, [*train, *val, *test], *decals_per_frame),
        Command::Train { dataset, epochs } => cmd_train(&cfg, dataset, *epochs),
        Command::Evaluate {
            run,
            dataset,
            protocol,
            stub,
            n_decals,
            window,
            baseline,
        } => cmd_evaluate(
            &cfg,
            &EvaluateArgs {
                run: run.as_deref(),
                dataset,
                protocol: *protocol,
                stub: *stub,
                n_decals: *n_decals,
                windows: window,
                baseline: baseline.as_deref(),
            },
        ),
        Command::Calibrate {
            run,
            stub,
            frames,
            frame_id,
            h_init,
        } => cmd_calibrate(&cfg, run.as_deref(), *stub, frames, *frame_id, h_init.as_deref()),
    }
}

fn rig_and_scene(cfg: &RunConfig, rig: RigChoice) -> (RigSpec, SceneConfig) {
    match rig {
        RigChoice::Primary => (cfg.rig.clone(), cfg.scene.clone()),
        RigChoice::Secondary => {
            let g = cfg.generalization_generation();
            (g.rig, g.scene)
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig, n_frames: usize, rig: RigChoice) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let (spec, scene_cfg) = rig_and_scene(cfg, rig);
    let rig = spec.build()?;
    cfg.write_snapshot(&out)?;
    let frames_dir = out.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    write_json(
        &out.join(RIG_FILE),
        &RigFile {
            rig: spec.clone(),
            intrinsics: rig.intrinsics,
            h_gt: rig.h_gt,
        },
    )?;
    (0..n_frames as u64)
        .into_par_iter()
        .try_for_each(|id| -> Result<(), CliError> {
            let mut rng = derive_rng(cfg.seed, "frame", id);
            let frame = simulate_frame(id, &spec.name, &rig, &scene_cfg, &cfg.radar, &mut rng)?;
            let img_path = frames_dir.join(format!("{id:06}.ppm"));
            frame
                .image
                .write_ppm(BufWriter::new(File::create(&img_path).map_err(io_err(&img_path))?))?;
            let det_path = frames_dir.join(format!("{id:06}.jsonl"));
            write_jsonl(
                BufWriter::new(File::create(&det_path).map_err(io_err(&det_path))?),
                &frame.detections,
            )?;
            Ok(())
        })?;
    println!("simulated {n_frames} frames into {}", frames_dir.display());
    Ok(())
}

pub fn cmd_gen_dataset(
    cfg: &RunConfig,
    rig: RigChoice,
    counts: [Option<usize>; 3],
    decals_per_frame: Option<usize>,
) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut cfg = cfg.clone();
    let [train, val, test] = counts;
    cfg.counts.train = train.unwrap_or(cfg.counts.train);
    cfg.counts.val = val.unwrap_or(cfg.counts.val);
    cfg.counts.test = test.unwrap_or(cfg.counts.test);
    cfg.train_decals_per_frame = decals_per_frame.unwrap_or(cfg.train_decals_per_frame);
    let generation = match rig {
        RigChoice::Primary => cfg.generation(),
        RigChoice::Secondary => cfg.generalization_generation(),
    };
    generation.validate()?;
    let ds = generate_dataset(&generation)?;
    let issues = lint_dataset(&ds);
    if !issues.is_empty() {
        return Err(CliError::Numeric(format!(
            "generated dataset fails lint: {}",
            issues.join("; ")
        )));
    }
    save_dataset(&ds, &out)?;
    cfg.write_snapshot(&out)?;
    println!(
        "dataset {}: {} train, {} val, {} test samples ({} frames skipped) in {}",
        ds.manifest.rig_id,
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.manifest.skipped_frames.total(),
        out.display()
    );
    Ok(())
}

fn summarize_history(name: &str, h: &Option<TrainHistory>) {
    if let Some(h) = h {
        println!(
            "{name}: {} epochs, best val loss {:.6} at epoch {} (initial {:.6})",
            h.epochs.len(),
            h.best_val_loss().unwrap_or(f64::NAN),
            h.best_epoch.unwrap_or(0),
            h.initial_val_loss.unwrap_or(f64::NAN)
        );
    }
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, epochs: Option<usize>) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut cfg = cfg.clone();
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    let ds = load_dataset(dataset)?;
    cfg.write_snapshot(&out)?;
    let cascade = train_cascade(&ds.train, &ds.val, ds.intrinsics(), &cfg.model, &cfg.loss, &cfg.train)?;
    save_cascade(&cascade, &out)?;
    write_json(
        &out.join(INPUTS_FILE),
        &RunInputs {
            format_version: RUN_FORMAT_VERSION,
            rig_id: ds.manifest.rig_id.clone(),
            intrinsics: ds.manifest.intrinsics,
            stats: ds.manifest.stats,
        },
    )?;
    summarize_history("coarse", &cascade.metadata.coarse_history);
    summarize_history("fine", &cascade.metadata.fine_history);
    println!("run written to {}", out.display());
    Ok(())
}

fn stub_cascade(kind: StubKind) -> CascadeModel {
    match kind {
        StubKind::Identity => CascadeModel::stub(Stage::Identity, Stage::Identity),
        StubKind::Oracle => CascadeModel::stub(Stage::Oracle, Stage::Identity),
    }
}

fn load_run(run: Option<&Path>, stub: Option<StubKind>) -> Result<CascadeModel, CliError> {
    match (run, stub) {
        (_, Some(kind)) => Ok(stub_cascade(kind)),
        (Some(dir), None) => {
            let inputs_path = dir.join(INPUTS_FILE);
            if inputs_path.exists() {
                let inputs: RunInputs = read_json(&inputs_path)?;
                if inputs.format_version != RUN_FORMAT_VERSION {
                    return Err(CliError::Artifact(format!(
                        "run format version {} (expected {RUN_FORMAT_VERSION})",
                        inputs.format_version
                    )));
                }
            }
            Ok(load_cascade(dir)?)
        }
        (None, None) => Err(CliError::Config("either --run or --stub is required".into())),
    }
}

pub struct EvaluateArgs<'a> {
    pub run: Option<&'a Path>,
    pub dataset: &'a Path,
    pub protocol: Protocol,
    pub stub: Option<StubKind>,
    pub n_decals: Option<usize>,
    pub windows: &'a [usize],
    pub baseline: Option<&'a Path>,
}

fn overlays(cascade: &CascadeModel, ds: &Dataset, n: usize) -> Result<Vec<(String, RgbImage)>, CliError> {
    let k = ds.intrinsics();
    ds.test
        .iter()
        .take(n)
        .map(|s| {
            let r = infer(cascade, &Observation::from_sample(s), k)?;
            Ok((
                format!("sample_{:06}", s.id),
                sample_overlay(s, &ds.manifest.stats, &r.h_est, k),
            ))
        })
        .collect()
}

#[derive(Serialize)]
struct Generalization<'a> {
    target_rig: &'a str,
    target: &'a ErrorTable,
    baseline_rig: &'a str,
    baseline: &'a ErrorTable,
    fine_total_degradation_deg: f64,
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let cascade = load_run(args.run, args.stub)?;
    let ds = load_dataset(args.dataset)?;
    let k = ds.intrinsics();
    cfg.write_snapshot(&out)?;
    let mut report = Report {
        protocol: args.protocol.as_str().into(),
        ..Default::default()
    };
    match args.protocol {
        Protocol::Random | Protocol::Generalization => {
            let r = eval_random(&cascade, &ds.test, k)?;
            report.records = r.records;
            report.table = r.table;
        }
        Protocol::Static => {
            let n = args.n_decals.unwrap_or(cfg.eval.n_decals);
            let decals = static_decalibrations(&cfg.decalibration, n, cfg.seed);
            let st = eval_static(&cascade, &ds.test, k, &decals)?;
            println!(
                "fine total error: std of per-decalibration means {:.4} deg, per-sample std {:.4} deg",
                st.std_of_means(EvalStage::Fine),
                st.std_of_samples(EvalStage::Fine)
            );
            report.table = st.pooled_table();
            report.records = st.records.first().cloned().unwrap_or_default();
            report.static_eval = Some(st.per_decal);
        }
        Protocol::Temporal => {
            let windows = if args.windows.is_empty() {
                cfg.eval.windows.clone()
            } else {
                args.windows.to_vec()
            };
            let d = static_decalibrations(&cfg.decalibration, 1, cfg.seed)[0];
            let curve = eval_temporal(&cascade, &ds.test, k, &d, &windows)?;
            let st = eval_static(&cascade, &ds.test, k, &[d])?;
            report.table = st.pooled_table();
            report.records = st.records.into_iter().next().unwrap_or_default();
            for p in &curve {
                println!("window {:>3}: mean total error {:.4} deg", p.window, p.mean.total);
            }
            report.temporal = Some(curve);
        }
    }
    report.overlays = overlays(&cascade, &ds, cfg.eval.overlays)?;
    emit_report(&report, &out)?;
    print!("{}", format_table(&report.table));

    if args.protocol == Protocol::Generalization {
        if let Some(base_dir) = args.baseline {
            let base = load_dataset(base_dir)?;
            let b = eval_random(&cascade, &base.test, base.intrinsics())?;
            let g = Generalization {
                target_rig: &ds.manifest.rig_id,
                target: &report.table,
                baseline_rig: &base.manifest.rig_id,
                baseline: &b.table,
                fine_total_degradation_deg: report.table.fine.total - b.table.fine.total,
            };
            write_json(&out.join("generalization.json"), &g)?;
            println!(
                "fine total error {:.3} deg on {} vs {:.3} deg on {} ({:+.3} deg)",
                report.table.fine.total, g.target_rig, b.table.fine.total, g.baseline_rig, g.fine_total_degradation_deg
            );
        }
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn fmt_quat(q: &UnitQuaternion) -> String {
    let [w, x, y, z] = q.to_array();
    format!("{w:.9} {x:.9} {y:.9} {z:.9}")
}

pub fn cmd_calibrate(
    cfg: &RunConfig,
    run: Option<&Path>,
    stub: Option<StubKind>,
    frames: &Path,
    frame_id: u64,
    h_init: Option<&str>,
) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let cascade = load_run(run, stub)?;
    let stats = match run {
        Some(dir) if stub.is_none() => read_json::<RunInputs>(&dir.join(INPUTS_FILE))?.stats,
        _ => ImageStats::default(),
    };
    let rig: RigFile = read_json(&frames.join(RIG_FILE))?;
    let img_path = frames.join(FRAMES_DIR).join(format!("{frame_id:06}.ppm"));
    let image = RgbImage::read_ppm(BufReader::new(File::open(&img_path).map_err(io_err(&img_path))?))?;
    let det_path = frames.join(FRAMES_DIR).join(format!("{frame_id:06}.jsonl"));
    let detections: Vec<RadarDetection> =
        read_jsonl(BufReader::new(File::open(&det_path).map_err(io_err(&det_path))?))?;
    let points: Vec<[f64; 3]> = detections.iter().map(|d| d.x).collect();

    let h_init = match h_init {
        Some(text) => Extrinsic::from_text(text).map_err(|e| CliError::Config(format!("h_init: {e}")))?,
        None => rig.h_gt,
    };
    let k = rig.intrinsics;
    let input = standardize_image(&image, &stats);
    let radar = SparseRadarMatrix::from_projections(&project_all(&k, &h_init, &points), &k);
    let obs = Observation {
        image: &input,
        radar: &radar,
        detections: &points,
        h_init: &h_init,
        h_gt: Some(&rig.h_gt),
    };
    let r = infer(&cascade, &obs, &k)?;
    let total = r.q_fine * r.q_coarse;
    println!("{}", r.h_est.to_text());
    println!("q_coarse: {}", fmt_quat(&r.q_coarse));
    println!("q_fine: {}", fmt_quat(&r.q_fine));
    println!(
        "correction: {:.4} deg",
        geodesic_angle(&UnitQuaternion::IDENTITY, &total)
    );
    let err = axis_errors(&r.h_est, &rig.h_gt)?;
    println!(
        "error vs ground truth: tilt {:.4} pan {:.4} roll {:.4} total {:.4} deg",
        err.tilt, err.pan, err.roll, err.total
    );
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let overlay_path = out.join(format!("overlay_{frame_id:06}.ppm"));
    render_overlay(&image, &points, &rig.h_gt, &r.h_est, &k).write_ppm(BufWriter::new(
        File::create(&overlay_path).map_err(io_err(&overlay_path))?,
    ))?;
    Ok(())
}
