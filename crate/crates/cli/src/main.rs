use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use poolkp::annotation_io::{
    detections_to_json, parse_cvat, read_annotation, read_detections, read_text, rescale_annotation, write_annotation,
    write_text,
};
use poolkp::heatmap::{
    cross_entropy_loss, decode, make_target_volume, read_volume, summarize, DecodeParams, DetectionSet, FrameAnnotation,
};
use poolkp::homography::{localize_frame, HomographyRecord, RansacParams};
use poolkp::metrics::{beta_sweep, evaluate, parse_grid, sweep_csv, tolerance_sweep, EvalParams, SweepFrame};
use poolkp::pool_model::{build_base_model, BasePoolModel, PoolConfig};
use poolkp::synth::{generate_dataset, SynthParams, View};
use poolkp::{Error, Result};
use rayon::prelude::*;

const VOLUME_EXT: &str = "pkhv";

/// Swimming-pool key-point tools: pool models, synthetic data, heatmap
/// decoding, evaluation and homography localization.
///
/// Files: models and annotations are JSON, heatmap volumes are `.pkhv`
/// (magic `PKHV`, u32 version, rows, cols, channels, then little-endian f32
/// channel-major data). Annotation JSON is
/// `{frame_id, rows, cols, points:[{class, index, u, v}]}`; detection JSON adds
/// `entropy` to each entry under `detections`.
///
/// POOL_THREADS caps the worker count (0 or unset: all cores).
#[derive(Parser)]
#[command(name = "poolkp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMode {
    Beta,
    Tolerance,
}

#[derive(Subcommand)]
enum Command {
    /// Write the base pool model: 96 entries `{class, index, exists, kind, x_m, y_m}`.
    Model {
        #[arg(long)]
        lanes: u32,
        #[arg(long)]
        length: u32,
        #[arg(long)]
        bumpers: bool,
        #[arg(long)]
        bulkhead: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic scenes: annotations/, volumes/, homographies/ and manifest.json.
    Synth {
        /// Pool model JSON.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 288)]
        rows: usize,
        #[arg(long, default_value_t = 512)]
        cols: usize,
        #[arg(long, default_value = "full")]
        view: String,
        /// Standard deviation of the peak position, pixels.
        #[arg(long, default_value_t = 0.0)]
        loc_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0.0)]
        fp_rate: f64,
        /// Probability mass of each peak cell.
        #[arg(long, default_value_t = 1.0)]
        peak_mass: f64,
        /// Base image pixels per meter for the ground-truth homographies.
        #[arg(long, default_value_t = 20.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a heatmap volume into detections (JSON).
    Decode {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        /// Frame id; defaults to the volume's file stem.
        #[arg(long)]
        frame_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the cross-entropy (nats) of a prediction volume against a target
    /// volume or annotation JSON.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Score predictions (`<id>.pkhv` volumes or `<id>.json` detections) against `<id>.json` ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        tolerance: f64,
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        /// Also write `<out>.per_class.csv`.
        #[arg(long)]
        per_class: bool,
        /// Also write `<out>.per_keypoint.csv`.
        #[arg(long)]
        per_keypoint: bool,
        /// Report JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean F1 over a grid of beta or tolerance values, as `x,mean_f1` CSV.
    Sweep {
        #[arg(long, value_enum)]
        mode: SweepMode,
        /// Inclusive grid `a:b:step`.
        #[arg(long)]
        grid: String,
        /// Directory of `<id>.pkhv` volumes.
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Fixed beta for a tolerance sweep.
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        /// Fixed tolerance for a beta sweep.
        #[arg(long, default_value_t = 5.0)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the frame to base-image homography from detections.
    Localize {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Base image pixels per meter.
        #[arg(long, default_value_t = 20.0)]
        scale: f64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Inlier threshold in base pixels.
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert CVAT XML point annotations to one `<frame_id>.json` per image.
    ImportCvat {
        #[arg(long)]
        xml: PathBuf,
        /// Coordinates and frame size are divided by this factor.
        #[arg(long, default_value_t = 1.0)]
        scale_factor: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_model(path: &Path) -> Result<BasePoolModel> {
    BasePoolModel::from_json(&read_text(path)?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `stem -> path` for the files in `dir` with extension `ext`.
fn list_dir(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            files.insert(file_stem(&path), path);
        }
    }
    Ok(files)
}

/// Ground truth at the prediction's resolution.
fn align(gt: FrameAnnotation, rows: usize, cols: usize) -> Result<FrameAnnotation> {
    if (gt.rows, gt.cols) == (rows, cols) {
        return Ok(gt);
    }
    let (fr, fc) = (gt.rows as f64 / rows as f64, gt.cols as f64 / cols as f64);
    if (fr - fc).abs() > 1e-9 * fr.max(fc) {
        return Err(Error::Shape(format!(
            "`{}`: ground truth {}x{} is not a uniform scaling of {rows}x{cols}",
            gt.frame_id, gt.rows, gt.cols
        )));
    }
    let mut scaled = rescale_annotation(&gt, fc)?;
    (scaled.rows, scaled.cols) = (rows, cols);
    scaled.validate()?;
    Ok(scaled)
}

enum Prediction {
    Volume(PathBuf),
    Detections(PathBuf),
}

/// Pairs every ground-truth frame with its prediction file.
fn pair_frames(pred_dir: &Path, gt_dir: &Path, volumes_only: bool) -> Result<Vec<(Prediction, PathBuf)>> {
    let truth = list_dir(gt_dir, "json")?;
    let volumes = list_dir(pred_dir, VOLUME_EXT)?;
    let detections = if volumes_only { BTreeMap::new() } else { list_dir(pred_dir, "json")? };
    if truth.is_empty() {
        return Err(Error::Input(format!("no ground-truth .json files in {}", gt_dir.display())));
    }
    for id in volumes.keys().chain(detections.keys()) {
        if !truth.contains_key(id) {
            return Err(Error::Input(format!("prediction `{id}` has no ground truth in {}", gt_dir.display())));
        }
    }
    truth
        .into_iter()
        .map(|(id, gt)| {
            let pred = match (volumes.get(&id), detections.get(&id)) {
                (Some(v), None) => Prediction::Volume(v.clone()),
                (None, Some(d)) => Prediction::Detections(d.clone()),
                (Some(_), Some(_)) => {
                    return Err(Error::Input(format!("frame `{id}` has both a volume and a detection file")));
                }
                (None, None) => {
                    return Err(Error::Input(format!("no prediction for frame `{id}` in {}", pred_dir.display())));
                }
            };
            Ok((pred, gt))
        })
        .collect()
}

fn load_pair(pred: &Prediction, gt: &Path, params: DecodeParams) -> Result<(DetectionSet, FrameAnnotation)> {
    let truth = read_annotation(gt)?;
    let det = match pred {
        Prediction::Volume(path) => decode(&truth.frame_id, &read_volume(path)?, params)?,
        Prediction::Detections(path) => read_detections(path)?,
    };
    let truth = align(truth, det.rows, det.cols)?;
    Ok((det, truth))
}

fn load_sweep_frame(pred: &Prediction, gt: &Path) -> Result<SweepFrame> {
    let Prediction::Volume(path) = pred else {
        unreachable!("sweeps only pair volumes");
    };
    let volume = read_volume(path)?;
    let truth = align(read_annotation(gt)?, volume.rows(), volume.cols())?;
    Ok(SweepFrame { summary: summarize(&volume)?, truth })
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = file_stem(out);
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Model { lanes, length, bumpers, bulkhead, out } => {
            let model = build_base_model(PoolConfig::new(lanes, length, bumpers, bulkhead))?;
            emit(out.as_deref(), &model.to_json())
        }
        Command::Synth { model, count, rows, cols, view, loc_sigma, dropout, fp_rate, peak_mass, scale, seed, out } => {
            let view: View = view.parse()?;
            if count == 0 {
                return Err(Error::validation("count", "must be at least 1"));
            }
            let model = read_model(&model)?;
            let mut params = SynthParams::new(rows, cols, view, seed);
            params.noise.loc_sigma_px = loc_sigma;
            params.noise.dropout_rate = dropout;
            params.noise.false_positive_rate = fp_rate;
            params.noise.peak_mass = peak_mass;
            params.base_scale_px_per_m = scale;
            generate_dataset(&model, count, &params, &out)?;
            Ok(())
        }
        Command::Decode { volume, beta, frame_id, out } => {
            let params = DecodeParams::new(beta)?;
            let frame_id = frame_id.unwrap_or_else(|| file_stem(&volume));
            let det = decode(&frame_id, &read_volume(&volume)?, params)?;
            emit(out.as_deref(), &detections_to_json(&det))
        }
        Command::Loss { pred, target } => {
            let pred = read_volume(&pred)?;
            let target = if target.extension().is_some_and(|e| e == VOLUME_EXT) {
                read_volume(&target)?
            } else {
                make_target_volume(&read_annotation(&target)?, pred.rows(), pred.cols())?
            };
            println!("{}", cross_entropy_loss(&target, &pred)?);
            Ok(())
        }
        Command::Eval { pred_dir, gt_dir, tolerance, beta, per_class, per_keypoint, out } => {
            let params = EvalParams::new(tolerance, beta)?;
            if (per_class || per_keypoint) && out.is_none() {
                return Err(Error::validation("out", "--per-class and --per-keypoint need --out"));
            }
            let frames = pair_frames(&pred_dir, &gt_dir, false)?
                .par_iter()
                .map(|(pred, gt)| load_pair(pred, gt, params.decode_params()))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&frames, &params)?;
            emit(out.as_deref(), &report.to_json())?;
            if let Some(out) = &out {
                if per_class {
                    write_text(&with_suffix(out, "per_class.csv"), &report.per_class_csv())?;
                }
                if per_keypoint {
                    write_text(&with_suffix(out, "per_keypoint.csv"), &report.per_keypoint_csv())?;
                }
            }
            Ok(())
        }
        Command::Sweep { mode, grid, pred_dir, gt_dir, beta, tolerance, out } => {
            let grid = parse_grid(&grid)?;
            EvalParams::new(tolerance, beta)?;
            let frames = pair_frames(&pred_dir, &gt_dir, true)?
                .par_iter()
                .map(|(pred, gt)| load_sweep_frame(pred, gt))
                .collect::<Result<Vec<_>>>()?;
            let points = match mode {
                SweepMode::Beta => beta_sweep(&frames, &grid, tolerance)?,
                SweepMode::Tolerance => {
                    let frames: Vec<_> = frames.into_iter().map(|f| (f, beta)).collect();
                    tolerance_sweep(&frames, &grid)?
                }
            };
            emit(out.as_deref(), &sweep_csv(&points))
        }
        Command::Localize { detections, model, scale, iters, threshold, seed, out } => {
            let params = RansacParams { iterations: iters, inlier_threshold_px: threshold, seed };
            params.validate()?;
            let det = read_detections(&detections)?;
            let loc = localize_frame(&det, &read_model(&model)?, scale, &params)?;
            let record = HomographyRecord::from_localization(&det.frame_id, &loc);
            emit(out.as_deref(), &(serde_json::to_string_pretty(&record).expect("record serializes") + "\n"))
        }
        Command::ImportCvat { xml, scale_factor, out_dir } => {
            let frames = parse_cvat(&read_text(&xml)?)?
                .iter()
                .map(|f| rescale_annotation(f, scale_factor))
                .collect::<Result<Vec<_>>>()?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for frame in &frames {
                write_annotation(frame, out_dir.join(format!("{}.json", frame.frame_id)))?;
            }
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "io" => 3,
        "estimation" => 5,
        _ => 4,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("POOL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::validation("POOL_THREADS", format!("`{value}` is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::validation("POOL_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {}", err.category(), err.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&err))
        }
    }
}
