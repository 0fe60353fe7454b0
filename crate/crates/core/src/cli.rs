//! Command-line front end: `gen`, `train`, `eval` and `warp`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::{
    apply_affine, solve_affine, solve_affine_2d, template_baseline_fit, AffineMap, DepthVector,
    KeypointSet2D, KeypointSet3D, DEFAULT_DAMPING,
};
use crate::metrics::{evaluate, export_depth_heatmap, MetricsReport};
use crate::nnet::{
    forward, init_model, load_checkpoint, predict_target, save_checkpoint, train_with_validation,
    MlpModel, TrainConfig, Variant,
};
use crate::synth::{
    generate_dataset, load_dataset, parse_points, save_dataset, PairSample, PoseRange,
    SceneTemplate,
};
use crate::warp::{warp_image, write_pgm, Image};

pub const SEED_ENV: &str = "KPDK_SEED";

#[derive(Debug, Parser)]
#[command(name = "kpdk", version, about = "Keypoint depth learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of keypoint pairs (JSON Lines).
    Gen(GenArgs),
    /// Train a depth network on a dataset.
    Train(TrainArgs),
    /// Evaluate a model or a baseline on a dataset.
    Eval(EvalArgs),
    /// Warp an image from source keypoints towards target keypoints.
    Warp(WarpArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    /// Built-in template: face68 or cloud<K>.
    #[arg(long, default_value = "face68")]
    pub template: String,
    /// Number of pairs.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0, env = SEED_ENV)]
    pub seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum absolute yaw in degrees.
    #[arg(long, default_value_t = 60.0)]
    pub max_yaw: f64,
    /// Maximum absolute pitch in degrees.
    #[arg(long, default_value_t = 20.0)]
    pub max_pitch: f64,
    /// Maximum absolute roll in degrees.
    #[arg(long, default_value_t = 10.0)]
    pub max_roll: f64,
    #[arg(long, default_value_t = 0.8)]
    pub min_scale: f64,
    #[arg(long, default_value_t = 1.2)]
    pub max_scale: f64,
    /// Maximum absolute translation in normalized units.
    #[arg(long, default_value_t = 0.1)]
    pub max_shift: f64,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Pseudoinverse)]
    pub variant: VariantArg,
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Optional validation dataset, scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 0, env = SEED_ENV)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    /// Relative ridge damping of the least-squares solve.
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    /// Halve the learning rate when an epoch does not improve the best loss.
    #[arg(long)]
    pub halve_lr_on_plateau: bool,
    /// Checkpoint output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV [default: <out stem>.trainlog.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Evaluation dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint; required unless --baseline is given.
    #[arg(
        long,
        required_unless_present = "baseline",
        conflicts_with = "baseline"
    )]
    pub model: Option<PathBuf>,
    /// How the map is obtained from the model [default: the model's own variant].
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Template for eye landmarks and the template baseline [default: from the dataset].
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    /// Report output path (JSON); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Depth heatmap CSV output.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
}

#[derive(Debug, clap::Args)]
pub struct WarpArgs {
    /// Source image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Source keypoints: JSON array of [x, y] in normalized image coordinates.
    #[arg(long)]
    pub src: PathBuf,
    /// Target keypoints, same format as --src.
    #[arg(long, required_unless_present = "targets", conflicts_with = "targets")]
    pub tgt: Option<PathBuf>,
    /// Sweep mode: JSONL file with one target keypoint array per line.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Checkpoint used to predict source depths.
    #[arg(long, conflicts_with = "depths")]
    pub model: Option<PathBuf>,
    /// Source depths: JSON array of numbers. Zero depths when neither this nor --model is given.
    #[arg(long)]
    pub depths: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    /// Output size as WIDTHxHEIGHT [default: source image size].
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Output PNG; in sweep mode frames are written as <stem>_NNNN.png.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a binary PPM next to each PNG.
    #[arg(long)]
    pub ppm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Separate,
    #[value(name = "secondary_lsq", alias = "secondary-lsq")]
    SecondaryLsq,
    Pseudoinverse,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Separate => Variant::Separate,
            VariantArg::SecondaryLsq => Variant::SecondaryLsq,
            VariantArg::Pseudoinverse => Variant::Pseudoinverse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// 2D affine registration of source to target.
    Affine2d,
    /// Mean 3D template aligned to the source, then a 3D-to-2D fit.
    Template,
    /// Ground-truth depths with the least-squares map.
    #[value(name = "gt_depth", alias = "gt-depth")]
    GtDepth,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width '{w}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height '{h}'"))?;
    if w == 0 || h == 0 {
        return Err("width and height must be >= 1".into());
    }
    Ok((w, h))
}

/// Process exit status for a failed command: 3 for numerical failures, 2 for
/// everything else.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Warp(a) => cmd_warp(&a),
    }
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "{flag}: no such file: {}",
            path.display()
        )));
    }
    Ok(())
}

fn require_out_dir(flag: &str, path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => Err(Error::InvalidArgument(
            format!("{flag}: directory does not exist: {}", d.display()),
        )),
        _ => Ok(()),
    }
}

fn require_positive(flag: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{flag} must be > 0, got {v}"
        )));
    }
    Ok(())
}

fn require_damping(v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "--damping must be >= 0, got {v}"
        )));
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    require_out_dir("--out", &a.out)?;
    let deg = std::f64::consts::PI / 180.0;
    for (flag, v) in [
        ("--max-yaw", a.max_yaw),
        ("--max-pitch", a.max_pitch),
        ("--max-roll", a.max_roll),
        ("--max-shift", a.max_shift),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{flag} must be >= 0, got {v}"
            )));
        }
    }
    require_positive("--min-scale", a.min_scale)?;
    if !(a.max_scale >= a.min_scale && a.max_scale.is_finite()) {
        return Err(Error::InvalidArgument(
            "--max-scale must be >= --min-scale".into(),
        ));
    }
    let range = PoseRange {
        yaw: [-a.max_yaw * deg, a.max_yaw * deg],
        pitch: [-a.max_pitch * deg, a.max_pitch * deg],
        roll: [-a.max_roll * deg, a.max_roll * deg],
        scale: [a.min_scale, a.max_scale],
        translation: [-a.max_shift, a.max_shift],
    };
    let template = SceneTemplate::by_name(&a.template)
        .map_err(|e| Error::InvalidArgument(format!("--template: {e}")))?;
    let samples = generate_dataset(&template, a.count as usize, &range, a.seed)?;
    save_dataset(&samples, &a.out)
}

fn default_log_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.trainlog.csv"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    require_file("--data", &a.data)?;
    if let Some(v) = &a.val {
        require_file("--val", v)?;
    }
    require_out_dir("--out", &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    require_out_dir("--log", &log_path)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        seed: a.seed,
        variant: a.variant.into(),
        damping: a.damping,
        halve_lr_on_plateau: a.halve_lr_on_plateau,
    };
    config.validate()?;

    let data = load_dataset(&a.data)?;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    if let Some(v) = &val {
        if v[0].len() != data[0].len() {
            return Err(Error::InvalidArgument(format!(
                "--val has {} keypoints per pair, --data has {}",
                v[0].len(),
                data[0].len()
            )));
        }
    }
    let model = init_model(data[0].len(), config.variant, config.seed)?;
    let (model, log) = train_with_validation(model, &data, val.as_deref(), &config)?;
    save_checkpoint(&model, &a.out)?;
    write_atomic(&log_path, log.to_csv().as_bytes())
}

#[derive(Serialize)]
struct EvalReport {
    method: String,
    #[serde(flatten)]
    metrics: MetricsReport,
}

fn template_for(name: Option<&str>, data: &[PairSample]) -> Result<Option<SceneTemplate>> {
    let name = name
        .map(str::to_string)
        .or_else(|| data[0].meta.as_ref().map(|m| m.template.clone()));
    let Some(name) = name else { return Ok(None) };
    let t = SceneTemplate::by_name(&name)
        .map_err(|e| Error::InvalidArgument(format!("--template: {e}")))?;
    if t.len() != data[0].len() {
        return Err(Error::InvalidArgument(format!(
            "--template: '{name}' has {} keypoints, data has {}",
            t.len(),
            data[0].len()
        )));
    }
    Ok(Some(t))
}

/// Predictions (and depths, when the method has any) for every sample.
type Predictions = (Vec<KeypointSet2D>, Option<Vec<DepthVector>>);

fn predict_model(
    model: &MlpModel,
    variant: Variant,
    data: &[PairSample],
    damping: f64,
) -> Result<Predictions> {
    let mut preds = Vec::with_capacity(data.len());
    let mut depths = Vec::with_capacity(data.len());
    for s in data {
        let (p, _, z) = predict_target(model, s, variant, damping)?;
        preds.push(p);
        depths.push(z);
    }
    Ok((preds, Some(depths)))
}

fn predict_baseline(
    baseline: Baseline,
    template: Option<&SceneTemplate>,
    data: &[PairSample],
    damping: f64,
) -> Result<Predictions> {
    match baseline {
        Baseline::Affine2d => {
            let preds = data
                .iter()
                .map(|s| {
                    let map = solve_affine_2d(&s.src, &s.tgt)?;
                    let flat = KeypointSet3D::from_parts(&s.src, &DepthVector::zeros(s.len()))?;
                    Ok(apply_affine(&map, &flat))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((preds, None))
        }
        Baseline::Template => {
            let t = template.ok_or_else(|| {
                Error::InvalidArgument(
                    "--baseline template needs --template or dataset metadata".into(),
                )
            })?;
            let mut preds = Vec::with_capacity(data.len());
            let mut depths = Vec::with_capacity(data.len());
            for s in data {
                let fit = template_baseline_fit(&t.points3d, &s.src, &s.tgt, damping)?;
                preds.push(fit.normalized);
                depths.push(fit.depths);
            }
            Ok((preds, Some(depths)))
        }
        Baseline::GtDepth => {
            let mut preds = Vec::with_capacity(data.len());
            let mut depths = Vec::with_capacity(data.len());
            for (i, s) in data.iter().enumerate() {
                let z = s.gt_depth.clone().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "--baseline gt_depth: sample {} has no gt_depth",
                        i + 1
                    ))
                })?;
                let pts = KeypointSet3D::from_parts(&s.src, &z)?;
                let map = solve_affine(&pts, &s.tgt, damping)?;
                preds.push(apply_affine(&map, &pts));
                depths.push(z);
            }
            Ok((preds, Some(depths)))
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require_file("--data", &a.data)?;
    if let Some(m) = &a.model {
        require_file("--model", m)?;
    }
    if let Some(o) = &a.out {
        require_out_dir("--out", o)?;
    }
    if let Some(h) = &a.heatmap {
        require_out_dir("--heatmap", h)?;
    }
    require_damping(a.damping)?;

    let data = load_dataset(&a.data)?;
    let template = template_for(a.template.as_deref(), &data)?;
    let (method, (preds, depths)) = match (&a.model, a.baseline) {
        (Some(path), _) => {
            let model = load_checkpoint(path)?;
            if model.k != data[0].len() {
                return Err(Error::InvalidArgument(format!(
                    "--model expects {} keypoints, data has {}",
                    model.k,
                    data[0].len()
                )));
            }
            let variant = a.variant.map(Variant::from).unwrap_or(model.variant);
            (
                variant.as_str().to_string(),
                predict_model(&model, variant, &data, a.damping)?,
            )
        }
        (None, Some(b)) => {
            let name = b
                .to_possible_value()
                .map(|v| v.get_name().to_string())
                .unwrap_or_default();
            (
                name,
                predict_baseline(b, template.as_ref(), &data, a.damping)?,
            )
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "one of --model or --baseline is required".into(),
            ))
        }
    };

    let have_gt = data.iter().all(|s| s.gt_depth.is_some());
    let depth_for_corr = depths.as_deref().filter(|_| have_gt);
    let eyes = template.as_ref().and_then(SceneTemplate::eye_rings);
    let metrics = evaluate(
        &data,
        &preds,
        depth_for_corr,
        eyes.as_ref().map(|(l, r)| (l.as_slice(), r.as_slice())),
    )?;

    if let Some(path) = &a.heatmap {
        let pred = depth_for_corr.ok_or_else(|| {
            Error::InvalidArgument(
                "--heatmap needs predicted depths and ground-truth depths".into(),
            )
        })?;
        let gt: Vec<DepthVector> = data.iter().filter_map(|s| s.gt_depth.clone()).collect();
        let hm = export_depth_heatmap(pred, &gt, a.bins as usize)?;
        write_atomic(path, hm.to_csv().as_bytes())?;
    }

    let mut text = serde_json::to_string_pretty(&EvalReport { method, metrics })?;
    text.push('\n');
    match &a.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_error(path: &Path, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Reads a JSON array of `[x, y]` pairs.
pub fn read_keypoints(path: &Path) -> Result<KeypointSet2D> {
    let text = std::fs::read_to_string(path)?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), "-", e.to_string()))?;
    parse_points(&v, "keypoints").map_err(|(f, m)| parse_error(path, 1, &f, m))
}

/// Reads one keypoint array per non-empty line.
pub fn read_keypoint_lines(path: &Path) -> Result<Vec<KeypointSet2D>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(line).map_err(|e| parse_error(path, i + 1, "-", e.to_string()))?;
        out.push(parse_points(&v, "keypoints").map_err(|(f, m)| parse_error(path, i + 1, &f, m))?);
    }
    if out.is_empty() {
        return Err(parse_error(path, 0, "-", "no targets"));
    }
    Ok(out)
}

pub fn read_depths(path: &Path) -> Result<DepthVector> {
    let text = std::fs::read_to_string(path)?;
    let z: Vec<f64> =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), "-", e.to_string()))?;
    DepthVector::new(z).map_err(|e| parse_error(path, 1, "depths", e.to_string()))
}

enum DepthSource {
    Model(MlpModel),
    Fixed(DepthVector),
}

impl DepthSource {
    fn map_for(
        &self,
        src: &KeypointSet2D,
        tgt: &KeypointSet2D,
        damping: f64,
    ) -> Result<(DepthVector, AffineMap)> {
        let (z, head) = match self {
            DepthSource::Model(m) => forward(m, src, tgt)?,
            DepthSource::Fixed(z) => (z.clone(), None),
        };
        let map = match head {
            Some(map) => map,
            None => solve_affine(&KeypointSet3D::from_parts(src, &z)?, tgt, damping)?,
        };
        Ok((z, map))
    }
}

fn frame_path(out: &Path, index: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_{index:04}.png"))
}

fn write_frame(out: &Path, img: &Image, mask: &[u8], ppm: bool) -> Result<()> {
    img.write_png(out)?;
    write_pgm(
        &out.with_extension("mask.pgm"),
        img.width(),
        img.height(),
        mask,
    )?;
    if ppm {
        img.write_ppm(&out.with_extension("ppm"))?;
    }
    Ok(())
}

pub fn cmd_warp(a: &WarpArgs) -> Result<()> {
    require_file("--image", &a.image)?;
    require_file("--src", &a.src)?;
    for (flag, p) in [
        ("--tgt", &a.tgt),
        ("--targets", &a.targets),
        ("--model", &a.model),
        ("--depths", &a.depths),
    ] {
        if let Some(p) = p {
            require_file(flag, p)?;
        }
    }
    require_out_dir("--out", &a.out)?;
    require_damping(a.damping)?;

    let image = Image::read_png(&a.image)?;
    let src = read_keypoints(&a.src)?;
    let (targets, sweep) = match (&a.tgt, &a.targets) {
        (Some(t), _) => (vec![read_keypoints(t)?], false),
        (None, Some(list)) => (read_keypoint_lines(list)?, true),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "one of --tgt or --targets is required".into(),
            ))
        }
    };
    for t in &targets {
        if t.len() != src.len() {
            return Err(Error::InvalidArgument(format!(
                "target has {} keypoints, --src has {}",
                t.len(),
                src.len()
            )));
        }
    }
    let depth_source = match (&a.model, &a.depths) {
        (Some(m), _) => {
            let model = load_checkpoint(m)?;
            if model.k != src.len() {
                return Err(Error::InvalidArgument(format!(
                    "--model expects {} keypoints, --src has {}",
                    model.k,
                    src.len()
                )));
            }
            DepthSource::Model(model)
        }
        (None, Some(d)) => {
            let z = read_depths(d)?;
            if z.len() != src.len() {
                return Err(Error::InvalidArgument(format!(
                    "--depths has {} values, --src has {}",
                    z.len(),
                    src.len()
                )));
            }
            DepthSource::Fixed(z)
        }
        (None, None) => DepthSource::Fixed(DepthVector::zeros(src.len())),
    };
    let size = a.size.unwrap_or((image.width(), image.height()));

    for (i, tgt) in targets.iter().enumerate() {
        let (z, map) = depth_source.map_for(&src, tgt, a.damping)?;
        let warped = warp_image(&image, &src, &z, &map, size)?;
        if warped.skipped > 0 {
            eprintln!("warp: skipped {} degenerate triangle(s)", warped.skipped);
        }
        let out = if sweep {
            frame_path(&a.out, i)
        } else {
            a.out.clone()
        };
        write_frame(&out, &warped.image, &warped.mask, a.ppm)?;
    }
    Ok(())
}
