//! Command implementations behind the `iqdet` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use iqdet::assign::{assign_image, AssignConfig, AssignmentResult, Instance};
use iqdet::geometry::{BBox, NormalizedOffset, PyramidSpec};
use iqdet::gridops::{FeatureGrid, GridShape, RoiAlignPlan};
use iqdet::io::{self, AnnotationFile, KvConfig};
use iqdet::qde::{encode, EncoderWeights};
use iqdet::qdist::QualityGmm;
use iqdet::toytrain::train::{
    checkpoint_meta, config_from_meta, heldout_scene_seeds, init_model, model_from_tensors, model_tensors,
};
use iqdet::toytrain::{evaluate, train_with, AssignMode, TrainConfig};
use iqdet::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const DEFAULT_LEVELS: &str = "P3:8,P4:16";
pub const DEFAULT_COUNT: usize = 12;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_EVAL_SCENES: usize = 200;
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Parse(_) => EXIT_INPUT,
            Error::Domain(_) | Error::Shape(_) => EXIT_INVARIANT,
            Error::Numerical(_) => EXIT_NUMERICAL,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Writes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<KvConfig> {
    match path {
        Some(p) => Ok(KvConfig::parse(&read_text(p)?)?),
        None => Ok(KvConfig::default()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Iqdet,
    Center,
}

impl From<ModeArg> for AssignMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Iqdet => AssignMode::Iqdet,
            ModeArg::Center => AssignMode::Center,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "iqdet", version, about = "Quality-distribution label assignment tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign positives and negatives for one image.
    Assign {
        /// Tensor container with one `C x H x W` grid per pyramid level.
        features: PathBuf,
        /// Annotation JSON.
        annotations: PathBuf,
        /// key=value file: levels, draws_per_level, top_k, gmm, checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw offsets from a mixture.
    Sample {
        gmm: PathBuf,
        #[arg(long, default_value_t = DEFAULT_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a mixture as a PGM heatmap and a PPM overlay of sampled points.
    Viz {
        gmm: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = DEFAULT_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; `.pgm` and `.ppm` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy detector; writes log.jsonl and a checkpoint into --out.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a toy checkpoint on held-out scenes.
    EvalToy {
        /// Checkpoint directory written by train-toy.
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_SCENES)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Assign { features, annotations, config, seed, out } => {
            let text = cmd_assign(&features, &annotations, config.as_deref(), seed)?;
            emit(out.as_deref(), &text)
        }
        Command::Sample { gmm, count, seed, out } => {
            let g = io::parse_gmm(&read_text(&gmm)?)?;
            emit(out.as_deref(), &cmd_sample(&g, count, seed)?)
        }
        Command::Viz { gmm, resolution, count, seed, out } => {
            let g = io::parse_gmm(&read_text(&gmm)?)?;
            let (pgm, ppm) = cmd_viz(&g, resolution, count, seed)?;
            write_bytes(&out.with_extension("pgm"), &pgm)?;
            write_bytes(&out.with_extension("ppm"), &ppm)
        }
        Command::TrainToy { config, seed, mode, steps, out } => {
            let mut kv = load_config(config.as_deref())?;
            if let Some(s) = seed {
                kv.set("seed", s);
            }
            if let Some(m) = mode {
                kv.set("mode", AssignMode::from(m));
            }
            if let Some(n) = steps {
                kv.set("steps", n);
            }
            cmd_train_toy(&TrainConfig::from_kv(&kv)?, &out)
        }
        Command::EvalToy { checkpoint, count, out } => emit(out.as_deref(), &cmd_eval_toy(&checkpoint, count)?),
    }
}

const ASSIGN_KEYS: [&str; 5] = ["levels", "draws_per_level", "top_k", "gmm", "checkpoint"];

/// Where the per-instance mixtures come from.
enum GmmSource {
    Fixed(QualityGmm<f64>),
    Encoder(EncoderWeights<f64>, iqdet::qde::EncoderConfig),
}

fn gmm_source(kv: &KvConfig, config_dir: &Path) -> CliResult<GmmSource> {
    match (kv.get("gmm"), kv.get("checkpoint")) {
        (Some(_), Some(_)) => Err(CliError::input("set either gmm or checkpoint, not both")),
        (None, Some(dir)) => {
            let (manifest, tensors) = io::read_checkpoint(&config_dir.join(dir))?;
            let cfg = config_from_meta(&manifest.meta)?;
            let model = model_from_tensors::<f64>(&cfg, &tensors)?;
            Ok(GmmSource::Encoder(model.encoder, cfg.encoder_config()))
        }
        (None, None) | (Some("fixed"), None) => Ok(GmmSource::Fixed(QualityGmm::fixed_baseline())),
        (Some(path), None) => Ok(GmmSource::Fixed(io::parse_gmm(&read_text(&config_dir.join(path))?)?)),
    }
}

/// Run-length encoding of one mask row: alternating run lengths, starting
/// with a run of `false` (possibly empty).
pub fn rle_row(row: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &v in row {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn gmm_json(g: &QualityGmm<f64>) -> Value {
    serde_json::to_value(g).expect("mixtures serialize")
}

pub fn assignment_json(
    seed: u64,
    pyramid: &PyramidSpec,
    shapes: &[GridShape<f64>],
    instances: &[Instance<f64>],
    result: &AssignmentResult<f64>,
) -> Value {
    let levels: Vec<Value> = pyramid
        .levels()
        .iter()
        .zip(shapes)
        .zip(&result.negatives)
        .map(|((lvl, s), mask)| {
            let rows: Vec<Vec<usize>> = mask.chunks(s.width).map(rle_row).collect();
            json!({
                "name": lvl.name,
                "stride": lvl.stride,
                "height": s.height,
                "width": s.width,
                "negatives": rows,
            })
        })
        .collect();
    let insts: Vec<Value> = instances
        .iter()
        .zip(&result.gmms)
        .map(|(i, g)| {
            json!({
                "box": i.bbox.as_array(),
                "class": i.class,
                "gmms": g.iter().map(gmm_json).collect::<Vec<_>>(),
            })
        })
        .collect();
    let positives: Vec<Value> = result
        .positives
        .iter()
        .map(|p| {
            let s = &p.sample;
            json!({
                "instance": s.instance,
                "level": s.level,
                "draw": s.draw,
                "point": [s.point.x, s.point.y],
                "offset": [s.offset.dx, s.offset.dy],
                "quality": s.quality,
                "cls_target": p.target.cls,
                "reg_target": p.target.reg.as_array(),
            })
        })
        .collect();
    json!({ "seed": seed, "levels": levels, "instances": insts, "positives": positives })
}

pub fn cmd_assign(features: &Path, annotations: &Path, config: Option<&Path>, seed: u64) -> CliResult<String> {
    let kv = load_config(config)?;
    kv.ensure_known(&ASSIGN_KEYS)?;
    let config_dir = config.and_then(Path::parent).unwrap_or(Path::new("."));
    let pyramid = io::parse_levels(kv.get("levels").unwrap_or(DEFAULT_LEVELS))?;
    let defaults = AssignConfig::default();
    let assign_cfg = AssignConfig {
        draws_per_level: kv.parsed_or("draws_per_level", defaults.draws_per_level)?,
        top_k: kv.parsed_or("top_k", defaults.top_k)?,
    };
    let source = gmm_source(&kv, config_dir)?;
    let bytes = fs::read(features).map_err(|e| CliError::input(format!("{}: {e}", features.display())))?;
    let grids: Vec<FeatureGrid<f64>> = io::grids_for_pyramid(&io::decode_tensors(&bytes)?, &pyramid)?;
    let ann = AnnotationFile::parse(&read_text(annotations)?)?;
    let [w, h] = ann.image_size;
    for (g, lvl) in grids.iter().zip(pyramid.levels()) {
        let (gw, gh) = g.shape().extent();
        if gw < w as f64 || gh < h as f64 {
            return Err(CliError {
                code: EXIT_INVARIANT,
                message: format!("grid {} covers {gw}x{gh} pixels, less than the {w}x{h} image", lvl.name),
            });
        }
    }
    let instances = ann.instances::<f64>()?;
    let gmms: Vec<Vec<QualityGmm<f64>>> = instances
        .iter()
        .map(|inst| {
            grids
                .iter()
                .map(|g| match &source {
                    GmmSource::Fixed(m) => Ok(m.clone()),
                    GmmSource::Encoder(weights, cfg) => {
                        let plan = RoiAlignPlan::new(g.shape(), &inst.bbox, cfg.pool, cfg.samples_per_bin)?;
                        Ok(encode(weights, &plan.apply(g)?, cfg)?)
                    }
                })
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<_>>()?;
    let shapes: Vec<GridShape<f64>> = grids.iter().map(FeatureGrid::shape).collect();
    let result = assign_image(&instances, gmms, &pyramid, &shapes, &assign_cfg, seed)?;
    let mut text = serde_json::to_string_pretty(&assignment_json(seed, &pyramid, &shapes, &instances, &result))
        .expect("assignment serializes");
    text.push('\n');
    Ok(text)
}

pub fn cmd_sample(gmm: &QualityGmm<f64>, count: usize, seed: u64) -> CliResult<String> {
    let samples = gmm.sample_offsets_seeded(count, seed)?;
    let items: Vec<Value> =
        samples.iter().map(|s| json!({ "offset": [s.offset.dx, s.offset.dy], "quality": s.quality })).collect();
    let mut text = serde_json::to_string_pretty(&json!({ "seed": seed, "count": count, "samples": items }))
        .expect("samples serialize");
    text.push('\n');
    Ok(text)
}

/// Normalized offset of pixel `(row, col)`'s center on an `r x r` raster
/// spanning the box `[-1, 1]^2`.
pub fn pixel_offset(row: usize, col: usize, r: usize) -> NormalizedOffset<f64> {
    let unit = |k: usize| 2.0 * (k as f64 + 0.5) / r as f64 - 1.0;
    NormalizedOffset::new(unit(col), unit(row))
}

/// 8-bit brightness of one heatmap pixel.
pub fn heat_value(gmm: &QualityGmm<f64>, row: usize, col: usize, r: usize) -> u8 {
    (255.0 * gmm.quality_target(pixel_offset(row, col, r))).round() as u8
}

pub fn cmd_viz(gmm: &QualityGmm<f64>, resolution: usize, count: usize, seed: u64) -> CliResult<(Vec<u8>, Vec<u8>)> {
    if resolution < MIN_RESOLUTION {
        return Err(CliError::input(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    let r = resolution;
    let heat: Vec<u8> = (0..r * r).map(|i| heat_value(gmm, i / r, i % r, r)).collect();
    let mut overlay: Vec<[u8; 3]> = heat.iter().map(|&v| [v, v, v]).collect();
    // offsets map onto the raster the same way pixel centers do
    let box_px = BBox::new(0.0, 0.0, r as f64, r as f64)?;
    for s in gmm.sample_offsets_seeded(count, seed)? {
        let p = iqdet::geometry::denormalize_offset(s.offset, &box_px);
        let (cx, cy) = ((p.x.floor() as isize).clamp(0, r as isize - 1), (p.y.floor() as isize).clamp(0, r as isize - 1));
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..r as isize).contains(&x) && (0..r as isize).contains(&y) {
                    overlay[y as usize * r + x as usize] = [255, 0, 0];
                }
            }
        }
    }
    Ok((io::encode_pgm(r, r, &heat)?, io::encode_ppm(r, r, &overlay)?))
}

/// Trains and writes `log.jsonl`, `checkpoint.iqt` and `manifest.json` into
/// `out`. On a numerical abort the diagnostic goes to `abort.json`.
pub fn cmd_train_toy(config: &TrainConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    let mut log = String::new();
    let result = train_with::<f64>(config, init_model(config), |r| {
        log.push_str(&r.to_json_line());
        log.push('\n');
    });
    write_bytes(&out.join("log.jsonl"), log.as_bytes())?;
    match result {
        Ok(outcome) => {
            io::write_checkpoint(out, &model_tensors(&outcome.model)?, checkpoint_meta(config))?;
            Ok(())
        }
        Err(Error::Numerical(dump)) => {
            write_bytes(&out.join("abort.json"), format!("{dump}\n").as_bytes())?;
            Err(CliError { code: EXIT_NUMERICAL, message: format!("training aborted: {dump}") })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval_toy(checkpoint: &Path, count: usize) -> CliResult<String> {
    let (manifest, tensors) = io::read_checkpoint(checkpoint)?;
    let config = config_from_meta(&manifest.meta)?;
    let model = model_from_tensors::<f64>(&config, &tensors)?;
    let report = evaluate(&model, &config, &heldout_scene_seeds(count))?;
    Ok(format!("{}\n", report.to_json()))
}
