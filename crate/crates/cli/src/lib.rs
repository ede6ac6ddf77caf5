//! Batch propagation over a directory of frames, with optional evaluation
//! against ground-truth masks.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Parser;
use serde::Serialize;

use qtvos_core::io::{self, RunManifest};
use qtvos_core::metrics::{boundary_f, default_tolerance, jaccard};
use qtvos_core::network::ObjectTrace;
use qtvos_core::runner::{list_frames, propagate, Reference};
use qtvos_core::{Error, InferenceConfig, LabelMap, ModelConfig, Network, ObjectId, Session};

#[derive(Debug, Clone, Parser)]
#[command(name = "qtvos", version, about = "Propagate a first-frame mask through a video")]
#[command(group(clap::ArgGroup::new("init").required(true).args(["weights", "random_init"])))]
pub struct Args {
    /// Directory of frames, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Label mask (indexed PNG or ASCII PGM) for the first frame.
    #[arg(long)]
    pub first_mask: PathBuf,
    /// Weight file to load.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Initialize weights randomly from this seed instead of loading them.
    #[arg(long)]
    pub random_init: Option<u64>,
    /// Model shape as JSON; defaults are used for missing fields.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub mem_interval: usize,
    #[arg(long, default_value_t = 5)]
    pub t_max: usize,
    #[arg(long, default_value_t = 30)]
    pub top_k: usize,
    #[arg(long, default_value_t = 480)]
    pub max_short_edge: usize,
    /// Ground-truth masks named like the frames.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write object-transformer attention maps for every frame here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_MISSING_INPUT: u8 = 2;
pub const EXIT_INCOMPATIBLE_WEIGHTS: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::new(EXIT_FAILURE, error)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectScore {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "J&F")]
    pub jf: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub evaluated_frames: usize,
    pub boundary_tolerance_px: usize,
    pub per_object: BTreeMap<ObjectId, ObjectScore>,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "J&F")]
    pub jf: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub frames: usize,
    pub objects: Vec<ObjectId>,
    pub seconds: f64,
    pub fps: f64,
    /// Wall time of each frame in seconds, in frame order.
    pub frame_seconds: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn inference_config(args: &Args) -> InferenceConfig {
    InferenceConfig {
        mem_interval: args.mem_interval,
        t_max: args.t_max,
        top_k: args.top_k,
        max_short_edge: args.max_short_edge,
    }
}

fn load_network(args: &Args, manifest: &mut RunManifest) -> Result<Network, Failure> {
    let model = manifest.model.clone();
    match (&args.weights, args.random_init) {
        (Some(path), _) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("cannot read weights {}", path.display()))
                .map_err(|e| Failure::new(EXIT_MISSING_INPUT, e))?;
            let reg = io::decode_weights(&bytes)
                .and_then(|reg| Network::from_registry(&reg, &model))
                .with_context(|| format!("weights {} do not fit the model", path.display()))
                .map_err(|e| Failure::new(EXIT_INCOMPATIBLE_WEIGHTS, e))?;
            manifest.weights_crc32 = Some(crc_of(&bytes));
            Ok(reg)
        }
        (None, Some(seed)) => {
            manifest.seed = Some(seed);
            Ok(Network::random(&model, seed).context("cannot build the model")?.1)
        }
        (None, None) => Err(Failure::new(
            EXIT_FAILURE,
            anyhow!("either --weights or --random-init is required"),
        )),
    }
}

/// The checksum stored in the container's last four bytes.
fn crc_of(bytes: &[u8]) -> u32 {
    let tail: [u8; 4] = bytes[bytes.len() - 4..].try_into().expect("validated container");
    u32::from_le_bytes(tail)
}

fn model_config(args: &Args) -> anyhow::Result<ModelConfig> {
    let Some(path) = &args.model_config else {
        return Ok(ModelConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("invalid model config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs the whole pipeline: propagate, write masks and manifest, evaluate.
pub fn run(args: &Args) -> Result<Report, Failure> {
    let frames = list_frames(&args.frames)
        .with_context(|| format!("cannot list frames in {}", args.frames.display()))
        .map_err(|e| Failure::new(EXIT_MISSING_INPUT, e))?;
    if frames.is_empty() {
        return Err(Failure::new(
            EXIT_MISSING_INPUT,
            anyhow!("no frames (png/jpg) in {}", args.frames.display()),
        ));
    }
    if !args.first_mask.is_file() {
        return Err(Failure::new(
            EXIT_MISSING_INPUT,
            anyhow!("first mask {} not found", args.first_mask.display()),
        ));
    }
    let first = io::read_mask(&args.first_mask)
        .with_context(|| format!("cannot read first mask {}", args.first_mask.display()))?;

    let inference = inference_config(args);
    inference.validate().context("invalid inference settings")?;
    let mut manifest = RunManifest::new(model_config(args)?, inference.clone());
    let net = Arc::new(load_network(args, &mut manifest)?);
    let norm = manifest.normalization;

    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    if let Some(dir) = &args.dump_attention {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut session = Session::new(Arc::clone(&net), inference).context("invalid inference settings")?;
    session.set_tracing(args.dump_attention.is_some());

    let references = BTreeMap::from([(
        0,
        Reference {
            mask: first,
            permanent: false,
        },
    )]);
    let mut predictions: Vec<LabelMap> = Vec::with_capacity(frames.len());
    let mut frame_seconds = Vec::with_capacity(frames.len());
    let mut write_error = None;
    let started = Instant::now();
    let frame_started = Cell::new(Instant::now());
    propagate(
        &mut session,
        frames.len(),
        &references,
        0,
        |i| {
            frame_started.set(Instant::now());
            io::read_frame(&frames[i], &norm)
        },
        |out| {
            frame_seconds.push(frame_started.get().elapsed().as_secs_f64());
            let name = stem(&frames[out.frame_index]);
            let mut result = io::write_mask(&out.labels, args.out.join(format!("{name}.png")))
                .with_context(|| format!("cannot write mask for frame {name}"));
            if let (Some(dir), Ok(())) = (&args.dump_attention, &result) {
                result = dump_attention(&dir.join(format!("{name}.json")), out.frame_index, &out.traces);
            }
            tracing::debug!(frame = out.frame_index, "done");
            predictions.push(out.labels);
            match result {
                Ok(()) => true,
                Err(e) => {
                    write_error = Some(e);
                    false
                }
            }
        },
    )
    .map_err(|e| match e {
        Error::Io { .. } => Failure::new(EXIT_MISSING_INPUT, e),
        e => Failure::new(EXIT_FAILURE, e),
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let seconds = started.elapsed().as_secs_f64();
    manifest
        .write(args.out.join("manifest.json"))
        .context("cannot write manifest")?;

    let objects = session.objects();
    let propagated = frames.len() - 1;
    let metrics = match &args.gt {
        Some(dir) => Some(evaluate(dir, &frames, &predictions, &objects)?),
        None => None,
    };
    let report = Report {
        frames: frames.len(),
        objects,
        seconds,
        fps: if seconds > 0.0 { propagated as f64 / seconds } else { 0.0 },
        frame_seconds,
        metrics,
    };
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json() + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    }
    tracing::info!(frames = report.frames, fps = report.fps, "finished");
    Ok(report)
}

fn find_gt(dir: &Path, name: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

/// Scores every non-reference frame that has a ground-truth mask.
pub fn evaluate(gt_dir: &Path, frames: &[PathBuf], predictions: &[LabelMap], objects: &[ObjectId]) -> anyhow::Result<Metrics> {
    let mut sums: BTreeMap<ObjectId, (f64, f64)> = objects.iter().map(|&o| (o, (0.0, 0.0))).collect();
    let mut evaluated = 0;
    let mut tolerance = 0;
    for (path, pred) in frames.iter().zip(predictions).skip(1) {
        let Some(gt_path) = find_gt(gt_dir, &stem(path)) else {
            continue;
        };
        let gt = io::read_mask(&gt_path).with_context(|| format!("cannot read {}", gt_path.display()))?;
        tolerance = default_tolerance(gt.height(), gt.width());
        for (&o, (j, f)) in sums.iter_mut() {
            *j += jaccard(pred, &gt, o)?;
            *f += boundary_f(pred, &gt, o, tolerance)?;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(anyhow!("no ground-truth masks matching the frames in {}", gt_dir.display()));
    }
    let per_object: BTreeMap<ObjectId, ObjectScore> = sums
        .into_iter()
        .map(|(o, (j, f))| {
            let (j, f) = (j / evaluated as f64, f / evaluated as f64);
            (o, ObjectScore { j, f, jf: (j + f) / 2.0 })
        })
        .collect();
    let n = per_object.len().max(1) as f64;
    let j = per_object.values().map(|s| s.j).sum::<f64>() / n;
    let f = per_object.values().map(|s| s.f).sum::<f64>() / n;
    let jf = per_object.values().map(|s| s.jf).sum::<f64>() / n;
    Ok(Metrics {
        evaluated_frames: evaluated,
        boundary_tolerance_px: tolerance,
        per_object,
        j,
        f,
        jf,
    })
}

#[derive(Serialize)]
struct AttentionDump<'a> {
    frame: usize,
    objects: Vec<ObjectAttention<'a>>,
}

#[derive(Serialize)]
struct ObjectAttention<'a> {
    object: ObjectId,
    blocks: Vec<BlockAttention<'a>>,
}

#[derive(Serialize)]
struct BlockAttention<'a> {
    /// Foreground probability that defined the block's attention mask (`HW`).
    aux_mask: &'a [f32],
    /// Head-averaged query-to-pixel weights, one row per query.
    mean: Vec<&'a [f32]>,
    /// Per-head weights, `heads × queries × HW`.
    heads: Vec<Vec<&'a [f32]>>,
}

fn rows(t: &qtvos_core::Tensor) -> Vec<&[f32]> {
    let width = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(width).collect()
}

fn dump_attention(path: &Path, frame: usize, traces: &[ObjectTrace]) -> anyhow::Result<()> {
    if traces.is_empty() {
        return Ok(());
    }
    let means: Vec<Vec<qtvos_core::Tensor>> = traces
        .iter()
        .map(|t| t.blocks.iter().map(|b| head_mean(&b.attention)).collect())
        .collect();
    let dump = AttentionDump {
        frame,
        objects: traces
            .iter()
            .zip(&means)
            .map(|(t, m)| ObjectAttention {
                object: t.object,
                blocks: t
                    .blocks
                    .iter()
                    .zip(m)
                    .map(|(b, mean)| BlockAttention {
                        aux_mask: b.aux_mask.data(),
                        mean: rows(mean),
                        heads: b.attention.iter().map(rows).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&dump)?;
    std::fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))
}

fn head_mean(heads: &[qtvos_core::Tensor]) -> qtvos_core::Tensor {
    let n = heads.len().max(1) as f64;
    let shape = heads.first().map(|h| h.shape().to_vec()).unwrap_or_default();
    qtvos_core::Tensor::from_fn(shape, |i| {
        (heads.iter().map(|h| h.data()[i] as f64).sum::<f64>() / n) as f32
    })
}
