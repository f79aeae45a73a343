//! Training, evaluation and ablation runs over synthetic data, with every
//! artifact written under the run's output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tubelet_core::data::{generate_dataset, AnnotationSet, Video};
use tubelet_core::eval::{
    frame_ap, frame_detections, frame_ground_truth, tube_detections, tube_ground_truth, video_ap_summary, write_frame_csv,
    write_video_csv, ApReport, VideoApSummary,
};
use tubelet_core::infer::{detect_video, InferConfig};
use tubelet_core::linking::{read_predictions, write_predictions, PredictionRecord, VideoTube};
use tubelet_core::model::checkpoint::{check_compatible, load_params, save_params};
use tubelet_core::model::{flop_count, AttentionMode, Model, ModelParams, QueryBinding, QueryMode};
use tubelet_core::render::render_video;
use tubelet_core::train::{thin_supervision, train, StepLog};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "params.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const FRAME_AP_FILE: &str = "frame_ap.csv";
pub const VIDEO_AP_FILE: &str = "video_ap.csv";
pub const METRICS_FILE: &str = "metrics.csv";

type Dataset = Vec<(Video, AnnotationSet)>;

pub fn train_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(generate_dataset(&cfg.data.scene, cfg.data.train_videos, cfg.data.seed, "train-")?)
}

pub fn eval_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.data.eval_videos == 0 {
        return train_split(cfg);
    }
    // disjoint seed stream from the training videos
    let seed = cfg.data.seed.wrapping_add(0x5EED_0000_0000);
    Ok(generate_dataset(&cfg.data.scene, cfg.data.eval_videos, seed, "eval-")?)
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    cfg.save(&cfg.output_dir.join(CONFIG_FILE))
}

pub struct TrainReport {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
    pub checkpoint: PathBuf,
}

/// Trains from the configured seed and writes the resolved config, the
/// per-step log and the checkpoint.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    prepare_dir(cfg)?;
    let model = Model::new(cfg.model.clone())?;
    let mut params = model.init_params(cfg.seed);
    let data = thin_supervision(&train_split(cfg)?, cfg.supervision, cfg.data.seed);
    let log = train(&model, &mut params, &data, &cfg.train_config(), |_| {})?;
    write_train_log(&log, &cfg.output_dir.join(TRAIN_LOG_FILE))?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    save_params(&params, &checkpoint)?;
    Ok(TrainReport { params, log, checkpoint })
}

fn write_train_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "l_box", "l_iou", "l_class", "total", "grad_norm"])?;
    for l in log {
        w.write_record([
            l.step.to_string(),
            l.lr.to_string(),
            l.l_box.to_string(),
            l.l_iou.to_string(),
            l.l_class.to_string(),
            l.total.to_string(),
            l.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub frame: ApReport,
    pub video: VideoApSummary,
}

impl EvalSummary {
    pub fn frame_map(&self) -> f64 {
        self.frame.ap.mean.unwrap_or(0.0)
    }

    pub fn vap20(&self) -> f64 {
        self.video.at_20.mean.unwrap_or(0.0)
    }

    pub fn vap50(&self) -> f64 {
        self.video.at_50.mean.unwrap_or(0.0)
    }
}

/// Scores prediction records against `annotations`. Every record must name
/// an annotated video; frame AP is taken on each video's labelled frames.
pub fn evaluate_records(
    records: &[PredictionRecord],
    annotations: &[AnnotationSet],
    classes: usize,
    iou_thresh: f64,
    size_buckets: bool,
) -> Result<EvalSummary> {
    let mut tubes: BTreeMap<&str, Vec<VideoTube>> = BTreeMap::new();
    for r in records {
        if !annotations.iter().any(|a| a.video_id == r.video_id) {
            bail!("prediction for unknown video {:?}", r.video_id);
        }
        let list = tubes.entry(r.video_id.as_str()).or_default();
        let tube = r.to_video_tube(list.len())?;
        list.push(tube);
    }
    let (mut fd, mut fg, mut td, mut tg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut resolution = BTreeMap::new();
    for ann in annotations {
        let vt = tubes.get(ann.video_id.as_str()).map_or(&[][..], Vec::as_slice);
        fd.extend(frame_detections(&ann.video_id, vt, &ann.labelled_frames()));
        fg.extend(frame_ground_truth(ann));
        td.extend(tube_detections(&ann.video_id, vt, classes));
        tg.extend(tube_ground_truth(ann));
        resolution.insert(ann.video_id.clone(), (ann.width, ann.height));
    }
    let frame = frame_ap(&fd, &fg, classes, iou_thresh, size_buckets.then_some(&resolution))?;
    let video = video_ap_summary(&td, &tg, classes)?;
    Ok(EvalSummary { frame, video })
}

/// Inference over the evaluation split with the checkpoint at `checkpoint`
/// (default: the run's own), then predictions, metric tables and overlays.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let ckpt = checkpoint.map_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    if !ckpt.exists() {
        bail!("missing checkpoint {}", ckpt.display());
    }
    let model = Model::new(cfg.model.clone())?;
    let params = load_params(&ckpt)?;
    check_compatible(&params, &model.init_params(0))?;
    prepare_dir(cfg)?;
    evaluate_model(cfg, &model, &params)
}

fn evaluate_model(cfg: &ExperimentConfig, model: &Model, params: &ModelParams) -> Result<EvalSummary> {
    let data = eval_split(cfg)?;
    let infer = InferConfig {
        stride: cfg.stride(),
        link_iou_min: cfg.eval.link_iou_min,
        min_confidence: cfg.eval.min_confidence,
    };
    let mut records = Vec::new();
    for (k, (video, ann)) in data.iter().enumerate() {
        let tubes = detect_video(model, params, video, &infer)?;
        if k < cfg.eval.render_videos {
            let dir = cfg.output_dir.join("overlays").join(&ann.video_id);
            render_video(&dir, "frame", video, &tubes, Some(ann), cfg.eval.render_min_score)?;
        }
        records.extend(tubes.iter().map(|t| PredictionRecord::from_video_tube(&ann.video_id, t)));
    }
    write_predictions(&records, BufWriter::new(File::create(cfg.output_dir.join(PREDICTIONS_FILE))?))?;
    let annotations: Vec<AnnotationSet> = data.into_iter().map(|(_, a)| a).collect();
    let summary = evaluate_records(&records, &annotations, cfg.model.classes, cfg.eval.iou_thresh, cfg.eval.size_buckets)?;
    write_metrics(cfg, &summary, &cfg.output_dir)?;
    Ok(summary)
}

pub fn write_metrics(cfg: &ExperimentConfig, s: &EvalSummary, dir: &Path) -> Result<()> {
    write_frame_csv(&s.frame, File::create(dir.join(FRAME_AP_FILE))?)?;
    write_video_csv(&s.video, File::create(dir.join(VIDEO_AP_FILE))?)?;
    let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    w.write_record(["name", "frame_map", "ap_small", "ap_medium", "ap_large", "vap20", "vap50", "vap50_95"])?;
    let bucket = |k: usize| {
        s.frame
            .buckets
            .as_ref()
            .and_then(|b| b[k].mean)
            .map_or_else(String::new, fmt6)
    };
    w.write_record([
        cfg.name.clone(),
        fmt6(s.frame_map()),
        bucket(0),
        bucket(1),
        bucket(2),
        fmt6(s.vap20()),
        fmt6(s.vap50()),
        fmt6(s.video.at_50_95.mean.unwrap_or(0.0)),
    ])?;
    w.flush()?;
    Ok(())
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Train, then evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let report = run_train(cfg)?;
    let model = Model::new(cfg.model.clone())?;
    evaluate_model(cfg, &model, &report.params)
}

/// Links per-clip prediction records from `input` into video tubes at `output`.
pub fn link_file(input: &Path, output: &Path, iou_min: f64) -> Result<usize> {
    let records = read_predictions(BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?))?;
    let linked = tubelet_core::linking::link_records(&records, iou_min)?;
    write_predictions(&linked, BufWriter::new(File::create(output)?))?;
    Ok(linked.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    DecoderLayers,
    AttentionMode,
    QueryMode,
    MatchingMode,
    Supervision,
}

impl FromStr for AblationAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "decoder_layers" => Self::DecoderLayers,
            "attention_mode" => Self::AttentionMode,
            "query_mode" => Self::QueryMode,
            "matching_mode" => Self::MatchingMode,
            "supervision" => Self::Supervision,
            _ => bail!("unknown ablation axis {s:?}"),
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DecoderLayers => "decoder_layers",
            Self::AttentionMode => "attention_mode",
            Self::QueryMode => "query_mode",
            Self::MatchingMode => "matching_mode",
            Self::Supervision => "supervision",
        })
    }
}

impl AblationAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::DecoderLayers => &["0", "1", "3", "6"],
            Self::AttentionMode => &["full", "factorised"],
            Self::QueryMode => &["factorised", "independent", "per_action"],
            Self::MatchingMode => &["per_frame", "tubelet"],
            Self::Supervision => &["all", "every_12", "every_24", "one_per_video"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            Self::DecoderLayers => cfg.model.layers = value.parse().with_context(|| format!("layer count {value:?}"))?,
            Self::AttentionMode => {
                cfg.model.attention = match value {
                    "full" => AttentionMode::Full,
                    "factorised" => AttentionMode::Factorised,
                    _ => bail!("unknown attention mode {value:?}"),
                }
            }
            Self::QueryMode => {
                (cfg.model.query_mode, cfg.model.binding) = match value {
                    "factorised" => (QueryMode::Factorised, QueryBinding::Person),
                    "independent" => (QueryMode::Independent, QueryBinding::Person),
                    "per_action" => (QueryMode::Factorised, QueryBinding::Action),
                    _ => bail!("unknown query mode {value:?}"),
                }
            }
            Self::MatchingMode => cfg.matching = value.parse()?,
            Self::Supervision => cfg.supervision = value.parse()?,
        }
        cfg.name = format!("{}-{self}-{value}", base.name);
        cfg.output_dir = base.output_dir.join(format!("ablate-{self}")).join(value);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub frame_map: f64,
    pub vap20: f64,
    pub vap50: f64,
    pub vap50_95: f64,
    /// One decoder layer at the arm's configuration.
    pub gflops_per_layer: f64,
    pub params: usize,
}

pub const ABLATION_HEADER: [&str; 7] = ["setting", "frame_map", "vap20", "vap50", "vap50_95", "gflops_per_layer", "params"];

/// Trains and evaluates every value of `axis` with the base seeds, writing
/// `ablation_<axis>.csv` next to the per-arm run directories.
pub fn ablate(base: &ExperimentConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let arms = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(arms.len());
    for (value, cfg) in values.iter().zip(&arms) {
        let s = run_experiment(cfg)?;
        rows.push(AblationRow {
            setting: value.clone(),
            frame_map: s.frame_map(),
            vap20: s.vap20(),
            vap50: s.vap50(),
            vap50_95: s.video.at_50_95.mean.unwrap_or(0.0),
            gflops_per_layer: flop_count(&cfg.model, cfg.model.attention),
            params: Model::new(cfg.model.clone())?.init_params(0).num_scalars(),
        });
    }
    std::fs::create_dir_all(&base.output_dir)?;
    let mut w = csv::Writer::from_path(base.output_dir.join(format!("ablation_{axis}.csv")))?;
    w.write_record(ABLATION_HEADER)?;
    for r in &rows {
        w.write_record([
            r.setting.clone(),
            fmt6(r.frame_map),
            fmt6(r.vap20),
            fmt6(r.vap50),
            fmt6(r.vap50_95),
            format!("{:.9}", r.gflops_per_layer),
            r.params.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
