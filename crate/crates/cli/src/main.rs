use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tubelet_cli::experiment::{eval_split, link_file, train_split, write_metrics};
use tubelet_cli::{ablate, evaluate_records, run_eval, run_train, AblationAxis, ExperimentConfig};
use tubelet_core::data::{AnnotationSet, Video};
use tubelet_core::linking::read_predictions;
use tubelet_core::render::render_video;

#[derive(Parser)]
#[command(name = "tubelet", version, about = "Train, evaluate and link tubelet detectors on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `per_frame` or `tubelet`.
    #[arg(long)]
    matching: Option<String>,
    /// `all`, `every_<k>` or `one_per_video`.
    #[arg(long)]
    supervision: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut o = Vec::new();
        if let Some(d) = &self.output_dir {
            o.push(format!("output_dir={:?}", d.display().to_string()));
        }
        if let Some(v) = self.seed {
            o.push(format!("seed={v}"));
        }
        if let Some(v) = self.steps {
            o.push(format!("optim.steps={v}"));
        }
        if let Some(v) = self.lr {
            o.push(format!("optim.lr={v:e}"));
        }
        if let Some(v) = self.batch_size {
            o.push(format!("optim.batch_size={v}"));
        }
        if let Some(v) = &self.matching {
            o.push(format!("matching={v:?}"));
        }
        if let Some(v) = &self.supervision {
            o.push(format!("supervision={v:?}"));
        }
        // explicit --set wins over the convenience flags
        o.extend(self.overrides.iter().cloned());
        ExperimentConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic training or evaluation split to a directory.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// `train` or `eval`.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model and save its checkpoint, log and resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the evaluation split, or score a prediction file.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score this prediction file instead of running a model.
        #[arg(long, requires = "annotations")]
        predictions: Option<PathBuf>,
        /// Directory of annotation `.json` files for `--predictions`.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Train and evaluate each value of one configuration axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// decoder_layers, attention_mode, query_mode, matching_mode or supervision.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults otherwise.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Link per-clip tubelet records into video tubes.
    Link {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        iou_min: f64,
    },
    /// Draw predicted tubes (and optionally ground truth) over a video.
    Render {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
    },
}

fn load_annotation_dir(dir: &Path) -> Result<Vec<AnnotationSet>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| AnnotationSet::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Generate { cfg, out: dir, split } => {
            let cfg = cfg.resolve()?;
            let data = match split.as_str() {
                "train" => train_split(&cfg)?,
                "eval" => eval_split(&cfg)?,
                _ => bail!("unknown split {split:?}"),
            };
            std::fs::create_dir_all(&dir)?;
            for (video, ann) in &data {
                video.save(&dir.join(format!("{}.video", ann.video_id)))?;
                ann.save(&dir.join(format!("{}.json", ann.video_id)))?;
            }
            writeln!(out, "wrote {} videos to {}", data.len(), dir.display())?;
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let report = run_train(&cfg)?;
            if let (Some(first), Some(last)) = (report.log.first(), report.log.last()) {
                writeln!(out, "loss {:.4} -> {:.4} over {} steps", first.total, last.total, cfg.optim.steps)?;
            }
            writeln!(out, "checkpoint {}", report.checkpoint.display())?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            predictions,
            annotations,
        } => {
            let cfg = cfg.resolve()?;
            let summary = match (predictions, annotations) {
                (Some(p), Some(a)) => {
                    let records = read_predictions(BufReader::new(File::open(&p).with_context(|| format!("opening {}", p.display()))?))?;
                    let anns = load_annotation_dir(&a)?;
                    let s = evaluate_records(&records, &anns, cfg.model.classes, cfg.eval.iou_thresh, cfg.eval.size_buckets)?;
                    std::fs::create_dir_all(&cfg.output_dir)?;
                    write_metrics(&cfg, &s, &cfg.output_dir)?;
                    s
                }
                _ => run_eval(&cfg, checkpoint.as_deref())?,
            };
            writeln!(
                out,
                "frame mAP {:.4}  vAP20 {:.4}  vAP50 {:.4}  ({})",
                summary.frame_map(),
                summary.vap20(),
                summary.vap50(),
                cfg.output_dir.display()
            )?;
        }
        Command::Ablate { cfg, axis, values } => {
            let cfg = cfg.resolve()?;
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            for r in ablate(&cfg, axis, &values)? {
                writeln!(
                    out,
                    "{axis}={:<14} frame mAP {:.4}  vAP20 {:.4}  vAP50 {:.4}  GFLOPs/layer {:.4}",
                    r.setting, r.frame_map, r.vap20, r.vap50, r.gflops_per_layer
                )?;
            }
        }
        Command::Link { input, output, iou_min } => {
            let n = link_file(&input, &output, iou_min)?;
            writeln!(out, "{n} tubes written to {}", output.display())?;
        }
        Command::Render {
            predictions,
            video,
            annotations,
            out: dir,
            min_score,
        } => {
            let video_data = Video::load(&video)?;
            let ann = annotations.as_deref().map(AnnotationSet::load).transpose()?;
            let records = read_predictions(BufReader::new(File::open(&predictions)?))?;
            let id = ann.as_ref().map_or_else(
                || video.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                |a| a.video_id.clone(),
            );
            let tubes = records
                .iter()
                .filter(|r| r.video_id == id)
                .enumerate()
                .map(|(i, r)| r.to_video_tube(i))
                .collect::<tubelet_core::Result<Vec<_>>>()?;
            let paths = render_video(&dir, &id, &video_data, &tubes, ann.as_ref(), min_score)?;
            writeln!(out, "{} frames rendered to {}", paths.len(), dir.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
