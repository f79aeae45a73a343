//! Experiment configuration: a TOML file, optionally edited with
//! `section.key=value` overrides, validated before anything runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tubelet_core::data::{AugmentConfig, SceneSpec, Supervision};
use tubelet_core::loss::LossConfig;
use tubelet_core::matching::MatchingMode;
use tubelet_core::model::{EncoderConfig, ModelConfig};
use tubelet_core::train::{OptimConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_videos: usize,
    /// Held-out videos; 0 evaluates on the training videos.
    pub eval_videos: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_videos: 4,
            eval_videos: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub size_buckets: bool,
    /// Frames between clip starts for long videos; 0 means half a clip.
    pub stride: usize,
    pub link_iou_min: f64,
    pub min_confidence: f64,
    /// How many evaluation videos get overlay renders.
    pub render_videos: usize,
    pub render_min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            size_buckets: true,
            stride: 0,
            link_iou_min: 0.1,
            min_confidence: 0.0,
            render_videos: 1,
            render_min_score: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Parameter initialisation and batch sampling.
    pub seed: u64,
    /// Decoder dropout during training.
    pub dropout: bool,
    pub matching: MatchingMode,
    pub supervision: Supervision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            output_dir: PathBuf::from("runs/toy"),
            seed: 0,
            dropout: false,
            matching: MatchingMode::Tubelet,
            supervision: Supervision::All,
            data: DataConfig::default(),
            model: toy_model(),
            loss: LossConfig::default(),
            optim: OptimConfig {
                lr: 2e-3,
                warmup_steps: 50,
                steps: 1000,
                batch_size: 4,
                ..Default::default()
            },
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// A small model for 64x64 RGB clips of 16 frames.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        frames: 16,
        queries: 4,
        classes: 4,
        layers: 2,
        d_dec: 32,
        d_mlp: 64,
        heads: 2,
        height: 64,
        width: 64,
        channels: 3,
        dropout: 0.1,
        encoder: EncoderConfig {
            patch_t: 2,
            patch_hw: 16,
            d_enc: 32,
            layers_spatial: 1,
            layers_temporal: 1,
            heads: 2,
            d_mlp: 64,
        },
        ..Default::default()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        let scene = &self.data.scene;
        scene.validate()?;
        if scene.width != self.model.width || scene.height != self.model.height {
            bail!(
                "scene is {}x{} but the model expects {}x{}",
                scene.width,
                scene.height,
                self.model.width,
                self.model.height
            );
        }
        if self.model.channels != 3 {
            bail!("synthetic scenes are RGB; model.channels must be 3");
        }
        if scene.classes != self.model.classes {
            bail!("scene has {} classes, model {}", scene.classes, self.model.classes);
        }
        if scene.frames < self.model.frames {
            bail!("videos of {} frames are shorter than a {}-frame clip", scene.frames, self.model.frames);
        }
        if self.data.train_videos == 0 {
            bail!("data.train_videos must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            bail!("eval.iou_thresh {} outside [0, 1]", self.eval.iou_thresh);
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            augment: self.augment.clone(),
            matching: self.matching,
            supervision: self.supervision,
            seed: self.seed.wrapping_add(1),
            dropout: self.dropout,
            log_every: 1,
            dump_dir: Some(self.output_dir.clone()),
        }
    }

    pub fn stride(&self) -> usize {
        if self.eval.stride == 0 {
            (self.model.frames / 2).max(1)
        } else {
            self.eval.stride
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file if given, then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => Self::default().to_toml()?,
        };
        Self::from_toml(&text, overrides)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{k} in {path:?} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
