//! Adam with cosine step-size decay and global-norm clipping, plus the toy
//! training loop over synthetic clips.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, decenter_sample, subsample_supervision, AnnotationSet, AugmentConfig, ClipSample, Provenance, Supervision, Video};
use crate::error::{Error, Result};
use crate::loss::{loss_backward, total_loss, LossConfig};
use crate::matching::MatchingMode;
use crate::model::{ForwardOptions, Gradients, Model, ModelParams, QueryBinding, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak step size.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to; 0 disables clipping.
    pub clip_norm: f64,
    /// Linear warmup before the cosine decay starts.
    pub warmup_steps: usize,
    /// Final step size as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
            min_lr_ratio: 0.0,
            steps: 2000,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("eps must be positive and clip_norm non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!("min_lr_ratio {} outside [0, 1]", self.min_lr_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Step size at step `step` (0-based) of `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &OptimConfig) -> Self {
        let zeros = || params.values.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from `params.grads` with step size `lr`.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .values
            .iter_mut()
            .zip(&params.grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Everything the toy trainer needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub matching: MatchingMode,
    pub supervision: Supervision,
    /// Seeds batch sampling, augmentation and supervision thinning.
    pub seed: u64,
    /// Apply the model's dropout rate during training.
    pub dropout: bool,
    /// Record a log entry every this many steps (the last step is always logged).
    pub log_every: usize,
    /// Where a non-finite loss leaves its diagnostic dump.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            matching: MatchingMode::Tubelet,
            supervision: Supervision::All,
            seed: 0,
            dropout: false,
            log_every: 1,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Batch means.
    pub l_box: f64,
    pub l_iou: f64,
    pub l_class: f64,
    pub total: f64,
    /// Before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
struct NanDump<'a> {
    step: usize,
    lr: f64,
    sample: usize,
    provenance: &'a Provenance,
    annotations: &'a AnnotationSet,
    l_box: f64,
    l_iou: f64,
    l_class: f64,
}

fn sample_seed(base: u64, step: usize, slot: usize) -> u64 {
    base ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Draws the `slot`-th clip of the batch at `step`.
pub fn draw_sample(data: &[(Video, AnnotationSet)], model: &Model, cfg: &TrainConfig, step: usize, slot: usize) -> Result<ClipSample> {
    let seed = sample_seed(cfg.seed, step, slot);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (video, ann) = &data[rng.random_range(0..data.len())];
    let sample = decenter_sample(video, ann, model.config().frames, cfg.augment.rho, rng.random())?;
    if cfg.augment.is_identity() {
        return Ok(sample);
    }
    augment(
        &sample,
        &AugmentConfig {
            seed: rng.random(),
            ..cfg.augment.clone()
        },
    )
}

/// Ground truth in the form the query binding is trained against.
pub fn training_targets(binding: QueryBinding, ann: &AnnotationSet) -> AnnotationSet {
    match binding {
        QueryBinding::Person => ann.clone(),
        QueryBinding::Action => ann.split_by_action(),
    }
}

/// Applies the supervision scheme to every video once, before training.
pub fn thin_supervision(data: &[(Video, AnnotationSet)], scheme: Supervision, seed: u64) -> Vec<(Video, AnnotationSet)> {
    data.iter()
        .enumerate()
        .map(|(i, (v, a))| (v.clone(), subsample_supervision(a, scheme, seed.wrapping_add(i as u64))))
        .collect()
}

/// Runs `cfg.optim.steps` updates on `params`. `data` carries the already
/// thinned supervision. `on_log` sees every recorded entry as it happens.
pub fn train(
    model: &Model,
    params: &mut ModelParams,
    data: &[(Video, AnnotationSet)],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.loss.validate()?;
    cfg.optim.validate()?;
    cfg.augment.validate()?;
    model.check_params(params)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut adam = Adam::new(params, &cfg.optim);
    let mut log = Vec::new();
    let mut batch_grads = Gradients::zeros_like(&params.values);
    let binding = model.config().binding;
    for step in 0..cfg.optim.steps {
        let lr = cfg.optim.lr_at(step);
        batch_grads.zero();
        let mut sums = [0.0; 4];
        for slot in 0..cfg.optim.batch_size {
            let sample = draw_sample(data, model, cfg, step, slot)?;
            let gt = training_targets(binding, &sample.annotations);
            let opts = ForwardOptions {
                retain: true,
                dropout_seed: cfg.dropout.then(|| sample_seed(!cfg.seed, step, slot)),
            };
            let trace = model.forward(params, &sample.video.to_tensor(), opts)?;
            // non-finite outputs usually surface first as a matching cost
            let loss = match total_loss(&trace.output, &gt, cfg.matching, &cfg.loss) {
                Err(Error::NonFinite(what)) => {
                    return Err(nan_abort(cfg, step, lr, slot, &sample, [f64::NAN; 4], &what));
                }
                r => r?,
            };
            if !loss.total.is_finite() {
                let terms = [loss.l_box, loss.l_iou, loss.l_class, loss.total];
                return Err(nan_abort(cfg, step, lr, slot, &sample, terms, "loss"));
            }
            let upstream = loss_backward(&loss, &trace.output)?;
            model.backward_into(params, &mut batch_grads, &trace, &upstream)?;
            sums[0] += loss.l_box;
            sums[1] += loss.l_iou;
            sums[2] += loss.l_class;
            sums[3] += loss.total;
        }
        let b = cfg.optim.batch_size as f64;
        batch_grads.scale(1.0 / b);
        let grad_norm = if cfg.optim.clip_norm > 0.0 {
            batch_grads.clip_global_norm(cfg.optim.clip_norm)
        } else {
            batch_grads.global_norm()
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
        }
        std::mem::swap(&mut params.grads, &mut batch_grads);
        adam.step(params, lr);
        std::mem::swap(&mut params.grads, &mut batch_grads);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.optim.steps {
            let entry = StepLog {
                step,
                lr,
                l_box: sums[0] / b,
                l_iou: sums[1] / b,
                l_class: sums[2] / b,
                total: sums[3] / b,
                grad_norm,
            };
            on_log(&entry);
            log.push(entry);
        }
    }
    params.grads.zero();
    Ok(log)
}

fn nan_abort(cfg: &TrainConfig, step: usize, lr: f64, slot: usize, sample: &ClipSample, terms: [f64; 4], what: &str) -> Error {
    let dump = NanDump {
        step,
        lr,
        sample: slot,
        provenance: &sample.provenance,
        annotations: &sample.annotations,
        l_box: terms[0],
        l_iou: terms[1],
        l_class: terms[2],
    };
    let mut msg = format!(
        "{what} {} at step {step}, batch slot {slot}, video {} from frame {}",
        terms[3], sample.provenance.video_id, sample.provenance.start
    );
    if let Some(dir) = &cfg.dump_dir {
        let path = dir.join(format!("nan_step{step}.json"));
        let written = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| Ok(std::fs::write(&path, serde_json::to_vec_pretty(&dump)?)?));
        match written {
            Ok(()) => msg.push_str(&format!("; batch dumped to {}", path.display())),
            Err(e) => msg.push_str(&format!("; dump failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}
