//! The tubelet detector: encoder, decoder, heads and their manual backward pass.

mod attention;
pub mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod flops;
mod layers;
mod output;
mod params;
mod tensor;

pub use attention::{grouped_attention, Group, Groups};
pub use config::{AttentionMode, EncoderConfig, ModelConfig, QueryBinding, QueryMode};
pub use decoder::{DecoderTrace, QuerySet};
pub use encoder::{FeatureMap, TemporalUpsample};
pub use flops::{flop_breakdown, flop_breakdown_from_groups, flop_count, FlopBreakdown};
pub use layers::standardise_rows;
pub use output::TubeletSet;
pub use params::{Gradients, Init, ModelParams, ParamSpec};
pub use tensor::Tensor;

use decoder::Decoder;
use encoder::{Encoder, EncoderCache};
use params::ParamRegistry;

use crate::error::{Error, Result};
use crate::loss::LossGradients;

/// Options for a full forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep the activations needed by [`Model::backward`].
    pub retain: bool,
    /// Enables decoder dropout with masks drawn from this seed.
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self {
            retain: true,
            dropout_seed: None,
        }
    }

    pub fn inference() -> Self {
        Self::default()
    }
}

/// Everything a forward pass produced, with the caches for backward when retained.
#[derive(Debug, Clone)]
pub struct Trace {
    pub features: FeatureMap,
    pub decoder: DecoderTrace,
    pub output: TubeletSet,
    encoder: Option<EncoderCache>,
}

impl Trace {
    pub fn is_retained(&self) -> bool {
        self.encoder.is_some() && self.decoder.has_cache()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::default();
        let encoder = Encoder::new(&mut reg, &config);
        let decoder = Decoder::new(&mut reg, &config);
        Ok(Self {
            config,
            encoder,
            decoder,
            specs: reg.specs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.specs, seed)
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let ok = params.values.len() == self.specs.len()
            && self
                .specs
                .iter()
                .zip(&params.values)
                .zip(&params.names)
                .all(|((s, v), n)| s.shape == v.shape && &s.name == n);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameter store does not match the model layout".into()))
        }
    }

    pub fn encoder_forward(&self, params: &ModelParams, clip: &Tensor) -> Result<FeatureMap> {
        Ok(self.encoder.forward(params, clip, false)?.0)
    }

    /// The learned queries, or `None` when the model has no decoder layers.
    pub fn queries(&self, params: &ModelParams) -> Option<QuerySet> {
        self.decoder.queries(params)
    }

    /// Runs the decoder and heads on a feature map, retaining the trace.
    pub fn decoder_forward(
        &self,
        params: &ModelParams,
        x: &FeatureMap,
        q: Option<&QuerySet>,
    ) -> Result<(TubeletSet, DecoderTrace)> {
        self.decoder.forward(params, x, q, None, true)
    }

    /// Accumulates decoder gradients into `grads` and returns the feature-map gradient.
    pub fn decoder_backward(
        &self,
        params: &ModelParams,
        grads: &mut Gradients,
        trace: &DecoderTrace,
        output: &TubeletSet,
        upstream: &LossGradients,
    ) -> Result<Vec<f64>> {
        self.decoder
            .backward(params, grads, trace, output, &upstream.boxes, &upstream.probs)
    }

    pub fn forward(&self, params: &ModelParams, clip: &Tensor, opts: ForwardOptions) -> Result<Trace> {
        let (features, encoder) = self.encoder.forward(params, clip, opts.retain)?;
        let q = self.decoder.queries(params);
        let (output, decoder) = self
            .decoder
            .forward(params, &features, q.as_ref(), opts.dropout_seed, opts.retain)?;
        Ok(Trace {
            features,
            decoder,
            output,
            encoder,
        })
    }

    /// Predictions only.
    pub fn predict(&self, params: &ModelParams, clip: &Tensor) -> Result<TubeletSet> {
        Ok(self.forward(params, clip, ForwardOptions::inference())?.output)
    }

    /// Adds the gradients of the upstream loss to `grads`.
    pub fn backward_into(
        &self,
        params: &ModelParams,
        grads: &mut Gradients,
        trace: &Trace,
        upstream: &LossGradients,
    ) -> Result<()> {
        let enc = trace.encoder.as_ref().ok_or(Error::MissingTrace)?;
        let dx = self.decoder_backward(params, grads, &trace.decoder, &trace.output, upstream)?;
        self.encoder.backward(params, grads, enc, &dx);
        Ok(())
    }

    /// Adds the gradients of the upstream loss to the store's own accumulators.
    pub fn backward(&self, params: &mut ModelParams, trace: &Trace, upstream: &LossGradients) -> Result<()> {
        let mut grads = std::mem::replace(&mut params.grads, Gradients { tensors: Vec::new() });
        let r = self.backward_into(params, &mut grads, trace, upstream);
        params.grads = grads;
        r
    }
}

/// Deterministic parameter initialisation for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    Ok(Model::new(config.clone())?.init_params(seed))
}
