//! Full detector: frozen ViT with PEFT hooks, forgery style mixture on the
//! final tokens, and a two-layer MLP head whose hidden activations feed the
//! single-center loss.

use crate::backbone::{forward_features, BackboneConfig, Init, NoPeft, ParamSpec, PeftHooks, Preset};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, ParamSet, Tensor, Var};
use crate::peft::{ForgeryPeft, PeftConfig};
use crate::rng::Rng;
use crate::style_mix::{forgery_style_mixture, DomainBatchMeta, MixConfig, MixOutcome};
use crate::Mode;

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    /// Width of the head's hidden layer (the SCL feature dimension).
    pub head_hidden: usize,
    /// Pixels in `[0, 1]` are standardized as `(x - mean) / std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let backbone = BackboneConfig::preset(preset);
        let peft = PeftConfig::for_backbone(&backbone);
        let head_hidden = if preset.is_desk() { 32 } else { 256 };
        ModelConfig { backbone, peft, head_hidden, pixel_mean: 0.5, pixel_std: 0.25 }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.peft.validate(&self.backbone)?;
        if self.head_hidden == 0 {
            return Err(Error::InvalidConfig("model.head_hidden must be positive".into()));
        }
        if !(self.pixel_std.is_finite() && self.pixel_std > 0.0 && self.pixel_mean.is_finite()) {
            return Err(Error::InvalidConfig("pixel normalization constants must be finite with std > 0".into()));
        }
        Ok(())
    }

    pub fn head_specs(&self) -> Vec<ParamSpec> {
        let (d, h) = (self.backbone.dim, self.head_hidden);
        vec![
            ParamSpec::trainable("head.fc1.weight", &[d, h], Init::Normal(1.0 / (d as f64).sqrt())),
            ParamSpec::trainable("head.fc1.bias", &[h], Init::Zeros),
            ParamSpec::trainable("head.fc2.weight", &[h, 1], Init::Normal(1.0 / (h as f64).sqrt())),
            ParamSpec::trainable("head.fc2.bias", &[1], Init::Zeros),
        ]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        specs.extend(self.peft.param_specs(&self.backbone));
        specs.extend(self.head_specs());
        specs
    }

    /// Default SCL margin: `0.3 * sqrt(head_hidden)`.
    pub fn default_margin(&self) -> f64 {
        0.3 * (self.head_hidden as f64).sqrt()
    }
}

/// Materializes backbone surrogate weights, PEFT layers and the head.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    crate::backbone::materialize(&config.param_specs(), seed)
}

/// `[batch, C, H, W]` pixels in `[0, 1]` to standardized model input.
pub fn normalize_images(config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let (m, s) = (config.pixel_mean, config.pixel_std);
    let data = images.data().iter().map(|x| (x - m) / s).collect();
    Tensor::new(images.shape().to_vec(), data)
}

/// Batch metadata and randomness for the training-time mixture.
pub struct MixtureContext<'a> {
    pub meta: &'a DomainBatchMeta,
    pub rng: &'a mut Rng,
    pub config: &'a MixConfig,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Final token features from the extractor, `[batch, tokens, d]`.
    pub tokens: Var,
    /// Tokens after the mixture (the same node when it did not run).
    pub mixed_tokens: Var,
    /// Head input, `[batch, d]`.
    pub cls: Var,
    /// Head hidden activations, `[batch, head_hidden]`.
    pub features: Var,
    /// Fake-class logits, `[batch]`.
    pub logits: Var,
    pub mixture: MixOutcome,
}

fn head(g: &mut Graph, params: &ParamSet, cls: Var) -> Result<(Var, Var)> {
    let w1 = g.param(params, "head.fc1.weight")?;
    let b1 = g.param(params, "head.fc1.bias")?;
    let w2 = g.param(params, "head.fc2.weight")?;
    let b2 = g.param(params, "head.fc2.bias")?;
    let hidden = g.matmul(cls, w1)?;
    let hidden = g.add(hidden, b1)?;
    let features = g.gelu(hidden)?;
    let out = g.matmul(features, w2)?;
    let out = g.add(out, b2)?;
    let batch = g.shape(out)[0];
    let logits = g.reshape(out, &[batch])?;
    Ok((features, logits))
}

/// Runs the detector with explicit hooks. `images` holds raw `[0, 1]` pixels.
pub fn forward_with_hooks(
    g: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    images: &Tensor,
    hooks: &dyn PeftHooks,
    mode: Mode,
    mixture: Option<MixtureContext<'_>>,
) -> Result<ModelOutput> {
    let input = g.constant(normalize_images(config, images)?);
    let feats = forward_features(g, params, &config.backbone, input, hooks, mode)?;
    let (mixed_tokens, outcome) = match mixture {
        Some(ctx) => forgery_style_mixture(g, feats.tokens, ctx.meta, ctx.rng, mode, ctx.config)?,
        None => (feats.tokens, MixOutcome::inactive()),
    };
    let cls = if mixed_tokens == feats.tokens {
        feats.cls
    } else {
        let batch = g.shape(mixed_tokens)[0];
        let row = g.narrow(mixed_tokens, 1, 0, 1)?;
        g.reshape(row, &[batch, config.backbone.dim])?
    };
    let (features, logits) = head(g, params, cls)?;
    Ok(ModelOutput { tokens: feats.tokens, mixed_tokens, cls, features, logits, mixture: outcome })
}

/// Runs the detector with the PEFT modules enabled by `config`.
pub fn forward(
    g: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    images: &Tensor,
    mode: Mode,
    mixture: Option<MixtureContext<'_>>,
) -> Result<ModelOutput> {
    let hooks = ForgeryPeft::from_config(&config.peft);
    forward_with_hooks(g, params, config, images, &hooks, mode, mixture)
}

/// Same head on the frozen extractor without any PEFT deltas.
pub fn forward_baseline(g: &mut Graph, params: &ParamSet, config: &ModelConfig, images: &Tensor) -> Result<ModelOutput> {
    forward_with_hooks(g, params, config, images, &NoPeft, Mode::Infer, None)
}

/// Fake-class probabilities in inference mode.
pub fn predict(params: &ParamSet, config: &ModelConfig, images: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = forward(&mut g, params, config, images, Mode::Infer, None)?;
    Ok(g.value(out.logits).data().iter().map(|z| sigmoid(*z)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::count_trainable;

    #[test]
    fn trainable_mask_follows_namespace() {
        let cfg = ModelConfig::preset(Preset::Desk);
        let params = init_model(&cfg, 3).unwrap();
        for (name, t) in params.iter() {
            let expect = name.starts_with(crate::peft::PEFT_PREFIX) || name.starts_with(HEAD_PREFIX);
            assert_eq!(t.requires_grad(), expect, "{name}");
        }
        assert_eq!(params.trainable().map(|(_, t)| t.numel()).sum::<usize>(), count_trainable(&cfg).grand_total);
    }

    #[test]
    fn predictions_are_probabilities() {
        let cfg = ModelConfig::preset(Preset::Desk);
        let params = init_model(&cfg, 3).unwrap();
        let images = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7) % 13) as f64 / 13.0).unwrap();
        let p = predict(&params, &cfg, &images).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
