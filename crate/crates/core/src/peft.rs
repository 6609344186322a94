//! Trainable modules: LoRA on the q/k/v projections and the CDC adapter that
//! runs in parallel to each frozen FFN.
//!
//! Both start as exact identity deltas: LoRA's up-projection and the adapter's
//! final 1x1 convolution are zero-initialized.

use serde::Serialize;

use crate::backbone::{frozen_mlp, BackboneConfig, Init, ParamSpec, PeftHooks, Projection};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParamSet, Tensor, Var};

pub const PEFT_PREFIX: &str = "peft.";

#[derive(Debug, Clone, PartialEq)]
pub struct PeftConfig {
    /// LoRA rank `r`; 0 disables LoRA.
    pub lora_rank: usize,
    /// Adapter bottleneck channels `c`; 0 disables the adapter.
    pub adapter_width: usize,
}

impl PeftConfig {
    /// `c = 32` puts the ViT-B trainable total (LoRA r=8, adapter, 768->256->1
    /// head) at 1,349,889, within 1% of the reference 1.34M.
    pub const CALIBRATED_ADAPTER_WIDTH: usize = 32;

    pub fn for_backbone(backbone: &BackboneConfig) -> Self {
        let adapter_width = if backbone.preset.is_desk() { 8 } else { Self::CALIBRATED_ADAPTER_WIDTH };
        PeftConfig { lora_rank: 8, adapter_width }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.lora_rank > backbone.dim {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {} exceeds hidden width {}",
                self.lora_rank, backbone.dim
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self, backbone: &BackboneConfig) -> Vec<ParamSpec> {
        let (d, r, c) = (backbone.dim, self.lora_rank, self.adapter_width);
        let mut specs = Vec::new();
        for b in 0..backbone.depth {
            if r > 0 {
                for proj in Projection::ALL {
                    let p = lora_prefix(b, proj);
                    specs.push(ParamSpec::trainable(format!("{p}.down"), &[d, r], Init::Normal(1.0 / (d as f64).sqrt())));
                    specs.push(ParamSpec::trainable(format!("{p}.up"), &[r, d], Init::Zeros));
                }
            }
            if c > 0 {
                let p = adapter_prefix(b);
                specs.push(ParamSpec::trainable(format!("{p}.down.weight"), &[d, c], Init::Normal(1.0 / (d as f64).sqrt())));
                specs.push(ParamSpec::trainable(format!("{p}.down.bias"), &[c], Init::Zeros));
                specs.push(ParamSpec::trainable(format!("{p}.cdc.weight"), &[c, c, 3, 3], Init::Normal(1.0 / (9.0 * c as f64).sqrt())));
                specs.push(ParamSpec::trainable(format!("{p}.cdc.bias"), &[c], Init::Zeros));
                specs.push(ParamSpec::trainable(format!("{p}.up.weight"), &[c, d], Init::Zeros));
                specs.push(ParamSpec::trainable(format!("{p}.up.bias"), &[d], Init::Zeros));
            }
        }
        specs
    }
}

fn lora_prefix(block: usize, proj: Projection) -> String {
    format!("peft.blocks.{block}.lora_{proj}")
}

fn adapter_prefix(block: usize) -> String {
    format!("peft.blocks.{block}.adapter")
}

/// LoRA matrices bound on a graph: `down: [d, r]`, `up: [r, d]`.
#[derive(Debug, Clone, Copy)]
pub struct LoraLayer {
    pub down: Var,
    pub up: Var,
    pub rank: usize,
}

impl LoraLayer {
    pub fn new(g: &Graph, down: Var, up: Var) -> Result<Self> {
        let (sd, su) = (g.shape(down), g.shape(up));
        if sd.len() != 2 || su.len() != 2 || sd[1] != su[0] || sd[0] != su[1] {
            return Err(Error::shape("lora", format!("down {sd:?}, up {su:?}")));
        }
        if sd[1] > sd[0] {
            return Err(Error::InvalidConfig(format!("LoRA rank {} exceeds hidden width {}", sd[1], sd[0])));
        }
        Ok(LoraLayer { down, up, rank: sd[1] })
    }

    pub fn bind(g: &mut Graph, params: &ParamSet, block: usize, proj: Projection) -> Result<Self> {
        let p = lora_prefix(block, proj);
        let down = g.param(params, &format!("{p}.down"))?;
        let up = g.param(params, &format!("{p}.up"))?;
        LoraLayer::new(g, down, up)
    }

    /// `h · W_down · W_up`.
    pub fn delta(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let low = g.matmul(h, self.down)?;
        g.matmul(low, self.up)
    }
}

/// `h · W_frozen + h · W_down · W_up`. The frozen projection's bias is applied
/// by the caller.
pub fn lora_forward(g: &mut Graph, h: Var, w_frozen: Var, layer: &LoraLayer) -> Result<Var> {
    let base = g.matmul(h, w_frozen)?;
    let delta = layer.delta(g, h)?;
    g.add(base, delta)
}

/// CDC adapter bound on a graph. 1x1 convolutions are stored as matrices
/// acting on the channel axis (`down: [d, c]`, `up: [c, d]`).
#[derive(Debug, Clone, Copy)]
pub struct AdapterLayer {
    pub down_weight: Var,
    pub down_bias: Var,
    pub cdc_weight: Var,
    pub cdc_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
    pub width: usize,
}

impl AdapterLayer {
    pub fn bind(g: &mut Graph, params: &ParamSet, block: usize) -> Result<Self> {
        let p = adapter_prefix(block);
        let mut get = |s: &str| g.param(params, &format!("{p}.{s}"));
        let layer = AdapterLayer {
            down_weight: get("down.weight")?,
            down_bias: get("down.bias")?,
            cdc_weight: get("cdc.weight")?,
            cdc_bias: get("cdc.bias")?,
            up_weight: get("up.weight")?,
            up_bias: get("up.bias")?,
            width: 0,
        };
        let width = g.shape(layer.down_weight)[1];
        Ok(AdapterLayer { width, ..layer })
    }

    /// Adapter output for `h: [batch, tokens, d]`. Patch tokens are laid out on
    /// a `grid x grid` map; the CLS position receives a zero delta.
    pub fn delta(&self, g: &mut Graph, h: Var, grid: usize) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("adapter", format!("expected [B, T, d], got {shape:?}")));
        }
        let (batch, tokens, dim) = (shape[0], shape[1], shape[2]);
        let patches = tokens.checked_sub(1).unwrap_or(0);
        if patches == 0 || grid * grid != patches {
            return Err(Error::shape(
                "adapter",
                format!("{patches} patch tokens do not form a {grid}x{grid} grid"),
            ));
        }
        let c = self.width;
        let x = g.narrow(h, 1, 1, patches)?;
        let x = g.matmul(x, self.down_weight)?;
        let x = g.add(x, self.down_bias)?;
        let x = g.reshape(x, &[batch, grid, grid, c])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        let x = g.cdc(x, self.cdc_weight)?;
        let bias = g.reshape(self.cdc_bias, &[c, 1, 1])?;
        let x = g.add(x, bias)?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[batch, patches, c])?;
        let x = g.matmul(x, self.up_weight)?;
        let x = g.add(x, self.up_bias)?;
        let cls = g.constant(Tensor::zeros(&[batch, 1, dim]));
        g.concat(&[cls, x], 1)
    }
}

/// `MLP(h) + Adapter(h)` for `block`.
pub fn adapter_forward(g: &mut Graph, params: &ParamSet, block: usize, h: Var, layer: &AdapterLayer, grid: usize) -> Result<Var> {
    let mlp = frozen_mlp(g, params, block, h)?;
    let delta = layer.delta(g, h, grid)?;
    g.add(mlp, delta)
}

/// Central difference convolution on plain tensors; see [`Graph::cdc`].
pub fn cdc_apply(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(weights.clone());
    let out = g.cdc(xv, wv)?;
    Ok(g.value(out).clone())
}

/// Plain 3x3 convolution with the same padding as [`cdc_apply`].
pub fn conv3x3(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(weights.clone());
    let out = g.conv3x3(xv, wv)?;
    Ok(g.value(out).clone())
}

/// LoRA and/or adapter hooks reading `peft.*` parameters.
#[derive(Debug, Clone, Copy)]
pub struct ForgeryPeft {
    pub lora: bool,
    pub adapter: bool,
}

impl ForgeryPeft {
    pub fn from_config(config: &PeftConfig) -> Self {
        ForgeryPeft { lora: config.lora_rank > 0, adapter: config.adapter_width > 0 }
    }
}

impl PeftHooks for ForgeryPeft {
    fn projection_delta(&self, g: &mut Graph, params: &ParamSet, block: usize, proj: Projection, h: Var) -> Result<Option<Var>> {
        if !self.lora {
            return Ok(None);
        }
        let layer = LoraLayer::bind(g, params, block, proj)?;
        layer.delta(g, h).map(Some)
    }

    fn ffn_delta(&self, g: &mut Graph, params: &ParamSet, block: usize, h: Var, grid: usize) -> Result<Option<Var>> {
        if !self.adapter {
            return Ok(None);
        }
        let layer = AdapterLayer::bind(g, params, block)?;
        layer.delta(g, h, grid).map(Some)
    }
}

/// Trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBudget {
    pub lora_total: usize,
    pub adapter_total: usize,
    pub head_total: usize,
    pub grand_total: usize,
}

/// Closed-form trainable-parameter accounting.
pub fn count_trainable(config: &ModelConfig) -> ParamBudget {
    let bb = &config.backbone;
    let (d, r, c) = (bb.dim, config.peft.lora_rank, config.peft.adapter_width);
    let lora_total = bb.depth * 3 * (d * r + r * d);
    let adapter_total = if c == 0 { 0 } else { bb.depth * (d * c + c + 9 * c * c + c + c * d + d) };
    let h = config.head_hidden;
    let head_total = d * h + h + h + 1;
    ParamBudget { lora_total, adapter_total, head_total, grand_total: lora_total + adapter_total + head_total }
}

/// Counts trainable parameters by walking a parameter list and classifying
/// each entry by name.
pub fn enumerate_trainable<'a>(entries: impl IntoIterator<Item = (&'a str, usize, bool)>) -> ParamBudget {
    let mut budget = ParamBudget { lora_total: 0, adapter_total: 0, head_total: 0, grand_total: 0 };
    for (name, numel, trainable) in entries {
        if !trainable {
            continue;
        }
        if name.contains(".lora_") {
            budget.lora_total += numel;
        } else if name.contains(".adapter.") {
            budget.adapter_total += numel;
        } else {
            budget.head_total += numel;
        }
        budget.grand_total += numel;
    }
    budget
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let x = Tensor::full(&[1, 2, 4, 5], 5.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let out = cdc_apply(&x, &w).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 5]);
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(cdc_apply(&x, &w).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_3x3_kernel_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(cdc_apply(&x, &w).is_err());
    }

    #[test]
    fn lora_hand_example() {
        let mut g = Graph::new();
        let h = g.constant(tensor(&[1, 2], &[1.0, 1.0]));
        let w = g.constant(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let down = g.constant(tensor(&[2, 1], &[1.0, 0.0]));
        let up = g.constant(tensor(&[1, 2], &[0.0, 1.0]));
        let layer = LoraLayer::new(&g, down, up).unwrap();
        let out = lora_forward(&mut g, h, w, &layer).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn lora_zero_up_is_frozen_projection() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).cos()).unwrap());
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.3).sin()).unwrap());
        let down = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64).unwrap());
        let up = g.constant(Tensor::zeros(&[2, 4]));
        let layer = LoraLayer::new(&g, down, up).unwrap();
        let out = lora_forward(&mut g, h, w, &layer).unwrap();
        let base = g.matmul(h, w).unwrap();
        assert_eq!(g.value(out), g.value(base));
    }

    #[test]
    fn lora_rank_above_width_is_rejected() {
        let mut g = Graph::new();
        let down = g.constant(Tensor::zeros(&[2, 3]));
        let up = g.constant(Tensor::zeros(&[3, 2]));
        assert!(LoraLayer::new(&g, down, up).is_err());
        let cfg = BackboneConfig::preset(Preset::Desk);
        assert!(PeftConfig { lora_rank: 64, adapter_width: 8 }.validate(&cfg).is_err());
    }

    #[test]
    fn lora_rank_zero_counts_nothing() {
        let mut cfg = ModelConfig::preset(Preset::VitB);
        cfg.peft.lora_rank = 0;
        assert_eq!(count_trainable(&cfg).lora_total, 0);
    }

    #[test]
    fn vit_b_lora_budget() {
        let cfg = ModelConfig::preset(Preset::VitB);
        let budget = count_trainable(&cfg);
        assert_eq!(budget.lora_total, 442_368);
        assert_eq!(budget.grand_total, budget.lora_total + budget.adapter_total + budget.head_total);
    }

    #[test]
    fn non_square_patch_count_is_rejected() {
        let cfg = ModelConfig::preset(Preset::Desk);
        let params = crate::model::init_model(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 11, cfg.backbone.dim]));
        let layer = AdapterLayer::bind(&mut g, &params, 0).unwrap();
        assert!(layer.delta(&mut g, h, 3).is_err());
    }
}
