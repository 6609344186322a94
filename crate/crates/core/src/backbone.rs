//! Plain ViT feature extractor with frozen weights and PEFT attachment points.
//!
//! Blocks are pre-norm: `x + MHSA(LN(x))` followed by `x + FFN(LN(x))`. The
//! PEFT hooks add their deltas to the q/k/v projections and to the FFN output;
//! with no hooks (or zero-initialized up-projections) the extractor is the
//! plain frozen ViT.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Tensor, Var};
use crate::rng;
use crate::Mode;

pub const BACKBONE_PREFIX: &str = "backbone.";
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    VitT,
    VitS,
    VitB,
    VitL,
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::VitT, Preset::VitS, Preset::VitB, Preset::VitL, Preset::Desk];

    pub fn is_desk(self) -> bool {
        self == Preset::Desk
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::VitT => "vit-t",
            Preset::VitS => "vit-s",
            Preset::VitB => "vit-b",
            Preset::VitL => "vit-l",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit-t" | "vit_t" | "vitt" => Ok(Preset::VitT),
            "vit-s" | "vit_s" | "vits" => Ok(Preset::VitS),
            "vit-b" | "vit_b" | "vitb" => Ok(Preset::VitB),
            "vit-l" | "vit_l" | "vitl" => Ok(Preset::VitL),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Standard deviation of the truncated-normal surrogate weights.
    pub init_std: f64,
}

impl BackboneConfig {
    pub fn preset(preset: Preset) -> Self {
        let (depth, dim, heads) = match preset {
            Preset::VitT => (12, 192, 3),
            Preset::VitS => (12, 384, 6),
            Preset::VitB => (12, 768, 12),
            Preset::VitL => (24, 1024, 16),
            Preset::Desk => (3, 32, 4),
        };
        let (image_size, patch_size) = if preset.is_desk() { (32, 8) } else { (224, 16) };
        BackboneConfig {
            preset,
            image_size,
            patch_size,
            channels: 3,
            depth,
            dim,
            heads,
            mlp_dim: 4 * dim,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::InvalidConfig("model.init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let patch_in = self.channels * self.patch_size * self.patch_size;
        let std = self.init_std;
        let mut specs = vec![
            ParamSpec::frozen("backbone.patch_embed.weight", &[patch_in, d], Init::TruncNormal(std)),
            ParamSpec::frozen("backbone.patch_embed.bias", &[d], Init::Zeros),
            ParamSpec::frozen("backbone.cls_token", &[1, 1, d], Init::TruncNormal(std)),
            ParamSpec::frozen("backbone.pos_embed", &[1, self.num_tokens(), d], Init::TruncNormal(std)),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("backbone.blocks.{b}.{s}");
            specs.push(ParamSpec::frozen(p("norm1.weight"), &[d], Init::Ones));
            specs.push(ParamSpec::frozen(p("norm1.bias"), &[d], Init::Zeros));
            for proj in Projection::ALL {
                specs.push(ParamSpec::frozen(p(&format!("attn.{proj}.weight")), &[d, d], Init::TruncNormal(std)));
                specs.push(ParamSpec::frozen(p(&format!("attn.{proj}.bias")), &[d], Init::Zeros));
            }
            specs.push(ParamSpec::frozen(p("attn.proj.weight"), &[d, d], Init::TruncNormal(std)));
            specs.push(ParamSpec::frozen(p("attn.proj.bias"), &[d], Init::Zeros));
            specs.push(ParamSpec::frozen(p("norm2.weight"), &[d], Init::Ones));
            specs.push(ParamSpec::frozen(p("norm2.bias"), &[d], Init::Zeros));
            specs.push(ParamSpec::frozen(p("mlp.fc1.weight"), &[d, self.mlp_dim], Init::TruncNormal(std)));
            specs.push(ParamSpec::frozen(p("mlp.fc1.bias"), &[self.mlp_dim], Init::Zeros));
            specs.push(ParamSpec::frozen(p("mlp.fc2.weight"), &[self.mlp_dim, d], Init::TruncNormal(std)));
            specs.push(ParamSpec::frozen(p("mlp.fc2.bias"), &[d], Init::Zeros));
        }
        specs.push(ParamSpec::frozen("backbone.norm.weight", &[d], Init::Ones));
        specs.push(ParamSpec::frozen("backbone.norm.bias", &[d], Init::Zeros));
        specs
    }

    /// Closed-form backbone parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let patch_in = self.channels * self.patch_size * self.patch_size;
        let stem = patch_in * d + d + d + self.num_tokens() * d;
        let block = 2 * d + 3 * (d * d + d) + (d * d + d) + 2 * d + (d * self.mlp_dim + self.mlp_dim) + (self.mlp_dim * d + d);
        stem + self.depth * block + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

/// Name, shape, mask and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn frozen(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), trainable: false, init }
    }

    pub fn trainable(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), trainable: true, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Draws the initial value from a stream keyed by the parameter name, so a
    /// parameter's value does not depend on which other parameters exist.
    pub fn materialize(&self, seed: u64) -> Result<Tensor> {
        let numel = self.numel();
        let data = match self.init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Normal(std) | Init::TruncNormal(std) => {
                let truncate = matches!(self.init, Init::TruncNormal(_));
                let key = self.name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
                let mut rng = rng::indexed_stream(seed, rng::STREAM_INIT, key);
                let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..numel)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if !truncate || v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(self.shape.clone(), data)
    }
}

/// Materializes `specs` into a [`ParamSet`].
pub fn materialize(specs: &[ParamSpec], seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for spec in specs {
        params.insert(spec.name.clone(), spec.materialize(seed)?, spec.trainable)?;
    }
    Ok(params)
}

/// Seeded stand-in for pretrained ViT weights; every entry is frozen.
pub fn init_surrogate_pretrained(config: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    materialize(&config.param_specs(), seed)
}

/// Final token features `[batch, tokens, d]` (CLS at index 0) and the CLS row.
#[derive(Debug, Clone, Copy)]
pub struct TokenFeatures {
    pub tokens: Var,
    pub cls: Var,
}

/// Extension points for trainable modules inside each block.
pub trait PeftHooks {
    /// Term added to the `proj` projection of the normalized hidden state `h`
    /// (`[batch, tokens, d]`) in `block`.
    fn projection_delta(&self, g: &mut Graph, params: &ParamSet, block: usize, proj: Projection, h: Var) -> Result<Option<Var>>;

    /// Term added to the FFN output for input `h` (`[batch, tokens, d]`).
    fn ffn_delta(&self, g: &mut Graph, params: &ParamSet, block: usize, h: Var, grid: usize) -> Result<Option<Var>>;
}

/// Plain ViT without trainable modules.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPeft;

impl PeftHooks for NoPeft {
    fn projection_delta(&self, _: &mut Graph, _: &ParamSet, _: usize, _: Projection, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn ffn_delta(&self, _: &mut Graph, _: &ParamSet, _: usize, _: Var, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

fn linear(g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn layer_norm(g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b, LN_EPS)
}

/// Splits images into patches, embeds them, prepends CLS and adds positions.
/// `images: [batch, channels, H, W]` with `H == W == image_size`.
pub fn patch_embed(g: &mut Graph, params: &ParamSet, config: &BackboneConfig, images: Var) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
        return Err(Error::shape("patch_embed", format!("images {shape:?}, expected [B, {c}, {s}, {s}]")));
    }
    let batch = shape[0];
    let grid = config.grid();
    let split = g.reshape(images, &[batch, c, grid, p, grid, p])?;
    let patches = g.permute(split, &[0, 2, 4, 1, 3, 5])?;
    let flat = g.reshape(patches, &[batch, grid * grid, c * p * p])?;
    let embedded = linear(g, params, "backbone.patch_embed", flat)?;

    let cls = g.param(params, "backbone.cls_token")?;
    let zeros = g.constant(Tensor::zeros(&[batch, 1, config.dim]));
    let cls_rows = g.add(zeros, cls)?;
    let tokens = g.concat(&[cls_rows, embedded], 1)?;
    let pos = g.param(params, "backbone.pos_embed")?;
    g.add(tokens, pos)
}

fn split_heads(g: &mut Graph, x: Var, batch: usize, tokens: usize, heads: usize, head_dim: usize) -> Result<Var> {
    let x = g.reshape(x, &[batch, tokens, heads, head_dim])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, tokens, head_dim])
}

fn attention(g: &mut Graph, params: &ParamSet, config: &BackboneConfig, block: usize, h: Var, hooks: &dyn PeftHooks) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    let (batch, tokens) = (shape[0], shape[1]);
    let (heads, head_dim) = (config.heads, config.head_dim());
    let mut qkv = Vec::with_capacity(3);
    for proj in Projection::ALL {
        let prefix = format!("backbone.blocks.{block}.attn.{proj}");
        let w = g.param(params, &format!("{prefix}.weight"))?;
        let mut y = g.matmul(h, w)?;
        if let Some(delta) = hooks.projection_delta(g, params, block, proj, h)? {
            y = g.add(y, delta)?;
        }
        let b = g.param(params, &format!("{prefix}.bias"))?;
        y = g.add(y, b)?;
        qkv.push(split_heads(g, y, batch, tokens, heads, head_dim)?);
    }
    let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
    let kt = g.transpose_last(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let mixed = g.bmm(weights, v)?;
    let mixed = g.reshape(mixed, &[batch, heads, tokens, head_dim])?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, &[batch, tokens, config.dim])?;
    linear(g, params, &format!("backbone.blocks.{block}.attn.proj"), mixed)
}

/// Frozen two-layer FFN of `block`.
pub fn frozen_mlp(g: &mut Graph, params: &ParamSet, block: usize, h: Var) -> Result<Var> {
    let hidden = linear(g, params, &format!("backbone.blocks.{block}.mlp.fc1"), h)?;
    let hidden = g.gelu(hidden)?;
    linear(g, params, &format!("backbone.blocks.{block}.mlp.fc2"), hidden)
}

/// Runs the full extractor. The returned tokens have passed the final norm.
pub fn forward_features(
    g: &mut Graph,
    params: &ParamSet,
    config: &BackboneConfig,
    images: Var,
    hooks: &dyn PeftHooks,
    _mode: Mode,
) -> Result<TokenFeatures> {
    let mut x = patch_embed(g, params, config, images)?;
    for block in 0..config.depth {
        let h = layer_norm(g, params, &format!("backbone.blocks.{block}.norm1"), x)?;
        let attn = attention(g, params, config, block, h, hooks)?;
        x = g.add(x, attn)?;

        let h = layer_norm(g, params, &format!("backbone.blocks.{block}.norm2"), x)?;
        let mut ffn = frozen_mlp(g, params, block, h)?;
        if let Some(delta) = hooks.ffn_delta(g, params, block, h, config.grid())? {
            ffn = g.add(ffn, delta)?;
        }
        x = g.add(x, ffn)?;
    }
    let tokens = layer_norm(g, params, "backbone.norm", x)?;
    let cls = g.narrow(tokens, 1, 0, 1)?;
    let batch = g.shape(tokens)[0];
    let cls = g.reshape(cls, &[batch, config.dim])?;
    Ok(TokenFeatures { tokens, cls })
}
