//! Experiment configuration as `section.key=value` lines.
//!
//! Sections are `model.`, `train.`, `mix.`, `loss.`, `data.` and `eval.`.
//! Unknown keys are errors. `model.preset` is applied before every other key,
//! wherever it appears, and resets the preset-dependent defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::Preset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::style_mix::MixConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Share of each batch drawn from real images.
    pub real_fraction: f64,
    /// Forgery domains used for training.
    pub domains: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    /// `None` resolves to `0.3 * sqrt(head_hidden)`.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_real: usize,
    pub n_per_domain: usize,
    pub n_domains: usize,
    pub frames_per_video: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub target_domains: Vec<u32>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub mix: MixConfig,
    pub loss: LossSettings,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::for_preset(Preset::VitB)
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.preset", "backbone preset: vit-t, vit-s, vit-b, vit-l or desk"),
    ("model.image_size", "input resolution in pixels"),
    ("model.patch_size", "patch side in pixels"),
    ("model.channels", "input channels"),
    ("model.depth", "transformer blocks"),
    ("model.dim", "hidden width"),
    ("model.heads", "attention heads"),
    ("model.mlp_dim", "FFN hidden width"),
    ("model.init_std", "std of the surrogate pretrained weights"),
    ("model.lora_rank", "LoRA rank on q/k/v (0 disables)"),
    ("model.adapter_width", "CDC adapter channels (0 disables)"),
    ("model.head_hidden", "head hidden width, also the SCL feature size"),
    ("model.pixel_mean", "pixel standardization mean"),
    ("model.pixel_std", "pixel standardization std"),
    ("train.seed", "root seed for every random stream"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam epsilon"),
    ("train.batch_size", "samples per batch"),
    ("train.iterations", "optimizer steps"),
    ("train.real_fraction", "share of real images per batch"),
    ("train.domains", "comma-separated training forgery domains"),
    ("mix.enabled", "forgery style mixture on/off"),
    ("mix.probability", "per-batch activation probability"),
    ("mix.alpha", "Beta distribution alpha"),
    ("mix.beta", "Beta distribution beta"),
    ("mix.ratio", "fraction of fake samples restyled when active"),
    ("mix.eps", "standard deviation floor"),
    ("mix.skip_tokens", "leading tokens excluded from the statistics"),
    ("loss.lambda", "weight of the single-center loss"),
    ("loss.margin", "single-center margin, or auto for 0.3*sqrt(head_hidden)"),
    ("data.n_real", "synthetic real images"),
    ("data.n_per_domain", "synthetic fake images per forgery domain"),
    ("data.n_domains", "synthetic forgery domains"),
    ("data.frames_per_video", "images sharing one video group id"),
    ("data.val_fraction", "share of groups in the val split"),
    ("data.test_fraction", "share of groups in the test split"),
    ("eval.threshold", "decision threshold on fake probability for ACC"),
    ("eval.target_domains", "comma-separated held-out forgery domains"),
    ("eval.batch_size", "images per scoring batch"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u32>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn for_preset(preset: Preset) -> Self {
        let model = ModelConfig::preset(preset);
        let desk = preset.is_desk();
        Config {
            train: TrainSettings {
                seed: 0,
                lr: if desk { 1e-3 } else { 3e-5 },
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: if desk { 16 } else { 48 },
                iterations: if desk { 500 } else { 30_000 },
                real_fraction: 0.5,
                domains: vec![1, 2, 3],
            },
            mix: MixConfig::default(),
            loss: LossSettings { lambda: if desk { 0.1 } else { 0.5 }, margin: None },
            data: DataConfig {
                n_real: if desk { 1440 } else { 4000 },
                n_per_domain: if desk { 480 } else { 1000 },
                n_domains: 4,
                frames_per_video: 4,
                val_fraction: 0.0,
                test_fraction: 0.25,
            },
            eval: EvalConfig { threshold: 0.5, target_domains: vec![4], batch_size: 64 },
            model,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.loss.lambda,
            margin: self.loss.margin.unwrap_or_else(|| self.model.default_margin()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mix.validate()?;
        self.loss_config().validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::InvalidConfig("train.lr must be positive".into()));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return Err(Error::InvalidConfig("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(t.eps > 0.0) {
            return Err(Error::InvalidConfig("train.eps must be positive".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::InvalidConfig("train.batch_size must be at least 2".into()));
        }
        if !(t.real_fraction > 0.0 && t.real_fraction < 1.0) {
            return Err(Error::InvalidConfig("train.real_fraction must lie in (0, 1)".into()));
        }
        if t.domains.is_empty() || t.domains.contains(&0) {
            return Err(Error::InvalidConfig("train.domains must list forgery domains (ids >= 1)".into()));
        }
        let d = &self.data;
        if d.frames_per_video == 0 {
            return Err(Error::InvalidConfig("data.frames_per_video must be positive".into()));
        }
        if !(d.val_fraction >= 0.0 && d.test_fraction >= 0.0 && d.val_fraction + d.test_fraction < 1.0) {
            return Err(Error::InvalidConfig("data.val_fraction + data.test_fraction must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::InvalidConfig("eval.threshold must lie in [0, 1]".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::InvalidConfig("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, bb, t) = (&self.model, &self.model.backbone, &self.train);
        Ok(match key {
            "model.preset" => bb.preset.to_string(),
            "model.image_size" => bb.image_size.to_string(),
            "model.patch_size" => bb.patch_size.to_string(),
            "model.channels" => bb.channels.to_string(),
            "model.depth" => bb.depth.to_string(),
            "model.dim" => bb.dim.to_string(),
            "model.heads" => bb.heads.to_string(),
            "model.mlp_dim" => bb.mlp_dim.to_string(),
            "model.init_std" => bb.init_std.to_string(),
            "model.lora_rank" => m.peft.lora_rank.to_string(),
            "model.adapter_width" => m.peft.adapter_width.to_string(),
            "model.head_hidden" => m.head_hidden.to_string(),
            "model.pixel_mean" => m.pixel_mean.to_string(),
            "model.pixel_std" => m.pixel_std.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.real_fraction" => t.real_fraction.to_string(),
            "train.domains" => list(&t.domains),
            "mix.enabled" => self.mix.enabled.to_string(),
            "mix.probability" => self.mix.probability.to_string(),
            "mix.alpha" => self.mix.alpha.to_string(),
            "mix.beta" => self.mix.beta.to_string(),
            "mix.ratio" => self.mix.ratio.to_string(),
            "mix.eps" => self.mix.eps.to_string(),
            "mix.skip_tokens" => self.mix.skip_tokens.to_string(),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.margin" => self.loss.margin.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            "data.n_real" => self.data.n_real.to_string(),
            "data.n_per_domain" => self.data.n_per_domain.to_string(),
            "data.n_domains" => self.data.n_domains.to_string(),
            "data.frames_per_video" => self.data.frames_per_video.to_string(),
            "data.val_fraction" => self.data.val_fraction.to_string(),
            "data.test_fraction" => self.data.test_fraction.to_string(),
            "eval.threshold" => self.eval.threshold.to_string(),
            "eval.target_domains" => list(&self.eval.target_domains),
            "eval.batch_size" => self.eval.batch_size.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Sets one key. `model.preset` replaces the whole configuration with the
    /// preset's defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bb = &mut self.model.backbone;
        match key {
            "model.preset" => *self = Config::for_preset(v.parse()?),
            "model.image_size" => bb.image_size = parse(key, v)?,
            "model.patch_size" => bb.patch_size = parse(key, v)?,
            "model.channels" => bb.channels = parse(key, v)?,
            "model.depth" => bb.depth = parse(key, v)?,
            "model.dim" => bb.dim = parse(key, v)?,
            "model.heads" => bb.heads = parse(key, v)?,
            "model.mlp_dim" => bb.mlp_dim = parse(key, v)?,
            "model.init_std" => bb.init_std = parse(key, v)?,
            "model.lora_rank" => self.model.peft.lora_rank = parse(key, v)?,
            "model.adapter_width" => self.model.peft.adapter_width = parse(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v)?,
            "model.pixel_mean" => self.model.pixel_mean = parse(key, v)?,
            "model.pixel_std" => self.model.pixel_std = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.iterations" => self.train.iterations = parse(key, v)?,
            "train.real_fraction" => self.train.real_fraction = parse(key, v)?,
            "train.domains" => self.train.domains = parse_list(key, v)?,
            "mix.enabled" => self.mix.enabled = parse_bool(key, v)?,
            "mix.probability" => self.mix.probability = parse(key, v)?,
            "mix.alpha" => self.mix.alpha = parse(key, v)?,
            "mix.beta" => self.mix.beta = parse(key, v)?,
            "mix.ratio" => self.mix.ratio = parse(key, v)?,
            "mix.eps" => self.mix.eps = parse(key, v)?,
            "mix.skip_tokens" => self.mix.skip_tokens = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.margin" => {
                self.loss.margin = if v.eq_ignore_ascii_case("auto") { None } else { Some(parse(key, v)?) }
            }
            "data.n_real" => self.data.n_real = parse(key, v)?,
            "data.n_per_domain" => self.data.n_per_domain = parse(key, v)?,
            "data.n_domains" => self.data.n_domains = parse(key, v)?,
            "data.frames_per_video" => self.data.frames_per_video = parse(key, v)?,
            "data.val_fraction" => self.data.val_fraction = parse(key, v)?,
            "data.test_fraction" => self.data.test_fraction = parse(key, v)?,
            "eval.threshold" => self.eval.threshold = parse(key, v)?,
            "eval.target_domains" => self.eval.target_domains = parse_list(key, v)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs; the last `model.preset` goes first.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k.trim() == "model.preset") {
            self.set(k.trim(), v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k.trim() != "model.preset") {
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply(parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// Key list with defaults, for `--help`.
    pub fn help_text() -> String {
        let defaults = Config::default();
        let desk = Config::for_preset(Preset::Desk);
        let mut out = String::from("Config keys (default; desk preset default when different):\n");
        for (key, help) in KEYS {
            let a = defaults.get(key).expect("listed key");
            let b = desk.get(key).expect("listed key");
            let shown = if a == b { a } else { format!("{a}; desk {b}") };
            out.push_str(&format!("  {key:<24} {help} [{shown}]\n"));
        }
        out
    }
}

/// Splits `key=value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        pairs.push((k.trim(), v.trim()));
    }
    Ok(pairs)
}
